use blockwatch_numerics::{grad_check, Graph, GruVars, Mode, RunningStats, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Projects an arbitrary tensor onto a scalar with fixed random weights so
/// that every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> blockwatch_numerics::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let w = g.constant(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

#[test]
fn dense_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [random(&[4, 8], &mut rng), random(&[5, 8], &mut rng), random(&[5], &mut rng)];
    let err = grad_check(
        |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, 1)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "dense rel err {err}");
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = [random(&[2, 3, 9, 9], &mut rng), random(&[4, 3, 5, 5], &mut rng)];
    let err = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 2)?;
            weighted_sum(g, y, 2)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "conv rel err {err}");
}

#[test]
fn conv2d_strided_and_rectangular_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for (xshape, kshape, stride, pad) in [
        ([2, 2, 7, 7], [3, 2, 3, 3], 2, 1),
        ([1, 2, 6, 7], [2, 2, 2, 4], 1, 1),
        ([1, 1, 5, 9], [2, 1, 1, 7], 1, 3),
    ] {
        let inputs = [random(&xshape, &mut rng), random(&kshape, &mut rng)];
        let err = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                weighted_sum(g, y, 5)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "conv {kshape:?} stride {stride} rel err {err}");
    }
}

#[test]
fn batchnorm_train_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = [random(&[4, 2, 3, 3], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    let err = grad_check(
        |g, v| {
            let mut stats = RunningStats::new(2);
            let y = g.batch_norm2d(v[0], v[1], v[2], Mode::Train, &mut stats)?;
            weighted_sum(g, y, 3)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "batchnorm rel err {err}");
}

#[test]
fn maxpool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = [random(&[2, 2, 5, 5], &mut rng)];
    let err = grad_check(
        |g, v| {
            let y = g.maxpool2d(v[0], 2, 1)?;
            weighted_sum(g, y, 4)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-3, "maxpool rel err {err}");
}

#[test]
fn maxpool_matches_window_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&[1, 1, 5, 5], &mut rng);
    let mut g = Graph::<f64>::new();
    let v = g.leaf(x.clone());
    let y = g.maxpool2d(v, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4]);
    let d = x.data();
    for oy in 0..4 {
        for ox in 0..4 {
            let brute = [d[oy * 5 + ox], d[oy * 5 + ox + 1], d[(oy + 1) * 5 + ox], d[(oy + 1) * 5 + ox + 1]]
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(g.value(y)[oy * 4 + ox], brute);
        }
    }
}

#[test]
fn softmax_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..2)).collect();
    let inputs = [random(&[8, 2], &mut rng)];
    let err = grad_check(|g, v| g.softmax_cross_entropy(v[0], &labels), &inputs, 1e-5).unwrap();
    assert!(err < 1e-5, "ce rel err {err}");
}

#[test]
fn activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inputs = [random(&[3, 4], &mut rng)];
    let err = grad_check(
        |g, v| {
            let a = g.tanh(v[0])?;
            let b = g.sigmoid(a)?;
            let c = g.relu(v[0])?;
            let d = g.add(b, c)?;
            let e = g.scale(d, 0.7)?;
            let f = g.sub(e, v[0])?;
            weighted_sum(g, f, 5)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "activation rel err {err}");
}

struct GruFixture {
    mats: Vec<Tensor<f64>>,
}

impl GruFixture {
    fn new(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mats = Vec::new();
        for _ in 0..3 {
            mats.push(random(&[hidden, input], &mut rng));
        }
        for _ in 0..3 {
            mats.push(random(&[hidden, hidden], &mut rng));
        }
        for _ in 0..3 {
            mats.push(random(&[hidden], &mut rng));
        }
        Self { mats }
    }

    fn vars(v: &[Var]) -> GruVars {
        GruVars {
            w_z: v[0],
            w_r: v[1],
            w_n: v[2],
            u_z: v[3],
            u_r: v[4],
            u_n: v[5],
            b_z: v[6],
            b_r: v[7],
            b_n: v[8],
        }
    }
}

/// Straight transcription of the gate equations, one scalar at a time.
fn gru_scalar_oracle(x: &[f64], h: &[f64], p: &[Tensor<f64>], batch: usize, input: usize, hidden: usize) -> Vec<f64> {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut out = vec![0.0; batch * hidden];
    for b in 0..batch {
        for j in 0..hidden {
            let mut az = p[6].data()[j];
            let mut ar = p[7].data()[j];
            let mut an = p[8].data()[j];
            let (mut hz, mut hr, mut hn) = (0.0, 0.0, 0.0);
            for i in 0..input {
                let xi = x[b * input + i];
                az += p[0].data()[j * input + i] * xi;
                ar += p[1].data()[j * input + i] * xi;
                an += p[2].data()[j * input + i] * xi;
            }
            for i in 0..hidden {
                let hi = h[b * hidden + i];
                hz += p[3].data()[j * hidden + i] * hi;
                hr += p[4].data()[j * hidden + i] * hi;
                hn += p[5].data()[j * hidden + i] * hi;
            }
            let z = sig(az + hz);
            let r = sig(ar + hr);
            let n = (an + r * hn).tanh();
            out[b * hidden + j] = (1.0 - z) * n + z * h[b * hidden + j];
        }
    }
    out
}

#[test]
fn gru_matches_scalar_loop_oracle() {
    let fx = GruFixture::new(4, 3, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = random(&[2, 4], &mut rng);
    let h = random(&[2, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone());
    let hv = g.leaf(h.clone());
    let pv: Vec<Var> = fx.mats.iter().map(|t| g.leaf(t.clone())).collect();
    let out = g.gru_cell(xv, hv, GruFixture::vars(&pv)).unwrap();
    let expect = gru_scalar_oracle(x.data(), h.data(), &fx.mats, 2, 4, 3);
    for (a, b) in g.value(out).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn gru_gradients() {
    let fx = GruFixture::new(4, 3, 23);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut inputs = vec![random(&[2, 4], &mut rng), random(&[2, 3], &mut rng)];
    inputs.extend(fx.mats.iter().cloned());
    let err = grad_check(
        |g, v| {
            let h1 = g.gru_cell(v[0], v[1], GruFixture::vars(&v[2..]))?;
            let h2 = g.gru_cell(v[0], h1, GruFixture::vars(&v[2..]))?;
            weighted_sum(g, h2, 6)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "gru rel err {err}");
}

#[test]
fn perturbed_gru_backward_fails_gradient_check() {
    let fx = GruFixture::new(4, 3, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mut inputs = vec![random(&[2, 4], &mut rng), random(&[2, 3], &mut rng)];
    inputs.extend(fx.mats.iter().cloned());
    let err = grad_check(
        |g, v| {
            g.perturb_gru_backward(0.05);
            let h = g.gru_cell(v[0], v[1], GruFixture::vars(&v[2..]))?;
            weighted_sum(g, h, 7)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err > 1e-2, "perturbation went unnoticed: {err}");
}

#[test]
fn gru_zero_parameters_give_zero_state() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&[1, 3], vec![0.4, -2.0, 7.0]).unwrap();
    let h = g.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
    let zeros = |g: &mut Graph<f64>, shape: &[usize]| g.leaf(Tensor::zeros(shape));
    let p = GruVars {
        w_z: zeros(&mut g, &[2, 3]),
        w_r: zeros(&mut g, &[2, 3]),
        w_n: zeros(&mut g, &[2, 3]),
        u_z: zeros(&mut g, &[2, 2]),
        u_r: zeros(&mut g, &[2, 2]),
        u_n: zeros(&mut g, &[2, 2]),
        b_z: zeros(&mut g, &[2]),
        b_r: zeros(&mut g, &[2]),
        b_n: zeros(&mut g, &[2]),
    };
    let out = g.gru_cell(x, h, p).unwrap();
    assert_eq!(g.value(out), &[0.0, 0.0]);
}

#[test]
fn gru_saturated_update_gate_copies_state() {
    let fx = GruFixture::new(3, 2, 31);
    let mut g = Graph::<f64>::new();
    let x = g.constant(&[1, 3], vec![0.3, 0.1, -0.5]).unwrap();
    let h = g.constant(&[1, 2], vec![0.25, -0.75]).unwrap();
    let mut pv: Vec<Var> = fx.mats.iter().map(|t| g.leaf(t.clone())).collect();
    pv[6] = g.constant(&[2], vec![60.0, 60.0]).unwrap();
    let out = g.gru_cell(x, h, GruFixture::vars(&pv)).unwrap();
    assert!((g.value(out)[0] - 0.25).abs() < 1e-12);
    assert!((g.value(out)[1] + 0.75).abs() < 1e-12);
}

#[test]
fn gru_dimension_error_names_gate() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[1, 3]));
    let h = g.leaf(Tensor::zeros(&[1, 2]));
    let mut leaf = |shape: &[usize]| g.leaf(Tensor::zeros(shape));
    let p = GruVars {
        w_z: leaf(&[2, 3]),
        w_r: leaf(&[2, 4]),
        w_n: leaf(&[2, 3]),
        u_z: leaf(&[2, 2]),
        u_r: leaf(&[2, 2]),
        u_n: leaf(&[2, 2]),
        b_z: leaf(&[2]),
        b_r: leaf(&[2]),
        b_n: leaf(&[2]),
    };
    let msg = g.gru_cell(x, h, p).unwrap_err().to_string();
    assert!(msg.contains("reset gate"), "{msg}");
}

#[test]
fn forward_is_deterministic_for_fixed_seed() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::uniform(&[4, 6], 1.0, &mut rng));
        let y = g.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
        g.value(y).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn finite_checks_flag_nan_producing_ops() {
    let mut g = Graph::<f32>::new();
    g.set_finite_checks(true);
    let x = g.constant(&[1], vec![f32::MAX]).unwrap();
    let err = g.scale(x, 10.0).unwrap_err();
    assert_eq!(err, blockwatch_numerics::NumericsError::NonFinite { op: "scale" });
}

#[test]
fn batchnorm_gradients_on_feature_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let inputs = [random(&[9, 6, 1, 1], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)];
    let err = grad_check(
        |g, v| {
            let mut stats = RunningStats::new(6);
            let y = g.batch_norm2d(v[0], v[1], v[2], Mode::Train, &mut stats)?;
            weighted_sum(g, y, 5)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "batchnorm rel err {err}");
}
