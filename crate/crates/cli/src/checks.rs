//! Self-contained correctness checks shared by `selftest` and the
//! acceptance suite.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use blockwatch_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointInfo};
use blockwatch_core::dataset::{generate, read_dataset, write_dataset, DatasetConfig, Sample, SampleMeta};
use blockwatch_core::model::{ModelConfig, ModelKind, Predictor};
use blockwatch_core::scene::{los_status, BaseStation, Blocker, Frame, LinkStatus, Rect, SceneState, User, Vec2};
use blockwatch_core::wireless::{beam_select, build_codebook, channel, ChannelMatrix, OfdmConfig, Path};
use blockwatch_core::Error;
use blockwatch_numerics::{grad_check, Graph, GruVars, Mode, NumericsError, RunningStats, Tensor, Var};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::default_scenario;
use crate::oracle;

/// Relative-error bound for smooth ops.
pub const SMOOTH_TOL: f64 = 1e-5;
/// Relative-error bound for compositions containing max-pool and ReLU kinks.
pub const COMPOSED_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name, passed, detail: detail.into() }
    }

    fn from_result(name: &'static str, r: Result<String, String>) -> Self {
        match r {
            Ok(d) => Self::new(name, true, d),
            Err(d) => Self::new(name, false, d),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Fixed random projection to a scalar so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> blockwatch_numerics::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let n = g.value(y).len();
    let w = g.constant(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

fn grad_entry(name: &'static str, tol: f64, r: blockwatch_numerics::Result<f64>) -> Check {
    match r {
        Ok(err) => Check::new(name, err < tol, format!("max relative error {err:.2e} (bound {tol:.0e})")),
        Err(e) => Check::new(name, false, e.to_string()),
    }
}

fn gru_vars(v: &[Var]) -> GruVars {
    GruVars { w_z: v[0], w_r: v[1], w_n: v[2], u_z: v[3], u_r: v[4], u_n: v[5], b_z: v[6], b_r: v[7], b_n: v[8] }
}

fn gru_params(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let mut p: Vec<_> = (0..3).map(|_| random(&[hidden, input], rng)).collect();
    p.extend((0..3).map(|_| random(&[hidden, hidden], rng)));
    p.extend((0..3).map(|_| random(&[hidden], rng)));
    p
}

/// Finite-difference checks of every differentiable op the predictor uses,
/// in 64-bit. `perturb_gru` deliberately corrupts the GRU backward pass.
pub fn gradient_checks(perturb_gru: Option<f64>) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    let inputs = [random(&[4, 8], &mut rng), random(&[5, 8], &mut rng), random(&[5], &mut rng)];
    let r = grad_check(
        |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, 1)
        },
        &inputs,
        1e-5,
    );
    out.push(grad_entry("dense gradient", SMOOTH_TOL, r));

    let inputs = [random(&[2, 3, 7, 7], &mut rng), random(&[4, 3, 5, 5], &mut rng)];
    let r = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 2)?;
            weighted_sum(g, y, 2)
        },
        &inputs,
        1e-5,
    );
    out.push(grad_entry("conv2d gradient", SMOOTH_TOL, r));

    let inputs = [random(&[4, 2, 3, 3], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    let r = grad_check(
        |g, v| {
            let mut stats = RunningStats::new(2);
            let y = g.batch_norm2d(v[0], v[1], v[2], Mode::Train, &mut stats)?;
            weighted_sum(g, y, 3)
        },
        &inputs,
        1e-5,
    );
    out.push(grad_entry("batchnorm (train) gradient", SMOOTH_TOL, r));

    let inputs = [random(&[2, 2, 5, 5], &mut rng)];
    let r = grad_check(
        |g, v| {
            let y = g.maxpool2d(v[0], 2, 1)?;
            weighted_sum(g, y, 4)
        },
        &inputs,
        1e-6,
    );
    out.push(grad_entry("maxpool gradient", COMPOSED_TOL, r));

    let mut inputs = vec![random(&[2, 4], &mut rng), random(&[2, 3], &mut rng)];
    inputs.extend(gru_params(4, 3, &mut rng));
    let r = grad_check(
        |g, v| {
            if let Some(eps) = perturb_gru {
                g.perturb_gru_backward(eps);
            }
            let h1 = g.gru_cell(v[0], v[1], gru_vars(&v[2..]))?;
            let h2 = g.gru_cell(v[0], h1, gru_vars(&v[2..]))?;
            weighted_sum(g, h2, 5)
        },
        &inputs,
        1e-5,
    );
    out.push(grad_entry("gru_cell gradient", SMOOTH_TOL, r));

    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..2)).collect();
    let inputs = [random(&[8, 2], &mut rng)];
    let r = grad_check(|g, v| g.softmax_cross_entropy(v[0], &labels), &inputs, 1e-5);
    out.push(grad_entry("softmax cross-entropy gradient", SMOOTH_TOL, r));

    for kind in [ModelKind::Vision, ModelKind::Baseline] {
        let name = match kind {
            ModelKind::Vision => "embedder + predictor gradient",
            ModelKind::Baseline => "beam-only predictor gradient",
        };
        out.push(grad_entry(name, COMPOSED_TOL, composed_grad(kind, perturb_gru)));
    }
    out
}

fn micro_config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        window: 3,
        embedding_dim: 6,
        hidden: 4,
        dropout: 0.25,
        beams: 8,
        width: 8,
        height: 8,
        conv_channels: 2,
        dense_hidden: 5,
        ..Default::default()
    }
}

fn micro_samples(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let frames = (0..cfg.window)
                .map(|_| {
                    let levels = (0..3 * cfg.width * cfg.height).map(|_| rng.random_range(0..=255u8)).collect();
                    Arc::new(Frame::from_levels(cfg.width, cfg.height, levels).expect("sized to the config"))
                })
                .collect();
            Sample {
                frames,
                beams: (0..cfg.window).map(|_| rng.random_range(0..cfg.beams as u16)).collect(),
                label: LinkStatus::from_blocked(i % 2 == 1),
                meta: SampleMeta { episode: i as u64, user: 0, scenario: 0, start_step: 0, start_time: 0.0 },
            }
        })
        .collect()
}

/// The full forward pass (image embedder, interleaved two-layer GRU,
/// classifier, loss) on 8x8 frames, differentiated with respect to every
/// parameter and every input pixel.
fn composed_grad(kind: ModelKind, perturb_gru: Option<f64>) -> blockwatch_numerics::Result<f64> {
    let cfg = micro_config(kind);
    let model = Predictor::<f32>::new(cfg.clone()).map_err(|e| NumericsError::Usage(e.to_string()))?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let samples = micro_samples(&cfg, 3, &mut rng);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut inputs = model.inputs(&refs).map_err(|e| NumericsError::Usage(e.to_string()))?;
    // Continuous pixels keep max-pool windows free of exact ties.
    inputs.images.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>());
    let labels: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    let mut tensors: Vec<Tensor<f64>> = model.store.iter().map(|(_, t)| t.clone()).collect();
    let n_params = tensors.len();
    if kind == ModelKind::Vision {
        tensors.push(inputs.images.clone());
    }
    grad_check(
        |g, vars| {
            if let Some(eps) = perturb_gru {
                g.perturb_gru_backward(eps);
            }
            let mut m = model.clone();
            let images = (kind == ModelKind::Vision).then(|| vars[n_params]);
            // Same dropout mask on every evaluation.
            let mut mask_rng = ChaCha8Rng::seed_from_u64(1);
            let logits = m
                .logits(g, &vars[..n_params], images, &inputs, Mode::Train, &mut mask_rng)
                .map_err(|e| NumericsError::Usage(e.to_string()))?;
            g.softmax_cross_entropy(logits, &labels)
        },
        &tensors,
        1e-6,
    )
}

fn random_paths(n: usize, cfg: &OfdmConfig, rng: &mut ChaCha8Rng) -> Vec<Path> {
    (0..n)
        .map(|_| Path {
            gain: Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            delay: rng.random_range(0.0..cfg.max_delay()),
            azimuth: rng.random_range(-PI..PI),
            elevation: rng.random_range(-0.5..0.5),
        })
        .collect()
}

/// A scene with arbitrary base-station, user and blocker placement.
fn random_scene(rng: &mut ChaCha8Rng) -> SceneState {
    let pt = |rng: &mut ChaCha8Rng| Vec2::new(rng.random_range(0.0..60.0), rng.random_range(0.0..20.0));
    let users = (0..3).map(|id| User { id, position: pt(rng), velocity: Vec2::default() }).collect();
    let blockers = (0..rng.random_range(0..4))
        .map(|_| Blocker {
            center: pt(rng),
            half_extents: Vec2::new(rng.random_range(0.5..6.0), rng.random_range(0.5..3.0)),
            velocity: Vec2::default(),
        })
        .collect();
    SceneState {
        bs: BaseStation { position: pt(rng), boresight: PI / 2.0 },
        users,
        blockers,
        scatterers: vec![],
        bounds: Rect { min: Vec2::new(0.0, 0.0), max: Vec2::new(60.0, 20.0) },
        time: 0.0,
    }
}

/// Library results against the literal oracles; `instances` sets the
/// number of beam-selection channels and of LOS scenes.
pub fn oracle_checks(instances: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut out = Vec::new();

    let r = (|| {
        let mut worst: f64 = 0.0;
        for cfg in [OfdmConfig { subcarriers: 16, cyclic_prefix: 4, sample_time: 5e-9, antennas: 4 }, OfdmConfig::default()] {
            for _ in 0..5 {
                let paths = random_paths(4, &cfg, &mut rng);
                let fast = channel(&paths, &cfg).map_err(|e| e.to_string())?;
                let slow = oracle::direct_channel(&paths, &cfg);
                worst = fast.as_slice().iter().zip(&slow).map(|(a, b)| (a - b).norm()).fold(worst, f64::max);
            }
        }
        let detail = format!("max deviation {worst:.2e} over 10 path sets (bound 1e-10)");
        if worst < 1e-10 { Ok(detail) } else { Err(detail) }
    })();
    out.push(Check::from_result("channel vs direct summation", r));

    let r = (|| {
        let ofdm = OfdmConfig::default();
        let cb = build_codebook(ofdm.antennas, 64).map_err(|e| e.to_string())?;
        let (k, m) = (ofdm.subcarriers, ofdm.antennas);
        for i in 0..instances {
            let data = (0..k * m).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let h = ChannelMatrix::from_rows(k, m, data).map_err(|e| e.to_string())?;
            let (fast, slow) = (beam_select(&h, &cb).map_err(|e| e.to_string())?, oracle::exhaustive_beam(&h, &cb));
            if fast != slow {
                return Err(format!("instance {i}: beam_select {fast}, exhaustive sweep {slow}"));
            }
        }
        Ok(format!("{instances} random channels, identical indices"))
    })();
    out.push(Check::from_result("beam_select vs exhaustive sweep", r));

    let r = (|| {
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let (batch, input, hidden) = (3, 5, 4);
            let x = random(&[batch, input], &mut rng);
            let h = random(&[batch, hidden], &mut rng);
            let p = gru_params(input, hidden, &mut rng);
            let mut g = Graph::<f64>::new();
            let (xv, hv) = (g.leaf(x.clone()), g.leaf(h.clone()));
            let pv: Vec<Var> = p.iter().map(|t| g.leaf(t.clone())).collect();
            let y = g.gru_cell(xv, hv, gru_vars(&pv)).map_err(|e| e.to_string())?;
            let weights = oracle::GruWeights { mats: std::array::from_fn(|i| p[i].data()), input, hidden };
            let slow = oracle::gru_step(x.data(), h.data(), &weights, batch);
            worst = g.value(y).iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
        let detail = format!("max deviation {worst:.2e} over 20 cells (bound 1e-6)");
        if worst < 1e-6 { Ok(detail) } else { Err(detail) }
    })();
    out.push(Check::from_result("gru_cell vs scalar loop", r));

    let r = (|| {
        let (mut links, mut blocked, mut fine_resolved) = (0, 0, 0);
        for i in 0..instances {
            let s = random_scene(&mut rng);
            for u in 0..s.users.len() {
                let exact = los_status(&s, u).map_err(|e| e.to_string())?;
                links += 1;
                blocked += exact.index();
                if exact == oracle::sampled_los(&s, u, 1000) {
                    continue;
                }
                // A corner clip shorter than the 1000-point spacing; only a
                // far denser sampling can confirm it.
                if exact != oracle::sampled_los(&s, u, 2_000_000) {
                    return Err(format!("scene {i} user {u}: los_status says {exact:?}, dense sampling disagrees"));
                }
                fine_resolved += 1;
            }
        }
        Ok(format!(
            "{instances} scenes, {links} links ({blocked} blocked); {fine_resolved} sub-spacing corner clips confirmed by 2e6-point sampling"
        ))
    })();
    out.push(Check::from_result("los_status vs point sampling", r));
    out
}

/// Dataset and checkpoint files survive a round trip and reject damage.
pub fn format_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let r = (|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("check.bwds");
        let data = DatasetConfig { episodes: 6, ..Default::default() };
        let (train, _, _) = generate(&[default_scenario()], &OfdmConfig::default(), &data, 1).map_err(|e| e.to_string())?;
        write_dataset(&train, &path).map_err(|e| e.to_string())?;
        let back = read_dataset(&path).map_err(|e| e.to_string())?;
        if back != train {
            return Err("read-back differs from the written dataset".into());
        }
        let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let at = bytes.len() - 10;
        bytes[at] ^= 0x40;
        std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
        match read_dataset(&path) {
            Err(Error::Checksum { .. }) => Ok(format!("{} samples round-trip; flipped byte caught by checksum", train.len())),
            other => Err(format!("flipped byte not caught: {:?}", other.map(|d| d.len()))),
        }
    })();
    out.push(Check::from_result("dataset round trip", r));

    let r = (|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("check.bwck");
        let model = Predictor::<f32>::new(micro_config(ModelKind::Vision)).map_err(|e| e.to_string())?;
        let ck = Checkpoint { model, info: CheckpointInfo { iteration: 3, ..Default::default() } };
        save_checkpoint(&ck, &path).map_err(|e| e.to_string())?;
        if load_checkpoint(&path).map_err(|e| e.to_string())? != ck {
            return Err("read-back differs from the saved checkpoint".into());
        }
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        std::fs::write(&path, &bytes[..bytes.len() - 3]).map_err(|e| e.to_string())?;
        match load_checkpoint(&path) {
            Err(Error::Truncated { .. }) => Ok("weights round-trip; truncation detected".into()),
            other => Err(format!("truncation not caught: {:?}", other.map(|c| c.info))),
        }
    })();
    out.push(Check::from_result("checkpoint round trip", r));
    out
}

/// Everything `selftest` runs, sized to finish well within a minute.
pub fn selftest(perturb_gru: Option<f64>) -> Vec<Check> {
    let mut all = gradient_checks(perturb_gru);
    all.extend(oracle_checks(2000));
    all.extend(format_checks());
    all
}
