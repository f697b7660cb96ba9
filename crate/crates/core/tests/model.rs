use std::sync::Arc;

use blockwatch_core::checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, CheckpointInfo};
use blockwatch_core::dataset::{Sample, SampleMeta};
use blockwatch_core::model::{sequence_layout, ModelConfig, ModelKind, Predictor, Step};
use blockwatch_core::scene::{Frame, LinkStatus};
use blockwatch_core::Error;
use blockwatch_numerics::{grad_check, Graph, Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(kind: ModelKind) -> ModelConfig {
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

fn random_frame(w: usize, h: usize, rng: &mut impl Rng) -> Arc<Frame> {
    let levels = (0..3 * w * h).map(|_| if rng.random::<f64>() < 0.3 { 255 } else { 0 }).collect();
    Arc::new(Frame::from_levels(w, h, levels).unwrap())
}

fn random_samples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Sample {
            frames: (0..cfg.window).map(|_| random_frame(cfg.width, cfg.height, &mut rng)).collect(),
            beams: (0..cfg.window).map(|_| rng.random_range(0..cfg.beams as u16)).collect(),
            label: LinkStatus::from_index(i % 2).unwrap(),
            meta: SampleMeta { episode: i as u64, user: 0, scenario: 0, start_step: 0, start_time: 0.0 },
        })
        .collect()
}

/// Runs one training-mode forward pass so batch-norm statistics exist.
fn warm_up(model: &mut Predictor, samples: &[Sample]) {
    let refs: Vec<&Sample> = samples.iter().collect();
    let inputs = model.inputs(&refs).unwrap();
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let images = (model.kind() == ModelKind::Vision).then(|| g.leaf(inputs.images.clone()));
    model.logits(&mut g, &params, images, &inputs, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
}

#[test]
fn default_sequence_has_sixteen_interleaved_steps() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.window, 8);
    let layout = sequence_layout(cfg.kind, cfg.window);
    assert_eq!(layout.len(), 16);
    for (i, pair) in layout.chunks(2).enumerate() {
        assert_eq!(pair, [Step::Image(i), Step::Beam(i)]);
    }
    assert_eq!(sequence_layout(ModelKind::Baseline, cfg.window).len(), 8);
}

#[test]
fn default_widths_are_pinned() {
    let model = Predictor::<f32>::new(ModelConfig::default()).unwrap();
    let shape = |name: &str| model.store.get(model.store.find(name).unwrap()).shape().to_vec();
    assert_eq!(shape("gru1.w_z"), [20, 256]);
    assert_eq!(shape("gru1.u_z"), [20, 20]);
    assert_eq!(shape("gru2.w_n"), [20, 20]);
    assert_eq!(shape("embed.fc2.weight"), [256, 32]);
    assert_eq!(shape("classifier.weight"), [2, 20]);
    assert_eq!(shape("embed.conv0.kernels")[2..], [5, 5]);
    assert_eq!((model.table().beams(), model.table().dim()), (64, 256));
}

#[test]
fn embedding_of_a_frame_has_the_configured_width() {
    let cfg = ModelConfig::default();
    let mut model = Predictor::<f32>::new(cfg.clone()).unwrap();
    let samples = random_samples(&cfg, 4, 1);
    warm_up(&mut model, &samples);
    let f = &samples[0].frames[0];
    let e = model.embed_frames(&[f, f]).unwrap();
    assert_eq!(e[0].len(), 256);
    assert_eq!(e[0], e[1]);
    let wrong = Frame::blank(64, 64);
    assert!(matches!(model.embed_frames(&[&wrong]), Err(Error::TensorShape { .. })));
}

#[test]
fn probabilities_are_a_distribution_and_eval_is_pure() {
    for kind in [ModelKind::Vision, ModelKind::Baseline] {
        let cfg = tiny(kind);
        let mut model = Predictor::<f32>::new(cfg.clone()).unwrap();
        let samples = random_samples(&cfg, 12, 2);
        warm_up(&mut model, &samples);
        let refs: Vec<&Sample> = samples.iter().collect();
        let p = model.predict(&refs).unwrap();
        for q in &p {
            assert!((q[0] + q[1] - 1.0).abs() < 1e-6);
            assert!(q.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(model.predict(&refs).unwrap(), p);
        // Each sample's output is independent of its batch companions.
        let single = model.predict(&refs[3..4]).unwrap();
        assert_eq!(single[0], p[3]);
    }
}

#[test]
fn zero_classifier_is_undecided() {
    for kind in [ModelKind::Vision, ModelKind::Baseline] {
        let cfg = tiny(kind);
        let mut model = Predictor::<f32>::new(cfg.clone()).unwrap();
        let samples = random_samples(&cfg, 5, 3);
        warm_up(&mut model, &samples);
        let (w, b) = model.classifier_ids();
        model.store.get_mut(w).data_mut().fill(0.0);
        model.store.get_mut(b).data_mut().fill(0.0);
        let refs: Vec<&Sample> = samples.iter().collect();
        assert!(model.predict(&refs).unwrap().iter().all(|p| *p == [0.5, 0.5]));
    }
}

#[test]
fn wrong_window_is_rejected() {
    let cfg = tiny(ModelKind::Vision);
    let mut model = Predictor::<f32>::new(cfg.clone()).unwrap();
    let mut samples = random_samples(&cfg, 2, 4);
    samples[1].frames.pop();
    samples[1].beams.pop();
    let refs: Vec<&Sample> = samples.iter().collect();
    assert!(matches!(model.predict(&refs), Err(Error::Validation(_))));
}

#[test]
fn embedder_and_predictor_gradients_match_finite_differences() {
    for kind in [ModelKind::Vision, ModelKind::Baseline] {
        let cfg = tiny(kind);
        let model = Predictor::<f32>::new(cfg.clone()).unwrap().cast::<f64>();
        let samples = random_samples(&cfg, 3, 5);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut inputs = model.inputs(&refs).unwrap();
        // Continuous pixels keep max-pool windows free of exact ties.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        inputs.images.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>());
        let labels: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();

        let mut tensors: Vec<Tensor<f64>> = model.store.iter().map(|(_, t)| t.clone()).collect();
        let n_params = tensors.len();
        if kind == ModelKind::Vision {
            tensors.push(inputs.images.clone());
        }
        let err = grad_check(
            |g, vars| {
                let mut m = model.clone();
                let images = (kind == ModelKind::Vision).then(|| vars[n_params]);
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let logits = m
                    .logits(g, &vars[..n_params], images, &inputs, Mode::Train, &mut rng)
                    .map_err(|e| blockwatch_numerics::NumericsError::Usage(e.to_string()))?;
                g.softmax_cross_entropy(logits, &labels)
            },
            &tensors,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "{kind:?}: max relative error {err}");
    }
}

#[test]
fn checkpoints_round_trip_exactly() {
    let cfg = tiny(ModelKind::Vision);
    let mut model = Predictor::<f32>::new(cfg.clone()).unwrap();
    let samples = random_samples(&cfg, 6, 6);
    warm_up(&mut model, &samples);
    let refs: Vec<&Sample> = samples.iter().collect();
    let before = model.predict(&refs).unwrap();
    let ck = Checkpoint {
        model,
        info: CheckpointInfo { codebook_fingerprint: "abc".into(), dataset_hash: "def".into(), iteration: 12, val_top1: 0.5 },
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bwck");
    save_checkpoint(&ck, &path).unwrap();
    let mut back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    let after = back.model.predict(&refs).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    let wider = ModelConfig { hidden: 5, ..cfg.clone() };
    match load_checkpoint_as(&path, &wider).unwrap_err() {
        Error::TensorShape { name, .. } => assert_eq!(name, "gru1.w_z"),
        other => panic!("unexpected {other}"),
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
    assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::Truncated { .. }));
    let mut flipped = bytes.clone();
    let at = bytes.len() - 20;
    flipped[at] ^= 1;
    std::fs::write(&path, flipped).unwrap();
    assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::Checksum { .. }));
    let mut magic = bytes;
    magic[0] = b'X';
    std::fs::write(&path, magic).unwrap();
    assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::BadMagic { .. }));
}

#[test]
fn embedding_norm_puts_images_on_the_beam_table_scale() {
    let cfg = ModelConfig { embedding_dim: 8, ..tiny(ModelKind::Vision) };
    assert!(cfg.embedding_norm);
    let mut model = Predictor::<f64>::new(cfg.clone()).unwrap();
    let samples = random_samples(&cfg, 16, 5);
    let refs: Vec<&Sample> = samples.iter().collect();
    let inputs = model.inputs(&refs).unwrap();
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let images = g.leaf(inputs.images.clone());
    let e = model.embed_images(&mut g, &params, images, Mode::Train).unwrap();
    let rows = g.shape(e)[0];
    let values = g.value(e);
    for d in 0..8 {
        let col: Vec<f64> = (0..rows).map(|r| values[r * 8 + d]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-3, "dim {d}: mean {mean} var {var}");
    }

    let plain = Predictor::<f32>::new(ModelConfig { embedding_norm: false, ..cfg }).unwrap();
    assert!(plain.store.find("embed.out_bn.gamma").is_none() && plain.store.find("embed.fc2.bias").is_some());
    // The norm cancels any bias on the layer feeding it, so that bias is dropped.
    assert!(model.store.find("embed.out_bn.gamma").is_some() && model.store.find("embed.fc2.bias").is_none());
}
