//! The dual-modality blockage predictor: a frozen Gaussian beam-embedding
//! table, a conv/batch-norm/pool image embedder, and two stacked GRU layers
//! over interleaved image and beam embeddings feeding a two-class
//! classifier. The beam-only baseline drops the image steps.

use std::collections::HashMap;
use std::sync::Arc;

use blockwatch_numerics::layers::{BatchNorm2d, Conv2d, Dense, GruCell};
use blockwatch_numerics::{softmax_rows, Graph, Mode, ParamStore, Real, RunningStats, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::scene::{Frame, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vision,
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vision => "vision",
            ModelKind::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(ModelKind::Vision),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::config("model", format!("unknown model `{other}`; expected `vision` or `baseline`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Observed (frame, beam) pairs per sample.
    pub window: usize,
    /// Common embedding width for images and beams.
    pub embedding_dim: usize,
    pub hidden: usize,
    /// Drop probability between the two GRU layers.
    pub dropout: f64,
    pub beams: usize,
    pub width: usize,
    pub height: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub pool: usize,
    /// Width of the first dense layer after the conv stack.
    pub dense_hidden: usize,
    /// Batch-normalise the image embedding so it shares the beam table's
    /// unit-variance scale at the recurrent input.
    pub embedding_norm: bool,
    pub table_seed: u64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Vision,
            window: 8,
            embedding_dim: 256,
            hidden: 20,
            dropout: 0.2,
            beams: 64,
            width: 32,
            height: 16,
            conv_channels: 4,
            kernel: 5,
            pool: 2,
            dense_hidden: 32,
            embedding_norm: true,
            table_seed: 7,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.window", self.window),
            ("model.embedding_dim", self.embedding_dim),
            ("model.hidden", self.hidden),
            ("model.beams", self.beams),
            ("model.conv_channels", self.conv_channels),
            ("model.dense_hidden", self.dense_hidden),
            ("model.pool", self.pool),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("model.kernel", "must be odd so padding preserves the raster size"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if self.kind == ModelKind::Vision {
            let shrink = 3 * (self.pool - 1);
            if self.width <= shrink || self.height <= shrink {
                return Err(Error::config("model.width", "raster too small for three pooling stages"));
            }
        }
        Ok(())
    }

    /// Flattened conv-stack output width.
    pub fn flat_features(&self) -> usize {
        let shrink = 3 * (self.pool - 1);
        self.conv_channels * (self.height - shrink) * (self.width - shrink)
    }
}

/// Fixed `beams x dim` table of standard-normal vectors, regenerated from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamEmbeddingTable {
    beams: usize,
    dim: usize,
    seed: u64,
    values: Vec<f32>,
}

impl BeamEmbeddingTable {
    pub fn new(beams: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..beams * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self { beams, dim, seed, values }
    }

    pub fn beams(&self) -> usize {
        self.beams
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, index: usize) -> Result<&[f32]> {
        if index >= self.beams {
            return Err(Error::Lookup { what: "beam index", id: index });
        }
        Ok(&self.values[index * self.dim..(index + 1) * self.dim])
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// One element of the recurrent input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Image(usize),
    Beam(usize),
}

/// Recurrent input order: image then beam at every observed time for the
/// vision model, beams only for the baseline.
pub fn sequence_layout(kind: ModelKind, window: usize) -> Vec<Step> {
    match kind {
        ModelKind::Vision => (0..window).flat_map(|i| [Step::Image(i), Step::Beam(i)]).collect(),
        ModelKind::Baseline => (0..window).map(Step::Beam).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ImageEmbedder<T: Real> {
    convs: Vec<Conv2d>,
    /// One per conv block, then the optional embedding norm.
    norms: Vec<BatchNorm2d<T>>,
    fc1: Dense,
    fc2: Dense,
}

/// Batch-ready inputs: each distinct frame once, plus per-step row and beam indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInputs<T: Real> {
    /// `[frames, 3, H, W]`; empty for the baseline.
    pub images: Tensor<T>,
    /// `image_rows[i][b]`: row of `images` holding sample `b`'s `i`-th frame.
    pub image_rows: Vec<Vec<usize>>,
    /// `beams[i][b]`: sample `b`'s `i`-th beam index.
    pub beams: Vec<Vec<usize>>,
}

impl<T: Real> BatchInputs<T> {
    pub fn batch(&self) -> usize {
        self.beams.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor<T: Real = f32> {
    config: ModelConfig,
    pub store: ParamStore<T>,
    table: BeamEmbeddingTable,
    embedder: Option<ImageEmbedder<T>>,
    gru: [GruCell; 2],
    classifier: Dense,
}

impl<T: Real> Predictor<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let embedder = (config.kind == ModelKind::Vision).then(|| {
            let c = config.conv_channels;
            let pad = config.kernel / 2;
            let convs = (0..3)
                .map(|i| {
                    let c_in = if i == 0 { CHANNELS } else { c };
                    Conv2d::new(&mut store, &format!("embed.conv{i}"), c_in, c, config.kernel, 1, pad, &mut rng)
                })
                .collect();
            let mut norms: Vec<_> = (0..3).map(|i| BatchNorm2d::new(&mut store, &format!("embed.bn{i}"), c)).collect();
            let fc1 = Dense::new(&mut store, "embed.fc1", config.flat_features(), config.dense_hidden, &mut rng);
            let fc2 = if config.embedding_norm {
                Dense::without_bias(&mut store, "embed.fc2", config.dense_hidden, config.embedding_dim, &mut rng)
            } else {
                Dense::new(&mut store, "embed.fc2", config.dense_hidden, config.embedding_dim, &mut rng)
            };
            if config.embedding_norm {
                norms.push(BatchNorm2d::new(&mut store, "embed.out_bn", config.embedding_dim));
            }
            ImageEmbedder { convs, norms, fc1, fc2 }
        });
        let gru = [
            GruCell::new(&mut store, "gru1", config.embedding_dim, config.hidden, &mut rng),
            GruCell::new(&mut store, "gru2", config.hidden, config.hidden, &mut rng),
        ];
        let classifier = Dense::new(&mut store, "classifier", config.hidden, 2, &mut rng);
        let table = BeamEmbeddingTable::new(config.beams, config.embedding_dim, config.table_seed);
        Ok(Self { config, store, table, embedder, gru, classifier })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn table(&self) -> &BeamEmbeddingTable {
        &self.table
    }

    /// Batch-norm running statistics in layer order.
    pub fn norm_stats(&self) -> Vec<&RunningStats<T>> {
        self.embedder.iter().flat_map(|e| e.norms.iter().map(|n| &n.stats)).collect()
    }

    pub fn norm_stats_mut(&mut self) -> Vec<&mut RunningStats<T>> {
        self.embedder.iter_mut().flat_map(|e| e.norms.iter_mut().map(|n| &mut n.stats)).collect()
    }

    pub fn classifier_ids(&self) -> (blockwatch_numerics::ParamId, blockwatch_numerics::ParamId) {
        (self.classifier.w, self.classifier.b.expect("the classifier has a bias"))
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Real>(&self) -> Predictor<U> {
        Predictor {
            config: self.config.clone(),
            store: self.store.cast(),
            table: self.table.clone(),
            embedder: self.embedder.as_ref().map(|e| ImageEmbedder {
                convs: e.convs.clone(),
                norms: e
                    .norms
                    .iter()
                    .map(|n| BatchNorm2d { gamma: n.gamma, beta: n.beta, stats: n.stats.cast() })
                    .collect(),
                fc1: e.fc1,
                fc2: e.fc2,
            }),
            gru: self.gru,
            classifier: self.classifier,
        }
    }

    /// Copies every parameter onto the tape, indexed by `ParamId::index`.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.store.ids().map(|id| g.param(&self.store, id)).collect()
    }

    /// Packs samples into batch inputs, sharing frames that appear in
    /// several windows of the same episode.
    pub fn inputs(&self, samples: &[&Sample]) -> Result<BatchInputs<T>> {
        let r = self.config.window;
        let (w, h) = (self.config.width, self.config.height);
        let mut beams = vec![Vec::with_capacity(samples.len()); r];
        let mut image_rows = vec![Vec::with_capacity(samples.len()); r];
        let mut frames: Vec<&Arc<Frame>> = Vec::new();
        let mut seen: HashMap<(u64, u32), Vec<usize>> = HashMap::new();
        for s in samples {
            if s.beams.len() != r || s.frames.len() != r {
                return Err(Error::Validation(format!(
                    "sample has {} observed pairs, the model expects exactly {r}",
                    s.beams.len()
                )));
            }
            for (i, (&b, f)) in s.beams.iter().zip(&s.frames).enumerate() {
                if usize::from(b) >= self.config.beams {
                    return Err(Error::Lookup { what: "beam index", id: usize::from(b) });
                }
                beams[i].push(usize::from(b));
                if self.embedder.is_none() {
                    continue;
                }
                if (f.width(), f.height()) != (w, h) {
                    return Err(Error::TensorShape {
                        name: "frame".into(),
                        expected: vec![CHANNELS, h, w],
                        found: vec![CHANNELS, f.height(), f.width()],
                    });
                }
                let key = (s.meta.episode, s.meta.start_step + i as u32);
                let slot = seen.entry(key).or_default();
                let row = match slot.iter().find(|&&j| Arc::ptr_eq(frames[j], f) || frames[j] == f) {
                    Some(&j) => j,
                    None => {
                        frames.push(f);
                        slot.push(frames.len() - 1);
                        frames.len() - 1
                    }
                };
                image_rows[i].push(row);
            }
        }
        let mut data = Vec::with_capacity(frames.len() * CHANNELS * w * h);
        for f in &frames {
            data.extend(f.levels().iter().map(|&v| T::of(f64::from(v) / 255.0)));
        }
        let images = Tensor::from_vec(&[frames.len(), CHANNELS, h, w], data)?;
        Ok(BatchInputs { images, image_rows, beams })
    }

    /// Image embeddings `[frames, N]` for a `[frames, 3, H, W]` input.
    pub fn embed_images(&mut self, g: &mut Graph<T>, params: &[Var], images: Var, mode: Mode) -> Result<Var> {
        let cfg = &self.config;
        let e = self.embedder.as_mut().ok_or_else(|| Error::Validation("the baseline has no image embedder".into()))?;
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != [CHANNELS, cfg.height, cfg.width] {
            return Err(Error::TensorShape {
                name: "images".into(),
                expected: vec![shape.first().copied().unwrap_or(0), CHANNELS, cfg.height, cfg.width],
                found: shape,
            });
        }
        let n = shape[0];
        let mut x = images;
        for (conv, norm) in e.convs.iter().zip(e.norms.iter_mut()) {
            x = g.conv2d(x, params[conv.kernels.index()], conv.stride, conv.padding)?;
            x = g.batch_norm2d(x, params[norm.gamma.index()], params[norm.beta.index()], mode, &mut norm.stats)?;
            x = g.maxpool2d(x, cfg.pool, 1)?;
        }
        x = g.reshape(x, &[n, cfg.flat_features()])?;
        x = e.fc1.apply(g, params, x)?;
        x = g.relu(x)?;
        x = e.fc2.apply(g, params, x)?;
        if let Some(norm) = e.norms.get_mut(3) {
            x = g.reshape(x, &[n, cfg.embedding_dim, 1, 1])?;
            x = g.batch_norm2d(x, params[norm.gamma.index()], params[norm.beta.index()], mode, &mut norm.stats)?;
            x = g.reshape(x, &[n, cfg.embedding_dim])?;
        }
        Ok(x)
    }

    /// Logits `[batch, 2]`. `images` must be the tape copy of `inputs.images`
    /// for the vision model and is ignored by the baseline.
    pub fn logits<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        params: &[Var],
        images: Option<Var>,
        inputs: &BatchInputs<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let batch = inputs.batch();
        if inputs.beams.len() != self.config.window {
            return Err(Error::Validation(format!(
                "got {} observed steps, the model expects {}",
                inputs.beams.len(),
                self.config.window
            )));
        }
        let embedded = match (self.kind(), images) {
            (ModelKind::Vision, Some(img)) => Some(self.embed_images(g, params, img, mode)?),
            (ModelKind::Vision, None) => return Err(Error::Validation("the vision model needs images".into())),
            (ModelKind::Baseline, _) => None,
        };
        let dim = self.config.embedding_dim;
        let mut sequence = Vec::with_capacity(2 * self.config.window);
        for step in sequence_layout(self.kind(), self.config.window) {
            let x = match step {
                Step::Image(i) => g.gather_rows(embedded.expect("vision model"), &inputs.image_rows[i])?,
                Step::Beam(i) => {
                    let mut rows = Vec::with_capacity(batch * dim);
                    for &b in &inputs.beams[i] {
                        rows.extend(self.table.row(b)?.iter().map(|&v| T::of(f64::from(v))));
                    }
                    g.constant(&[batch, dim], rows)?
                }
            };
            sequence.push(x);
        }

        let hidden = self.config.hidden;
        let bind_gru = |cell: &GruCell| blockwatch_numerics::GruVars {
            w_z: params[cell.w_z.index()],
            w_r: params[cell.w_r.index()],
            w_n: params[cell.w_n.index()],
            u_z: params[cell.u_z.index()],
            u_r: params[cell.u_r.index()],
            u_n: params[cell.u_n.index()],
            b_z: params[cell.b_z.index()],
            b_r: params[cell.b_r.index()],
            b_n: params[cell.b_n.index()],
        };
        let (first, second) = (bind_gru(&self.gru[0]), bind_gru(&self.gru[1]));
        let mut h = g.constant(&[batch, hidden], vec![T::zero(); batch * hidden])?;
        let mut between = Vec::with_capacity(sequence.len());
        for x in sequence {
            h = g.gru_cell(x, h, first)?;
            between.push(g.dropout(h, self.config.dropout, mode, rng)?);
        }
        let mut h = g.constant(&[batch, hidden], vec![T::zero(); batch * hidden])?;
        for x in between {
            h = g.gru_cell(x, h, second)?;
        }
        Ok(self.classifier.apply(g, params, h)?)
    }

    /// Eval-mode class probabilities `[p_los, p_nlos]` per sample.
    pub fn predict(&mut self, samples: &[&Sample]) -> Result<Vec<[f64; 2]>> {
        if samples.is_empty() {
            return Ok(vec![]);
        }
        let inputs = self.inputs(samples)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g);
        let images = (self.kind() == ModelKind::Vision).then(|| g.leaf(inputs.images.clone()));
        // Eval mode draws nothing from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.logits(&mut g, &params, images, &inputs, Mode::Eval, &mut rng)?;
        let probs = softmax_rows(g.value(logits), 2);
        Ok(probs
            .chunks_exact(2)
            .map(|p| [p[0].to_f64().unwrap_or(f64::NAN), p[1].to_f64().unwrap_or(f64::NAN)])
            .collect())
    }

    /// Eval-mode embedding of single frames.
    pub fn embed_frames(&mut self, frames: &[&Frame]) -> Result<Vec<Vec<T>>> {
        let (w, h) = (self.config.width, self.config.height);
        let mut data = Vec::new();
        for f in frames {
            if (f.width(), f.height()) != (w, h) {
                return Err(Error::TensorShape {
                    name: "frame".into(),
                    expected: vec![CHANNELS, h, w],
                    found: vec![CHANNELS, f.height(), f.width()],
                });
            }
            data.extend(f.levels().iter().map(|&v| T::of(f64::from(v) / 255.0)));
        }
        let mut g = Graph::new();
        let params = self.bind(&mut g);
        let x = g.constant(&[frames.len(), CHANNELS, h, w], data)?;
        let e = self.embed_images(&mut g, &params, x, Mode::Eval)?;
        Ok(g.value(e).chunks_exact(self.config.embedding_dim).map(<[T]>::to_vec).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_standard_normal_and_reproducible() {
        let t = BeamEmbeddingTable::new(64, 256, 3);
        assert_eq!(t, BeamEmbeddingTable::new(64, 256, 3));
        assert_ne!(t.fingerprint(), BeamEmbeddingTable::new(64, 256, 4).fingerprint());
        let n = t.values().len() as f64;
        let mean = t.values().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = t.values().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
        assert_eq!(t.row(5).unwrap(), t.row(5).unwrap());
        assert!(matches!(t.row(64), Err(Error::Lookup { .. })));
    }

    #[test]
    fn layouts_interleave_image_first() {
        let v = sequence_layout(ModelKind::Vision, 3);
        assert_eq!(
            v,
            [Step::Image(0), Step::Beam(0), Step::Image(1), Step::Beam(1), Step::Image(2), Step::Beam(2)]
        );
        assert_eq!(sequence_layout(ModelKind::Baseline, 3), [Step::Beam(0), Step::Beam(1), Step::Beam(2)]);
    }

    #[test]
    fn kind_parses_and_rejects_unknown_names() {
        assert_eq!("vision".parse::<ModelKind>().unwrap(), ModelKind::Vision);
        let err = "resnet".parse::<ModelKind>().unwrap_err().to_string();
        assert!(err.contains("vision") && err.contains("baseline"), "{err}");
    }
}
