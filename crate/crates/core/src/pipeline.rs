//! Training, evaluation and learning-curve comparison.

use std::collections::BTreeMap;
use std::path::Path;

use blockwatch_numerics::{Adam, Graph, Mode};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointInfo};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Predictor};
use crate::scene::LinkStatus;

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Iterations between validation passes.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 64, epochs: 50, seed: 42, eval_every: 100 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Confusion counts with NLOS as the positive class, and the scores derived
/// from them. Empty denominators give 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub top1: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { tp, fp, tn, fn_, top1: ratio(tp + tn, tp + tn + fp + fn_), precision, recall, f1 }
    }

    pub fn from_predictions(predicted: &[LinkStatus], labels: &[LinkStatus]) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&p, &l) in predicted.iter().zip(labels) {
            match (p, l) {
                (LinkStatus::Nlos, LinkStatus::Nlos) => tp += 1,
                (LinkStatus::Nlos, LinkStatus::Los) => fp += 1,
                (LinkStatus::Los, LinkStatus::Los) => tn += 1,
                (LinkStatus::Los, LinkStatus::Nlos) => fn_ += 1,
            }
        }
        Self::from_counts(tp, fp, tn, fn_)
    }

    pub fn merge(&self, o: &Metrics) -> Self {
        Self::from_counts(self.tp + o.tp, self.fp + o.fp, self.tn + o.tn, self.fn_ + o.fn_)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Index of the larger probability; ties go to LOS.
pub fn decide(p: [f64; 2]) -> LinkStatus {
    if p[1] > p[0] {
        LinkStatus::Nlos
    } else {
        LinkStatus::Los
    }
}

/// Rejects data the checkpoint was not built for.
pub fn check_compatible(ck: &Checkpoint, ds: &Dataset) -> Result<()> {
    let cfg = ck.model.config();
    let h = &ds.header;
    if !ck.info.codebook_fingerprint.is_empty() && ck.info.codebook_fingerprint != h.codebook_fingerprint {
        return Err(Error::Compat {
            what: "codebook fingerprint",
            left: ck.info.codebook_fingerprint.clone(),
            right: h.codebook_fingerprint.clone(),
        });
    }
    let pairs = [
        ("observation window", cfg.window, h.window),
        ("codebook size", cfg.beams, h.beams),
        ("raster width", cfg.width, h.width),
        ("raster height", cfg.height, h.height),
    ];
    for (what, left, right) in pairs {
        if left != right {
            return Err(Error::Compat { what, left: left.to_string(), right: right.to_string() });
        }
    }
    Ok(())
}

fn counts_for(model: &Predictor, samples: &[&Sample]) -> Result<Metrics> {
    let mut m = model.clone();
    let probs = m.predict(samples)?;
    let predicted: Vec<LinkStatus> = probs.into_iter().map(decide).collect();
    let labels: Vec<LinkStatus> = samples.iter().map(|s| s.label).collect();
    Ok(Metrics::from_predictions(&predicted, &labels))
}

fn evaluate_samples(model: &Predictor, samples: &[&Sample]) -> Result<Metrics> {
    let parts: Vec<Metrics> =
        samples.par_chunks(EVAL_CHUNK).map(|chunk| counts_for(model, chunk)).collect::<Result<_>>()?;
    Ok(parts.iter().fold(Metrics::from_counts(0, 0, 0, 0), |a, b| a.merge(b)))
}

pub fn evaluate(ck: &Checkpoint, ds: &Dataset) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    check_compatible(ck, ds)?;
    let refs: Vec<&Sample> = ds.samples.iter().collect();
    evaluate_samples(&ck.model, &refs)
}

/// Metrics per scenario configuration, keyed by scenario name.
pub fn breakdown(ck: &Checkpoint, ds: &Dataset) -> Result<BTreeMap<String, Metrics>> {
    if ds.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    check_compatible(ck, ds)?;
    let mut groups: BTreeMap<&str, Vec<&Sample>> = BTreeMap::new();
    for s in &ds.samples {
        let name = ds.header.scenarios.get(s.meta.scenario as usize).ok_or_else(|| {
            Error::Validation(format!(
                "sample from episode {} names scenario {} but the header lists {}",
                s.meta.episode,
                s.meta.scenario,
                ds.header.scenarios.len()
            ))
        })?;
        groups.entry(name.as_str()).or_default().push(s);
    }
    groups.into_iter().map(|(k, v)| Ok((k.to_string(), evaluate_samples(&ck.model, &v)?))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    /// Mini-batch accuracy (training mode) since the previous point.
    pub train_top1: f64,
    pub val_top1: f64,
    /// Mean mini-batch loss since the previous point.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for p in &self.points {
            w.serialize(p).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let points = r.deserialize().collect::<std::result::Result<Vec<CurvePoint>, _>>().map_err(|e| csv_error(path, e))?;
        Ok(Self { points })
    }

    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        Error::Malformed { path: path.to_path_buf(), detail: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Weights with the best validation accuracy seen at any evaluation.
    pub best: Checkpoint,
    /// Weights after the last iteration.
    pub last: Checkpoint,
    pub curve: LearningCurve,
    /// Loss of every iteration, in order.
    pub losses: Vec<f32>,
}

/// Groups sample indices by episode, shuffles the episode order and the
/// windows inside each episode, and cuts the result into batches. Keeping
/// an episode's windows together lets one batch reuse its frames.
pub fn episode_batches(ds: &Dataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_episode: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        by_episode.entry(s.meta.episode).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_episode.into_values().collect();
    groups.shuffle(rng);
    for g in &mut groups {
        g.shuffle(rng);
    }
    groups.concat().chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Adam on softmax cross-entropy over episode-grouped mini-batches. The
/// validation split is scored every `eval_every` iterations and after the
/// final one; the best-scoring weights are returned.
pub fn train(model_cfg: &ModelConfig, train_ds: &Dataset, val_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Validation("training needs non-empty training and validation splits".into()));
    }
    if train_ds.header.codebook_fingerprint != val_ds.header.codebook_fingerprint {
        return Err(Error::Compat {
            what: "codebook fingerprint",
            left: train_ds.header.codebook_fingerprint.clone(),
            right: val_ds.header.codebook_fingerprint.clone(),
        });
    }
    let info = CheckpointInfo {
        codebook_fingerprint: train_ds.header.codebook_fingerprint.clone(),
        dataset_hash: train_ds.header.config_hash.clone(),
        iteration: 0,
        val_top1: 0.0,
    };
    let mut ck = Checkpoint { model: Predictor::new(model_cfg.clone())?, info };
    check_compatible(&ck, train_ds)?;
    check_compatible(&ck, val_ds)?;

    let mut adam = Adam::new(cfg.lr);
    let mut dropout_rng = epoch_rng(cfg.seed, 0);
    let mut curve = LearningCurve::default();
    let mut losses = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let (mut window_correct, mut window_seen, mut window_loss, mut window_steps) = (0u64, 0u64, 0f64, 0u64);
    let total_iterations: usize =
        (0..cfg.epochs).map(|_| train_ds.len().div_ceil(cfg.batch_size)).sum();
    let mut iteration = 0u64;

    for epoch in 0..cfg.epochs {
        for batch in episode_batches(train_ds, cfg.batch_size, &mut epoch_rng(cfg.seed, epoch)) {
            iteration += 1;
            let samples: Vec<&Sample> = batch.iter().map(|&i| &train_ds.samples[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
            let model = &mut ck.model;
            let inputs = model.inputs(&samples)?;
            let mut g = Graph::new();
            let params = model.bind(&mut g);
            let images = (model.kind() == crate::model::ModelKind::Vision).then(|| g.leaf(inputs.images.clone()));
            let logits = model.logits(&mut g, &params, images, &inputs, Mode::Train, &mut dropout_rng)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let loss_value = g.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: iteration as usize,
                    loss: loss_value,
                    lr: cfg.lr as f32,
                    batch,
                });
            }
            for (row, &label) in g.value(logits).chunks_exact(2).zip(&labels) {
                let pred = decide([f64::from(row[0]), f64::from(row[1])]);
                window_correct += u64::from(pred.index() == label);
            }
            window_seen += labels.len() as u64;
            window_loss += f64::from(loss_value);
            window_steps += 1;
            losses.push(loss_value);

            g.backward(loss)?;
            model.store.zero_grad();
            g.write_param_grads(&mut model.store);
            adam.step(&mut model.store)?;

            if iteration % cfg.eval_every as u64 == 0 || iteration as usize == total_iterations {
                let val = evaluate(&ck, val_ds)?;
                curve.points.push(CurvePoint {
                    iteration,
                    train_top1: window_correct as f64 / window_seen as f64,
                    val_top1: val.top1,
                    train_loss: window_loss / window_steps as f64,
                });
                (window_correct, window_seen, window_loss, window_steps) = (0, 0, 0.0, 0);
                if best.as_ref().is_none_or(|b| val.top1 > b.info.val_top1) {
                    let mut snapshot = ck.clone();
                    snapshot.info.iteration = iteration;
                    snapshot.info.val_top1 = val.top1;
                    best = Some(snapshot);
                }
            }
        }
    }
    ck.info.iteration = iteration;
    ck.info.val_top1 = curve.last().map_or(0.0, |p| p.val_top1);
    Ok(TrainOutcome { best: best.expect("at least one evaluation"), last: ck, curve, losses })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub iteration: u64,
    pub vision_val_top1: f64,
    pub baseline_val_top1: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub vision_final: f64,
    pub baseline_final: f64,
    pub delta_final: f64,
    /// Rows at iterations present in both curves.
    pub series: Vec<ComparisonRow>,
}

/// Final validation accuracies and their per-iteration difference.
pub fn compare(vision: &LearningCurve, baseline: &LearningCurve) -> Result<Comparison> {
    let (Some(v), Some(b)) = (vision.last(), baseline.last()) else {
        return Err(Error::Validation("comparison needs two non-empty learning curves".into()));
    };
    let by_iter: BTreeMap<u64, f64> = baseline.points.iter().map(|p| (p.iteration, p.val_top1)).collect();
    let series = vision
        .points
        .iter()
        .filter_map(|p| {
            by_iter.get(&p.iteration).map(|&bv| ComparisonRow {
                iteration: p.iteration,
                vision_val_top1: p.val_top1,
                baseline_val_top1: bv,
                delta: p.val_top1 - bv,
            })
        })
        .collect();
    Ok(Comparison { vision_final: v.val_top1, baseline_final: b.val_top1, delta_final: v.val_top1 - b.val_top1, series })
}

impl Comparison {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for row in &self.series {
            w.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let labels = [LinkStatus::Los, LinkStatus::Nlos, LinkStatus::Nlos];
        let m = Metrics::from_predictions(&labels, &labels);
        assert_eq!((m.top1, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_denominators_give_zero() {
        let m = Metrics::from_counts(0, 0, 5, 0);
        assert_eq!((m.precision, m.recall, m.f1, m.top1), (0.0, 0.0, 0.0, 1.0));
        let m = Metrics::from_counts(0, 0, 0, 0);
        assert_eq!(m.top1, 0.0);
    }

    #[test]
    fn identical_curves_have_zero_delta() {
        let curve = LearningCurve {
            points: (1..=5)
                .map(|i| CurvePoint { iteration: i * 10, train_top1: 0.5, val_top1: 0.1 * i as f64, train_loss: 1.0 })
                .collect(),
        };
        let c = compare(&curve, &curve).unwrap();
        assert_eq!(c.series.len(), 5);
        assert!(c.series.iter().all(|r| r.delta == 0.0));
        assert_eq!(c.delta_final, 0.0);
        assert!(compare(&curve, &LearningCurve::default()).is_err());
    }

    #[test]
    fn final_delta_is_the_difference_of_endpoints() {
        let point = |v| LearningCurve { points: vec![CurvePoint { iteration: 1, train_top1: 0.0, val_top1: v, train_loss: 0.0 }] };
        let c = compare(&point(0.8598), &point(0.7496)).unwrap();
        assert!((c.delta_final - 0.1102).abs() < 1e-12);
    }
}
