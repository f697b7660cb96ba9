use crate::error::{NumericsError, Result};
use crate::graph::{GradBuf, Graph, Mode, Node, Var};
use crate::ops::Op;
use crate::real::Real;

/// Per-channel running mean/variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Real = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    /// Number of training batches folded into the statistics.
    pub updates: u64,
}

impl<T: Real> RunningStats<T> {
    /// Momentum 0.1, eps 1e-5.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::of(0.1),
            eps: T::of(1e-5),
            updates: 0,
        }
    }

    pub fn cast<U: Real>(&self) -> RunningStats<U> {
        let conv = |v: &T| U::of(v.to_f64().unwrap_or(f64::NAN));
        RunningStats {
            mean: self.mean.iter().map(conv).collect(),
            var: self.var.iter().map(conv).collect(),
            momentum: conv(&self.momentum),
            eps: conv(&self.eps),
            updates: self.updates,
        }
    }
}

pub(crate) struct BnSaved<T> {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
    batch: usize,
    channels: usize,
    plane: usize,
}

impl<T: Real> Graph<T> {
    /// Batch normalization over `x: [B, C, H, W]` with per-channel affine
    /// `gamma`, `beta`. Training mode normalizes with batch statistics and
    /// updates `stats`; eval mode uses `stats`.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        stats: &mut RunningStats<T>,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(NumericsError::Shape { op: "batch_norm2d", lhs: xs, rhs: vec![] });
        }
        let (batch, channels, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        for (op, v) in [("batch_norm2d (gamma)", gamma), ("batch_norm2d (beta)", beta)] {
            if self.shape(v) != [channels] {
                return Err(NumericsError::Shape { op, lhs: xs, rhs: self.shape(v).to_vec() });
            }
        }
        if stats.mean.len() != channels {
            return Err(NumericsError::Shape {
                op: "batch_norm2d (running stats)",
                lhs: xs,
                rhs: vec![stats.mean.len()],
            });
        }
        let count = batch * plane;
        let input = self.value(x);
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(NumericsError::Config {
                        op: "batch_norm2d",
                        msg: format!("training mode needs batch*H*W >= 2, got {count}"),
                    });
                }
                let n = T::of(count as f64);
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                let planes = |c: usize| (0..batch).map(move |b| &input[(b * channels + c) * plane..][..plane]);
                for c in 0..channels {
                    let m = planes(c).map(|p| lane_sum(p, |v| v)).fold(T::zero(), |a, b| a + b) / n;
                    let v = planes(c).map(|p| lane_sum(p, |v| (v - m) * (v - m))).fold(T::zero(), |a, b| a + b) / n;
                    mean[c] = m;
                    var[c] = v;
                }
                let mom = stats.momentum;
                let unbias = n / (n - T::one());
                for c in 0..channels {
                    stats.mean[c] = (T::one() - mom) * stats.mean[c] + mom * mean[c];
                    stats.var[c] = (T::one() - mom) * stats.var[c] + mom * var[c] * unbias;
                }
                stats.updates += 1;
                (mean, var)
            }
            Mode::Eval => {
                if stats.updates == 0 {
                    return Err(NumericsError::UninitializedStats);
                }
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + stats.eps).sqrt()).collect();
        let g = self.value(gamma);
        let bta = self.value(beta);
        let mut xhat = vec![T::zero(); input.len()];
        let mut y = vec![T::zero(); input.len()];
        for (i, ((xp, hp), yp)) in input.chunks(plane).zip(xhat.chunks_mut(plane)).zip(y.chunks_mut(plane)).enumerate() {
            let c = i % channels;
            let (m, is, gc, bc) = (mean[c], inv_std[c], g[c], bta[c]);
            for ((&xv, h), yv) in xp.iter().zip(hp).zip(yp) {
                *h = (xv - m) * is;
                *yv = gc * *h + bc;
            }
        }
        let saved = BnSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == Mode::Train,
            batch,
            channels,
            plane,
        };
        self.push("batch_norm2d", y, xs, Op::BatchNorm(Box::new(saved)))
    }
}

const LANES: usize = 8;

/// `Σ f(v)` with independent partial sums so the loop vectorizes.
#[inline]
fn lane_sum<T: Real>(v: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = v.chunks_exact(LANES);
    let tail = chunks.remainder().iter().fold(T::zero(), |a, &x| a + f(x));
    for c in chunks {
        for l in 0..LANES {
            acc[l] = acc[l] + f(c[l]);
        }
    }
    acc.iter().fold(tail, |a, &b| a + b)
}

#[inline]
fn lane_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

pub(super) fn backward<T: Real>(
    nodes: &[Node<T>],
    buf: &mut GradBuf<'_, T>,
    s: &BnSaved<T>,
    g: &[T],
) {
    let (batch, channels, plane) = (s.batch, s.channels, s.plane);
    let mut sum_dy = vec![T::zero(); channels];
    let mut sum_dy_xhat = vec![T::zero(); channels];
    for (i, (gp, hp)) in g.chunks(plane).zip(s.xhat.chunks(plane)).enumerate() {
        let c = i % channels;
        sum_dy[c] = sum_dy[c] + lane_sum(gp, |v| v);
        sum_dy_xhat[c] = sum_dy_xhat[c] + lane_dot(gp, hp);
    }
    if let Some(dgamma) = buf.slot(s.gamma) {
        dgamma.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &v)| *d = *d + v);
    }
    if let Some(dbeta) = buf.slot(s.beta) {
        dbeta.iter_mut().zip(&sum_dy).for_each(|(d, &v)| *d = *d + v);
    }
    let gamma = &nodes[s.gamma.0].value;
    if let Some(dx) = buf.slot(s.x) {
        let n = T::of((batch * plane) as f64);
        for (i, ((dp, gp), hp)) in dx.chunks_mut(plane).zip(g.chunks(plane)).zip(s.xhat.chunks(plane)).enumerate() {
            let c = i % channels;
            let scale = gamma[c] * s.inv_std[c];
            if s.train {
                let (mean_dy, mean_dy_xhat) = (sum_dy[c] / n, sum_dy_xhat[c] / n);
                for ((d, &gv), &h) in dp.iter_mut().zip(gp).zip(hp) {
                    *d = *d + scale * (gv - mean_dy - h * mean_dy_xhat);
                }
            } else {
                for (d, &gv) in dp.iter_mut().zip(gp) {
                    *d = *d + scale * gv;
                }
            }
        }
    }
}
