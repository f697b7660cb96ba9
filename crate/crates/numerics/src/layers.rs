//! Parameter bundles for the layers used by the predictor. Each bundle owns
//! [`ParamId`]s into a shared [`ParamStore`] and knows how to bind them onto a
//! [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::ops::{GruVars, RunningStats};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::without_bias(store, name, fan_in, fan_out, rng);
        layer.b = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        layer
    }

    /// For a layer feeding a normalisation that would cancel any bias.
    pub fn without_bias<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = glorot_bound(fan_in, fan_out);
        let w = store.add(format!("{name}.weight"), Tensor::uniform(&[fan_out, fan_in], bound, rng));
        Self { w, b: None, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.dense(x, w, b)
    }

    /// Applies the layer to parameters already bound to the tape.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        g.dense(x, params[self.w.index()], self.b.map(|b| params[b.index()]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub kernels: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let area = kernel * kernel;
        let bound = glorot_bound(c_in * area, c_out * area);
        let kernels =
            store.add(format!("{name}.kernels"), Tensor::uniform(&[c_out, c_in, kernel, kernel], bound, rng));
        Self { kernels, stride, padding }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernels);
        g.conv2d(x, k, self.stride, self.padding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T: Real = f32> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: RunningStats<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, stats: RunningStats::new(channels) }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm2d(x, gamma, beta, mode, &mut self.stats)
    }
}

/// Parameters of one GRU cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCell {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_n: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_n: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_n: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    /// Matrices uniform in `±1/sqrt(hidden)`, biases zero.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut mat = |suffix: &str, cols: usize, rng: &mut R| {
            store.add(format!("{name}.{suffix}"), Tensor::uniform(&[hidden, cols], bound, rng))
        };
        let w_z = mat("w_z", input, rng);
        let w_r = mat("w_r", input, rng);
        let w_n = mat("w_n", input, rng);
        let u_z = mat("u_z", hidden, rng);
        let u_r = mat("u_r", hidden, rng);
        let u_n = mat("u_n", hidden, rng);
        let b_z = store.add(format!("{name}.b_z"), Tensor::zeros(&[hidden]));
        let b_r = store.add(format!("{name}.b_r"), Tensor::zeros(&[hidden]));
        let b_n = store.add(format!("{name}.b_n"), Tensor::zeros(&[hidden]));
        Self { w_z, w_r, w_n, u_z, u_r, u_n, b_z, b_r, b_n, input, hidden }
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> GruVars {
        GruVars {
            w_z: g.param(store, self.w_z),
            w_r: g.param(store, self.w_r),
            w_n: g.param(store, self.w_n),
            u_z: g.param(store, self.u_z),
            u_r: g.param(store, self.u_r),
            u_n: g.param(store, self.u_n),
            b_z: g.param(store, self.b_z),
            b_r: g.param(store, self.b_r),
            b_n: g.param(store, self.b_n),
        }
    }
}
