use crate::error::{NumericsError, Result};
use crate::graph::{GradBuf, Graph, Node, Var};
use crate::ops::elementwise::sigmoid;
use crate::ops::Op;
use crate::real::{matmul, Mat, Real};

/// Tape handles for one GRU cell's parameters. `w_*` are
/// `[hidden, input]`, `u_*` are `[hidden, hidden]`, `b_*` are `[hidden]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_n: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_n: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_n: Var,
}

impl GruVars {
    pub(crate) fn all(&self, x: Var, h: Var) -> Vec<Var> {
        vec![
            x, h, self.w_z, self.w_r, self.w_n, self.u_z, self.u_r, self.u_n, self.b_z, self.b_r,
            self.b_n,
        ]
    }
}

pub(crate) struct GruSaved<T> {
    pub x: Var,
    pub h: Var,
    pub vars: GruVars,
    z: Vec<T>,
    r: Vec<T>,
    n: Vec<T>,
    /// `h_prev U_nᵀ`, needed for the reset-gate gradient.
    hn: Vec<T>,
    batch: usize,
    input: usize,
    hidden: usize,
}

impl<T: Real> Graph<T> {
    fn check_gate(&self, gate: &'static str, w: Var, u: Var, b: Var, input: usize, hidden: usize) -> Result<()> {
        if self.shape(w) != [hidden, input] {
            return Err(NumericsError::Shape { op: gate, lhs: self.shape(w).to_vec(), rhs: vec![hidden, input] });
        }
        if self.shape(u) != [hidden, hidden] {
            return Err(NumericsError::Shape { op: gate, lhs: self.shape(u).to_vec(), rhs: vec![hidden, hidden] });
        }
        if self.shape(b) != [hidden] {
            return Err(NumericsError::Shape { op: gate, lhs: self.shape(b).to_vec(), rhs: vec![hidden] });
        }
        Ok(())
    }

    /// One GRU step:
    ///
    /// ```text
    /// z = σ(x W_zᵀ + h U_zᵀ + b_z)
    /// r = σ(x W_rᵀ + h U_rᵀ + b_r)
    /// n = tanh(x W_nᵀ + r ⊙ (h U_nᵀ) + b_n)
    /// h' = (1 - z) ⊙ n + z ⊙ h
    /// ```
    pub fn gru_cell(&mut self, x: Var, h_prev: Var, p: GruVars) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let hs = self.shape(h_prev).to_vec();
        if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] {
            return Err(NumericsError::Shape { op: "gru_cell (x vs h_prev)", lhs: xs, rhs: hs });
        }
        let (batch, input, hidden) = (xs[0], xs[1], hs[1]);
        self.check_gate("gru update gate (W_z, U_z, b_z)", p.w_z, p.u_z, p.b_z, input, hidden)?;
        self.check_gate("gru reset gate (W_r, U_r, b_r)", p.w_r, p.u_r, p.b_r, input, hidden)?;
        self.check_gate("gru candidate (W_n, U_n, b_n)", p.w_n, p.u_n, p.b_n, input, hidden)?;

        let xv = Mat::new(self.value(x), batch, input);
        let hv = Mat::new(self.value(h_prev), batch, hidden);
        let pre = |w: Var, u: Option<Var>, b: Option<Var>| {
            let mut out = vec![T::zero(); batch * hidden];
            if let Some(b) = b {
                let bias = self.value(b);
                out.chunks_mut(hidden).for_each(|row| row.copy_from_slice(bias));
            }
            matmul(xv, Mat::new(self.value(w), hidden, input).t(), &mut out, b.is_some());
            if let Some(u) = u {
                matmul(hv, Mat::new(self.value(u), hidden, hidden).t(), &mut out, true);
            }
            out
        };
        let mut z = pre(p.w_z, Some(p.u_z), Some(p.b_z));
        let mut r = pre(p.w_r, Some(p.u_r), Some(p.b_r));
        let mut n = pre(p.w_n, None, Some(p.b_n));
        let mut hn = vec![T::zero(); batch * hidden];
        matmul(hv, Mat::new(self.value(p.u_n), hidden, hidden).t(), &mut hn, false);

        z.iter_mut().for_each(|v| *v = sigmoid(*v));
        r.iter_mut().for_each(|v| *v = sigmoid(*v));
        for i in 0..n.len() {
            n[i] = (n[i] + r[i] * hn[i]).tanh();
        }
        let hp = self.value(h_prev);
        let out: Vec<T> = (0..n.len()).map(|i| (T::one() - z[i]) * n[i] + z[i] * hp[i]).collect();
        let saved = GruSaved { x, h: h_prev, vars: p, z, r, n, hn, batch, input, hidden };
        self.push("gru_cell", out, vec![batch, hidden], Op::Gru(Box::new(saved)))
    }
}

pub(super) fn backward<T: Real>(
    nodes: &[Node<T>],
    buf: &mut GradBuf<'_, T>,
    s: &GruSaved<T>,
    g: &[T],
    fault: Option<T>,
) {
    let (batch, input, hidden) = (s.batch, s.input, s.hidden);
    let len = batch * hidden;
    let hp = &nodes[s.h.0].value;
    let mut da_z = vec![T::zero(); len];
    let mut da_r = vec![T::zero(); len];
    let mut da_n = vec![T::zero(); len];
    let mut dhn = vec![T::zero(); len];
    let mut dh_direct = vec![T::zero(); len];
    for i in 0..len {
        let (z, r, n) = (s.z[i], s.r[i], s.n[i]);
        let dz = g[i] * (hp[i] - n);
        let dn = g[i] * (T::one() - z);
        dh_direct[i] = g[i] * z;
        da_n[i] = dn * (T::one() - n * n);
        let dr = da_n[i] * s.hn[i];
        dhn[i] = da_n[i] * r;
        da_z[i] = dz * z * (T::one() - z);
        da_r[i] = dr * r * (T::one() - r);
    }
    let v = &s.vars;
    let w = |var: Var| Mat::new(&nodes[var.0].value, hidden, input);
    let u = |var: Var| Mat::new(&nodes[var.0].value, hidden, hidden);
    fn m<T>(d: &[T], batch: usize, hidden: usize) -> Mat<'_, T> {
        Mat::new(d, batch, hidden)
    }
    let xm = Mat::new(&nodes[s.x.0].value, batch, input);
    let hm = Mat::new(hp, batch, hidden);

    if let Some(dx) = buf.slot(s.x) {
        matmul(m(&da_z, batch, hidden), w(v.w_z), dx, true);
        matmul(m(&da_r, batch, hidden), w(v.w_r), dx, true);
        matmul(m(&da_n, batch, hidden), w(v.w_n), dx, true);
    }
    if let Some(dh) = buf.slot(s.h) {
        dh.iter_mut().zip(&dh_direct).for_each(|(d, &v)| *d = *d + v);
        matmul(m(&da_z, batch, hidden), u(v.u_z), dh, true);
        matmul(m(&da_r, batch, hidden), u(v.u_r), dh, true);
        matmul(m(&dhn, batch, hidden), u(v.u_n), dh, true);
    }
    for (param, src, from) in [
        (v.w_z, &da_z, xm),
        (v.w_r, &da_r, xm),
        (v.w_n, &da_n, xm),
        (v.u_z, &da_z, hm),
        (v.u_r, &da_r, hm),
        (v.u_n, &dhn, hm),
    ] {
        if let Some(slot) = buf.slot(param) {
            if param == v.w_r && fault.is_some() {
                let mut tmp = vec![T::zero(); slot.len()];
                matmul(m(src, batch, hidden).t(), from, &mut tmp, false);
                let k = T::one() + fault.unwrap_or_else(T::zero);
                slot.iter_mut().zip(&tmp).for_each(|(d, &t)| *d = *d + t * k);
            } else {
                matmul(m(src, batch, hidden).t(), from, slot, true);
            }
        }
    }
    for (param, src) in [(v.b_z, &da_z), (v.b_r, &da_r), (v.b_n, &da_n)] {
        if let Some(slot) = buf.slot(param) {
            for row in src.chunks(hidden) {
                slot.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
            }
        }
    }
}
