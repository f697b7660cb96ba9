use crate::error::{NumericsError, Result};
use crate::graph::{GradBuf, Graph, Node, Var};
use crate::ops::Op;
use crate::real::Real;

pub(crate) struct ConvSaved {
    pub x: Var,
    pub k: Var,
    geom: Geometry,
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn output_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if k > padded {
        return Err(NumericsError::Config {
            op: "conv2d",
            msg: format!("kernel extent {k} exceeds padded input extent {padded}"),
        });
    }
    if (padded - k) % stride != 0 {
        return Err(NumericsError::Config {
            op: "conv2d",
            msg: format!(
                "output size ({len} + 2*{pad} - {k})/{stride} + 1 is not an integer"
            ),
        });
    }
    Ok((padded - k) / stride + 1)
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of `x: [B, C_in, H, W]` with `kernels: [C_out, C_in, kH, kW]`.
    /// No bias term.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(NumericsError::Shape { op: "conv2d (input vs kernels)", lhs: xs, rhs: ks });
        }
        if stride == 0 {
            return Err(NumericsError::Config { op: "conv2d", msg: "stride must be positive".into() });
        }
        let ho = output_extent(xs[2], ks[2], stride, padding)?;
        let wo = output_extent(xs[3], ks[3], stride, padding)?;
        let geom = Geometry {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad: padding,
            ho,
            wo,
        };
        let y = if stride == 1 {
            let (xv, kv) = (self.value(x), self.value(kernels));
            #[cfg(target_arch = "x86_64")]
            if wide_simd() {
                // SAFETY: AVX2 support was checked at runtime.
                unsafe { unit_stride_forward_wide(xv, kv, &geom) }
            } else {
                unit_stride_forward(xv, kv, &geom)
            }
            #[cfg(not(target_arch = "x86_64"))]
            unit_stride_forward(xv, kv, &geom)
        } else {
            direct_forward(self.value(x), self.value(kernels), &geom)
        };
        let shape = vec![geom.batch, geom.c_out, ho, wo];
        self.push("conv2d", y, shape, Op::Conv2d(Box::new(ConvSaved { x, k: kernels, geom })))
    }
}

impl Geometry {
    /// Output index range `[lo, hi)` whose input coordinate `o*stride + k - pad`
    /// lands inside `0..len_in`.
    #[inline]
    fn span(&self, k: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        if len_in + self.pad <= k {
            return (0, 0);
        }
        let hi = ((len_in + self.pad - k - 1) / s + 1).min(len_out);
        (lo.min(hi), hi)
    }
}

/// Visits every (output row segment, input row segment) pair that a kernel
/// tap touches. `f(out_offset, in_offset, len)` works on contiguous runs when
/// `stride == 1`; otherwise each run has length 1.
#[inline]
fn for_each_run(g: &Geometry, ki: usize, kj: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (ylo, yhi) = g.span(ki, g.h, g.ho);
    let (xlo, xhi) = g.span(kj, g.w, g.wo);
    if xlo >= xhi {
        return;
    }
    for oy in ylo..yhi {
        let iy = oy * g.stride + ki - g.pad;
        if g.stride == 1 {
            f(oy * g.wo + xlo, iy * g.w + xlo + kj - g.pad, xhi - xlo);
        } else {
            for ox in xlo..xhi {
                f(oy * g.wo + ox, iy * g.w + ox * g.stride + kj - g.pad, 1);
            }
        }
    }
}


/// Stride-1 convolution in a width-padded layout: with the input zero-padded
/// to `Hp x Wp` and the output laid out with row stride `Wp`, every kernel
/// tap is one contiguous multiply-add over the whole plane. The `Wp - W'`
/// trailing columns of each output row are scratch.
struct Padded {
    wp: usize,
    hp: usize,
    /// Length of an output plane in padded layout.
    run: usize,
}

impl Padded {
    fn new(g: &Geometry) -> Self {
        let wp = g.w + 2 * g.pad;
        let hp = g.h + 2 * g.pad;
        Self { wp, hp, run: (g.ho - 1) * wp + g.wo }
    }

    #[inline(always)]
    fn pad_input<T: Real>(&self, x: &[T], g: &Geometry) -> Vec<T> {
        let plane = g.h * g.w;
        let pplane = self.hp * self.wp;
        let mut out = vec![T::zero(); g.batch * g.c_in * pplane];
        for (src, dst) in x.chunks(plane).zip(out.chunks_mut(pplane)) {
            for r in 0..g.h {
                dst[(r + g.pad) * self.wp + g.pad..][..g.w].copy_from_slice(&src[r * g.w..][..g.w]);
            }
        }
        out
    }

    fn tap(&self, ki: usize, kj: usize) -> usize {
        ki * self.wp + kj
    }
}

fn wide_simd() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

// AVX2 builds of the stride-1 kernels. Every helper on the hot path is
// `inline(always)` so it is compiled with the wider vectors.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn unit_stride_forward_wide<T: Real>(x: &[T], k: &[T], g: &Geometry) -> Vec<T> {
    unit_stride_forward(x, k, g)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn unit_stride_backward_wide<T: Real>(nodes: &[Node<T>], buf: &mut GradBuf<'_, T>, s: &ConvSaved, g: &[T]) {
    unit_stride_backward(nodes, buf, s, g)
}

/// `y[i] += Σ_j w[j] * src[i + j]`, one kernel row at a time.
#[inline(always)]
fn correlate_fixed<T: Real, const KW: usize>(y: &mut [T], w: &[T], src: &[T]) {
    let w: [T; KW] = w.try_into().expect("kernel row width");
    let n = y.len();
    let src = &src[..n + KW - 1];
    for i in 0..n {
        let mut acc = y[i];
        for j in 0..KW {
            acc = acc + w[j] * src[i + j];
        }
        y[i] = acc;
    }
}

#[inline(always)]
fn correlate<T: Real>(y: &mut [T], w: &[T], src: &[T]) {
    match w.len() {
        1 => correlate_fixed::<T, 1>(y, w, src),
        2 => correlate_fixed::<T, 2>(y, w, src),
        3 => correlate_fixed::<T, 3>(y, w, src),
        5 => correlate_fixed::<T, 5>(y, w, src),
        _ => {
            for (j, &wv) in w.iter().enumerate() {
                for (yv, &xv) in y.iter_mut().zip(&src[j..]) {
                    *yv = *yv + wv * xv;
                }
            }
        }
    }
}

/// `out[j] += Σ_i d[i] * src[i + j]` for every tap `j` of a kernel row.
#[inline(always)]
fn correlate_dot_fixed<T: Real, const KW: usize>(out: &mut [T], d: &[T], src: &[T]) {
    const LANES: usize = 8;
    let n = d.len();
    let body = n - n % LANES;
    for (j, o) in out[..KW].iter_mut().enumerate() {
        let s = &src[j..j + n];
        let mut acc = [T::zero(); LANES];
        for (dc, sc) in d[..body].chunks_exact(LANES).zip(s[..body].chunks_exact(LANES)) {
            for l in 0..LANES {
                acc[l] = acc[l] + dc[l] * sc[l];
            }
        }
        let mut total = acc.iter().fold(T::zero(), |a, &b| a + b);
        for k in body..n {
            total = total + d[k] * s[k];
        }
        *o = *o + total;
    }
}

#[inline(always)]
fn correlate_dot<T: Real>(out: &mut [T], d: &[T], src: &[T]) {
    match out.len() {
        1 => correlate_dot_fixed::<T, 1>(out, d, src),
        2 => correlate_dot_fixed::<T, 2>(out, d, src),
        3 => correlate_dot_fixed::<T, 3>(out, d, src),
        5 => correlate_dot_fixed::<T, 5>(out, d, src),
        _ => {
            for (j, o) in out.iter_mut().enumerate() {
                *o = *o + d.iter().zip(&src[j..]).fold(T::zero(), |a, (&p, &q)| a + p * q);
            }
        }
    }
}

#[inline(always)]
fn unit_stride_forward<T: Real>(x: &[T], k: &[T], g: &Geometry) -> Vec<T> {
    let pd = Padded::new(g);
    let xp = pd.pad_input(x, g);
    let pplane = pd.hp * pd.wp;
    let p = g.positions();
    let mut y = vec![T::zero(); g.batch * g.c_out * p];
    let mut ext = vec![T::zero(); pd.run];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            ext.iter_mut().for_each(|v| *v = T::zero());
            for ci in 0..g.c_in {
                let src = &xp[(b * g.c_in + ci) * pplane..][..pplane];
                for ki in 0..g.kh {
                    let w = &k[((co * g.c_in + ci) * g.kh + ki) * g.kw..][..g.kw];
                    correlate(&mut ext, w, &src[pd.tap(ki, 0)..]);
                }
            }
            let dst = &mut y[(b * g.c_out + co) * p..][..p];
            for oy in 0..g.ho {
                dst[oy * g.wo..][..g.wo].copy_from_slice(&ext[oy * pd.wp..][..g.wo]);
            }
        }
    }
    y
}

#[inline(always)]
fn unit_stride_backward<T: Real>(
    nodes: &[Node<T>],
    buf: &mut GradBuf<'_, T>,
    s: &ConvSaved,
    g: &[T],
) {
    let geom = &s.geom;
    let pd = Padded::new(geom);
    let p = geom.positions();
    let pplane = pd.hp * pd.wp;
    let kw = geom.kw;
    let k = &nodes[s.k.0].value;
    let krow = |co: usize, ci: usize, ki: usize| ((co * geom.c_in + ci) * geom.kh + ki) * kw;
    // Output gradient in padded-row layout with kw-1 guard zeros on both
    // ends; the scratch columns stay zero.
    let guard = kw - 1;
    let dlen = pd.run + 2 * guard;
    let mut dy = vec![T::zero(); geom.batch * geom.c_out * dlen];
    for (src, dst) in g.chunks(p).zip(dy.chunks_mut(dlen)) {
        for oy in 0..geom.ho {
            dst[guard + oy * pd.wp..][..geom.wo].copy_from_slice(&src[oy * geom.wo..][..geom.wo]);
        }
    }
    if nodes[s.k.0].requires_grad {
        let xp = pd.pad_input(&nodes[s.x.0].value, geom);
        let dk = buf.slot(s.k).expect("requires grad");
        for b in 0..geom.batch {
            for co in 0..geom.c_out {
                let d = &dy[(b * geom.c_out + co) * dlen + guard..][..pd.run];
                for ci in 0..geom.c_in {
                    let src = &xp[(b * geom.c_in + ci) * pplane..][..pplane];
                    for ki in 0..geom.kh {
                        let r = krow(co, ci, ki);
                        correlate_dot(&mut dk[r..r + kw], d, &src[pd.tap(ki, 0)..]);
                    }
                }
            }
        }
    }
    if nodes[s.x.0].requires_grad {
        // dx_pad[tap + m] += Σ_j w[j] d[m - j]  ==  correlation of the
        // guarded gradient with the reversed kernel row.
        let mut flipped = vec![T::zero(); geom.c_out * geom.c_in * geom.kh * kw];
        for (dst, src) in flipped.chunks_mut(kw).zip(k.chunks(kw)) {
            dst.iter_mut().zip(src.iter().rev()).for_each(|(a, &b)| *a = b);
        }
        let mut dxp = vec![T::zero(); pplane];
        let plane = geom.h * geom.w;
        let seg = pd.run + guard;
        let dx = buf.slot(s.x).expect("requires grad");
        for b in 0..geom.batch {
            for ci in 0..geom.c_in {
                dxp.iter_mut().for_each(|v| *v = T::zero());
                for co in 0..geom.c_out {
                    let d = &dy[(b * geom.c_out + co) * dlen..][..dlen];
                    for ki in 0..geom.kh {
                        let r = krow(co, ci, ki);
                        let base = pd.tap(ki, 0);
                        correlate(&mut dxp[base..base + seg], &flipped[r..r + kw], d);
                    }
                }
                let dst = &mut dx[(b * geom.c_in + ci) * plane..][..plane];
                for r in 0..geom.h {
                    let row = &dxp[(r + geom.pad) * pd.wp + geom.pad..][..geom.w];
                    dst[r * geom.w..][..geom.w].iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
            }
        }
    }
}

fn direct_forward<T: Real>(x: &[T], k: &[T], g: &Geometry) -> Vec<T> {
    let p = g.positions();
    let plane = g.h * g.w;
    let mut y = vec![T::zero(); g.batch * g.c_out * p];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let yp = &mut y[(b * g.c_out + co) * p..][..p];
            for ci in 0..g.c_in {
                let xp = &x[(b * g.c_in + ci) * plane..][..plane];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = k[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                        for_each_run(g, ki, kj, |yo, xo, len| {
                            for (yv, &xv) in yp[yo..yo + len].iter_mut().zip(&xp[xo..xo + len]) {
                                *yv = *yv + wv * xv;
                            }
                        });
                    }
                }
            }
        }
    }
    y
}

pub(super) fn backward<T: Real>(
    nodes: &[Node<T>],
    buf: &mut GradBuf<'_, T>,
    s: &ConvSaved,
    g: &[T],
) {
    if s.geom.stride == 1 {
        #[cfg(target_arch = "x86_64")]
        if wide_simd() {
            // SAFETY: AVX2 support was checked at runtime.
            return unsafe { unit_stride_backward_wide(nodes, buf, s, g) };
        }
        return unit_stride_backward(nodes, buf, s, g);
    }
    let geom = &s.geom;
    let p = geom.positions();
    let plane = geom.h * geom.w;
    let x = &nodes[s.x.0].value;
    let k = &nodes[s.k.0].value;
    let kidx = |co: usize, ci: usize, ki: usize, kj: usize| ((co * geom.c_in + ci) * geom.kh + ki) * geom.kw + kj;

    if let Some(dk) = buf.slot(s.k) {
        for b in 0..geom.batch {
            for co in 0..geom.c_out {
                let dy = &g[(b * geom.c_out + co) * p..][..p];
                for ci in 0..geom.c_in {
                    let xp = &x[(b * geom.c_in + ci) * plane..][..plane];
                    for ki in 0..geom.kh {
                        for kj in 0..geom.kw {
                            let mut acc = T::zero();
                            for_each_run(geom, ki, kj, |yo, xo, len| {
                                for (&d, &xv) in dy[yo..yo + len].iter().zip(&xp[xo..xo + len]) {
                                    acc = acc + d * xv;
                                }
                            });
                            let slot = &mut dk[kidx(co, ci, ki, kj)];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(dx) = buf.slot(s.x) {
        for b in 0..geom.batch {
            for co in 0..geom.c_out {
                let dy = &g[(b * geom.c_out + co) * p..][..p];
                for ci in 0..geom.c_in {
                    let dxp = &mut dx[(b * geom.c_in + ci) * plane..][..plane];
                    for ki in 0..geom.kh {
                        for kj in 0..geom.kw {
                            let wv = k[kidx(co, ci, ki, kj)];
                            for_each_run(geom, ki, kj, |yo, xo, len| {
                                for (d, &gy) in dxp[xo..xo + len].iter_mut().zip(&dy[yo..yo + len]) {
                                    *d = *d + wv * gy;
                                }
                            });
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, NumericsError};

    #[test]
    fn identity_kernel_on_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let k = g.constant(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.value(y), &[1.0; 9]);
    }

    #[test]
    fn sum_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = g.constant(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), &[10.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[2, 3, 6, 6], vec![0.0; 216]).unwrap();
        let k = g.constant(&[4, 3, 5, 5], (0..300).map(|v| v as f32 * 0.01).collect()).unwrap();
        let y = g.conv2d(x, k, 1, 2).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_preserves_size_and_matches_direct_sum() {
        let mut g = Graph::<f64>::new();
        let xs: Vec<f64> = (0..2 * 5 * 4).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let ks: Vec<f64> = (0..3 * 2 * 3 * 3).map(|v| ((v * 5) % 7) as f64 * 0.5 - 1.0).collect();
        let x = g.constant(&[1, 2, 5, 4], xs.clone()).unwrap();
        let k = g.constant(&[3, 2, 3, 3], ks.clone()).unwrap();
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 5, 4]);
        for co in 0..3 {
            for oy in 0..5i64 {
                for ox in 0..4i64 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3i64 {
                            for kj in 0..3i64 {
                                let (iy, ix) = (oy + ki - 1, ox + kj - 1);
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    acc += xs[(c * 5 + iy as usize) * 4 + ix as usize]
                                        * ks[((co * 2 + c) * 3 + ki as usize) * 3 + kj as usize];
                                }
                            }
                        }
                    }
                    let got = g.value(y)[(co * 5 + oy as usize) * 4 + ox as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_integral_output_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[1, 1, 6, 6], vec![0.0; 36]).unwrap();
        let k = g.constant(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        let err = g.conv2d(x, k, 2, 0).unwrap_err();
        assert!(matches!(err, NumericsError::Config { .. }));
        let k = g.constant(&[1, 1, 7, 7], vec![0.0; 49]).unwrap();
        assert!(g.conv2d(x, k, 1, 0).is_err());
    }
}
