//! Slow, literal reference implementations used by `selftest` and the
//! acceptance suite. Each one is written from the defining formula with
//! plain loops and shares no code with the library path it checks.

use std::f64::consts::PI;

use blockwatch_core::scene::{LinkStatus, SceneState, Vec2};
use blockwatch_core::wireless::{ChannelMatrix, Codebook, OfdmConfig, Path};
use num_complex::Complex64;

/// Tap-domain channel sum evaluated one (subcarrier, antenna, tap, path)
/// term at a time. Row-major `[subcarrier][antenna]`.
pub fn direct_channel(paths: &[Path], cfg: &OfdmConfig) -> Vec<Complex64> {
    let (kk, dd, mm) = (cfg.subcarriers, cfg.cyclic_prefix, cfg.antennas);
    let mut out = vec![Complex64::new(0.0, 0.0); kk * mm];
    for k in 0..kk {
        for m in 0..mm {
            let mut acc = Complex64::new(0.0, 0.0);
            for d in 0..dd {
                for p in paths {
                    let x = (d as f64 * cfg.sample_time - p.delay) / cfg.sample_time;
                    let pulse = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
                    let twiddle = Complex64::from_polar(1.0, -2.0 * PI * (k * d) as f64 / kk as f64);
                    let steer = Complex64::from_polar(1.0, PI * m as f64 * p.azimuth.sin() * p.elevation.cos());
                    acc += p.gain * twiddle * pulse * steer;
                }
            }
            out[k * mm + m] = acc;
        }
    }
    out
}

/// Index of the codebook entry with the largest summed received power;
/// the first index wins ties.
pub fn exhaustive_beam(h: &ChannelMatrix, cb: &Codebook) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for q in 0..cb.len() {
        let f = cb.beam(q);
        let mut power = 0.0;
        for k in 0..h.subcarriers() {
            let mut y = Complex64::new(0.0, 0.0);
            for m in 0..h.antennas() {
                y += h.row(k)[m] * f[m];
            }
            power += y.norm_sqr();
        }
        if power > best.1 {
            best = (q, power);
        }
    }
    best.0
}

/// GRU weights in the order `w_z, w_r, w_n` (`[hidden, input]`), `u_z, u_r,
/// u_n` (`[hidden, hidden]`), `b_z, b_r, b_n` (`[hidden]`).
pub struct GruWeights<'a> {
    pub mats: [&'a [f64]; 9],
    pub input: usize,
    pub hidden: usize,
}

/// One GRU step for a batch of row vectors, written as scalar loops.
pub fn gru_step(x: &[f64], h: &[f64], w: &GruWeights<'_>, batch: usize) -> Vec<f64> {
    let (ni, nh) = (w.input, w.hidden);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut out = vec![0.0; batch * nh];
    for b in 0..batch {
        for j in 0..nh {
            let mut gate = [w.mats[6][j], w.mats[7][j], w.mats[8][j]];
            let mut recur = [0.0; 3];
            for i in 0..ni {
                for g in 0..3 {
                    gate[g] += w.mats[g][j * ni + i] * x[b * ni + i];
                }
            }
            for i in 0..nh {
                for g in 0..3 {
                    recur[g] += w.mats[3 + g][j * nh + i] * h[b * nh + i];
                }
            }
            let z = sig(gate[0] + recur[0]);
            let r = sig(gate[1] + recur[1]);
            let n = (gate[2] + r * recur[2]).tanh();
            out[b * nh + j] = (1.0 - z) * n + z * h[b * nh + j];
        }
    }
    out
}

/// Occlusion by testing `samples` evenly spaced interior points of the
/// base-station-to-user segment against every blocker's open interior.
pub fn sampled_los(s: &SceneState, user: usize, samples: usize) -> LinkStatus {
    let a = s.bs.position;
    let b = s.users[user].position;
    let hit = (0..samples).any(|i| {
        let t = (i as f64 + 0.5) / samples as f64;
        let p = Vec2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
        s.blockers
            .iter()
            .any(|k| (p.x - k.center.x).abs() < k.half_extents.x && (p.y - k.center.y).abs() < k.half_extents.y)
    });
    LinkStatus::from_blocked(hit)
}
