//! Geometric OFDM channel synthesis, a DFT-grid beam codebook and
//! exhaustive beam selection for a uniform linear array.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One propagation path between the base station and a user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    /// Complex amplitude including path loss.
    pub gain: Complex64,
    /// Propagation delay in seconds.
    pub delay: f64,
    /// Azimuth relative to array boresight, radians.
    pub azimuth: f64,
    /// Elevation, radians.
    pub elevation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfdmConfig {
    pub subcarriers: usize,
    /// Cyclic prefix length in samples; bounds the longest representable delay.
    pub cyclic_prefix: usize,
    /// Sampling period in seconds.
    pub sample_time: f64,
    pub antennas: usize,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self { subcarriers: 32, cyclic_prefix: 32, sample_time: 20e-9, antennas: 16 }
    }
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subcarriers == 0 {
            return Err(Error::config("wireless.subcarriers", "must be at least 1"));
        }
        if self.cyclic_prefix == 0 {
            return Err(Error::config("wireless.cyclic_prefix", "must be at least 1"));
        }
        if !(self.sample_time > 0.0 && self.sample_time.is_finite()) {
            return Err(Error::config("wireless.sample_time", "must be positive"));
        }
        if self.antennas == 0 {
            return Err(Error::config("wireless.antennas", "must be at least 1"));
        }
        Ok(())
    }

    /// Longest delay the tap sum can represent, `D * T_S`.
    pub fn max_delay(&self) -> f64 {
        self.cyclic_prefix as f64 * self.sample_time
    }
}

/// Unit-norm beamforming vectors, one per beam index.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    antennas: usize,
    vectors: Vec<Vec<Complex64>>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn beam(&self, index: usize) -> &[Complex64] {
        &self.vectors[index]
    }

    pub fn beams(&self) -> impl Iterator<Item = &[Complex64]> {
        self.vectors.iter().map(Vec::as_slice)
    }

    /// Multiplies every entry by `factor`. Only useful for invariance checks;
    /// the result is no longer unit-norm.
    pub fn scaled(&self, factor: f64) -> Codebook {
        let vectors = self.vectors.iter().map(|v| v.iter().map(|c| c * factor).collect()).collect();
        Codebook { antennas: self.antennas, vectors }
    }

    /// Hex SHA-256 over the dimensions and the little-endian entries.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.antennas as u64).to_le_bytes());
        h.update((self.vectors.len() as u64).to_le_bytes());
        for c in self.vectors.iter().flatten() {
            h.update(c.re.to_le_bytes());
            h.update(c.im.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Channel of one user: row `k` is the `M`-element response on subcarrier `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    subcarriers: usize,
    antennas: usize,
    data: Vec<Complex64>,
}

impl ChannelMatrix {
    pub fn zeros(subcarriers: usize, antennas: usize) -> Self {
        Self { subcarriers, antennas, data: vec![Complex64::new(0.0, 0.0); subcarriers * antennas] }
    }

    /// Wraps row-major `K x M` data.
    pub fn from_rows(subcarriers: usize, antennas: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != subcarriers * antennas {
            return Err(Error::Validation(format!(
                "channel data has {} entries, expected {subcarriers} x {antennas}",
                data.len()
            )));
        }
        Ok(Self { subcarriers, antennas, data })
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn row(&self, k: usize) -> &[Complex64] {
        &self.data[k * self.antennas..(k + 1) * self.antennas]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Complex64]> {
        self.data.chunks(self.antennas)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }
}

/// Normalized sinc, `sin(pi x) / (pi x)`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Half-wavelength ULA response `a_m = exp(j pi m sin(azimuth) cos(elevation))`.
pub fn steering_vector(azimuth: f64, elevation: f64, antennas: usize) -> Vec<Complex64> {
    let phase = PI * azimuth.sin() * elevation.cos();
    (0..antennas).map(|m| Complex64::from_polar(1.0, phase * m as f64)).collect()
}

/// `count` beams steered on a uniform grid over `[-pi/2, pi/2)`, each scaled
/// to unit norm. The grid is half-open because the two endfire directions
/// give the same ULA response.
pub fn build_codebook(antennas: usize, count: usize) -> Result<Codebook> {
    if count < 2 {
        return Err(Error::config("wireless.beams", format!("codebook needs at least 2 beams, got {count}")));
    }
    if antennas == 0 {
        return Err(Error::config("wireless.antennas", "must be at least 1"));
    }
    let norm = (antennas as f64).sqrt();
    let vectors = (0..count)
        .map(|i| {
            let angle = codebook_angle(i, count);
            steering_vector(angle, 0.0, antennas).into_iter().map(|c| c / norm).collect()
        })
        .collect();
    Ok(Codebook { antennas, vectors })
}

/// Steering angle of beam `index` in a `count`-beam codebook.
pub fn codebook_angle(index: usize, count: usize) -> f64 {
    -PI / 2.0 + PI * index as f64 / count as f64
}

/// Evaluates the tap-domain sum
/// `h_k = sum_d sum_l gain_l exp(-j 2 pi k d / K) p(d T_S - delay_l) a(az_l, el_l)`
/// with `p(t) = sinc(t / T_S)`.
pub fn channel(paths: &[Path], cfg: &OfdmConfig) -> Result<ChannelMatrix> {
    cfg.validate()?;
    let limit = cfg.max_delay();
    for (i, p) in paths.iter().enumerate() {
        if !(p.delay >= 0.0 && p.delay < limit) {
            return Err(Error::DelayOutOfRange { path: i, delay_ns: p.delay * 1e9, limit_ns: limit * 1e9 });
        }
    }
    let (k_count, m_count, d_count) = (cfg.subcarriers, cfg.antennas, cfg.cyclic_prefix);
    // twiddle[k * D + d] = exp(-j 2 pi k d / K)
    let twiddle: Vec<Complex64> = (0..k_count)
        .flat_map(|k| {
            (0..d_count).map(move |d| Complex64::from_polar(1.0, -2.0 * PI * (k * d) as f64 / k_count as f64))
        })
        .collect();
    let mut h = ChannelMatrix::zeros(k_count, m_count);
    for p in paths {
        let taps: Vec<f64> = (0..d_count).map(|d| sinc(d as f64 - p.delay / cfg.sample_time)).collect();
        let a = steering_vector(p.azimuth, p.elevation, m_count);
        for k in 0..k_count {
            let coeff: Complex64 =
                twiddle[k * d_count..(k + 1) * d_count].iter().zip(&taps).map(|(w, &t)| w * t).sum::<Complex64>()
                    * p.gain;
            for (out, &am) in h.data[k * m_count..(k + 1) * m_count].iter_mut().zip(&a) {
                *out += coeff * am;
            }
        }
    }
    Ok(h)
}

/// `y = h^T f x + n` with `n` circularly-symmetric Gaussian of variance `sigma2`.
pub fn receive_signal<R: Rng + ?Sized>(
    h: &[Complex64],
    f: &[Complex64],
    x: Complex64,
    sigma2: f64,
    rng: &mut R,
) -> Complex64 {
    let signal: Complex64 = h.iter().zip(f).map(|(a, b)| a * b).sum::<Complex64>() * x;
    if sigma2 == 0.0 {
        return signal;
    }
    let s = (sigma2 / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    signal + Complex64::new(re * s, im * s)
}

/// Received power of every beam summed over subcarriers, noiseless with `x = 1`.
pub fn beam_powers(h: &ChannelMatrix, cb: &Codebook) -> Result<Vec<f64>> {
    if h.antennas() != cb.antennas() {
        return Err(Error::Validation(format!(
            "channel has {} antennas, codebook {}",
            h.antennas(),
            cb.antennas()
        )));
    }
    Ok(cb
        .beams()
        .map(|f| {
            h.rows().map(|row| row.iter().zip(f).map(|(a, b)| a * b).sum::<Complex64>().norm_sqr()).sum()
        })
        .collect())
}

/// Index of the most powerful beam; ties go to the lowest index.
pub fn beam_select(h: &ChannelMatrix, cb: &Codebook) -> Result<usize> {
    let powers = beam_powers(h, cb)?;
    let mut best = 0;
    for (i, &p) in powers.iter().enumerate() {
        if p > powers[best] {
            best = i;
        }
    }
    Ok(best)
}
