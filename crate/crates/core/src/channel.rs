//! AWGN and flat Rayleigh fading channels with MMSE equalization.
//!
//! Signals are unit-power complex symbols. `snr_db` sets the noise variance
//! `σ² = 10^(−snr/10)`; `+∞` is the noiseless sentinel.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    /// Pass-through, used for overfitting and debugging.
    Identity,
    Awgn,
    Rayleigh,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::Identity => "identity",
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        })
    }
}

impl std::str::FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "awgn" => Ok(Self::Awgn),
            "rayleigh" => Ok(Self::Rayleigh),
            _ => Err(Error::Config(format!("unknown channel {s:?}"))),
        }
    }
}

pub fn noise_var(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// Circularly symmetric `CN(0, var)` sample.
pub fn complex_normal(rng: &mut Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    Complex64::new(s * rng.normal(), s * rng.normal())
}

pub fn mean_power(q: &[Complex64]) -> f64 {
    q.iter().map(|v| v.norm_sqr()).sum::<f64>() / q.len().max(1) as f64
}

fn check_power(q: &[Complex64]) -> Result<()> {
    let p = mean_power(q);
    if (p - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "channel input has power {p}, expected 1; the realized SNR would be wrong"
        )));
    }
    Ok(())
}

/// `r = q + n`, `n ~ CN(0, σ²)`.
pub fn awgn(q: &[Complex64], snr_db: f64, rng: &mut Rng) -> Result<Vec<Complex64>> {
    check_power(q)?;
    let var = noise_var(snr_db);
    Ok(q.iter().map(|&s| s + complex_normal(rng, var)).collect())
}

/// `r_i = h_i q_i + n_i` with `h ~ CN(0,1)` held constant over blocks of
/// `block_len` symbols (`None` = one coefficient for the whole frame).
pub fn rayleigh(
    q: &[Complex64],
    snr_db: f64,
    rng: &mut Rng,
    block_len: Option<usize>,
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    check_power(q)?;
    let var = noise_var(snr_db);
    let h = fading(q.len(), block_len, rng)?;
    let r = q
        .iter()
        .zip(&h)
        .map(|(&s, &hv)| hv * s + complex_normal(rng, var))
        .collect();
    Ok((r, h))
}

fn fading(len: usize, block_len: Option<usize>, rng: &mut Rng) -> Result<Vec<Complex64>> {
    let block = block_len.unwrap_or(len).max(1);
    if block_len == Some(0) {
        return Err(Error::Config("fading block length must be positive".into()));
    }
    let mut h = Vec::with_capacity(len);
    while h.len() < len {
        let v = complex_normal(rng, 1.0);
        h.extend(std::iter::repeat(v).take(block.min(len - h.len())));
    }
    Ok(h)
}

/// `r̂_i = conj(h_i) r_i / (|h_i|² + σ²)`.
pub fn mmse_equalize(r: &[Complex64], h: &[Complex64], noise_var: f64) -> Vec<Complex64> {
    r.iter()
        .zip(h)
        .map(|(&rv, &hv)| {
            let den = hv.norm_sqr() + noise_var;
            if den == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                hv.conj() * rv / den
            }
        })
        .collect()
}

/// One draw of everything the receiver needs: fading, noise, and σ².
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub noise_var: f64,
    pub h: Vec<Complex64>,
    pub noise: Vec<Complex64>,
}

impl ChannelRealization {
    pub fn sample(kind: ChannelKind, len: usize, snr_db: f64, block_len: Option<usize>, rng: &mut Rng) -> Result<Self> {
        let var = noise_var(snr_db);
        let (h, noise) = match kind {
            ChannelKind::Identity => (vec![Complex64::new(1.0, 0.0); len], vec![Complex64::new(0.0, 0.0); len]),
            ChannelKind::Awgn => {
                let n = (0..len).map(|_| complex_normal(rng, var)).collect();
                (vec![Complex64::new(1.0, 0.0); len], n)
            }
            ChannelKind::Rayleigh => {
                let h = fading(len, block_len, rng)?;
                let n = (0..len).map(|_| complex_normal(rng, var)).collect();
                (h, n)
            }
        };
        Ok(Self {
            kind,
            snr_db,
            noise_var: if kind == ChannelKind::Identity { 0.0 } else { var },
            h,
            noise,
        })
    }

    /// Received symbols before equalization.
    pub fn transmit(&self, q: &[Complex64]) -> Vec<Complex64> {
        q.iter()
            .zip(self.h.iter().zip(&self.noise))
            .map(|(&s, (&h, &n))| h * s + n)
            .collect()
    }

    /// Received and equalized symbols.
    pub fn receive(&self, q: &[Complex64]) -> Vec<Complex64> {
        match self.kind {
            ChannelKind::Identity => q.to_vec(),
            ChannelKind::Awgn => self.transmit(q),
            ChannelKind::Rayleigh => mmse_equalize(&self.transmit(q), &self.h, self.noise_var),
        }
    }

    /// The equalized output as an affine map of the input symbols:
    /// `r̂ = gain ⊙ q + offset`, in interleaved real layout `[re, im, …]`.
    /// For MMSE, `gain = |h|²/(|h|²+σ²)` (real) and `offset = conj(h) n/(|h|²+σ²)`.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let len = self.h.len();
        let mut gain = Vec::with_capacity(2 * len);
        let mut offset = Vec::with_capacity(2 * len);
        for (&h, &n) in self.h.iter().zip(&self.noise) {
            let (gv, ov) = match self.kind {
                ChannelKind::Identity => (1.0, Complex64::new(0.0, 0.0)),
                ChannelKind::Awgn => (1.0, n),
                ChannelKind::Rayleigh => {
                    let den = h.norm_sqr() + self.noise_var;
                    if den == 0.0 {
                        (0.0, Complex64::new(0.0, 0.0))
                    } else {
                        (h.norm_sqr() / den, h.conj() * n / den)
                    }
                }
            };
            gain.extend([gv, gv]);
            offset.extend([ov.re, ov.im]);
        }
        (gain, offset)
    }

    /// Applies [`Self::affine`] to interleaved real symbols inside a graph.
    pub fn apply_graph(&self, g: &mut Graph, q: Var) -> Result<Var> {
        let shape = g.shape(q).to_vec();
        if g.value(q).numel() != 2 * self.h.len() {
            return Err(Error::Dimension(format!(
                "signal has {} reals, realization covers {} symbols",
                g.value(q).numel(),
                self.h.len()
            )));
        }
        let (gain, offset) = self.affine();
        let gv = g.constant(Tensor::new(&shape, gain)?);
        let ov = g.constant(Tensor::new(&shape, offset)?);
        let scaled = g.mul(q, gv)?;
        g.add(scaled, ov)
    }
}

/// Interleaved `[re, im, …]` to complex symbols.
pub fn to_complex(reals: &[f64]) -> Vec<Complex64> {
    reals.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

pub fn to_reals(symbols: &[Complex64]) -> Vec<f64> {
    symbols.iter().flat_map(|c| [c.re, c.im]).collect()
}
