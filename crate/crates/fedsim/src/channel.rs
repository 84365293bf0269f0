//! Perturbation channels applied to models in transit.
//!
//! Every channel is additive: the output is `w + eps` for some error vector
//! `eps`, and the report records the realized `||eps||` plus the
//! signal-to-noise ratio. Kinds:
//!
//! - `none`: identity.
//! - `gaussian_fixed_norm`: isotropic direction scaled so `||eps||` equals
//!   `strength` exactly. This saturates the transmission-error norm bound
//!   the protocol assumes, so "strength" is unambiguous.
//! - `gaussian_iid`: per-coordinate `N(0, strength^2)`.
//! - `quantization`: unbiased stochastic rounding to a `levels`-point grid
//!   over the per-tensor max-abs range.
//! - `dp_clip_gauss`: norm clipping followed by Gaussian noise with std
//!   `sigma * clip`, the usual differential-privacy release shape.
//!
//! "strength" is an absolute l2 norm in parameter space, not relative to
//! `||w||`; dB figures are derived bookkeeping in the report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{sample_gaussian, ParamVec, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    None,
    GaussianFixedNorm,
    GaussianIid,
    Quantization,
    DpClipGauss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationChannel {
    kind: ChannelKind,
    direction: Direction,
    strength: f64,
    levels: usize,
    clip: f64,
    sigma: f64,
}

/// What one channel application did: realized error norm, SNR in dB
/// (`20*log10(||w|| / ||eps||)`, infinite for silent channels), and which
/// (round, client) stream produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelReport {
    pub applied_norm: f64,
    pub snr_db: f64,
    pub round: u64,
    pub client: u64,
}

fn report(sent: &ParamVec, received: &ParamVec, stream: &RngStream) -> Result<ChannelReport> {
    let applied_norm = received.sub(sent)?.l2_norm();
    let signal = sent.l2_norm();
    let snr_db = if applied_norm > 0.0 && signal > 0.0 {
        20.0 * (signal / applied_norm).log10()
    } else {
        f64::INFINITY
    };
    Ok(ChannelReport {
        applied_norm,
        snr_db,
        round: stream.round(),
        client: stream.client(),
    })
}

impl PerturbationChannel {
    pub fn none(direction: Direction) -> Self {
        PerturbationChannel {
            kind: ChannelKind::None,
            direction,
            strength: 0.0,
            levels: 0,
            clip: 0.0,
            sigma: 0.0,
        }
    }

    pub fn gaussian_fixed_norm(strength: f64, direction: Direction) -> Result<Self> {
        if !(strength >= 0.0) {
            return Err(Error::invalid_argument("strength", "must be >= 0"));
        }
        Ok(PerturbationChannel {
            kind: ChannelKind::GaussianFixedNorm,
            strength,
            ..PerturbationChannel::none(direction)
        })
    }

    pub fn gaussian_iid(strength: f64, direction: Direction) -> Result<Self> {
        if !(strength >= 0.0) {
            return Err(Error::invalid_argument("strength", "must be >= 0"));
        }
        Ok(PerturbationChannel {
            kind: ChannelKind::GaussianIid,
            strength,
            ..PerturbationChannel::none(direction)
        })
    }

    pub fn quantization(levels: usize, direction: Direction) -> Result<Self> {
        if levels < 2 {
            return Err(Error::invalid_argument("levels", "must be >= 2"));
        }
        Ok(PerturbationChannel {
            kind: ChannelKind::Quantization,
            levels,
            ..PerturbationChannel::none(direction)
        })
    }

    pub fn dp_clip_gauss(clip: f64, sigma: f64, direction: Direction) -> Result<Self> {
        if !(clip > 0.0) {
            return Err(Error::invalid_argument("clip", "must be > 0"));
        }
        if !(sigma >= 0.0) {
            return Err(Error::invalid_argument("sigma", "must be >= 0"));
        }
        Ok(PerturbationChannel {
            kind: ChannelKind::DpClipGauss,
            clip,
            sigma,
            ..PerturbationChannel::none(direction)
        })
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn is_none(&self) -> bool {
        self.kind == ChannelKind::None
    }

    /// Sends `w` through the channel: returns the received vector and a
    /// report with `applied_norm` recomputed as `||received - sent||`.
    /// Pure given the stream, so parallel-safe.
    pub fn perturb(&self, w: &ParamVec, stream: &RngStream) -> Result<(ParamVec, ChannelReport)> {
        let received = match self.kind {
            ChannelKind::None => w.clone(),
            ChannelKind::GaussianFixedNorm => {
                if self.strength == 0.0 {
                    w.clone()
                } else {
                    let g = sample_gaussian(stream, w.len());
                    let norm = g.l2_norm();
                    // A numerically zero draw has probability ~0; treat it
                    // as a silent channel rather than divide by zero.
                    if norm < 1e-300 {
                        w.clone()
                    } else {
                        crate::numkit::axpy(self.strength / norm, &g, w)?
                    }
                }
            }
            ChannelKind::GaussianIid => {
                let g = sample_gaussian(stream, w.len());
                crate::numkit::axpy(self.strength, &g, w)?
            }
            ChannelKind::Quantization => quantize_values(w, self.levels, stream),
            ChannelKind::DpClipGauss => dp_values(w, self.clip, self.sigma, stream)?,
        };
        let rep = report(w, &received, stream)?;
        Ok((received, rep))
    }
}

fn quantize_values(w: &ParamVec, levels: usize, stream: &RngStream) -> ParamVec {
    let max_abs = w.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return w.clone();
    }
    let lo = -max_abs;
    let step = 2.0 * max_abs / (levels - 1) as f64;
    let mut rng = stream.rng();
    let out = w
        .values()
        .iter()
        .map(|&v| {
            let t = (v - lo) / step;
            let k = (t.floor() as usize).min(levels - 1);
            let frac = t - k as f64;
            let up = frac > 0.0 && k + 1 <= levels - 1 && rand::Rng::random::<f64>(&mut rng) < frac;
            lo + (k + usize::from(up)) as f64 * step
        })
        .collect();
    ParamVec::from_raw(out)
}

fn dp_values(w: &ParamVec, clip: f64, sigma: f64, stream: &RngStream) -> Result<ParamVec> {
    let norm = w.l2_norm();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    let clipped = w.scaled(scale);
    if sigma == 0.0 {
        return Ok(clipped);
    }
    let g = sample_gaussian(stream, w.len());
    crate::numkit::axpy(sigma * clip, &g, &clipped)
}

/// Unbiased stochastic quantization to a `levels`-point uniform grid over
/// the per-tensor max-abs range. Standalone form of the `quantization`
/// channel kind.
pub fn quantize_channel(
    w: &ParamVec,
    levels: usize,
    stream: &RngStream,
) -> Result<(ParamVec, ChannelReport)> {
    if levels < 2 {
        return Err(Error::invalid_argument("levels", "must be >= 2"));
    }
    let out = quantize_values(w, levels, stream);
    let rep = report(w, &out, stream)?;
    Ok((out, rep))
}

/// Clip to `||.|| <= clip`, then add iid Gaussian noise with std
/// `sigma * clip`. Standalone form of the `dp_clip_gauss` channel kind.
pub fn dp_channel(
    w: &ParamVec,
    clip: f64,
    sigma: f64,
    stream: &RngStream,
) -> Result<(ParamVec, ChannelReport)> {
    if !(clip > 0.0) {
        return Err(Error::invalid_argument("clip", "must be > 0"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid_argument("sigma", "must be >= 0"));
    }
    let out = dp_values(w, clip, sigma, stream)?;
    let rep = report(w, &out, stream)?;
    Ok((out, rep))
}
