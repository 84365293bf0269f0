//! Dense f64 vectors and keyed RNG streams.
//!
//! Everything downstream exchanges model parameters as [`ParamVec`], a flat
//! f64 vector of fixed length. All randomness flows through [`RngStream`],
//! which derives an independent generator from a `(seed, purpose, round,
//! client)` key, so replaying any single stream never disturbs the others
//! and client scheduling order cannot change results.
//!
//! Reductions (dot products, norms, sums) are plain sequential loops in
//! index order; outputs are bit-stable across runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat vector of model parameters.
///
/// Invariant: every entry is finite. Public constructors validate; internal
/// arithmetic preserves finiteness checks at the round engine's boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVec(Vec<f64>);

impl ParamVec {
    /// Build from raw values, rejecting NaN/Inf entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid_argument(
                "values",
                format!("non-finite entry at index {i}"),
            ));
        }
        Ok(ParamVec(values))
    }

    pub fn zeros(d: usize) -> Self {
        ParamVec(vec![0.0; d])
    }

    /// Internal constructor that skips the finiteness scan.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        ParamVec(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm; 0 exactly iff all entries are 0.
    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamVec) -> Result<f64> {
        check_len("dot", self.len(), other.len())?;
        Ok(self
            .0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Elementwise `c * self`.
    pub fn scaled(&self, c: f64) -> ParamVec {
        ParamVec(self.0.iter().map(|v| c * v).collect())
    }

    pub fn add(&self, other: &ParamVec) -> Result<ParamVec> {
        check_len("add", self.len(), other.len())?;
        Ok(ParamVec(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &ParamVec) -> Result<ParamVec> {
        check_len("sub", self.len(), other.len())?;
        Ok(ParamVec(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    /// In-place `self += c * other`, for accumulation loops.
    pub fn add_scaled_assign(&mut self, c: f64, other: &ParamVec) -> Result<()> {
        check_len("add_scaled_assign", self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in self.0.iter_mut() {
            *a *= c;
        }
    }
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}

/// `alpha * x + y`, elementwise.
pub fn axpy(alpha: f64, x: &ParamVec, y: &ParamVec) -> Result<ParamVec> {
    check_len("axpy", x.len(), y.len())?;
    Ok(ParamVec(
        x.values()
            .iter()
            .zip(y.values())
            .map(|(a, b)| alpha * a + b)
            .collect(),
    ))
}

/// What a stream's draws are used for. Each purpose gets its own generator
/// per (round, client), so e.g. uplink noise can be replayed in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamPurpose {
    Init,
    TrainData,
    TestData,
    Partition,
    BatchDraw,
    Downlink,
    Uplink,
    SharpnessProbe,
    Landscape,
    Assumption,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Init => 1,
            StreamPurpose::TrainData => 2,
            StreamPurpose::TestData => 3,
            StreamPurpose::Partition => 4,
            StreamPurpose::BatchDraw => 5,
            StreamPurpose::Downlink => 6,
            StreamPurpose::Uplink => 7,
            StreamPurpose::SharpnessProbe => 8,
            StreamPurpose::Landscape => 9,
            StreamPurpose::Assumption => 10,
        }
    }
}

/// A named, replayable randomness source.
///
/// The generator is keyed by `(seed, purpose, round, client)`; the same key
/// always yields the same sample sequence, and distinct keys yield
/// independent sequences regardless of scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    purpose: StreamPurpose,
    round: u64,
    client: u64,
}

impl RngStream {
    pub fn new(seed: u64, purpose: StreamPurpose, round: u64, client: u64) -> Self {
        RngStream {
            seed,
            purpose,
            round,
            client,
        }
    }

    /// Stream not tied to a round or client (data generation, init).
    pub fn global(seed: u64, purpose: StreamPurpose) -> Self {
        RngStream::new(seed, purpose, 0, 0)
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn client(&self) -> u64 {
        self.client
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ self.purpose.tag());
        h = splitmix64(h ^ self.round);
        h = splitmix64(h ^ self.client);
        ChaCha8Rng::seed_from_u64(h)
    }
}

// SplitMix64 finalizer; fixed constants, stable forever.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `d` iid standard-normal draws from the stream.
pub fn sample_gaussian(stream: &RngStream, d: usize) -> ParamVec {
    let mut rng = stream.rng();
    ParamVec::from_raw((0..d).map(|_| rng.sample(StandardNormal)).collect())
}

/// Uniform draw in `[lo, hi)` helper used by initializers.
pub(crate) fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    lo + u * (hi - lo)
}
