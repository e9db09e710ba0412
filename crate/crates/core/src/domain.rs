//! Shared domain types: the user×item pair space, dense per-pair tables,
//! propensity fields with clipping metadata and seeded random substreams.
//!
//! Every per-pair array in the crate is dense and indexed by
//! `u * n_items + i` (see [`PairSpace::index`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric tolerances shared by checks across the crate.
pub mod tol {
    /// Relative tolerance for exact algebraic identities (Eq. 4 style).
    pub const IDENTITY_REL: f64 = 1e-12;
    /// Relative tolerance (to mean |e|) for the validity residual after targeting.
    pub const VALIDITY_REL: f64 = 1e-8;
    /// Absolute bound on η* when the imputation already satisfies validity.
    pub const ETA_ZERO: f64 = 1e-10;
    /// Lower/upper bound applied to predicted probabilities before any log.
    pub const PROB_EPS: f64 = 1e-6;
    /// Number of standard errors used by Monte-Carlo assertions.
    pub const MC_SE: f64 = 3.0;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairSpace {
    n_users: usize,
    n_items: usize,
}

impl PairSpace {
    pub fn new(n_users: usize, n_items: usize) -> Result<Self> {
        if n_users == 0 || n_items == 0 {
            return Err(Error::config(format!(
                "pair space needs positive dimensions, got {n_users}x{n_items}"
            )));
        }
        Ok(Self { n_users, n_items })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// |D| = n_users × n_items.
    pub fn total(&self) -> usize {
        self.n_users * self.n_items
    }

    #[inline]
    pub fn index(&self, u: usize, i: usize) -> usize {
        debug_assert!(u < self.n_users && i < self.n_items);
        u * self.n_items + i
    }

    pub fn checked_index(&self, u: usize, i: usize) -> Result<usize> {
        if u >= self.n_users || i >= self.n_items {
            return Err(Error::domain(format!(
                "pair ({u}, {i}) outside {}x{} space",
                self.n_users, self.n_items
            )));
        }
        Ok(self.index(u, i))
    }

    #[inline]
    pub fn pair(&self, idx: usize) -> (usize, usize) {
        (idx / self.n_items, idx % self.n_items)
    }
}

/// A fully generated semi-synthetic world: truth plus one draw of labels and
/// exposures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionTable {
    pub space: PairSpace,
    /// Probability of a positive label per pair.
    pub r_true: Vec<f64>,
    /// Sampled binary label `r_{u,i}(1)`.
    pub r: Vec<bool>,
    /// Exposure indicator.
    pub o: Vec<bool>,
    /// True exposure propensity.
    pub p_true: Vec<f64>,
}

impl InteractionTable {
    pub fn validate(&self) -> Result<()> {
        let n = self.space.total();
        if [self.r_true.len(), self.r.len(), self.o.len(), self.p_true.len()]
            .iter()
            .any(|&len| len != n)
        {
            return Err(Error::domain("interaction table arrays must have |D| entries"));
        }
        if let Some(p) = self.p_true.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::domain(format!("propensity {p} outside (0, 1]")));
        }
        if let Some(r) = self.r_true.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::domain(format!("label probability {r} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn exposure_rate(&self) -> f64 {
        self.o.iter().filter(|&&o| o).count() as f64 / self.o.len() as f64
    }
}

/// Learned or assigned propensities with the clipping bound that was applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityField {
    values: Vec<f64>,
    clip_threshold: Option<f64>,
}

impl PropensityField {
    /// Wraps propensities that were not clipped. Every value must lie in (0, 1].
    pub fn unclipped(values: Vec<f64>) -> Result<Self> {
        check_propensities(&values)?;
        Ok(Self {
            values,
            clip_threshold: None,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn clip_threshold(&self) -> Option<f64> {
        self.clip_threshold
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_propensities(p: &[f64]) -> Result<()> {
    match p.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
        Some(v) => Err(Error::domain(format!("propensity {v} outside (0, 1]"))),
        None => Ok(()),
    }
}

/// `max(p, threshold)` per pair.
pub fn clip_propensities(p: &[f64], threshold: f64) -> Result<PropensityField> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!(
            "clip threshold must lie in (0, 1), got {threshold}"
        )));
    }
    check_propensities(p)?;
    Ok(PropensityField {
        values: p.iter().map(|&v| v.max(threshold)).collect(),
        clip_threshold: Some(threshold),
    })
}

/// Named purposes that get their own independent random substream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Stream {
    Exposure = 1,
    Label = 2,
    BetaNoise = 3,
    Init = 4,
    Flip = 5,
    Skew = 6,
    Batch = 7,
    Split = 8,
    Completion = 9,
    ErrorNoise = 10,
    Design = 11,
    Source = 12,
}

/// Seed holder handing out deterministic ChaCha substreams.
///
/// `stream(purpose, index)` always yields the same generator for the same
/// seed, so draws for one purpose never shift when another purpose consumes
/// more or fewer numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeededRng {
    seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: Stream, index: u64) -> ChaCha8Rng {
        debug_assert!(index < 1 << 48);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((purpose as u64) << 48) | (index & ((1 << 48) - 1)));
        rng
    }

    /// A derived seed, used when a whole sub-pipeline (e.g. one replicate)
    /// needs its own family of streams.
    pub fn child(&self, purpose: Stream, index: u64) -> SeededRng {
        SeededRng::new(self.stream(purpose, index).random())
    }
}

/// Independent Bernoulli draw per entry.
pub fn bernoulli_sample<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<Vec<bool>> {
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::domain(format!("probability {p} outside [0, 1]")));
    }
    // `u < p` maps p = 0 to false and p = 1 to true exactly.
    Ok(probs.iter().map(|&p| rng.random::<f64>() < p).collect())
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let ez = z.exp();
        ez / (1.0 + ez)
    }
}

/// Binary cross entropy of label probability `target` against prediction `pred`,
/// with `pred` clamped into `[PROB_EPS, 1 - PROB_EPS]`.
#[inline]
pub fn cross_entropy(target: f64, pred: f64) -> f64 {
    let p = pred.clamp(tol::PROB_EPS, 1.0 - tol::PROB_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

pub(crate) fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
