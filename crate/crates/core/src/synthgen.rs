//! Semi-synthetic MNAR worlds.
//!
//! A rating source (file or the built-in low-rank generator) is completed by
//! matrix factorization into a dense 1–5 matrix `R`. Each pair then gets an
//! exposure propensity `p · α^{max(1, 5 − R)}` and a label probability
//! `r_true ∈ {0.1, 0.3, 0.5, 0.7, 0.9}`. Replicates draw exposures and labels
//! by Bernoulli sampling, noisy propensities through a harmonic mixture with
//! the average exposure rate, and evaluate six corrupted prediction matrices.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{make_split, IdMap, Rating, RatingFileSpec, RatingSet, SplitDataset};
use crate::domain::{
    bernoulli_sample, cross_entropy, mean_var, InteractionTable, PairSpace, PropensityField, SeededRng, Stream,
};
use crate::error::{Error, Result};
use crate::estimators::{ideal_loss, relative_error, Estimator, LossInputs};
use crate::models::{adam_step, AdamConfig, AdamState, MfModel};
use crate::targeting::{target, targeted_imputation, ImputationState, ResidualMode};

/// Label probabilities for ratings 1..=5.
pub const LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Decay base α ∈ (0, 1).
    pub alpha: f64,
    /// Scale p of the propensity formula; ignored when `target_obs_rate` is set.
    pub p_base: f64,
    /// Rescale p so the mean propensity equals this rate.
    pub target_obs_rate: Option<f64>,
    pub n_replicates: usize,
    /// Use `p̂ = p_true` and `ê = E[e | x]` instead of the noisy nuisances.
    pub oracle: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            p_base: 1.0,
            target_obs_rate: Some(0.05),
            n_replicates: 20,
            oracle: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.p_base > 0.0) {
            return Err(Error::config(format!("p_base must be positive, got {}", self.p_base)));
        }
        if let Some(t) = self.target_obs_rate {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::config(format!("target_obs_rate must lie in (0, 1], got {t}")));
            }
        }
        if self.n_replicates == 0 {
            return Err(Error::config("n_replicates must be positive"));
        }
        Ok(())
    }
}

/// Hyperparameters of the first-stage completion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionConfig {
    pub rank: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
    pub init_sigma: f64,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            adam: AdamConfig {
                lr: 0.01,
                weight_decay: 1e-4,
                ..AdamConfig::default()
            },
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            holdout_fraction: 0.1,
            init_sigma: 0.1,
            seed: 0,
        }
    }
}

fn squared_error_epoch(
    model: &mut MfModel,
    adam: &mut AdamState,
    data: &[Rating],
    order: &[usize],
    batch_size: usize,
) -> Result<()> {
    let mut grad = model.zeros_like();
    for batch in order.chunks(batch_size) {
        grad.data_mut().fill(0.0);
        let scale = 2.0 / batch.len() as f64;
        for &k in batch {
            let r = &data[k];
            let resid = model.score(r.user, r.item) - r.value;
            model.accumulate_score_grad(r.user, r.item, scale * resid, &mut grad);
        }
        let names = model.clone();
        adam_step(model.data_mut(), grad.data(), adam, |k| names.param_name(k))?;
    }
    Ok(())
}

fn rmse(model: &MfModel, data: &[Rating]) -> f64 {
    let sse: f64 = data
        .iter()
        .map(|r| (model.score(r.user, r.item) - r.value).powi(2))
        .sum();
    (sse / data.len() as f64).sqrt()
}

/// Fits a biased MF model with squared loss to the observed ratings and
/// rounds its predictions to the nearest integer in 1..=5.
///
/// Pairs whose user or item has no observation get the rounded global mean.
pub fn complete_ratings(observed: &[Rating], space: PairSpace, cfg: &CompletionConfig) -> Result<Vec<u8>> {
    if observed.is_empty() {
        return Err(Error::empty("no observed ratings to complete"));
    }
    for r in observed {
        space.checked_index(r.user, r.item)?;
        if !(1.0..=5.0).contains(&r.value) {
            return Err(Error::domain(format!("rating {} outside 1..=5", r.value)));
        }
    }
    let rng = SeededRng::new(cfg.seed);
    let mut shuffled: Vec<usize> = (0..observed.len()).collect();
    {
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng.stream(Stream::Split, 0));
    }
    let n_hold = ((observed.len() as f64) * cfg.holdout_fraction).floor() as usize;
    let n_hold = if observed.len() - n_hold == 0 { 0 } else { n_hold };
    let holdout: Vec<Rating> = shuffled[..n_hold].iter().map(|&k| observed[k]).collect();
    let train: Vec<Rating> = shuffled[n_hold..].iter().map(|&k| observed[k]).collect();

    let mean = observed.iter().map(|r| r.value).sum::<f64>() / observed.len() as f64;
    let mut model = MfModel::random(
        space.n_users(),
        space.n_items(),
        cfg.rank,
        cfg.init_sigma,
        &mut rng.stream(Stream::Init, 0),
    );
    model.set_global_bias(mean);
    let mut adam = AdamState::new(cfg.adam.clone(), model.data().len());
    let mut batch_rng = rng.stream(Stream::Batch, 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, model.clone());
    let mut stale = 0;
    for _ in 0..cfg.max_epochs {
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut batch_rng);
        }
        squared_error_epoch(&mut model, &mut adam, &train, &order, cfg.batch_size.max(1))?;
        if holdout.is_empty() {
            best = (rmse(&model, &train), model.clone());
            continue;
        }
        let score = rmse(&model, &holdout);
        if score < best.0 - 1e-6 {
            best = (score, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let model = best.1;

    let mut seen_user = vec![false; space.n_users()];
    let mut seen_item = vec![false; space.n_items()];
    for r in observed {
        seen_user[r.user] = true;
        seen_item[r.item] = true;
    }
    let fallback = round_rating(mean);
    let mut out = vec![0u8; space.total()];
    for u in 0..space.n_users() {
        for i in 0..space.n_items() {
            out[space.index(u, i)] = if seen_user[u] && seen_item[i] {
                round_rating(model.score(u, i))
            } else {
                fallback
            };
        }
    }
    Ok(out)
}

fn round_rating(x: f64) -> u8 {
    x.round().clamp(1.0, 5.0) as u8
}

fn check_ratings(ratings: &[u8]) -> Result<()> {
    match ratings.iter().find(|r| !(1..=5).contains(*r)) {
        Some(r) => Err(Error::domain(format!("rating {r} outside 1..=5"))),
        None => Ok(()),
    }
}

/// `p · α^{max(1, 5 − R)}` per pair.
pub fn assign_propensities(ratings: &[u8], cfg: &SynthConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_ratings(ratings)?;
    if ratings.is_empty() {
        return Err(Error::empty("no ratings"));
    }
    let shape: Vec<f64> = ratings.iter().map(|&r| cfg.alpha.powi((5 - r as i32).max(1))).collect();
    let p = match cfg.target_obs_rate {
        Some(target) => target / (shape.iter().sum::<f64>() / shape.len() as f64),
        None => cfg.p_base,
    };
    let out: Vec<f64> = match cfg.target_obs_rate {
        Some(_) => shape.iter().map(|s| (p * s).min(1.0)).collect(),
        None => shape.iter().map(|s| p * s).collect(),
    };
    if let Some(bad) = out.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
        return Err(Error::config(format!("propensity {bad} outside (0, 1]; lower p_base")));
    }
    Ok(out)
}

/// Rating level 1..=5 → `r_true`.
pub fn map_to_rtrue(ratings: &[u8]) -> Result<Vec<f64>> {
    check_ratings(ratings)?;
    Ok(ratings.iter().map(|&r| LEVELS[r as usize - 1]).collect())
}

/// Index into [`LEVELS`] of a five-point label probability.
fn level_of(r: f64) -> Result<usize> {
    LEVELS
        .iter()
        .position(|l| (l - r).abs() < 1e-9)
        .ok_or_else(|| Error::domain(format!("{r} is not one of the five label levels")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scenario {
    One,
    Three,
    Five,
    Rotate,
    Skew,
    Crs,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::One,
        Scenario::Three,
        Scenario::Five,
        Scenario::Rotate,
        Scenario::Skew,
        Scenario::Crs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::One => "ONE",
            Scenario::Three => "THREE",
            Scenario::Five => "FIVE",
            Scenario::Rotate => "ROTATE",
            Scenario::Skew => "SKEW",
            Scenario::Crs => "CRS",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown scenario {s:?}")))
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub scenario: Scenario,
    pub r_hat: Vec<f64>,
}

/// Draws from N(mean, sd²) restricted to `[lo, hi]` by rejection.
fn truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    if sd == 0.0 {
        return mean.clamp(lo, hi);
    }
    let normal = Normal::new(mean, sd).expect("finite normal parameters");
    loop {
        let x = normal.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
}

pub fn make_prediction_matrix<R: Rng + ?Sized>(
    scenario: Scenario,
    r_true: &[f64],
    rng: &mut R,
) -> Result<PredictionMatrix> {
    let levels: Vec<usize> = r_true.iter().map(|&r| level_of(r)).collect::<Result<_>>()?;
    let r_hat = match scenario {
        Scenario::One | Scenario::Three | Scenario::Five => {
            let source = match scenario {
                Scenario::One => 0,
                Scenario::Three => 1,
                _ => 2,
            };
            let n_flips = levels.iter().filter(|&&l| l == 4).count();
            let candidates: Vec<usize> = (0..levels.len()).filter(|&k| levels[k] == source).collect();
            let mut r_hat: Vec<f64> = levels.iter().map(|&l| LEVELS[l]).collect();
            let n_flips = n_flips.min(candidates.len());
            for pick in index::sample(rng, candidates.len(), n_flips) {
                r_hat[candidates[pick]] = LEVELS[4];
            }
            r_hat
        }
        Scenario::Rotate => levels
            .iter()
            .map(|&l| if l == 0 { LEVELS[4] } else { LEVELS[l] - 0.2 })
            .collect(),
        Scenario::Skew => levels
            .iter()
            .map(|&l| {
                let mu = LEVELS[l];
                truncated_normal(mu, (1.0 - mu) / 2.0, 0.1, 0.9, rng)
            })
            .collect(),
        Scenario::Crs => levels
            .iter()
            .map(|&l| if LEVELS[l] <= 0.6 { 0.2 } else { 0.6 })
            .collect(),
    };
    Ok(PredictionMatrix { scenario, r_hat })
}

/// `1/p̂ = (1 − β)/p + β/p_e` with `p_e` the average exposure rate.
pub fn noisy_propensities_with_beta(p_true: &[f64], o: &[bool], beta: f64) -> Result<PropensityField> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::domain(format!("beta {beta} outside [0, 1]")));
    }
    if p_true.len() != o.len() {
        return Err(Error::domain("propensities and exposures must share length"));
    }
    let exposed = o.iter().filter(|&&x| x).count();
    if exposed == 0 {
        return Err(Error::empty("no exposures, average exposure rate is zero"));
    }
    let p_e = exposed as f64 / o.len() as f64;
    let values = p_true
        .iter()
        .map(|&p| {
            if beta == 0.0 {
                p
            } else {
                1.0 / ((1.0 - beta) / p + beta / p_e)
            }
        })
        .collect();
    PropensityField::unclipped(values)
}

/// Draws one β ~ U[0, 1] and applies [`noisy_propensities_with_beta`].
pub fn noisy_propensities<R: Rng + ?Sized>(p_true: &[f64], o: &[bool], rng: &mut R) -> Result<(PropensityField, f64)> {
    let beta: f64 = rng.random();
    Ok((noisy_propensities_with_beta(p_true, o, beta)?, beta))
}

/// Propensity-weighted mean label over exposed pairs.
pub fn weighted_label_mean(r: &[bool], o: &[bool], p_hat: &PropensityField) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, &p) in p_hat.values().iter().enumerate() {
        if o[k] {
            num += if r[k] { 1.0 / p } else { 0.0 };
            den += 1.0 / p;
        }
    }
    if den == 0.0 {
        return Err(Error::empty("no exposed pairs for the imputed label"));
    }
    Ok(num / den)
}

/// `ê = CE(r̄, r̂)` on every pair, with `r̄` the inverse-propensity weighted
/// mean label over exposed pairs.
pub fn shared_imputed_errors(
    r: &[bool],
    o: &[bool],
    p_hat: &PropensityField,
    r_hat: &PredictionMatrix,
) -> Result<Vec<f64>> {
    if let Some(bad) = r_hat.r_hat.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
        return Err(Error::domain(format!("prediction {bad} outside (0, 1)")));
    }
    let r_bar = weighted_label_mean(r, o, p_hat)?;
    Ok(r_hat.r_hat.iter().map(|&x| cross_entropy(r_bar, x)).collect())
}

/// Per-pair CE between the sampled binary label and the prediction.
pub fn prediction_errors(r: &[bool], r_hat: &PredictionMatrix) -> Vec<f64> {
    r.iter()
        .zip(&r_hat.r_hat)
        .map(|(&r, &x)| cross_entropy(if r { 1.0 } else { 0.0 }, x))
        .collect()
}

/// Parameters of the built-in low-rank rating source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LowRankSource {
    pub n_users: usize,
    pub n_items: usize,
    pub rank: usize,
    /// Fraction of pairs that carry an observed rating.
    pub density: f64,
    /// Standard deviation of the per-rating noise on the latent scale.
    pub noise: f64,
    /// Strength with which higher ratings are more likely to be observed.
    pub selection: f64,
    /// Mean of the latent rating.
    pub center: f64,
    /// Scale of the factor term of the latent rating.
    pub spread: f64,
    pub seed: u64,
}

impl Default for LowRankSource {
    fn default() -> Self {
        Self {
            n_users: 300,
            n_items: 400,
            rank: 4,
            density: 0.08,
            noise: 0.3,
            selection: 0.5,
            center: 3.0,
            spread: 1.2,
            seed: 0,
        }
    }
}

impl LowRankSource {
    pub fn space(&self) -> Result<PairSpace> {
        PairSpace::new(self.n_users, self.n_items)
    }

    /// Dense latent rating matrix on a continuous 1–5 scale.
    pub fn latent(&self) -> Result<Vec<f64>> {
        let space = self.space()?;
        if self.rank == 0 {
            return Err(Error::config("low-rank source needs rank >= 1"));
        }
        let rng = SeededRng::new(self.seed);
        let mut r = rng.stream(Stream::Source, 0);
        let scale = 1.0 / (self.rank as f64).sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let users: Vec<f64> = (0..self.n_users * self.rank)
            .map(|_| normal.sample(&mut r) * scale)
            .collect();
        let items: Vec<f64> = (0..self.n_items * self.rank)
            .map(|_| normal.sample(&mut r) * scale)
            .collect();
        let ubias: Vec<f64> = (0..self.n_users).map(|_| 0.4 * normal.sample(&mut r)).collect();
        let ibias: Vec<f64> = (0..self.n_items).map(|_| 0.5 * normal.sample(&mut r)).collect();
        let mut out = vec![0.0; space.total()];
        for u in 0..self.n_users {
            for i in 0..self.n_items {
                let dot: f64 = (0..self.rank)
                    .map(|k| users[u * self.rank + k] * items[i * self.rank + k])
                    .sum();
                out[space.index(u, i)] = self.center + self.spread * dot + ubias[u] + ibias[i];
            }
        }
        Ok(out)
    }

    /// Probability that each pair carries an observed rating, increasing in
    /// the latent rating and averaging `density` before capping at 1.
    pub fn selection_propensities(&self, latent: &[f64]) -> Result<Vec<f64>> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::config(format!(
                "density must lie in (0, 1], got {}",
                self.density
            )));
        }
        let weights: Vec<f64> = latent
            .iter()
            .map(|x| (self.selection * (x - self.center)).exp())
            .collect();
        let mean_w = weights.iter().sum::<f64>() / weights.len() as f64;
        Ok(weights.iter().map(|w| (self.density * w / mean_w).min(1.0)).collect())
    }

    /// Observed rating triples: noisy rounded latent ratings on pairs chosen
    /// with [`LowRankSource::selection_propensities`].
    pub fn generate(&self) -> Result<Vec<Rating>> {
        let latent = self.latent()?;
        let p = self.selection_propensities(&latent)?;
        let out = self.rate_where(&latent, &p, Stream::Exposure, Stream::ErrorNoise)?;
        if out.is_empty() {
            return Err(Error::empty("low-rank source produced no ratings"));
        }
        Ok(out)
    }

    /// Ratings on a uniformly random `density` fraction of pairs, drawn
    /// independently of the MNAR sample.
    pub fn generate_mar(&self, density: f64) -> Result<Vec<Rating>> {
        if !(density > 0.0 && density <= 1.0) {
            return Err(Error::config(format!("MAR density must lie in (0, 1], got {density}")));
        }
        let latent = self.latent()?;
        let p = vec![density; latent.len()];
        self.rate_where(&latent, &p, Stream::Design, Stream::Label)
    }

    fn rate_where(&self, latent: &[f64], p: &[f64], pick: Stream, noise: Stream) -> Result<Vec<Rating>> {
        let space = self.space()?;
        let rng = SeededRng::new(self.seed);
        let mut pick = rng.stream(pick, 0);
        let mut noise = rng.stream(noise, 0);
        let normal = Normal::new(0.0, self.noise.max(0.0)).expect("finite noise");
        let mut out = Vec::new();
        for (k, &pk) in p.iter().enumerate() {
            if pick.random::<f64>() < pk {
                let (u, i) = space.pair(k);
                let value = round_rating(latent[k] + normal.sample(&mut noise)) as f64;
                out.push(Rating {
                    user: u,
                    item: i,
                    value,
                });
            }
        }
        Ok(out)
    }
}

/// Settings of the built-in MNAR-train / MAR-test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSplitSpec {
    pub source: LowRankSource,
    pub mar_density: f64,
    pub positive_threshold: f64,
}

impl Default for SyntheticSplitSpec {
    fn default() -> Self {
        Self {
            source: LowRankSource {
                n_users: 200,
                n_items: 300,
                ..LowRankSource::default()
            },
            mar_density: 0.05,
            positive_threshold: 4.0,
        }
    }
}

/// A split together with the selection propensities that produced its
/// MNAR part.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplit {
    pub split: SplitDataset,
    pub p_true: Vec<f64>,
}

pub fn synthetic_split(spec: &SyntheticSplitSpec, val_fraction: f64, seed: u64) -> Result<SyntheticSplit> {
    let source = LowRankSource {
        seed,
        ..spec.source.clone()
    };
    let latent = source.latent()?;
    let p_true = source.selection_propensities(&latent)?;
    let as_set = |ratings: Vec<Rating>| -> Result<RatingSet> {
        Ok(RatingSet {
            n_users: source.n_users,
            n_items: source.n_items,
            ratings,
            users: IdMap::from_ids((0..source.n_users).map(|u| u.to_string()).collect())?,
            items: IdMap::from_ids((0..source.n_items).map(|i| i.to_string()).collect())?,
            duplicates: 0,
        })
    };
    let mnar = as_set(source.generate()?)?;
    let mar = as_set(source.generate_mar(spec.mar_density)?)?;
    let file_spec = RatingFileSpec {
        positive_threshold: spec.positive_threshold,
        ..RatingFileSpec::default()
    };
    let split = make_split(&mnar, &mar, &file_spec, val_fraction, seed)?;
    Ok(SyntheticSplit { split, p_true })
}

/// A completed world: everything that stays fixed across replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub space: PairSpace,
    pub ratings: Vec<u8>,
    pub r_true: Vec<f64>,
    pub p_true: Vec<f64>,
}

impl SynthWorld {
    pub fn from_ratings(space: PairSpace, ratings: Vec<u8>, cfg: &SynthConfig) -> Result<Self> {
        if ratings.len() != space.total() {
            return Err(Error::domain("rating matrix does not cover the pair space"));
        }
        let p_true = assign_propensities(&ratings, cfg)?;
        let r_true = map_to_rtrue(&ratings)?;
        Ok(Self {
            space,
            ratings,
            r_true,
            p_true,
        })
    }

    /// One Bernoulli draw of exposures and labels.
    pub fn sample(&self, rng: &SeededRng, replicate: u64) -> Result<InteractionTable> {
        let o = bernoulli_sample(&self.p_true, &mut rng.stream(Stream::Exposure, replicate))?;
        let r = bernoulli_sample(&self.r_true, &mut rng.stream(Stream::Label, replicate))?;
        Ok(InteractionTable {
            space: self.space,
            r_true: self.r_true.clone(),
            r,
            o,
            p_true: self.p_true.clone(),
        })
    }

    pub fn rating_histogram(&self) -> [usize; 5] {
        let mut h = [0; 5];
        for &r in &self.ratings {
            h[r as usize - 1] += 1;
        }
        h
    }
}

const WORLD_MAGIC: &[u8; 8] = b"TDRWORLD";
const WORLD_VERSION: u32 = 1;

/// Columnar binary dump of an interaction table: header, then `r_true`,
/// `p_true` as f64 columns and `r`, `o` as byte columns.
pub fn write_table<W: Write>(w: &mut W, table: &InteractionTable) -> Result<()> {
    w.write_all(WORLD_MAGIC)?;
    w.write_all(&WORLD_VERSION.to_le_bytes())?;
    w.write_all(&(table.space.n_users() as u64).to_le_bytes())?;
    w.write_all(&(table.space.n_items() as u64).to_le_bytes())?;
    for col in [&table.r_true, &table.p_true] {
        for x in col.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for col in [&table.r, &table.o] {
        let bytes: Vec<u8> = col.iter().map(|&b| b as u8).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_table<R: Read>(r: &mut R) -> Result<InteractionTable> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != WORLD_MAGIC {
        return Err(Error::Format("not a world dump (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != WORLD_VERSION {
        return Err(Error::Format("unsupported world dump version".into()));
    }
    let mut dims = [0u8; 16];
    r.read_exact(&mut dims)?;
    let nu = u64::from_le_bytes(dims[..8].try_into().expect("8 bytes")) as usize;
    let ni = u64::from_le_bytes(dims[8..].try_into().expect("8 bytes")) as usize;
    let space = PairSpace::new(nu, ni)?;
    let n = space.total();
    let read_f64 = |r: &mut R| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let r_true = read_f64(r)?;
    let p_true = read_f64(r)?;
    let read_bool = |r: &mut R| -> Result<Vec<bool>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf)?;
        buf.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Format(format!("binary column holds {b}"))),
            })
            .collect()
    };
    let labels = read_bool(r)?;
    let o = read_bool(r)?;
    let table = InteractionTable {
        space,
        r_true,
        r: labels,
        o,
        p_true,
    };
    table.validate()?;
    Ok(table)
}

pub fn save_table(path: &Path, table: &InteractionTable) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_table(&mut f, table)?;
    f.flush()?;
    Ok(())
}

pub fn load_table(path: &Path) -> Result<InteractionTable> {
    read_table(&mut std::io::BufReader::new(crate::error::open(path)?))
}

/// Relative errors of every estimator on one (scenario, replicate) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub scenario: Scenario,
    pub replicate: u64,
    pub beta: f64,
    pub ideal: f64,
    /// `(estimator, estimate, relative error)` in [`Estimator::ALL`] order.
    pub estimates: Vec<(Estimator, f64, f64)>,
}

impl ReplicateRow {
    pub fn re(&self, est: Estimator) -> f64 {
        self.estimates
            .iter()
            .find(|(e, _, _)| *e == est)
            .map(|(_, _, re)| *re)
            .expect("every estimator is reported")
    }
}

/// Mean and SD of the relative error per (scenario, estimator).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: Scenario,
    pub estimator: Estimator,
    pub mean_re: f64,
    pub sd_re: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTable {
    pub rows: Vec<ReplicateRow>,
    pub summary: Vec<SummaryRow>,
}

impl SynthTable {
    pub fn cell(&self, scenario: Scenario, est: Estimator) -> &SummaryRow {
        self.summary
            .iter()
            .find(|r| r.scenario == scenario && r.estimator == est)
            .expect("complete summary")
    }

    /// Scenarios with mean RE ordered TDR < DR < IPS < Naive.
    pub fn ordered_scenarios(&self) -> Vec<Scenario> {
        Scenario::ALL
            .into_iter()
            .filter(|&s| {
                let m = |e| self.cell(s, e).mean_re;
                m(Estimator::Tdr) < m(Estimator::Dr)
                    && m(Estimator::Dr) < m(Estimator::Ips)
                    && m(Estimator::Ips) < m(Estimator::Naive)
            })
            .collect()
    }

    /// Scenarios where SD(TDR) ≤ SD(DR).
    pub fn stable_scenarios(&self) -> Vec<Scenario> {
        Scenario::ALL
            .into_iter()
            .filter(|&s| self.cell(s, Estimator::Tdr).sd_re <= self.cell(s, Estimator::Dr).sd_re)
            .collect()
    }
}

/// One replicate of every scenario. Exposures, labels and `p̂` are shared
/// across scenarios; predictions are drawn per scenario.
pub fn run_replicate(world: &SynthWorld, cfg: &SynthConfig, replicate: u64) -> Result<Vec<ReplicateRow>> {
    let rng = SeededRng::new(cfg.seed);
    let table = world.sample(&rng, replicate)?;
    let (p_hat, beta) = if cfg.oracle {
        (PropensityField::unclipped(world.p_true.clone())?, 0.0)
    } else {
        noisy_propensities(&world.p_true, &table.o, &mut rng.stream(Stream::BetaNoise, replicate))?
    };
    Scenario::ALL
        .iter()
        .enumerate()
        .map(|(s, &scenario)| {
            let mut r = match scenario {
                Scenario::Skew => rng.stream(Stream::Skew, replicate),
                _ => rng.stream(Stream::Flip, replicate * Scenario::ALL.len() as u64 + s as u64),
            };
            let pred = make_prediction_matrix(scenario, &world.r_true, &mut r)?;
            let e = prediction_errors(&table.r, &pred);
            let e_hat = if cfg.oracle {
                world
                    .r_true
                    .iter()
                    .zip(&pred.r_hat)
                    .map(|(&t, &x)| cross_entropy(t, x))
                    .collect()
            } else {
                shared_imputed_errors(&table.r, &table.o, &p_hat, &pred)?
            };
            let state = ImputationState::new(e_hat.clone(), p_hat.clone())?;
            let (state, _) = target(&e, &table.o, state, ResidualMode::WithOmega)?;
            let e_tilde = targeted_imputation(&state);
            let inputs = LossInputs {
                e: &e,
                e_hat: &e_hat,
                e_tilde: Some(&e_tilde),
                o: &table.o,
                p_hat: p_hat.values(),
            };
            let ideal = ideal_loss(&e);
            let estimates = Estimator::ALL
                .iter()
                .map(|&est| {
                    let v = inputs.estimate(est)?;
                    Ok((est, v, relative_error(v, ideal)?))
                })
                .collect::<Result<_>>()?;
            Ok(ReplicateRow {
                scenario,
                replicate,
                beta,
                ideal,
                estimates,
            })
        })
        .collect()
}

/// All replicates in parallel; rows ordered by (scenario, replicate).
pub fn run_table(world: &SynthWorld, cfg: &SynthConfig) -> Result<SynthTable> {
    cfg.validate()?;
    let per_rep: Vec<Vec<ReplicateRow>> = (0..cfg.n_replicates as u64)
        .into_par_iter()
        .map(|rep| run_replicate(world, cfg, rep))
        .collect::<Result<_>>()?;
    let mut rows: Vec<ReplicateRow> = per_rep.into_iter().flatten().collect();
    rows.sort_by_key(|r| (Scenario::ALL.iter().position(|&s| s == r.scenario), r.replicate));
    let mut summary = Vec::new();
    for scenario in Scenario::ALL {
        for est in Estimator::ALL {
            let res: Vec<f64> = rows
                .iter()
                .filter(|r| r.scenario == scenario)
                .map(|r| r.re(est))
                .collect();
            let (mean_re, var) = mean_var(&res);
            summary.push(SummaryRow {
                scenario,
                estimator: est,
                mean_re,
                sd_re: var.sqrt(),
            });
        }
    }
    Ok(SynthTable { rows, summary })
}

/// Completes the built-in low-rank source into a world.
pub fn world_from_source(
    source: &LowRankSource,
    completion: &CompletionConfig,
    cfg: &SynthConfig,
) -> Result<SynthWorld> {
    let space = source.space()?;
    let observed = source.generate()?;
    let ratings = complete_ratings(&observed, space, completion)?;
    SynthWorld::from_ratings(space, ratings, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(alpha: f64, p: f64) -> SynthConfig {
        SynthConfig {
            alpha,
            p_base: p,
            target_obs_rate: None,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn propensity_formula_examples() {
        let p = assign_propensities(&[5, 1, 3, 4], &cfg(0.5, 1.0)).unwrap();
        assert_eq!(p, vec![0.5, 0.0625, 0.25, 0.5]);
    }

    #[test]
    fn propensity_rescaling_hits_target_rate() {
        let ratings: Vec<u8> = (0..500).map(|k| (k % 5 + 1) as u8).collect();
        let c = SynthConfig {
            target_obs_rate: Some(0.05),
            ..SynthConfig::default()
        };
        let p = assign_propensities(&ratings, &c).unwrap();
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert_relative_eq!(mean, 0.05, max_relative = 1e-12);
    }

    #[test]
    fn propensity_errors() {
        assert!(matches!(
            assign_propensities(&[5], &cfg(0.5, 3.0)),
            Err(Error::Config(_))
        ));
        assert!(assign_propensities(&[0], &cfg(0.5, 1.0)).is_err());
        assert!(assign_propensities(&[3], &cfg(1.5, 1.0)).is_err());
    }

    #[test]
    fn rtrue_mapping() {
        assert_eq!(map_to_rtrue(&[1, 5, 3]).unwrap(), vec![0.1, 0.9, 0.5]);
        assert!(map_to_rtrue(&[6]).is_err());
    }

    fn sample_rtrue(n: usize) -> Vec<f64> {
        // Level shares 30/30/20/10/10 percent, interleaved.
        let pattern = [0, 1, 2, 0, 1, 3, 0, 1, 2, 4];
        (0..n).map(|k| LEVELS[pattern[k % 10]]).collect()
    }

    #[test]
    fn flip_scenarios_change_the_documented_count() {
        let r_true = sample_rtrue(1000);
        let n_nine = r_true.iter().filter(|&&r| r == 0.9).count();
        for (scenario, source) in [(Scenario::One, 0.1), (Scenario::Three, 0.3), (Scenario::Five, 0.5)] {
            let mut rng = SeededRng::new(1).stream(Stream::Flip, 0);
            let m = make_prediction_matrix(scenario, &r_true, &mut rng).unwrap();
            assert_eq!(m.r_hat.len(), r_true.len());
            let changed: Vec<usize> = (0..r_true.len()).filter(|&k| m.r_hat[k] != r_true[k]).collect();
            assert_eq!(changed.len(), n_nine);
            assert!(changed.iter().all(|&k| r_true[k] == source && m.r_hat[k] == 0.9));
        }
    }

    #[test]
    fn flips_saturate_when_few_targets() {
        let r_true = vec![0.9, 0.9, 0.9, 0.1, 0.5];
        let mut rng = SeededRng::new(2).stream(Stream::Flip, 0);
        let m = make_prediction_matrix(Scenario::One, &r_true, &mut rng).unwrap();
        assert_eq!(m.r_hat, vec![0.9, 0.9, 0.9, 0.9, 0.5]);
    }

    #[test]
    fn rotate_and_crs() {
        let r_true = LEVELS.to_vec();
        let mut rng = SeededRng::new(0).stream(Stream::Flip, 0);
        let rot = make_prediction_matrix(Scenario::Rotate, &r_true, &mut rng).unwrap();
        let expected = [0.9, 0.1, 0.3, 0.5, 0.7];
        for (a, b) in rot.r_hat.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let crs = make_prediction_matrix(Scenario::Crs, &r_true, &mut rng).unwrap();
        assert_eq!(crs.r_hat, vec![0.2, 0.2, 0.2, 0.6, 0.6]);
    }

    #[test]
    fn skew_moments() {
        let r_true = vec![0.5; 100_000];
        let mut rng = SeededRng::new(3).stream(Stream::Skew, 0);
        let m = make_prediction_matrix(Scenario::Skew, &r_true, &mut rng).unwrap();
        assert!(m.r_hat.iter().all(|x| (0.1..=0.9).contains(x)));
        let mean = m.r_hat.iter().sum::<f64>() / m.r_hat.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn skew_mean_matches_quadrature_at_high_level() {
        // Truncated-normal mean by midpoint quadrature of the density.
        let (mu, sd) = (0.7, 0.15);
        let n = 20_000;
        let h = 0.8 / n as f64;
        let (mut mass, mut first) = (0.0, 0.0);
        for j in 0..n {
            let x = 0.1 + (j as f64 + 0.5) * h;
            let w = (-0.5 * ((x - mu) / sd).powi(2)).exp();
            mass += w;
            first += w * x;
        }
        let expected = first / mass;
        let r_true = vec![0.7; 100_000];
        let mut rng = SeededRng::new(4).stream(Stream::Skew, 0);
        let m = make_prediction_matrix(Scenario::Skew, &r_true, &mut rng).unwrap();
        let mean = m.r_hat.iter().sum::<f64>() / m.r_hat.len() as f64;
        assert!((mean - expected).abs() < 0.003, "mean {mean} expected {expected}");
    }

    #[test]
    fn unknown_scenario_tag() {
        assert!(matches!("SIX".parse::<Scenario>(), Err(Error::Config(_))));
        assert_eq!("rotate".parse::<Scenario>().unwrap(), Scenario::Rotate);
    }

    #[test]
    fn noisy_propensity_examples() {
        let p = [0.5, 0.2, 0.05];
        let o = [true, false, false];
        let exact = noisy_propensities_with_beta(&p, &o, 0.0).unwrap();
        assert_eq!(exact.values(), &p);
        let flat = noisy_propensities_with_beta(&p, &o, 1.0).unwrap();
        for v in flat.values() {
            assert_relative_eq!(*v, 1.0 / 3.0, max_relative = 1e-15);
        }
        // p_e = 0.05 with one exposure in twenty pairs.
        let mut o = vec![false; 20];
        o[0] = true;
        let mut p = vec![0.3; 20];
        p[1] = 0.5;
        let mixed = noisy_propensities_with_beta(&p, &o, 0.5).unwrap();
        assert_relative_eq!(mixed.values()[1], 1.0 / 11.0, max_relative = 1e-14);
        assert!(matches!(
            noisy_propensities_with_beta(&p, &[false; 20], 0.5),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn imputed_error_examples() {
        let field = PropensityField::unclipped(vec![0.3; 4]).unwrap();
        let r = [true, true, false, true];
        let o = [true, true, false, true];
        let m = PredictionMatrix {
            scenario: Scenario::Crs,
            r_hat: vec![0.2, 0.6, 0.6, 0.9],
        };
        let e_hat = shared_imputed_errors(&r, &o, &field, &m).unwrap();
        for (e, x) in e_hat.iter().zip(&m.r_hat) {
            assert_relative_eq!(*e, -(x.ln()), max_relative = 1e-12);
        }

        let half = PredictionMatrix {
            scenario: Scenario::Crs,
            r_hat: vec![0.5; 2],
        };
        let f2 = PropensityField::unclipped(vec![0.5; 2]).unwrap();
        let e = shared_imputed_errors(&[true, false], &[true, true], &f2, &half).unwrap();
        assert_relative_eq!(e[0], std::f64::consts::LN_2, max_relative = 1e-12);

        let f3 = PropensityField::unclipped(vec![0.5, 0.25, 0.5]).unwrap();
        let r_bar = weighted_label_mean(&[true, false, true], &[true; 3], &f3).unwrap();
        assert_relative_eq!(r_bar, 0.5, max_relative = 1e-15);

        let bad = PredictionMatrix {
            scenario: Scenario::Crs,
            r_hat: vec![1.0, 0.5],
        };
        assert!(matches!(
            shared_imputed_errors(&[true, false], &[true, true], &f2, &bad),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn completion_of_constant_data() {
        let space = PairSpace::new(1, 1).unwrap();
        let obs = [Rating {
            user: 0,
            item: 0,
            value: 4.0,
        }];
        assert_eq!(
            complete_ratings(&obs, space, &CompletionConfig::default()).unwrap(),
            vec![4]
        );

        let space = PairSpace::new(6, 7).unwrap();
        let obs: Vec<Rating> = (0..42)
            .filter(|k| k % 3 != 0)
            .map(|k| Rating {
                user: k / 7,
                item: k % 7,
                value: 5.0,
            })
            .collect();
        let full = complete_ratings(&obs, space, &CompletionConfig::default()).unwrap();
        assert!(full.iter().all(|&r| r == 5));
        assert!(complete_ratings(&[], space, &CompletionConfig::default()).is_err());
    }

    #[test]
    fn completion_recovers_rank_one_matrix() {
        let (nu, ni) = (40, 50);
        let space = PairSpace::new(nu, ni).unwrap();
        let a: Vec<f64> = (0..nu).map(|u| if u % 3 == 0 { 2.0 } else { 1.0 }).collect();
        let b: Vec<f64> = (0..ni).map(|i| if i % 2 == 0 { 2.0 } else { 1.0 }).collect();
        let truth = |u: usize, i: usize| a[u] * b[i];
        let mut rng = SeededRng::new(8).stream(Stream::Split, 1);
        let mut observed = Vec::new();
        let mut hidden = Vec::new();
        for u in 0..nu {
            for i in 0..ni {
                if rng.random::<f64>() < 0.5 {
                    observed.push(Rating {
                        user: u,
                        item: i,
                        value: truth(u, i),
                    });
                } else {
                    hidden.push((u, i));
                }
            }
        }
        let full = complete_ratings(&observed, space, &CompletionConfig::default()).unwrap();
        let hits = hidden
            .iter()
            .filter(|&&(u, i)| full[space.index(u, i)] as f64 == truth(u, i))
            .count();
        let rate = hits as f64 / hidden.len() as f64;
        assert!(rate >= 0.95, "recovered {rate}");
    }

    #[test]
    fn world_exposure_rate_matches_propensities() {
        let space = PairSpace::new(30, 40).unwrap();
        let ratings: Vec<u8> = (0..1200).map(|k| ((k * 13) % 5 + 1) as u8).collect();
        let world = SynthWorld::from_ratings(space, ratings, &SynthConfig::default()).unwrap();
        let rng = SeededRng::new(5);
        let reps = 400;
        let rates: Vec<f64> = (0..reps)
            .map(|k| world.sample(&rng, k).unwrap().exposure_rate())
            .collect();
        let (mean, var) = crate::domain::mean_var(&rates);
        let target = world.p_true.iter().sum::<f64>() / 1200.0;
        let se = (var / reps as f64).sqrt();
        assert!((mean - target).abs() < 3.0 * se, "mean {mean} target {target} se {se}");
    }

    #[test]
    fn table_dump_round_trip() {
        let space = PairSpace::new(3, 4).unwrap();
        let ratings: Vec<u8> = (0..12).map(|k| (k % 5 + 1) as u8).collect();
        let world = SynthWorld::from_ratings(space, ratings, &SynthConfig::default()).unwrap();
        let table = world.sample(&SeededRng::new(1), 0).unwrap();
        let mut buf = Vec::new();
        write_table(&mut buf, &table).unwrap();
        assert_eq!(read_table(&mut buf.as_slice()).unwrap(), table);
        buf[0] = b'X';
        assert!(read_table(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn low_rank_source_is_deterministic() {
        let src = LowRankSource {
            n_users: 20,
            n_items: 30,
            ..LowRankSource::default()
        };
        let a = src.generate().unwrap();
        assert_eq!(a, src.generate().unwrap());
        assert!(a.iter().all(|r| (1.0..=5.0).contains(&r.value)));
    }
}
