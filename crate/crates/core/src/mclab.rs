//! Monte-Carlo checks of the estimators on fully known worlds.
//!
//! A world fixes, per pair, the exposure propensity `p`, the conditional
//! mean error `g = E[e | x]` and the conditional variance `σ²`. Replicates
//! resample exposures and errors (and, under the random design, the pairs
//! themselves) and record every estimator next to the realized ideal loss.
//!
//! Under the random design each replicate draws `|D|` pairs uniformly with
//! replacement from the world, which is the sampling model behind the
//! closed-form variances
//! `Var(IPS) = |D|⁻¹ [E((σ² + g²)/p) − (E e)²]`,
//! `Var(DR) = |D|⁻¹ [E(σ²/p + g²) − (E e)²]` and
//! `Var(EIB) = |D|⁻¹ [E(p σ² + g²) − (E e)²]`.
//! Under the fixed design the pairs stay put and only `o` and `e` vary.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{mean_var, relative_gap, PairSpace, PropensityField, SeededRng, Stream};
use crate::error::{Error, Result};
use crate::estimators::{correction_term, dr_loss, eib_loss, ideal_loss, Estimator, LossInputs};
use crate::synthgen::noisy_propensities_with_beta;
use crate::targeting::{target, targeted_imputation, ImputationState, ResidualMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCWorld {
    pub space: PairSpace,
    pub p_true: Vec<f64>,
    pub g_true: Vec<f64>,
    pub sigma2: Vec<f64>,
}

/// Parameters of the built-in world generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MCWorldSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub min_p: f64,
    pub max_p: f64,
    pub g_min: f64,
    pub g_max: f64,
    /// Coefficient of variation of `e | x`, so `σ = cv · g`.
    pub cv: f64,
    pub seed: u64,
}

impl Default for MCWorldSpec {
    fn default() -> Self {
        Self {
            n_users: 100,
            n_items: 100,
            min_p: 0.05,
            max_p: 0.95,
            g_min: 0.2,
            g_max: 1.5,
            cv: 0.5,
            seed: 0,
        }
    }
}

impl MCWorld {
    pub fn new(space: PairSpace, p_true: Vec<f64>, g_true: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        let n = space.total();
        if p_true.len() != n || g_true.len() != n || sigma2.len() != n {
            return Err(Error::domain("world arrays must cover the pair space"));
        }
        if let Some(p) = p_true.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::domain(format!("propensity {p} outside (0, 1]")));
        }
        if let Some(g) = g_true.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return Err(Error::domain(format!("mean error {g} must be positive")));
        }
        if let Some(s) = sigma2.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::domain(format!("error variance {s} must be non-negative")));
        }
        Ok(Self {
            space,
            p_true,
            g_true,
            sigma2,
        })
    }

    /// Propensities from a product of user and item activity, spanning
    /// `[min_p, max_p]`; mean errors shrink as propensities grow.
    pub fn generate(spec: &MCWorldSpec) -> Result<Self> {
        let space = PairSpace::new(spec.n_users, spec.n_items)?;
        if !(spec.min_p > 0.0 && spec.min_p <= spec.max_p && spec.max_p <= 1.0) {
            return Err(Error::config("need 0 < min_p <= max_p <= 1"));
        }
        if !(spec.g_min > 0.0 && spec.g_min <= spec.g_max) {
            return Err(Error::config("need 0 < g_min <= g_max"));
        }
        let rng = SeededRng::new(spec.seed);
        let mut r = rng.stream(Stream::Design, u64::MAX >> 16);
        let ua: Vec<f64> = (0..spec.n_users).map(|_| r.random()).collect();
        let ia: Vec<f64> = (0..spec.n_items).map(|_| r.random()).collect();
        let mut p = Vec::with_capacity(space.total());
        let mut g = Vec::with_capacity(space.total());
        for &x in &ua {
            for &y in &ia {
                let a = x * y;
                p.push(spec.min_p + (spec.max_p - spec.min_p) * a);
                let mix = 0.5 * (1.0 - a) + 0.5 * r.random::<f64>();
                g.push(spec.g_min + (spec.g_max - spec.g_min) * mix);
            }
        }
        // Pin the smallest propensity to min_p exactly.
        let lowest = (0..p.len()).min_by(|&a, &b| p[a].total_cmp(&p[b])).expect("nonempty");
        p[lowest] = spec.min_p;
        let sigma2 = g.iter().map(|g| (spec.cv * g).powi(2)).collect();
        Self::new(space, p, g, sigma2)
    }

    pub fn len(&self) -> usize {
        self.p_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_true.is_empty()
    }

    pub fn mean_g(&self) -> f64 {
        self.g_true.iter().sum::<f64>() / self.len() as f64
    }

    pub fn min_p(&self) -> f64 {
        self.p_true.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Draws `e | x` from a Gamma law with mean `g` and variance `σ²`.
pub fn sample_error<R: Rng + ?Sized>(g: f64, sigma2: f64, rng: &mut R) -> f64 {
    if sigma2 == 0.0 {
        return g;
    }
    let shape = g * g / sigma2;
    let scale = sigma2 / g;
    Gamma::new(shape, scale).expect("positive gamma parameters").sample(rng)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// Pairs resampled with replacement every replicate.
    #[default]
    Random,
    /// The world's pairs, fixed across replicates.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensityScenario {
    Accurate,
    /// `1/p̂ = (1 − β)/p + β/p_e` with `p_e` the realized exposure rate.
    Corrupted {
        beta: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImputationScenario {
    Accurate,
    /// `ê = g + shift`.
    Shifted {
        shift: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCScenario {
    pub propensity: PropensityScenario,
    pub imputation: ImputationScenario,
}

impl MCScenario {
    pub const ACCURATE: MCScenario = MCScenario {
        propensity: PropensityScenario::Accurate,
        imputation: ImputationScenario::Accurate,
    };

    pub fn name(&self) -> String {
        let p = match self.propensity {
            PropensityScenario::Accurate => "p_accurate".to_string(),
            PropensityScenario::Corrupted { beta } => format!("p_corrupted(beta={beta})"),
        };
        let e = match self.imputation {
            ImputationScenario::Accurate => "e_accurate".to_string(),
            ImputationScenario::Shifted { shift } => format!("e_shifted(c={shift})"),
        };
        format!("{p}+{e}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub ideal: f64,
    /// Estimates in the order of [`Estimator::ALL`].
    pub estimates: Vec<f64>,
    /// `|DR − (EIB + correction)|` relative to `|DR|`.
    pub identity_gap: f64,
}

/// Values of one replicate; `pick` lists the drawn pairs.
fn run_replicate(world: &MCWorld, scenario: MCScenario, pick: &[usize], o_u: &[f64], e: &[f64]) -> Result<Replicate> {
    let n = pick.len();
    let o: Vec<bool> = (0..n).map(|k| o_u[k] < world.p_true[pick[k]]).collect();
    let p_field = match scenario.propensity {
        PropensityScenario::Accurate => PropensityField::unclipped(pick.iter().map(|&j| world.p_true[j]).collect())?,
        PropensityScenario::Corrupted { beta } => {
            let p: Vec<f64> = pick.iter().map(|&j| world.p_true[j]).collect();
            noisy_propensities_with_beta(&p, &o, beta)?
        }
    };
    let e_hat: Vec<f64> = match scenario.imputation {
        ImputationScenario::Accurate => pick.iter().map(|&j| world.g_true[j]).collect(),
        ImputationScenario::Shifted { shift } => pick.iter().map(|&j| world.g_true[j] + shift).collect(),
    };
    let p_hat = p_field.values().to_vec();
    let state = ImputationState::new(e_hat.clone(), p_field)?;
    let (state, _) = target(e, &o, state, ResidualMode::WithOmega)?;
    let e_tilde = targeted_imputation(&state);
    let inputs = LossInputs {
        e,
        e_hat: &e_hat,
        e_tilde: Some(&e_tilde),
        o: &o,
        p_hat: &p_hat,
    };
    let estimates = Estimator::ALL
        .iter()
        .map(|&est| inputs.estimate(est))
        .collect::<Result<Vec<f64>>>()?;
    let dr = dr_loss(e, &o, &e_hat, &p_hat);
    let split = eib_loss(e, &o, &e_hat) + correction_term(e, &o, &e_hat, &p_hat);
    Ok(Replicate {
        ideal: ideal_loss(e),
        estimates,
        identity_gap: relative_gap(dr, split),
    })
}

/// Draws for replicate `rep`: picked pairs, exposure uniforms and errors.
fn draws(world: &MCWorld, design: Design, rng: &SeededRng, rep: u64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = world.len();
    let pick: Vec<usize> = match design {
        Design::Fixed => (0..n).collect(),
        Design::Random => {
            let mut r = rng.stream(Stream::Design, rep);
            (0..n).map(|_| r.random_range(0..n)).collect()
        }
    };
    let mut ro = rng.stream(Stream::Exposure, rep);
    let o_u: Vec<f64> = (0..n).map(|_| ro.random()).collect();
    let mut re = rng.stream(Stream::ErrorNoise, rep);
    let e: Vec<f64> = pick
        .iter()
        .map(|&j| sample_error(world.g_true[j], world.sigma2[j], &mut re))
        .collect();
    (pick, o_u, e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub estimator: Estimator,
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    pub se_variance: f64,
    /// Mean of `estimate − ideal` over replicates.
    pub bias: f64,
    pub se_bias: f64,
    pub closed_form_variance: Option<f64>,
    pub closed_form_bias: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCReport {
    pub scenario: MCScenario,
    pub design: Design,
    pub replicates: usize,
    pub seed: u64,
    pub ideal_mean: f64,
    pub ideal_variance: f64,
    pub max_identity_gap: f64,
    pub stats: Vec<EstimatorStats>,
    #[serde(skip)]
    pub samples: Vec<Replicate>,
}

/// `(var(a) − var(b), SE)` from paired replicate samples.
pub fn variance_gap(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (ma, _) = mean_var(a);
    let (mb, _) = mean_var(b);
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma).powi(2) - (y - mb).powi(2))
        .collect();
    let (mean, var) = mean_var(&d);
    let n = a.len() as f64;
    (mean * n / (n - 1.0), (var / n).sqrt() * n / (n - 1.0))
}

/// Unbiased variance and its standard error from fourth moments.
fn variance_with_se(xs: &[f64]) -> (f64, f64) {
    let (m, v) = mean_var(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
    let (_, vv) = mean_var(&sq);
    let n = xs.len() as f64;
    (v, (vv / n).sqrt() * n / (n - 1.0))
}

impl MCReport {
    pub fn get(&self, est: Estimator) -> &EstimatorStats {
        self.stats
            .iter()
            .find(|s| s.estimator == est)
            .expect("every estimator is reported")
    }

    pub fn column(&self, est: Estimator) -> Vec<f64> {
        let k = Estimator::ALL.iter().position(|&e| e == est).expect("known estimator");
        self.samples.iter().map(|r| r.estimates[k]).collect()
    }

    pub fn variance_gap(&self, a: Estimator, b: Estimator) -> (f64, f64) {
        variance_gap(&self.column(a), &self.column(b))
    }
}

/// Closed-form variances of IPS, DR and EIB with exact nuisances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormVariance {
    pub ips: f64,
    pub dr: f64,
    pub eib: f64,
}

pub fn closed_form_variance(world: &MCWorld, design: Design) -> ClosedFormVariance {
    let n = world.len() as f64;
    let (mut ips, mut dr, mut eib, mut g2, mut g) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..world.len() {
        let (p, m, s2) = (world.p_true[k], world.g_true[k], world.sigma2[k]);
        ips += (s2 + m * m) / p;
        dr += s2 / p;
        eib += p * s2;
        g2 += m * m;
        g += m;
    }
    match design {
        Design::Random => {
            let (ips, dr, eib, g2, g) = (ips / n, dr / n, eib / n, g2 / n, g / n);
            ClosedFormVariance {
                ips: (ips - g * g) / n,
                dr: (dr + g2 - g * g) / n,
                eib: (eib + g2 - g * g) / n,
            }
        }
        Design::Fixed => ClosedFormVariance {
            ips: (ips - g2) / (n * n),
            dr: dr / (n * n),
            eib: eib / (n * n),
        },
    }
}

/// Bias of EIB with imputation `ê`: `|D|⁻¹ Σ (1 − p)(ê − g)`.
pub fn eib_bias(world: &MCWorld, e_hat: &[f64]) -> f64 {
    (0..world.len())
        .map(|k| (1.0 - world.p_true[k]) * (e_hat[k] - world.g_true[k]))
        .sum::<f64>()
        / world.len() as f64
}

/// Bias of DR (and TDR, with `ẽ` in place of `ê`) under fixed `p̂`:
/// `|D|⁻¹ Σ (p − p̂)(g − ê)/p̂`.
pub fn dr_bias(world: &MCWorld, p_hat: &[f64], e_hat: &[f64]) -> f64 {
    (0..world.len())
        .map(|k| (world.p_true[k] - p_hat[k]) * (world.g_true[k] - e_hat[k]) / p_hat[k])
        .sum::<f64>()
        / world.len() as f64
}

fn closed_forms(world: &MCWorld, scenario: MCScenario, design: Design, est: Estimator) -> (Option<f64>, Option<f64>) {
    let accurate_p = scenario.propensity == PropensityScenario::Accurate;
    let e_hat: Vec<f64> = match scenario.imputation {
        ImputationScenario::Accurate => world.g_true.clone(),
        ImputationScenario::Shifted { shift } => world.g_true.iter().map(|g| g + shift).collect(),
    };
    let variance = if scenario == MCScenario::ACCURATE {
        let cf = closed_form_variance(world, design);
        match est {
            Estimator::Ips => Some(cf.ips),
            Estimator::Dr => Some(cf.dr),
            Estimator::Eib => Some(cf.eib),
            _ => None,
        }
    } else {
        None
    };
    let bias = match est {
        Estimator::Ips if accurate_p => Some(0.0),
        Estimator::Eib => Some(eib_bias(world, &e_hat)),
        Estimator::Dr | Estimator::Tdr if accurate_p => Some(dr_bias(world, &world.p_true, &e_hat)),
        Estimator::Dr | Estimator::Tdr if scenario.imputation == ImputationScenario::Accurate => Some(0.0),
        _ => None,
    };
    (variance, bias)
}

pub fn run_bias_variance(
    world: &MCWorld,
    scenario: MCScenario,
    design: Design,
    replicates: usize,
    seed: u64,
) -> Result<MCReport> {
    if replicates < 100 {
        return Err(Error::config(format!("need at least 100 replicates, got {replicates}")));
    }
    let rng = SeededRng::new(seed);
    let samples: Vec<Replicate> = (0..replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let (pick, o_u, e) = draws(world, design, &rng, rep);
            run_replicate(world, scenario, &pick, &o_u, &e)
        })
        .collect::<Result<_>>()?;
    let ideal: Vec<f64> = samples.iter().map(|r| r.ideal).collect();
    let (ideal_mean, ideal_variance) = mean_var(&ideal);
    let n = replicates as f64;
    let stats = Estimator::ALL
        .iter()
        .enumerate()
        .map(|(k, &est)| {
            let xs: Vec<f64> = samples.iter().map(|r| r.estimates[k]).collect();
            let (mean, var) = mean_var(&xs);
            let (variance, se_variance) = variance_with_se(&xs);
            let diff: Vec<f64> = xs.iter().zip(&ideal).map(|(x, i)| x - i).collect();
            let (bias, bias_var) = mean_var(&diff);
            let (closed_form_variance, closed_form_bias) = closed_forms(world, scenario, design, est);
            EstimatorStats {
                estimator: est,
                mean,
                variance,
                se_mean: (var / n).sqrt(),
                se_variance,
                bias,
                se_bias: (bias_var / n).sqrt(),
                closed_form_variance,
                closed_form_bias,
            }
        })
        .collect();
    let max_identity_gap = samples.iter().map(|r| r.identity_gap).fold(0.0, f64::max);
    Ok(MCReport {
        scenario,
        design,
        replicates,
        seed,
        ideal_mean,
        ideal_variance,
        max_identity_gap,
        stats,
        samples,
    })
}

/// Outcome of one named assertion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// Variance ordering EIB ≤ DR ≤ IPS with SE-separated gaps, unbiasedness and
/// agreement with the closed forms, for an accurate-scenario report.
pub fn check_variance_ordering(report: &MCReport, z: f64) -> Vec<Check> {
    let mut out = Vec::new();
    for (lo, hi) in [(Estimator::Eib, Estimator::Dr), (Estimator::Dr, Estimator::Ips)] {
        let (gap, se) = report.variance_gap(hi, lo);
        out.push(Check::new(
            format!("var({lo}) < var({hi})"),
            gap > z * se,
            format!("gap {gap:.4e} se {se:.4e}"),
        ));
    }
    for est in [Estimator::Ips, Estimator::Eib, Estimator::Dr, Estimator::Tdr] {
        let s = report.get(est);
        out.push(Check::new(
            format!("{est} unbiased"),
            s.bias.abs() < z * s.se_bias,
            format!("bias {:.4e} se {:.4e}", s.bias, s.se_bias),
        ));
    }
    for est in [Estimator::Ips, Estimator::Dr, Estimator::Eib] {
        let s = report.get(est);
        if let Some(cf) = s.closed_form_variance {
            out.push(Check::new(
                format!("var({est}) matches closed form"),
                (s.variance - cf).abs() < z * s.se_variance,
                format!("empirical {:.4e} closed {cf:.4e} se {:.4e}", s.variance, s.se_variance),
            ));
        }
    }
    out
}

/// Accurate propensities with shifted imputation: TDR unbiased, EIB biased
/// by its closed form.
pub fn check_targeting_unbiasedness(report: &MCReport, z: f64, z_bias: f64) -> Vec<Check> {
    let tdr = report.get(Estimator::Tdr);
    let eib = report.get(Estimator::Eib);
    let eib_cf = eib.closed_form_bias.unwrap_or(f64::NAN);
    vec![
        Check::new(
            "TDR unbiased",
            tdr.bias.abs() < z * tdr.se_bias,
            format!("bias {:.4e} se {:.4e}", tdr.bias, tdr.se_bias),
        ),
        Check::new(
            "EIB biased",
            eib.bias.abs() > z_bias * eib.se_bias,
            format!("bias {:.4e} se {:.4e}", eib.bias, eib.se_bias),
        ),
        Check::new(
            "EIB bias matches closed form",
            (eib.bias - eib_cf).abs() < z * eib.se_bias,
            format!("bias {:.4e} closed {eib_cf:.4e} se {:.4e}", eib.bias, eib.se_bias),
        ),
    ]
}

/// Corrupted propensities with accurate imputation: DR and TDR unbiased.
pub fn check_double_robustness(report: &MCReport, z: f64) -> Vec<Check> {
    [Estimator::Dr, Estimator::Tdr]
        .into_iter()
        .map(|est| {
            let s = report.get(est);
            Check::new(
                format!("{est} unbiased"),
                s.bias.abs() < z * s.se_bias,
                format!("bias {:.4e} se {:.4e}", s.bias, s.se_bias),
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p_min: f64,
    pub estimator: Estimator,
    pub variance: f64,
    pub se_variance: f64,
    pub closed_form: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub checks: Vec<Check>,
}

/// Sets the propensity of a fixed fraction of pairs to each `p_min` in turn
/// and measures estimator variances under the fixed design with common
/// random numbers across grid points.
pub fn small_propensity_sweep(
    world: &MCWorld,
    low_fraction: f64,
    grid: &[f64],
    replicates: usize,
    seed: u64,
    z: f64,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::config("empty p_min grid"));
    }
    if !(low_fraction > 0.0 && low_fraction < 1.0) {
        return Err(Error::config("low_fraction must lie in (0, 1)"));
    }
    let n_low = ((world.len() as f64) * low_fraction).ceil() as usize;
    let rng = SeededRng::new(seed);
    let worlds: Vec<MCWorld> = grid
        .iter()
        .map(|&pm| {
            let mut w = world.clone();
            for p in &mut w.p_true[..n_low] {
                *p = pm;
            }
            MCWorld::new(w.space, w.p_true, w.g_true, w.sigma2)
        })
        .collect::<Result<_>>()?;
    let per_rep: Vec<Vec<Replicate>> = (0..replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let (pick, o_u, e) = draws(world, Design::Fixed, &rng, rep);
            worlds
                .iter()
                .map(|w| run_replicate(w, MCScenario::ACCURATE, &pick, &o_u, &e))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let column = |g: usize, est: Estimator| -> Vec<f64> {
        let k = Estimator::ALL.iter().position(|&e| e == est).expect("known");
        per_rep.iter().map(|r| r[g].estimates[k]).collect()
    };
    let mut rows = Vec::new();
    for (g, (&pm, w)) in grid.iter().zip(&worlds).enumerate() {
        let cf = closed_form_variance(w, Design::Fixed);
        for est in [Estimator::Ips, Estimator::Dr, Estimator::Eib] {
            let (variance, se_variance) = variance_with_se(&column(g, est));
            rows.push(SweepRow {
                p_min: pm,
                estimator: est,
                variance,
                se_variance,
                closed_form: Some(match est {
                    Estimator::Ips => cf.ips,
                    Estimator::Dr => cf.dr,
                    _ => cf.eib,
                }),
            });
        }
    }
    let mut checks = Vec::new();
    for est in [Estimator::Ips, Estimator::Dr] {
        for g in 1..grid.len() {
            let (gap, se) = variance_gap(&column(g, est), &column(g - 1, est));
            let grows = (grid[g] < grid[g - 1]) == (gap > 0.0);
            checks.push(Check::new(
                format!("var({est}) grows from p_min {} to {}", grid[g - 1], grid[g]),
                grows && gap.abs() > z * se,
                format!("gap {gap:.4e} se {se:.4e}"),
            ));
        }
    }
    let eib: Vec<f64> = (0..grid.len())
        .map(|g| variance_with_se(&column(g, Estimator::Eib)).0)
        .collect();
    let (lo, hi) = eib
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    checks.push(Check::new(
        "var(EIB) bounded",
        (hi - lo) / lo < 0.05,
        format!("range {lo:.4e}..{hi:.4e}"),
    ));
    for row in &rows {
        if let Some(cf) = row.closed_form {
            checks.push(Check::new(
                format!("var({}) at p_min {} matches closed form", row.estimator, row.p_min),
                (row.variance - cf).abs() < z * row.se_variance,
                format!(
                    "empirical {:.4e} closed {cf:.4e} se {:.4e}",
                    row.variance, row.se_variance
                ),
            ));
        }
    }
    Ok(SweepReport { rows, checks })
}
