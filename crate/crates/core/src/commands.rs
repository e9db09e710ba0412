//! Experiment runner behind the `tdr` binary.
//!
//! Every command reads a [`RunConfig`], writes its results into an output
//! directory together with `config.toml`, `seeds.txt` and `VERSION`, and
//! produces the same bytes when re-run from the copied config.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{load_pair, make_split, DatasetSource};
use crate::error::{Error, Result};
use crate::mclab::{
    check_double_robustness, check_targeting_unbiasedness, check_variance_ordering, run_bias_variance,
    small_propensity_sweep, Check, Design, ImputationScenario, MCReport, MCScenario, MCWorld, MCWorldSpec,
    PropensityScenario,
};
use crate::models::{load_checkpoint, save_checkpoint};
use crate::synthgen::{
    complete_ratings, run_table, synthetic_split, CompletionConfig, LowRankSource, SynthConfig, SynthTable, SynthWorld,
    SyntheticSplitSpec,
};
use crate::training::{test_metrics, train, TrainData, TrainerConfig, Variant};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    #[default]
    Synth,
    Mc,
    Train,
    Eval,
    Sweep,
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Command::Synth => "synth",
            Command::Mc => "mc",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    #[serde(flatten)]
    pub config: SynthConfig,
    /// Triple file to complete; the built-in source is used when absent.
    pub ratings: Option<DatasetSource>,
    pub source: LowRankSource,
    pub completion: CompletionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McSection {
    pub world: MCWorldSpec,
    pub replicates: usize,
    pub design: Design,
    /// Constant added to the imputation in the shifted scenario.
    pub shift: f64,
    /// Mixing weight of the corrupted propensities.
    pub beta: f64,
    /// SE multiple for "within" assertions.
    pub z: f64,
    /// SE multiple a bias must exceed to count as present.
    pub z_bias: f64,
    pub sweep_world: MCWorldSpec,
    pub sweep_grid: Vec<f64>,
    pub sweep_low_fraction: f64,
    pub sweep_replicates: usize,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            world: MCWorldSpec::default(),
            replicates: 2000,
            design: Design::Random,
            shift: 0.5,
            beta: 0.5,
            z: 3.0,
            z_bias: 5.0,
            sweep_world: MCWorldSpec {
                n_users: 20,
                n_items: 25,
                min_p: 0.5,
                ..MCWorldSpec::default()
            },
            sweep_grid: vec![0.4, 0.2, 0.1],
            sweep_low_fraction: 0.05,
            sweep_replicates: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// MNAR/MAR rating files; the synthetic split is used when absent.
    pub files: Option<DatasetSource>,
    pub synthetic: SyntheticSplitSpec,
    pub val_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            files: None,
            synthetic: SyntheticSplitSpec::default(),
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub thresholds: Vec<f64>,
    /// Variant compared against every other listed variant.
    pub focus: Variant,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            thresholds: vec![0.05, 0.10, 0.15, 0.20],
            focus: Variant::TdrCl,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: Command,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub variants: Vec<Variant>,
    pub synth: SynthSection,
    pub mc: McSection,
    pub data: DataSection,
    pub trainer: TrainerConfig,
    pub sweep: SweepSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Synth,
            seeds: vec![0],
            out: None,
            variants: vec![Variant::DrJl, Variant::DrCl, Variant::TdrCl],
            synth: SynthSection::default(),
            mc: McSection::default(),
            data: DataSection::default(),
            trainer: TrainerConfig::default(),
            sweep: SweepSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Command-line values that replace config entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub command: Option<Command>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub clip: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// TOML form of the config; fails if the text would not parse back to
    /// the same config.
    pub fn to_toml(&self) -> Result<String> {
        let text = toml::to_string(self)?;
        if Self::from_toml(&text)? != *self {
            return Err(Error::config("config does not survive a TOML round trip"));
        }
        Ok(text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(c) = o.command {
            self.command = c;
        }
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(p) = &o.out {
            self.out = Some(p.clone());
        }
        if let Some(v) = o.variant {
            self.variants = vec![v];
            self.trainer.variant = v;
        }
        if let Some(c) = o.clip {
            self.trainer.clip = c;
            self.sweep.thresholds = vec![c];
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        match self.command {
            Command::Synth => self.synth.config.validate(),
            Command::Mc => {
                if self.mc.sweep_grid.is_empty() {
                    return Err(Error::config("mc sweep grid is empty"));
                }
                Ok(())
            }
            Command::Train | Command::Sweep => {
                if self.variants.is_empty() {
                    return Err(Error::config("variant list is empty"));
                }
                if self.command == Command::Sweep && self.sweep.thresholds.is_empty() {
                    return Err(Error::config("sweep thresholds list is empty"));
                }
                self.trainer.validate()
            }
            Command::Eval => {
                if self.eval.checkpoints.is_empty() {
                    return Err(Error::config("eval needs at least one checkpoint"));
                }
                Ok(())
            }
        }
    }
}

/// A run's output directory.
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    /// Creates the directory and writes the config copy, seed list and
    /// version string.
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root)?;
        let copy = RunConfig {
            out: None,
            ..cfg.clone()
        };
        let text = copy.to_toml()?;
        fs::write(root.join("config.toml"), &text)?;
        let seeds: String = cfg.seeds.iter().map(|s| format!("{s}\n")).collect();
        fs::write(root.join("seeds.txt"), seeds)?;
        let digest = Sha256::digest(text.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        fs::write(
            root.join("VERSION"),
            format!("tdr-core {VERSION} config-sha256:{hex}\n"),
        )?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.root.join(name))?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.root.join(name), text)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthReplicateRow {
    pub seed: u64,
    pub scenario: String,
    pub replicate: u64,
    pub beta: f64,
    pub ideal: f64,
    pub estimator: String,
    pub estimate: f64,
    pub re: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummaryRow {
    pub seed: u64,
    pub scenario: String,
    pub estimator: String,
    pub mean_re: f64,
    pub sd_re: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub seed: u64,
    pub rating_histogram: [usize; 5],
    pub summary: Vec<SynthSummaryRow>,
    /// Scenarios with mean RE ordered TDR < DR < IPS < Naive.
    pub ordered_scenarios: Vec<String>,
    /// Scenarios with SD(TDR) ≤ SD(DR).
    pub stable_scenarios: Vec<String>,
}

pub fn build_world(section: &SynthSection) -> Result<SynthWorld> {
    match &section.ratings {
        Some(src) => {
            let set = crate::datasets::load_triples(&src.mnar, &src.spec)?;
            let space = crate::domain::PairSpace::new(set.n_users, set.n_items)?;
            let ratings = complete_ratings(&set.ratings, space, &section.completion)?;
            SynthWorld::from_ratings(space, ratings, &section.config)
        }
        None => crate::synthgen::world_from_source(&section.source, &section.completion, &section.config),
    }
}

/// Table-1 style relative errors, one table per seed.
pub fn cmd_synth(cfg: &RunConfig, out: &OutputDir) -> Result<Vec<(u64, SynthTable)>> {
    let world = build_world(&cfg.synth)?;
    let tables = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let sc = SynthConfig {
                seed,
                ..cfg.synth.config.clone()
            };
            Ok((seed, run_table(&world, &sc)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (seed, table) in &tables {
        for r in &table.rows {
            for &(est, estimate, re) in &r.estimates {
                rows.push(SynthReplicateRow {
                    seed: *seed,
                    scenario: r.scenario.to_string(),
                    replicate: r.replicate,
                    beta: r.beta,
                    ideal: r.ideal,
                    estimator: est.to_string(),
                    estimate,
                    re,
                });
            }
        }
        let summary: Vec<SynthSummaryRow> = table
            .summary
            .iter()
            .map(|s| SynthSummaryRow {
                seed: *seed,
                scenario: s.scenario.to_string(),
                estimator: s.estimator.to_string(),
                mean_re: s.mean_re,
                sd_re: s.sd_re,
            })
            .collect();
        reports.push(SynthReport {
            seed: *seed,
            rating_histogram: world.rating_histogram(),
            summary,
            ordered_scenarios: table.ordered_scenarios().iter().map(|s| s.to_string()).collect(),
            stable_scenarios: table.stable_scenarios().iter().map(|s| s.to_string()).collect(),
        });
    }
    out.csv("re_replicates.csv", &rows)?;
    let summary: Vec<&SynthSummaryRow> = reports.iter().flat_map(|r| &r.summary).collect();
    out.csv("re_table.csv", &summary)?;
    out.json("re_table.json", &reports)?;
    Ok(tables)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McStatRow {
    pub seed: u64,
    pub scenario: String,
    pub estimator: String,
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    pub se_variance: f64,
    pub bias: f64,
    pub se_bias: f64,
    pub closed_form_variance: Option<f64>,
    pub closed_form_bias: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McCheckRow {
    pub seed: u64,
    pub group: String,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSweepRow {
    pub seed: u64,
    pub p_min: f64,
    pub estimator: String,
    pub variance: f64,
    pub se_variance: f64,
    pub closed_form: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McOutcome {
    pub checks: Vec<McCheckRow>,
    pub passed: bool,
}

/// The three Monte-Carlo scenarios of the lab: accurate nuisances, shifted
/// imputation, corrupted propensities.
pub fn mc_scenarios(section: &McSection) -> [(&'static str, MCScenario); 3] {
    [
        ("variance_ordering", MCScenario::ACCURATE),
        (
            "targeting_unbiasedness",
            MCScenario {
                propensity: PropensityScenario::Accurate,
                imputation: ImputationScenario::Shifted { shift: section.shift },
            },
        ),
        (
            "double_robustness",
            MCScenario {
                propensity: PropensityScenario::Corrupted { beta: section.beta },
                imputation: ImputationScenario::Accurate,
            },
        ),
    ]
}

pub fn mc_checks(group: &str, report: &MCReport, section: &McSection) -> Vec<Check> {
    match group {
        "variance_ordering" => check_variance_ordering(report, section.z),
        "targeting_unbiasedness" => check_targeting_unbiasedness(report, section.z, section.z_bias),
        _ => check_double_robustness(report, section.z),
    }
}

/// Monte-Carlo checks; `passed` is false when any assertion fails.
pub fn cmd_mc(cfg: &RunConfig, out: &OutputDir) -> Result<McOutcome> {
    let section = &cfg.mc;
    let world = MCWorld::generate(&section.world)?;
    let sweep_world = MCWorld::generate(&section.sweep_world)?;
    let mut stats = Vec::new();
    let mut checks = Vec::new();
    let mut sweep_rows = Vec::new();
    for &seed in &cfg.seeds {
        for (k, (group, scenario)) in mc_scenarios(section).into_iter().enumerate() {
            let report = run_bias_variance(
                &world,
                scenario,
                section.design,
                section.replicates,
                seed * 16 + k as u64,
            )?;
            for s in &report.stats {
                stats.push(McStatRow {
                    seed,
                    scenario: scenario.name(),
                    estimator: s.estimator.to_string(),
                    mean: s.mean,
                    variance: s.variance,
                    se_mean: s.se_mean,
                    se_variance: s.se_variance,
                    bias: s.bias,
                    se_bias: s.se_bias,
                    closed_form_variance: s.closed_form_variance,
                    closed_form_bias: s.closed_form_bias,
                });
            }
            let identity_ok = report.max_identity_gap <= crate::domain::tol::IDENTITY_REL;
            checks.push(McCheckRow {
                seed,
                group: group.into(),
                check: "DR equals EIB plus correction".into(),
                passed: identity_ok,
                detail: format!("max relative gap {:.3e}", report.max_identity_gap),
            });
            for c in mc_checks(group, &report, section) {
                checks.push(McCheckRow {
                    seed,
                    group: group.into(),
                    check: c.name,
                    passed: c.passed,
                    detail: c.detail,
                });
            }
        }
        let sweep = small_propensity_sweep(
            &sweep_world,
            section.sweep_low_fraction,
            &section.sweep_grid,
            section.sweep_replicates,
            seed * 16 + 15,
            section.z,
        )?;
        for r in sweep.rows {
            sweep_rows.push(McSweepRow {
                seed,
                p_min: r.p_min,
                estimator: r.estimator.to_string(),
                variance: r.variance,
                se_variance: r.se_variance,
                closed_form: r.closed_form,
            });
        }
        for c in sweep.checks {
            checks.push(McCheckRow {
                seed,
                group: "small_propensity_sweep".into(),
                check: c.name,
                passed: c.passed,
                detail: c.detail,
            });
        }
    }
    out.csv("mc_stats.csv", &stats)?;
    out.csv("mc_checks.csv", &checks)?;
    out.csv("mc_sweep.csv", &sweep_rows)?;
    let passed = checks.iter().all(|c| c.passed);
    let outcome = McOutcome { checks, passed };
    out.json("mc_report.json", &outcome)?;
    Ok(outcome)
}

/// Training data for one seed, from files or the synthetic split.
pub fn load_data(section: &DataSection, seed: u64) -> Result<TrainData> {
    match &section.files {
        Some(src) => {
            let (mnar, mar) = load_pair(&src.mnar, &src.mar, &src.spec)?;
            let split = make_split(&mnar, &mar, &src.spec, section.val_fraction, seed)?;
            TrainData::from_split(&split)
        }
        None => {
            let s = synthetic_split(&section.synthetic, section.val_fraction, seed)?;
            TrainData::from_split(&s.split)?.with_oracle(s.p_true)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub variant: String,
    pub clip: f64,
    pub best_epoch: usize,
    pub best_val: f64,
    pub mse: f64,
    pub auc: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

struct Job {
    seed: u64,
    variant: Variant,
    clip: f64,
}

fn run_jobs(
    cfg: &RunConfig,
    data: &[(u64, TrainData)],
    jobs: &[Job],
    out: Option<&OutputDir>,
) -> Result<Vec<MetricsRow>> {
    let results: Vec<Result<(MetricsRow, Vec<crate::training::TrainSnapshot>)>> = jobs
        .par_iter()
        .map(|job| {
            let d = &data
                .iter()
                .find(|(s, _)| *s == job.seed)
                .expect("data for every seed")
                .1;
            let tc = TrainerConfig {
                variant: job.variant,
                clip: job.clip,
                seed: job.seed,
                ..cfg.trainer.clone()
            };
            let outcome = match train(d, &tc) {
                Ok(o) => o,
                Err(Error::Diverged { epoch, msg, last }) => {
                    if let Some(dir) = out {
                        let name = format!("diverged_{}_seed{}.json", job.variant, job.seed);
                        dir.json(&name, &last)?;
                    }
                    return Err(Error::Diverged { epoch, msg, last });
                }
                Err(e) => return Err(e),
            };
            if let Some(dir) = out {
                let name = format!("{}_seed{}.ckpt", job.variant, job.seed);
                save_checkpoint(
                    &dir.path().join("checkpoints").join(name),
                    &outcome.bundle,
                    &outcome.omega,
                )?;
            }
            let m = test_metrics(&outcome.bundle.theta, d)?;
            Ok((
                MetricsRow {
                    seed: job.seed,
                    variant: job.variant.to_string(),
                    clip: job.clip,
                    best_epoch: outcome.best_epoch,
                    best_val: outcome.best_val,
                    mse: m.mse,
                    auc: m.auc,
                    ndcg5: m.ndcg5,
                    ndcg10: m.ndcg10,
                },
                outcome.history,
            ))
        })
        .collect();
    let mut rows = Vec::new();
    let mut histories = Vec::new();
    for r in results {
        let (row, history) = r?;
        histories.push(serde_json::json!({
            "seed": row.seed,
            "variant": row.variant,
            "clip": row.clip,
            "history": history,
        }));
        rows.push(row);
    }
    if let Some(dir) = out {
        dir.json("history.json", &histories)?;
    }
    Ok(rows)
}

fn seed_data(cfg: &RunConfig) -> Result<Vec<(u64, TrainData)>> {
    cfg.seeds
        .par_iter()
        .map(|&s| Ok((s, load_data(&cfg.data, s)?)))
        .collect()
}

/// Trains every configured variant for every seed and evaluates on the test
/// set.
pub fn cmd_train(cfg: &RunConfig, out: &OutputDir) -> Result<Vec<MetricsRow>> {
    let data = seed_data(cfg)?;
    fs::create_dir_all(out.path().join("checkpoints"))?;
    let jobs: Vec<Job> = cfg
        .seeds
        .iter()
        .flat_map(|&seed| {
            cfg.variants.iter().map(move |&variant| Job {
                seed,
                variant,
                clip: cfg.trainer.clip,
            })
        })
        .collect();
    let rows = run_jobs(cfg, &data, &jobs, Some(out))?;
    out.csv("metrics.csv", &rows)?;
    out.json("metrics.json", &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub checkpoint: String,
    pub seed: u64,
    pub mse: f64,
    pub auc: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

/// Evaluates saved checkpoints on the test set of every seed's data.
pub fn cmd_eval(cfg: &RunConfig, out: &OutputDir) -> Result<Vec<EvalRow>> {
    let data = seed_data(cfg)?;
    let mut rows = Vec::new();
    for path in &cfg.eval.checkpoints {
        let (bundle, _) = load_checkpoint(path)?;
        for (seed, d) in &data {
            let m = test_metrics(&bundle.theta, d)?;
            rows.push(EvalRow {
                checkpoint: path.display().to_string(),
                seed: *seed,
                mse: m.mse,
                auc: m.auc,
                ndcg5: m.ndcg5,
                ndcg10: m.ndcg10,
            });
        }
    }
    out.csv("eval.csv", &rows)?;
    out.json("eval.json", &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFlag {
    pub clip: f64,
    pub focus: String,
    pub comparator: String,
    /// Seeds where the focus variant's AUC is at least the comparator's.
    pub wins: usize,
    pub seeds: usize,
    pub majority: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<MetricsRow>,
    pub flags: Vec<SweepFlag>,
}

pub fn sweep_flags(rows: &[MetricsRow], thresholds: &[f64], focus: Variant, variants: &[Variant]) -> Vec<SweepFlag> {
    let auc = |clip: f64, v: Variant, seed: u64| {
        rows.iter()
            .find(|r| r.clip == clip && r.variant == v.to_string() && r.seed == seed)
            .map(|r| r.auc)
    };
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        s.dedup();
        s.sort_unstable();
        s.dedup();
        s
    };
    let mut flags = Vec::new();
    for &clip in thresholds {
        for &comp in variants.iter().filter(|&&v| v != focus) {
            let wins = seeds
                .iter()
                .filter(|&&s| matches!((auc(clip, focus, s), auc(clip, comp, s)), (Some(a), Some(b)) if a >= b))
                .count();
            flags.push(SweepFlag {
                clip,
                focus: focus.to_string(),
                comparator: comp.to_string(),
                wins,
                seeds: seeds.len(),
                majority: 2 * wins > seeds.len(),
            });
        }
    }
    flags
}

/// Trains every variant at every clipping threshold.
pub fn cmd_sweep(cfg: &RunConfig, out: &OutputDir) -> Result<SweepOutcome> {
    let data = seed_data(cfg)?;
    let mut variants = cfg.variants.clone();
    if !variants.contains(&cfg.sweep.focus) {
        variants.push(cfg.sweep.focus);
    }
    let mut jobs = Vec::new();
    for &clip in &cfg.sweep.thresholds {
        for &variant in &variants {
            for &seed in &cfg.seeds {
                jobs.push(Job { seed, variant, clip });
            }
        }
    }
    let rows = run_jobs(cfg, &data, &jobs, None)?;
    let flags = sweep_flags(&rows, &cfg.sweep.thresholds, cfg.sweep.focus, &variants);
    out.csv("sweep.csv", &rows)?;
    out.csv("sweep_flags.csv", &flags)?;
    let outcome = SweepOutcome { rows, flags };
    out.json("sweep.json", &outcome)?;
    Ok(outcome)
}

/// What a run produced, for exit-status decisions.
#[derive(Clone, Debug, PartialEq)]
pub enum RunSummary {
    Synth(Vec<(u64, SynthTable)>),
    Mc(McOutcome),
    Train(Vec<MetricsRow>),
    Eval(Vec<EvalRow>),
    Sweep(SweepOutcome),
}

impl RunSummary {
    /// False only when an mc assertion failed.
    pub fn passed(&self) -> bool {
        match self {
            RunSummary::Mc(o) => o.passed,
            _ => true,
        }
    }
}

/// Validates the config, prepares `out` and dispatches on the command.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = OutputDir::create(out, cfg)?;
    log::info!("{} run into {}", cfg.command, out.display());
    Ok(match cfg.command {
        Command::Synth => RunSummary::Synth(cmd_synth(cfg, &dir)?),
        Command::Mc => RunSummary::Mc(cmd_mc(cfg, &dir)?),
        Command::Train => RunSummary::Train(cmd_train(cfg, &dir)?),
        Command::Eval => RunSummary::Eval(cmd_eval(cfg, &dir)?),
        Command::Sweep => RunSummary::Sweep(cmd_sweep(cfg, &dir)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml("command = \"mc\"\nseeds = [3, 4]\n[mc]\nreplicates = 500\n").unwrap();
        assert_eq!(cfg.command, Command::Mc);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.mc.replicates, 500);
        assert_eq!(cfg.mc.z, 3.0);
        assert_eq!(cfg.trainer, TrainerConfig::default());
    }

    #[test]
    fn flags_win_over_config() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            command: Some(Command::Train),
            seed: Some(9),
            out: Some("x".into()),
            variant: Some(Variant::Ips),
            clip: Some(0.1),
        });
        assert_eq!(cfg.command, Command::Train);
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.variants, vec![Variant::Ips]);
        assert_eq!(cfg.trainer.clip, 0.1);
        assert_eq!(cfg.sweep.thresholds, vec![0.1]);
    }

    #[test]
    fn validation_rejects_empty_lists() {
        let cfg = RunConfig {
            seeds: vec![],
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            command: Command::Eval,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_in_variant_are_rejected() {
        assert!(RunConfig::from_toml("variants = [\"NOPE\"]").is_err());
    }

    #[test]
    fn sweep_flags_count_wins() {
        let row = |seed, variant: &str, auc| MetricsRow {
            seed,
            variant: variant.into(),
            clip: 0.1,
            best_epoch: 1,
            best_val: 0.0,
            mse: 0.0,
            auc,
            ndcg5: 0.0,
            ndcg10: 0.0,
        };
        let rows = vec![
            row(0, "TDR_CL", 0.7),
            row(0, "DR_CL", 0.6),
            row(1, "TDR_CL", 0.5),
            row(1, "DR_CL", 0.6),
            row(2, "TDR_CL", 0.6),
            row(2, "DR_CL", 0.6),
        ];
        let flags = sweep_flags(&rows, &[0.1], Variant::TdrCl, &[Variant::DrCl, Variant::TdrCl]);
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].wins, 2);
        assert!(flags[0].majority);
    }
}
