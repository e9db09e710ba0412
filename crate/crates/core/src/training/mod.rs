//! Trainers: the naive and propensity-weighted baselines, static DR/TDR, the
//! joint-learning DR family and the collaborative loop with targeting.
//!
//! One collaborative epoch runs three phases: prediction and propensity
//! steps on batches from `D`, imputation steps on batches from `O`, then the
//! targeting step that fits η* on the exposed pairs and adds
//! `η* (1/p̂ − 1)` to ω.

mod losses;

pub use losses::{
    exposed_loss, exposure_loss, imputation_loss, joint_loss, ExposedObjective, Imputation, ImputationWeight,
    JointLoss, JointSpec, PropensityView,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{Rating, SplitDataset};
use crate::domain::{sigmoid, PairSpace, PropensityField, SeededRng, Stream};
use crate::error::{Error, Result};
use crate::metrics::{auc, EvalSet, MetricRow};
use crate::models::{adam_step, AdamState, LogisticHead, MfModel, ModelBundle, ModelHyper};
use crate::targeting::{check_validity, solve_eta, ImputationState, ResidualMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Base,
    Ips,
    Snips,
    Dr,
    DrJl,
    MrdrJl,
    DrCl,
    MrdrCl,
    Tdr,
    TdrJl,
    TmrdrJl,
    TdrCl,
    TmrdrCl,
}

/// When the targeting step runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetingSchedule {
    Never,
    EveryEpoch,
    /// Once, after the last epoch, followed by one prediction phase.
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Exposed(ExposedObjective),
    /// Fixed imputed labels, fixed propensities.
    Static,
    /// Learned imputation, fixed pre-trained propensities.
    Joint(ImputationWeight),
    /// Learned imputation, propensities trained jointly with θ.
    Collaborative(ImputationWeight),
}

impl Variant {
    pub const ALL: [Variant; 13] = [
        Variant::Base,
        Variant::Ips,
        Variant::Snips,
        Variant::Dr,
        Variant::DrJl,
        Variant::MrdrJl,
        Variant::DrCl,
        Variant::MrdrCl,
        Variant::Tdr,
        Variant::TdrJl,
        Variant::TmrdrJl,
        Variant::TdrCl,
        Variant::TmrdrCl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Base => "BASE",
            Variant::Ips => "IPS",
            Variant::Snips => "SNIPS",
            Variant::Dr => "DR",
            Variant::DrJl => "DR_JL",
            Variant::MrdrJl => "MRDR_JL",
            Variant::DrCl => "DR_CL",
            Variant::MrdrCl => "MRDR_CL",
            Variant::Tdr => "TDR",
            Variant::TdrJl => "TDR_JL",
            Variant::TmrdrJl => "TMRDR_JL",
            Variant::TdrCl => "TDR_CL",
            Variant::TmrdrCl => "TMRDR_CL",
        }
    }

    pub fn family(&self) -> Family {
        use ImputationWeight::{Dr, Mrdr};
        match self {
            Variant::Base => Family::Exposed(ExposedObjective::Naive),
            Variant::Ips => Family::Exposed(ExposedObjective::Ips),
            Variant::Snips => Family::Exposed(ExposedObjective::Snips),
            Variant::Dr | Variant::Tdr => Family::Static,
            Variant::DrJl | Variant::TdrJl => Family::Joint(Dr),
            Variant::MrdrJl | Variant::TmrdrJl => Family::Joint(Mrdr),
            Variant::DrCl | Variant::TdrCl => Family::Collaborative(Dr),
            Variant::MrdrCl | Variant::TmrdrCl => Family::Collaborative(Mrdr),
        }
    }

    pub fn schedule(&self) -> TargetingSchedule {
        match self {
            Variant::Tdr | Variant::TdrCl | Variant::TmrdrCl => TargetingSchedule::EveryEpoch,
            Variant::TdrJl | Variant::TmrdrJl => TargetingSchedule::Final,
            _ => TargetingSchedule::Never,
        }
    }

    pub fn uses_propensity(&self) -> bool {
        self.family() != Family::Exposed(ExposedObjective::Naive)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// How the targeting step chooses its domains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetingScope {
    /// η* over all exposed pairs, ω updated on all pairs, once per epoch.
    #[default]
    FullBatch,
    /// After every imputation step: η* over that step's exposed batch, ω
    /// updated on a fresh batch from `D`.
    Batch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensitySource {
    /// Logistic regression of `o` on the concatenated embeddings.
    #[default]
    Learned,
    /// The world's true propensities (semi-synthetic oracle mode).
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub variant: Variant,
    pub hyper: ModelHyper,
    /// Batch size over `D` for the prediction phase.
    pub batch_d: usize,
    /// Batch size over `O` for the imputation phase and exposed-pair losses.
    pub batch_o: usize,
    /// Prediction steps per epoch; `None` makes one pass over `D`.
    pub steps_joint: Option<usize>,
    /// Imputation steps per epoch; `None` makes one pass over `O`.
    pub steps_imputation: Option<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip: f64,
    pub residual_mode: ResidualMode,
    pub targeting_scope: TargetingScope,
    /// Force the targeting step off regardless of variant.
    pub disable_targeting: bool,
    pub propensity: PropensitySource,
    /// ξ gradients also flow through the `1/p̂` weights of the DR term.
    pub xi_weight_grad: bool,
    /// ξ-side gradients reach the prediction embeddings.
    pub xi_embed_grad: bool,
    /// Naive-loss epochs that fit the embeddings before propensity fitting.
    pub warmup_epochs: usize,
    pub propensity_epochs: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::TdrCl,
            hyper: ModelHyper::default(),
            batch_d: 1024,
            batch_o: 256,
            steps_joint: None,
            steps_imputation: None,
            max_epochs: 50,
            patience: 5,
            clip: 0.05,
            residual_mode: ResidualMode::WithOmega,
            targeting_scope: TargetingScope::FullBatch,
            disable_targeting: false,
            propensity: PropensitySource::Learned,
            xi_weight_grad: true,
            xi_embed_grad: false,
            warmup_epochs: 5,
            propensity_epochs: 10,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_d == 0 || self.batch_o == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.hyper.dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config(format!(
                "clip threshold must lie in (0, 1), got {}",
                self.clip
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> TargetingSchedule {
        if self.disable_targeting {
            TargetingSchedule::Never
        } else {
            self.variant.schedule()
        }
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSnapshot {
    pub epoch: usize,
    pub val_metric: f64,
    /// Mean prediction-phase loss over the epoch.
    pub loss_joint: f64,
    /// Mean imputation loss over the epoch, when the variant has one.
    pub loss_imputation: Option<f64>,
    pub eta_star: Option<f64>,
    /// Validity residual right after the targeting step.
    pub validity: Option<f64>,
    pub omega_mean_abs: f64,
    pub omega_max_abs: f64,
}

/// One evaluation triple with its MSE target and ranking label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTriple {
    pub user: usize,
    pub item: usize,
    pub target: f64,
    pub positive: bool,
}

/// Dense training arrays over `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub space: PairSpace,
    pub o: Vec<bool>,
    /// Training target in `[0, 1]` on exposed pairs, zero elsewhere.
    pub label: Vec<f64>,
    pub exposed: Vec<usize>,
    pub val: Vec<EvalTriple>,
    pub test: Vec<EvalTriple>,
    pub p_true: Option<Vec<f64>>,
}

impl TrainData {
    pub fn new(space: PairSpace, o: Vec<bool>, label: Vec<f64>) -> Result<Self> {
        if o.len() != space.total() || label.len() != space.total() {
            return Err(Error::domain("training arrays must cover the pair space"));
        }
        let exposed: Vec<usize> = (0..o.len()).filter(|&k| o[k]).collect();
        if exposed.is_empty() {
            return Err(Error::empty("no exposed training pairs"));
        }
        Ok(Self {
            space,
            o,
            label,
            exposed,
            val: Vec::new(),
            test: Vec::new(),
            p_true: None,
        })
    }

    pub fn from_split(split: &SplitDataset) -> Result<Self> {
        let space = split.space()?;
        let mut o = vec![false; space.total()];
        let mut label = vec![0.0; space.total()];
        for r in &split.train {
            let k = space.checked_index(r.user, r.item)?;
            o[k] = true;
            label[k] = split.scaled(r.value);
        }
        let triples = |rs: &[Rating]| -> Vec<EvalTriple> {
            rs.iter()
                .map(|r| EvalTriple {
                    user: r.user,
                    item: r.item,
                    target: split.scaled(r.value),
                    positive: split.positive(r.value),
                })
                .collect()
        };
        let mut data = Self::new(space, o, label)?;
        data.val = triples(&split.val);
        data.test = triples(&split.test);
        Ok(data)
    }

    pub fn with_oracle(mut self, p_true: Vec<f64>) -> Result<Self> {
        if p_true.len() != self.space.total() {
            return Err(Error::domain("oracle propensities must cover the pair space"));
        }
        self.p_true = Some(p_true);
        Ok(self)
    }

    /// Mean training target over exposed pairs.
    pub fn mean_label(&self) -> f64 {
        self.exposed.iter().map(|&k| self.label[k]).sum::<f64>() / self.exposed.len() as f64
    }
}

pub fn evaluate(theta: &MfModel, triples: &[EvalTriple]) -> Result<EvalSet> {
    let mut set = EvalSet::default();
    for t in triples {
        theta.check_index(t.user, t.item)?;
        set.push(t.user, sigmoid(theta.score(t.user, t.item)), t.target, t.positive);
    }
    Ok(set)
}

/// AUC on the triples, or negative MSE when they hold a single class.
pub fn validation_metric(theta: &MfModel, triples: &[EvalTriple]) -> Result<f64> {
    let set = evaluate(theta, triples)?;
    if set.is_empty() {
        return Err(Error::empty("empty validation set"));
    }
    match auc(&set.preds, &set.positive) {
        Ok(a) => Ok(a),
        Err(Error::Domain(_)) => Ok(-crate::metrics::mse(&set.preds, &set.targets)?),
        Err(e) => Err(e),
    }
}

pub fn test_metrics(theta: &MfModel, data: &TrainData) -> Result<MetricRow> {
    evaluate(theta, &data.test)?.evaluate()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub omega: Vec<f64>,
    /// Propensities used by the fixed-propensity variants.
    pub fixed_propensity: Option<Vec<f64>>,
    pub history: Vec<TrainSnapshot>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Mutable training state, kept together so the best epoch can be restored.
#[derive(Clone)]
struct State {
    bundle: ModelBundle,
    omega: Vec<f64>,
}

struct Optimizers {
    theta: AdamState,
    phi: AdamState,
    xi: AdamState,
}

fn step_theta(theta: &mut MfModel, grad: &MfModel, adam: &mut AdamState) -> Result<()> {
    let names = theta.clone();
    adam_step(theta.data_mut(), grad.data(), adam, |k| {
        format!("theta.{}", names.param_name(k))
    })
}

fn step_phi(phi: &mut MfModel, grad: &MfModel, adam: &mut AdamState) -> Result<()> {
    let names = phi.clone();
    adam_step(phi.data_mut(), grad.data(), adam, |k| {
        format!("phi.{}", names.param_name(k))
    })
}

fn step_xi(xi: &mut LogisticHead, grad: &LogisticHead, adam: &mut AdamState) -> Result<()> {
    let names = xi.clone();
    adam_step(xi.data_mut(), grad.data(), adam, |k| {
        format!("xi.{}", names.param_name(k))
    })
}

/// Shuffled batches covering `pool`, cycled until `steps` batches exist.
fn batches(pool: &[usize], size: usize, steps: Option<usize>, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let per_pass = pool.len().div_ceil(size);
    let steps = steps.unwrap_or(per_pass);
    let mut out = Vec::with_capacity(steps);
    let mut order = pool.to_vec();
    while out.len() < steps {
        order.shuffle(rng);
        for chunk in order.chunks(size) {
            if out.len() == steps {
                break;
            }
            out.push(chunk.to_vec());
        }
    }
    out
}

fn omega_stats(omega: &[f64]) -> (f64, f64) {
    let mean = omega.iter().map(|w| w.abs()).sum::<f64>() / omega.len().max(1) as f64;
    let max = omega.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    (mean, max)
}

/// Fits ξ by logistic regression of `o` on frozen embeddings and returns it.
pub fn pretrain_propensity(data: &TrainData, bundle: &ModelBundle, cfg: &TrainerConfig) -> Result<LogisticHead> {
    let n_exposed = data.exposed.len();
    if n_exposed == 0 || n_exposed == data.space.total() {
        return Err(Error::domain("exposure is constant; propensities cannot be fitted"));
    }
    let mut xi = bundle.xi.clone();
    let base_rate = n_exposed as f64 / data.space.total() as f64;
    xi.set_bias((base_rate / (1.0 - base_rate)).ln());
    let mut adam = AdamState::new(cfg.hyper.adam.clone(), xi.data().len());
    let all: Vec<usize> = (0..data.space.total()).collect();
    let rng = SeededRng::new(cfg.seed);
    for epoch in 0..cfg.propensity_epochs {
        let mut r = rng.stream(Stream::Batch, 1_000_000 + epoch as u64);
        for batch in batches(&all, cfg.batch_d, None, &mut r) {
            let (_, grad) = exposure_loss(&batch, &xi, &bundle.theta, data)?;
            step_xi(&mut xi, &grad, &mut adam)?;
        }
    }
    Ok(xi)
}

struct Trainer<'a> {
    data: &'a TrainData,
    cfg: &'a TrainerConfig,
    rng: SeededRng,
    fixed_p: Option<Vec<f64>>,
    static_labels: Vec<f64>,
}

impl Trainer<'_> {
    fn propensity_view<'s>(&'s self, state: &'s State) -> Result<PropensityView<'s>> {
        match self.cfg.variant.family() {
            Family::Collaborative(_) if self.cfg.propensity == PropensitySource::Learned => {
                Ok(PropensityView::Learned {
                    xi: &state.bundle.xi,
                    embed: &state.bundle.theta,
                    clip: self.cfg.clip,
                })
            }
            _ => self
                .fixed_p
                .as_deref()
                .map(PropensityView::Fixed)
                .ok_or_else(|| Error::config("variant needs propensities")),
        }
    }

    fn epoch_rng(&self, epoch: usize, phase: u64) -> rand_chacha::ChaCha8Rng {
        self.rng.stream(Stream::Batch, epoch as u64 * 8 + phase)
    }

    fn exposed_phase(
        &self,
        state: &mut State,
        opt: &mut Optimizers,
        epoch: usize,
        objective: ExposedObjective,
    ) -> Result<f64> {
        let mut r = self.epoch_rng(epoch, 0);
        let mut total = 0.0;
        let bs = batches(&self.data.exposed, self.cfg.batch_o, self.cfg.steps_imputation, &mut r);
        for batch in &bs {
            let (v, grad) = exposed_loss(
                batch,
                &state.bundle.theta,
                self.fixed_p.as_deref(),
                self.data,
                objective,
            )?;
            step_theta(&mut state.bundle.theta, &grad, &mut opt.theta)?;
            total += v;
        }
        Ok(total / bs.len() as f64)
    }

    fn joint_phase(&self, state: &mut State, opt: &mut Optimizers, epoch: usize) -> Result<f64> {
        let all: Vec<usize> = (0..self.data.space.total()).collect();
        let mut r = self.epoch_rng(epoch, 1);
        let bs = batches(&all, self.cfg.batch_d, self.cfg.steps_joint, &mut r);
        let family = self.cfg.variant.family();
        let collaborative =
            matches!(family, Family::Collaborative(_)) && self.cfg.propensity == PropensitySource::Learned;
        let spec = JointSpec {
            train_xi: collaborative,
            weight_grad: self.cfg.xi_weight_grad,
            embed_grad: self.cfg.xi_embed_grad,
        };
        let mut total = 0.0;
        for batch in &bs {
            let loss = {
                let imputation = match family {
                    Family::Static => Imputation::Fixed(&self.static_labels),
                    _ => Imputation::Learned(&state.bundle.phi),
                };
                let view = self.propensity_view(state)?;
                joint_loss(
                    batch,
                    &state.bundle.theta,
                    imputation,
                    view,
                    &state.omega,
                    self.data,
                    spec,
                )?
            };
            step_theta(&mut state.bundle.theta, &loss.theta, &mut opt.theta)?;
            if let Some(g) = &loss.xi {
                step_xi(&mut state.bundle.xi, g, &mut opt.xi)?;
            }
            total += loss.value;
        }
        Ok(total / bs.len() as f64)
    }

    /// Imputation steps, with batch-scope targeting folded in when enabled.
    fn imputation_phase(
        &self,
        state: &mut State,
        opt: &mut Optimizers,
        epoch: usize,
        weighting: ImputationWeight,
        batch_targeting: bool,
    ) -> Result<(f64, Option<f64>)> {
        let mut r = self.epoch_rng(epoch, 2);
        let mut rd = self.epoch_rng(epoch, 3);
        let all: Vec<usize> = (0..self.data.space.total()).collect();
        let bs = batches(&self.data.exposed, self.cfg.batch_o, self.cfg.steps_imputation, &mut r);
        let mut total = 0.0;
        let mut last_eta = None;
        for batch in &bs {
            let (v, grad) = {
                let view = self.propensity_view(state)?;
                imputation_loss(
                    batch,
                    &state.bundle.theta,
                    &state.bundle.phi,
                    view,
                    &state.omega,
                    self.data,
                    weighting,
                )?
            };
            step_phi(&mut state.bundle.phi, &grad, &mut opt.phi)?;
            total += v;
            if batch_targeting {
                let targets = batches(&all, self.cfg.batch_d, Some(1), &mut rd).remove(0);
                last_eta = Some(self.batch_targeting(state, batch, &targets)?);
            }
        }
        Ok((total / bs.len() as f64, last_eta))
    }

    /// Signed residuals `r − f` on exposed pairs and the imputed residual
    /// `ŷ − f` (without ω) on every pair.
    fn residuals(&self, state: &State) -> (Vec<f64>, Vec<f64>) {
        let n = self.data.space.total();
        let mut e = vec![0.0; n];
        let mut base = vec![0.0; n];
        let imputation = match self.cfg.variant.family() {
            Family::Static => Imputation::Fixed(&self.static_labels),
            _ => Imputation::Learned(&state.bundle.phi),
        };
        for k in 0..n {
            let (u, i) = self.data.space.pair(k);
            let f = sigmoid(state.bundle.theta.score(u, i));
            if self.data.o[k] {
                e[k] = self.data.label[k] - f;
            }
            base[k] = imputation.residual(u, i, k, f);
        }
        (e, base)
    }

    /// Full-batch targeting; returns η* and the validity residual after the
    /// update.
    fn full_targeting(&self, state: &mut State) -> Result<(f64, f64)> {
        let (e, base) = self.residuals(state);
        let p = self.propensity_view(state)?.all(self.data);
        let imputation =
            ImputationState::with_omega(base, std::mem::take(&mut state.omega), PropensityField::unclipped(p)?)?;
        let result = solve_eta(&e, &self.data.o, &imputation, self.cfg.residual_mode)?;
        let imputation = crate::targeting::apply_targeting(imputation, result.eta_star)?;
        let validity = check_validity(&e, &self.data.o, &imputation);
        state.omega = imputation.into_parts().1;
        Ok((result.eta_star, validity))
    }

    fn batch_targeting(&self, state: &mut State, exposed: &[usize], targets: &[usize]) -> Result<f64> {
        let view = self.propensity_view(state)?;
        let theta = &state.bundle.theta;
        let (mut wd, mut ww) = (0.0, 0.0);
        for &k in exposed {
            let (u, i) = self.data.space.pair(k);
            let f = sigmoid(theta.score(u, i));
            let w = 1.0 / view.eval(u, i, k).0 - 1.0;
            let base = match self.cfg.variant.family() {
                Family::Static => self.static_labels[k] - f,
                _ => state.bundle.phi.score(u, i),
            };
            let d = match self.cfg.residual_mode {
                ResidualMode::WithOmega => self.data.label[k] - f - base - state.omega[k],
                ResidualMode::Literal => self.data.label[k] - f - base,
            };
            wd += w * d;
            ww += w * w;
        }
        let eta = if ww == 0.0 { 0.0 } else { wd / ww };
        if !eta.is_finite() {
            return Err(Error::NonFinite("eta*".into()));
        }
        let weights: Vec<f64> = targets
            .iter()
            .map(|&k| {
                let (u, i) = self.data.space.pair(k);
                1.0 / view.eval(u, i, k).0 - 1.0
            })
            .collect();
        for (&k, w) in targets.iter().zip(weights) {
            state.omega[k] += eta * w;
        }
        Ok(eta)
    }
}

/// Trains the configured variant with early stopping on the validation set.
pub fn train(data: &TrainData, cfg: &TrainerConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.val.is_empty() {
        return Err(Error::empty("training needs a validation set"));
    }
    let rng = SeededRng::new(cfg.seed);
    let bundle = ModelBundle::init(
        data.space,
        cfg.hyper.clone(),
        cfg.seed,
        &mut rng.stream(Stream::Init, 0),
    );
    let n_theta = bundle.theta.data().len();
    let mut opt = Optimizers {
        theta: AdamState::new(cfg.hyper.adam.clone(), n_theta),
        phi: AdamState::new(cfg.hyper.adam.clone(), bundle.phi.data().len()),
        xi: AdamState::new(cfg.hyper.adam.clone(), bundle.xi.data().len()),
    };
    let mut trainer = Trainer {
        data,
        cfg,
        rng,
        fixed_p: None,
        static_labels: vec![data.mean_label(); data.space.total()],
    };
    let mut state = State {
        bundle,
        omega: vec![0.0; data.space.total()],
    };

    // Warm-up on the naive loss gives the propensity model its features.
    for w in 0..cfg.warmup_epochs {
        let mut r = rng.stream(Stream::Batch, 2_000_000 + w as u64);
        for batch in batches(&data.exposed, cfg.batch_o, None, &mut r) {
            let (_, grad) = exposed_loss(&batch, &state.bundle.theta, None, data, ExposedObjective::Naive)?;
            step_theta(&mut state.bundle.theta, &grad, &mut opt.theta)?;
        }
    }
    if cfg.variant.uses_propensity() {
        match cfg.propensity {
            PropensitySource::Oracle => {
                let p = data
                    .p_true
                    .as_ref()
                    .ok_or_else(|| Error::config("oracle propensities requested but the data has none"))?;
                trainer.fixed_p = Some(p.iter().map(|&v| v.max(cfg.clip)).collect());
            }
            PropensitySource::Learned => {
                state.bundle.xi = pretrain_propensity(data, &state.bundle, cfg)?;
                let view = PropensityView::Learned {
                    xi: &state.bundle.xi,
                    embed: &state.bundle.theta,
                    clip: cfg.clip,
                };
                trainer.fixed_p = Some(view.all(data));
            }
        }
    }

    let schedule = cfg.schedule();
    let mut history: Vec<TrainSnapshot> = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, state.clone());
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let diverged = |msg: String, history: &[TrainSnapshot]| Error::Diverged {
            epoch,
            msg,
            last: history.last().cloned().map(Box::new),
        };
        let outcome = (|| -> Result<TrainSnapshot> {
            let mut snap = TrainSnapshot {
                epoch,
                val_metric: f64::NAN,
                loss_joint: 0.0,
                loss_imputation: None,
                eta_star: None,
                validity: None,
                omega_mean_abs: 0.0,
                omega_max_abs: 0.0,
            };
            match cfg.variant.family() {
                Family::Exposed(objective) => {
                    snap.loss_joint = trainer.exposed_phase(&mut state, &mut opt, epoch, objective)?;
                }
                Family::Static => {
                    snap.loss_joint = trainer.joint_phase(&mut state, &mut opt, epoch)?;
                }
                Family::Joint(weighting) | Family::Collaborative(weighting) => {
                    snap.loss_joint = trainer.joint_phase(&mut state, &mut opt, epoch)?;
                    let batch_targeting =
                        schedule == TargetingSchedule::EveryEpoch && cfg.targeting_scope == TargetingScope::Batch;
                    let (li, eta) =
                        trainer.imputation_phase(&mut state, &mut opt, epoch, weighting, batch_targeting)?;
                    snap.loss_imputation = Some(li);
                    snap.eta_star = eta;
                }
            }
            if schedule == TargetingSchedule::EveryEpoch && cfg.targeting_scope == TargetingScope::FullBatch {
                let (eta, validity) = trainer.full_targeting(&mut state)?;
                snap.eta_star = Some(eta);
                snap.validity = Some(validity);
            }
            (snap.omega_mean_abs, snap.omega_max_abs) = omega_stats(&state.omega);
            snap.val_metric = validation_metric(&state.bundle.theta, &data.val)?;
            Ok(snap)
        })();
        let snap = match outcome {
            Ok(s) => s,
            Err(Error::NonFinite(msg)) => return Err(diverged(msg, &history)),
            Err(e) => return Err(e),
        };
        if !state.bundle.is_finite() {
            return Err(diverged("parameters became non-finite".into(), &history));
        }
        log::debug!(
            "{} epoch {epoch}: val {:.4} loss {:.5}",
            cfg.variant,
            snap.val_metric,
            snap.loss_joint
        );
        let improved = snap.val_metric > best.0;
        history.push(snap);
        if improved {
            best = (history.last().expect("pushed").val_metric, epoch, state.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (mut best_val, mut best_epoch, mut state) = best;

    if schedule == TargetingSchedule::Final {
        let epoch = history.len() + 1;
        let (eta, validity) = trainer.full_targeting(&mut state)?;
        let loss = trainer.joint_phase(&mut state, &mut opt, epoch)?;
        let (mean_abs, max_abs) = omega_stats(&state.omega);
        let val = validation_metric(&state.bundle.theta, &data.val)?;
        history.push(TrainSnapshot {
            epoch,
            val_metric: val,
            loss_joint: loss,
            loss_imputation: None,
            eta_star: Some(eta),
            validity: Some(validity),
            omega_mean_abs: mean_abs,
            omega_max_abs: max_abs,
        });
        best_val = val;
        best_epoch = epoch;
    }
    Ok(TrainOutcome {
        bundle: state.bundle,
        omega: state.omega,
        fixed_propensity: trainer.fixed_p,
        history,
        best_epoch,
        best_val,
    })
}
