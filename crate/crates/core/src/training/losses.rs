//! Training objectives with hand-derived gradients.
//!
//! Two error notions coexist here. The squared error `e = (f − r)²` drives the
//! prediction model, while the imputation model fits the signed residual
//! `r − f` with `g + ω`. Unexposed pairs enter the prediction loss through
//! `ẽ = (f − ŷ)²`, where the imputed label is `ŷ = ⊥f + g + ω` for learned
//! imputation (forward value `(g + ω)²`, derivative `−2(g + ω)` in `f`) and
//! `ŷ = y + ω` for a fixed per-pair imputed label `y`.

use serde::{Deserialize, Serialize};

use super::TrainData;
use crate::domain::sigmoid;
use crate::error::{Error, Result};
use crate::models::{LogisticHead, MfModel};

/// Where propensities come from inside a loss.
#[derive(Clone, Copy, Debug)]
pub enum PropensityView<'a> {
    /// `max(σ(⟨w, x⟩ + b), clip)` with `x` the concatenated rows of `embed`.
    Learned {
        xi: &'a LogisticHead,
        embed: &'a MfModel,
        clip: f64,
    },
    /// A fixed per-pair table.
    Fixed(&'a [f64]),
}

impl PropensityView<'_> {
    /// Value and `∂p̂/∂z` (zero on the clipped side or for fixed tables).
    #[inline]
    pub fn eval(&self, u: usize, i: usize, k: usize) -> (f64, f64) {
        match *self {
            PropensityView::Learned { xi, embed, clip } => {
                let s = sigmoid(xi.logit(embed.user(u), embed.item(i)));
                if s >= clip {
                    (s, s * (1.0 - s))
                } else {
                    (clip, 0.0)
                }
            }
            PropensityView::Fixed(p) => (p[k], 0.0),
        }
    }

    pub fn all(&self, data: &TrainData) -> Vec<f64> {
        (0..data.space.total())
            .map(|k| {
                let (u, i) = data.space.pair(k);
                self.eval(u, i, k).0
            })
            .collect()
    }
}

/// Imputed labels for unexposed pairs.
#[derive(Clone, Copy, Debug)]
pub enum Imputation<'a> {
    /// `ŷ = ⊥f + g_φ + ω`.
    Learned(&'a MfModel),
    /// `ŷ = y + ω` with a fixed per-pair `y`.
    Fixed(&'a [f64]),
}

impl Imputation<'_> {
    /// Imputed residual `ŷ − f` without `ω`.
    #[inline]
    pub fn residual(&self, u: usize, i: usize, k: usize, f: f64) -> f64 {
        match *self {
            Imputation::Learned(phi) => phi.score(u, i),
            Imputation::Fixed(y) => y[k] - f,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct JointSpec {
    /// Add the exposure cross-entropy and return ξ gradients.
    pub train_xi: bool,
    /// Let ξ gradients flow through the `1/p̂` weights as well as the CE term.
    pub weight_grad: bool,
    /// Let ξ-side gradients reach the embeddings used as propensity features.
    pub embed_grad: bool,
}

#[derive(Clone, Debug)]
pub struct JointLoss {
    pub value: f64,
    pub theta: MfModel,
    pub xi: Option<LogisticHead>,
}

/// `mean_B [ẽ + o(e − ẽ)/p̂]`, plus `mean_B CE(o, p̂)` when ξ is trained.
///
/// Gradients are returned for θ and ξ only. With `embed_grad` the propensity
/// features are assumed to be `theta`'s own embeddings.
pub fn joint_loss(
    batch: &[usize],
    theta: &MfModel,
    imputation: Imputation<'_>,
    propensity: PropensityView<'_>,
    omega: &[f64],
    data: &TrainData,
    spec: JointSpec,
) -> Result<JointLoss> {
    if batch.is_empty() {
        return Err(Error::empty("joint loss over an empty batch"));
    }
    let learned = match propensity {
        PropensityView::Learned { xi, .. } => Some(xi),
        PropensityView::Fixed(_) => None,
    };
    let mut g_theta = theta.zeros_like();
    let mut g_xi = learned.filter(|_| spec.train_xi).map(|xi| xi.zeros_like());
    let n = batch.len() as f64;
    let mut total = 0.0;
    for &k in batch {
        let (u, i) = data.space.pair(k);
        let f = sigmoid(theta.score(u, i));
        let (p, dp_dz) = propensity.eval(u, i, k);
        let h = imputation.residual(u, i, k, f) + omega[k];
        let e_tilde = h * h;
        let de_tilde = -2.0 * h;
        let o = data.o[k];
        let (mut value, mut d_f) = (e_tilde, de_tilde);
        let mut d_z = 0.0;
        if o {
            let r = data.label[k];
            let e = (f - r) * (f - r);
            value += (e - e_tilde) / p;
            d_f += (2.0 * (f - r) - de_tilde) / p;
            if spec.weight_grad {
                d_z += -(e - e_tilde) / (p * p) * dp_dz;
            }
        }
        if spec.train_xi && learned.is_some() {
            let ce = if o { -p.ln() } else { -(1.0 - p).ln() };
            value += ce;
            if dp_dz != 0.0 {
                // d CE / dz for an unclipped sigmoid output
                d_z += p - if o { 1.0 } else { 0.0 };
            }
        }
        total += value;
        theta.accumulate_score_grad(u, i, d_f * f * (1.0 - f) / n, &mut g_theta);
        if let (Some(g), Some(xi)) = (g_xi.as_mut(), learned) {
            if d_z != 0.0 {
                if let PropensityView::Learned { embed, .. } = propensity {
                    xi.accumulate_grad(embed.user(u), embed.item(i), d_z / n, g);
                }
                if spec.embed_grad {
                    let d = theta.dim();
                    let w = xi.weights();
                    g_theta.accumulate_embedding(u, i, d_z / n, &w[..d], &w[d..]);
                }
            }
        }
    }
    let value = total / n;
    if !value.is_finite() {
        return Err(Error::NonFinite("joint loss".into()));
    }
    Ok(JointLoss {
        value,
        theta: g_theta,
        xi: g_xi,
    })
}

/// Weighting of the squared residual gap in the imputation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ImputationWeight {
    /// `1/p̂`.
    Dr,
    /// `(1 − p̂)/p̂²`.
    Mrdr,
}

impl ImputationWeight {
    #[inline]
    pub fn weight(&self, p: f64) -> f64 {
        match self {
            ImputationWeight::Dr => 1.0 / p,
            ImputationWeight::Mrdr => (1.0 - p) / (p * p),
        }
    }
}

/// `mean_B w(p̂) (g + ω − (r − f))²` over exposed pairs, gradient in φ only.
pub fn imputation_loss(
    batch: &[usize],
    theta: &MfModel,
    phi: &MfModel,
    propensity: PropensityView<'_>,
    omega: &[f64],
    data: &TrainData,
    weighting: ImputationWeight,
) -> Result<(f64, MfModel)> {
    if batch.is_empty() {
        return Err(Error::empty("imputation loss over an empty batch"));
    }
    let mut grad = phi.zeros_like();
    let n = batch.len() as f64;
    let mut total = 0.0;
    for &k in batch {
        if !data.o[k] {
            return Err(Error::domain("imputation batch contains an unexposed pair"));
        }
        let (u, i) = data.space.pair(k);
        let f = sigmoid(theta.score(u, i));
        let (p, _) = propensity.eval(u, i, k);
        let w = weighting.weight(p);
        let gap = phi.score(u, i) + omega[k] - (data.label[k] - f);
        total += w * gap * gap;
        phi.accumulate_score_grad(u, i, 2.0 * w * gap / n, &mut grad);
    }
    let value = total / n;
    if !value.is_finite() {
        return Err(Error::NonFinite("imputation loss".into()));
    }
    Ok((value, grad))
}

/// Objectives of the propensity-free and propensity-weighted baselines,
/// evaluated on batches of exposed pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExposedObjective {
    /// `mean_B e`.
    Naive,
    /// `mean_B e/p̂`.
    Ips,
    /// `Σ_B e/p̂ / Σ_B 1/p̂`.
    Snips,
}

pub fn exposed_loss(
    batch: &[usize],
    theta: &MfModel,
    p_hat: Option<&[f64]>,
    data: &TrainData,
    objective: ExposedObjective,
) -> Result<(f64, MfModel)> {
    if batch.is_empty() {
        return Err(Error::empty("loss over an empty batch"));
    }
    let weight = |k: usize| -> Result<f64> {
        match objective {
            ExposedObjective::Naive => Ok(1.0),
            _ => p_hat
                .map(|p| 1.0 / p[k])
                .ok_or_else(|| Error::config("weighted objective needs propensities")),
        }
    };
    let norm = match objective {
        ExposedObjective::Snips => batch.iter().map(|&k| weight(k)).sum::<Result<f64>>()?,
        _ => batch.len() as f64,
    };
    let mut grad = theta.zeros_like();
    let mut total = 0.0;
    for &k in batch {
        if !data.o[k] {
            return Err(Error::domain("exposed-pair batch contains an unexposed pair"));
        }
        let (u, i) = data.space.pair(k);
        let f = sigmoid(theta.score(u, i));
        let r = data.label[k];
        let w = weight(k)? / norm;
        total += w * (f - r) * (f - r);
        theta.accumulate_score_grad(u, i, w * 2.0 * (f - r) * f * (1.0 - f), &mut grad);
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((total, grad))
}

/// Exposure cross-entropy of the unclipped logistic model over a batch of
/// pairs, with features taken from `embed` and held fixed.
pub fn exposure_loss(
    batch: &[usize],
    xi: &LogisticHead,
    embed: &MfModel,
    data: &TrainData,
) -> Result<(f64, LogisticHead)> {
    if batch.is_empty() {
        return Err(Error::empty("exposure loss over an empty batch"));
    }
    let mut grad = xi.zeros_like();
    let n = batch.len() as f64;
    let mut total = 0.0;
    for &k in batch {
        let (u, i) = data.space.pair(k);
        let z = xi.logit(embed.user(u), embed.item(i));
        let o = if data.o[k] { 1.0 } else { 0.0 };
        // log(1 + e^z) − o z, stable for large |z|
        total += z.max(0.0) + (-z.abs()).exp().ln_1p() - o * z;
        xi.accumulate_grad(embed.user(u), embed.item(i), (sigmoid(z) - o) / n, &mut grad);
    }
    Ok((total / n, grad))
}
