//! Parametric models: the MF prediction model `f_θ`, the MF imputation model
//! `g_φ`, the logistic propensity model `p_ξ` over concatenated embeddings,
//! plus Adam and a small reverse-mode tape with a stop-gradient operator.

mod adam;
pub mod autodiff;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use autodiff::{stop_gradient, Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{sigmoid, PairSpace};
use crate::error::{Error, Result};

/// Matrix factorization with user/item/global biases.
///
/// All parameters live in one flat buffer laid out as
/// `[user emb | item emb | user bias | item bias | global bias]`, which lets
/// the same type double as a gradient buffer and lets Adam run on a slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfModel {
    n_users: usize,
    n_items: usize,
    dim: usize,
    data: Vec<f64>,
}

impl MfModel {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        let len = (n_users + n_items) * dim + n_users + n_items + 1;
        Self {
            n_users,
            n_items,
            dim,
            data: vec![0.0; len],
        }
    }

    /// Gaussian embeddings with standard deviation `sigma`, zero biases.
    pub fn random<R: Rng + ?Sized>(n_users: usize, n_items: usize, dim: usize, sigma: f64, rng: &mut R) -> Self {
        let mut m = Self::zeros(n_users, n_items, dim);
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        let emb = (n_users + n_items) * dim;
        for x in &mut m.data[..emb] {
            *x = normal.sample(rng);
        }
        m
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_users, self.n_items, self.dim)
    }

    pub fn from_parts(n_users: usize, n_items: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let m = Self::zeros(n_users, n_items, dim);
        if m.data.len() != data.len() {
            return Err(Error::Format(format!(
                "MF buffer has {} values, expected {}",
                data.len(),
                m.data.len()
            )));
        }
        Ok(Self { data, ..m })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn item_offset(&self) -> usize {
        self.n_users * self.dim
    }

    fn user_bias_offset(&self) -> usize {
        (self.n_users + self.n_items) * self.dim
    }

    fn item_bias_offset(&self) -> usize {
        self.user_bias_offset() + self.n_users
    }

    fn global_offset(&self) -> usize {
        self.item_bias_offset() + self.n_items
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.data[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let off = self.item_offset() + i * self.dim;
        &self.data[off..off + self.dim]
    }

    pub fn user_bias(&self, u: usize) -> f64 {
        self.data[self.user_bias_offset() + u]
    }

    pub fn item_bias(&self, i: usize) -> f64 {
        self.data[self.item_bias_offset() + i]
    }

    pub fn global_bias(&self) -> f64 {
        self.data[self.global_offset()]
    }

    pub fn set_global_bias(&mut self, b: f64) {
        let off = self.global_offset();
        self.data[off] = b;
    }

    pub fn check_index(&self, u: usize, i: usize) -> Result<()> {
        if u >= self.n_users || i >= self.n_items {
            return Err(Error::domain(format!(
                "pair ({u}, {i}) outside {}x{} model",
                self.n_users, self.n_items
            )));
        }
        Ok(())
    }

    /// `⟨P_u, Q_i⟩ + b_u + b_i + b₀`.
    #[inline]
    pub fn score(&self, u: usize, i: usize) -> f64 {
        let dot: f64 = self.user(u).iter().zip(self.item(i)).map(|(a, b)| a * b).sum();
        dot + self.user_bias(u) + self.item_bias(i) + self.global_bias()
    }

    /// Adds `scale · ∂score(u, i)/∂params` into `grad`, which must share
    /// this model's shape.
    #[inline]
    pub fn accumulate_score_grad(&self, u: usize, i: usize, scale: f64, grad: &mut MfModel) {
        let d = self.dim;
        let (uo, io) = (u * d, self.item_offset() + i * d);
        for k in 0..d {
            grad.data[uo + k] += scale * self.data[io + k];
            grad.data[io + k] += scale * self.data[uo + k];
        }
        grad.data[self.user_bias_offset() + u] += scale;
        grad.data[self.item_bias_offset() + i] += scale;
        grad.data[self.global_offset()] += scale;
    }

    /// Adds `scale` times a direction on the raw embedding rows of `u` and `i`.
    pub(crate) fn accumulate_embedding(&mut self, u: usize, i: usize, scale: f64, user_dir: &[f64], item_dir: &[f64]) {
        let d = self.dim;
        let io = self.item_offset() + i * d;
        for k in 0..d {
            self.data[u * d + k] += scale * user_dir[k];
            self.data[io + k] += scale * item_dir[k];
        }
    }

    /// Human-readable name of a flat parameter index.
    pub fn param_name(&self, idx: usize) -> String {
        let d = self.dim;
        if idx < self.item_offset() {
            format!("user_emb[{}][{}]", idx / d, idx % d)
        } else if idx < self.user_bias_offset() {
            let j = idx - self.item_offset();
            format!("item_emb[{}][{}]", j / d, j % d)
        } else if idx < self.item_bias_offset() {
            format!("user_bias[{}]", idx - self.user_bias_offset())
        } else if idx < self.global_offset() {
            format!("item_bias[{}]", idx - self.item_bias_offset())
        } else {
            "global_bias".to_string()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Logistic regression `σ(⟨w, x⟩ + b)` over a `dim_in`-vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticHead {
    data: Vec<f64>,
}

impl LogisticHead {
    pub fn zeros(dim_in: usize) -> Self {
        Self {
            data: vec![0.0; dim_in + 1],
        }
    }

    pub fn from_parts(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Format("logistic head needs a bias".into()));
        }
        Ok(Self { data })
    }

    pub fn dim_in(&self) -> usize {
        self.data.len() - 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.data[..self.dim_in()]
    }

    pub fn bias(&self) -> f64 {
        self.data[self.dim_in()]
    }

    pub fn set_bias(&mut self, b: f64) {
        let k = self.dim_in();
        self.data[k] = b;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim_in())
    }

    /// Logit over the concatenation `[user_emb; item_emb]`.
    #[inline]
    pub fn logit(&self, user_emb: &[f64], item_emb: &[f64]) -> f64 {
        let d = user_emb.len();
        let w = self.weights();
        let mut z = self.bias();
        for k in 0..d {
            z += w[k] * user_emb[k] + w[d + k] * item_emb[k];
        }
        z
    }

    /// Adds `scale · ∂logit/∂(w, b)` into `grad`.
    #[inline]
    pub fn accumulate_grad(&self, user_emb: &[f64], item_emb: &[f64], scale: f64, grad: &mut LogisticHead) {
        let d = user_emb.len();
        for k in 0..d {
            grad.data[k] += scale * user_emb[k];
            grad.data[d + k] += scale * item_emb[k];
        }
        let b = grad.dim_in();
        grad.data[b] += scale;
    }

    pub fn param_name(&self, idx: usize) -> String {
        if idx == self.dim_in() {
            "bias".into()
        } else {
            format!("w[{idx}]")
        }
    }
}

/// Optimizer and initialization hyperparameters stored alongside a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub dim: usize,
    pub init_sigma: f64,
    pub adam: AdamConfig,
}

impl Default for ModelHyper {
    fn default() -> Self {
        Self {
            dim: 32,
            init_sigma: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

/// Parameters of the prediction model θ, imputation model φ and propensity
/// model ξ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub theta: MfModel,
    pub phi: MfModel,
    pub xi: LogisticHead,
    pub seed: u64,
    pub hyper: ModelHyper,
}

impl ModelBundle {
    pub fn init<R: Rng + ?Sized>(space: PairSpace, hyper: ModelHyper, seed: u64, rng: &mut R) -> Self {
        let (nu, ni, d) = (space.n_users(), space.n_items(), hyper.dim);
        let theta = MfModel::random(nu, ni, d, hyper.init_sigma, rng);
        let phi = MfModel::random(nu, ni, d, hyper.init_sigma, rng);
        Self {
            theta,
            phi,
            xi: LogisticHead::zeros(2 * d),
            seed,
            hyper,
        }
    }

    pub fn space(&self) -> PairSpace {
        PairSpace::new(self.theta.n_users(), self.theta.n_items()).expect("model has positive dims")
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.phi.is_finite() && self.xi.data().iter().all(|x| x.is_finite())
    }
}

/// `f_θ(u, i) = σ(score)`.
pub fn predict(theta: &MfModel, u: usize, i: usize) -> Result<f64> {
    theta.check_index(u, i)?;
    Ok(sigmoid(theta.score(u, i)))
}

/// `g_φ(u, i)`: linear MF head, a signed residual.
pub fn impute(phi: &MfModel, u: usize, i: usize) -> Result<f64> {
    phi.check_index(u, i)?;
    Ok(phi.score(u, i))
}

/// `max(σ(⟨w, x_{u,i}⟩ + b), clip)` with `x_{u,i}` the concatenated prediction
/// embeddings.
pub fn propensity(xi: &LogisticHead, theta: &MfModel, u: usize, i: usize, clip: f64) -> Result<f64> {
    theta.check_index(u, i)?;
    if xi.dim_in() != 2 * theta.dim() {
        return Err(Error::domain("propensity head does not match embedding width"));
    }
    Ok(sigmoid(xi.logit(theta.user(u), theta.item(i))).max(clip))
}
