//! The targeting step.
//!
//! Given imputed errors `ê`, an accumulated correction `ω` and propensities
//! `p̂`, the targeting step fits the one-parameter model
//! `ẽ(η) = ê + ω + η (1/p̂ − 1)` to the observed errors by least squares on
//! the exposed pairs, then folds `η* (1/p̂ − 1)` into `ω` on every pair. After
//! one cycle the weighted residual
//! `|D|⁻¹ Σ o (e − ẽ)(1 − p̂)/p̂` is zero, so DR built on `ẽ` coincides with
//! EIB built on `ẽ`.

use serde::{Deserialize, Serialize};

use crate::domain::{tol, PropensityField};
use crate::error::{Error, Result};

/// Which residual the η fit regresses on `1/p̂ − 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `d = e − ê − ω`: repeated targeting is a fixed-point iteration.
    #[default]
    WithOmega,
    /// `d = e − ê`, ignoring the accumulated correction.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputationState {
    e_hat: Vec<f64>,
    omega: Vec<f64>,
    p_hat: PropensityField,
}

impl ImputationState {
    /// Fresh state with `ω ≡ 0`.
    pub fn new(e_hat: Vec<f64>, p_hat: PropensityField) -> Result<Self> {
        if e_hat.len() != p_hat.len() {
            return Err(Error::domain("imputation and propensities must share length |D|"));
        }
        let omega = vec![0.0; e_hat.len()];
        Ok(Self { e_hat, omega, p_hat })
    }

    pub fn with_omega(e_hat: Vec<f64>, omega: Vec<f64>, p_hat: PropensityField) -> Result<Self> {
        if e_hat.len() != p_hat.len() || omega.len() != e_hat.len() {
            return Err(Error::domain("imputation state arrays must share length |D|"));
        }
        Ok(Self { e_hat, omega, p_hat })
    }

    pub fn e_hat(&self) -> &[f64] {
        &self.e_hat
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn p_hat(&self) -> &PropensityField {
        &self.p_hat
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>, PropensityField) {
        (self.e_hat, self.omega, self.p_hat)
    }

    /// `ê + ω` at pair `k`.
    #[inline]
    pub fn effective(&self, k: usize) -> f64 {
        self.e_hat[k] + self.omega[k]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetingResult {
    pub eta_star: f64,
    /// Validity residual that the update with `eta_star` leaves behind.
    pub residual_correction: f64,
    /// Set when every exposed pair has `p̂ = 1`, so the regressor is zero.
    pub degenerate: bool,
}

#[inline]
fn targeting_weight(p: f64) -> f64 {
    1.0 / p - 1.0
}

/// Closed-form least-squares η* over the exposed pairs. Values with
/// `|η*| ≤ tol::ETA_ZERO` are returned as exactly zero, so an imputation that
/// already satisfies the validity condition is left bit-for-bit unchanged.
pub fn solve_eta(e: &[f64], o: &[bool], state: &ImputationState, mode: ResidualMode) -> Result<TargetingResult> {
    let p = state.p_hat.values();
    let n = o.len();
    if e.len() != n || p.len() != n {
        return Err(Error::domain("targeting inputs must share length |D|"));
    }
    let mut wd = 0.0;
    let mut ww = 0.0;
    let mut exposed = 0usize;
    for k in 0..n {
        if !o[k] {
            continue;
        }
        exposed += 1;
        let w = targeting_weight(p[k]);
        let d = match mode {
            ResidualMode::WithOmega => e[k] - state.e_hat[k] - state.omega[k],
            ResidualMode::Literal => e[k] - state.e_hat[k],
        };
        wd += w * d;
        ww += w * w;
    }
    if exposed == 0 {
        return Err(Error::empty("targeting needs at least one exposed pair"));
    }
    if ww == 0.0 {
        return Ok(TargetingResult {
            eta_star: 0.0,
            residual_correction: 0.0,
            degenerate: true,
        });
    }
    let mut eta_star = wd / ww;
    if !eta_star.is_finite() {
        return Err(Error::NonFinite("eta*".into()));
    }
    if eta_star.abs() <= tol::ETA_ZERO {
        eta_star = 0.0;
    }
    let residual = match mode {
        ResidualMode::WithOmega => (wd - eta_star * ww) / n as f64,
        // The literal fit ignores ω, so the residual after the update has to
        // be measured directly.
        ResidualMode::Literal => {
            let mut r = 0.0;
            for k in 0..n {
                if o[k] {
                    let w = targeting_weight(p[k]);
                    r += w * (e[k] - state.e_hat[k] - state.omega[k] - eta_star * w);
                }
            }
            r / n as f64
        }
    };
    Ok(TargetingResult {
        eta_star,
        residual_correction: residual,
        degenerate: false,
    })
}

/// `ω ← ω + η (1/p̂ − 1)` on every pair.
pub fn apply_targeting(mut state: ImputationState, eta: f64) -> Result<ImputationState> {
    if !eta.is_finite() {
        return Err(Error::NonFinite("eta".into()));
    }
    if eta != 0.0 {
        for (w, &p) in state.omega.iter_mut().zip(state.p_hat.values()) {
            *w += eta * targeting_weight(p);
        }
    }
    Ok(state)
}

/// `|D|⁻¹ Σ o (e − ê − ω)(1 − p̂)/p̂`.
pub fn check_validity(e: &[f64], o: &[bool], state: &ImputationState) -> f64 {
    let p = state.p_hat.values();
    let mut sum = 0.0;
    for k in 0..o.len() {
        if o[k] {
            sum += (e[k] - state.effective(k)) * (1.0 - p[k]) / p[k];
        }
    }
    sum / o.len() as f64
}

/// `ẽ = ê + ω` per pair.
pub fn targeted_imputation(state: &ImputationState) -> Vec<f64> {
    state.e_hat.iter().zip(&state.omega).map(|(e, w)| e + w).collect()
}

/// One solve/apply cycle.
pub fn target(
    e: &[f64],
    o: &[bool],
    state: ImputationState,
    mode: ResidualMode,
) -> Result<(ImputationState, TargetingResult)> {
    let result = solve_eta(e, o, &state, mode)?;
    let state = apply_targeting(state, result.eta_star)?;
    Ok((state, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{eib_loss, tdr_loss};
    use approx::assert_relative_eq;

    fn field(p: &[f64]) -> PropensityField {
        PropensityField::unclipped(p.to_vec()).unwrap()
    }

    /// Independent 1-D grid search over the quadratic, refined three times.
    fn grid_argmin(d: &[f64], w: &[f64]) -> f64 {
        let objective = |eta: f64| -> f64 { d.iter().zip(w).map(|(d, w)| (d - eta * w).powi(2)).sum() };
        let (mut lo, mut hi) = (-1.0, 1.0);
        let mut best = 0.0;
        for _ in 0..6 {
            let step = (hi - lo) / 1000.0;
            best = (0..=1000)
                .map(|j| lo + j as f64 * step)
                .min_by(|a, b| objective(*a).total_cmp(&objective(*b)))
                .unwrap();
            lo = best - step;
            hi = best + step;
        }
        best
    }

    #[test]
    fn eta_hand_example() {
        let e = [0.2, -0.1, 0.3];
        let o = [true; 3];
        let p = [0.5, 0.25, 0.5];
        let state = ImputationState::new(vec![0.0; 3], field(&p)).unwrap();
        let res = solve_eta(&e, &o, &state, ResidualMode::WithOmega).unwrap();
        assert_relative_eq!(res.eta_star, 0.2 / 11.0, max_relative = 1e-14);
        assert!(!res.degenerate);
        let grid = grid_argmin(&e, &[1.0, 3.0, 1.0]);
        assert!((grid - res.eta_star).abs() < 1e-8, "grid {grid}");
    }

    #[test]
    fn eta_is_zero_for_perfect_imputation() {
        let e = [0.4, 1.2, 0.0, 0.9];
        let o = [true, true, false, true];
        let state = ImputationState::new(e.to_vec(), field(&[0.3, 0.6, 0.1, 0.2])).unwrap();
        let res = solve_eta(&e, &o, &state, ResidualMode::WithOmega).unwrap();
        assert_eq!(res.eta_star, 0.0);
    }

    #[test]
    fn eta_degenerate_when_exposed_propensities_are_one() {
        let state = ImputationState::new(vec![0.0; 3], field(&[1.0, 1.0, 0.2])).unwrap();
        let res = solve_eta(&[1.0, 2.0, 3.0], &[true, true, false], &state, ResidualMode::WithOmega).unwrap();
        assert_eq!(res.eta_star, 0.0);
        assert!(res.degenerate);
    }

    #[test]
    fn eta_requires_exposure() {
        let state = ImputationState::new(vec![0.0; 2], field(&[0.5, 0.5])).unwrap();
        assert!(matches!(
            solve_eta(&[1.0, 1.0], &[false, false], &state, ResidualMode::WithOmega),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn apply_examples() {
        let state = ImputationState::new(vec![0.5, 0.1], field(&[0.25, 1.0])).unwrap();
        let same = apply_targeting(state.clone(), 0.0).unwrap();
        assert_eq!(same, state);
        let next = apply_targeting(state, 0.1).unwrap();
        assert_relative_eq!(next.omega()[0], 0.3, max_relative = 1e-15);
        assert_eq!(next.omega()[1], 0.0);
        assert!(apply_targeting(next, f64::NAN).is_err());
    }

    #[test]
    fn validity_examples() {
        let e = [1.0, 2.0, 0.5, 0.0];
        let o = [true, true, true, false];
        let p = [0.5, 0.25, 0.2, 0.1];
        let c = 0.3;
        let biased: Vec<f64> = e.iter().map(|e| e + c).collect();
        let state = ImputationState::new(biased, field(&p)).unwrap();
        // −c · Σ_O (1 − p)/p / |D|
        let expected = -c * (1.0 + 3.0 + 4.0) / 4.0;
        assert_relative_eq!(check_validity(&e, &o, &state), expected, max_relative = 1e-14);

        let ones = ImputationState::new(vec![7.0; 4], field(&[1.0; 4])).unwrap();
        assert_eq!(check_validity(&e, &o, &ones), 0.0);

        let (targeted, _) = target(&e, &o, state, ResidualMode::WithOmega).unwrap();
        let mean_abs = e.iter().map(|x| x.abs()).sum::<f64>() / 4.0;
        assert!(check_validity(&e, &o, &targeted).abs() <= 1e-10 * mean_abs);
    }

    #[test]
    fn targeted_imputation_examples() {
        let p = [0.5, 0.25, 0.8];
        let e_hat = vec![0.3, 0.6, 0.1];
        let state = ImputationState::new(e_hat.clone(), field(&p)).unwrap();
        assert_eq!(targeted_imputation(&state), e_hat);

        let e = [1.0, 0.2, 0.4];
        let o = [true, true, false];
        let (next, res) = target(&e, &o, state, ResidualMode::WithOmega).unwrap();
        let tilde = targeted_imputation(&next);
        for k in 0..3 {
            assert_relative_eq!(
                tilde[k],
                e_hat[k] + res.eta_star * (1.0 / p[k] - 1.0),
                max_relative = 1e-15
            );
        }
        let second = solve_eta(&e, &o, &next, ResidualMode::WithOmega).unwrap();
        assert!(second.eta_star.abs() <= 1e-10, "second eta {}", second.eta_star);
    }

    #[test]
    fn targeted_tdr_equals_eib() {
        let e = [0.9, 0.1, 0.0, 2.0, 0.7];
        let o = [true, true, false, true, false];
        let p = [0.3, 0.6, 0.1, 0.15, 0.5];
        let state = ImputationState::new(vec![0.5; 5], field(&p)).unwrap();
        let (state, res) = target(&e, &o, state, ResidualMode::WithOmega).unwrap();
        assert!(res.residual_correction.abs() < 1e-15);
        let tilde = targeted_imputation(&state);
        assert_relative_eq!(
            tdr_loss(&e, &o, &tilde, &p),
            eib_loss(&e, &o, &tilde),
            max_relative = 1e-12
        );
    }

    #[test]
    fn literal_mode_ignores_omega_in_the_fit() {
        let e = [1.0, 0.5];
        let o = [true, true];
        let p = field(&[0.5, 0.25]);
        let state = ImputationState::with_omega(vec![0.0, 0.0], vec![0.2, 0.1], p).unwrap();
        let lit = solve_eta(&e, &o, &state, ResidualMode::Literal).unwrap();
        let fixed = solve_eta(&e, &o, &state, ResidualMode::WithOmega).unwrap();
        // w = [1, 3]
        assert_relative_eq!(lit.eta_star, (1.0 + 1.5) / 10.0);
        assert_relative_eq!(fixed.eta_star, (0.8 + 3.0 * 0.4) / 10.0);
        let after = apply_targeting(state, lit.eta_star).unwrap();
        assert_relative_eq!(
            check_validity(&e, &o, &after),
            lit.residual_correction,
            max_relative = 1e-12
        );
    }
}
