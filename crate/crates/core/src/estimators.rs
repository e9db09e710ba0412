//! Estimators of the ideal loss `|D|⁻¹ Σ_D e_{u,i}` from partially observed
//! errors.
//!
//! All kernels are loss-agnostic: they take per-pair prediction errors `e`
//! (read only where `o` is set, unless the estimator is the ideal loss), an
//! imputation `e_hat` defined on every pair, the exposure mask `o` and the
//! propensities `p_hat`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Estimator {
    Naive,
    Eib,
    Ips,
    Snips,
    Dr,
    Tdr,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [
        Estimator::Naive,
        Estimator::Eib,
        Estimator::Ips,
        Estimator::Snips,
        Estimator::Dr,
        Estimator::Tdr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Naive => "Naive",
            Estimator::Eib => "EIB",
            Estimator::Ips => "IPS",
            Estimator::Snips => "SNIPS",
            Estimator::Dr => "DR",
            Estimator::Tdr => "TDR",
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Borrowed view over the per-pair inputs of the estimators.
///
/// `e_tilde` is the targeted imputation used by TDR; when absent, TDR falls
/// back to `e_hat` (η = 0).
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub e: &'a [f64],
    pub e_hat: &'a [f64],
    pub e_tilde: Option<&'a [f64]>,
    pub o: &'a [bool],
    pub p_hat: &'a [f64],
}

impl<'a> LossInputs<'a> {
    pub fn validate(&self) -> Result<()> {
        let n = self.o.len();
        if n == 0 {
            return Err(Error::empty("estimator inputs"));
        }
        let lens = [
            self.e.len(),
            self.e_hat.len(),
            self.p_hat.len(),
            self.e_tilde.map_or(n, <[f64]>::len),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::domain("estimator inputs must share length |D|"));
        }
        for k in 0..n {
            if !self.e_hat[k].is_finite() {
                return Err(Error::NonFinite(format!("e_hat at pair {k}")));
            }
            if self.o[k] && !(self.e[k].is_finite() && self.p_hat[k] > 0.0) {
                return Err(Error::domain(format!(
                    "exposed pair {k} needs finite e and positive p_hat"
                )));
            }
        }
        Ok(())
    }

    pub fn estimate(&self, which: Estimator) -> Result<f64> {
        match which {
            Estimator::Naive => naive_loss(self.e, self.o),
            Estimator::Eib => Ok(eib_loss(self.e, self.o, self.e_hat)),
            Estimator::Ips => Ok(ips_loss(self.e, self.o, self.p_hat)),
            Estimator::Snips => snips_loss(self.e, self.o, self.p_hat),
            Estimator::Dr => Ok(dr_loss(self.e, self.o, self.e_hat, self.p_hat)),
            Estimator::Tdr => Ok(tdr_loss(self.e, self.o, self.e_tilde.unwrap_or(self.e_hat), self.p_hat)),
        }
    }

    /// One report per requested estimator. `ideal` is attached when the full
    /// error vector is known (semi-synthetic mode).
    pub fn reports(&self, which: &[Estimator], ideal: Option<f64>) -> Result<Vec<EstimateReport>> {
        which
            .iter()
            .map(|&est| {
                let loss = self.estimate(est)?;
                EstimateReport::new(est, loss, ideal)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: Estimator,
    pub loss: f64,
    pub ideal: Option<f64>,
    pub relative_error: Option<f64>,
}

impl EstimateReport {
    pub fn new(estimator: Estimator, loss: f64, ideal: Option<f64>) -> Result<Self> {
        let relative_error = match ideal {
            Some(ideal) if ideal > 0.0 => Some(relative_error(loss, ideal)?),
            _ => None,
        };
        Ok(Self {
            estimator,
            loss,
            ideal,
            relative_error,
        })
    }
}

pub fn ideal_loss(e: &[f64]) -> f64 {
    e.iter().sum::<f64>() / e.len() as f64
}

/// Mean error over exposed pairs.
pub fn naive_loss(e: &[f64], o: &[bool]) -> Result<f64> {
    let (sum, count) = e
        .iter()
        .zip(o)
        .filter(|(_, &o)| o)
        .fold((0.0, 0usize), |(s, c), (e, _)| (s + e, c + 1));
    if count == 0 {
        return Err(Error::empty("naive loss needs at least one exposed pair"));
    }
    Ok(sum / count as f64)
}

pub fn ips_loss(e: &[f64], o: &[bool], p_hat: &[f64]) -> f64 {
    let mut sum = 0.0;
    for k in 0..o.len() {
        if o[k] {
            sum += e[k] / p_hat[k];
        }
    }
    sum / o.len() as f64
}

/// Self-normalized IPS: `Σ o e/p̂ / Σ o/p̂`.
pub fn snips_loss(e: &[f64], o: &[bool], p_hat: &[f64]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..o.len() {
        if o[k] {
            num += e[k] / p_hat[k];
            den += 1.0 / p_hat[k];
        }
    }
    if !(den > 0.0) {
        return Err(Error::empty("SNIPS normalizer is zero"));
    }
    Ok(num / den)
}

pub fn eib_loss(e: &[f64], o: &[bool], e_hat: &[f64]) -> f64 {
    let mut sum = 0.0;
    for k in 0..o.len() {
        sum += if o[k] { e[k] } else { e_hat[k] };
    }
    sum / o.len() as f64
}

pub fn dr_loss(e: &[f64], o: &[bool], e_hat: &[f64], p_hat: &[f64]) -> f64 {
    let mut sum = 0.0;
    for k in 0..o.len() {
        sum += e_hat[k];
        if o[k] {
            sum += (e[k] - e_hat[k]) / p_hat[k];
        }
    }
    sum / o.len() as f64
}

/// `|D|⁻¹ Σ o (e − ê)(1 − p̂)/p̂`, the amount DR adds on top of EIB.
pub fn correction_term(e: &[f64], o: &[bool], e_hat: &[f64], p_hat: &[f64]) -> f64 {
    let mut sum = 0.0;
    for k in 0..o.len() {
        if o[k] {
            sum += (e[k] - e_hat[k]) * (1.0 - p_hat[k]) / p_hat[k];
        }
    }
    sum / o.len() as f64
}

/// DR with the targeted imputation `e_tilde` in place of `ê`.
pub fn tdr_loss(e: &[f64], o: &[bool], e_tilde: &[f64], p_hat: &[f64]) -> f64 {
    dr_loss(e, o, e_tilde, p_hat)
}

pub fn relative_error(est: f64, ideal: f64) -> Result<f64> {
    if !(ideal > 0.0) {
        return Err(Error::domain(format!("relative error needs ideal > 0, got {ideal}")));
    }
    Ok((ideal - est).abs() / ideal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const X: f64 = f64::NAN; // unobserved error; must never be read

    #[test]
    fn ideal_examples() {
        assert_eq!(ideal_loss(&[1.0, 3.0]), 2.0);
        assert_eq!(ideal_loss(&[0.0; 5]), 0.0);
    }

    #[test]
    fn naive_examples() {
        let e = [1.0, 2.0, 6.0];
        assert_eq!(naive_loss(&e, &[true; 3]).unwrap(), ideal_loss(&e));
        assert_eq!(naive_loss(&[5.0, 100.0], &[true, false]).unwrap(), 5.0);
        assert!(matches!(naive_loss(&[1.0], &[false]), Err(Error::Empty(_))));
    }

    #[test]
    fn naive_underestimates_when_good_pairs_are_overexposed() {
        // Two pairs: a well-predicted popular pair (small error, p = 0.9) and
        // a badly predicted niche pair (large error, p = 0.1). Enumerate all
        // four exposure patterns and compare the expected naive loss on
        // non-empty patterns with the ideal loss.
        let e = [0.1, 2.0];
        let p = [0.9, 0.1];
        let ideal = ideal_loss(&e);
        let mut num = 0.0;
        let mut mass = 0.0;
        for pattern in 1..4u8 {
            let o = [pattern & 1 == 1, pattern & 2 == 2];
            let prob: f64 = (0..2).map(|k| if o[k] { p[k] } else { 1.0 - p[k] }).product();
            num += prob * naive_loss(&e, &o).unwrap();
            mass += prob;
        }
        assert!(num / mass < ideal);
    }

    #[test]
    fn ips_examples() {
        assert_eq!(ips_loss(&[4.0, X], &[true, false], &[0.5, 0.5]), 4.0);
        let e = [1.0, 2.0, 3.0];
        assert_eq!(ips_loss(&e, &[true; 3], &[1.0; 3]), ideal_loss(&e));
    }

    #[test]
    fn snips_examples() {
        let e = [1.0, 4.0, X, 7.0];
        let o = [true, true, false, true];
        let constant = [0.3; 4];
        assert_relative_eq!(snips_loss(&e, &o, &constant).unwrap(), naive_loss(&e, &o).unwrap());

        let e = [1.0, 2.0, 3.0];
        let p = [0.5, 0.25, 1.0];
        let expected = (1.0 * 2.0 + 2.0 * 4.0 + 3.0) / (2.0 + 4.0 + 1.0);
        assert_relative_eq!(snips_loss(&e, &[true; 3], &p).unwrap(), expected);
        let halved: Vec<f64> = p.iter().map(|p| p * 0.5).collect();
        assert_relative_eq!(
            snips_loss(&e, &[true; 3], &halved).unwrap(),
            expected,
            max_relative = 1e-15
        );
        assert!(snips_loss(&e, &[false; 3], &p).is_err());
    }

    #[test]
    fn eib_examples() {
        let e = [1.0, 5.0];
        assert_eq!(eib_loss(&e, &[true, false], &e), ideal_loss(&e));
        assert_eq!(eib_loss(&e, &[true, true], &[100.0, -3.0]), ideal_loss(&e));
        assert_eq!(eib_loss(&[2.0, X], &[true, false], &[9.0, 4.0]), 3.0);
    }

    #[test]
    fn dr_examples() {
        let e = [1.0, 5.0, 2.5];
        assert_relative_eq!(dr_loss(&e, &[true, false, true], &e, &[0.2, 0.7, 0.9]), ideal_loss(&e));
        assert_eq!(dr_loss(&[2.0, X], &[true, false], &[1.0, 4.0], &[0.5, 0.5]), 3.5);
    }

    #[test]
    fn correction_examples() {
        let e = [1.0, 5.0];
        let o = [true, false];
        assert_eq!(correction_term(&e, &o, &[1.0, 9.0], &[0.3, 0.3]), 0.0);
        assert_eq!(correction_term(&e, &o, &[4.0, 9.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn tdr_matches_dr_without_targeting() {
        let e = [2.0, X, 0.5];
        let o = [true, false, true];
        let e_hat = [1.0, 4.0, 0.2];
        let p = [0.5, 0.5, 0.25];
        assert_eq!(tdr_loss(&e, &o, &e_hat, &p), dr_loss(&e, &o, &e_hat, &p));
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(2.0, 2.0).unwrap(), 0.0);
        assert_eq!(relative_error(0.0, 2.0).unwrap(), 1.0);
        assert!(relative_error(1.0, 0.0).is_err());
        assert!(relative_error(1.0, -1.0).is_err());
    }

    #[test]
    fn reports_attach_relative_error() {
        let e = [1.0, 3.0];
        let inputs = LossInputs {
            e: &e,
            e_hat: &[1.0, 1.0],
            e_tilde: None,
            o: &[true, false],
            p_hat: &[0.5, 0.5],
        };
        inputs.validate().unwrap();
        let reports = inputs.reports(&Estimator::ALL, Some(ideal_loss(&e))).unwrap();
        assert_eq!(reports.len(), 6);
        let naive = &reports[0];
        assert_eq!(naive.estimator, Estimator::Naive);
        assert_eq!(naive.relative_error, Some(0.5));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn world() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>, Vec<f64>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..5.0, n),
                prop::collection::vec(-2.0f64..5.0, n),
                prop::collection::vec(any::<bool>(), n),
                prop::collection::vec(0.01f64..=1.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn dr_decomposes_into_eib_plus_correction((e, e_hat, o, p) in world()) {
            let dr = dr_loss(&e, &o, &e_hat, &p);
            let parts = eib_loss(&e, &o, &e_hat) + correction_term(&e, &o, &e_hat, &p);
            let scale = dr.abs().max(parts.abs()).max(1e-300);
            // Summands are reordered between the two routes, so the gap is
            // bounded by rounding of the absolute terms rather than |dr|.
            let mag: f64 = e_hat.iter().map(|x| x.abs()).sum::<f64>()
                + e.iter().zip(&o).zip(&p).filter(|((_, o), _)| **o)
                    .map(|((e, _), p)| e.abs() / p).sum::<f64>();
            let mag = mag / o.len() as f64 + scale;
            prop_assert!((dr - parts).abs() <= 1e-12 * mag, "dr {dr} parts {parts}");
        }

        #[test]
        fn full_exposure_makes_every_estimator_ideal(e in prop::collection::vec(0.0f64..5.0, 1..50)) {
            let n = e.len();
            let o = vec![true; n];
            let ones = vec![1.0; n];
            let e_hat = vec![0.7; n];
            let inputs = LossInputs { e: &e, e_hat: &e_hat, e_tilde: None, o: &o, p_hat: &ones };
            let ideal = ideal_loss(&e);
            for est in Estimator::ALL {
                let v = inputs.estimate(est).unwrap();
                prop_assert!((v - ideal).abs() <= 1e-12 * ideal.max(1.0), "{est}: {v} vs {ideal}");
            }
        }
    }
}
