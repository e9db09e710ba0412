use proptest::prelude::*;

use tdr_core::domain::PropensityField;
use tdr_core::estimators::{
    correction_term, dr_loss, eib_loss, ideal_loss, ips_loss, naive_loss, snips_loss, tdr_loss,
};
use tdr_core::targeting::{check_validity, target, targeted_imputation, ImputationState, ResidualMode};

fn world() -> impl Strategy<Value = (Vec<bool>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(0.0f64..4.0, n),
            prop::collection::vec(0.0f64..4.0, n),
            prop::collection::vec(0.02f64..1.0, n),
        )
            .prop_map(|(mut o, e, e_hat, p)| {
                o[0] = true;
                (o, e, e_hat, p)
            })
    })
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn dr_is_eib_plus_correction((o, e, e_hat, p) in world()) {
        let dr = dr_loss(&e, &o, &e_hat, &p);
        let rhs = eib_loss(&e, &o, &e_hat) + correction_term(&e, &o, &e_hat, &p);
        prop_assert!(close(dr, rhs, 1e-12));
    }

    #[test]
    fn full_exposure_collapses_to_ideal((_, e, e_hat, _) in world()) {
        let n = e.len();
        let o = vec![true; n];
        let p = vec![1.0; n];
        let ideal = ideal_loss(&e);
        for v in [
            naive_loss(&e, &o).unwrap(),
            ips_loss(&e, &o, &p),
            snips_loss(&e, &o, &p).unwrap(),
            eib_loss(&e, &o, &e_hat),
            dr_loss(&e, &o, &e_hat, &p),
        ] {
            prop_assert!(close(v, ideal, 1e-12));
        }
    }

    #[test]
    fn snips_is_invariant_to_propensity_scale((o, e, _, p) in world(), c in 0.1f64..1.0) {
        let scaled: Vec<f64> = p.iter().map(|x| x * c).collect();
        let a = snips_loss(&e, &o, &p).unwrap();
        let b = snips_loss(&e, &o, &scaled).unwrap();
        prop_assert!(close(a, b, 1e-12));
    }

    #[test]
    fn perfect_imputation_makes_dr_ideal((o, e, _, p) in world()) {
        prop_assert!(close(dr_loss(&e, &o, &e, &p), ideal_loss(&e), 1e-12));
    }

    #[test]
    fn targeted_dr_is_targeted_eib((o, e, e_hat, p) in world()) {
        let state = ImputationState::new(e_hat, PropensityField::unclipped(p.clone()).unwrap()).unwrap();
        let (state, _) = target(&e, &o, state, ResidualMode::WithOmega).unwrap();
        let mean_abs = e.iter().map(|x| x.abs()).sum::<f64>() / e.len() as f64;
        prop_assert!(check_validity(&e, &o, &state).abs() <= 1e-9 * mean_abs.max(1e-12));
        let et = targeted_imputation(&state);
        prop_assert!(close(tdr_loss(&e, &o, &et, &p), eib_loss(&e, &o, &et), 1e-12));
    }

    #[test]
    fn second_targeting_cycle_is_a_no_op((o, e, e_hat, p) in world()) {
        let state = ImputationState::new(e_hat, PropensityField::unclipped(p).unwrap()).unwrap();
        let (state, _) = target(&e, &o, state, ResidualMode::WithOmega).unwrap();
        let before = targeted_imputation(&state);
        let (state, r) = target(&e, &o, state, ResidualMode::WithOmega).unwrap();
        prop_assert_eq!(r.eta_star, 0.0);
        prop_assert_eq!(targeted_imputation(&state), before);
    }
}
