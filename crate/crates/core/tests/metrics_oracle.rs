use patchcast::eval::{nrmse, wape};
use proptest::prelude::*;

/// Direct summation with explicit loops, written independently of the crate.
fn oracle(y: &[f64], yhat: &[f64]) -> (f64, f64) {
    let h = y.len() as f64;
    let mut sq = 0.0;
    let mut abs_err = 0.0;
    let mut abs_y = 0.0;
    for i in 0..y.len() {
        let e = y[i] - yhat[i];
        sq += e * e;
        abs_err += if e < 0.0 { -e } else { e };
        abs_y += if y[i] < 0.0 { -y[i] } else { y[i] };
    }
    let denom = abs_y / h;
    ((sq / h).sqrt() / denom, (abs_err / h) / denom)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=8).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0f64..100.0, n).prop_filter("non-zero actuals", |y| y.iter().any(|v| v.abs() > 1e-3)),
            prop::collection::vec(-100.0f64..100.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_brute_force((y, yhat) in pair()) {
        let (n, w) = oracle(&y, &yhat);
        prop_assert!((nrmse(&y, &yhat).unwrap() - n).abs() <= 1e-9 * n.max(1.0));
        prop_assert!((wape(&y, &yhat).unwrap() - w).abs() <= 1e-9 * w.max(1.0));
    }

    #[test]
    fn wape_never_exceeds_nrmse((y, yhat) in pair()) {
        prop_assert!(wape(&y, &yhat).unwrap() <= nrmse(&y, &yhat).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn homogeneous_in_scale((y, yhat) in pair(), c in 1e-3f64..1e3) {
        let cy: Vec<f64> = y.iter().map(|v| c * v).collect();
        let cyh: Vec<f64> = yhat.iter().map(|v| c * v).collect();
        let (a, b) = (nrmse(&y, &yhat).unwrap(), nrmse(&cy, &cyh).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        let (a, b) = (wape(&y, &yhat).unwrap(), wape(&cy, &cyh).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }
}
