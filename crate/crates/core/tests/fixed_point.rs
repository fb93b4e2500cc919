//! Fixed-point solver against an independent dense oracle.
//!
//! The oracle enumerates every assignment of `min(x_i, y_i)` to one of its
//! arguments, solves the resulting linear system with LU, and keeps the
//! solutions that are non-negative and consistent with their assignment.

use lob_fluid::fluid::find_fixed_point_by_integration;
use lob_fluid::{solve_fixed_point, FluidState, ModelParams, Regime};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn linear_domain_oracle(p: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let n = p.n;
    let a = p.alpha_q + p.alpha_m;
    let mut found: Vec<DVector<f64>> = Vec::new();
    for mask in 0u32..(1 << n) {
        let seller_min = |i: usize| mask & (1 << i) != 0;
        let mut m = DMatrix::<f64>::zeros(2 * n, 2 * n);
        let mut rhs = DVector::<f64>::zeros(2 * n);
        for i in 0..n {
            let min_col = if seller_min(i) { n + i } else { i };
            m[(i, i)] += a;
            m[(i, min_col)] += p.gamma;
            if i > 0 {
                m[(i, i - 1)] -= p.alpha_m;
            } else {
                rhs[i] = p.lambda_b;
            }
            let r = n + i;
            m[(r, n + i)] += a;
            m[(r, min_col)] += p.gamma;
            if i + 1 < n {
                m[(r, n + i + 1)] -= p.alpha_m;
            } else {
                rhs[r] = p.lambda_s;
            }
        }
        let Some(z) = m.lu().solve(&rhs) else { continue };
        let eps = 1e-12 * (1.0 + z.amax());
        let consistent = (0..n).all(|i| {
            let (x, y) = (z[i], z[n + i]);
            x >= -eps && y >= -eps && if seller_min(i) { y <= x + eps } else { x <= y + eps }
        });
        if consistent {
            found.push(z);
        }
    }
    assert!(!found.is_empty(), "no consistent linear domain for {p:?}");
    for z in &found[1..] {
        assert!((z - &found[0]).amax() < 1e-9, "distinct solutions for {p:?}");
    }
    let z = &found[0];
    (z.rows(0, n).iter().copied().collect(), z.rows(n, n).iter().copied().collect())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

fn rate() -> impl Strategy<Value = f64> {
    (-1.0f64..1.0).prop_map(|e| 10f64.powf(e))
}

fn params_strategy(max_n: usize) -> impl Strategy<Value = ModelParams> {
    (1..=max_n, rate(), rate(), rate(), rate(), rate()).prop_map(|(n, g, aq, am, lb, ls)| {
        ModelParams::new(n, g, aq, am, lb, ls).unwrap()
    })
}

#[test]
fn two_level_symmetric_book() {
    let p = ModelParams::new(2, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
    let (ox, oy) = linear_domain_oracle(&p);
    assert!(max_diff(&ox, &[3.0 / 7.0, 1.0 / 7.0]) < 1e-14);
    assert!(max_diff(&oy, &[1.0 / 7.0, 3.0 / 7.0]) < 1e-14);

    let fp = solve_fixed_point(&p, 1e-12, 1_000_000).unwrap();
    assert!(max_diff(&fp.x_star, &ox) < 1e-8);
    assert!(max_diff(&fp.y_star, &oy) < 1e-8);
    assert_eq!(fp.regime, Regime::Crossing(1));

    let v0 = FluidState::new(vec![1.0, 2.0], vec![0.5, 0.1]).unwrap();
    let by_ode = find_fixed_point_by_integration(&p, &v0, 1e-10, 1e-3, 1e4).unwrap();
    assert!(max_diff(&by_ode.x, &ox) < 1e-8);
    assert!(max_diff(&by_ode.y, &oy) < 1e-8);
}

#[test]
fn scalar_sets_match_oracle() {
    let asym = ModelParams::new(1, 1.0, 0.5, 0.5, 2.0, 1.0).unwrap();
    assert_eq!(linear_domain_oracle(&asym), (vec![1.5], vec![0.5]));
    let sym = ModelParams::new(1, 1.0, 0.5, 0.5, 1.0, 1.0).unwrap();
    let (x, y) = linear_domain_oracle(&sym);
    assert!((x[0] - 0.5).abs() < 1e-15 && (y[0] - 0.5).abs() < 1e-15);
}

#[test]
fn mirrored_scalar_set_is_sell_dominant() {
    let p = ModelParams::new(1, 1.0, 0.5, 0.5, 2.0, 1.0).unwrap().mirrored();
    let fp = solve_fixed_point(&p, 1e-12, 1_000_000).unwrap();
    assert_eq!(fp.regime, Regime::AllSellDominant);
    assert!((fp.x_star[0] - 0.5).abs() < 1e-12);
    assert!((fp.y_star[0] - 1.5).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn recursion_matches_linear_domains(p in params_strategy(6)) {
        let fp = solve_fixed_point(&p, 1e-12, 1_000_000).unwrap();
        let (ox, oy) = linear_domain_oracle(&p);
        prop_assert!(max_diff(&fp.x_star, &ox) < 1e-8, "{:?} vs {:?}", fp.x_star, ox);
        prop_assert!(max_diff(&fp.y_star, &oy) < 1e-8, "{:?} vs {:?}", fp.y_star, oy);
    }

    #[test]
    fn buyer_seller_mirror(p in params_strategy(8)) {
        let fp = solve_fixed_point(&p, 1e-12, 1_000_000).unwrap();
        let mirror = solve_fixed_point(&p.mirrored(), 1e-12, 1_000_000).unwrap();
        let rev = |v: &[f64]| v.iter().rev().copied().collect::<Vec<_>>();
        prop_assert!(max_diff(&mirror.x_star, &rev(&fp.y_star)) < 1e-10);
        prop_assert!(max_diff(&mirror.y_star, &rev(&fp.x_star)) < 1e-10);
    }
}
