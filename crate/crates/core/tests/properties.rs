//! Property-based invariants across modules.

use std::collections::HashSet;
use std::f64::consts::PI;

use proptest::prelude::*;
use recurflow::control::{plan_reach, step1_ball_radius, verify_schedule, ControlSchedule, ReachSpec, ReachStatus};
use recurflow::corrector::{measure_ball, PsiParams};
use recurflow::dynamics::{flow_map, CorrectedField, FlowConfig};
use recurflow::fields::{eval_field, Field, VectorField};
use recurflow::recurrence::{poincare_discrete_check, FiniteMap};

fn builtin(k: usize) -> VectorField {
    match k {
        0 => VectorField::shear_sin(),
        1 => VectorField::taylor_green(),
        _ => VectorField::Constant(vec![0.3, -1.1]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sum_is_pointwise_exact(a in 0usize..3, b in 0usize..3, x in -50.0f64..50.0, y in -50.0f64..50.0) {
        let (f, g) = (builtin(a), builtin(b));
        let s = VectorField::sum(vec![f.clone(), g.clone()]).unwrap();
        let (fv, gv, sv) = (eval_field(&f, &[x, y]).unwrap(), eval_field(&g, &[x, y]).unwrap(), eval_field(&s, &[x, y]).unwrap());
        prop_assert_eq!(sv[0], fv[0] + gv[0]);
        prop_assert_eq!(sv[1], fv[1] + gv[1]);
    }

    #[test]
    fn values_respect_sup_bound(k in 0usize..3, x in -1e3f64..1e3, y in -1e3f64..1e3) {
        let f = builtin(k);
        let v = eval_field(&f, &[x, y]).unwrap();
        prop_assert!(v[0].hypot(v[1]) <= f.sup_bound() * (1.0 + 1e-12));
    }

    #[test]
    fn constant_flow_is_exact(c1 in -2.0f64..2.0, c2 in -2.0f64..2.0, t in -5.0f64..5.0) {
        let f = VectorField::Constant(vec![c1, c2]);
        let x = flow_map(&f, &[0.5, -0.25], t, &FlowConfig::default()).unwrap();
        prop_assert!((x[0] - (0.5 + c1 * t)).abs() < 1e-12);
        prop_assert!((x[1] - (-0.25 + c2 * t)).abs() < 1e-12);
    }

    #[test]
    fn forward_then_backward_returns(x in -3.0f64..3.0, y in -3.0f64..3.0, t in 0.0f64..5.0) {
        let f = VectorField::taylor_green();
        let cfg = FlowConfig::default();
        let fwd = flow_map(&f, &[x, y], t, &cfg).unwrap();
        let back = flow_map(&f, &fwd, -t, &cfg).unwrap();
        prop_assert!((back[0] - x).hypot(back[1] - y) < 1e-8);
    }

    #[test]
    fn psi_gradient_matches_differences(p in 0.51f64..0.99, alpha in 0.2f64..5.0, x in -4.0f64..4.0, y in -4.0f64..4.0) {
        let psi = PsiParams::new(2, p, alpha).unwrap();
        let g = psi.grad(&[x, y]);
        let h = 1e-5;
        let fd0 = (psi.value(&[x + h, y]) - psi.value(&[x - h, y])) / (2.0 * h);
        let fd1 = (psi.value(&[x, y + h]) - psi.value(&[x, y - h])) / (2.0 * h);
        let scale = psi.value(&[0.0, 0.0]) / alpha;
        prop_assert!((g[0] - fd0).abs() < 1e-6 * scale && (g[1] - fd1).abs() < 1e-6 * scale);
    }

    #[test]
    fn ball_measure_matches_antiderivative(p in 0.51f64..0.99, alpha in 0.2f64..4.0, r in 0.0f64..50.0) {
        let psi = PsiParams::new(2, p, alpha).unwrap();
        let q = 1.0 - p;
        let want = PI / q * ((r * r + alpha * alpha).powf(q) - alpha.powf(2.0 * q));
        let got = measure_ball(&psi, r).unwrap();
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1e-300) + 1e-15);
    }

    #[test]
    fn step1_radius_formula(tau in 0.01f64..10.0, delta in 0.01f64..3.0, frac in 0.0f64..0.99) {
        let u = frac * delta;
        let r = step1_ball_radius(tau, delta, u).unwrap();
        prop_assert!((r - tau * (delta - u) / 2.0).abs() <= 1e-15 * r.max(1.0));
        prop_assert!(r > 0.0);
        prop_assert!(step1_ball_radius(tau, delta, delta).is_err());
    }

    #[test]
    fn schedule_breakpoints_increase(durs in prop::collection::vec((0.01f64..3.0, -1.0f64..1.0, -1.0f64..1.0), 1..12)) {
        let pieces: Vec<(f64, Vec<f64>)> = durs.iter().map(|(d, a, b)| (*d, vec![*a, *b])).collect();
        let s = ControlSchedule::from_pieces(&pieces);
        prop_assert!(s.breakpoints.windows(2).all(|w| w[1] > w[0]));
        let sup = pieces.iter().map(|(_, v)| v[0].hypot(v[1])).fold(0.0, f64::max);
        prop_assert!((s.sup_norm - sup).abs() <= 1e-15 * sup.max(1e-300));
    }

    #[test]
    fn permutation_returns_match_brute_force(n in 1usize..300, seed in 0u64..1000, picks in prop::collection::vec(0usize..10_000, 1..8)) {
        let map = FiniteMap::random_permutation(n, seed).unwrap();
        let u: Vec<usize> = picks.iter().map(|p| p % n).collect();
        let report = poincare_discrete_check(&map, &u, 50).unwrap();
        let uset: HashSet<usize> = u.iter().copied().collect();
        let m = map.as_slice();
        let mut cur = u.clone();
        let mut want = Vec::new();
        for k in 1..=50 {
            cur.iter_mut().for_each(|s| *s = m[*s]);
            if cur.iter().any(|s| uset.contains(s)) {
                want.push(k);
            }
        }
        prop_assert_eq!(report.return_events, want);
        prop_assert!(report.orbit_growth.windows(2).all(|w| w[1] >= w[0]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pure_control_plans_close(x in -2.0f64..2.0, y in -2.0f64..2.0, tol in 0.01f64..0.2) {
        let f = CorrectedField::uncorrected(VectorField::zero(2), "zero");
        let spec = ReachSpec::new(vec![0.0, 0.0], vec![x, y], 0.3, tol);
        let r = plan_reach(&f, &spec).unwrap();
        prop_assert_eq!(r.status, ReachStatus::Reached);
        let v = verify_schedule(&f, &r.schedule, &spec).unwrap();
        prop_assert!(v.pass);
        prop_assert!(v.composed_sup_norm < spec.delta);
    }
}
