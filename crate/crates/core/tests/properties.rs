use nalgebra::DVector;
use proptest::prelude::*;

use freetime_qrnet::ddp::{rescale_guess, DiscreteTrajectory};
use freetime_qrnet::harness::config::RunConfig;
use freetime_qrnet::harness::metrics::{cost_ratio_cdf, evaluate_policy, RatioCaps};
use freetime_qrnet::lqr::{lookup_gains, BlendSchedule, Saturation};
use freetime_qrnet::policy::{Dataset, Record};
use freetime_qrnet::sampling::{derive_seed, resample_id, root_of};

fn ramp(n: usize, t_f: f64, slope: f64) -> DiscreteTrajectory {
    let dt = t_f / n as f64;
    DiscreteTrajectory {
        states: (0..=n).map(|k| DVector::from_vec(vec![slope * k as f64 * dt])).collect(),
        controls: (0..n).map(|_| DVector::from_vec(vec![slope])).collect(),
        dt,
    }
}

proptest! {
    #[test]
    fn rescale_to_same_grid_is_identity(n in 1usize..200, t_f in 0.05f64..3.0, slope in -5.0f64..5.0) {
        let t = ramp(n, t_f, slope);
        prop_assert_eq!(rescale_guess(&t, t_f, n), t);
    }

    #[test]
    fn rescale_of_a_constant_is_constant(n in 1usize..100, m in 1usize..300, t_f in 0.05f64..3.0, new_tf in 0.05f64..3.0, c in -10.0f64..10.0) {
        let x = DVector::from_vec(vec![c, -c]);
        let u = DVector::from_vec(vec![c]);
        let r = rescale_guess(&DiscreteTrajectory::constant(n, t_f, &x, &u), new_tf, m);
        prop_assert_eq!(r.n_steps(), m);
        prop_assert!(r.states.iter().all(|s| s == &x));
        prop_assert!(r.controls.iter().all(|v| v == &u));
    }

    #[test]
    fn rescaled_ramp_stays_on_the_line(n in 2usize..100, m in 1usize..300, slope in -5.0f64..5.0) {
        // Time is stretched with the horizon, so knot i sits at fraction i/m.
        let t = ramp(n, 1.0, slope);
        let r = rescale_guess(&t, 2.0, m);
        for (i, s) in r.states.iter().enumerate() {
            let expect = slope * i as f64 / m as f64;
            prop_assert!((s[0] - expect).abs() <= 1e-12 * (1.0 + slope.abs()));
        }
    }

    #[test]
    fn saturation_is_bounded_monotone_and_fixes_the_goal(
        lo in -3000.0f64..-10.0, hi in 10.0f64..3000.0, mid in -9.0f64..9.0, a in -1e4f64..1e4, b in -1e4f64..1e4
    ) {
        let s = Saturation::new(lo, hi, &DVector::from_vec(vec![mid])).unwrap();
        prop_assert_eq!(s.apply_scalar(0, mid), mid);
        let (sa, sb) = (s.apply_scalar(0, a), s.apply_scalar(0, b));
        prop_assert!(lo <= sa && sa <= hi && lo <= sb && sb <= hi);
        if a <= b {
            prop_assert!(sa <= sb);
        }
        prop_assert!((s.derivative_scalar(0, mid) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cdf_is_a_distribution(ratios in prop::collection::vec(1.0f64..10.0, 1..200)) {
        let c = cost_ratio_cdf(&ratios).unwrap();
        prop_assert_eq!(c.last().unwrap().1, 1.0);
        for w in c.windows(2) {
            prop_assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
        }
        for &(r, f) in &c {
            let below = ratios.iter().filter(|&&x| x <= r).count() as f64 / ratios.len() as f64;
            prop_assert_eq!(f, below);
        }
    }

    #[test]
    fn dataset_ndjson_round_trips(
        rows in prop::collection::vec((any::<u64>(), 0usize..5000, 0.0f64..5.0, prop::collection::vec(-1e3f64..1e3, 4), prop::collection::vec(-1e3f64..1e3, 2), 0usize..7), 0..40)
    ) {
        let data = Dataset {
            records: rows
                .into_iter()
                .map(|(traj_id, knot, t_remaining, x, u, iteration)| Record { traj_id, knot, t_remaining, x, u, iteration })
                .collect(),
        };
        let mut buf = Vec::new();
        data.write_ndjson(&mut buf).unwrap();
        prop_assert_eq!(Dataset::read_ndjson(&buf[..]).unwrap(), data);
    }

    #[test]
    fn resample_ids_decode_to_their_root(k in 1usize..1000, root in 0u64..(1 << 32), j in 0usize..256) {
        prop_assert_eq!(root_of(resample_id(k, root, j)), root);
        prop_assert_eq!(root_of(root), root);
    }

    #[test]
    fn derived_seeds_do_not_collide_across_tags(base in any::<u64>(), tag in 0u64..1000) {
        prop_assert_ne!(derive_seed(base, tag, 0), derive_seed(base, tag + 1, 0));
        prop_assert_ne!(derive_seed(base, tag, 0), derive_seed(base, tag, 1));
    }

    #[test]
    fn blend_weight_is_a_monotone_ramp(t in 0.0f64..2.0, dt in 0.0f64..0.5) {
        let b = BlendSchedule::default();
        let (w0, w1) = (b.weight(t), b.weight(t + dt));
        prop_assert!((0.0..=1.0).contains(&w0) && w1 <= w0 + 1e-15);
    }
}

#[test]
fn gains_vanish_far_from_the_goal() {
    let cfg = RunConfig::benchmark();
    let branch = cfg.lqr_branch().unwrap();
    let (k, big_k) = lookup_gains(&branch.riccati, &branch.blend, 10.0);
    assert!(k.amax() == 0.0 && big_k.amax() < 1e-9);
}

#[test]
fn ratios_ignore_test_state_order() {
    use freetime_qrnet::policy::ZeroControl;
    use freetime_qrnet::sampling::IvpSettings;
    let cfg = RunConfig::benchmark();
    let cost = cfg.cost_spec().unwrap();
    let mut states: Vec<_> = (0..4).map(|i| freetime_qrnet::freetime::rest_state(&[0.1 * i as f64, 1.0])).collect();
    states.push(cost.x_f.clone());
    let ivp = IvpSettings { dt_sim: 5e-3, horizon: 0.3, ..Default::default() };
    let costs = vec![1.0, 2.0, 3.0, 4.0, 5.0];
    let zero = ZeroControl { control_dim: 2 };
    let a = evaluate_policy(&cfg.model, &cost, &zero, &states, &ivp, &costs, RatioCaps::default()).unwrap();
    states.reverse();
    let rev: Vec<f64> = costs.iter().rev().copied().collect();
    let b = evaluate_policy(&cfg.model, &cost, &zero, &states, &ivp, &rev, RatioCaps::default()).unwrap();
    let mut ra = a.ratios.clone();
    ra.reverse();
    assert_eq!(ra, b.ratios);
    assert_eq!(a.mean_ratio, b.mean_ratio);
}
