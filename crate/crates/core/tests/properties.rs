use gaintune::controller::{control_law, desired_attitude, ControllerLimits};
use gaintune::dynamics::{step_dynamics, ControlInput, Disturbance, Measurement, QuadParams, RigidState};
use gaintune::gains::{nominal_gains, split, GainBounds, ObserverGains, GAIN_DIM};
use gaintune::gradients::GainTrajectory;
use gaintune::loss::LossSpec;
use gaintune::observer::{observer_step, ObserverState};
use gaintune::policy::{FeatureScales, Policy};
use gaintune::reference::{sample_tasks, solve_min_snap, RefPoint, TaskDistribution, Waypoint};
use gaintune::rollout::{rollout_closed_loop, GainSource, SimConfig};
use gaintune::so3::{exp_so3, orthonormality_defect};
use nalgebra::Vector3;
use proptest::prelude::*;

fn vec3(s: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-s..s, -s..s, -s..s).prop_map(|(a, b, c)| Vector3::new(a, b, c))
}

fn state() -> impl Strategy<Value = RigidState> {
    (vec3(10.0), vec3(5.0), vec3(3.0), vec3(20.0)).prop_map(|(p, v, phi, omega)| RigidState {
        p,
        v,
        r: exp_so3(&phi),
        omega,
    })
}

fn input() -> impl Strategy<Value = ControlInput> {
    (0.0..60.0, vec3(5.0)).prop_map(|(thrust, torque)| ControlInput { thrust, torque })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn plant_step_keeps_rotation_orthonormal(x in state(), u in input(), f in vec3(5.0), t in vec3(2.0)) {
        let d = Disturbance { force: f, torque: t };
        let next = step_dynamics(&x, &u, &d, &QuadParams::default());
        prop_assert!(orthonormality_defect(&next.r) < 1e-9);
    }

    #[test]
    fn torque_free_momentum_change_is_second_order(x in state()) {
        let p = QuadParams::default();
        let j = p.inertia_matrix();
        let u = ControlInput { thrust: 0.0, torque: Vector3::zeros() };
        let next = step_dynamics(&x, &u, &Disturbance::zero(), &p);
        let h0 = j * x.omega;
        let drift = ((j * next.omega).norm() - h0.norm()).abs();
        // ‖h − dt·Ω×h‖ − ‖h‖ with Ω×h ⟂ h.
        let bound = p.dt * p.dt * x.omega.cross(&h0).norm_squared() / (2.0 * h0.norm().max(1e-12));
        prop_assert!(drift <= bound + 1e-12, "drift {drift} bound {bound}");
    }

    #[test]
    fn min_snap_interpolates_and_is_c4(
        pts in prop::collection::vec(vec3(5.0), 3..7),
        gaps in prop::collection::vec(0.5f64..3.0, 6),
    ) {
        let mut t = 0.0;
        let wps: Vec<Waypoint> = pts.iter().enumerate().map(|(i, p)| {
            if i > 0 { t += gaps[i - 1]; }
            Waypoint::new(t, *p)
        }).collect();
        let segs = solve_min_snap(&wps).unwrap();
        for (i, s) in segs.iter().enumerate() {
            prop_assert!((s.position(0, 0.0) - wps[i].position).norm() < 1e-9);
            prop_assert!((s.position(0, s.duration) - wps[i + 1].position).norm() < 1e-9);
        }
        for pair in segs.windows(2) {
            for q in 0..=4 {
                let jump = (pair[0].position(q, pair[0].duration) - pair[1].position(q, 0.0)).norm();
                prop_assert!(jump < 1e-8, "derivative {q} jumps by {jump}");
            }
        }
    }

    #[test]
    fn larger_kp_tilts_harder_against_position_error(ex in 0.05f64..3.0, kp in 0.5f64..20.0, dk in 0.01f64..4.0) {
        let p = QuadParams::default();
        let xhat = ObserverState::from_state(&RigidState::at_rest(Vector3::new(ex, 0.0, 0.0)));
        let r = RefPoint::default();
        let mut g = nominal_gains();
        g[0] = kp;
        let (lo, _) = split(&g);
        g[0] = kp + dk;
        let (hi, _) = split(&g);
        // b3 = −F_d/‖F_d‖, so a smaller F_d,x shows up as a larger b3,x.
        let b3_lo = desired_attitude(&xhat, &r, &lo, &p)[(0, 2)];
        let b3_hi = desired_attitude(&xhat, &r, &hi, &p)[(0, 2)];
        prop_assert!(b3_hi > b3_lo);
    }

    #[test]
    fn control_law_is_continuous_off_the_singular_set(x in state(), dx in vec3(1.0)) {
        let p = QuadParams::default();
        let lim = ControllerLimits::for_params(&p);
        let (cg, _) = split(&nominal_gains());
        let r = RefPoint { p: Vector3::new(0.0, 0.0, -2.0), ..RefPoint::default() };
        let xhat = ObserverState::from_state(&x);
        let mut near = x;
        near.p += dx * 1e-9;
        let a = control_law(&xhat, &r, &cg, &p, &lim).as_vector();
        let b = control_law(&ObserverState::from_state(&near), &r, &cg, &p, &lim).as_vector();
        prop_assert!((a - b).norm() < 1e-5);
    }

    #[test]
    fn zero_bandwidth_observer_is_open_loop(x in state(), xt in state(), u in input(), df in vec3(2.0), dt in vec3(1.0)) {
        let p = QuadParams::default();
        let mut xhat = ObserverState::from_state(&x);
        xhat.d_force = df;
        xhat.d_torque = dt;
        let zero = ObserverGains { omega_t: Vector3::zeros(), omega_r: Vector3::zeros() };
        let next = observer_step(&xhat, &Measurement::noiseless(&xt), &u, &zero, &p);
        let pred = step_dynamics(&x, &u, &xhat.disturbance(), &p);
        prop_assert_eq!(next.sys, pred);
        prop_assert_eq!(next.d_force, df);
        prop_assert_eq!(next.d_torque, dt);
    }

    #[test]
    fn projection_lands_in_bounds(raw in prop::collection::vec(-100.0f64..100.0, GAIN_DIM)) {
        let b = GainBounds::default();
        let g = b.project(&nalgebra::SVector::from_column_slice(&raw));
        prop_assert!(b.contains(&g));
        prop_assert!(g.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn negative_loss_weights_rejected(i in 0usize..12, w in -10.0f64..-1e-9) {
        let mut spec = LossSpec::default();
        spec.w_x[i] = w;
        prop_assert!(spec.validate().is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampled_winds_respect_configured_ranges(seed in any::<u64>()) {
        // 20 tasks per case keeps the sweep at several hundred draws.
        let cfg = TaskDistribution::default();
        for t in sample_tasks(seed, 20, &cfg).unwrap() {
            prop_assert!(t.wind.force.amax() <= cfg.max_force_n + 1e-12);
            prop_assert!(t.wind.amplitude.amax() <= cfg.max_gust_n + 1e-12);
            prop_assert!(t.wind.torque.norm() <= cfg.max_torque_nm + 1e-12);
            prop_assert!(t.duration() >= cfg.min_duration_s);
        }
    }

    /// Arbitrary policy weights, however large, still apply in-bounds gains
    /// that stay constant between update instants.
    #[test]
    fn policy_gains_stay_bounded_and_held(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let sim = SimConfig::nominal(60);
        let mut policy = Policy::new(sim.bounds, FeatureScales::default(), 16, scale, &nominal_gains(), seed);
        let w: Vec<f64> = policy.net.to_flat().iter().map(|v| v * scale).collect();
        policy.net.set_flat(&w);
        let task = &sample_tasks(seed, 1, &TaskDistribution { min_duration_s: 1.0, ..TaskDistribution::default() }).unwrap()[0];
        let rec = rollout_closed_loop(task, GainSource::Policy(&policy), &sim).unwrap();
        for wdw in &rec.windows {
            prop_assert!(sim.bounds.contains(&wdw.gains));
        }
        for k in 0..rec.steps.len() {
            prop_assert_eq!(rec.gains_at(k, sim.stride), &rec.windows[k / sim.stride].gains);
        }
    }

    #[test]
    fn schedules_outside_bounds_are_rejected(i in 0usize..GAIN_DIM, over in 1.0f64..100.0) {
        let sim = SimConfig::nominal(20);
        let mut g = nominal_gains();
        g[i] = sim.bounds.max[i] + over;
        let task = &sample_tasks(1, 1, &TaskDistribution { min_duration_s: 1.0, ..TaskDistribution::default() }).unwrap()[0];
        let sched = GainTrajectory::fixed(g, 20, 5);
        prop_assert!(rollout_closed_loop(task, GainSource::Schedule(&sched), &sim).is_err());
    }
}
