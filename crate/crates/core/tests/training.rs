use gaintune::error::Error;
use gaintune::gains::{nominal_gains, GainVec};
use gaintune::gradients::GainTrajectory;
use gaintune::oracle::fd_directional;
use gaintune::policy::{FeatureScales, Policy};
use gaintune::reference::{sample_tasks, TaskDistribution};
use gaintune::rollout::{policy_gradient, rollout_closed_loop, rollout_loss, schedule_adjoint, GainSource, SimConfig};
use gaintune::trainer::{epoch_tasks, train_epoch, TrainConfig};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_policy(sim: &SimConfig, seed: u64) -> Policy {
    Policy::new(sim.bounds, FeatureScales::default(), 64, 0.1, &nominal_gains(), seed)
}

fn batch_loss(p: &Policy, tc: &TrainConfig, sim: &SimConfig) -> f64 {
    let tasks = epoch_tasks(tc, 0).unwrap();
    tasks
        .iter()
        .map(|t| rollout_loss(t, GainSource::Policy(p), sim))
        .sum::<f64>()
        / tasks.len() as f64
}

#[test]
fn short_training_lowers_meta_loss() {
    let sim = SimConfig::nominal(300);
    let tc = TrainConfig {
        batch: 4,
        epochs: 30,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut p = small_policy(&sim, 1);
    // Fixed batch so the comparison is not confounded by task draws.
    let before = batch_loss(&p, &tc, &sim);
    for e in 0..tc.epochs {
        train_epoch(&mut p, e, &tc, &sim).unwrap();
    }
    let after = batch_loss(&p, &tc, &sim);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn crashed_tasks_do_not_enter_the_update() {
    let sim = SimConfig {
        crash_radius_m: 3.5,
        ..SimConfig::nominal(300)
    };
    let tc = TrainConfig {
        batch: 6,
        seed: 4,
        ..TrainConfig::default()
    };
    let p0 = small_policy(&sim, 2);
    let rollouts = |e: usize| -> Vec<_> {
        epoch_tasks(&tc, e)
            .unwrap()
            .into_iter()
            .map(|t| rollout_closed_loop(&t, GainSource::Policy(&p0), &sim).unwrap())
            .collect()
    };
    let (epoch, recs) = (0..40)
        .map(|e| (e, rollouts(e)))
        .find(|(_, r)| {
            let c = r.iter().filter(|r| r.is_crashed()).count();
            c > 0 && c < r.len()
        })
        .expect("some batch crashes partially");
    let survivors: Vec<_> = recs.iter().filter(|r| !r.is_crashed()).collect();

    let mut trained = p0.clone();
    let m = train_epoch(&mut trained, epoch, &tc, &sim).unwrap();
    assert_eq!(m.crash_count, recs.len() - survivors.len());
    let n = survivors.len() as f64;
    assert_eq!(m.mean_loss, survivors.iter().map(|r| r.mean_loss()).sum::<f64>() / n);

    let mut grad = DVector::zeros(p0.net.param_count());
    for r in &survivors {
        grad += policy_gradient(&p0, r, &sim).unwrap() / sim.horizon as f64;
    }
    grad /= n;
    let mut manual = p0.clone();
    manual.apply_gradient(grad.as_slice(), &tc.adam);
    assert_eq!(manual.net, trained.net);
}

#[test]
fn fully_crashed_batch_leaves_policy_unchanged() {
    let sim = SimConfig {
        crash_radius_m: 0.1,
        ..SimConfig::nominal(100)
    };
    let tc = TrainConfig {
        batch: 3,
        ..TrainConfig::default()
    };
    let mut p = small_policy(&sim, 3);
    let before = p.net.clone();
    assert!(matches!(train_epoch(&mut p, 0, &tc, &sim), Err(Error::AllCrashed)));
    assert_eq!(p.net, before);
}

#[test]
fn directional_derivatives_match_adjoint() {
    let sim = SimConfig::nominal(100);
    let task = &sample_tasks(9, 1, &TaskDistribution::default()).unwrap()[0];
    let g = nominal_gains();
    let rec = rollout_closed_loop(task, GainSource::Schedule(&GainTrajectory::fixed(g, 100, 5)), &sim).unwrap();
    let grad = schedule_adjoint(&rec, &sim).unwrap().total;
    let loss = |p: &[f64]| {
        rollout_loss(
            task,
            GainSource::Schedule(&GainTrajectory::fixed(GainVec::from_column_slice(p), 100, 5)),
            &sim,
        )
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let dir = GainVec::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
        let fd = fd_directional(loss, g.as_slice(), dir.as_slice(), 1e-5);
        let an = grad.dot(&dir);
        assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "{fd} vs {an}");
    }
}
