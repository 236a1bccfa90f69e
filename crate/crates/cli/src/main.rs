use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use gaintune::config::ExperimentConfig;
use gaintune::gains::{GainVec, GAIN_DIM};
use gaintune::gradcheck::{run_gradcheck, GradcheckOptions};
use gaintune::policy::{Checkpoint, Policy};
use gaintune::reference::{hover_task, preset_task, Shape, Task, WindProfile, PRESET_CENTER};
use gaintune::rollout::{rollout_closed_loop, GainSource};
use gaintune::trainer::{
    benchmark_gradient_time, default_tuning_task, eval_csv, evaluate_suite, loglog_slope, train_epoch, tune_gains,
    Controller, Engine, Method,
};

mod output;

use output::{csv, write_atomic, write_manifest, GainsFile};

#[derive(Parser, Debug)]
#[command(
    name = "gaintune",
    version,
    about = "Adjoint-based controller and observer gain tuning for quadrotors"
)]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Compare every analytic Jacobian and gradient engine with finite differences.
    Gradcheck {
        #[arg(long = "engine")]
        engines: Vec<String>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Perturb the named Jacobian block (negative test of the audit).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Time gradient engines across horizons and fit log-log slopes.
    Bench {
        #[arg(long, value_delimiter = ',')]
        engines: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
        #[arg(long)]
        copies: Option<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Tune gains with one gradient method.
    Tune {
        #[arg(long)]
        method: String,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Tune over the baseline task set instead of the default task.
        #[arg(long)]
        baseline: bool,
    },
    /// Train the gain policy.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Gains file used for the warm start; config gains otherwise.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        checkpoint_every: usize,
    },
    /// Evaluate a policy and a fixed baseline over the preset suite.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fixed-gain baseline file; config gains otherwise.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Use the mismatched validation plant.
        #[arg(long)]
        perturbed: bool,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Re-simulate a controller on a preset and emit time series.
    Plotdata {
        #[arg(long, conflicts_with = "gains")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        gains: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::HoverWind)]
        preset: Preset,
        #[arg(long, default_value_t = 2.0)]
        speed: f64,
        /// Wind level, N·m of torque for the trajectory presets and N of
        /// constant force for the hover preset.
        #[arg(long, default_value_t = 1.0)]
        wind: f64,
        #[arg(long)]
        horizon: Option<usize>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Preset {
    HoverWind,
    Circle2d,
    Circle3d,
    Figure8,
}

/// Failure with a dedicated exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

const EXIT_GRADCHECK: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_CONFIG: u8 = 4;

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Exit(EXIT_CONFIG, msg.into()).into()
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Exit(EXIT_MISSING, format!("{what} not found: {}", path.display())).into())
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn checked(cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(cfg)
}

const GAIN_NAMES: [&str; GAIN_DIM] = [
    "kp_x",
    "kp_y",
    "kp_z",
    "kv_x",
    "kv_y",
    "kv_z",
    "kr_x",
    "kr_y",
    "kr_z",
    "komega_x",
    "komega_y",
    "komega_z",
    "omega_t_x",
    "omega_t_y",
    "omega_t_z",
    "omega_r_x",
    "omega_r_y",
    "omega_r_z",
];

fn load_baseline(path: Option<&PathBuf>, cfg: &ExperimentConfig) -> Result<GainVec> {
    match path {
        Some(p) => {
            require(p, "gains file")?;
            let g = GainsFile::load(p)?.fixed_gains();
            let bounds = cfg.sim()?.bounds;
            if !bounds.contains(&g) {
                return Err(config_error(format!(
                    "{} lies outside the configured gain bounds",
                    p.display()
                )));
            }
            Ok(g)
        }
        None => Ok(cfg.initial()?),
    }
}

fn load_policy(path: &Path) -> Result<Policy> {
    require(path, "checkpoint")?;
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?)
}

fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let mut cfg = load_config(&cli)?;
    let mut outputs = Vec::new();
    let command = match &cli.command {
        Cmd::Gradcheck { .. } => "gradcheck",
        Cmd::Bench { .. } => "bench",
        Cmd::Tune { .. } => "tune",
        Cmd::Train { .. } => "train",
        Cmd::Eval { .. } => "eval",
        Cmd::Plotdata { .. } => "plotdata",
    };

    match &cli.command {
        Cmd::Gradcheck {
            engines,
            horizon,
            samples,
            corrupt,
        } => {
            if let Some(h) = horizon {
                cfg.gradcheck.horizon_steps = *h;
            }
            if let Some(s) = samples {
                cfg.gradcheck.samples = *s;
            }
            let cfg = checked(cfg)?;
            let opts = GradcheckOptions {
                horizon: cfg.gradcheck.horizon_steps,
                samples: cfg.gradcheck.samples,
                fd_step: cfg.gradcheck.fd_step,
                threshold: cfg.gradcheck.threshold,
                seed: cfg.seed,
                engines: engines.clone(),
                corrupt: corrupt.clone(),
                policy_hidden: cfg.train.hidden,
            };
            let report = run_gradcheck(&cfg.sim()?, &cfg.train.tasks, &cfg.features, &opts).map_err(|e| match e {
                gaintune::Error::Config(m) => config_error(m),
                other => other.into(),
            })?;
            let path = cfg.output_dir.join("gradcheck.json");
            write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
            outputs.push(path);
            for e in &report.entries {
                println!(
                    "{:<18} {:<8} max rel err {:.3e}  {}",
                    e.name,
                    e.kind,
                    e.max_rel_error,
                    if e.passed { "ok" } else { "FAIL" }
                );
            }
            write_manifest(&cfg.output_dir, command, &cfg, start.elapsed().as_secs_f64(), &outputs)?;
            if !report.passed {
                return Err(Exit(
                    EXIT_GRADCHECK,
                    format!("gradient check failed: {}", report.failing.join(", ")),
                )
                .into());
            }
        }
        Cmd::Bench {
            engines,
            horizons,
            copies,
            repetitions,
        } => {
            if !horizons.is_empty() {
                cfg.bench.horizons_steps = horizons.clone();
            }
            if let Some(c) = copies {
                cfg.bench.copies = *c;
            }
            if let Some(r) = repetitions {
                cfg.bench.repetitions = *r;
            }
            let cfg = checked(cfg)?;
            let engines: Vec<Engine> = if engines.is_empty() {
                Engine::ALL.to_vec()
            } else {
                engines
                    .iter()
                    .map(|e| e.parse().map_err(|_| config_error(format!("unknown engine {e:?}"))))
                    .collect::<Result<_>>()?
            };
            let sim = cfg.sim()?;
            let gains = cfg.initial()?;
            let mut rows = Vec::new();
            let mut summary = serde_json::Map::new();
            for e in engines {
                let r = benchmark_gradient_time(
                    e,
                    &cfg.bench.horizons_steps,
                    cfg.bench.repetitions,
                    cfg.bench.copies,
                    &sim,
                    &gains,
                )?;
                if r.len() >= 2 {
                    let slope = loglog_slope(&r);
                    println!("{:<14} log-log slope {:.3}", e.label(), slope);
                    summary.insert(e.label().into(), slope.into());
                }
                rows.extend(r);
            }
            let path = cfg.output_dir.join("bench.csv");
            write_atomic(
                &path,
                csv("engine,horizon,params,median_s", &rows, |r| {
                    format!("{},{},{},{:.9}", r.engine.label(), r.horizon, r.params, r.median_s)
                })
                .as_bytes(),
            )?;
            let spath = cfg.output_dir.join("bench_slopes.json");
            write_atomic(&spath, serde_json::to_string_pretty(&summary)?.as_bytes())?;
            outputs.extend([path, spath]);
            write_manifest(&cfg.output_dir, command, &cfg, start.elapsed().as_secs_f64(), &outputs)?;
        }
        Cmd::Tune {
            method,
            iterations,
            lr,
            horizon,
            baseline,
        } => {
            let method: Method = method
                .parse()
                .map_err(|_| config_error(format!("unknown method {method:?}")))?;
            if let Some(i) = iterations {
                cfg.tune.iterations = *i;
            }
            if let Some(l) = lr {
                cfg.tune.adam.lr = *l;
            }
            if let Some(h) = horizon {
                cfg.sim.horizon_steps = *h;
            }
            if *baseline {
                cfg.tune.iterations = iterations.unwrap_or(cfg.baseline.iterations);
            }
            let cfg = checked(cfg)?;
            let sim = cfg.sim()?;
            let tasks = if *baseline {
                cfg.baseline_tasks()?
            } else {
                vec![default_tuning_task(sim.horizon, sim.model.dt)?]
            };
            let res = tune_gains(&tasks, method, &cfg.initial()?, &sim, &cfg.tune)?;
            let stem = if *baseline {
                "baseline".to_string()
            } else {
                method.label().to_string()
            };
            let curve = cfg.output_dir.join(format!("tune_{stem}.csv"));
            write_atomic(
                &curve,
                csv("iteration,loss,rmse,grad_seconds", &res.curve, |p| {
                    format!("{},{:.9e},{:.9e},{:.6e}", p.iteration, p.loss, p.rmse, p.grad_seconds)
                })
                .as_bytes(),
            )?;
            let gpath = cfg.output_dir.join(format!("gains_{stem}.json"));
            write_atomic(
                &gpath,
                serde_json::to_string_pretty(&GainsFile::from_trajectory(method.label(), &res.gains))?.as_bytes(),
            )?;
            outputs.extend([curve, gpath]);
            let first = &res.curve[0];
            let last = res.final_point();
            println!(
                "{}: rmse {:.4} -> {:.4} m, loss {:.4e} -> {:.4e}{}",
                method.label(),
                first.rmse,
                last.rmse,
                first.loss,
                last.loss,
                if res.unstable { "  [unstable]" } else { "" }
            );
            write_manifest(&cfg.output_dir, command, &cfg, start.elapsed().as_secs_f64(), &outputs)?;
        }
        Cmd::Train {
            epochs,
            lr,
            warm_start,
            checkpoint_every,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(l) = lr {
                cfg.train.adam.lr = *l;
            }
            let cfg = checked(cfg)?;
            let sim = cfg.sim()?;
            let tc = cfg.train_config();
            let warm = load_baseline(warm_start.as_ref(), &cfg)?;
            let mut policy = Policy::new(
                sim.bounds,
                cfg.features,
                tc.hidden,
                tc.output_init_scale,
                &warm,
                tc.seed,
            );
            let ckpt = cfg.output_dir.join("checkpoint.json");
            let save =
                |p: &Policy| -> Result<()> { write_atomic(&ckpt, Checkpoint::from_policy(p).to_json()?.as_bytes()) };
            let mut rows = Vec::new();
            for epoch in 0..tc.epochs {
                match train_epoch(&mut policy, epoch, &tc, &sim) {
                    Ok(m) => {
                        println!(
                            "epoch {:>4}  loss {:.5}  rmse {:.4}  crashes {}  |g| {:.3e}  {:.0} ms",
                            m.epoch, m.mean_loss, m.mean_rmse, m.crash_count, m.grad_norm, m.wall_ms
                        );
                        rows.push(m);
                    }
                    Err(gaintune::Error::AllCrashed) => {
                        eprintln!("epoch {epoch}: every task crashed; update skipped");
                        rows.push(gaintune::trainer::EpochMetrics {
                            epoch,
                            mean_loss: f64::NAN,
                            mean_rmse: f64::NAN,
                            crash_count: tc.batch,
                            grad_norm: 0.0,
                            wall_ms: 0.0,
                        });
                    }
                    Err(e) => return Err(e.into()),
                }
                if *checkpoint_every > 0 && (epoch + 1) % checkpoint_every == 0 {
                    save(&policy)?;
                }
            }
            save(&policy)?;
            outputs.push(ckpt.clone());
            if tc.epochs > 0 {
                let path = cfg.output_dir.join("metrics.csv");
                write_atomic(
                    &path,
                    csv("epoch,mean_loss,mean_rmse,crash_count,grad_norm,wall_ms", &rows, |m| {
                        format!(
                            "{},{:.9e},{:.9e},{},{:.6e},{:.3}",
                            m.epoch, m.mean_loss, m.mean_rmse, m.crash_count, m.grad_norm, m.wall_ms
                        )
                    })
                    .as_bytes(),
                )?;
                outputs.push(path);
            }
            write_manifest(&cfg.output_dir, command, &cfg, start.elapsed().as_secs_f64(), &outputs)?;
        }
        Cmd::Eval {
            checkpoint,
            baseline,
            perturbed,
            horizon,
        } => {
            if let Some(h) = horizon {
                cfg.sim.horizon_steps = *h;
            }
            let cfg = checked(cfg)?;
            let policy = load_policy(checkpoint)?;
            let base = load_baseline(baseline.as_ref(), &cfg)?;
            let mut sim = cfg.sim()?;
            if *perturbed {
                sim = cfg.perturbation.apply(&sim);
            }
            let rows = evaluate_suite(
                &[
                    ("Baseline", Controller::Fixed(&base)),
                    ("Ours", Controller::Policy(&policy)),
                ],
                &cfg.eval,
                &sim,
            )?;
            let name = if *perturbed { "eval_perturbed.csv" } else { "eval.csv" };
            let path = cfg.output_dir.join(name);
            write_atomic(&path, eval_csv(&rows).as_bytes())?;
            outputs.push(path);
            for r in &rows {
                let mean = if r.crashes == r.runs {
                    "crash".to_string()
                } else {
                    format!("{:.4}", r.mean)
                };
                println!(
                    "wind {:>3} N·m  {:>3} m/s  {:<9} {:<10} rmse {} ± {:.4}  crashes {}/{}",
                    r.wind, r.velocity, r.method, r.category, mean, r.sd, r.crashes, r.runs
                );
            }
            write_manifest(&cfg.output_dir, command, &cfg, start.elapsed().as_secs_f64(), &outputs)?;
        }
        Cmd::Plotdata {
            checkpoint,
            gains,
            preset,
            speed,
            wind,
            horizon,
        } => {
            if let Some(h) = horizon {
                cfg.sim.horizon_steps = *h;
            }
            let cfg = checked(cfg)?;
            let sim = cfg.sim()?;
            let duration = sim.horizon as f64 * sim.model.dt;
            let task: Task = match preset {
                Preset::HoverWind => {
                    let w = WindProfile {
                        force: nalgebra::Vector3::new(*wind, 0.0, 0.0),
                        ..WindProfile::calm()
                    };
                    hover_task(PRESET_CENTER, duration, w, cfg.seed)?
                }
                Preset::Circle2d => preset_task(Shape::Circle2d, *speed, *wind, duration, cfg.seed)?,
                Preset::Circle3d => preset_task(Shape::Circle3d, *speed, *wind, duration, cfg.seed)?,
                Preset::Figure8 => preset_task(Shape::Figure8, *speed, *wind, duration, cfg.seed)?,
            };
            let policy;
            let schedule;
            let source = match (checkpoint, gains) {
                (Some(c), _) => {
                    policy = load_policy(c)?;
                    GainSource::Policy(&policy)
                }
                (None, g) => {
                    let fixed = load_baseline(g.as_ref(), &cfg)?;
                    schedule = gaintune::gradients::GainTrajectory::fixed(fixed, sim.horizon, sim.stride);
                    GainSource::Schedule(&schedule)
                }
            };
            let rec = rollout_closed_loop(&task, source, &sim)?;
            let dt = sim.model.dt;
            let stem = format!(
                "plot_{}",
                preset
                    .to_possible_value()
                    .map(|v| v.get_name().to_string())
                    .unwrap_or_default()
            );
            let track = cfg.output_dir.join(format!("{stem}_tracking.csv"));
            write_atomic(
                &track,
                csv(
                    "t,p_x,p_y,p_z,pd_x,pd_y,pd_z,e_x,e_y,e_z",
                    rec.steps.iter().enumerate(),
                    |(k, s)| {
                        let e = s.x.p - s.r.p;
                        format!(
                            "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                            *k as f64 * dt,
                            s.x.p.x,
                            s.x.p.y,
                            s.x.p.z,
                            s.r.p.x,
                            s.r.p.y,
                            s.r.p.z,
                            e.x,
                            e.y,
                            e.z
                        )
                    },
                )
                .as_bytes(),
            )?;
            let dist = cfg.output_dir.join(format!("{stem}_disturbance.csv"));
            write_atomic(
                &dist,
                csv(
                    "t,dhat_f_x,dhat_f_y,dhat_f_z,d_f_x,d_f_y,d_f_z,dhat_tau_x,dhat_tau_y,dhat_tau_z,d_tau_x,d_tau_y,d_tau_z",
                    rec.steps.iter().enumerate(),
                    |(k, s)| {
                        let (a, b, c, d) = (s.xhat.d_force, s.d.force, s.xhat.d_torque, s.d.torque);
                        format!(
                            "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                            *k as f64 * dt, a.x, a.y, a.z, b.x, b.y, b.z, c.x, c.y, c.z, d.x, d.y, d.z
                        )
                    },
                )
                .as_bytes(),
            )?;
            let gpath = cfg.output_dir.join(format!("{stem}_gains.csv"));
            write_atomic(
                &gpath,
                csv(&format!("t,{}", GAIN_NAMES.join(",")), &rec.windows, |w| {
                    let vals: Vec<String> = w.gains.iter().map(|g| format!("{g:.6}")).collect();
                    format!("{:.4},{}", w.start as f64 * dt, vals.join(","))
                })
                .as_bytes(),
            )?;
            outputs.extend([track, dist, gpath]);
            println!(
                "rmse {:.4} m over {} steps{}",
                rec.rmse(),
                rec.steps.len(),
                if rec.is_crashed() { " (crashed)" } else { "" }
            );
            write_manifest(&cfg.output_dir, command, &cfg, start.elapsed().as_secs_f64(), &outputs)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(Exit(code, _)) = e.downcast_ref::<Exit>() {
                return ExitCode::from(*code);
            }
            if let Some(gaintune::Error::Config(_)) = e.downcast_ref::<gaintune::Error>() {
                return ExitCode::from(EXIT_CONFIG);
            }
            ExitCode::FAILURE
        }
    }
}
