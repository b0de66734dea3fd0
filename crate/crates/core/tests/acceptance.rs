//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 5 to 8 and 10 share one trained model set per task, produced by
//! the same pipeline the CLI runs with the default configuration.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use dap_core::cli::{Pipeline, RunConfig, TrainArm, Validation};
use dap_core::data::{ChunkedSample, Source};
use dap_core::envs::{OodConfig, OodMode, Task, TaskSpec};
use dap_core::eval::{
    extrapolation_curve, next_obs_mse, rollout, Agent, EvalConfig, ExpertAgent, LearnedAgent, ModelSet, NextObsModel,
    RandomAgent,
};
use dap_core::flowcore::{cfm_target, extrapolate, integrate, interpolate, FlowSchedule};
use dap_core::nets::{NetKind, NetSpec};
use dap_core::numerics::{Mlp, SeededRng, Tensor};
use dap_core::sampler::{conditioned_sample_batch, Stage, Variant};
use dap_core::training::{dyn_loss, fit, policy_loss, TrainConfig, TrainLog};

/// Success thresholds fixed after the first calibration run.
const PUSH_SUCCESS_MIN: f64 = 0.8;
const PICKPLACE_SUCCESS_MIN: f64 = 0.6;
/// Extrapolated-sample MSE at τ = 0.5 relative to the final sample MSE.
const MID_FLOW_RATIO_MAX: f64 = 3.0;

type Outcome = Result<String, String>;

struct Checks {
    notes: Vec<String>,
    failed: bool,
}

impl Checks {
    fn new() -> Self {
        Self {
            notes: Vec::new(),
            failed: false,
        }
    }

    fn check(&mut self, ok: bool, note: String) {
        self.failed |= !ok;
        self.notes.push(if ok { note } else { format!("{note} [violated]") });
    }

    fn finish(self) -> Outcome {
        let s = self.notes.join("; ");
        if self.failed {
            Err(s)
        } else {
            Ok(s)
        }
    }
}

fn central_difference_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Max relative error over every parameter of `params` for a scalar loss.
fn max_param_rel_error(params: &Mlp, grads: &Mlp, loss: &dyn Fn(&Mlp) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    let analytic: Vec<Vec<f64>> = grads.param_slices().iter().map(|s| s.to_vec()).collect();
    for (si, g) in analytic.iter().enumerate() {
        for (j, &g) in g.iter().enumerate() {
            let orig = params.param_slices()[si][j];
            probe.param_slices_mut()[si][j] = orig + h;
            let up = loss(&probe);
            probe.param_slices_mut()[si][j] = orig - h;
            let down = loss(&probe);
            probe.param_slices_mut()[si][j] = orig;
            worst = worst.max(central_difference_rel_error(g, (up - down) / (2.0 * h)));
        }
    }
    worst
}

fn random_sample(rng: &mut SeededRng, spec: &NetSpec) -> ChunkedSample {
    ChunkedSample {
        obs: rng.gaussian(&spec.obs_shape()),
        actions: rng.gaussian(&spec.action_shape()),
        next_obs: rng.gaussian(&spec.obs_shape()),
        source: Source::Expert,
        obs_padded: 0,
        actions_padded: 0,
        next_obs_padded: 0,
    }
}

fn small_spec(kind: NetKind, rng: &mut SeededRng) -> NetSpec {
    NetSpec {
        obs_horizon: 1 + rng.below(2),
        action_horizon: 1 + rng.below(3),
        hidden: vec![4 + rng.below(5); 1 + rng.below(2)],
        time_embed_dim: 4,
        ..NetSpec::new(kind, 2 + rng.below(3), 1 + rng.below(2))
    }
}

fn criterion_gradients() -> Outcome {
    let mut checks = Checks::new();
    let mut rng = SeededRng::new(2024);

    // Network alone: L = Σ c ⊙ f(x), so the upstream gradient is c.
    let mut worst_mlp = 0.0f64;
    for _ in 0..10 {
        let dims: Vec<usize> = (0..2 + rng.below(3)).map(|_| 1 + rng.below(6)).collect();
        let params = Mlp::init(&dims, &mut rng).unwrap();
        let batch = 1 + rng.below(4);
        let x = rng.gaussian(&[batch, dims[0]]);
        let c = rng.gaussian(&[batch, *dims.last().unwrap()]);
        let loss = |m: &Mlp| -> f64 {
            m.forward(&x).unwrap().data().iter().zip(c.data()).map(|(y, w)| y * w).sum()
        };
        let (grads, dx) = params.backward(&x, &c).unwrap();
        worst_mlp = worst_mlp.max(max_param_rel_error(&params, &grads, &loss));
        let h = 1e-5;
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let eval = |t: &Tensor| -> f64 {
                params.forward(t).unwrap().data().iter().zip(c.data()).map(|(y, w)| y * w).sum()
            };
            worst_mlp = worst_mlp.max(central_difference_rel_error(dx.data()[j], (eval(&xp) - eval(&xm)) / (2.0 * h)));
        }
    }

    let mut worst_loss = [0.0f64; 2];
    for i in 0..10 {
        for (slot, kind) in [NetKind::Dynamics, NetKind::PolicyDap].into_iter().enumerate() {
            let spec = small_spec(kind, &mut rng);
            let params = Mlp::init(&spec.layer_dims(), &mut rng).unwrap();
            let batch: Vec<ChunkedSample> = (0..1 + rng.below(3)).map(|_| random_sample(&mut rng, &spec)).collect();
            let noise = SeededRng::new(500 + i);
            let f = |m: &Mlp| {
                let mut r = noise.clone();
                match kind {
                    NetKind::Dynamics => dyn_loss(m, &spec, &batch, &mut r),
                    _ => policy_loss(m, &spec, &batch, &mut r),
                }
                .unwrap()
            };
            let grads = f(&params).1;
            worst_loss[slot] = worst_loss[slot].max(max_param_rel_error(&params, &grads, &|m| f(m).0));
        }
    }
    checks.check(worst_mlp < 1e-4, format!("network max rel err {worst_mlp:.2e} over 10 instances"));
    checks.check(worst_loss[0] < 1e-4, format!("dynamics loss {:.2e} over 10", worst_loss[0]));
    checks.check(worst_loss[1] < 1e-4, format!("policy loss {:.2e} over 10", worst_loss[1]));
    checks.finish()
}

fn criterion_flow_identities() -> Outcome {
    let mut checks = Checks::new();
    let mut rng = SeededRng::new(7);
    let x1 = rng.gaussian(&[3, 4]);
    let x0 = rng.gaussian(&[3, 4]);

    let e0 = interpolate(&x1, &x0, 0.0).unwrap().sq_dist(&x0).unwrap().sqrt();
    let e1 = interpolate(&x1, &x0, 1.0).unwrap().sq_dist(&x1).unwrap().sqrt();
    checks.check(e0 == 0.0 && e1 == 0.0, format!("endpoints exact ({e0:.1e}, {e1:.1e})"));

    // d/dτ of the interpolant by central differences must equal the target.
    let target = cfm_target(&x1, &x0).unwrap();
    let mut worst_deriv = 0.0f64;
    for k in 1..10 {
        let tau = k as f64 / 10.0;
        let h = 1e-6;
        let up = interpolate(&x1, &x0, tau + h).unwrap();
        let down = interpolate(&x1, &x0, tau - h).unwrap();
        let d = up.zip_with(&down, "fd", |a, b| (a - b) / (2.0 * h)).unwrap();
        worst_deriv = worst_deriv.max(d.sq_dist(&target).unwrap().sqrt());
    }
    checks.check(worst_deriv < 1e-8, format!("target is the path derivative (err {worst_deriv:.1e})"));

    // On the conditional field the extrapolation from any τ lands on x1.
    let mut worst_ext = 0.0f64;
    for k in 0..=10 {
        let tau = k as f64 / 10.0;
        let x_tau = interpolate(&x1, &x0, tau).unwrap();
        let ext = extrapolate(&x_tau, tau, &target).unwrap();
        worst_ext = worst_ext.max(ext.zip_with(&x1, "ext", |a, b| (a - b).abs()).unwrap().max_abs());
    }
    checks.check(worst_ext < 1e-12, format!("extrapolation on linear path (err {worst_ext:.1e})"));

    let c = rng.gaussian(&[2, 3]);
    let start = rng.gaussian(&[2, 3]);
    let mut worst_int = 0.0f64;
    for n in [1, 2, 5, 10] {
        let out = integrate(start.clone(), FlowSchedule::new(n).unwrap(), |_, _| Ok(c.clone()), |_| {}).unwrap();
        let want = start.zip_with(&c, "want", |a, b| a + b).unwrap();
        worst_int = worst_int.max(out.zip_with(&want, "int", |a, b| (a - b).abs()).unwrap().max_abs());
    }
    checks.check(worst_int < 1e-12, format!("constant-field integration for 1/2/5/10 steps (err {worst_int:.1e})"));
    checks.finish()
}

fn criterion_transport() -> Outcome {
    let mut checks = Checks::new();
    let spec = NetSpec {
        obs_horizon: 1,
        action_horizon: 1,
        hidden: vec![64, 64],
        time_embed_dim: 16,
        ..NetSpec::new(NetKind::VideoPredictor, 1, 1)
    };
    let mut rng = SeededRng::new(11);
    let make = |rng: &mut SeededRng, n: usize| -> Vec<ChunkedSample> {
        (0..n)
            .map(|_| {
                let mut s = random_sample(rng, &spec);
                s.obs = Tensor::zeros(&spec.obs_shape());
                s.next_obs = Tensor::vector(vec![2.0 + 0.5 * rng.gaussian(&[1]).data()[0]]).reshape(&[1, 1]).unwrap();
                s
            })
            .collect()
    };
    let train = make(&mut rng, 4096);
    let val = make(&mut rng, 256);
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 30,
        seed: 3,
        ..TrainConfig::dynamics_default()
    };
    let (net, _) = fit(&spec, &train, &val, &cfg).unwrap();

    let n = 10_000;
    let cond = Tensor::zeros(&[n, 1]);
    let mut rngs: Vec<SeededRng> = (0..n as u64).map(|i| SeededRng::new(90_000 + i)).collect();
    // 50 steps: at 10 the Euler bias of the exact field alone shrinks the std to 0.43.
    let out = conditioned_sample_batch(&net.view(true), &[&cond], 50, &mut rngs, Stage::Observation, None).unwrap();
    let mean = out.data().iter().sum::<f64>() / n as f64;
    let std = (out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    checks.check((mean - 2.0).abs() <= 0.1, format!("mean {mean:.4} (target 2.0 ± 0.1)"));
    checks.check((std - 0.5).abs() <= 0.1, format!("std {std:.4} (target 0.5 ± 0.1)"));
    checks.finish()
}

fn criterion_expert_calibration() -> Outcome {
    let mut checks = Checks::new();
    let cfg = EvalConfig {
        n_trials: 100,
        ..EvalConfig::default()
    };
    for task in Task::ALL {
        let spec = TaskSpec::new(task);
        let cfg = EvalConfig {
            max_steps: spec.max_steps,
            ..cfg.clone()
        };
        let r = rollout(&spec, &mut ExpertAgent { horizon: 8 }, &cfg).unwrap();
        let wins = r.trials.iter().filter(|t| t.success).count();
        checks.check(wins == 100, format!("{} expert {wins}/100", task.name()));
    }
    let spec = TaskSpec::new(Task::PickPlace2D);
    let cfg = EvalConfig {
        max_steps: spec.max_steps,
        ..cfg
    };
    let r = rollout(&spec, &mut RandomAgent::new(8), &cfg).unwrap();
    let rate = r.success_rate();
    checks.check(rate <= 0.05, format!("pickplace random {rate:.2} (<= 0.05)"));
    checks.finish()
}

fn tiny_config(out: &Path) -> RunConfig {
    let text = "\
[env]
task = pickplace

[data]
n_expert = 12
n_random = 12

[train]
hidden = 32,32
dynamics_epochs = 3
policy_epochs = 3

[eval]
n_trials = 4
sweep_steps = 1,2
";
    let mut c = RunConfig::parse(text).unwrap().with_seed(5);
    c.out_dir = out.to_path_buf();
    c
}

fn criterion_determinism() -> Outcome {
    let mut checks = Checks::new();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let p = Pipeline::new(tiny_config(d.path()));
        p.collect().unwrap();
        for arm in TrainArm::ALL {
            p.train(arm).unwrap();
        }
        let o = p.eval().unwrap();
        assert!(o.violations.is_empty(), "{:?}", o.violations);
    }
    let mut files: Vec<String> = vec!["data/expert.dapd".into(), "data/random.dapd".into(), "data/norm.dapn".into()];
    files.extend(TrainArm::ALL.iter().map(|a| format!("models/{}.dapw", a.name())));
    files.push("eval/metrics.csv".into());
    files.push("resolved_config.txt".into());
    // The echo names its own output directory; everything else must agree.
    let read = |dir: &Path, f: &str| -> Vec<u8> {
        let bytes = fs::read(dir.join(f)).unwrap();
        if f.ends_with(".txt") {
            let text = String::from_utf8(bytes).unwrap();
            text.lines().filter(|l| !l.starts_with("out_dir = ")).collect::<Vec<_>>().join("\n").into_bytes()
        } else {
            bytes
        }
    };
    let mut same = 0;
    for f in &files {
        let a = read(dirs[0].path(), f);
        let b = read(dirs[1].path(), f);
        if a == b {
            same += 1;
        } else {
            checks.check(false, format!("{f} differs"));
        }
    }
    checks.check(same == files.len(), format!("{same}/{} artefacts byte-identical", files.len()));
    checks.finish()
}

struct Trained {
    task: Task,
    pipeline: Pipeline,
    models: ModelSet,
    val: Validation,
    logs: Vec<(TrainArm, TrainLog)>,
    _dir: tempfile::TempDir,
}

fn train_task(task: Task) -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.task = task;
    cfg.max_steps = TaskSpec::new(task).max_steps;
    cfg.out_dir = dir.path().to_path_buf();
    cfg.validate().unwrap();
    let pipeline = Pipeline::new(cfg);
    let t0 = Instant::now();
    let logs = pipeline.train_missing().unwrap();
    eprintln!("trained {} models in {:.0} s", task.name(), t0.elapsed().as_secs_f64());
    let data = pipeline.load_datasets().unwrap();
    let val = pipeline.validation(&data).unwrap();
    let models = pipeline.load_models().unwrap();
    Trained {
        task,
        pipeline,
        models,
        val,
        logs,
        _dir: dir,
    }
}

fn success(t: &Trained, variant: Variant, ood: OodConfig) -> f64 {
    let cfg = t.pipeline.config.eval_config();
    let mut agent = LearnedAgent::new(variant, &t.models, cfg.sampler).unwrap();
    let agent: &mut dyn Agent = &mut agent;
    rollout(&t.pipeline.config.task_spec(), agent, &EvalConfig { ood, ..cfg }).unwrap().success_rate()
}

fn criterion_end_to_end(trained: &[Trained]) -> Outcome {
    let mut checks = Checks::new();
    for t in trained {
        let min = match t.task {
            Task::PushToTarget => PUSH_SUCCESS_MIN,
            Task::PickPlace2D => PICKPLACE_SUCCESS_MIN,
        };
        let n = t.pipeline.config.n_trials;
        let s = success(t, Variant::Dap, OodConfig::NONE);
        checks.check(s >= min, format!("{} dap {s:.2} over {n} seeds (>= {min})", t.task.name()));
    }
    checks.finish()
}

fn criterion_dynamics_contrast(trained: &[Trained]) -> Outcome {
    let mut checks = Checks::new();
    for t in trained {
        let sampler = t.pipeline.config.sampler_config();
        let m = &t.models;
        let score = |model| next_obs_mse(model, &t.val.expert, &t.val.random, &sampler).unwrap().random;
        let full = score(NextObsModel::Dynamics(m.dynamics.as_ref().unwrap()));
        let expert_only = score(NextObsModel::Dynamics(m.dynamics_expert_only.as_ref().unwrap()));
        let video = score(NextObsModel::Video(m.video.as_ref().unwrap()));
        checks.check(
            full < expert_only && full < video,
            format!(
                "{} random-split MSE full {full:.4} vs expert-only {expert_only:.4} vs video {video:.4}",
                t.task.name()
            ),
        );
    }
    checks.finish()
}

fn criterion_extrapolation(trained: &[Trained]) -> Outcome {
    let mut checks = Checks::new();
    for t in trained {
        let c = extrapolation_curve(&t.models, &t.val.expert, &t.pipeline.config.sampler_config()).unwrap();
        let mid = c.at(0.5).expect("grid contains 0.5");
        let last = c.points.last().unwrap();
        for (what, m, l, f) in [
            ("action", mid.action_mse, last.action_mse, c.final_action_mse),
            ("obs", mid.obs_mse, last.obs_mse, c.final_obs_mse),
        ] {
            checks.check(
                m <= MID_FLOW_RATIO_MAX * f,
                format!("{} {what} mid {m:.4} vs final {f:.4}", t.task.name()),
            );
            checks.check(
                (l - f).abs() <= 0.01 * f,
                format!("{} {what} at tau {:.1} {l:.4}", t.task.name(), last.tau),
            );
        }
    }
    checks.finish()
}

fn criterion_ood_direction(trained: &[Trained]) -> Outcome {
    let mut checks = Checks::new();
    for t in trained {
        let mag = t.pipeline.config.ood_magnitude;
        let distractor = OodConfig::new(OodMode::VisualDistractor, mag).unwrap();
        let gap = |ood| success(t, Variant::Dap, ood) - success(t, Variant::Fmp, ood);
        let g_none = gap(OodConfig::NONE);
        let g_ood = gap(distractor);
        checks.check(
            g_ood >= g_none,
            format!(
                "{} dap-fmp gap {g_ood:+.2} under distractor (magnitude {mag}) vs {g_none:+.2} unperturbed, n={}",
                t.task.name(),
                t.pipeline.config.n_trials
            ),
        );
    }
    checks.finish()
}

fn criterion_plateau(trained: &[Trained]) -> Outcome {
    let mut checks = Checks::new();
    for t in trained {
        let (_, log) = t.logs.iter().find(|(a, _)| *a == TrainArm::Dynamics).expect("dynamics log");
        match log.plateau_epoch(0.01, 5) {
            Some(e) => checks.check(e < 100, format!("{} dynamics plateau at epoch {}", t.task.name(), e + 1)),
            None => checks.check(false, format!("{} dynamics never plateaued in {} epochs", t.task.name(), log.len())),
        }
    }
    checks.finish()
}

fn report(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    };
    let secs = t0.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {id:>2} {name} ({secs:.1} s): {detail}");
    outcome.is_ok()
}

fn main() {
    let start = Instant::now();
    let mut ok = true;
    ok &= report(1, "gradient oracle", criterion_gradients);
    ok &= report(2, "flow identities", criterion_flow_identities);
    ok &= report(3, "analytic transport", criterion_transport);
    ok &= report(4, "expert calibration", criterion_expert_calibration);
    ok &= report(9, "determinism", criterion_determinism);

    let trained: Vec<Trained> = std::thread::scope(|s| {
        let handles: Vec<_> = Task::ALL.iter().map(|&t| s.spawn(move || train_task(t))).collect();
        handles.into_iter().map(|h| h.join().expect("training thread")).collect()
    });

    ok &= report(5, "end-to-end success", || criterion_end_to_end(&trained));
    ok &= report(6, "dynamics contrast", || criterion_dynamics_contrast(&trained));
    ok &= report(7, "mid-flow extrapolation", || criterion_extrapolation(&trained));
    ok &= report(8, "distractor gap direction", || criterion_ood_direction(&trained));
    ok &= report(10, "dynamics plateau", || criterion_plateau(&trained));

    println!("acceptance finished in {:.0} s: {}", start.elapsed().as_secs_f64(), if ok { "all passed" } else { "FAILURES" });
    if !ok {
        std::process::exit(1);
    }
}
