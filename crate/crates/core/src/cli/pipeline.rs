//! The collect → train → eval → ablate → report pipeline behind the CLI.
//!
//! Output tree under `out_dir`:
//!
//! ```text
//! resolved_config.txt
//! data/{expert,random}.dapd  data/norm.dapn
//! models/<arm>.dapw          logs/<arm>.csv
//! eval/    metrics.csv timing.csv *.svg resolved_config.txt
//! ablate/  metrics.csv timing.csv ablation.svg summary.md resolved_config.txt
//! report/  summary.md resolved_config.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{collect, load_dataset, save_dataset, ChunkedSample, DatasetSplit, NormStats, Source};
use crate::envs::OodMode;
use crate::error::{Error, Result};
use crate::eval::{
    action_mse, emit_report, extrapolation_curve, next_obs_mse, ood_modes, ood_suite, parse_metrics_csv, pseudo_psnr,
    rollout, Chart, EvalReport, LearnedAgent, MetricRow, ModelSet, NextObsModel, Series, TimingRow,
};
use crate::nets::{NetKind, VectorField};
use crate::sampler::{SamplerConfig, Variant};
use crate::training::{prepare_samples, train_dynamics, train_policy, train_video, TrainLog};

use super::config::{RunConfig, VERSION};

/// The five trainable models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainArm {
    Dynamics,
    PolicyDap,
    PolicyFmp,
    Video,
    DynamicsExpertOnly,
}

impl TrainArm {
    pub const ALL: [TrainArm; 5] = [
        TrainArm::Dynamics,
        TrainArm::PolicyDap,
        TrainArm::PolicyFmp,
        TrainArm::Video,
        TrainArm::DynamicsExpertOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainArm::Dynamics => "dynamics",
            TrainArm::PolicyDap => "policy-dap",
            TrainArm::PolicyFmp => "policy-fmp",
            TrainArm::Video => "video",
            TrainArm::DynamicsExpertOnly => "dynamics-expert-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training arm {s:?}")))
    }

    pub fn kind(self) -> NetKind {
        match self {
            TrainArm::Dynamics | TrainArm::DynamicsExpertOnly => NetKind::Dynamics,
            TrainArm::PolicyDap => NetKind::PolicyDap,
            TrainArm::PolicyFmp => NetKind::PolicyFmp,
            TrainArm::Video => NetKind::VideoPredictor,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub expert: DatasetSplit,
    pub random: DatasetSplit,
    pub stats: NormStats,
}

#[derive(Debug, Clone)]
pub struct Validation {
    pub expert: Vec<ChunkedSample>,
    pub random: Vec<ChunkedSample>,
}

/// Outcome of `eval`: the report plus any failed sanity checks.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub violations: Vec<String>,
}

pub struct Pipeline {
    pub config: RunConfig,
}

fn io_ctx(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_ctx(path))
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        Self { config }
    }

    pub fn out(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn expert_path(&self) -> PathBuf {
        self.out().join("data").join("expert.dapd")
    }

    pub fn random_path(&self) -> PathBuf {
        self.out().join("data").join("random.dapd")
    }

    pub fn norm_path(&self) -> PathBuf {
        self.out().join("data").join("norm.dapn")
    }

    pub fn model_path(&self, arm: TrainArm) -> PathBuf {
        self.out().join("models").join(format!("{}.dapw", arm.name()))
    }

    pub fn log_path(&self, arm: TrainArm) -> PathBuf {
        self.out().join("logs").join(format!("{}.csv", arm.name()))
    }

    /// Writes `resolved_config.txt` into `dir`.
    pub fn echo_config(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let p = dir.join("resolved_config.txt");
        fs::write(&p, self.config.resolved()).map_err(io_ctx(&p))
    }

    pub fn collect(&self) -> Result<Datasets> {
        self.echo_config(self.out())?;
        let spec = self.config.task_spec();
        let expert = collect(&spec, Source::Expert, self.config.n_expert, self.config.expert_seed)?;
        let random = collect(&spec, Source::Random, self.config.n_random, self.config.random_seed)?;
        ensure_dir(&self.out().join("data"))?;
        save_dataset(&self.expert_path(), &expert)?;
        save_dataset(&self.random_path(), &random)?;
        let expert = DatasetSplit::by_seed(expert);
        let random = DatasetSplit::by_seed(random);
        let stats = NormStats::from_episodes(expert.train.iter().chain(&random.train))?;
        stats.save(&self.norm_path())?;
        Ok(Datasets { expert, random, stats })
    }

    pub fn load_datasets(&self) -> Result<Datasets> {
        for p in [self.expert_path(), self.random_path(), self.norm_path()] {
            if !p.exists() {
                return Err(Error::InvalidArgument(format!(
                    "missing dataset file {} (run `collect` first)",
                    p.display()
                )));
            }
        }
        Ok(Datasets {
            expert: DatasetSplit::by_seed(load_dataset(&self.expert_path())?),
            random: DatasetSplit::by_seed(load_dataset(&self.random_path())?),
            stats: NormStats::load(&self.norm_path())?,
        })
    }

    fn datasets_or_collect(&self) -> Result<Datasets> {
        if self.expert_path().exists() && self.random_path().exists() && self.norm_path().exists() {
            self.load_datasets()
        } else {
            self.collect()
        }
    }

    /// Trains one arm on already collected data; saves the checkpoint and log.
    pub fn train(&self, arm: TrainArm) -> Result<(VectorField, TrainLog)> {
        let data = self.load_datasets()?;
        self.train_with(arm, &data)
    }

    fn train_with(&self, arm: TrainArm, data: &Datasets) -> Result<(VectorField, TrainLog)> {
        self.echo_config(self.out())?;
        let kind = arm.kind();
        let spec = self.config.net_spec(kind);
        let tc = self.config.train_config(kind);
        let (net, log) = match arm {
            TrainArm::Dynamics => train_dynamics(&data.expert, Some(&data.random), &spec, &data.stats, &tc)?,
            TrainArm::DynamicsExpertOnly => train_dynamics(&data.expert, None, &spec, &data.stats, &tc)?,
            TrainArm::PolicyDap | TrainArm::PolicyFmp => train_policy(&data.expert, &spec, &data.stats, &tc)?,
            TrainArm::Video => train_video(&data.expert, &spec, &data.stats, &tc)?,
        };
        ensure_dir(&self.out().join("models"))?;
        ensure_dir(&self.out().join("logs"))?;
        net.save(&self.model_path(arm))?;
        let lp = self.log_path(arm);
        fs::write(&lp, log.to_csv()).map_err(io_ctx(&lp))?;
        Ok((net, log))
    }

    /// Collects data if needed and trains every arm whose checkpoint is
    /// absent; returns the logs of the arms it trained.
    pub fn train_missing(&self) -> Result<Vec<(TrainArm, TrainLog)>> {
        let data = self.datasets_or_collect()?;
        let mut logs = Vec::new();
        for arm in TrainArm::ALL {
            if !self.model_path(arm).exists() {
                logs.push((arm, self.train_with(arm, &data)?.1));
            }
        }
        Ok(logs)
    }

    /// Every checkpoint present on disk.
    pub fn load_models(&self) -> Result<ModelSet> {
        let stats = NormStats::load(&self.norm_path())?;
        let mut m = ModelSet::new(stats);
        let load = |arm: TrainArm| -> Result<Option<VectorField>> {
            let p = self.model_path(arm);
            if !p.exists() {
                return Ok(None);
            }
            let net = VectorField::load(&p)?;
            if net.kind() != arm.kind() {
                return Err(Error::InvalidArgument(format!(
                    "{} holds a {} network",
                    p.display(),
                    net.kind().name()
                )));
            }
            Ok(Some(net))
        };
        m.dynamics = load(TrainArm::Dynamics)?;
        m.dynamics_expert_only = load(TrainArm::DynamicsExpertOnly)?;
        m.policy_dap = load(TrainArm::PolicyDap)?;
        m.policy_fmp = load(TrainArm::PolicyFmp)?;
        m.video = load(TrainArm::Video)?;
        Ok(m)
    }

    pub fn validation(&self, data: &Datasets) -> Result<Validation> {
        let spec = self.config.net_spec(NetKind::Dynamics);
        Ok(Validation {
            expert: prepare_samples(&data.expert.validation, &spec, &data.stats)?,
            random: prepare_samples(&data.random.validation, &spec, &data.stats)?,
        })
    }

    fn task_name(&self) -> &'static str {
        self.config.task.name()
    }

    /// Main evaluation: success rates, validation MSEs, extrapolation curve
    /// and the num_steps sweep. Writes `eval/`.
    pub fn eval(&self) -> Result<EvalOutcome> {
        let data = self.load_datasets()?;
        let models = self.load_models()?;
        for &v in &self.config.variants {
            models.check(v)?;
        }
        let val = self.validation(&data)?;
        let task = self.task_name();
        let seed_base = self.config.eval_seed_base;
        let spec = self.config.task_spec();
        let ecfg = self.config.eval_config();
        let scfg = self.config.sampler_config();
        let mut report = EvalReport::default();
        let mut violations = Vec::new();
        let mut check = |ok: bool, what: String| {
            if !ok {
                violations.push(what);
            }
        };

        let mut success_series = Vec::new();
        for &v in &self.config.variants {
            let mut agent = LearnedAgent::new(v, &models, scfg)?;
            let r = rollout(&spec, &mut agent, &ecfg)?;
            let sr = r.success_rate();
            check((0.0..=1.0).contains(&sr), format!("{} success rate {sr} outside [0, 1]", v.name()));
            report.push(task, v.name(), "none", "success_rate", sr, r.trials.len(), seed_base);
            report.push(task, v.name(), "none", "mean_episode_length", r.mean_length(), r.trials.len(), seed_base);
            report.timing.push(TimingRow {
                task: task.into(),
                variant: v.name().into(),
                what: "seconds_per_chunk".into(),
                seconds: r.seconds_per_chunk,
            });
            success_series.push(Series {
                name: v.name().into(),
                values: vec![sr],
            });
        }
        report.charts.push(Chart::Bars {
            file: "success.svg".into(),
            title: format!("{task}: success rate"),
            groups: vec!["none".into()],
            series: success_series,
        });

        if !val.expert.is_empty() {
            for &v in &self.config.variants {
                let m = action_mse(v, &models, &val.expert, &scfg)?;
                check(m.is_finite() && m >= 0.0, format!("{} action MSE {m}", v.name()));
                report.push(task, v.name(), "none", "action_mse", m, val.expert.len(), scfg.seed);
            }
        }

        if !val.expert.is_empty() && !val.random.is_empty() {
            let obs_len = self.config.net_spec(NetKind::Dynamics).obs_chunk_len() as f64;
            let models_to_score: [(&str, Option<NextObsModel<'_>>); 3] = [
                ("dynamics", models.dynamics.as_ref().map(NextObsModel::Dynamics)),
                ("dynamics_expert_only", models.dynamics_expert_only.as_ref().map(NextObsModel::Dynamics)),
                ("video", models.video.as_ref().map(NextObsModel::Video)),
            ];
            for (name, model) in models_to_score {
                let Some(model) = model else { continue };
                let m = next_obs_mse(model, &val.expert, &val.random, &scfg)?;
                for (split, value, n) in [("expert", m.expert, val.expert.len()), ("random", m.random, val.random.len())] {
                    check(value.is_finite() && value >= 0.0, format!("{name} next-obs MSE {value}"));
                    report.push(task, name, "none", &format!("next_obs_mse_{split}"), value, n, scfg.seed);
                    report.push(
                        task,
                        name,
                        "none",
                        &format!("next_obs_pseudo_psnr_{split}"),
                        pseudo_psnr(value / obs_len, 2.0),
                        n,
                        scfg.seed,
                    );
                }
            }
        }

        if models.supports(Variant::Dap) && !val.expert.is_empty() {
            let c = extrapolation_curve(&models, &val.expert, &scfg)?;
            for p in &c.points {
                for (metric, value) in [
                    ("extrap_action_mse", p.action_mse),
                    ("extrap_obs_mse", p.obs_mse),
                    ("extrap_action_to_final", p.action_to_final),
                    ("extrap_obs_to_final", p.obs_to_final),
                ] {
                    report.push(task, "dap", "none", &format!("{metric}_tau_{:.3}", p.tau), value, c.n, scfg.seed);
                }
            }
            report.push(task, "dap", "none", "final_action_mse", c.final_action_mse, c.n, scfg.seed);
            report.push(task, "dap", "none", "final_obs_mse", c.final_obs_mse, c.n, scfg.seed);
            if let Some(last) = c.points.last() {
                for (what, e, f) in [("action", last.action_mse, c.final_action_mse), ("obs", last.obs_mse, c.final_obs_mse)] {
                    check(
                        (e - f).abs() <= 0.01 * f.abs().max(f64::MIN_POSITIVE),
                        format!("{what} extrapolation at tau {} is {e}, final {f}", last.tau),
                    );
                }
            }
            let mut x: Vec<f64> = c.points.iter().map(|p| p.tau).collect();
            x.push(1.0);
            let with_final = |f: &dyn Fn(&crate::eval::CurvePoint) -> f64, fin: f64| {
                let mut v: Vec<f64> = c.points.iter().map(f).collect();
                v.push(fin);
                v
            };
            report.charts.push(Chart::Lines {
                file: "extrapolation.svg".into(),
                title: format!("{task}: extrapolated sample MSE per flow time"),
                x_label: "flow time".into(),
                x,
                series: vec![
                    Series {
                        name: "action".into(),
                        values: with_final(&|p| p.action_mse, c.final_action_mse),
                    },
                    Series {
                        name: "next obs".into(),
                        values: with_final(&|p| p.obs_mse, c.final_obs_mse),
                    },
                ],
            });
        }

        if models.supports(Variant::Dap) && !self.config.sweep_steps.is_empty() {
            let mut rates = Vec::new();
            for &steps in &self.config.sweep_steps {
                let s = SamplerConfig { num_steps: steps, ..scfg };
                let mut agent = LearnedAgent::new(Variant::Dap, &models, s)?;
                let r = rollout(&spec, &mut agent, &crate::eval::EvalConfig { sampler: s, ..ecfg.clone() })?;
                let name = format!("dap_steps_{steps}");
                report.push(task, &name, "none", "success_rate", r.success_rate(), r.trials.len(), seed_base);
                if !val.expert.is_empty() {
                    let m = action_mse(Variant::Dap, &models, &val.expert, &s)?;
                    report.push(task, &name, "none", "action_mse", m, val.expert.len(), s.seed);
                }
                report.timing.push(TimingRow {
                    task: task.into(),
                    variant: name,
                    what: "seconds_per_chunk".into(),
                    seconds: r.seconds_per_chunk,
                });
                rates.push(r.success_rate());
            }
            report.charts.push(Chart::Lines {
                file: "sweep.svg".into(),
                title: format!("{task}: success rate vs Euler steps"),
                x_label: "num_steps".into(),
                x: self.config.sweep_steps.iter().map(|&s| s as f64).collect(),
                series: vec![Series {
                    name: "dap".into(),
                    values: rates,
                }],
            });
        }

        let dir = self.out().join("eval");
        emit_report(&report, &dir)?;
        self.echo_config(&dir)?;
        Ok(EvalOutcome { report, violations })
    }

    /// Variant × perturbation success table; trains missing arms first.
    pub fn ablate(&self) -> Result<EvalReport> {
        self.train_missing()?;
        let models = self.load_models()?;
        let spec = self.config.task_spec();
        let ecfg = self.config.eval_config();
        let modes = ood_modes(self.config.ood_magnitude)?;
        let task = self.task_name();
        let rows = ood_suite(&spec, &models, &self.config.variants, &modes, &ecfg)?;
        let mut report = EvalReport::default();
        for (v, mode, r) in &rows {
            let ood = mode.mode.name();
            report.push(task, v.name(), ood, "success_rate", r.success_rate(), r.trials.len(), ecfg.seed_base);
            report.push(task, v.name(), ood, "mean_episode_length", r.mean_length(), r.trials.len(), ecfg.seed_base);
            report.timing.push(TimingRow {
                task: task.into(),
                variant: v.name().into(),
                what: format!("seconds_per_chunk_{ood}"),
                seconds: r.seconds_per_chunk,
            });
        }
        report.push(task, "all", "all", "ood_magnitude", self.config.ood_magnitude, rows.len(), ecfg.seed_base);
        report.charts.push(ablation_chart(task, &report.rows));
        let dir = self.out().join("ablate");
        emit_report(&report, &dir)?;
        self.echo_config(&dir)?;
        let p = dir.join("summary.md");
        fs::write(&p, summary(&self.config, &report.rows)).map_err(io_ctx(&p))?;
        Ok(report)
    }

    /// Merges `eval/` and `ablate/` metrics into `report/summary.md`.
    pub fn report(&self) -> Result<PathBuf> {
        let mut rows: Vec<MetricRow> = Vec::new();
        for sub in ["eval", "ablate"] {
            let p = self.out().join(sub).join("metrics.csv");
            if p.exists() {
                rows.extend(parse_metrics_csv(&fs::read_to_string(&p).map_err(io_ctx(&p))?)?);
            }
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no metrics under {} (run `eval` or `ablate` first)",
                self.out().display()
            )));
        }
        let dir = self.out().join("report");
        let mut report = EvalReport::default();
        if rows.iter().any(|r| r.ood != "none" && r.metric == "success_rate") {
            report.charts.push(ablation_chart(self.task_name(), &rows));
        }
        emit_report(&EvalReport { rows: rows.clone(), ..report }, &dir)?;
        self.echo_config(&dir)?;
        let p = dir.join("summary.md");
        fs::write(&p, summary(&self.config, &rows)).map_err(io_ctx(&p))?;
        Ok(p)
    }
}

fn ablation_chart(task: &str, rows: &[MetricRow]) -> Chart {
    let groups: Vec<String> = OodMode::ALL.iter().map(|m| m.name().to_string()).collect();
    let mut variants: Vec<String> = Vec::new();
    for r in rows.iter().filter(|r| r.metric == "success_rate" && r.ood != "all") {
        if Variant::parse(&r.variant).is_ok() && !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }
    let series = variants
        .iter()
        .map(|v| Series {
            name: v.clone(),
            values: groups
                .iter()
                .map(|g| {
                    rows.iter()
                        .find(|r| &r.variant == v && &r.ood == g && r.metric == "success_rate")
                        .map_or(0.0, |r| r.value)
                })
                .collect(),
        })
        .collect();
    Chart::Bars {
        file: "ablation.svg".into(),
        title: format!("{task}: success rate by perturbation"),
        groups,
        series,
    }
}

fn summary(config: &RunConfig, rows: &[MetricRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Run summary\n");
    let _ = writeln!(s, "- version: {VERSION}");
    let _ = writeln!(s, "- config sha256: {}", config.hash());
    let _ = writeln!(s, "- task: {}\n", config.task.name());
    let succ: Vec<&MetricRow> = rows
        .iter()
        .filter(|r| r.metric == "success_rate" && Variant::parse(&r.variant).is_ok())
        .collect();
    if !succ.is_empty() {
        let _ = writeln!(s, "## Success rate\n");
        let oods: Vec<&str> = OodMode::ALL
            .iter()
            .map(|m| m.name())
            .filter(|o| succ.iter().any(|r| r.ood == *o))
            .collect();
        let _ = writeln!(s, "| variant | {} |", oods.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(oods.len()));
        let mut seen: Vec<&str> = Vec::new();
        for r in &succ {
            if seen.contains(&r.variant.as_str()) {
                continue;
            }
            seen.push(&r.variant);
            let cells: Vec<String> = oods
                .iter()
                .map(|o| {
                    succ.iter()
                        .find(|x| x.variant == r.variant && x.ood == *o)
                        .map_or("-".into(), |x| format!("{:.2}", x.value))
                })
                .collect();
            let _ = writeln!(s, "| {} | {} |", r.variant, cells.join(" | "));
        }
        s.push('\n');
    }
    let _ = writeln!(s, "## All metrics\n");
    let _ = writeln!(s, "| variant | ood | metric | value | n |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(s, "| {} | {} | {} | {:.6} | {} |", r.variant, r.ood, r.metric, r.value, r.n);
    }
    s
}
