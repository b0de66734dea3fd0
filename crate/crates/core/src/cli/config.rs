//! Plain-text run configuration.
//!
//! One `key = value` per line, grouped under `[env]`, `[data]`, `[train]`,
//! `[sampler]` and `[eval]`; keys before the first section header belong
//! to the root. `#` starts a comment. Unknown keys, duplicate keys and
//! malformed values are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::envs::{Task, TaskSpec, ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::nets::{NetKind, NetSpec};
use crate::sampler::{SamplerConfig, Variant};
use crate::training::{TauDistribution, TrainConfig};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,

    pub task: Task,
    pub max_steps: usize,

    pub n_expert: usize,
    pub n_random: usize,
    pub expert_seed: u64,
    pub random_seed: u64,

    pub obs_horizon: usize,
    pub action_horizon: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dynamics_epochs: usize,
    pub policy_epochs: usize,
    pub ema_decay: f64,
    pub train_seed: u64,
    pub expert_weight: f64,
    pub random_weight: f64,
    pub tau_distribution: TauDistribution,
    pub cond_noise_prob: f64,
    pub action_mse_chunks: usize,

    pub num_steps: usize,
    pub use_ema: bool,
    pub sampler_seed: u64,
    pub warm_start: bool,

    pub n_trials: usize,
    pub eval_seed_base: u64,
    pub execute_first: usize,
    pub ood_magnitude: f64,
    pub sweep_steps: Vec<usize>,
    pub variants: Vec<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = TrainConfig::dynamics_default();
        let p = TrainConfig::policy_default();
        let net = NetSpec::new(NetKind::Dynamics, OBS_DIM, ACTION_DIM);
        let s = SamplerConfig::default();
        let e = EvalConfig::default();
        Self {
            out_dir: PathBuf::from("runs/default"),
            task: Task::PushToTarget,
            max_steps: TaskSpec::new(Task::PushToTarget).max_steps,
            n_expert: 100,
            n_random: 100,
            expert_seed: 0,
            random_seed: 100_000,
            obs_horizon: net.obs_horizon,
            action_horizon: net.action_horizon,
            hidden: net.hidden.clone(),
            time_embed_dim: net.time_embed_dim,
            lr: d.lr,
            batch_size: d.batch_size,
            dynamics_epochs: d.epochs,
            policy_epochs: p.epochs,
            ema_decay: d.ema_decay,
            train_seed: d.seed,
            expert_weight: d.expert_weight,
            random_weight: d.random_weight,
            tau_distribution: d.tau_distribution,
            cond_noise_prob: p.cond_noise_prob,
            action_mse_chunks: d.action_mse_chunks,
            num_steps: s.num_steps,
            use_ema: s.use_ema,
            sampler_seed: s.seed,
            warm_start: s.warm_start,
            n_trials: e.n_trials,
            eval_seed_base: e.seed_base,
            execute_first: net.action_horizon / 2,
            ood_magnitude: 0.5,
            sweep_steps: vec![1, 2, 5, 10, 20],
            variants: Variant::ALL.to_vec(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every `(section, key)` pair in canonical order.
    pub const KEYS: &'static [(&'static str, &'static str)] = &[
        ("", "out_dir"),
        ("env", "task"),
        ("env", "max_steps"),
        ("data", "n_expert"),
        ("data", "n_random"),
        ("data", "expert_seed"),
        ("data", "random_seed"),
        ("train", "obs_horizon"),
        ("train", "action_horizon"),
        ("train", "hidden"),
        ("train", "time_embed_dim"),
        ("train", "lr"),
        ("train", "batch_size"),
        ("train", "dynamics_epochs"),
        ("train", "policy_epochs"),
        ("train", "ema_decay"),
        ("train", "seed"),
        ("train", "expert_weight"),
        ("train", "random_weight"),
        ("train", "tau_distribution"),
        ("train", "cond_noise_prob"),
        ("train", "action_mse_chunks"),
        ("sampler", "num_steps"),
        ("sampler", "use_ema"),
        ("sampler", "seed"),
        ("sampler", "warm_start"),
        ("eval", "n_trials"),
        ("eval", "seed_base"),
        ("eval", "execute_first"),
        ("eval", "ood_magnitude"),
        ("eval", "sweep_steps"),
        ("eval", "variants"),
    ];

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        let k = full.as_str();
        match (section, key) {
            ("", "out_dir") => self.out_dir = PathBuf::from(v),
            ("env", "task") => self.task = Task::parse(v)?,
            ("env", "max_steps") => self.max_steps = parse_num(k, v)?,
            ("data", "n_expert") => self.n_expert = parse_num(k, v)?,
            ("data", "n_random") => self.n_random = parse_num(k, v)?,
            ("data", "expert_seed") => self.expert_seed = parse_num(k, v)?,
            ("data", "random_seed") => self.random_seed = parse_num(k, v)?,
            ("train", "obs_horizon") => self.obs_horizon = parse_num(k, v)?,
            ("train", "action_horizon") => self.action_horizon = parse_num(k, v)?,
            ("train", "hidden") => self.hidden = parse_list(k, v)?,
            ("train", "time_embed_dim") => self.time_embed_dim = parse_num(k, v)?,
            ("train", "lr") => self.lr = parse_num(k, v)?,
            ("train", "batch_size") => self.batch_size = parse_num(k, v)?,
            ("train", "dynamics_epochs") => self.dynamics_epochs = parse_num(k, v)?,
            ("train", "policy_epochs") => self.policy_epochs = parse_num(k, v)?,
            ("train", "ema_decay") => self.ema_decay = parse_num(k, v)?,
            ("train", "seed") => self.train_seed = parse_num(k, v)?,
            ("train", "expert_weight") => self.expert_weight = parse_num(k, v)?,
            ("train", "random_weight") => self.random_weight = parse_num(k, v)?,
            ("train", "tau_distribution") => self.tau_distribution = TauDistribution::parse(v)?,
            ("train", "cond_noise_prob") => self.cond_noise_prob = parse_num(k, v)?,
            ("train", "action_mse_chunks") => self.action_mse_chunks = parse_num(k, v)?,
            ("sampler", "num_steps") => self.num_steps = parse_num(k, v)?,
            ("sampler", "use_ema") => self.use_ema = parse_bool(k, v)?,
            ("sampler", "seed") => self.sampler_seed = parse_num(k, v)?,
            ("sampler", "warm_start") => self.warm_start = parse_bool(k, v)?,
            ("eval", "n_trials") => self.n_trials = parse_num(k, v)?,
            ("eval", "seed_base") => self.eval_seed_base = parse_num(k, v)?,
            ("eval", "execute_first") => self.execute_first = parse_num(k, v)?,
            ("eval", "ood_magnitude") => self.ood_magnitude = parse_num(k, v)?,
            ("eval", "sweep_steps") => self.sweep_steps = parse_list(k, v)?,
            ("eval", "variants") => {
                self.variants = v
                    .split(',')
                    .map(|s| Variant::parse(s.trim()))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("unknown key {full:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> String {
        match (section, key) {
            ("", "out_dir") => self.out_dir.display().to_string(),
            ("env", "task") => self.task.name().into(),
            ("env", "max_steps") => self.max_steps.to_string(),
            ("data", "n_expert") => self.n_expert.to_string(),
            ("data", "n_random") => self.n_random.to_string(),
            ("data", "expert_seed") => self.expert_seed.to_string(),
            ("data", "random_seed") => self.random_seed.to_string(),
            ("train", "obs_horizon") => self.obs_horizon.to_string(),
            ("train", "action_horizon") => self.action_horizon.to_string(),
            ("train", "hidden") => join(&self.hidden),
            ("train", "time_embed_dim") => self.time_embed_dim.to_string(),
            ("train", "lr") => self.lr.to_string(),
            ("train", "batch_size") => self.batch_size.to_string(),
            ("train", "dynamics_epochs") => self.dynamics_epochs.to_string(),
            ("train", "policy_epochs") => self.policy_epochs.to_string(),
            ("train", "ema_decay") => self.ema_decay.to_string(),
            ("train", "seed") => self.train_seed.to_string(),
            ("train", "expert_weight") => self.expert_weight.to_string(),
            ("train", "random_weight") => self.random_weight.to_string(),
            ("train", "tau_distribution") => self.tau_distribution.name().into(),
            ("train", "cond_noise_prob") => self.cond_noise_prob.to_string(),
            ("train", "action_mse_chunks") => self.action_mse_chunks.to_string(),
            ("sampler", "num_steps") => self.num_steps.to_string(),
            ("sampler", "use_ema") => self.use_ema.to_string(),
            ("sampler", "seed") => self.sampler_seed.to_string(),
            ("sampler", "warm_start") => self.warm_start.to_string(),
            ("eval", "n_trials") => self.n_trials.to_string(),
            ("eval", "seed_base") => self.eval_seed_base.to_string(),
            ("eval", "execute_first") => self.execute_first.to_string(),
            ("eval", "ood_magnitude") => self.ood_magnitude.to_string(),
            ("eval", "sweep_steps") => join(&self.sweep_steps),
            ("eval", "variants") => self.variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(","),
            _ => unreachable!("key table and getter disagree on {section}.{key}"),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header {line:?}")))?
                    .trim();
                if !["env", "data", "train", "sampler", "eval"].contains(&name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert((section.clone(), k.to_string())) {
                return Err(at(format!("duplicate key {k:?}")));
            }
            cfg.set(&section, k, v).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => at(other.to_string()),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.net_spec(NetKind::Dynamics).validate()?;
        self.train_config(NetKind::Dynamics).validate()?;
        self.train_config(NetKind::PolicyDap).validate()?;
        self.eval_config().validate()?;
        self.task_spec().validate()?;
        if self.n_expert == 0 || self.n_random == 0 {
            return Err(Error::Config("n_expert and n_random must be at least 1".into()));
        }
        if self.sweep_steps.iter().any(|&s| s == 0) {
            return Err(Error::Config("sweep_steps entries must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        if !(self.ood_magnitude >= 0.0) {
            return Err(Error::Config("ood_magnitude must be non-negative".into()));
        }
        let ranges = [
            ("data.expert_seed", self.expert_seed, self.n_expert as u64),
            ("data.random_seed", self.random_seed, self.n_random as u64),
            ("eval.seed_base", self.eval_seed_base, self.n_trials as u64),
        ];
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a.1 < b.1.saturating_add(b.2) && b.1 < a.1.saturating_add(a.2) {
                    return Err(Error::Config(format!("seed ranges of {} and {} overlap", a.0, b.0)));
                }
            }
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            max_steps: self.max_steps,
            ..TaskSpec::new(self.task)
        }
    }

    pub fn net_spec(&self, kind: NetKind) -> NetSpec {
        NetSpec {
            kind,
            obs_dim: OBS_DIM,
            action_dim: ACTION_DIM,
            obs_horizon: self.obs_horizon,
            action_horizon: self.action_horizon,
            hidden: self.hidden.clone(),
            time_embed_dim: self.time_embed_dim,
        }
    }

    pub fn train_config(&self, kind: NetKind) -> TrainConfig {
        let policy = matches!(kind, NetKind::PolicyDap | NetKind::PolicyFmp);
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: if policy { self.policy_epochs } else { self.dynamics_epochs },
            tau_distribution: self.tau_distribution,
            ema_decay: self.ema_decay,
            seed: self.train_seed,
            expert_weight: self.expert_weight,
            random_weight: self.random_weight,
            action_mse_chunks: self.action_mse_chunks,
            action_mse_steps: self.num_steps,
            cond_noise_prob: if kind == NetKind::PolicyDap { self.cond_noise_prob } else { 0.0 },
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.num_steps,
            variant: Variant::Dap,
            use_ema: self.use_ema,
            seed: self.sampler_seed,
            warm_start: self.warm_start,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_trials: self.n_trials,
            seed_base: self.eval_seed_base,
            max_steps: self.max_steps,
            ood: crate::envs::OodConfig::NONE,
            sampler: self.sampler_config(),
            execute_first: self.execute_first,
        }
    }

    /// Applies `--seed`: model initialization, minibatch order and sampler
    /// noise all follow it; dataset and trial seeds stay as configured.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train_seed = seed;
        self.sampler_seed = seed;
        self
    }

    /// Canonical body listing every key, defaults included.
    pub fn canonical(&self) -> String {
        self.body(true)
    }

    fn body(&self, with_out_dir: bool) -> String {
        let mut s = String::new();
        let mut current = None;
        for &(sec, key) in Self::KEYS {
            if !with_out_dir && key == "out_dir" {
                continue;
            }
            if current != Some(sec) {
                if !sec.is_empty() {
                    let _ = writeln!(s, "\n[{sec}]");
                }
                current = Some(sec);
            }
            let _ = writeln!(s, "{key} = {}", self.get(sec, key));
        }
        s
    }

    /// Digest of every setting except `out_dir`, so the same experiment
    /// hashes identically wherever it is written.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.body(false).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The canonical body preceded by version and hash comments; parses back
    /// to the same configuration.
    pub fn resolved(&self) -> String {
        format!("# {VERSION}\n# config sha256 {}\n{}", self.hash(), self.canonical())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_the_resolved_echo() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.resolved()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.n_expert, 100);
        assert_eq!(c.n_random, c.n_expert);
        assert_eq!(c.sweep_steps, vec![1, 2, 5, 10, 20]);
    }

    #[test]
    fn every_key_is_settable() {
        for &(sec, key) in RunConfig::KEYS {
            let mut c = RunConfig::default();
            let v = c.get(sec, key);
            c.set(sec, key, &v).unwrap();
            assert_eq!(c, RunConfig::default(), "{sec}.{key}");
        }
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(RunConfig::parse("[train]\nlrr = 1\n"), Err(Error::Config(_))));
        assert!(RunConfig::parse("[train]\nlr = 1e-3\nlr = 2e-3\n").is_err());
        assert!(RunConfig::parse("[bogus]\n").is_err());
        assert!(RunConfig::parse("[train]\nlr 1\n").is_err());
        assert!(RunConfig::parse("[sampler]\nuse_ema = yes\n").is_err());
        let c = RunConfig::parse("[env]\ntask = pickplace # comment\n[train]\nhidden = 32, 16\n").unwrap();
        assert_eq!(c.task, Task::PickPlace2D);
        assert_eq!(c.hidden, vec![32, 16]);
    }

    #[test]
    fn overlapping_seed_ranges_rejected() {
        let err = RunConfig::parse("[data]\nexpert_seed = 0\nrandom_seed = 50\n").unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = a.clone().with_seed(7);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut moved = a.clone();
        moved.out_dir = "elsewhere".into();
        assert_eq!(moved.hash(), a.hash());
        assert_ne!(moved.resolved(), a.resolved());
    }
}
