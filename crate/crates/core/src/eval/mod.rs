//! Rollouts, validation metrics and report emission.

mod metrics;
mod report;

pub use metrics::{
    action_mse, extrapolation_curve, next_obs_mse, stack_rows, CurvePoint, ExtrapolationCurve, NextObsModel,
    SplitMse,
};
pub use report::{
    bar_chart_svg, emit_report, line_chart_svg, parse_metrics_csv, pseudo_psnr, Chart, EvalReport, MetricRow,
    Series, TimingRow,
};

use std::time::Instant;

use crate::data::NormStats;
use crate::envs::{random_policy, Action, EnvState, Observation, OodConfig, OodMode, TaskSpec, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nets::{NetKind, VectorField};
use crate::numerics::{derive_seed, SeededRng, Tensor};
use crate::sampler::{
    conditioned_sample_batch, dap_sample_batch, video_conditioned_sample_batch, SamplerConfig, Stage, Variant,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_trials: usize,
    /// Trial `i` resets the environment with seed `seed_base + i`.
    pub seed_base: u64,
    pub max_steps: usize,
    pub ood: OodConfig,
    pub sampler: SamplerConfig,
    /// Actions executed from each sampled chunk before resampling.
    pub execute_first: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_trials: 50,
            seed_base: 1_000_000,
            max_steps: 120,
            ood: OodConfig::NONE,
            sampler: SamplerConfig::default(),
            execute_first: 4,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::Config("n_trials must be at least 1".into()));
        }
        if self.execute_first == 0 {
            return Err(Error::Config("execute_first must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        self.sampler.schedule()?;
        Ok(())
    }

    pub fn trial_seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_trials as u64).map(move |i| self.seed_base + i)
    }
}

/// Trained networks plus the normalization they were trained with.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub stats: NormStats,
    pub dynamics: Option<VectorField>,
    pub dynamics_expert_only: Option<VectorField>,
    pub policy_dap: Option<VectorField>,
    pub policy_fmp: Option<VectorField>,
    pub video: Option<VectorField>,
}

impl ModelSet {
    pub fn new(stats: NormStats) -> Self {
        Self {
            stats,
            dynamics: None,
            dynamics_expert_only: None,
            policy_dap: None,
            policy_fmp: None,
            video: None,
        }
    }

    fn get(&self, kind: NetKind) -> Option<&VectorField> {
        match kind {
            NetKind::Dynamics => self.dynamics.as_ref(),
            NetKind::PolicyDap => self.policy_dap.as_ref(),
            NetKind::PolicyFmp => self.policy_fmp.as_ref(),
            NetKind::VideoPredictor => self.video.as_ref(),
        }
    }

    pub fn require(&self, variant: Variant, kind: NetKind) -> Result<&VectorField> {
        self.get(kind).ok_or_else(|| {
            Error::MissingCheckpoint(format!("{} (needed by variant {})", kind.name(), variant.name()))
        })
    }

    pub fn supports(&self, variant: Variant) -> bool {
        variant.required().iter().all(|&k| self.get(k).is_some())
    }

    /// Checks that every network a variant needs exists and agrees with the
    /// normalization dimensions.
    pub fn check(&self, variant: Variant) -> Result<()> {
        for &k in variant.required() {
            let net = self.require(variant, k)?;
            let s = net.spec();
            if s.obs_dim != self.stats.obs_dim() || s.action_dim != self.stats.action_dim() {
                return Err(Error::InvalidArgument(format!(
                    "{} checkpoint dims ({}, {}) disagree with normalization ({}, {})",
                    k.name(),
                    s.obs_dim,
                    s.action_dim,
                    self.stats.obs_dim(),
                    self.stats.action_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Maps the current state and observation history to an action chunk.
pub trait Agent {
    fn name(&self) -> String;
    fn begin_trial(&mut self, trial_seed: u64);
    fn act(&mut self, env: &TaskSpec, state: &EnvState, history: &[Observation]) -> Result<Vec<Action>>;
}

fn episode_over(env: &TaskSpec, s: &EnvState) -> bool {
    env.is_success(s) || s.steps >= env.max_steps
}

/// Expert actions and resulting observations for `n` steps ahead of `state`;
/// once the episode would end the final observation is repeated.
pub fn expert_lookahead(env: &TaskSpec, state: &EnvState, n: usize) -> (Vec<Action>, Vec<Observation>) {
    let mut s = *state;
    let mut last = env.observe(&s);
    let mut actions = Vec::with_capacity(n);
    let mut obs = Vec::with_capacity(n);
    for _ in 0..n {
        if episode_over(env, &s) {
            actions.push(actions.last().copied().unwrap_or([0.0; ACTION_DIM]));
            obs.push(last);
            continue;
        }
        let a = env.expert_action(&s);
        let t = env.step(&s, &a);
        s = t.state;
        last = t.observation;
        actions.push(a);
        obs.push(last);
    }
    (actions, obs)
}

/// The scripted expert, planned `horizon` steps ahead on the simulator.
pub struct ExpertAgent {
    pub horizon: usize,
}

impl Agent for ExpertAgent {
    fn name(&self) -> String {
        "expert".into()
    }

    fn begin_trial(&mut self, _trial_seed: u64) {}

    fn act(&mut self, env: &TaskSpec, state: &EnvState, _history: &[Observation]) -> Result<Vec<Action>> {
        Ok(expert_lookahead(env, state, self.horizon).0)
    }
}

pub struct RandomAgent {
    pub horizon: usize,
    rng: SeededRng,
}

impl RandomAgent {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            rng: SeededRng::new(0),
        }
    }
}

impl Agent for RandomAgent {
    fn name(&self) -> String {
        "random".into()
    }

    fn begin_trial(&mut self, trial_seed: u64) {
        self.rng = SeededRng::new(derive_seed(trial_seed, 0xAC7));
    }

    fn act(&mut self, _env: &TaskSpec, _state: &EnvState, _history: &[Observation]) -> Result<Vec<Action>> {
        Ok((0..self.horizon).map(|_| random_policy(&mut self.rng)).collect())
    }
}

/// Last `t` observations, repeating the first one when the history is short.
pub fn observation_chunk(history: &[Observation], t: usize) -> Vec<f64> {
    let n = history.len();
    let mut out = Vec::with_capacity(t * history.first().map_or(0, |o| o.len()));
    for k in 0..t {
        let idx = (n + k).saturating_sub(t);
        out.extend_from_slice(&history[idx.min(n - 1)]);
    }
    out
}

/// A trained sampler variant acting in environment units.
pub struct LearnedAgent<'m> {
    variant: Variant,
    models: &'m ModelSet,
    sampler: SamplerConfig,
    rng: SeededRng,
}

impl<'m> LearnedAgent<'m> {
    pub fn new(variant: Variant, models: &'m ModelSet, sampler: SamplerConfig) -> Result<Self> {
        models.check(variant)?;
        Ok(Self {
            variant,
            models,
            sampler: SamplerConfig { variant, ..sampler },
            rng: SeededRng::new(sampler.seed),
        })
    }

    fn policy(&self) -> Result<&'m VectorField> {
        let kind = if self.variant == Variant::Fmp {
            NetKind::PolicyFmp
        } else {
            NetKind::PolicyDap
        };
        self.models.require(self.variant, kind)
    }

    /// One action chunk in normalized units for a normalized observation chunk.
    pub fn sample_normalized(&mut self, obs: &Tensor, true_next: Option<&Tensor>) -> Result<Tensor> {
        let ema = self.sampler.use_ema;
        let steps = self.sampler.num_steps;
        let m = self.models;
        let policy = self.policy()?.view(ema);
        let mut rngs = [self.rng.clone()];
        let a = match self.variant {
            Variant::Dap => {
                let dynamics = m.require(self.variant, NetKind::Dynamics)?.view(ema);
                dap_sample_batch(&dynamics, &policy, obs, steps, self.sampler.warm_start, &mut rngs, None)?.0
            }
            Variant::Fmp => conditioned_sample_batch(&policy, &[obs], steps, &mut rngs, Stage::Action, None)?,
            Variant::VideoConditioned => {
                let video = m.require(self.variant, NetKind::VideoPredictor)?.view(ema);
                video_conditioned_sample_batch(&video, &policy, obs, steps, &mut rngs, None)?.0
            }
            Variant::GtConditioned => {
                let next = true_next.ok_or_else(|| {
                    Error::InvalidArgument("ground-truth conditioning needs the true next observations".into())
                })?;
                conditioned_sample_batch(&policy, &[obs, next], steps, &mut rngs, Stage::Action, None)?
            }
        };
        self.rng = rngs[0].clone();
        Ok(a)
    }
}

impl Agent for LearnedAgent<'_> {
    fn name(&self) -> String {
        self.variant.name().into()
    }

    fn begin_trial(&mut self, trial_seed: u64) {
        self.rng = SeededRng::new(derive_seed(self.sampler.seed, trial_seed));
    }

    fn act(&mut self, env: &TaskSpec, state: &EnvState, history: &[Observation]) -> Result<Vec<Action>> {
        let spec = self.policy()?.spec().clone();
        let stats = &self.models.stats;
        let mut obs = observation_chunk(history, spec.obs_horizon);
        stats.normalize_obs(&mut obs);
        let obs = Tensor::matrix(1, spec.obs_chunk_len(), obs)?;
        let true_next = if self.variant == Variant::GtConditioned {
            let (_, next) = expert_lookahead(env, state, spec.obs_horizon);
            let mut flat: Vec<f64> = next.iter().flatten().copied().collect();
            stats.normalize_obs(&mut flat);
            Some(Tensor::matrix(1, spec.obs_chunk_len(), flat)?)
        } else {
            None
        };
        let mut a = self.sample_normalized(&obs, true_next.as_ref())?.into_data();
        stats.denormalize_actions(&mut a);
        Ok(a.chunks_exact(spec.action_dim)
            .map(|c| {
                let mut act = [0.0; ACTION_DIM];
                for (d, s) in act.iter_mut().zip(c) {
                    *d = *s;
                }
                act
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub trials: Vec<TrialRecord>,
    /// Wall-clock seconds per `act` call; excluded from deterministic outputs.
    pub seconds_per_chunk: f64,
}

impl RolloutResult {
    pub fn success_rate(&self) -> f64 {
        self.trials.iter().filter(|t| t.success).count() as f64 / self.trials.len().max(1) as f64
    }

    pub fn mean_length(&self) -> f64 {
        self.trials.iter().map(|t| t.steps as f64).sum::<f64>() / self.trials.len().max(1) as f64
    }
}

/// Runs `config.n_trials` seeded episodes: observe, sample a chunk, execute
/// its first `execute_first` actions, repeat until the episode ends.
pub fn rollout(task: &TaskSpec, agent: &mut dyn Agent, config: &EvalConfig) -> Result<RolloutResult> {
    config.validate()?;
    let env = TaskSpec {
        max_steps: config.max_steps,
        ood: config.ood,
        ..*task
    };
    env.validate()?;
    let mut trials = Vec::with_capacity(config.n_trials);
    let mut calls = 0usize;
    let mut seconds = 0.0;
    for seed in config.trial_seeds() {
        agent.begin_trial(seed);
        let (mut state, obs) = env.reset(seed);
        let mut history = vec![obs];
        let success = 'episode: loop {
            let start = Instant::now();
            let chunk = agent.act(&env, &state, &history)?;
            seconds += start.elapsed().as_secs_f64();
            calls += 1;
            if chunk.is_empty() {
                return Err(Error::InvalidArgument(format!("agent {} returned an empty chunk", agent.name())));
            }
            for a in chunk.iter().take(config.execute_first) {
                let t = env.step(&state, a);
                state = t.state;
                history.push(t.observation);
                if t.done {
                    break 'episode t.success;
                }
            }
        };
        trials.push(TrialRecord {
            seed,
            success,
            steps: state.steps,
        });
    }
    Ok(RolloutResult {
        trials,
        seconds_per_chunk: seconds / calls.max(1) as f64,
    })
}

/// Success table over every (variant, mode) pair with shared trial seeds.
pub fn ood_suite(
    task: &TaskSpec,
    models: &ModelSet,
    variants: &[Variant],
    modes: &[OodConfig],
    config: &EvalConfig,
) -> Result<Vec<(Variant, OodConfig, RolloutResult)>> {
    let mut out = Vec::new();
    for &mode in modes {
        for &v in variants {
            let mut agent = LearnedAgent::new(v, models, config.sampler)?;
            let cfg = EvalConfig { ood: mode, ..config.clone() };
            out.push((v, mode, rollout(task, &mut agent, &cfg)?));
        }
    }
    Ok(out)
}

/// The three perturbations plus the unperturbed setting at one magnitude.
pub fn ood_modes(magnitude: f64) -> Result<Vec<OodConfig>> {
    OodMode::ALL.iter().map(|&m| OodConfig::new(m, if m == OodMode::None { 0.0 } else { magnitude })).collect()
}
