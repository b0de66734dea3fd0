//! Minibatch flow-matching trainers for the four network heads.
//!
//! Every loss draws, per sample and in order, a flow time `τ ~ U[0,1)` and a
//! Gaussian start point `ε`, regresses the field at `τ·x1 + (1−τ)·ε` onto
//! `x1 − ε`, and reports `(1/B)·Σ_b w_b·‖v_b − u_b‖²` (squared error summed
//! over the chunk, averaged over the batch).

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{chunk_all, ChunkedSample, DatasetSplit, Episode, NormStats, Source};
use crate::error::{Error, Result};
use crate::nets::{FieldView, NetKind, NetSpec, VectorField};
use crate::numerics::{derive_seed, AdamConfig, AdamState, Mlp, SeededRng, Tensor};
use crate::sampler::{conditioned_sample_batch, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauDistribution {
    Uniform,
}

impl TauDistribution {
    pub fn name(self) -> &'static str {
        "uniform"
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TauDistribution::Uniform),
            _ => Err(Error::Config(format!("unknown tau distribution {s:?}"))),
        }
    }

    pub fn sample(self, rng: &mut SeededRng) -> f64 {
        match self {
            TauDistribution::Uniform => rng.uniform(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau_distribution: TauDistribution,
    pub ema_decay: f64,
    pub seed: u64,
    pub expert_weight: f64,
    pub random_weight: f64,
    /// Validation chunks used for the per-epoch sampled action MSE of policy
    /// heads (0 disables it).
    pub action_mse_chunks: usize,
    /// Euler steps used for that action MSE.
    pub action_mse_steps: usize,
    /// Probability that a policy sample's next-observation condition is
    /// replaced by Gaussian noise, the value the sampler's cache holds
    /// before its first refinement. Only used by the coupled policy head.
    pub cond_noise_prob: f64,
}

impl TrainConfig {
    pub fn dynamics_default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 64,
            epochs: 100,
            tau_distribution: TauDistribution::Uniform,
            ema_decay: 0.999,
            seed: 0,
            expert_weight: 1.0,
            random_weight: 1.0,
            action_mse_chunks: 256,
            action_mse_steps: 10,
            cond_noise_prob: 0.0,
        }
    }

    pub fn policy_default() -> Self {
        Self {
            epochs: 200,
            cond_noise_prob: 0.25,
            ..Self::dynamics_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        for (name, w) in [("expert_weight", self.expert_weight), ("random_weight", self.random_weight)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(0.0..=1.0).contains(&self.cond_noise_prob) {
            return Err(Error::Config(format!("cond_noise_prob {} outside [0, 1]", self.cond_noise_prob)));
        }
        if self.action_mse_steps == 0 {
            return Err(Error::Config("action_mse_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            tau: self.tau_distribution,
            cond_noise_prob: self.cond_noise_prob,
        }
    }

    fn weight(&self, source: Source) -> f64 {
        match source {
            Source::Expert => self.expert_weight,
            Source::Random => self.random_weight,
        }
    }

    /// Effective EMA decay at optimizer step `n` (1-based): ramps up as
    /// `(1+n)/(10+n)` so short runs are not dominated by the initialization.
    pub fn ema_decay_at(&self, n: u64) -> f64 {
        let ramp = (1.0 + n as f64) / (10.0 + n as f64);
        self.ema_decay.min(ramp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_action_mse: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// `epoch,train_loss,val_loss,val_action_mse,seconds`; absent values are
    /// left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_action_mse,seconds\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.9e}")).unwrap_or_default();
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.9e},{},{},{:.3}",
                r.epoch,
                r.train_loss,
                opt(r.val_loss),
                opt(r.val_action_mse),
                r.seconds
            );
        }
        s
    }

    /// The loss curve used for convergence checks: validation loss when every
    /// epoch has one (its noise is fixed across epochs), else training loss.
    pub fn monitored_losses(&self) -> Vec<f64> {
        if !self.epochs.is_empty() && self.epochs.iter().all(|r| r.val_loss.is_some()) {
            self.epochs.iter().filter_map(|r| r.val_loss).collect()
        } else {
            self.epochs.iter().map(|r| r.train_loss).collect()
        }
    }

    /// First epoch (1-based) from which the monitored loss changes by less
    /// than `tol` relative to the previous epoch for `patience` consecutive
    /// epochs.
    pub fn plateau_epoch(&self, tol: f64, patience: usize) -> Option<usize> {
        let l = self.monitored_losses();
        let patience = patience.max(1);
        let calm: Vec<bool> = l
            .windows(2)
            .map(|w| ((w[1] - w[0]) / w[0].abs().max(f64::MIN_POSITIVE)).abs() < tol)
            .collect();
        // calm[k] describes epoch k+2 (1-based).
        (0..calm.len())
            .find(|&k| k + patience <= calm.len() && calm[k..k + patience].iter().all(|&c| c))
            .map(|k| k + 2)
    }
}

/// Flow target and condition blocks of a sample for a network kind.
pub fn sample_parts(kind: NetKind, s: &ChunkedSample) -> (&Tensor, Vec<&Tensor>) {
    match kind {
        NetKind::Dynamics => (&s.next_obs, vec![&s.obs, &s.actions]),
        NetKind::PolicyDap => (&s.actions, vec![&s.obs, &s.next_obs]),
        NetKind::PolicyFmp => (&s.actions, vec![&s.obs]),
        NetKind::VideoPredictor => (&s.next_obs, vec![&s.obs]),
    }
}

/// Sampling choices of [`flow_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub tau: TauDistribution,
    pub cond_noise_prob: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            tau: TauDistribution::Uniform,
            cond_noise_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Option<Mlp>,
}

/// Weighted flow-matching loss of `params` on `batch`, optionally with
/// parameter gradients. `batch_index` only labels errors.
///
/// With a non-zero `cond_noise_prob` each coupled-policy sample then draws
/// a uniform and, when it falls below the probability, a Gaussian
/// replacement for its next-observation condition.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss(
    params: &Mlp,
    spec: &NetSpec,
    batch: &[&ChunkedSample],
    weights: &[f64],
    opts: LossOptions,
    rng: &mut SeededRng,
    want_grads: bool,
    batch_index: usize,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    if weights.len() != batch.len() {
        return Err(crate::error::shape_err("loss weights", &[batch.len()], &[weights.len()]));
    }
    let view = FieldView::new(spec, params);
    let tl = spec.target_len();
    let b = batch.len();
    let mut input = Vec::with_capacity(b * spec.input_dim());
    let mut targets = Vec::with_capacity(b * tl);
    let mut eps = vec![0.0; tl];
    let mut x_tau = vec![0.0; tl];
    let augment = spec.kind == NetKind::PolicyDap && opts.cond_noise_prob > 0.0;
    let mut cond_noise = vec![0.0; if augment { spec.obs_chunk_len() } else { 0 }];
    for s in batch {
        let (x1, conds) = sample_parts(spec.kind, s);
        let tau = opts.tau.sample(rng);
        rng.fill_gaussian(&mut eps);
        for k in 0..tl {
            x_tau[k] = tau * x1.data()[k] + (1.0 - tau) * eps[k];
            targets.push(x1.data()[k] - eps[k]);
        }
        let mut raw: Vec<&[f64]> = conds.iter().map(|c| c.data()).collect();
        if augment && rng.uniform() < opts.cond_noise_prob {
            rng.fill_gaussian(&mut cond_noise);
            raw[1] = &cond_noise;
        }
        view.push_input_row(&x_tau, tau, &raw, &mut input)?;
    }
    let input = Tensor::matrix(b, spec.input_dim(), input)?;
    let trace = params.forward_trace(&input).map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { batch: batch_index },
        other => other,
    })?;
    let out = trace.output();
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(if want_grads { b * tl } else { 0 });
    for (r, w) in weights.iter().enumerate() {
        let v = &out[r * tl..(r + 1) * tl];
        let u = &targets[r * tl..(r + 1) * tl];
        let mut sq = 0.0;
        for (vk, uk) in v.iter().zip(u) {
            let d = vk - uk;
            sq += d * d;
            if want_grads {
                upstream.push(2.0 * w * d * inv_b);
            }
        }
        loss += w * sq;
    }
    loss *= inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch: batch_index });
    }
    let grads = if want_grads {
        let upstream = Tensor::matrix(b, tl, upstream)?;
        Some(params.backward_trace(&trace, &input, &upstream, false)?.0)
    } else {
        None
    };
    Ok(LossOutput { loss, grads })
}

fn unit_loss(params: &Mlp, spec: &NetSpec, batch: &[ChunkedSample], rng: &mut SeededRng) -> Result<(f64, Mlp)> {
    let refs: Vec<&ChunkedSample> = batch.iter().collect();
    let out = flow_loss(params, spec, &refs, &vec![1.0; refs.len()], LossOptions::default(), rng, true, 0)?;
    Ok((out.loss, out.grads.expect("gradients requested")))
}

fn expect_spec_kind(spec: &NetSpec, kinds: &[NetKind]) -> Result<()> {
    if kinds.contains(&spec.kind) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("loss not defined for a {} network", spec.kind.name())))
    }
}

/// Next-observation loss conditioned on `(o_t, a_t)`.
pub fn dyn_loss(params: &Mlp, spec: &NetSpec, batch: &[ChunkedSample], rng: &mut SeededRng) -> Result<(f64, Mlp)> {
    expect_spec_kind(spec, &[NetKind::Dynamics])?;
    unit_loss(params, spec, batch, rng)
}

/// Action-chunk loss conditioned on `(o_t, o_{t+1})`, or on `o_t` alone for
/// the observation-only head.
pub fn policy_loss(params: &Mlp, spec: &NetSpec, batch: &[ChunkedSample], rng: &mut SeededRng) -> Result<(f64, Mlp)> {
    expect_spec_kind(spec, &[NetKind::PolicyDap, NetKind::PolicyFmp])?;
    unit_loss(params, spec, batch, rng)
}

/// Next-observation loss conditioned on `o_t` alone.
pub fn video_loss(params: &Mlp, spec: &NetSpec, batch: &[ChunkedSample], rng: &mut SeededRng) -> Result<(f64, Mlp)> {
    expect_spec_kind(spec, &[NetKind::VideoPredictor])?;
    unit_loss(params, spec, batch, rng)
}

/// Normalized chunks of every episode.
pub fn prepare_samples(episodes: &[Episode], spec: &NetSpec, stats: &NormStats) -> Result<Vec<ChunkedSample>> {
    Ok(chunk_all(episodes, spec.obs_horizon, spec.action_horizon)?
        .iter()
        .map(|s| s.normalized(stats))
        .collect())
}

fn require_source(splits: &[&DatasetSplit], source: Source, what: &str) -> Result<()> {
    for split in splits {
        if let Some(e) = split.train.iter().chain(&split.validation).find(|e| e.source != source) {
            return Err(Error::Contract(format!(
                "{what} accepts only {} episodes, got a {} episode (seed {})",
                source.name(),
                e.source.name(),
                e.seed
            )));
        }
    }
    Ok(())
}

/// Trains the action-conditioned dynamics model on expert ∪ random data
/// (expert only when `random` is `None`).
pub fn train_dynamics(
    expert: &DatasetSplit,
    random: Option<&DatasetSplit>,
    spec: &NetSpec,
    stats: &NormStats,
    config: &TrainConfig,
) -> Result<(VectorField, TrainLog)> {
    expect_spec_kind(spec, &[NetKind::Dynamics])?;
    require_source(&[expert], Source::Expert, "the expert split")?;
    if let Some(r) = random {
        require_source(&[r], Source::Random, "the random split")?;
    }
    let mut train_eps = expert.train.clone();
    let mut val_eps = expert.validation.clone();
    if let Some(r) = random {
        train_eps.extend(r.train.iter().cloned());
        val_eps.extend(r.validation.iter().cloned());
    }
    let train = prepare_samples(&train_eps, spec, stats)?;
    let val = prepare_samples(&val_eps, spec, stats)?;
    fit(spec, &train, &val, config)
}

/// Trains a policy head on expert data; random episodes are rejected.
pub fn train_policy(
    expert: &DatasetSplit,
    spec: &NetSpec,
    stats: &NormStats,
    config: &TrainConfig,
) -> Result<(VectorField, TrainLog)> {
    expect_spec_kind(spec, &[NetKind::PolicyDap, NetKind::PolicyFmp])?;
    require_source(&[expert], Source::Expert, "policy training")?;
    let train = prepare_samples(&expert.train, spec, stats)?;
    let val = prepare_samples(&expert.validation, spec, stats)?;
    fit(spec, &train, &val, config)
}

/// Trains the action-agnostic next-observation predictor on expert data.
pub fn train_video(
    expert: &DatasetSplit,
    spec: &NetSpec,
    stats: &NormStats,
    config: &TrainConfig,
) -> Result<(VectorField, TrainLog)> {
    expect_spec_kind(spec, &[NetKind::VideoPredictor])?;
    require_source(&[expert], Source::Expert, "video predictor training")?;
    let train = prepare_samples(&expert.train, spec, stats)?;
    let val = prepare_samples(&expert.validation, spec, stats)?;
    fit(spec, &train, &val, config)
}

const VAL_BATCH: usize = 256;

/// Mean weighted loss over `samples` in fixed-order batches, without
/// condition augmentation.
pub fn evaluate_loss(
    params: &Mlp,
    spec: &NetSpec,
    samples: &[ChunkedSample],
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for (k, chunk) in samples.chunks(VAL_BATCH).enumerate() {
        let refs: Vec<&ChunkedSample> = chunk.iter().collect();
        let w: Vec<f64> = chunk.iter().map(|s| config.weight(s.source)).collect();
        let opts = LossOptions {
            cond_noise_prob: 0.0,
            ..config.loss_options()
        };
        let out = flow_loss(params, spec, &refs, &w, opts, rng, false, k)?;
        total += out.loss * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Mean `‖â − a‖²` of sampled action chunks against the recorded ones for a
/// policy head; item `i` uses its own seed `derive_seed(seed, i)`.
pub fn sampled_action_mse(
    view: &FieldView<'_>,
    samples: &[ChunkedSample],
    num_steps: usize,
    seed: u64,
) -> Result<f64> {
    let spec = view.spec();
    expect_spec_kind(spec, &[NetKind::PolicyDap, NetKind::PolicyFmp])?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples for action MSE".into()));
    }
    let mut total = 0.0;
    for (c, chunk) in samples.chunks(VAL_BATCH).enumerate() {
        let b = chunk.len();
        let obs = Tensor::stack(&chunk.iter().map(|s| s.obs.clone()).collect::<Vec<_>>())?.reshape(&[b, spec.obs_chunk_len()])?;
        let next = Tensor::stack(&chunk.iter().map(|s| s.next_obs.clone()).collect::<Vec<_>>())?
            .reshape(&[b, spec.obs_chunk_len()])?;
        let mut rngs: Vec<SeededRng> = (0..b)
            .map(|i| SeededRng::new(derive_seed(seed, (c * VAL_BATCH + i) as u64)))
            .collect();
        let conds: Vec<&Tensor> = match spec.kind {
            NetKind::PolicyDap => vec![&obs, &next],
            _ => vec![&obs],
        };
        let a = conditioned_sample_batch(view, &conds, num_steps, &mut rngs, Stage::Action, None)?;
        for (i, s) in chunk.iter().enumerate() {
            total += a.row(i).iter().zip(s.actions.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    Ok(total / samples.len() as f64)
}

/// Generic minibatch loop shared by every head.
pub fn fit(
    spec: &NetSpec,
    train: &[ChunkedSample],
    val: &[ChunkedSample],
    config: &TrainConfig,
) -> Result<(VectorField, TrainLog)> {
    config.validate()?;
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    let mut init_rng = SeededRng::new(derive_seed(config.seed, 1));
    let mut shuffle_rng = SeededRng::new(derive_seed(config.seed, 2));
    let mut noise_rng = SeededRng::new(derive_seed(config.seed, 3));
    let val_seed = derive_seed(config.seed, 4);
    let mut net = VectorField::init(spec.clone(), &mut init_rng)?;
    net.init_ema();
    let mut adam = AdamState::new(
        net.mlp(),
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let wants_action_mse =
        matches!(spec.kind, NetKind::PolicyDap | NetKind::PolicyFmp) && config.action_mse_chunks > 0 && !val.is_empty();
    let mse_subset: Vec<ChunkedSample> = if wants_action_mse {
        let stride = (val.len() / config.action_mse_chunks).max(1);
        val.iter().step_by(stride).take(config.action_mse_chunks).cloned().collect()
    } else {
        Vec::new()
    };
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        for (k, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&ChunkedSample> = idx.iter().map(|&i| &train[i]).collect();
            let w: Vec<f64> = batch.iter().map(|s| config.weight(s.source)).collect();
            let out = flow_loss(
                net.mlp(),
                spec,
                &batch,
                &w,
                config.loss_options(),
                &mut noise_rng,
                true,
                k,
            )?;
            let grads = out.grads.expect("gradients requested");
            adam.step(net.mlp_mut(), &grads)?;
            net.ema_update(config.ema_decay_at(adam.step_count()))?;
            total += out.loss * batch.len() as f64;
        }
        let view = net.view(true);
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(view.mlp(), spec, val, config, &mut SeededRng::new(val_seed))?)
        };
        let val_action_mse = if wants_action_mse {
            Some(sampled_action_mse(&view, &mse_subset, config.action_mse_steps, val_seed)?)
        } else {
            None
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            val_action_mse,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((net, log))
}
