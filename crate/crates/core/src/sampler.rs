//! Inference-time chunk generation.
//!
//! All samplers work in normalized units on batches: row `b` of every
//! tensor belongs to batch item `b`, and item `b` draws its noise from
//! `rngs[b]` (actions first, then observations), so a batch of one and a
//! batch of many see the same noise for the same per-item seeds.
//!
//! The coupled sampler runs the policy and dynamics flows side by side. At
//! step `i` each field is conditioned on the *other* model's extrapolated
//! end point cached at step `i−1`; both fields are evaluated before either
//! cache is refreshed, so the two updates never depend on their order.

use std::io::Write;

use crate::error::{Error, Result};
use crate::flowcore::{euler_step, extrapolate, integrate, FlowSchedule};
use crate::nets::{FieldView, NetKind, VectorField};
use crate::numerics::{SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Coupled policy + dynamics sampling.
    Dap,
    /// Observation-only policy; also reported as the "without dynamics" ablation.
    Fmp,
    /// Next observation from the action-agnostic predictor, then the policy.
    VideoConditioned,
    /// Policy conditioned on the simulator's true next observations (diagnostic).
    GtConditioned,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Dap,
        Variant::Fmp,
        Variant::VideoConditioned,
        Variant::GtConditioned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dap => "dap",
            Variant::Fmp => "fmp",
            Variant::VideoConditioned => "video_conditioned",
            Variant::GtConditioned => "gt_conditioned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampler variant {s:?}")))
    }

    /// Networks the variant needs.
    pub fn required(self) -> &'static [NetKind] {
        match self {
            Variant::Dap => &[NetKind::Dynamics, NetKind::PolicyDap],
            Variant::Fmp => &[NetKind::PolicyFmp],
            Variant::VideoConditioned => &[NetKind::VideoPredictor, NetKind::PolicyDap],
            Variant::GtConditioned => &[NetKind::PolicyDap],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub variant: Variant,
    pub use_ema: bool,
    pub seed: u64,
    /// Refresh both caches with one field evaluation at τ = 0 before the loop.
    pub warm_start: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 10,
            variant: Variant::Dap,
            use_ema: true,
            seed: 0,
            warm_start: false,
        }
    }
}

impl SamplerConfig {
    pub fn schedule(&self) -> Result<FlowSchedule> {
        FlowSchedule::new(self.num_steps)
    }
}

/// A batched conditional vector field with rows of `target_len` entries.
pub trait BatchField {
    fn target_len(&self) -> usize;
    fn eval(&self, x: &Tensor, tau: f64, conds: &[&Tensor]) -> Result<Tensor>;
}

impl BatchField for FieldView<'_> {
    fn target_len(&self) -> usize {
        self.spec().target_len()
    }

    fn eval(&self, x: &Tensor, tau: f64, conds: &[&Tensor]) -> Result<Tensor> {
        let batch = x.rows();
        let raw: Vec<&[f64]> = conds.iter().map(|c| c.data()).collect();
        let out = self.eval_batch(x.data(), &vec![tau; batch], &raw)?;
        Tensor::matrix(batch, self.target_len(), out)
    }
}

/// Adapter turning a closure into a [`BatchField`]; used for oracle fields.
pub struct FnField<F> {
    pub target_len: usize,
    pub f: F,
}

impl<F> BatchField for FnField<F>
where
    F: Fn(&Tensor, f64, &[&Tensor]) -> Result<Tensor>,
{
    fn target_len(&self) -> usize {
        self.target_len
    }

    fn eval(&self, x: &Tensor, tau: f64, conds: &[&Tensor]) -> Result<Tensor> {
        (self.f)(x, tau, conds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coupled,
    Observation,
    Action,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Coupled => "coupled",
            Stage::Observation => "observation",
            Stage::Action => "action",
        }
    }
}

/// Per-step instrumentation record. Tensors are `batch × len`.
#[derive(Debug)]
pub struct TraceRecord<'a> {
    pub stage: Stage,
    pub step: usize,
    pub tau: f64,
    pub v_action: Option<&'a Tensor>,
    pub v_obs: Option<&'a Tensor>,
    pub action_hat: Option<&'a Tensor>,
    pub obs_hat: Option<&'a Tensor>,
}

pub type TraceFn<'t> = dyn FnMut(&TraceRecord<'_>) + 't;

fn noise(rngs: &mut [SeededRng], len: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rngs.len(), len]);
    for (row, rng) in t.data_mut().chunks_exact_mut(len).zip(rngs.iter_mut()) {
        rng.fill_gaussian(row);
    }
    t
}

fn check_batch(obs: &Tensor, rngs: &[SeededRng]) -> Result<usize> {
    if obs.rows() != rngs.len() || rngs.is_empty() {
        return Err(Error::Shape {
            context: "sampler batch (conditions vs rngs)".into(),
            expected: vec![rngs.len()],
            got: vec![obs.rows()],
        });
    }
    Ok(rngs.len())
}

fn finite_or(t: &Tensor, step: usize, tau: f64) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteSample { step, tau })
    }
}

/// Coupled policy/dynamics sampling. Returns `(actions, next_obs)`, each
/// `batch × len`, in normalized units.
pub fn dap_sample_batch(
    dynamics: &dyn BatchField,
    policy: &dyn BatchField,
    obs: &Tensor,
    num_steps: usize,
    warm_start: bool,
    rngs: &mut [SeededRng],
    mut trace: Option<&mut TraceFn<'_>>,
) -> Result<(Tensor, Tensor)> {
    let batch = check_batch(obs, rngs)?;
    let schedule = FlowSchedule::new(num_steps)?;
    let dtau = schedule.dtau();
    let mut a = noise(rngs, policy.target_len());
    let mut o = noise(rngs, dynamics.target_len());
    debug_assert_eq!(a.rows(), batch);
    let mut a_hat = a.clone();
    let mut o_hat = o.clone();
    if warm_start {
        let v_a = policy.eval(&a, 0.0, &[obs, &o_hat])?;
        let v_o = dynamics.eval(&o, 0.0, &[obs, &a_hat])?;
        finite_or(&v_a, 0, 0.0)?;
        finite_or(&v_o, 0, 0.0)?;
        a_hat = extrapolate(&a, 0.0, &v_a)?;
        o_hat = extrapolate(&o, 0.0, &v_o)?;
    }
    for (i, tau) in schedule.taus().enumerate() {
        let v_a = policy.eval(&a, tau, &[obs, &o_hat])?;
        let v_o = dynamics.eval(&o, tau, &[obs, &a_hat])?;
        finite_or(&v_a, i, tau)?;
        finite_or(&v_o, i, tau)?;
        a_hat = extrapolate(&a, tau, &v_a)?;
        o_hat = extrapolate(&o, tau, &v_o)?;
        a = euler_step(&a, &v_a, dtau)?;
        o = euler_step(&o, &v_o, dtau)?;
        if let Some(t) = trace.as_deref_mut() {
            t(&TraceRecord {
                stage: Stage::Coupled,
                step: i,
                tau,
                v_action: Some(&v_a),
                v_obs: Some(&v_o),
                action_hat: Some(&a_hat),
                obs_hat: Some(&o_hat),
            });
        }
    }
    Ok((a, o))
}

/// Single-model flow over a fixed condition list, one noise draw per item.
pub fn conditioned_sample_batch(
    field: &dyn BatchField,
    conds: &[&Tensor],
    num_steps: usize,
    rngs: &mut [SeededRng],
    stage: Stage,
    mut trace: Option<&mut TraceFn<'_>>,
) -> Result<Tensor> {
    let schedule = FlowSchedule::new(num_steps)?;
    let x0 = noise(rngs, field.target_len());
    integrate(
        x0,
        schedule,
        |x, tau| field.eval(x, tau, conds),
        |s| {
            if let Some(t) = trace.as_deref_mut() {
                let (v_action, v_obs, action_hat, obs_hat) = match stage {
                    Stage::Observation => (None, Some(s.v), None, Some(s.extrapolated)),
                    _ => (Some(s.v), None, Some(s.extrapolated), None),
                };
                t(&TraceRecord {
                    stage,
                    step: s.step,
                    tau: s.tau,
                    v_action,
                    v_obs,
                    action_hat,
                    obs_hat,
                });
            }
        },
    )
}

fn expect_kind(net: &VectorField, kind: NetKind) -> Result<()> {
    if net.kind() == kind {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "expected a {} network, got {}",
            kind.name(),
            net.kind().name()
        )))
    }
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    t.clone().reshape(&[1, t.len()])
}

/// Single-item coupled sampler. `o_t` is `T × d_o`; returns `(H × d_a, T × d_o)`.
pub fn dap_sample(
    dynamics: &VectorField,
    policy: &VectorField,
    o_t: &Tensor,
    config: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<(Tensor, Tensor)> {
    dap_sample_traced(dynamics, policy, o_t, config, rng, None)
}

pub fn dap_sample_traced(
    dynamics: &VectorField,
    policy: &VectorField,
    o_t: &Tensor,
    config: &SamplerConfig,
    rng: &mut SeededRng,
    trace: Option<&mut TraceFn<'_>>,
) -> Result<(Tensor, Tensor)> {
    expect_kind(dynamics, NetKind::Dynamics)?;
    expect_kind(policy, NetKind::PolicyDap)?;
    o_t.ensure_shape(&policy.spec().obs_shape(), "dap_sample observation")?;
    let mut rngs = [rng.clone()];
    let (a, o) = dap_sample_batch(
        &dynamics.view(config.use_ema),
        &policy.view(config.use_ema),
        &as_batch(o_t)?,
        config.num_steps,
        config.warm_start,
        &mut rngs,
        trace,
    )?;
    *rng = rngs[0].clone();
    Ok((
        a.reshape(&policy.spec().action_shape())?,
        o.reshape(&dynamics.spec().obs_shape())?,
    ))
}

pub fn fmp_sample(policy: &VectorField, o_t: &Tensor, config: &SamplerConfig, rng: &mut SeededRng) -> Result<Tensor> {
    expect_kind(policy, NetKind::PolicyFmp)?;
    o_t.ensure_shape(&policy.spec().obs_shape(), "fmp_sample observation")?;
    let mut rngs = [rng.clone()];
    let a = conditioned_sample_batch(
        &policy.view(config.use_ema),
        &[&as_batch(o_t)?],
        config.num_steps,
        &mut rngs,
        Stage::Action,
        None,
    )?;
    *rng = rngs[0].clone();
    a.reshape(&policy.spec().action_shape())
}

/// Two-stage sampler: the next observation flow finishes before the action
/// flow starts, and the action flow never feeds back.
pub fn video_conditioned_sample_batch(
    video: &dyn BatchField,
    policy: &dyn BatchField,
    obs: &Tensor,
    num_steps: usize,
    rngs: &mut [SeededRng],
    mut trace: Option<&mut TraceFn<'_>>,
) -> Result<(Tensor, Tensor)> {
    check_batch(obs, rngs)?;
    // Draw action noise first so every variant consumes the per-item stream
    // in the same order.
    let mut action_rngs: Vec<SeededRng> = rngs.to_vec();
    let _ = noise(rngs, policy.target_len());
    let o_next = conditioned_sample_batch(video, &[obs], num_steps, rngs, Stage::Observation, trace.as_deref_mut())?;
    let a = conditioned_sample_batch(
        policy,
        &[obs, &o_next],
        num_steps,
        &mut action_rngs,
        Stage::Action,
        trace,
    )?;
    Ok((a, o_next))
}

pub fn video_conditioned_sample(
    video: &VectorField,
    policy: &VectorField,
    o_t: &Tensor,
    config: &SamplerConfig,
    rng: &mut SeededRng,
    trace: Option<&mut TraceFn<'_>>,
) -> Result<Tensor> {
    expect_kind(video, NetKind::VideoPredictor)?;
    expect_kind(policy, NetKind::PolicyDap)?;
    o_t.ensure_shape(&policy.spec().obs_shape(), "video_conditioned_sample observation")?;
    let mut rngs = [rng.clone()];
    let (a, _) = video_conditioned_sample_batch(
        &video.view(config.use_ema),
        &policy.view(config.use_ema),
        &as_batch(o_t)?,
        config.num_steps,
        &mut rngs,
        trace,
    )?;
    *rng = rngs[0].clone();
    a.reshape(&policy.spec().action_shape())
}

pub fn gt_conditioned_sample(
    policy: &VectorField,
    o_t: &Tensor,
    o_next_true: &Tensor,
    config: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    expect_kind(policy, NetKind::PolicyDap)?;
    let shape = policy.spec().obs_shape();
    o_t.ensure_shape(&shape, "gt_conditioned_sample observation")?;
    o_next_true.ensure_shape(&shape, "gt_conditioned_sample next observation")?;
    let mut rngs = [rng.clone()];
    let a = conditioned_sample_batch(
        &policy.view(config.use_ema),
        &[&as_batch(o_t)?, &as_batch(o_next_true)?],
        config.num_steps,
        &mut rngs,
        Stage::Action,
        None,
    )?;
    *rng = rngs[0].clone();
    a.reshape(&policy.spec().action_shape())
}

/// Streams trace records as CSV rows:
/// `stage,item,step,tau,v_action_norm,v_obs_norm,action_hat,obs_hat`
/// (vectors are `;`-joined, empty when absent).
pub struct TraceCsv<W: Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl<W: Write> TraceCsv<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "stage,item,step,tau,v_action_norm,v_obs_norm,action_hat,obs_hat")?;
        Ok(Self { out, error: None })
    }

    pub fn record(&mut self, r: &TraceRecord<'_>) {
        if self.error.is_some() {
            return;
        }
        let batch = [r.v_action, r.v_obs].iter().flatten().map(|t| t.rows()).next().unwrap_or(0);
        for b in 0..batch {
            let norm = |t: Option<&Tensor>| {
                t.map(|t| format!("{:.9e}", t.row(b).iter().map(|v| v * v).sum::<f64>().sqrt()))
                    .unwrap_or_default()
            };
            let vec = |t: Option<&Tensor>| {
                t.map(|t| t.row(b).iter().map(|v| format!("{v:.9e}")).collect::<Vec<_>>().join(";"))
                    .unwrap_or_default()
            };
            if let Err(e) = writeln!(
                self.out,
                "{},{},{},{:.6},{},{},{},{}",
                r.stage.name(),
                b,
                r.step,
                r.tau,
                norm(r.v_action),
                norm(r.v_obs),
                vec(r.action_hat),
                vec(r.obs_hat)
            ) {
                self.error = Some(e);
                return;
            }
        }
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}
