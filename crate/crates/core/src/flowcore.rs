//! Linear-path conditional flow matching primitives.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{SeededRng, Tensor};

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("flow time {tau} outside [0, 1]")))
    }
}

/// `τ·x1 + (1−τ)·x0`.
pub fn interpolate(x1: &Tensor, x0: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    x1.zip_with(x0, "interpolate", |a, b| tau * a + (1.0 - tau) * b)
}

/// Conditional target field `x1 − x0`; independent of τ.
pub fn cfm_target(x1: &Tensor, x0: &Tensor) -> Result<Tensor> {
    x1.zip_with(x0, "cfm_target", |a, b| a - b)
}

/// One-shot jump to the end of the flow: `x_τ + (1−τ)·v`.
pub fn extrapolate(x_tau: &Tensor, tau: f64, v: &Tensor) -> Result<Tensor> {
    check_tau(tau)?;
    x_tau.zip_with(v, "extrapolate", |x, u| x + (1.0 - tau) * u)
}

pub fn euler_step(x_tau: &Tensor, v: &Tensor, dtau: f64) -> Result<Tensor> {
    if !(dtau > 0.0) {
        return Err(Error::InvalidArgument(format!("euler step size must be positive, got {dtau}")));
    }
    x_tau.zip_with(v, "euler_step", |x, u| x + dtau * u)
}

/// A flow sample together with its flow time and cached end-point estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    value: Tensor,
    tau: f64,
    extrapolated: Option<Tensor>,
}

impl FlowState {
    pub fn new(value: Tensor, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self {
            value,
            tau,
            extrapolated: None,
        })
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn extrapolated(&self) -> Option<&Tensor> {
        self.extrapolated.as_ref()
    }

    /// Best current estimate of the end point: the cached extrapolation, or
    /// the raw sample when nothing has been cached yet.
    pub fn estimate(&self) -> &Tensor {
        self.extrapolated.as_ref().unwrap_or(&self.value)
    }

    pub fn set_extrapolated(&mut self, x: Tensor) -> Result<()> {
        x.ensure_shape(self.value.shape(), "FlowState::set_extrapolated")?;
        self.extrapolated = Some(x);
        Ok(())
    }

    /// Caches `extrapolate(value, tau, v)` and then advances by one Euler step.
    pub fn advance(&mut self, v: &Tensor, dtau: f64) -> Result<()> {
        let ext = extrapolate(&self.value, self.tau, v)?;
        self.value = euler_step(&self.value, v, dtau)?;
        self.tau = (self.tau + dtau).min(1.0);
        self.extrapolated = Some(ext);
        Ok(())
    }
}

/// Uniform grid over `[0, 1]` with left endpoints `i·δτ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowSchedule {
    num_steps: usize,
}

impl FlowSchedule {
    pub fn new(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidArgument("num_steps must be at least 1".into()));
        }
        Ok(Self { num_steps })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn dtau(&self) -> f64 {
        1.0 / self.num_steps as f64
    }

    /// Left endpoints `{0, δτ, …, 1−δτ}`.
    pub fn taus(&self) -> impl Iterator<Item = f64> + '_ {
        let d = self.dtau();
        (0..self.num_steps).map(move |i| i as f64 * d)
    }
}

/// Integrates `field` from Gaussian noise of `shape` to flow time 1 with
/// forward Euler.
pub fn sample_flow<F>(shape: &[usize], schedule: FlowSchedule, rng: &mut SeededRng, field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    integrate(rng.gaussian(shape), schedule, field, |_| {})
}

/// One Euler step as seen by an [`integrate`] observer.
#[derive(Debug)]
pub struct StepView<'a> {
    pub step: usize,
    pub tau: f64,
    /// Sample before the step.
    pub x: &'a Tensor,
    pub v: &'a Tensor,
    /// `extrapolate(x, tau, v)`.
    pub extrapolated: &'a Tensor,
}

/// Forward-Euler integration from `x0`; `on_step` sees every step.
pub fn integrate<F, O>(x0: Tensor, schedule: FlowSchedule, mut field: F, mut on_step: O) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
    O: FnMut(&StepView<'_>),
{
    let mut x = x0;
    let dtau = schedule.dtau();
    for (i, tau) in schedule.taus().enumerate() {
        let v = field(&x, tau)?;
        if v.shape() != x.shape() {
            return Err(shape_err(format!("vector field at step {i}"), x.shape(), v.shape()));
        }
        if !v.is_finite() {
            return Err(Error::NonFiniteSample { step: i, tau });
        }
        let ext = extrapolate(&x, tau, &v)?;
        on_step(&StepView {
            step: i,
            tau,
            x: &x,
            v: &v,
            extrapolated: &ext,
        });
        x = euler_step(&x, &v, dtau)?;
    }
    Ok(x)
}
