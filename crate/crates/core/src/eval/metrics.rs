use crate::data::ChunkedSample;
use crate::error::{Error, Result};
use crate::nets::{NetKind, VectorField};
use crate::numerics::{derive_seed, SeededRng, Tensor};
use crate::sampler::{
    conditioned_sample_batch, dap_sample_batch, video_conditioned_sample_batch, SamplerConfig, Stage, TraceRecord,
    Variant,
};

use super::ModelSet;

const BATCH: usize = 256;

/// Stacks one tensor per sample into a `batch × len` matrix.
pub fn stack_rows(samples: &[ChunkedSample], pick: impl Fn(&ChunkedSample) -> &Tensor) -> Result<Tensor> {
    let len = samples.first().map_or(0, |s| pick(s).len());
    let mut data = Vec::with_capacity(samples.len() * len);
    for s in samples {
        data.extend_from_slice(pick(s).data());
    }
    Tensor::matrix(samples.len(), len, data)
}

fn item_rngs(seed: u64, offset: usize, n: usize) -> Vec<SeededRng> {
    (0..n).map(|i| SeededRng::new(derive_seed(seed, (offset + i) as u64))).collect()
}

fn sq_row_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean `‖â − a‖²` over validation chunks (normalized units); chunk `i`
/// samples with seed `derive_seed(sampler.seed, i)`.
pub fn action_mse(variant: Variant, models: &ModelSet, samples: &[ChunkedSample], sampler: &SamplerConfig) -> Result<f64> {
    models.check(variant)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("action MSE needs a non-empty validation set".into()));
    }
    let ema = sampler.use_ema;
    let steps = sampler.num_steps;
    let mut total = 0.0;
    for (c, chunk) in samples.chunks(BATCH).enumerate() {
        let obs = stack_rows(chunk, |s| &s.obs)?;
        let mut rngs = item_rngs(sampler.seed, c * BATCH, chunk.len());
        let a = match variant {
            Variant::Dap => {
                let d = models.require(variant, NetKind::Dynamics)?.view(ema);
                let p = models.require(variant, NetKind::PolicyDap)?.view(ema);
                dap_sample_batch(&d, &p, &obs, steps, sampler.warm_start, &mut rngs, None)?.0
            }
            Variant::Fmp => {
                let p = models.require(variant, NetKind::PolicyFmp)?.view(ema);
                conditioned_sample_batch(&p, &[&obs], steps, &mut rngs, Stage::Action, None)?
            }
            Variant::VideoConditioned => {
                let v = models.require(variant, NetKind::VideoPredictor)?.view(ema);
                let p = models.require(variant, NetKind::PolicyDap)?.view(ema);
                video_conditioned_sample_batch(&v, &p, &obs, steps, &mut rngs, None)?.0
            }
            Variant::GtConditioned => {
                let p = models.require(variant, NetKind::PolicyDap)?.view(ema);
                let next = stack_rows(chunk, |s| &s.next_obs)?;
                conditioned_sample_batch(&p, &[&obs, &next], steps, &mut rngs, Stage::Action, None)?
            }
        };
        for (i, s) in chunk.iter().enumerate() {
            total += sq_row_dist(a.row(i), s.actions.data());
        }
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMse {
    pub expert: f64,
    pub random: f64,
}

/// Which next-observation generator to score.
#[derive(Debug, Clone, Copy)]
pub enum NextObsModel<'a> {
    /// Conditioned on the recorded action chunk.
    Dynamics(&'a VectorField),
    /// Conditioned on the observation chunk only.
    Video(&'a VectorField),
}

impl NextObsModel<'_> {
    fn net(&self) -> &VectorField {
        match self {
            NextObsModel::Dynamics(n) | NextObsModel::Video(n) => n,
        }
    }
}

fn split_next_obs_mse(model: NextObsModel<'_>, samples: &[ChunkedSample], sampler: &SamplerConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("next-observation MSE needs non-empty validation splits".into()));
    }
    let view = model.net().view(sampler.use_ema);
    let mut total = 0.0;
    for (c, chunk) in samples.chunks(BATCH).enumerate() {
        let obs = stack_rows(chunk, |s| &s.obs)?;
        let mut rngs = item_rngs(sampler.seed, c * BATCH, chunk.len());
        let o = match model {
            NextObsModel::Dynamics(_) => {
                let act = stack_rows(chunk, |s| &s.actions)?;
                conditioned_sample_batch(&view, &[&obs, &act], sampler.num_steps, &mut rngs, Stage::Observation, None)?
            }
            NextObsModel::Video(_) => {
                conditioned_sample_batch(&view, &[&obs], sampler.num_steps, &mut rngs, Stage::Observation, None)?
            }
        };
        for (i, s) in chunk.iter().enumerate() {
            total += sq_row_dist(o.row(i), s.next_obs.data());
        }
    }
    Ok(total / samples.len() as f64)
}

/// Mean `‖ô_{t+1} − o_{t+1}‖²` on the expert and random validation splits.
pub fn next_obs_mse(
    model: NextObsModel<'_>,
    expert: &[ChunkedSample],
    random: &[ChunkedSample],
    sampler: &SamplerConfig,
) -> Result<SplitMse> {
    let want = match model {
        NextObsModel::Dynamics(_) => NetKind::Dynamics,
        NextObsModel::Video(_) => NetKind::VideoPredictor,
    };
    if model.net().kind() != want {
        return Err(Error::InvalidArgument(format!(
            "expected a {} network, got {}",
            want.name(),
            model.net().kind().name()
        )));
    }
    Ok(SplitMse {
        expert: split_next_obs_mse(model, expert, sampler)?,
        random: split_next_obs_mse(model, random, sampler)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub tau: f64,
    /// Mean `‖â(τ) − a‖²` against the recorded actions.
    pub action_mse: f64,
    pub obs_mse: f64,
    /// Mean `‖â(τ) − a(1)‖²` against the sampler's own final output.
    pub action_to_final: f64,
    pub obs_to_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationCurve {
    pub points: Vec<CurvePoint>,
    pub final_action_mse: f64,
    pub final_obs_mse: f64,
    pub n: usize,
}

impl ExtrapolationCurve {
    /// Grid point closest to `tau`.
    pub fn at(&self, tau: f64) -> Option<&CurvePoint> {
        self.points
            .iter()
            .min_by(|a, b| (a.tau - tau).abs().total_cmp(&(b.tau - tau).abs()))
    }
}

/// Records the coupled sampler's extrapolated end points at every grid
/// point on the validation chunks.
pub fn extrapolation_curve(models: &ModelSet, samples: &[ChunkedSample], sampler: &SamplerConfig) -> Result<ExtrapolationCurve> {
    models.check(Variant::Dap)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("extrapolation curve needs validation samples".into()));
    }
    let ema = sampler.use_ema;
    let d = models.require(Variant::Dap, NetKind::Dynamics)?.view(ema);
    let p = models.require(Variant::Dap, NetKind::PolicyDap)?.view(ema);
    let n_steps = sampler.num_steps;
    let mut taus = vec![0.0; n_steps];
    let mut sums = vec![[0.0f64; 4]; n_steps];
    let (mut fin_a, mut fin_o) = (0.0, 0.0);
    for (c, chunk) in samples.chunks(BATCH).enumerate() {
        let obs = stack_rows(chunk, |s| &s.obs)?;
        let mut rngs = item_rngs(sampler.seed, c * BATCH, chunk.len());
        let mut hats: Vec<(Tensor, Tensor)> = Vec::with_capacity(n_steps);
        let mut hook = |r: &TraceRecord<'_>| {
            taus[r.step] = r.tau;
            if let (Some(a), Some(o)) = (r.action_hat, r.obs_hat) {
                hats.push((a.clone(), o.clone()));
            }
        };
        let (a, o) = dap_sample_batch(&d, &p, &obs, n_steps, sampler.warm_start, &mut rngs, Some(&mut hook))?;
        for (k, (ah, oh)) in hats.iter().enumerate() {
            for (i, s) in chunk.iter().enumerate() {
                sums[k][0] += sq_row_dist(ah.row(i), s.actions.data());
                sums[k][1] += sq_row_dist(oh.row(i), s.next_obs.data());
                sums[k][2] += sq_row_dist(ah.row(i), a.row(i));
                sums[k][3] += sq_row_dist(oh.row(i), o.row(i));
            }
        }
        for (i, s) in chunk.iter().enumerate() {
            fin_a += sq_row_dist(a.row(i), s.actions.data());
            fin_o += sq_row_dist(o.row(i), s.next_obs.data());
        }
    }
    let n = samples.len() as f64;
    Ok(ExtrapolationCurve {
        points: taus
            .iter()
            .zip(&sums)
            .map(|(&tau, s)| CurvePoint {
                tau,
                action_mse: s[0] / n,
                obs_mse: s[1] / n,
                action_to_final: s[2] / n,
                obs_to_final: s[3] / n,
            })
            .collect(),
        final_action_mse: fin_a / n,
        final_obs_mse: fin_o / n,
        n: samples.len(),
    })
}
