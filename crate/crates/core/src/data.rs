//! Episodes, chunked training tuples, normalization and the `DAPD` dataset file.

use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::envs::{random_policy, Action, TaskSpec};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, SeededRng, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"DAPD";
pub const DATASET_VERSION: u32 = 1;
pub const NORM_MAGIC: &[u8; 4] = b"DAPN";
pub const NORM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Expert,
    Random,
}

impl Source {
    fn code(self) -> u8 {
        match self {
            Source::Expert => 0,
            Source::Random => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Source::Expert),
            1 => Ok(Source::Random),
            _ => Err(Error::InvalidArgument(format!("unknown episode source {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Source::Expert => "expert",
            Source::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub success: bool,
    pub source: Source,
    pub seed: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.first().map_or(0, |o| o.len())
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, |a| a.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.len() != self.actions.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "episode {}: {} observations for {} actions",
                self.seed,
                self.observations.len(),
                self.actions.len()
            )));
        }
        let (d_o, d_a) = (self.obs_dim(), self.action_dim());
        if self.observations.iter().any(|o| o.len() != d_o) || self.actions.iter().any(|a| a.len() != d_a) {
            return Err(Error::InvalidArgument(format!("episode {}: ragged rows", self.seed)));
        }
        if self
            .observations
            .iter()
            .chain(&self.actions)
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite {
                context: format!("episode {}", self.seed),
            });
        }
        Ok(())
    }
}

/// Rolls out `n_episodes` episodes with seeds `base_seed + i`.
///
/// Expert episodes stop when the task is solved; random episodes always run
/// for `max_steps` and record whether success was ever reached.
pub fn collect(spec: &TaskSpec, source: Source, n_episodes: usize, base_seed: u64) -> Result<Vec<Episode>> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be at least 1".into()));
    }
    spec.validate()?;
    Ok((0..n_episodes as u64)
        .map(|i| rollout_episode(spec, source, base_seed + i))
        .collect())
}

fn rollout_episode(spec: &TaskSpec, source: Source, seed: u64) -> Episode {
    let (mut state, obs) = spec.reset(seed);
    let mut rng = SeededRng::new(derive_seed(seed, 0xAC7));
    let mut observations = vec![obs.to_vec()];
    let mut actions = Vec::new();
    let mut success = false;
    for _ in 0..spec.max_steps {
        let action: Action = match source {
            Source::Expert => spec.expert_action(&state),
            Source::Random => random_policy(&mut rng),
        };
        let t = spec.step(&state, &action);
        state = t.state;
        observations.push(t.observation.to_vec());
        actions.push(action.to_vec());
        success |= t.success;
        if source == Source::Expert && t.done {
            break;
        }
    }
    Episode {
        observations,
        actions,
        success,
        source,
        seed,
    }
}

/// One `(o_t, a_t, o_{t+1})` training tuple of chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedSample {
    /// `T × d_o`: observations `t−T+1 ..= t`.
    pub obs: Tensor,
    /// `H × d_a`: actions `t .. t+H`.
    pub actions: Tensor,
    /// `T × d_o`: observations `t+1 ..= t+T`.
    pub next_obs: Tensor,
    pub source: Source,
    /// Leading rows of `obs` that repeat `o_0`.
    pub obs_padded: usize,
    /// Trailing rows of `actions` that repeat the last action.
    pub actions_padded: usize,
    /// Trailing rows of `next_obs` that repeat the final observation.
    pub next_obs_padded: usize,
}

impl ChunkedSample {
    pub fn normalized(&self, stats: &NormStats) -> ChunkedSample {
        let norm_obs = |t: &Tensor| {
            let mut t = t.clone();
            stats.normalize_obs(t.data_mut());
            t
        };
        let mut actions = self.actions.clone();
        stats.normalize_actions(actions.data_mut());
        ChunkedSample {
            obs: norm_obs(&self.obs),
            actions,
            next_obs: norm_obs(&self.next_obs),
            ..self.clone()
        }
    }
}

/// Splits an episode into one sample per timestep, edge-padding both ends.
pub fn chunk(episode: &Episode, obs_horizon: usize, action_horizon: usize) -> Result<Vec<ChunkedSample>> {
    if obs_horizon == 0 || action_horizon == 0 {
        return Err(Error::InvalidArgument("chunk horizons must be positive".into()));
    }
    if episode.is_empty() {
        return Err(Error::InvalidArgument(format!("episode {} is empty", episode.seed)));
    }
    episode.validate()?;
    let l = episode.len();
    let (d_o, d_a) = (episode.obs_dim(), episode.action_dim());
    let obs = &episode.observations;
    let acts = &episode.actions;
    let mut out = Vec::with_capacity(l);
    for t in 0..l {
        let mut o = Vec::with_capacity(obs_horizon * d_o);
        let mut obs_padded = 0;
        for k in 0..obs_horizon {
            let idx = t as isize - (obs_horizon - 1 - k) as isize;
            if idx < 0 {
                obs_padded += 1;
            }
            o.extend_from_slice(&obs[idx.max(0) as usize]);
        }
        let mut a = Vec::with_capacity(action_horizon * d_a);
        let mut actions_padded = 0;
        for k in 0..action_horizon {
            let idx = t + k;
            if idx >= l {
                actions_padded += 1;
            }
            a.extend_from_slice(&acts[idx.min(l - 1)]);
        }
        let mut n = Vec::with_capacity(obs_horizon * d_o);
        let mut next_obs_padded = 0;
        for k in 0..obs_horizon {
            let idx = t + 1 + k;
            if idx > l {
                next_obs_padded += 1;
            }
            n.extend_from_slice(&obs[idx.min(l)]);
        }
        out.push(ChunkedSample {
            obs: Tensor::matrix(obs_horizon, d_o, o)?,
            actions: Tensor::matrix(action_horizon, d_a, a)?,
            next_obs: Tensor::matrix(obs_horizon, d_o, n)?,
            source: episode.source,
            obs_padded,
            actions_padded,
            next_obs_padded,
        });
    }
    Ok(out)
}

pub fn chunk_all(episodes: &[Episode], obs_horizon: usize, action_horizon: usize) -> Result<Vec<ChunkedSample>> {
    let mut out = Vec::new();
    for e in episodes {
        out.extend(chunk(e, obs_horizon, action_horizon)?);
    }
    Ok(out)
}

/// Per-dimension min/max; maps each dimension affinely onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub obs_min: Vec<f64>,
    pub obs_max: Vec<f64>,
    pub act_min: Vec<f64>,
    pub act_max: Vec<f64>,
}

fn min_max<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for r in rows {
        for k in 0..dim {
            lo[k] = lo[k].min(r[k]);
            hi[k] = hi[k].max(r[k]);
        }
    }
    (lo, hi)
}

fn norm_slice(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    let d = lo.len();
    for (k, v) in x.iter_mut().enumerate() {
        let (l, h) = (lo[k % d], hi[k % d]);
        *v = if h > l { 2.0 * (*v - l) / (h - l) - 1.0 } else { 0.0 };
    }
}

fn denorm_slice(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    let d = lo.len();
    for (k, v) in x.iter_mut().enumerate() {
        let (l, h) = (lo[k % d], hi[k % d]);
        *v = if h > l { l + (*v + 1.0) * 0.5 * (h - l) } else { l };
    }
}

impl NormStats {
    /// Statistics over every observation and action of `episodes`.
    pub fn from_episodes<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Result<Self> {
        let eps: Vec<&Episode> = episodes.into_iter().collect();
        let first = eps
            .iter()
            .find(|e| !e.is_empty())
            .ok_or_else(|| Error::InvalidArgument("no episodes to compute statistics".into()))?;
        let (d_o, d_a) = (first.obs_dim(), first.action_dim());
        for e in &eps {
            e.validate()?;
            if !e.is_empty() && (e.obs_dim() != d_o || e.action_dim() != d_a) {
                return Err(Error::InvalidArgument("episodes disagree on dimensions".into()));
            }
        }
        let (obs_min, obs_max) = min_max(eps.iter().flat_map(|e| e.observations.iter()), d_o);
        let (act_min, act_max) = min_max(eps.iter().flat_map(|e| e.actions.iter()), d_a);
        Ok(Self {
            obs_min,
            obs_max,
            act_min,
            act_max,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_min.len()
    }

    pub fn action_dim(&self) -> usize {
        self.act_min.len()
    }

    /// Dimensions whose range collapsed to a point; these normalize to 0.
    pub fn degenerate_obs_dims(&self) -> Vec<usize> {
        (0..self.obs_dim()).filter(|&k| self.obs_max[k] <= self.obs_min[k]).collect()
    }

    pub fn degenerate_action_dims(&self) -> Vec<usize> {
        (0..self.action_dim()).filter(|&k| self.act_max[k] <= self.act_min[k]).collect()
    }

    /// Normalizes a flattened sequence of observations in place.
    pub fn normalize_obs(&self, x: &mut [f64]) {
        norm_slice(x, &self.obs_min, &self.obs_max)
    }

    pub fn denormalize_obs(&self, x: &mut [f64]) {
        denorm_slice(x, &self.obs_min, &self.obs_max)
    }

    pub fn normalize_actions(&self, x: &mut [f64]) {
        norm_slice(x, &self.act_min, &self.act_max)
    }

    pub fn denormalize_actions(&self, x: &mut [f64]) {
        denorm_slice(x, &self.act_min, &self.act_max)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.magic(NORM_MAGIC);
        w.u32(NORM_VERSION);
        w.len_u32(self.obs_dim())?;
        w.len_u32(self.action_dim())?;
        w.f64s(&self.obs_min);
        w.f64s(&self.obs_max);
        w.f64s(&self.act_min);
        w.f64s(&self.act_max);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(NORM_MAGIC)?;
        r.expect_version(NORM_VERSION)?;
        let d_o = r.u32("obs dim")? as usize;
        let d_a = r.u32("action dim")? as usize;
        let s = Self {
            obs_min: r.f64s(d_o, "obs min")?,
            obs_max: r.f64s(d_o, "obs max")?,
            act_min: r.f64s(d_a, "action min")?,
            act_max: r.f64s(d_a, "action max")?,
        };
        r.finish("norm stats")?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Episode-level train/validation partition (about 90/10).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Episode>,
    pub validation: Vec<Episode>,
}

/// Deterministic split key: one in ten seeds lands in validation.
pub fn is_validation_seed(seed: u64) -> bool {
    derive_seed(seed, 0x5EED_5911) % 10 == 0
}

impl DatasetSplit {
    pub fn by_seed(episodes: Vec<Episode>) -> Self {
        let (validation, train) = episodes.into_iter().partition(|e| is_validation_seed(e.seed));
        Self { train, validation }
    }

    pub fn source(&self) -> Option<Source> {
        self.train.iter().chain(&self.validation).map(|e| e.source).next()
    }
}

pub fn encode_dataset(episodes: &[Episode]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.magic(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.len_u32(episodes.len())?;
    for e in episodes {
        e.validate()?;
        w.u8(e.source.code());
        w.u8(u8::from(e.success));
        w.u64(e.seed);
        w.len_u32(e.len())?;
        w.len_u32(e.obs_dim())?;
        w.len_u32(e.action_dim())?;
        for o in &e.observations {
            w.f64s(o);
        }
        for a in &e.actions {
            w.f64s(a);
        }
    }
    Ok(w.into_bytes())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Episode>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(DATASET_MAGIC)?;
    r.expect_version(DATASET_VERSION)?;
    let count = r.u32("episode count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let source = Source::from_code(r.u8("source")?)?;
        let success = r.u8("success")? != 0;
        let seed = r.u64("seed")?;
        let l = r.u32("episode length")? as usize;
        let d_o = r.u32("obs dim")? as usize;
        let d_a = r.u32("action dim")? as usize;
        let obs_flat = r.f64s((l + 1) * d_o, "observations")?;
        let act_flat = r.f64s(l * d_a, "actions")?;
        out.push(Episode {
            observations: obs_flat.chunks(d_o.max(1)).map(|c| c.to_vec()).collect(),
            actions: act_flat.chunks(d_a.max(1)).map(|c| c.to_vec()).collect(),
            success,
            source,
            seed,
        });
    }
    r.finish("dataset")?;
    Ok(out)
}

pub fn save_dataset(path: &Path, episodes: &[Episode]) -> Result<()> {
    std::fs::write(path, encode_dataset(episodes)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Episode>> {
    decode_dataset(&std::fs::read(path)?)
}
