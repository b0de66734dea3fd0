//! Vector-field networks: action-conditioned dynamics, next-observation
//! conditioned policy, observation-only policy and the action-agnostic
//! next-observation predictor.
//!
//! Every network is a single MLP over the concatenation
//! `[flatten(x_τ), embed(τ), condition blocks...]`; the condition blocks for
//! each kind are listed in [`NetSpec::condition_lens`].

use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{shape_err, Error, Result};
use crate::numerics::checkpoint::{read_layer_table, write_layer_table, WEIGHTS_MAGIC};
use crate::numerics::{sinusoidal_embed_into, Mlp, SeededRng, Tensor};

pub const NET_VERSION: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetKind {
    /// `f(o_{t+1}^τ, τ | o_t, a_t)`
    Dynamics,
    /// `π(a^τ, τ | o_t, o_{t+1})`
    PolicyDap,
    /// `π(a^τ, τ | o_t)`
    PolicyFmp,
    /// `f(o_{t+1}^τ, τ | o_t)`
    VideoPredictor,
}

impl NetKind {
    pub const ALL: [NetKind; 4] = [
        NetKind::Dynamics,
        NetKind::PolicyDap,
        NetKind::PolicyFmp,
        NetKind::VideoPredictor,
    ];

    pub fn code(self) -> u32 {
        match self {
            NetKind::Dynamics => 0,
            NetKind::PolicyDap => 1,
            NetKind::PolicyFmp => 2,
            NetKind::VideoPredictor => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown net kind code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            NetKind::Dynamics => "dynamics",
            NetKind::PolicyDap => "policy-dap",
            NetKind::PolicyFmp => "policy-fmp",
            NetKind::VideoPredictor => "video",
        }
    }

    /// Whether the generated variable is an observation chunk.
    pub fn predicts_observations(self) -> bool {
        matches!(self, NetKind::Dynamics | NetKind::VideoPredictor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub kind: NetKind,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub obs_horizon: usize,
    pub action_horizon: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
}

impl NetSpec {
    /// Default architecture: two observation frames, eight-step action chunks.
    pub fn new(kind: NetKind, obs_dim: usize, action_dim: usize) -> Self {
        Self {
            kind,
            obs_dim,
            action_dim,
            obs_horizon: 2,
            action_horizon: 8,
            hidden: vec![256, 256, 256],
            time_embed_dim: 32,
        }
    }

    pub fn with_kind(&self, kind: NetKind) -> Self {
        Self { kind, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("NetSpec: {m}")));
        if self.obs_dim == 0 || self.action_dim == 0 {
            return bad("obs_dim and action_dim must be positive");
        }
        if self.obs_horizon == 0 || self.action_horizon == 0 {
            return bad("horizons must be positive");
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be a positive even number");
        }
        if self.hidden.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        Ok(())
    }

    pub fn obs_chunk_len(&self) -> usize {
        self.obs_horizon * self.obs_dim
    }

    pub fn action_chunk_len(&self) -> usize {
        self.action_horizon * self.action_dim
    }

    pub fn obs_shape(&self) -> [usize; 2] {
        [self.obs_horizon, self.obs_dim]
    }

    pub fn action_shape(&self) -> [usize; 2] {
        [self.action_horizon, self.action_dim]
    }

    pub fn target_shape(&self) -> [usize; 2] {
        if self.kind.predicts_observations() {
            self.obs_shape()
        } else {
            self.action_shape()
        }
    }

    pub fn target_len(&self) -> usize {
        let [r, c] = self.target_shape();
        r * c
    }

    /// Flattened lengths of the conditioning blocks, in input order.
    pub fn condition_lens(&self) -> Vec<usize> {
        match self.kind {
            NetKind::Dynamics => vec![self.obs_chunk_len(), self.action_chunk_len()],
            NetKind::PolicyDap => vec![self.obs_chunk_len(), self.obs_chunk_len()],
            NetKind::PolicyFmp | NetKind::VideoPredictor => vec![self.obs_chunk_len()],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.target_len() + self.time_embed_dim + self.condition_lens().iter().sum::<usize>()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(&self.hidden);
        d.push(self.target_len());
        d
    }
}

/// Network parameters plus an optional exponential-moving-average copy.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    spec: NetSpec,
    mlp: Mlp,
    ema: Option<Mlp>,
}

impl VectorField {
    pub fn init(spec: NetSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let mlp = Mlp::init(&spec.layer_dims(), rng)?;
        Ok(Self { spec, mlp, ema: None })
    }

    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let mlp = Mlp::zeros(&spec.layer_dims())?;
        Ok(Self { spec, mlp, ema: None })
    }

    pub fn from_parts(spec: NetSpec, mlp: Mlp, ema: Option<Mlp>) -> Result<Self> {
        spec.validate()?;
        if mlp.in_dim() != spec.input_dim() {
            return Err(shape_err(
                format!("{} first layer in-dim", spec.kind.name()),
                &[spec.input_dim()],
                &[mlp.in_dim()],
            ));
        }
        if mlp.out_dim() != spec.target_len() {
            return Err(shape_err(
                format!("{} output dim", spec.kind.name()),
                &[spec.target_len()],
                &[mlp.out_dim()],
            ));
        }
        if let Some(e) = &ema {
            if !e.same_shape(&mlp) {
                return Err(shape_err("ema copy", &mlp.dims(), &e.dims()));
            }
        }
        Ok(Self { spec, mlp, ema })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn kind(&self) -> NetKind {
        self.spec.kind
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn ema(&self) -> Option<&Mlp> {
        self.ema.as_ref()
    }

    /// Starts (or restarts) the EMA copy from the current weights.
    pub fn init_ema(&mut self) {
        self.ema = Some(self.mlp.clone());
    }

    /// `ema ← decay·ema + (1−decay)·mlp`, elementwise.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("ema decay {decay} outside [0, 1]")));
        }
        let ema = self.ema.get_or_insert_with(|| self.mlp.clone());
        for (e, w) in ema.param_slices_mut().into_iter().zip(self.mlp.param_slices()) {
            for (ev, wv) in e.iter_mut().zip(w) {
                *ev = decay * *ev + (1.0 - decay) * wv;
            }
        }
        Ok(())
    }

    /// Live weights.
    pub fn live(&self) -> FieldView<'_> {
        FieldView {
            spec: &self.spec,
            mlp: &self.mlp,
        }
    }

    /// EMA weights when requested and available, else live weights.
    pub fn view(&self, use_ema: bool) -> FieldView<'_> {
        let mlp = match (&self.ema, use_ema) {
            (Some(e), true) => e,
            _ => &self.mlp,
        };
        FieldView { spec: &self.spec, mlp }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.spec;
        let mut w = ByteWriter::new();
        w.magic(WEIGHTS_MAGIC);
        w.u32(NET_VERSION);
        w.u32(s.kind.code());
        w.len_u32(s.obs_dim)?;
        w.len_u32(s.action_dim)?;
        w.len_u32(s.obs_horizon)?;
        w.len_u32(s.action_horizon)?;
        w.len_u32(s.time_embed_dim)?;
        w.len_u32(s.hidden.len())?;
        for &h in &s.hidden {
            w.len_u32(h)?;
        }
        write_layer_table(&mut w, &self.mlp)?;
        match &self.ema {
            Some(e) => {
                w.u32(1);
                write_layer_table(&mut w, e)?;
            }
            None => w.u32(0),
        }
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(WEIGHTS_MAGIC)?;
        r.expect_version(NET_VERSION)?;
        let kind = NetKind::from_code(r.u32("kind")?)?;
        let obs_dim = r.u32("obs_dim")? as usize;
        let action_dim = r.u32("action_dim")? as usize;
        let obs_horizon = r.u32("obs_horizon")? as usize;
        let action_horizon = r.u32("action_horizon")? as usize;
        let time_embed_dim = r.u32("time_embed_dim")? as usize;
        let n_hidden = r.u32("hidden count")? as usize;
        let hidden = (0..n_hidden)
            .map(|_| r.u32("hidden size").map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = NetSpec {
            kind,
            obs_dim,
            action_dim,
            obs_horizon,
            action_horizon,
            hidden,
            time_embed_dim,
        };
        let mlp = read_layer_table(&mut r)?;
        let ema = match r.u32("ema flag")? {
            0 => None,
            1 => Some(read_layer_table(&mut r)?),
            f => return Err(Error::InvalidArgument(format!("bad ema flag {f}"))),
        };
        r.finish("net checkpoint")?;
        let net = Self::from_parts(spec, mlp, ema)?;
        if net.spec.layer_dims() != net.mlp.dims() {
            return Err(shape_err("checkpoint hidden sizes", &net.spec.layer_dims(), &net.mlp.dims()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Borrowed weights of one network, evaluated as a vector field.
#[derive(Debug, Clone, Copy)]
pub struct FieldView<'a> {
    spec: &'a NetSpec,
    mlp: &'a Mlp,
}

impl<'a> FieldView<'a> {
    /// Pairs a spec with raw weights; the caller guarantees matching dims.
    pub fn new(spec: &'a NetSpec, mlp: &'a Mlp) -> Self {
        Self { spec, mlp }
    }

    pub fn spec(&self) -> &'a NetSpec {
        self.spec
    }

    pub fn mlp(&self) -> &'a Mlp {
        self.mlp
    }

    /// Appends one input row `[x_τ, embed(τ), conds...]` to `out`.
    pub fn push_input_row(&self, x_tau: &[f64], tau: f64, conds: &[&[f64]], out: &mut Vec<f64>) -> Result<()> {
        let spec = self.spec;
        if x_tau.len() != spec.target_len() {
            return Err(shape_err(
                format!("{} flow sample", spec.kind.name()),
                &[spec.target_len()],
                &[x_tau.len()],
            ));
        }
        let lens = spec.condition_lens();
        if conds.len() != lens.len() {
            return Err(shape_err(
                format!("{} condition count", spec.kind.name()),
                &[lens.len()],
                &[conds.len()],
            ));
        }
        for (k, (c, &want)) in conds.iter().zip(&lens).enumerate() {
            if c.len() != want {
                return Err(shape_err(format!("{} condition {k}", spec.kind.name()), &[want], &[c.len()]));
            }
        }
        out.extend_from_slice(x_tau);
        let start = out.len();
        out.resize(start + spec.time_embed_dim, 0.0);
        sinusoidal_embed_into(tau, &mut out[start..])?;
        for c in conds {
            out.extend_from_slice(c);
        }
        Ok(())
    }

    /// Evaluates the field on `batch` rows. `xs` holds the stacked flow
    /// samples and each entry of `conds` the stacked condition block.
    pub fn eval_batch(&self, xs: &[f64], taus: &[f64], conds: &[&[f64]]) -> Result<Vec<f64>> {
        let batch = taus.len();
        let spec = self.spec;
        let tl = spec.target_len();
        if xs.len() != batch * tl {
            return Err(shape_err("eval_batch samples", &[batch, tl], &[xs.len()]));
        }
        let lens = spec.condition_lens();
        if conds.len() != lens.len() {
            return Err(shape_err("eval_batch condition count", &[lens.len()], &[conds.len()]));
        }
        let mut input = Vec::with_capacity(batch * spec.input_dim());
        let mut row_conds: Vec<&[f64]> = Vec::with_capacity(conds.len());
        for b in 0..batch {
            row_conds.clear();
            for (c, &l) in conds.iter().zip(&lens) {
                if c.len() != batch * l {
                    return Err(shape_err("eval_batch condition", &[batch, l], &[c.len()]));
                }
                row_conds.push(&c[b * l..(b + 1) * l]);
            }
            self.push_input_row(&xs[b * tl..(b + 1) * tl], taus[b], &row_conds, &mut input)?;
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{} input", spec.kind.name()),
            });
        }
        let x = Tensor::matrix(batch, spec.input_dim(), input)?;
        Ok(self.mlp.forward(&x)?.into_data())
    }

    fn eval_single(&self, kind: NetKind, x_tau: &Tensor, tau: f64, conds: &[&Tensor]) -> Result<Tensor> {
        if self.spec.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "{} network evaluated as {}",
                self.spec.kind.name(),
                kind.name()
            )));
        }
        let target = self.spec.target_shape();
        x_tau.ensure_shape(&target, &format!("{} flow sample", kind.name()))?;
        let shapes: Vec<[usize; 2]> = match kind {
            NetKind::Dynamics => vec![self.spec.obs_shape(), self.spec.action_shape()],
            NetKind::PolicyDap => vec![self.spec.obs_shape(), self.spec.obs_shape()],
            _ => vec![self.spec.obs_shape()],
        };
        for (k, (c, s)) in conds.iter().zip(&shapes).enumerate() {
            c.ensure_shape(s, &format!("{} condition {k}", kind.name()))?;
        }
        let raw: Vec<&[f64]> = conds.iter().map(|c| c.data()).collect();
        let out = self.eval_batch(x_tau.data(), &[tau], &raw)?;
        Tensor::new(target.to_vec(), out)
    }

    pub fn dynamics_vf(&self, o_next_tau: &Tensor, tau: f64, o_t: &Tensor, a_t: &Tensor) -> Result<Tensor> {
        self.eval_single(NetKind::Dynamics, o_next_tau, tau, &[o_t, a_t])
    }

    pub fn policy_vf(&self, a_tau: &Tensor, tau: f64, o_t: &Tensor, o_next: &Tensor) -> Result<Tensor> {
        self.eval_single(NetKind::PolicyDap, a_tau, tau, &[o_t, o_next])
    }

    pub fn policy_fmp_vf(&self, a_tau: &Tensor, tau: f64, o_t: &Tensor) -> Result<Tensor> {
        self.eval_single(NetKind::PolicyFmp, a_tau, tau, &[o_t])
    }

    pub fn video_vf(&self, o_next_tau: &Tensor, tau: f64, o_t: &Tensor) -> Result<Tensor> {
        self.eval_single(NetKind::VideoPredictor, o_next_tau, tau, &[o_t])
    }
}
