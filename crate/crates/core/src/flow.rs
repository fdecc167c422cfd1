//! Rectified-flow translation between condition-embedding domains.
//!
//! A small residual MLP learns the velocity field v(x_t, t) of the straight
//! interpolation x_t = (1−t)·x₀ + t·x₁ between paired source and target
//! embeddings. Translation follows the learned ODE with explicit Euler
//! steps; the output linear is zero-initialized so a fresh net is the
//! identity flow. The end-to-end pipeline embeds an image tile, translates
//! its condition tokens, samples the diffusion model conditioned on the
//! translated grid, and decodes.

use crate::adapters::LoraSet;
use crate::backbone::{
    collect_grads, sinusoidal_features, Backbone, DitEpsModel, ModelParams, ParamSource,
    PlainParams,
};
use crate::codec::Codec;
use crate::diffusion::NoiseSchedule;
use crate::embedder::{ConditionGrid, Embedder};
use crate::error::{Error, Result};
use crate::imagebuf::ImageTensor;
use crate::rng::{derive_rng, derive_rng_indexed};
use crate::sampler::{sample, SamplerConfig};
use crate::tensor::{adamw_step, AdamWConfig, AdamWState, Tape, Tensor, TensorId};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// One interpolation sample of a source/target embedding pair.
#[derive(Debug, Clone)]
pub struct FlowPair {
    pub x0: Vec<f32>,
    pub x1: Vec<f32>,
    pub t: f64,
}

impl FlowPair {
    pub fn new(x0: Vec<f32>, x1: Vec<f32>, t: f64) -> Result<Self> {
        if x0.len() != x1.len() {
            return Err(Error::ShapeMismatch {
                context: "flow pair".into(),
                lhs: vec![x0.len()],
                rhs: vec![x1.len()],
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("flow t must be in [0,1], got {t}")));
        }
        Ok(Self { x0, x1, t })
    }

    pub fn xt(&self) -> Vec<f32> {
        let t = self.t as f32;
        self.x0
            .iter()
            .zip(&self.x1)
            .map(|(&a, &b)| (1.0 - t) * a + t * b)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct VelocityNetConfig {
    pub dim: usize,
    pub width: usize,
    pub depth: usize,
    pub time_dim: usize,
}

impl VelocityNetConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            dim,
            width: 128,
            depth: 4,
            time_dim: 16,
        }
    }
}

/// Residual MLP velocity field; time enters by concatenating sinusoidal
/// features of t onto the state.
pub struct VelocityNet {
    cfg: VelocityNetConfig,
}

impl VelocityNet {
    pub fn new(cfg: VelocityNetConfig) -> Result<Self> {
        if cfg.dim == 0 || cfg.width == 0 {
            return Err(Error::Config("velocity net dims must be positive".into()));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &VelocityNetConfig {
        &self.cfg
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.cfg;
        let mut out = vec![
            ("in.wx".into(), vec![c.dim, c.width]),
            ("in.wt".into(), vec![c.time_dim, c.width]),
            ("in.b".into(), vec![c.width]),
        ];
        for i in 0..c.depth {
            out.push((format!("blk{i}.w1"), vec![c.width, c.width]));
            out.push((format!("blk{i}.b1"), vec![c.width]));
            out.push((format!("blk{i}.w2"), vec![c.width, c.width]));
            out.push((format!("blk{i}.b2"), vec![c.width]));
        }
        out.push(("out.w".into(), vec![c.width, c.dim]));
        out.push(("out.b".into(), vec![c.dim]));
        out
    }

    /// Zero-initialized output layer: a fresh net is exactly the zero
    /// velocity field, i.e. the identity flow.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = derive_rng(seed, &["flow-init"]);
        let mut params = ModelParams::new();
        for (name, shape) in self.param_shapes() {
            let zero = name.ends_with('b')
                || name.ends_with("b1")
                || name.ends_with("b2")
                || name == "out.w";
            let t = if zero {
                Tensor::zeros(&shape)
            } else {
                let numel: usize = shape.iter().product();
                let scale = (2.0 / shape[0] as f64).sqrt() as f32;
                let data = (0..numel)
                    .map(|_| rng.sample::<f32, _>(StandardNormal) * scale)
                    .collect();
                Tensor::new(&shape, data).expect("flow init shape")
            };
            params.insert(name, t);
        }
        params
    }

    /// Velocity for a batch: `x` is [B, dim], `t` one time per element.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        source: &mut dyn ParamSource,
        x: TensorId,
        t: &[f64],
    ) -> Result<TensorId> {
        let c = &self.cfg;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != c.dim {
            return Err(Error::InvalidDims(format!(
                "velocity input must be [B, {}], got {:?}",
                c.dim, shape
            )));
        }
        if t.len() != shape[0] {
            return Err(Error::InvalidDims(format!(
                "{} time values for batch {}",
                t.len(),
                shape[0]
            )));
        }
        // time enters through its own input projection of sinusoidal
        // features, summed with the projected state
        let mut feat = Vec::with_capacity(t.len() * c.time_dim);
        for &ti in t {
            feat.extend_from_slice(&sinusoidal_features(ti, c.time_dim));
        }
        let tfeat = tape.constant(Tensor::new(&[shape[0], c.time_dim], feat)?);
        let wx = source.get(tape, "in.wx")?;
        let wt = source.get(tape, "in.wt")?;
        let bi = source.get(tape, "in.b")?;
        let hx = tape.matmul(x, wx)?;
        let ht = tape.matmul(tfeat, wt)?;
        let mut h = tape.add(hx, ht)?;
        h = tape.add_bias(h, bi)?;
        h = tape.silu(h);
        for i in 0..c.depth {
            let w1 = source.get(tape, &format!("blk{i}.w1"))?;
            let b1 = source.get(tape, &format!("blk{i}.b1"))?;
            let w2 = source.get(tape, &format!("blk{i}.w2"))?;
            let b2 = source.get(tape, &format!("blk{i}.b2"))?;
            let mut r = tape.matmul(h, w1)?;
            r = tape.add_bias(r, b1)?;
            r = tape.silu(r);
            r = tape.matmul(r, w2)?;
            r = tape.add_bias(r, b2)?;
            h = tape.add(h, r)?;
        }
        let wo = source.get(tape, "out.w")?;
        let bo = source.get(tape, "out.b")?;
        let mut v = tape.matmul(h, wo)?;
        v = tape.add_bias(v, bo)?;
        Ok(v)
    }

    /// Gradient-free velocity for one embedding.
    pub fn velocity(&self, params: &ModelParams, x: &[f32], t: f64) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let mut source = PlainParams::all_frozen(params);
        let xid = tape.leaf(Tensor::new(&[1, x.len()], x.to_vec())?, false);
        let v = self.forward_tape(&mut tape, &mut source, xid, &[t])?;
        Ok(tape.value(v).data().to_vec())
    }
}

/// Mean squared error between the straight-line displacement and the
/// predicted velocity, differentiable.
pub fn flow_loss_tape(
    net: &VelocityNet,
    tape: &mut Tape,
    source: &mut dyn ParamSource,
    batch: &[FlowPair],
) -> Result<TensorId> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("flow batch".into()));
    }
    let dim = net.config().dim;
    let mut xt = Vec::with_capacity(batch.len() * dim);
    let mut target = Vec::with_capacity(batch.len() * dim);
    let mut ts = Vec::with_capacity(batch.len());
    for pair in batch {
        if pair.x0.len() != dim {
            return Err(Error::ShapeMismatch {
                context: "flow pair width".into(),
                lhs: vec![pair.x0.len()],
                rhs: vec![dim],
            });
        }
        xt.extend(pair.xt());
        target.extend(pair.x0.iter().zip(&pair.x1).map(|(&a, &b)| b - a));
        ts.push(pair.t);
    }
    let x = tape.leaf(Tensor::new(&[batch.len(), dim], xt)?, false);
    let tgt = tape.constant(Tensor::new(&[batch.len(), dim], target)?);
    let v = net.forward_tape(tape, source, x, &ts)?;
    let diff = tape.sub(v, tgt)?;
    let sq = tape.mul(diff, diff)?;
    let sum = tape.sum_all(sq);
    // per-sample squared norm, averaged over the batch
    Ok(tape.scale(sum, 1.0 / batch.len() as f32))
}

/// Evaluation-only flow loss.
pub fn flow_loss(net: &VelocityNet, params: &ModelParams, batch: &[FlowPair]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut source = PlainParams::all_frozen(params);
    let loss = flow_loss_tape(net, &mut tape, &mut source, &batch.to_vec())?;
    Ok(tape.value(loss).item() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 2000,
            batch: 16,
            seed: 0,
        }
    }
}

/// Train the velocity net on embedding pairs; t is drawn uniform on [0,1]
/// per sample per step.
pub fn flow_train(
    net: &VelocityNet,
    params: &mut ModelParams,
    pairs: &[(Vec<f32>, Vec<f32>)],
    cfg: &FlowTrainConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("flow training pairs".into()));
    }
    let mut opt_state = AdamWState::default();
    let opt_cfg = AdamWConfig {
        lr: cfg.lr as f32,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = derive_rng_indexed(cfg.seed, "flow-step", &[step as u64]);
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (x0, x1) = &pairs[rng.gen_range(0..pairs.len())];
            let t: f64 = rng.gen_range(0.0..=1.0);
            batch.push(FlowPair::new(x0.clone(), x1.clone(), t)?);
        }
        let (loss_val, named) = {
            let mut tape = Tape::new();
            let mut source = PlainParams::all_trainable(params);
            let loss = flow_loss_tape(net, &mut tape, &mut source, &batch)?;
            let mut grads = tape.backward(loss)?;
            let named = collect_grads(&source, &mut grads)?;
            (tape.value(loss).item() as f64, named)
        };
        losses.push(loss_val);
        adamw_step(params, &named, &mut opt_state, &opt_cfg)?;
    }
    Ok(losses)
}

/// Explicit Euler integration of dx/dt = v(x, t) from t=0 to t=1.
/// Deterministic; no noise enters.
pub fn translate(
    net: &VelocityNet,
    params: &ModelParams,
    x0: &[f32],
    steps: usize,
) -> Result<Vec<f32>> {
    if steps == 0 {
        return Err(Error::Config("translate needs at least 1 step".into()));
    }
    let h = 1.0 / steps as f64;
    let mut x = x0.to_vec();
    for k in 0..steps {
        let v = net.velocity(params, &x, k as f64 * h)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += (h as f32) * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDiverged {
                step: k,
                detail: "non-finite flow state".into(),
            });
        }
    }
    Ok(x)
}

/// Translate every token of a grid. Tokens whose translated norm already
/// sits within the unit-norm tolerance pass through untouched (so the
/// identity flow is bit-exact); everything else is renormalized.
pub fn translate_grid(
    net: &VelocityNet,
    params: &ModelParams,
    grid: &ConditionGrid,
    steps: usize,
) -> Result<ConditionGrid> {
    let mut tokens = Vec::with_capacity(grid.token_count() * grid.dim());
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            let out = translate(net, params, grid.token(r, c), steps)?;
            let norm = out.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() <= 1e-5 {
                tokens.extend(out);
            } else if norm <= 1e-9 {
                return Err(Error::NonFinite("translated token collapsed to zero".into()));
            } else {
                tokens.extend(out.iter().map(|&v| (v as f64 / norm) as f32));
            }
        }
    }
    ConditionGrid::new(grid.rows(), grid.cols(), grid.dim(), tokens)
}

/// Full tile-local stain translation: embed the source tile, translate its
/// condition tokens through the flow, sample the diffusion model on the
/// translated grid (optionally with a domain LoRA spliced in), decode.
#[allow(clippy::too_many_arguments)]
pub fn stain_translate_pipeline(
    img: &ImageTensor,
    codec: &Codec,
    embedder: &Embedder,
    grid_dims: (usize, usize),
    net: &VelocityNet,
    flow_params: &ModelParams,
    flow_steps: usize,
    backbone: &Backbone,
    base: &ModelParams,
    lora: Option<&LoraSet>,
    schedule: &NoiseSchedule,
    sampler_cfg: &SamplerConfig,
) -> Result<ImageTensor> {
    let grid = embedder.embed_grid(img, grid_dims.0, grid_dims.1)?;
    let translated = translate_grid(net, flow_params, &grid, flow_steps)?;
    let effective;
    let params = match lora {
        Some(set) => {
            effective = set.apply_to(base)?;
            &effective
        }
        None => base,
    };
    let f = codec.config().factor;
    let shape = [
        img.height() / f,
        img.width() / f,
        codec.config().latent_channels(),
    ];
    let model = DitEpsModel {
        backbone,
        params,
        t_max: schedule.t_steps(),
        null_dims: (translated.rows(), translated.cols()),
    };
    let lat = sample(&model, schedule, Some(&translated), &shape, sampler_cfg)?;
    Ok(codec.decode(&lat)?.clamp01())
}
