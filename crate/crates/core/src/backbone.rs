//! Diffusion transformer backbone.
//!
//! Latents are patchified into tokens, each block applies self-attention
//! modulated by the timestep (adaptive layer norm with zero-initialized
//! gates), cross-attention against the projected condition tokens, and an
//! MLP. Condition tokens carry their own 2-D sinusoidal positions aligned
//! to their grid so the spatial pairing from the progressive stages is
//! preserved.

use crate::codec::LatentTensor;
use crate::diffusion::EpsModel;
use crate::embedder::ConditionGrid;
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::{Gradients, Tape, Tensor, TensorId};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

pub const LN_EPS: f32 = 1e-5;

/// Flat, named parameter store.
pub type ModelParams = BTreeMap<String, Tensor>;

pub fn param_count(params: &ModelParams) -> usize {
    params.values().map(|t| t.numel()).sum()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Latent patch size.
    pub patch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub cond_dim: usize,
    pub latent_channels: usize,
    pub max_tokens: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch: 2,
            hidden: 64,
            depth: 4,
            heads: 4,
            cond_dim: 32,
            latent_channels: 12,
            max_tokens: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }
}

/// Conditioning input for one batch element: real tokens or the learned
/// null token tiled to a grid (the unconditional branch of CFG).
pub enum CondInput<'a> {
    Tokens(&'a ConditionGrid),
    Null { rows: usize, cols: usize },
}

impl CondInput<'_> {
    fn dims(&self) -> (usize, usize) {
        match self {
            CondInput::Tokens(g) => (g.rows(), g.cols()),
            CondInput::Null { rows, cols } => (*rows, *cols),
        }
    }
}

/// Supplies parameter nodes to a forward pass. Implementations decide which
/// names are trainable leaves, which are frozen, and whether low-rank
/// deltas are spliced in.
pub trait ParamSource {
    fn get(&mut self, tape: &mut Tape, name: &str) -> Result<TensorId>;
    /// (name, leaf id) pairs for every trainable leaf bound so far.
    fn trainable_leaves(&self) -> Vec<(String, TensorId)>;
    /// Leaves bound frozen, for freeze-contract checks.
    fn frozen_leaves(&self) -> Vec<(String, TensorId)>;
}

/// Binds parameters straight from a `ModelParams` map.
pub struct PlainParams<'a> {
    params: &'a ModelParams,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    bound: HashMap<String, (TensorId, bool)>,
}

impl<'a> PlainParams<'a> {
    pub fn new(params: &'a ModelParams, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self {
            params,
            trainable: Box::new(trainable),
            bound: HashMap::new(),
        }
    }

    pub fn all_trainable(params: &'a ModelParams) -> Self {
        Self::new(params, |_| true)
    }

    pub fn all_frozen(params: &'a ModelParams) -> Self {
        Self::new(params, |_| false)
    }
}

impl ParamSource for PlainParams<'_> {
    fn get(&mut self, tape: &mut Tape, name: &str) -> Result<TensorId> {
        if let Some(&(id, _)) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let requires_grad = (self.trainable)(name);
        let id = tape.leaf(t.clone(), requires_grad);
        self.bound.insert(name.to_string(), (id, requires_grad));
        Ok(id)
    }

    fn trainable_leaves(&self) -> Vec<(String, TensorId)> {
        self.bound
            .iter()
            .filter(|(_, &(_, tr))| tr)
            .map(|(n, &(id, _))| (n.clone(), id))
            .collect()
    }

    fn frozen_leaves(&self) -> Vec<(String, TensorId)> {
        self.bound
            .iter()
            .filter(|(_, &(_, tr))| !tr)
            .map(|(n, &(id, _))| (n.clone(), id))
            .collect()
    }
}

/// Collect gradients for every trainable leaf a source bound, and verify no
/// gradient reached a frozen leaf.
pub fn collect_grads(source: &dyn ParamSource, grads: &mut Gradients) -> Result<ModelParams> {
    for (name, id) in source.frozen_leaves() {
        if grads.get(id).is_some() {
            return Err(Error::FrozenParamGradient(name));
        }
    }
    let mut out = ModelParams::new();
    for (name, id) in source.trainable_leaves() {
        if let Some(g) = grads.take(id) {
            out.insert(name, g);
        }
    }
    Ok(out)
}

pub struct Backbone {
    cfg: BackboneConfig,
}

/// Intermediate state between input embedding and the block stack.
pub(crate) struct ForwardCtx {
    pub x: TensorId,
    pub temb_act: TensorId,
    pub cond_h: TensorId,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Names and shapes of every parameter, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.cfg.hidden;
        let c = self.cfg.cond_dim;
        let td = self.cfg.token_dim();
        let mh = 4 * h;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("patch_embed.w".into(), vec![td, h]),
            ("patch_embed.b".into(), vec![h]),
            ("t_mlp.w1".into(), vec![h, h]),
            ("t_mlp.b1".into(), vec![h]),
            ("t_mlp.w2".into(), vec![h, h]),
            ("t_mlp.b2".into(), vec![h]),
            ("cond.null_token".into(), vec![1, c]),
            ("cond_proj.w".into(), vec![c, h]),
            ("cond_proj.b".into(), vec![h]),
        ];
        for i in 0..self.cfg.depth {
            let p = |s: &str| format!("b{i}.{s}");
            out.push((p("ada.w"), vec![h, 6 * h]));
            out.push((p("ada.b"), vec![6 * h]));
            for proj in ["sa.q", "sa.k", "sa.v", "sa.o", "ca.q", "ca.k", "ca.v", "ca.o"] {
                out.push((p(&format!("{proj}.w")), vec![h, h]));
                out.push((p(&format!("{proj}.b")), vec![h]));
            }
            out.push((p("ca.ln.g"), vec![h]));
            out.push((p("ca.ln.b"), vec![h]));
            out.push((p("mlp.w1"), vec![h, mh]));
            out.push((p("mlp.b1"), vec![mh]));
            out.push((p("mlp.w2"), vec![mh, h]));
            out.push((p("mlp.b2"), vec![h]));
        }
        out.push(("final.ada.w".into(), vec![h, 2 * h]));
        out.push(("final.ada.b".into(), vec![2 * h]));
        out.push(("final.out.w".into(), vec![h, td]));
        out.push(("final.out.b".into(), vec![td]));
        out
    }

    /// Seeded initialization. Weights are N(0, 1/fan_in); adaptive-layer-norm
    /// projections and the final output linear start at zero so every block
    /// is the identity at initialization, while the residual branches carry
    /// O(1) signal from the first step.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = derive_rng(seed, &["backbone-init"]);
        let mut params = ModelParams::new();
        for (name, shape) in self.param_shapes() {
            let is_bias =
                name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2");
            let zero_init = is_bias || name.contains("ada.w") || name == "final.out.w";
            let t = if zero_init {
                Tensor::zeros(&shape)
            } else if name.ends_with("ca.ln.g") {
                Tensor::full(&shape, 1.0)
            } else {
                let numel: usize = shape.iter().product();
                let fan_in = if shape.len() == 2 { shape[0] } else { shape[shape.len() - 1] };
                let std = 1.0 / (fan_in as f32).sqrt();
                let data = (0..numel)
                    .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
                    .collect();
                Tensor::new(&shape, data).expect("init shape")
            };
            params.insert(name, t);
        }
        params
    }

    /// Forward pass on a tape. `x_tokens` must be a [B, n, token_dim] node,
    /// `t` gives one timestep per batch element, `cond` one grid per element
    /// (all with equal token counts).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        source: &mut dyn ParamSource,
        x_tokens: TensorId,
        t: &[f64],
        cond: &[CondInput<'_>],
        t_max: usize,
    ) -> Result<TensorId> {
        let ctx = self.embed_inputs(tape, source, x_tokens, t, cond, t_max)?;
        let mut x = ctx.x;
        for i in 0..self.cfg.depth {
            x = self.block_forward(tape, source, &format!("b{i}"), x, ctx.temb_act, ctx.cond_h)?;
        }
        self.head(tape, source, x, ctx.temb_act)
    }

    /// Embedded latent tokens, activated timestep embedding, and projected
    /// condition tokens — everything the block stack consumes. Shared with
    /// the control branch, which runs its own block copies on the same
    /// embeddings.
    pub(crate) fn embed_inputs(
        &self,
        tape: &mut Tape,
        source: &mut dyn ParamSource,
        x_tokens: TensorId,
        t: &[f64],
        cond: &[CondInput<'_>],
        t_max: usize,
    ) -> Result<ForwardCtx> {
        let h = self.cfg.hidden;
        let shape = tape.shape(x_tokens).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.token_dim() {
            return Err(Error::InvalidDims(format!(
                "x_tokens must be [B, n, {}], got {:?}",
                self.cfg.token_dim(),
                shape
            )));
        }
        let (batch, n_tokens) = (shape[0], shape[1]);
        if t.len() != batch || cond.len() != batch {
            return Err(Error::InvalidDims(format!(
                "batch {} but {} timesteps / {} condition grids",
                batch,
                t.len(),
                cond.len()
            )));
        }
        let (c_rows, c_cols) = cond[0].dims();
        let m = c_rows * c_cols;
        if !matches!(m, 1 | 4 | 16) {
            return Err(Error::StageContract(format!(
                "condition grid has {m} tokens; stages use 1, 4 or 16"
            )));
        }
        for ci in cond {
            if ci.dims() != (c_rows, c_cols) {
                return Err(Error::StageContract(
                    "mixed condition grid shapes in one batch".into(),
                ));
            }
        }
        for &ti in t {
            if ti <= 0.0 || ti > t_max as f64 {
                return Err(Error::TimestepOutOfRange {
                    t: ti,
                    max: t_max,
                });
            }
        }

        // patch embedding + latent token positions
        let we = source.get(tape, "patch_embed.w")?;
        let be = source.get(tape, "patch_embed.b")?;
        let mut x = tape.matmul(x_tokens, we)?;
        x = tape.add_bias(x, be)?;
        let side = (n_tokens as f64).sqrt().round() as usize;
        let (pr, pc) = if side * side == n_tokens {
            (side, side)
        } else {
            (1, n_tokens)
        };
        let pos = pos_2d(pr, pc, h);
        let pos_b = tile_batch(&pos, batch)?;
        let pos_id = tape.constant(pos_b);
        x = tape.add(x, pos_id)?;

        // timestep embedding MLP
        let mut t_feat = Vec::with_capacity(batch * h);
        for &ti in t {
            t_feat.extend_from_slice(&sinusoidal_features(ti, h));
        }
        let t_leaf = tape.constant(Tensor::new(&[batch, h], t_feat)?);
        let w1 = source.get(tape, "t_mlp.w1")?;
        let b1 = source.get(tape, "t_mlp.b1")?;
        let w2 = source.get(tape, "t_mlp.w2")?;
        let b2 = source.get(tape, "t_mlp.b2")?;
        let mut temb = tape.matmul(t_leaf, w1)?;
        temb = tape.add_bias(temb, b1)?;
        temb = tape.silu(temb);
        temb = tape.matmul(temb, w2)?;
        temb = tape.add_bias(temb, b2)?;
        let temb_act = tape.silu(temb);

        // condition tokens: leaf or tiled null per element, stacked, plus
        // grid-aligned positions, then projected to hidden width
        let mut parts = Vec::with_capacity(batch);
        for ci in cond {
            let id = match ci {
                CondInput::Tokens(g) => {
                    if g.dim() != self.cfg.cond_dim {
                        return Err(Error::ShapeMismatch {
                            context: "condition embedding width".into(),
                            lhs: vec![g.dim()],
                            rhs: vec![self.cfg.cond_dim],
                        });
                    }
                    tape.constant(g.as_tensor())
                }
                CondInput::Null { rows, cols } => {
                    let null = source.get(tape, "cond.null_token")?;
                    tape.tile_rows(null, rows * cols)?
                }
            };
            parts.push(id);
        }
        let mut cond_x = tape.stack0(&parts)?;
        let cpos = pos_2d(c_rows, c_cols, self.cfg.cond_dim);
        let cpos_b = tile_batch(&cpos, batch)?;
        let cpos_id = tape.constant(cpos_b);
        cond_x = tape.add(cond_x, cpos_id)?;
        let wc = source.get(tape, "cond_proj.w")?;
        let bc = source.get(tape, "cond_proj.b")?;
        let mut cond_h = tape.matmul(cond_x, wc)?;
        cond_h = tape.add_bias(cond_h, bc)?;

        Ok(ForwardCtx {
            x,
            temb_act,
            cond_h,
        })
    }

    /// Final adaptive norm + zero-initialized output projection.
    pub(crate) fn head(
        &self,
        tape: &mut Tape,
        source: &mut dyn ParamSource,
        x: TensorId,
        temb_act: TensorId,
    ) -> Result<TensorId> {
        let h = self.cfg.hidden;
        let wa = source.get(tape, "final.ada.w")?;
        let ba = source.get(tape, "final.ada.b")?;
        let mut ada = tape.matmul(temb_act, wa)?;
        ada = tape.add_bias(ada, ba)?;
        let shift = tape.slice_last(ada, 0, h)?;
        let scale = tape.slice_last(ada, h, h)?;
        let mut out = tape.layer_norm(x, None, None, LN_EPS)?;
        out = tape.modulate(out, shift, scale)?;
        let wo = source.get(tape, "final.out.w")?;
        let bo = source.get(tape, "final.out.b")?;
        let mut out = tape.matmul(out, wo)?;
        out = tape.add_bias(out, bo)?;
        Ok(out)
    }

    /// One transformer block; shared by the base model and the control branch
    /// (which binds its own parameter prefix).
    pub(crate) fn block_forward(
        &self,
        tape: &mut Tape,
        source: &mut dyn ParamSource,
        prefix: &str,
        x: TensorId,
        temb_act: TensorId,
        cond_h: TensorId,
    ) -> Result<TensorId> {
        let h = self.cfg.hidden;
        let heads = self.cfg.heads;
        let scale = 1.0 / ((h / heads) as f32).sqrt();
        let p = |s: &str| format!("{prefix}.{s}");

        let wa = source.get(tape, &p("ada.w"))?;
        let ba = source.get(tape, &p("ada.b"))?;
        let mut ada = tape.matmul(temb_act, wa)?;
        ada = tape.add_bias(ada, ba)?;
        let shift1 = tape.slice_last(ada, 0, h)?;
        let scale1 = tape.slice_last(ada, h, h)?;
        let gate1 = tape.slice_last(ada, 2 * h, h)?;
        let shift2 = tape.slice_last(ada, 3 * h, h)?;
        let scale2 = tape.slice_last(ada, 4 * h, h)?;
        let gate2 = tape.slice_last(ada, 5 * h, h)?;

        // self-attention with adaLN-zero gating
        let mut sa_in = tape.layer_norm(x, None, None, LN_EPS)?;
        sa_in = tape.modulate(sa_in, shift1, scale1)?;
        let sa_out = self.mha(tape, source, &p("sa"), sa_in, sa_in, scale, heads)?;
        let gated = tape.mul_tokens(sa_out, gate1)?;
        let mut x = tape.add(x, gated)?;

        // cross-attention to the condition tokens, plain residual
        let g = source.get(tape, &p("ca.ln.g"))?;
        let b = source.get(tape, &p("ca.ln.b"))?;
        let ca_in = tape.layer_norm(x, Some(g), Some(b), LN_EPS)?;
        let ca_out = self.mha(tape, source, &p("ca"), ca_in, cond_h, scale, heads)?;
        x = tape.add(x, ca_out)?;

        // MLP with adaLN-zero gating
        let mut mlp_in = tape.layer_norm(x, None, None, LN_EPS)?;
        mlp_in = tape.modulate(mlp_in, shift2, scale2)?;
        let w1 = source.get(tape, &p("mlp.w1"))?;
        let b1 = source.get(tape, &p("mlp.b1"))?;
        let w2 = source.get(tape, &p("mlp.w2"))?;
        let b2 = source.get(tape, &p("mlp.b2"))?;
        let mut mlp = tape.matmul(mlp_in, w1)?;
        mlp = tape.add_bias(mlp, b1)?;
        mlp = tape.gelu(mlp);
        mlp = tape.matmul(mlp, w2)?;
        mlp = tape.add_bias(mlp, b2)?;
        let gated2 = tape.mul_tokens(mlp, gate2)?;
        tape.add(x, gated2)
    }

    fn mha(
        &self,
        tape: &mut Tape,
        source: &mut dyn ParamSource,
        prefix: &str,
        q_in: TensorId,
        kv_in: TensorId,
        scale: f32,
        heads: usize,
    ) -> Result<TensorId> {
        let p = |s: &str| format!("{prefix}.{s}");
        let wq = source.get(tape, &p("q.w"))?;
        let bq = source.get(tape, &p("q.b"))?;
        let wk = source.get(tape, &p("k.w"))?;
        let bk = source.get(tape, &p("k.b"))?;
        let wv = source.get(tape, &p("v.w"))?;
        let bv = source.get(tape, &p("v.b"))?;
        let wo = source.get(tape, &p("o.w"))?;
        let bo = source.get(tape, &p("o.b"))?;
        let mut q = tape.matmul(q_in, wq)?;
        q = tape.add_bias(q, bq)?;
        let mut k = tape.matmul(kv_in, wk)?;
        k = tape.add_bias(k, bk)?;
        let mut v = tape.matmul(kv_in, wv)?;
        v = tape.add_bias(v, bv)?;
        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(k, heads)?;
        let vh = tape.split_heads(v, heads)?;
        let attn = tape.attention(qh, kh, vh, scale)?;
        let merged = tape.merge_heads(attn, heads)?;
        let mut out = tape.matmul(merged, wo)?;
        out = tape.add_bias(out, bo)?;
        Ok(out)
    }

    /// Gradient-free forward over a single latent.
    pub fn forward(
        &self,
        params: &ModelParams,
        lat_t: &LatentTensor,
        t: f64,
        cond: CondInput<'_>,
        t_max: usize,
    ) -> Result<LatentTensor> {
        let mut tape = Tape::new();
        let mut source = PlainParams::all_frozen(params);
        let tokens = patchify(lat_t, self.cfg.patch)?;
        let shape = tokens.shape().to_vec();
        let x = tape.leaf(tokens.reshaped(&[1, shape[0], shape[1]])?, false);
        let out = self.forward_tape(&mut tape, &mut source, x, &[t], &[cond], t_max)?;
        let s = lat_t.shape();
        let out_tokens = tape.value(out).reshaped(&[shape[0], shape[1]])?;
        unpatchify(&out_tokens, self.cfg.patch, s[0], s[1], s[2])
    }
}

/// [h, w, c] latent to [(h/p)·(w/p), p·p·c] row-major tokens.
pub fn patchify(lat: &Tensor, p: usize) -> Result<Tensor> {
    let s = lat.shape();
    if s.len() != 3 {
        return Err(Error::InvalidDims(format!("patchify expects [h,w,c], got {:?}", s)));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if h % p != 0 || w % p != 0 {
        return Err(Error::InvalidDims(format!(
            "latent {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (th, tw) = (h / p, w / p);
    let td = p * p * c;
    let mut data = vec![0.0f32; th * tw * td];
    for ty in 0..th {
        for tx in 0..tw {
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        data[(ty * tw + tx) * td + (dy * p + dx) * c + ch] =
                            lat.data()[((ty * p + dy) * w + (tx * p + dx)) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[th * tw, td], data)
}

pub fn unpatchify(tokens: &Tensor, p: usize, h: usize, w: usize, c: usize) -> Result<Tensor> {
    let s = tokens.shape();
    let (th, tw) = (h / p, w / p);
    if s.len() != 2 || s[0] != th * tw || s[1] != p * p * c {
        return Err(Error::InvalidDims(format!(
            "unpatchify: tokens {:?} inconsistent with {h}x{w}x{c}, p={p}",
            s
        )));
    }
    let td = p * p * c;
    let mut data = vec![0.0f32; h * w * c];
    for ty in 0..th {
        for tx in 0..tw {
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        data[((ty * p + dy) * w + (tx * p + dx)) * c + ch] =
                            tokens.data()[(ty * tw + tx) * td + (dy * p + dx) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, c], data)
}

/// Sinusoidal features for a (possibly fractional) timestep.
pub fn sinusoidal_features(t: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half as f64);
        out[i] = (t * freq).sin() as f32;
        out[half + i] = (t * freq).cos() as f32;
    }
    out
}

/// 2-D sinusoidal positions for a rows x cols grid, as [rows*cols, dim].
pub fn pos_2d(rows: usize, cols: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * dim;
            let rf = sinusoidal_features(r as f64, half);
            let cf = sinusoidal_features(c as f64, dim - half);
            data[base..base + half].copy_from_slice(&rf);
            data[base + half..base + dim].copy_from_slice(&cf);
        }
    }
    Tensor::new(&[rows * cols, dim], data).expect("pos grid")
}

fn tile_batch(t: &Tensor, batch: usize) -> Result<Tensor> {
    let mut shape = vec![batch];
    shape.extend_from_slice(t.shape());
    let mut data = Vec::with_capacity(batch * t.numel());
    for _ in 0..batch {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

/// `EpsModel` view over a backbone + parameter set, used by the samplers.
pub struct DitEpsModel<'a> {
    pub backbone: &'a Backbone,
    pub params: &'a ModelParams,
    pub t_max: usize,
    /// Grid dims used for the unconditional (null-token) branch.
    pub null_dims: (usize, usize),
}

impl EpsModel for DitEpsModel<'_> {
    fn eps(&self, x_t: &Tensor, t: f64, cond: Option<&ConditionGrid>) -> Result<Tensor> {
        let input = match cond {
            Some(g) => CondInput::Tokens(g),
            None => CondInput::Null {
                rows: self.null_dims.0,
                cols: self.null_dims.1,
            },
        };
        self.backbone.forward(self.params, x_t, t, input, self.t_max)
    }
}

/// One training example: clean latent, its condition (None = dropped, use
/// the learned null token), an integer timestep, and the noise draw.
pub struct TrainExample {
    pub x0: Tensor,
    pub cond: Option<ConditionGrid>,
    pub cond_dims: (usize, usize),
    pub t: usize,
    pub eps: Tensor,
}

/// Noised token batch ready for a forward pass: stacked inputs/targets in
/// token space plus per-element timesteps and condition inputs.
pub struct PreparedBatch<'a> {
    pub x_tokens: Tensor,
    pub eps_tokens: Tensor,
    pub ts: Vec<f64>,
    pub cond: Vec<CondInput<'a>>,
}

/// Noise and patchify every example and stack to [B, n, token_dim]. The MSE
/// taken in token space equals the latent-space MSE because patchify is a
/// permutation.
pub fn prepare_batch<'a>(
    p: usize,
    schedule: &crate::diffusion::NoiseSchedule,
    batch: &'a [TrainExample],
) -> Result<PreparedBatch<'a>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch".into()));
    }
    let mut xt_data = Vec::new();
    let mut eps_data = Vec::new();
    let mut token_shape: Option<Vec<usize>> = None;
    let mut ts = Vec::with_capacity(batch.len());
    let mut cond_inputs = Vec::with_capacity(batch.len());
    for ex in batch {
        let x_t = schedule.add_noise(&ex.x0, &ex.eps, ex.t)?;
        let xt_tokens = patchify(&x_t, p)?;
        let eps_tokens = patchify(&ex.eps, p)?;
        match &token_shape {
            None => token_shape = Some(xt_tokens.shape().to_vec()),
            Some(s) => {
                if s != xt_tokens.shape() {
                    return Err(Error::ShapeMismatch {
                        context: "mixed latent shapes in one batch".into(),
                        lhs: s.clone(),
                        rhs: xt_tokens.shape().to_vec(),
                    });
                }
            }
        }
        xt_data.extend_from_slice(xt_tokens.data());
        eps_data.extend_from_slice(eps_tokens.data());
        ts.push(ex.t as f64);
        cond_inputs.push(match &ex.cond {
            Some(g) => CondInput::Tokens(g),
            None => CondInput::Null {
                rows: ex.cond_dims.0,
                cols: ex.cond_dims.1,
            },
        });
    }
    let ts_shape = token_shape.expect("non-empty batch");
    let full = vec![batch.len(), ts_shape[0], ts_shape[1]];
    Ok(PreparedBatch {
        x_tokens: Tensor::new(&full, xt_data)?,
        eps_tokens: Tensor::new(&full, eps_data)?,
        ts,
        cond: cond_inputs,
    })
}

/// Differentiable batch epsilon loss through the plain backbone forward.
pub fn batch_epsilon_loss_tape(
    backbone: &Backbone,
    tape: &mut Tape,
    source: &mut dyn ParamSource,
    schedule: &crate::diffusion::NoiseSchedule,
    batch: &[TrainExample],
) -> Result<TensorId> {
    let prep = prepare_batch(backbone.config().patch, schedule, batch)?;
    let x = tape.leaf(prep.x_tokens, false);
    let target = tape.constant(prep.eps_tokens);
    let out = backbone.forward_tape(tape, source, x, &prep.ts, &prep.cond, schedule.t_steps())?;
    tape.mse(out, target)
}

/// Draw a fresh random parameter vector, add noise, etc. Helper for tests
/// and initialization of small dense layers outside the backbone.
pub fn randn_tensor(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    let mut rng = derive_rng(seed, &[tag]);
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Tensor::new(shape, data).expect("randn shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::ConditionGrid;

    fn toy_backbone() -> Backbone {
        Backbone::new(BackboneConfig {
            patch: 2,
            hidden: 16,
            depth: 2,
            heads: 2,
            cond_dim: 8,
            latent_channels: 3,
            max_tokens: 16,
        })
        .unwrap()
    }

    fn unit_grid(rows: usize, cols: usize, dim: usize, seed: u64) -> ConditionGrid {
        let mut tokens = Vec::new();
        for i in 0..rows * cols {
            let raw = randn_tensor(&[dim], seed + i as u64, "grid-token");
            let norm = raw.l2_norm().max(1e-9) as f32;
            tokens.extend(raw.data().iter().map(|&v| v / norm));
        }
        ConditionGrid::new(rows, cols, dim, tokens).unwrap()
    }

    #[test]
    fn patchify_counts_and_roundtrip() {
        let lat = randn_tensor(&[8, 8, 3], 0, "lat");
        let tokens = patchify(&lat, 2).unwrap();
        assert_eq!(tokens.shape(), &[16, 12]);
        let back = unpatchify(&tokens, 2, 8, 8, 3).unwrap();
        assert_eq!(back, lat);
    }

    #[test]
    fn patchify_token_layout() {
        // token 5 of a 4x4 token grid covers latent rows 2..4, cols 2..4
        let mut lat = Tensor::zeros(&[8, 8, 3]);
        let idx = (2 * 8 + 2) * 3; // latent (2,2), channel 0
        lat.data_mut()[idx] = 7.0;
        let tokens = patchify(&lat, 2).unwrap();
        assert_eq!(tokens.data()[5 * 12], 7.0);
    }

    #[test]
    fn output_shape_matches_input_for_all_stage_grids() {
        let bb = toy_backbone();
        let params = bb.init_params(0);
        for (rows, cols, side) in [(1, 1, 2), (2, 2, 4), (4, 4, 8)] {
            let lat = randn_tensor(&[side, side, 3], 1, "lat-shape");
            let grid = unit_grid(rows, cols, 8, 2);
            let out = bb
                .forward(&params, &lat, 10.0, CondInput::Tokens(&grid), 1000)
                .unwrap();
            assert_eq!(out.shape(), lat.shape());
        }
    }

    #[test]
    fn stage_contract_rejects_bad_token_count() {
        let bb = toy_backbone();
        let params = bb.init_params(0);
        let lat = randn_tensor(&[4, 4, 3], 1, "lat-bad");
        let grid = unit_grid(3, 3, 8, 2);
        let err = bb.forward(&params, &lat, 10.0, CondInput::Tokens(&grid), 1000);
        assert!(matches!(err, Err(Error::StageContract(_))));
    }

    #[test]
    fn timestep_out_of_range_rejected() {
        let bb = toy_backbone();
        let params = bb.init_params(0);
        let lat = randn_tensor(&[4, 4, 3], 1, "lat-t");
        let grid = unit_grid(2, 2, 8, 2);
        let err = bb.forward(&params, &lat, 0.0, CondInput::Tokens(&grid), 1000);
        assert!(matches!(err, Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn deterministic_forward() {
        let bb = toy_backbone();
        let params = bb.init_params(3);
        let lat = randn_tensor(&[4, 4, 3], 4, "lat-det");
        let grid = unit_grid(2, 2, 8, 5);
        let a = bb
            .forward(&params, &lat, 100.0, CondInput::Tokens(&grid), 1000)
            .unwrap();
        let b = bb
            .forward(&params, &lat, 100.0, CondInput::Tokens(&grid), 1000)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_timesteps_give_distinct_embeddings() {
        let a = sinusoidal_features(10.0, 16);
        let b = sinusoidal_features(11.0, 16);
        let cos = crate::embedder::cosine(&a, &b);
        assert!(cos < 1.0 - 1e-9);
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn default_param_count_is_stable() {
        let bb = Backbone::new(BackboneConfig::default()).unwrap();
        let params = bb.init_params(0);
        assert_eq!(param_count(&params), 390_864);
    }
}
