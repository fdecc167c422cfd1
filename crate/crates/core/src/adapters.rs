//! ControlNet-style control branch and LoRA low-rank adapters, both layered
//! on a frozen backbone.
//!
//! The control branch owns a full copy of every transformer block plus one
//! zero-initialized output linear per block; its per-block outputs, scaled
//! by the control scale `s`, are added to the base activations, so a fresh
//! branch (or `s = 0`) reproduces the base forward exactly. LoRA splices
//! `W + (alpha/r)·B·A` into selected attention projections on the tape, so
//! gradients reach only the low-rank factors.

use crate::backbone::{
    batch_epsilon_loss_tape, collect_grads, patchify, unpatchify, Backbone, CondInput,
    ModelParams, ParamSource, TrainExample,
};
use crate::diffusion::{EpsModel, NoiseSchedule};
use crate::embedder::ConditionGrid;
use crate::error::{Error, Result};
use crate::io::{params_sha256, Checkpoint, CheckpointMeta};
use crate::rng::{derive_rng, derive_rng_indexed};
use crate::sampler::{sample, SamplerConfig};
use crate::tensor::{adamw_step, AdamWConfig, AdamWState, Tape, Tensor, TensorId};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Binary cell-layout mask at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl CellMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidDims(format!(
                "mask data length {} != {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Config("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn foreground_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Mean mask value over each cell of a rows×cols grid, as [rows·cols, 1].
    pub fn pool(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows == 0 || cols == 0 || self.height % rows != 0 || self.width % cols != 0 {
            return Err(Error::InvalidDims(format!(
                "mask {}x{} not divisible into {rows}x{cols} cells",
                self.height, self.width
            )));
        }
        let (bh, bw) = (self.height / rows, self.width / cols);
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0f64;
                for dy in 0..bh {
                    for dx in 0..bw {
                        acc += self.data[(r * bh + dy) * self.width + (c * bw + dx)] as f64;
                    }
                }
                out[r * cols + c] = (acc / (bh * bw) as f64) as f32;
            }
        }
        Tensor::new(&[rows * cols, 1], out)
    }
}

/// Fresh control-branch parameters: block copies under `ctrl.`, zero output
/// linears, and a small mask-token encoder.
pub fn init_control_params(backbone: &Backbone, base: &ModelParams, seed: u64) -> ModelParams {
    let h = backbone.config().hidden;
    let mut out = ModelParams::new();
    for (name, t) in base {
        if name.starts_with('b') && name[1..2].chars().all(|c| c.is_ascii_digit()) {
            out.insert(format!("ctrl.{name}"), t.clone());
        }
    }
    for i in 0..backbone.config().depth {
        out.insert(format!("ctrl.zero{i}.w"), Tensor::zeros(&[h, h]));
        out.insert(format!("ctrl.zero{i}.b"), Tensor::zeros(&[h]));
    }
    let mut rng = derive_rng(seed, &["control-mask-encoder"]);
    let w: Vec<f32> = (0..h)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * 0.02)
        .collect();
    out.insert(
        "ctrl.mask.w".into(),
        Tensor::new(&[1, h], w).expect("mask encoder shape"),
    );
    out.insert("ctrl.mask.b".into(), Tensor::zeros(&[h]));
    out
}

/// Parameter source over two maps: `primary` is searched first (the adapter
/// parameters), `fallback` second (the frozen base).
pub struct LayeredParams<'a> {
    primary: &'a ModelParams,
    fallback: &'a ModelParams,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    bound: HashMap<String, (TensorId, bool)>,
}

impl<'a> LayeredParams<'a> {
    pub fn new(
        primary: &'a ModelParams,
        fallback: &'a ModelParams,
        trainable: impl Fn(&str) -> bool + 'a,
    ) -> Self {
        Self {
            primary,
            fallback,
            trainable: Box::new(trainable),
            bound: HashMap::new(),
        }
    }

    pub fn all_frozen(primary: &'a ModelParams, fallback: &'a ModelParams) -> Self {
        Self::new(primary, fallback, |_| false)
    }
}

impl ParamSource for LayeredParams<'_> {
    fn get(&mut self, tape: &mut Tape, name: &str) -> Result<TensorId> {
        if let Some(&(id, _)) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self
            .primary
            .get(name)
            .or_else(|| self.fallback.get(name))
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

/// Dual-path forward: the branch runs block copies on (tokens + encoded
/// mask); each branch block output passes through its zero linear, is
/// scaled by `s` and added after the matching base block.
#[allow(clippy::too_many_arguments)]
pub fn control_forward_tape(
    backbone: &Backbone,
    tape: &mut Tape,
    source: &mut dyn ParamSource,
    x_tokens: TensorId,
    t: &[f64],
    cond: &[CondInput<'_>],
    mask_tokens: &Tensor,
    s: f32,
    t_max: usize,
) -> Result<TensorId> {
    let shape = tape.shape(x_tokens).to_vec();
    if mask_tokens.shape() != [shape[0], shape[1], 1] {
        return Err(Error::ShapeMismatch {
            context: "control mask tokens".into(),
            lhs: mask_tokens.shape().to_vec(),
            rhs: vec![shape[0], shape[1], 1],
        });
    }
    let ctx = backbone.embed_inputs(tape, source, x_tokens, t, cond, t_max)?;

    let mw = source.get(tape, "ctrl.mask.w")?;
    let mb = source.get(tape, "ctrl.mask.b")?;
    let mt = tape.constant(mask_tokens.clone());
    let mut mask_h = tape.matmul(mt, mw)?;
    mask_h = tape.add_bias(mask_h, mb)?;

    let mut cx = tape.add(ctx.x, mask_h)?;
    let mut x = ctx.x;
    for i in 0..backbone.config().depth {
        cx = backbone.block_forward(tape, source, &format!("ctrl.b{i}"), cx, ctx.temb_act, ctx.cond_h)?;
        let zw = source.get(tape, &format!("ctrl.zero{i}.w"))?;
        let zb = source.get(tape, &format!("ctrl.zero{i}.b"))?;
        let mut delta = tape.matmul(cx, zw)?;
        delta = tape.add_bias(delta, zb)?;
        delta = tape.scale(delta, s);
        x = backbone.block_forward(tape, source, &format!("b{i}"), x, ctx.temb_act, ctx.cond_h)?;
        x = tape.add(x, delta)?;
    }
    backbone.head(tape, source, x, ctx.temb_act)
}

/// Gradient-free control forward over a single latent.
#[allow(clippy::too_many_arguments)]
pub fn control_forward(
    backbone: &Backbone,
    base: &ModelParams,
    ctrl: &ModelParams,
    lat_t: &Tensor,
    t: f64,
    cond: CondInput<'_>,
    mask: &CellMask,
    s: f32,
    t_max: usize,
) -> Result<Tensor> {
    let p = backbone.config().patch;
    let sh = lat_t.shape().to_vec();
    let (th, tw) = (sh[0] / p, sh[1] / p);
    let pooled = mask.pool(th, tw)?;
    let n = th * tw;
    let mask_tokens = pooled.reshaped(&[1, n, 1])?;
    let tokens = patchify(lat_t, p)?;
    let td = tokens.shape()[1];
    let mut tape = Tape::new();
    let mut source = LayeredParams::all_frozen(ctrl, base);
    let x = tape.leaf(tokens.reshaped(&[1, n, td])?, false);
    let out = control_forward_tape(
        backbone, &mut tape, &mut source, x, &[t], &[cond], &mask_tokens, s, t_max,
    )?;
    let out_tokens = tape.value(out).reshaped(&[n, td])?;
    unpatchify(&out_tokens, p, sh[0], sh[1], sh[2])
}

/// Shared trainer knobs for the adapter fine-tuning loops. Adapters use a
/// larger learning rate than the base curriculum because they start from a
/// trained backbone and run for few steps at desk scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdapterTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 0.0,
            steps: 200,
            batch: 8,
            seed: 0,
        }
    }
}

/// One mask-paired training item for the control branch.
pub struct ControlExample {
    pub latent: Tensor,
    pub cond: ConditionGrid,
    pub mask: CellMask,
}

/// Train only the `ctrl.*` parameters on mask-paired data; the base stays
/// frozen. Returns per-step losses.
pub fn control_train(
    backbone: &Backbone,
    base: &ModelParams,
    ctrl: &mut ModelParams,
    schedule: &NoiseSchedule,
    data: &[ControlExample],
    cfg: &AdapterTrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("control training data".into()));
    }
    let p = backbone.config().patch;
    let mut opt_state = AdamWState::default();
    let opt_cfg = AdamWConfig {
        lr: cfg.lr as f32,
        weight_decay: cfg.weight_decay as f32,
        ..AdamWConfig::default()
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = derive_rng_indexed(cfg.seed, "control-step", &[step as u64]);
        let mut batch = Vec::with_capacity(cfg.batch);
        let mut mask_rows = Vec::new();
        let mut n_tokens = 0;
        for _ in 0..cfg.batch {
            let ex = &data[rng.gen_range(0..data.len())];
            let sh = ex.latent.shape();
            let (th, tw) = (sh[0] / p, sh[1] / p);
            n_tokens = th * tw;
            mask_rows.extend_from_slice(ex.mask.pool(th, tw)?.data());
            let t = rng.gen_range(1..=schedule.t_steps());
            let eps = Tensor::randn(ex.latent.shape(), &mut rng);
            batch.push(TrainExample {
                x0: ex.latent.clone(),
                cond: Some(ex.cond.clone()),
                cond_dims: (ex.cond.rows(), ex.cond.cols()),
                t,
                eps,
            });
        }
        let mask_tokens = Tensor::new(&[cfg.batch, n_tokens, 1], mask_rows)?;
        let prep = crate::backbone::prepare_batch(p, schedule, &batch)?;
        let (loss_val, named) = {
            let mut tape = Tape::new();
            let mut source = LayeredParams::new(ctrl, base, |n| n.starts_with("ctrl."));
            let x = tape.leaf(prep.x_tokens, false);
            let target = tape.constant(prep.eps_tokens);
            let out = control_forward_tape(
                backbone,
                &mut tape,
                &mut source,
                x,
                &prep.ts,
                &prep.cond,
                &mask_tokens,
                1.0,
                schedule.t_steps(),
            )?;
            let loss = tape.mse(out, target)?;
            let mut grads = tape.backward(loss)?;
            let named = collect_grads(&source, &mut grads)?;
            (tape.value(loss).item() as f64, named)
        };
        losses.push(loss_val);
        adamw_step(ctrl, &named, &mut opt_state, &opt_cfg)?;
    }
    Ok(losses)
}

/// Epsilon model that runs the control branch at a fixed mask and scale.
pub struct ControlEpsModel<'a> {
    pub backbone: &'a Backbone,
    pub base: &'a ModelParams,
    pub ctrl: &'a ModelParams,
    pub mask: &'a CellMask,
    pub s: f32,
    pub t_max: usize,
    pub null_dims: (usize, usize),
}

impl EpsModel for ControlEpsModel<'_> {
    fn eps(&self, x_t: &Tensor, t: f64, cond: Option<&ConditionGrid>) -> Result<Tensor> {
        let input = match cond {
            Some(g) => CondInput::Tokens(g),
            None => CondInput::Null {
                rows: self.null_dims.0,
                cols: self.null_dims.1,
            },
        };
        control_forward(
            self.backbone,
            self.base,
            self.ctrl,
            x_t,
            t,
            input,
            self.mask,
            self.s,
            self.t_max,
        )
    }
}

/// Per-pixel latent energy thresholded at its median, compared against the
/// mask pooled to latent resolution — the density proxy behind the
/// control-scale sweep's agreement score.
pub fn mask_agreement(lat: &Tensor, mask: &CellMask) -> Result<f64> {
    let sh = lat.shape();
    if sh.len() != 3 {
        return Err(Error::InvalidDims(format!(
            "mask_agreement expects [h,w,c] latent, got {:?}",
            sh
        )));
    }
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let mut energy = vec![0.0f64; h * w];
    for i in 0..h * w {
        let mut acc = 0.0f64;
        for ch in 0..c {
            let v = lat.data()[i * c + ch] as f64;
            acc += v * v;
        }
        energy[i] = acc.sqrt();
    }
    let mut sorted = energy.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let pred: Vec<u8> = energy.iter().map(|&e| u8::from(e > median)).collect();
    let pooled = mask.pool(h, w)?;
    let gt: Vec<u8> = pooled.data().iter().map(|&v| u8::from(v > 0.5)).collect();
    let (_dice, iou, _acc) = crate::metrics::dice_iou(&pred, &gt)?;
    Ok(iou)
}

/// One row of a control-scale sweep.
pub struct ControlSweepRow {
    pub s: f64,
    pub agreement: f64,
    pub sample: Tensor,
}

/// Sample once per control scale from identical noise (shared sampler seed)
/// and score mask agreement for every s.
#[allow(clippy::too_many_arguments)]
pub fn control_guidance_sweep(
    backbone: &Backbone,
    base: &ModelParams,
    ctrl: &ModelParams,
    schedule: &NoiseSchedule,
    cond: &ConditionGrid,
    mask: &CellMask,
    shape: &[usize],
    s_list: &[f64],
    sampler_cfg: &SamplerConfig,
) -> Result<Vec<ControlSweepRow>> {
    if s_list.is_empty() {
        return Err(Error::EmptyInput("control scale list".into()));
    }
    let mut rows = Vec::with_capacity(s_list.len());
    for &s in s_list {
        let model = ControlEpsModel {
            backbone,
            base,
            ctrl,
            mask,
            s: s as f32,
            t_max: schedule.t_steps(),
            null_dims: (cond.rows(), cond.cols()),
        };
        let lat = sample(&model, schedule, Some(cond), shape, sampler_cfg)?;
        let agreement = mask_agreement(&lat, mask)?;
        rows.push(ControlSweepRow {
            s,
            agreement,
            sample: lat,
        });
    }
    Ok(rows)
}

/// Low-rank delta for one weight matrix stored as [in, out]: A is the r×in
/// down-projection, B the out×r up-projection (zero at init), effective
/// delta (alpha/r)·(B·A) transposed into [in, out].
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraAdapter {
    pub fn new(in_dim: usize, out_dim: usize, rank: usize, alpha: f32, seed: u64) -> Result<Self> {
        if rank == 0 || rank > in_dim.min(out_dim) {
            return Err(Error::Config(format!(
                "lora rank {rank} invalid for {in_dim}x{out_dim} target"
            )));
        }
        let mut rng = derive_rng(seed, &["lora-init"]);
        let a_data: Vec<f32> = (0..rank * in_dim)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * 0.02)
            .collect();
        Ok(Self {
            a: Tensor::new(&[rank, in_dim], a_data)?,
            b: Tensor::zeros(&[out_dim, rank]),
            rank,
            alpha,
        })
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// Effective delta in the [in, out] layout of the backbone's weights.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?.transposed()?.scale(self.scale()))
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// W + (alpha/r)·(B·A)ᵀ for a weight stored [in, out]; W untouched.
pub fn lora_apply(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let sh = w.shape();
    if sh.len() != 2
        || adapter.a.shape()[1] != sh[0]
        || adapter.b.shape()[0] != sh[1]
    {
        return Err(Error::ShapeMismatch {
            context: "lora_apply".into(),
            lhs: sh.to_vec(),
            rhs: vec![adapter.a.shape()[1], adapter.b.shape()[0]],
        });
    }
    w.add(&adapter.delta()?)
}

/// Named set of adapters over backbone weight matrices.
#[derive(Debug, Clone, Default)]
pub struct LoraSet {
    pub adapters: std::collections::BTreeMap<String, LoraAdapter>,
}

/// Default targets: q/k/v/o of self- and cross-attention in every block.
pub fn default_lora_targets(depth: usize) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..depth {
        for proj in ["sa.q", "sa.k", "sa.v", "sa.o", "ca.q", "ca.k", "ca.v", "ca.o"] {
            out.push(format!("b{i}.{proj}.w"));
        }
    }
    out
}

impl LoraSet {
    pub fn init_for_backbone(
        backbone: &Backbone,
        base: &ModelParams,
        rank: usize,
        alpha: f32,
        seed: u64,
    ) -> Result<Self> {
        let mut adapters = std::collections::BTreeMap::new();
        for (i, name) in default_lora_targets(backbone.config().depth).iter().enumerate() {
            let w = base
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing lora target `{name}`")))?;
            let sh = w.shape();
            adapters.insert(
                name.clone(),
                LoraAdapter::new(sh[0], sh[1], rank, alpha, seed.wrapping_add(i as u64))?,
            );
        }
        Ok(Self { adapters })
    }

    pub fn trainable_param_count(&self) -> usize {
        self.adapters.values().map(LoraAdapter::param_count).sum()
    }

    /// Materialize effective weights into a standalone parameter map.
    pub fn apply_to(&self, base: &ModelParams) -> Result<ModelParams> {
        let mut out = base.clone();
        for (name, ad) in &self.adapters {
            let w = out
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing lora target `{name}`")))?;
            let eff = lora_apply(w, ad)?;
            out.insert(name.clone(), eff);
        }
        Ok(out)
    }
}

struct LoraBind {
    a: TensorId,
    b: TensorId,
    eff: TensorId,
}

/// Parameter source splicing LoRA deltas into their targets on the tape.
/// Base weights bind frozen; only A/B factors are trainable.
pub struct LoraParams<'a> {
    base: &'a ModelParams,
    set: &'a LoraSet,
    trainable: bool,
    bound: HashMap<String, (TensorId, bool)>,
    lora_bound: HashMap<String, LoraBind>,
}

impl<'a> LoraParams<'a> {
    pub fn new(base: &'a ModelParams, set: &'a LoraSet, trainable: bool) -> Self {
        Self {
            base,
            set,
            trainable,
            bound: HashMap::new(),
            lora_bound: HashMap::new(),
        }
    }
}

impl ParamSource for LoraParams<'_> {
    fn get(&mut self, tape: &mut Tape, name: &str) -> Result<TensorId> {
        if let Some(bind) = self.lora_bound.get(name) {
            return Ok(bind.eff);
        }
        if let Some(&(id, _)) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self
            .base
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if let Some(ad) = self.set.adapters.get(name) {
            let w = tape.leaf(t.clone(), false);
            self.bound.insert(name.to_string(), (w, false));
            let a = tape.leaf(ad.a.clone(), self.trainable);
            let b = tape.leaf(ad.b.clone(), self.trainable);
            let ba = tape.matmul(b, a)?;
            let ba_t = tape.transpose_last2(ba)?;
            let delta = tape.scale(ba_t, ad.scale());
            let eff = tape.add(w, delta)?;
            self.lora_bound.insert(name.to_string(), LoraBind { a, b, eff });
            return Ok(eff);
        }
        let id = tape.leaf(t.clone(), false);
        self.bound.insert(name.to_string(), (id, false));
        Ok(id)
    }

    fn trainable_leaves(&self) -> Vec<(String, TensorId)> {
        if !self.trainable {
            return vec![];
        }
        let mut out = Vec::new();
        for (name, bind) in &self.lora_bound {
            out.push((format!("{name}::a"), bind.a));
            out.push((format!("{name}::b"), bind.b));
        }
        out
    }

    fn frozen_leaves(&self) -> Vec<(String, TensorId)> {
        self.bound
            .iter()
            .map(|(n, &(id, _))| (n.clone(), id))
            .collect()
    }
}

/// Fine-tune only the LoRA factors on (latent, condition) pairs; the base
/// map is never written. Returns the trained set and per-step losses.
pub fn lora_finetune(
    backbone: &Backbone,
    base: &ModelParams,
    set: &LoraSet,
    schedule: &NoiseSchedule,
    corpus: &[(Tensor, ConditionGrid)],
    cfg: &AdapterTrainConfig,
) -> Result<(LoraSet, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("lora corpus".into()));
    }
    let mut working = set.clone();
    // flat view for the optimizer
    let mut flat = ModelParams::new();
    for (name, ad) in &working.adapters {
        flat.insert(format!("{name}::a"), ad.a.clone());
        flat.insert(format!("{name}::b"), ad.b.clone());
    }
    let mut opt_state = AdamWState::default();
    let opt_cfg = AdamWConfig {
        lr: cfg.lr as f32,
        weight_decay: cfg.weight_decay as f32,
        ..AdamWConfig::default()
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = derive_rng_indexed(cfg.seed, "lora-step", &[step as u64]);
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (lat, grid) = &corpus[rng.gen_range(0..corpus.len())];
            let t = rng.gen_range(1..=schedule.t_steps());
            let eps = Tensor::randn(lat.shape(), &mut rng);
            batch.push(TrainExample {
                x0: lat.clone(),
                cond: Some(grid.clone()),
                cond_dims: (grid.rows(), grid.cols()),
                t,
                eps,
            });
        }
        let mut tape = Tape::new();
        let mut source = LoraParams::new(base, &working, true);
        let loss = batch_epsilon_loss_tape(backbone, &mut tape, &mut source, schedule, &batch)?;
        losses.push(tape.value(loss).item() as f64);
        let mut grads = tape.backward(loss)?;
        let named = collect_grads(&source, &mut grads)?;
        adamw_step(&mut flat, &named, &mut opt_state, &opt_cfg)?;
        for (name, ad) in working.adapters.iter_mut() {
            ad.a = flat[&format!("{name}::a")].clone();
            ad.b = flat[&format!("{name}::b")].clone();
        }
    }
    Ok((working, losses))
}

/// Serialized form of one adapter's hyperparameters.
#[derive(Serialize, Deserialize)]
struct LoraHeader {
    targets: Vec<String>,
    ranks: Vec<usize>,
    alphas: Vec<f32>,
}

/// Standalone adapter checkpoint referencing the base parameters by content
/// hash.
pub fn save_lora(path: &Path, set: &LoraSet, base: &ModelParams, step: u64) -> Result<()> {
    let header = LoraHeader {
        targets: set.adapters.keys().cloned().collect(),
        ranks: set.adapters.values().map(|a| a.rank).collect(),
        alphas: set.adapters.values().map(|a| a.alpha).collect(),
    };
    let mut tensors = std::collections::BTreeMap::new();
    for (name, ad) in &set.adapters {
        tensors.insert(format!("{name}::a"), ad.a.clone());
        tensors.insert(format!("{name}::b"), ad.b.clone());
    }
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            stage: "lora".into(),
            step,
            config: serde_json::to_value(&header)?,
            base_hash: Some(params_sha256(base)),
        },
        tensors,
    };
    ckpt.save(path)
}

/// Load an adapter checkpoint, verifying it was trained against exactly
/// this base parameter set.
pub fn load_lora(path: &Path, base: &ModelParams) -> Result<LoraSet> {
    let ckpt = Checkpoint::load(path)?;
    let expect = params_sha256(base);
    match &ckpt.meta.base_hash {
        Some(h) if *h == expect => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "adapter base hash {:?} does not match loaded base {expect}",
                other
            )))
        }
    }
    let header: LoraHeader = serde_json::from_value(ckpt.meta.config.clone())?;
    let mut adapters = std::collections::BTreeMap::new();
    for ((name, rank), alpha) in header
        .targets
        .iter()
        .zip(header.ranks)
        .zip(header.alphas)
    {
        let a = ckpt
            .tensors
            .get(&format!("{name}::a"))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}::a`")))?;
        let b = ckpt
            .tensors
            .get(&format!("{name}::b"))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}::b`")))?;
        adapters.insert(
            name.clone(),
            LoraAdapter {
                a: a.clone(),
                b: b.clone(),
                rank,
                alpha,
            },
        );
    }
    Ok(LoraSet { adapters })
}
