//! Tape-based reverse mode.
//!
//! A `Tape` owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and `backward` is a single reverse sweep that visits each node
//! exactly once. Tapes are rebuilt per step; nothing persists across steps.

use super::{matmul_block, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Backward closure: (parent values, output value, output gradient) ->
/// gradient contribution per parent, in parent order.
type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<TensorId>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Insert an input tensor. Gradients are tracked only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, parents: Vec<TensorId>, backward: BackwardFn) -> TensorId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|_, _, dout| vec![dout.clone(), dout.clone()]),
        ))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|_, _, dout| vec![dout.clone(), dout.scale(-1.0)]),
        ))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|parents, _, dout| {
                vec![
                    dout.mul(parents[1]).expect("mul backward"),
                    dout.mul(parents[0]).expect("mul backward"),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> TensorId {
        let value = self.value(a).scale(c);
        self.push(
            value,
            vec![a],
            Box::new(move |_, _, dout| vec![dout.scale(c)]),
        )
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f32) -> TensorId {
        let value = self.value(a).map(|v| v + c);
        self.push(value, vec![a], Box::new(|_, _, dout| vec![dout.clone()]))
    }

    /// Broadcast-add a bias of shape [d] over the last axis.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = *xv.shape().last().ok_or_else(|| {
            Error::InvalidDims("add_bias on 0-d tensor".into())
        })?;
        if bv.shape() != [d] {
            return Err(Error::ShapeMismatch {
                context: "add_bias".into(),
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut data = xv.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv.data()[i % d];
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(
            value,
            vec![x, bias],
            Box::new(move |_, _, dout| {
                let mut db = vec![0.0f64; d];
                for (i, &g) in dout.data().iter().enumerate() {
                    db[i % d] += g as f64;
                }
                let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                vec![dout.clone(), Tensor::new(&[d], db).expect("bias grad")]
            }),
        ))
    }

    // ---- activations ----

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(
            value,
            vec![x],
            Box::new(|parents, _, dout| {
                vec![dout
                    .zip(parents[0], |g, v| if v > 0.0 { g } else { 0.0 })
                    .expect("relu backward")]
            }),
        )
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).map(f32::tanh);
        self.push(
            value,
            vec![x],
            Box::new(|_, out, dout| {
                vec![dout.zip(out, |g, y| g * (1.0 - y * y)).expect("tanh backward")]
            }),
        )
    }

    pub fn silu(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(
            value,
            vec![x],
            Box::new(|parents, _, dout| {
                vec![dout
                    .zip(parents[0], |g, v| {
                        let s = sigmoid(v);
                        g * (s * (1.0 + v * (1.0 - s)))
                    })
                    .expect("silu backward")]
            }),
        )
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).map(gelu_tanh);
        self.push(
            value,
            vec![x],
            Box::new(|parents, _, dout| {
                vec![dout
                    .zip(parents[0], |g, v| g * gelu_tanh_deriv(v))
                    .expect("gelu backward")]
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let value = self.value(x).reshaped(shape)?;
        let old_shape = self.value(x).shape().to_vec();
        Ok(self.push(
            value,
            vec![x],
            Box::new(move |_, _, dout| {
                vec![dout.reshaped(&old_shape).expect("reshape backward")]
            }),
        ))
    }

    /// Swap the last two axes of a 2-D or 3-D tensor.
    pub fn transpose_last2(&mut self, x: TensorId) -> Result<TensorId> {
        let value = transpose_last2_value(self.value(x))?;
        Ok(self.push(
            value,
            vec![x],
            Box::new(|_, _, dout| {
                vec![transpose_last2_value(dout).expect("transpose backward")]
            }),
        ))
    }

    /// Columns [start, start+len) along the last axis.
    pub fn slice_last(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::InvalidDims("slice_last on 0-d tensor".into()))?;
        if start + len > d {
            return Err(Error::InvalidDims(format!(
                "slice_last [{start}, {}) out of last dim {d}",
                start + len
            )));
        }
        let rows = xv.numel() / d;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, data)?;
        let full_shape = xv.shape().to_vec();
        Ok(self.push(
            value,
            vec![x],
            Box::new(move |_, _, dout| {
                let mut dx = Tensor::zeros(&full_shape);
                let d = *full_shape.last().unwrap();
                let rows = dx.numel() / d;
                for r in 0..rows {
                    dx.data_mut()[r * d + start..r * d + start + len]
                        .copy_from_slice(&dout.data()[r * len..(r + 1) * len]);
                }
                vec![dx]
            }),
        ))
    }

    /// [B, n, h*dh] -> [B*h, n, dh]
    pub fn split_heads(&mut self, x: TensorId, heads: usize) -> Result<TensorId> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() != 3 || shape[2] % heads != 0 {
            return Err(Error::InvalidDims(format!(
                "split_heads: shape {:?} with {} heads",
                shape, heads
            )));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let value = split_heads_value(xv, heads)?;
        Ok(self.push(
            value,
            vec![x],
            Box::new(move |_, _, dout| {
                vec![merge_heads_value(dout, heads, b, n, dh).expect("split_heads backward")]
            }),
        ))
    }

    /// [B*h, n, dh] -> [B, n, h*dh]
    pub fn merge_heads(&mut self, x: TensorId, heads: usize) -> Result<TensorId> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() != 3 || shape[0] % heads != 0 {
            return Err(Error::InvalidDims(format!(
                "merge_heads: shape {:?} with {} heads",
                shape, heads
            )));
        }
        let (bh, n, dh) = (shape[0], shape[1], shape[2]);
        let b = bh / heads;
        let value = merge_heads_value(xv, heads, b, n, dh)?;
        Ok(self.push(
            value,
            vec![x],
            Box::new(move |_, _, dout| {
                vec![split_heads_value(dout, heads).expect("merge_heads backward")]
            }),
        ))
    }

    /// Stack equal-shaped nodes along a new leading axis.
    pub fn stack0(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("stack0".into()));
        }
        let first_shape = self.value(parts[0]).shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).numel());
        for &p in parts {
            let v = self.value(p);
            if v.shape() != first_shape {
                return Err(Error::ShapeMismatch {
                    context: "stack0".into(),
                    lhs: first_shape,
                    rhs: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first_shape);
        let value = Tensor::new(&shape, data)?;
        let part_numel: usize = first_shape.iter().product();
        Ok(self.push(
            value,
            parts.to_vec(),
            Box::new(move |parents, _, dout| {
                parents
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        Tensor::new(
                            p.shape(),
                            dout.data()[i * part_numel..(i + 1) * part_numel].to_vec(),
                        )
                        .expect("stack0 backward")
                    })
                    .collect()
            }),
        ))
    }

    /// Broadcast a [1, d] row to [m, d]; the gradient sums over rows.
    pub fn tile_rows(&mut self, x: TensorId, m: usize) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.shape()[0] != 1 {
            return Err(Error::InvalidDims(format!(
                "tile_rows expects [1, d], got {:?}",
                xv.shape()
            )));
        }
        let d = xv.shape()[1];
        let mut data = Vec::with_capacity(m * d);
        for _ in 0..m {
            data.extend_from_slice(xv.data());
        }
        let value = Tensor::new(&[m, d], data)?;
        Ok(self.push(
            value,
            vec![x],
            Box::new(move |_, _, dout| {
                let mut acc = vec![0.0f64; d];
                for r in 0..m {
                    for j in 0..d {
                        acc[j] += dout.data()[r * d + j] as f64;
                    }
                }
                vec![Tensor::new(&[1, d], acc.iter().map(|&v| v as f32).collect::<Vec<_>>())
                    .expect("tile_rows backward")]
            }),
        ))
    }

    // ---- contractions ----

    /// Matrix product. Supports [m,k]·[k,n], batched [b,m,k]·[b,k,n], and
    /// weight-shared [b,m,k]·[k,n] (gradient for the weight sums over the
    /// batch).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let av = self.value(a);
        let bv = self.value(b);
        let value = matmul_value(av, bv)?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|parents, _, dout| {
                matmul_backward(parents[0], parents[1], dout).expect("matmul backward")
            }),
        ))
    }

    // ---- normalization / softmax ----

    pub fn softmax_last(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::InvalidDims("softmax on 0-d tensor".into()))?;
        let rows = xv.numel() / d;
        let mut data = vec![0.0f32; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let e = ((v - m) as f64).exp();
                data[r * d + j] = e as f32;
                z += e;
            }
            for j in 0..d {
                data[r * d + j] = (data[r * d + j] as f64 / z) as f32;
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(
            value,
            vec![x],
            Box::new(move |_, out, dout| {
                let mut dx = vec![0.0f32; out.numel()];
                let rows = out.numel() / d;
                for r in 0..rows {
                    let y = &out.data()[r * d..(r + 1) * d];
                    let g = &dout.data()[r * d..(r + 1) * d];
                    let dot: f64 = y
                        .iter()
                        .zip(g)
                        .map(|(&yi, &gi)| (yi as f64) * (gi as f64))
                        .sum();
                    for j in 0..d {
                        dx[r * d + j] = ((g[j] as f64 - dot) * y[j] as f64) as f32;
                    }
                }
                vec![Tensor::new(out.shape(), dx).expect("softmax backward")]
            }),
        ))
    }

    /// Layer norm over the last axis with optional per-feature affine.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: Option<TensorId>,
        beta: Option<TensorId>,
        eps: f32,
    ) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be > 0".into()));
        }
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::InvalidDims("layer_norm on 0-d tensor".into()))?;
        let gv = gamma.map(|g| self.value(g).clone());
        let bv = beta.map(|b| self.value(b).clone());
        if let Some(g) = &gv {
            if g.shape() != [d] {
                return Err(Error::ShapeMismatch {
                    context: "layer_norm gamma".into(),
                    lhs: xv.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if let Some(b) = &bv {
            if b.shape() != [d] {
                return Err(Error::ShapeMismatch {
                    context: "layer_norm beta".into(),
                    lhs: xv.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let rows = xv.numel() / d;
        let mut data = vec![0.0f32; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let (mu, var) = row_moments(row);
            let inv = 1.0 / (var + eps as f64).sqrt();
            for j in 0..d {
                let mut v = ((row[j] as f64 - mu) * inv) as f32;
                if let Some(g) = &gv {
                    v *= g.data()[j];
                }
                if let Some(b) = &bv {
                    v += b.data()[j];
                }
                data[r * d + j] = v;
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        let has_affine = gamma.is_some();
        let mut parents = vec![x];
        if let Some(g) = gamma {
            parents.push(g);
        }
        if let Some(b) = beta {
            parents.push(b);
        }
        Ok(self.push(
            value,
            parents,
            Box::new(move |parents, _, dout| {
                let xv = parents[0];
                let gv = if has_affine { Some(parents[1]) } else { None };
                let rows = xv.numel() / d;
                let mut dx = vec![0.0f32; xv.numel()];
                let mut dg = vec![0.0f64; d];
                let mut db = vec![0.0f64; d];
                for r in 0..rows {
                    let row = &xv.data()[r * d..(r + 1) * d];
                    let g_out = &dout.data()[r * d..(r + 1) * d];
                    let (mu, var) = row_moments(row);
                    let inv = 1.0 / (var + eps as f64).sqrt();
                    let xhat: Vec<f64> =
                        row.iter().map(|&v| (v as f64 - mu) * inv).collect();
                    // upstream gradient w.r.t. xhat
                    let dxhat: Vec<f64> = (0..d)
                        .map(|j| {
                            let mut g = g_out[j] as f64;
                            if let Some(gm) = gv {
                                g *= gm.data()[j] as f64;
                            }
                            g
                        })
                        .collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat: f64 = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            (inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat)) as f32;
                        dg[j] += (g_out[j] as f64) * xhat[j];
                        db[j] += g_out[j] as f64;
                    }
                }
                let mut grads = vec![Tensor::new(xv.shape(), dx).expect("ln backward")];
                if has_affine {
                    grads.push(
                        Tensor::new(&[d], dg.iter().map(|&v| v as f32).collect::<Vec<_>>())
                            .expect("ln gamma grad"),
                    );
                    grads.push(
                        Tensor::new(&[d], db.iter().map(|&v| v as f32).collect::<Vec<_>>())
                            .expect("ln beta grad"),
                    );
                }
                grads
            }),
        ))
    }

    // ---- token-axis broadcasts (x: [B,n,d], v: [B,d]) ----

    /// x * (1 + scale) + shift, with scale/shift broadcast over the token axis.
    pub fn modulate(&mut self, x: TensorId, shift: TensorId, scale: TensorId) -> Result<TensorId> {
        let one_plus = self.add_scalar(scale, 1.0);
        let scaled = self.mul_tokens(x, one_plus)?;
        self.add_tokens(scaled, shift)
    }

    /// Elementwise product with v broadcast over axis 1 of a [B,n,d] tensor.
    pub fn mul_tokens(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (b, n, d) = check_token_broadcast(self.value(x), self.value(v))?;
        let xv = self.value(x);
        let vv = self.value(v);
        let mut data = xv.data().to_vec();
        for bi in 0..b {
            for ni in 0..n {
                for di in 0..d {
                    data[(bi * n + ni) * d + di] *= vv.data()[bi * d + di];
                }
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(
            value,
            vec![x, v],
            Box::new(move |parents, _, dout| {
                let xv = parents[0];
                let vv = parents[1];
                let mut dx = vec![0.0f32; xv.numel()];
                let mut dv = vec![0.0f64; b * d];
                for bi in 0..b {
                    for ni in 0..n {
                        for di in 0..d {
                            let ix = (bi * n + ni) * d + di;
                            dx[ix] = dout.data()[ix] * vv.data()[bi * d + di];
                            dv[bi * d + di] +=
                                (dout.data()[ix] as f64) * (xv.data()[ix] as f64);
                        }
                    }
                }
                vec![
                    Tensor::new(xv.shape(), dx).expect("mul_tokens backward"),
                    Tensor::new(&[b, d], dv.iter().map(|&v| v as f32).collect::<Vec<_>>())
                        .expect("mul_tokens backward"),
                ]
            }),
        ))
    }

    /// Elementwise sum with v broadcast over axis 1 of a [B,n,d] tensor.
    pub fn add_tokens(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (b, n, d) = check_token_broadcast(self.value(x), self.value(v))?;
        let xv = self.value(x);
        let vv = self.value(v);
        let mut data = xv.data().to_vec();
        for bi in 0..b {
            for ni in 0..n {
                for di in 0..d {
                    data[(bi * n + ni) * d + di] += vv.data()[bi * d + di];
                }
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(
            value,
            vec![x, v],
            Box::new(move |_, _, dout| {
                let mut dv = vec![0.0f64; b * d];
                for bi in 0..b {
                    for ni in 0..n {
                        for di in 0..d {
                            dv[bi * d + di] += dout.data()[(bi * n + ni) * d + di] as f64;
                        }
                    }
                }
                vec![
                    dout.clone(),
                    Tensor::new(&[b, d], dv.iter().map(|&v| v as f32).collect::<Vec<_>>())
                        .expect("add_tokens backward"),
                ]
            }),
        ))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let value = Tensor::scalar(self.value(x).sum() as f32);
        let shape = self.value(x).shape().to_vec();
        self.push(
            value,
            vec![x],
            Box::new(move |_, _, dout| vec![Tensor::full(&shape, dout.item())]),
        )
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).numel() as f32;
        let value = Tensor::scalar(self.value(x).mean() as f32);
        let shape = self.value(x).shape().to_vec();
        self.push(
            value,
            vec![x],
            Box::new(move |_, _, dout| vec![Tensor::full(&shape, dout.item() / n)]),
        )
    }

    /// Mean squared error between two same-shape tensors, as a scalar node.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let diff = self.sub(a, b)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean_all(sq))
    }

    /// Scaled dot-product attention; q,k,v are [B,n,dh]-style batched stacks.
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        scale: f32,
    ) -> Result<TensorId> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        if qs.last() != ks.last() {
            return Err(Error::ShapeMismatch {
                context: "attention head dim".into(),
                lhs: qs,
                rhs: ks,
            });
        }
        if ks[..ks.len() - 1] != vs[..vs.len() - 1] {
            return Err(Error::ShapeMismatch {
                context: "attention key/value sequence".into(),
                lhs: ks,
                rhs: vs,
            });
        }
        let kt = self.transpose_last2(k)?;
        let logits = self.matmul(q, kt)?;
        let logits = self.scale(logits, scale);
        let weights = self.softmax_last(logits)?;
        self.matmul(weights, v)
    }

    /// Reverse sweep from a scalar root. Visits each node at most once.
    pub fn backward(&self, root: TensorId) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidDims(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(dout) = grads[idx].clone() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = backward(&parent_vals, &node.value, &dout);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[pid.0].needs_grad {
                    continue;
                }
                match &mut grads[pid.0] {
                    Some(acc) => *acc = acc.add(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

fn gelu_tanh(v: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh())
}

fn gelu_tanh_deriv(v: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

fn row_moments(row: &[f32]) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / d;
    (mu, var)
}

fn check_token_broadcast(x: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    let vs = v.shape();
    if xs.len() != 3 || vs.len() != 2 || xs[0] != vs[0] || xs[2] != vs[1] {
        return Err(Error::ShapeMismatch {
            context: "token broadcast expects x:[B,n,d], v:[B,d]".into(),
            lhs: xs.to_vec(),
            rhs: vs.to_vec(),
        });
    }
    Ok((xs[0], xs[1], xs[2]))
}

fn transpose_last2_value(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    match shape.len() {
        2 => x.transposed(),
        3 => {
            let (b, m, n) = (shape[0], shape[1], shape[2]);
            let mut data = vec![0.0f32; x.numel()];
            for bi in 0..b {
                for i in 0..m {
                    for j in 0..n {
                        data[bi * m * n + j * m + i] = x.data()[bi * m * n + i * n + j];
                    }
                }
            }
            Tensor::new(&[b, n, m], data)
        }
        _ => Err(Error::InvalidDims(format!(
            "transpose_last2 expects 2-D or 3-D, got {:?}",
            shape
        ))),
    }
}

fn split_heads_value(x: &Tensor, heads: usize) -> Result<Tensor> {
    let s = x.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let mut data = vec![0.0f32; x.numel()];
    for bi in 0..b {
        for h in 0..heads {
            for ni in 0..n {
                for di in 0..dh {
                    data[((bi * heads + h) * n + ni) * dh + di] =
                        x.data()[(bi * n + ni) * d + h * dh + di];
                }
            }
        }
    }
    Tensor::new(&[b * heads, n, dh], data)
}

fn merge_heads_value(x: &Tensor, heads: usize, b: usize, n: usize, dh: usize) -> Result<Tensor> {
    let d = heads * dh;
    let mut data = vec![0.0f32; x.numel()];
    for bi in 0..b {
        for h in 0..heads {
            for ni in 0..n {
                for di in 0..dh {
                    data[(bi * n + ni) * d + h * dh + di] =
                        x.data()[((bi * heads + h) * n + ni) * dh + di];
                }
            }
        }
    }
    Tensor::new(&[b, n, d], data)
}

fn matmul_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape().len(), b.shape().len()) {
        (2, 2) => a.matmul(b),
        (3, 2) => {
            let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(Error::ShapeMismatch {
                    context: "matmul inner dimension".into(),
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = vec![0.0f32; bs * m * n];
            for bi in 0..bs {
                matmul_block(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    b.data(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::new(&[bs, m, n], out)
        }
        (3, 3) => {
            let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
            if bs != bs2 || k != k2 {
                return Err(Error::ShapeMismatch {
                    context: "batched matmul".into(),
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = vec![0.0f32; bs * m * n];
            for bi in 0..bs {
                matmul_block(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::new(&[bs, m, n], out)
        }
        _ => Err(Error::InvalidDims(format!(
            "matmul: unsupported ranks {:?} x {:?}",
            a.shape(),
            b.shape()
        ))),
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, dout: &Tensor) -> Result<Vec<Tensor>> {
    match (a.shape().len(), b.shape().len()) {
        (2, 2) => {
            let da = dout.matmul(&b.transposed()?)?;
            let db = a.transposed()?.matmul(dout)?;
            Ok(vec![da, db])
        }
        (3, 2) => {
            let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[1];
            let bt = b.transposed()?;
            let mut da = vec![0.0f32; a.numel()];
            let mut db_acc = vec![0.0f64; k * n];
            for bi in 0..bs {
                matmul_block(
                    &dout.data()[bi * m * n..(bi + 1) * m * n],
                    bt.data(),
                    &mut da[bi * m * k..(bi + 1) * m * k],
                    m,
                    n,
                    k,
                );
                // dB += A_b^T · dC_b
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += (a.data()[bi * m * k + i * k + p] as f64)
                                * (dout.data()[bi * m * n + i * n + j] as f64);
                        }
                        db_acc[p * n + j] += acc;
                    }
                }
            }
            let db: Vec<f32> = db_acc.into_iter().map(|v| v as f32).collect();
            Ok(vec![
                Tensor::new(a.shape(), da)?,
                Tensor::new(&[k, n], db)?,
            ])
        }
        (3, 3) => {
            let bt = transpose_last2_value(b)?;
            let at = transpose_last2_value(a)?;
            let da = matmul_value(dout, &bt)?;
            let db = matmul_value(&at, dout)?;
            Ok(vec![da, db])
        }
        _ => unreachable!("matmul forward validated ranks"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_backward_accumulates_duplicate_parent() {
        // y = mean((x + x)^2), dy/dx = 8x/n
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let s = tape.add(x, x).unwrap();
        let sq = tape.mul(s, s).unwrap();
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        assert!((g.data()[0] - 4.0).abs() < 1e-6);
        assert!((g.data()[1] - 8.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_uniform_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[4], vec![0.3; 4]).unwrap(), false);
        let y = tape.softmax_last(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![0.0, 3.0f32.ln()]).unwrap(), false);
        let y = tape.softmax_last(x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.25).abs() < 1e-6);
        assert!((out[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 4], vec![2.5; 4]).unwrap(), false);
        let y = tape.layer_norm(x, None, None, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap(), false);
        let y = tape.layer_norm(x, None, None, 1e-10).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-4);
        assert!((out[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::new(&[1, 2, 3], vec![0.5; 6]).unwrap(), false);
        let k = tape.leaf(Tensor::new(&[1, 1, 3], vec![0.1, -0.2, 0.3]).unwrap(), false);
        let v = tape.leaf(Tensor::new(&[1, 1, 3], vec![7.0, 8.0, 9.0]).unwrap(), false);
        let out = tape.attention(q, k, v, 1.0).unwrap();
        let o = tape.value(out).data();
        for row in 0..2 {
            assert!((o[row * 3] - 7.0).abs() < 1e-5);
            assert!((o[row * 3 + 1] - 8.0).abs() < 1e-5);
            assert!((o[row * 3 + 2] - 9.0).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_identical_keys_averages_values() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::new(&[1, 1, 2], vec![0.4, -0.4]).unwrap(), false);
        let k = tape.leaf(Tensor::new(&[1, 2, 2], vec![0.3, 0.3, 0.3, 0.3]).unwrap(), false);
        let v = tape.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 5.0, 6.0]).unwrap(), false);
        let out = tape.attention(q, k, v, 1.0).unwrap();
        let o = tape.value(out).data();
        assert!((o[0] - 3.0).abs() < 1e-5);
        assert!((o[1] - 4.0).abs() < 1e-5);
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let id = tape.leaf(x.clone(), false);
        let s = tape.split_heads(id, 2).unwrap();
        assert_eq!(tape.shape(s), &[4, 3, 2]);
        let m = tape.merge_heads(s, 2).unwrap();
        assert_eq!(tape.value(m), &x);
    }
}
