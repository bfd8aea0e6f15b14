//! Reverse-mode autodiff over a linear operation tape.
//!
//! Forward calls execute eagerly and record just enough to replay the
//! chain rule backwards. Inputs always precede the operations consuming
//! them, so a single reverse sweep from the loss visits every node once.
//! Parameter leaves snapshot values from a [`ParamStore`]; `backward`
//! adds into the store's gradient accumulators, and accumulators are only
//! cleared by an explicit `zero_grads`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{ParamId, ParamStore};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    /// bias[j] added to every row j-th column: x[i,j] + bias[j].
    AddBiasRow {
        x: NodeId,
        bias: NodeId,
    },
    /// bias[i] added across the whole i-th row: x[i,j] + bias[i].
    AddBiasCol {
        x: NodeId,
        bias: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    SoftmaxRows {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        means: Vec<f64>,
        inv_stds: Vec<f64>,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// Row i multiplied by the constant scales[i].
    RowScale {
        x: NodeId,
        scales: Vec<f64>,
    },
    /// [rows, cols] -> [1, cols]: sum_i weights[i] * x[i, :].
    RowWeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
    /// Row gather from a [vocab, d] table.
    Lookup {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Scalar sum_e weights[e] * x[e] over the flattened tensor.
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
    /// Mean over rows with Some(target) of -log softmax(row)[target].
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    /// Sum over entries of the stable binary cross-entropy with logits.
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
    },
}

/// Recorded computation graph with node values and gradient buffers.
#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    requires: Vec<bool>,
    grads: Vec<Vec<f64>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    /// Node-local gradient from the last backward call.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id][0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = self.ops.len();
        self.grads.push(vec![0.0; values.len()]);
        self.ops.push(op);
        self.shapes.push(shape);
        self.values.push(values);
        self.requires.push(requires);
        id
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.shapes[id][..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shapes[id], &[])),
        }
    }

    /// Constant leaf that never receives a gradient.
    pub fn input(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Contract(format!(
                "input shape {:?} implies {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(self.push(Op::Leaf, shape, values, false))
    }

    /// Leaf snapshotting a store parameter; memoized per parameter so a
    /// parameter used several times accumulates one combined gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let t = store.get(id);
        let node = self.push(Op::Leaf, t.shape.clone(), t.values.clone(), t.requires_grad);
        self.param_nodes.insert(id, node);
        node
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        Ok(self.param(store, store.id(name)?))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::shape("matmul", &self.shapes[a], &self.shapes[b]));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.values[a], &self.values[b], m, ka, n, &mut out);
        let req = self.requires[a] || self.requires[b];
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out, req))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "transpose")?;
        let mut out = vec![0.0; r * c];
        kernels::transpose(&self.values[x], r, c, &mut out);
        let req = self.requires[x];
        Ok(self.push(Op::Transpose { x }, vec![c, r], out, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shapes[a] != self.shapes[b] {
            return Err(Error::shape("add", &self.shapes[a], &self.shapes[b]));
        }
        let out: Vec<f64> = self.values[a]
            .iter()
            .zip(&self.values[b])
            .map(|(&u, &v)| u + v)
            .collect();
        let req = self.requires[a] || self.requires[b];
        let shape = self.shapes[a].clone();
        Ok(self.push(Op::Add { a, b }, shape, out, req))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out: Vec<f64> = self.values[x].iter().map(|&v| v * factor).collect();
        let req = self.requires[x];
        let shape = self.shapes[x].clone();
        self.push(Op::Scale { x, factor }, shape, out, req)
    }

    pub fn add_bias_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "add_bias_row")?;
        if self.values[bias].len() != c {
            return Err(Error::shape(
                "add_bias_row",
                &self.shapes[x],
                &self.shapes[bias],
            ));
        }
        let mut out = self.values[x].clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += self.values[bias][j];
            }
        }
        let req = self.requires[x] || self.requires[bias];
        Ok(self.push(Op::AddBiasRow { x, bias }, vec![r, c], out, req))
    }

    pub fn add_bias_col(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "add_bias_col")?;
        if self.values[bias].len() != r {
            return Err(Error::shape(
                "add_bias_col",
                &self.shapes[x],
                &self.shapes[bias],
            ));
        }
        let mut out = self.values[x].clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += self.values[bias][i];
            }
        }
        let req = self.requires[x] || self.requires[bias];
        Ok(self.push(Op::AddBiasCol { x, bias }, vec![r, c], out, req))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = vec![0.0; self.values[x].len()];
        kernels::gelu(&self.values[x], &mut out);
        let req = self.requires[x];
        let shape = self.shapes[x].clone();
        self.push(Op::Gelu { x }, shape, out, req)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        if self.values[x].iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "softmax_rows input contains a non-finite value".into(),
            ));
        }
        let mut out = vec![0.0; r * c];
        kernels::softmax_rows(&self.values[x], r, c, &mut out);
        let req = self.requires[x];
        Ok(self.push(Op::SoftmaxRows { x }, vec![r, c], out, req))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.values[gamma].len() != c || self.values[beta].len() != c {
            return Err(Error::shape(
                "layer_norm",
                &self.shapes[x],
                &self.shapes[gamma],
            ));
        }
        let mut out = vec![0.0; r * c];
        let (means, inv_stds) = kernels::layer_norm_rows(
            &self.values[x],
            r,
            c,
            &self.values[gamma],
            &self.values[beta],
            eps,
            &mut out,
        );
        let req = self.requires[x] || self.requires[gamma] || self.requires[beta];
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                inv_stds,
            },
            vec![r, c],
            out,
            req,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (rp, cp) = self.dims2(p, "concat_cols")?;
            if rp != r {
                return Err(Error::shape(
                    "concat_cols",
                    &self.shapes[parts[0]],
                    &self.shapes[p],
                ));
            }
            widths.push(cp);
            total += cp;
        }
        let mut out = vec![0.0; r * total];
        for i in 0..r {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.values[p][i * w..(i + 1) * w]);
                off += w;
            }
        }
        let req = parts.iter().any(|&p| self.requires[p]);
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            vec![r, total],
            out,
            req,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, c) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (rp, cp) = self.dims2(p, "concat_rows")?;
            if cp != c {
                return Err(Error::shape(
                    "concat_rows",
                    &self.shapes[parts[0]],
                    &self.shapes[p],
                ));
            }
            rows += rp;
            out.extend_from_slice(&self.values[p]);
        }
        let req = parts.iter().any(|&p| self.requires[p]);
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            vec![rows, c],
            out,
            req,
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {start}+{len}) out of {r} rows"
            )));
        }
        let out = self.values[x][start * c..(start + len) * c].to_vec();
        let req = self.requires[x];
        Ok(self.push(Op::SliceRows { x, start, len }, vec![len, c], out, req))
    }

    pub fn row_scale(&mut self, x: NodeId, scales: Vec<f64>) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "row_scale")?;
        if scales.len() != r {
            return Err(Error::shape("row_scale", &self.shapes[x], &[scales.len()]));
        }
        let mut out = self.values[x].clone();
        for i in 0..r {
            for v in &mut out[i * c..(i + 1) * c] {
                *v *= scales[i];
            }
        }
        let req = self.requires[x];
        Ok(self.push(Op::RowScale { x, scales }, vec![r, c], out, req))
    }

    pub fn row_weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "row_weighted_sum")?;
        if weights.len() != r {
            return Err(Error::shape(
                "row_weighted_sum",
                &self.shapes[x],
                &[weights.len()],
            ));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            let w = weights[i];
            for j in 0..c {
                out[j] += w * self.values[x][i * c + j];
            }
        }
        let req = self.requires[x];
        Ok(self.push(Op::RowWeightedSum { x, weights }, vec![1, c], out, req))
    }

    pub fn lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (vocab, d) = self.dims2(table, "lookup")?;
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocab { id, vocab });
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&self.values[table][id * d..(id + 1) * d]);
        }
        let req = self.requires[table];
        Ok(self.push(
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            req,
        ))
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        if weights.len() != self.values[x].len() {
            return Err(Error::shape(
                "weighted_sum",
                &self.shapes[x],
                &[weights.len()],
            ));
        }
        let s: f64 = self.values[x]
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| v * w)
            .sum();
        let req = self.requires[x];
        Ok(self.push(Op::WeightedSum { x, weights }, vec![1], vec![s], req))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let weights = vec![1.0; self.values[x].len()];
        self.weighted_sum(x, weights).expect("weights match by construction")
    }

    /// Softmax cross-entropy averaged over rows with a Some(target).
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        targets: &[Option<usize>],
    ) -> Result<NodeId> {
        let (r, c) = self.dims2(logits, "cross_entropy_rows")?;
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy_rows",
                &self.shapes[logits],
                &[targets.len()],
            ));
        }
        let labeled = targets.iter().flatten().count();
        if labeled == 0 {
            return Err(Error::Contract(
                "cross_entropy_rows: no labeled row".into(),
            ));
        }
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                if *t >= c {
                    return Err(Error::Contract(format!(
                        "cross_entropy_rows: target {t} out of {c} classes at row {i}"
                    )));
                }
            }
        }
        let mut probs = vec![0.0; r * c];
        kernels::softmax_rows(&self.values[logits], r, c, &mut probs);
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = &self.values[logits][i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
                loss += lse - row[*t];
            }
        }
        loss /= labeled as f64;
        let req = self.requires[logits];
        Ok(self.push(
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            req,
        ))
    }

    /// Numerically stable sigmoid binary cross-entropy summed over entries.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        if targets.len() != self.values[logits].len() {
            return Err(Error::shape(
                "bce_with_logits",
                &self.shapes[logits],
                &[targets.len()],
            ));
        }
        let mut loss = 0.0;
        for (&z, &t) in self.values[logits].iter().zip(targets) {
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let req = self.requires[logits];
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            vec![1],
            vec![loss],
            req,
        ))
    }

    /// Reverse sweep from a scalar loss. Node-local gradients are reset per
    /// call; store accumulators are added into, so repeated calls without a
    /// `zero_grads` accumulate.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.values[loss].len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shapes[loss]
            )));
        }
        for g in &mut self.grads {
            g.fill(0.0);
        }
        self.grads[loss][0] = 1.0;

        for id in (0..=loss).rev() {
            if !self.requires[id] || self.grads[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            self.propagate(id);
        }

        for (&param, &node) in &self.param_nodes {
            if store.get(param).requires_grad {
                let grad = self.grads[node].clone();
                store.get_mut(param).accumulate_grad(&grad);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, id: NodeId) {
        // Inputs always precede `id`, so split keeps borrows disjoint.
        let (lo, hi) = self.grads.split_at_mut(id);
        let g = &hi[0];
        let op = self.ops[id].clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shapes[a][0], self.shapes[a][1]);
                let n = self.shapes[b][1];
                if self.requires[a] {
                    // dA += g * B^T
                    let mut bt = vec![0.0; k * n];
                    kernels::transpose(&self.values[b], k, n, &mut bt);
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g, &bt, m, n, k, &mut da);
                    axpy(&mut lo[a], &da);
                }
                if self.requires[b] {
                    // dB += A^T * g
                    let mut at = vec![0.0; m * k];
                    kernels::transpose(&self.values[a], m, k, &mut at);
                    let mut db = vec![0.0; k * n];
                    kernels::matmul(&at, g, k, m, n, &mut db);
                    axpy(&mut lo[b], &db);
                }
            }
            Op::Transpose { x } => {
                let (c, r) = (self.shapes[id][0], self.shapes[id][1]);
                let mut dx = vec![0.0; r * c];
                kernels::transpose(g, c, r, &mut dx);
                axpy(&mut lo[x], &dx);
            }
            Op::Add { a, b } => {
                if self.requires[a] {
                    axpy(&mut lo[a], g);
                }
                if self.requires[b] {
                    axpy(&mut lo[b], g);
                }
            }
            Op::Scale { x, factor } => {
                for (dx, &gv) in lo[x].iter_mut().zip(g) {
                    *dx += factor * gv;
                }
            }
            Op::AddBiasRow { x, bias } => {
                let (r, c) = (self.shapes[id][0], self.shapes[id][1]);
                if self.requires[x] {
                    axpy(&mut lo[x], g);
                }
                if self.requires[bias] {
                    for i in 0..r {
                        for j in 0..c {
                            lo[bias][j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::AddBiasCol { x, bias } => {
                let (r, c) = (self.shapes[id][0], self.shapes[id][1]);
                if self.requires[x] {
                    axpy(&mut lo[x], g);
                }
                if self.requires[bias] {
                    for i in 0..r {
                        for j in 0..c {
                            lo[bias][i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                for (e, (dx, &gv)) in lo[x].iter_mut().zip(g).enumerate() {
                    *dx += gv * kernels::gelu_grad_scalar(self.values[x][e]);
                }
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = (self.shapes[id][0], self.shapes[id][1]);
                let y = &self.values[id];
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                    for j in 0..c {
                        lo[x][i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref means,
                ref inv_stds,
            } => {
                let (r, c) = (self.shapes[id][0], self.shapes[id][1]);
                let gam = &self.values[gamma];
                let xv = &self.values[x];
                for i in 0..r {
                    let mean = means[i];
                    let inv = inv_stds[i];
                    // xhat and gradient pieces for this row
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (xv[i * c + j] - mean) * inv;
                        let dxhat = g[i * c + j] * gam[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        if self.requires[gamma] {
                            lo[gamma][j] += g[i * c + j] * xhat;
                        }
                        if self.requires[beta] {
                            lo[beta][j] += g[i * c + j];
                        }
                    }
                    if self.requires[x] {
                        let inv_c = 1.0 / c as f64;
                        for j in 0..c {
                            let xhat = (xv[i * c + j] - mean) * inv;
                            let dxhat = g[i * c + j] * gam[j];
                            lo[x][i * c + j] += inv
                                * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::ConcatCols { ref parts } => {
                let r = self.shapes[id][0];
                let total = self.shapes[id][1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shapes[p][1];
                    if self.requires[p] {
                        for i in 0..r {
                            for j in 0..w {
                                lo[p][i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows { ref parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.values[p].len();
                    if self.requires[p] {
                        axpy(&mut lo[p], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start, len } => {
                let c = self.shapes[id][1];
                let dst = &mut lo[x][start * c..(start + len) * c];
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::RowScale { x, ref scales } => {
                let c = self.shapes[id][1];
                for (i, &s) in scales.iter().enumerate() {
                    for j in 0..c {
                        lo[x][i * c + j] += s * g[i * c + j];
                    }
                }
            }
            Op::RowWeightedSum { x, ref weights } => {
                let c = self.shapes[id][1];
                for (i, &w) in weights.iter().enumerate() {
                    for j in 0..c {
                        lo[x][i * c + j] += w * g[j];
                    }
                }
            }
            Op::Lookup { table, ref ids } => {
                let d = self.shapes[id][1];
                for (row, &tid) in ids.iter().enumerate() {
                    for j in 0..d {
                        lo[table][tid * d + j] += g[row * d + j];
                    }
                }
            }
            Op::WeightedSum { x, ref weights } => {
                let g0 = g[0];
                for (dx, &w) in lo[x].iter_mut().zip(weights) {
                    *dx += g0 * w;
                }
            }
            Op::CrossEntropyRows {
                logits,
                ref targets,
                ref probs,
            } => {
                let c = self.shapes[logits][1];
                let labeled = targets.iter().flatten().count() as f64;
                let g0 = g[0] / labeled;
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..c {
                            let indicator = if j == *t { 1.0 } else { 0.0 };
                            lo[logits][i * c + j] += g0 * (probs[i * c + j] - indicator);
                        }
                    }
                }
            }
            Op::BceWithLogits {
                logits,
                ref targets,
            } => {
                let g0 = g[0];
                for (e, &t) in targets.iter().enumerate() {
                    let z = self.values[logits][e];
                    let sig = 1.0 / (1.0 + (-z).exp());
                    lo[logits][e] += g0 * (sig - t);
                }
            }
        }
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
