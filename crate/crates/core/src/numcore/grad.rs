//! Reverse pass: topological sort and per-op gradient rules.

use super::array::Array;
use super::ops::{axis_split, gelu_grad_f64, sigmoid_f64, OpKind};
use crate::error::{Error, Result};
use std::collections::HashSet;

/// Post-order (inputs before consumers) traversal of the recorded graph.
pub(crate) fn topo_order(root: &Array) -> Vec<Array> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    // (node, next input index to visit)
    let mut stack: Vec<(Array, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.node_id());
    while let Some((node, idx)) = stack.pop() {
        let n_inputs = node.0.op.as_ref().map_or(0, |op| op.inputs.len());
        if idx < n_inputs {
            stack.push((node.clone(), idx + 1));
            let child = node.0.op.as_ref().unwrap().inputs[idx].clone();
            if visited.insert(child.node_id()) {
                stack.push((child, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

impl Array {
    /// Accumulate gradients of this scalar into every reachable leaf that
    /// requires them. A recorded graph may be consumed exactly once.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if self.0.backward_done.get() {
            return Err(Error::DoubleBackward);
        }
        self.0.backward_done.set(true);
        let order = topo_order(self);
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let Some(op) = node.0.op.as_ref() else { continue };
            let Some(g) = node.grad() else { continue };
            backprop_op(node, &op.kind, &op.inputs, &g);
            // Intermediate grads are not needed once propagated.
            if !node.0.requires_grad.get() && node.node_id() != self.node_id() {
                node.zero_grad();
            }
        }
        Ok(())
    }
}

fn add_into(target: &Array, inc: &[f32]) {
    if target.tracks_grad() {
        target.accumulate_grad(inc);
    }
}

fn backprop_op(out: &Array, kind: &OpKind, inputs: &[Array], g: &[f32]) {
    match kind {
        OpKind::Add => {
            add_into(&inputs[0], g);
            add_into(&inputs[1], g);
        }
        OpKind::AddBias => {
            add_into(&inputs[0], g);
            if inputs[1].tracks_grad() {
                let d = inputs[1].numel();
                let mut acc = vec![0.0f64; d];
                for (i, &v) in g.iter().enumerate() {
                    acc[i % d] += v as f64;
                }
                let db: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
                inputs[1].accumulate_grad_owned(db);
            }
        }
        OpKind::Sub => {
            add_into(&inputs[0], g);
            if inputs[1].tracks_grad() {
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                inputs[1].accumulate_grad_owned(neg);
            }
        }
        OpKind::Mul => {
            if inputs[0].tracks_grad() {
                let b = inputs[1].data();
                let da: Vec<f32> = g.iter().zip(b.iter()).map(|(y, v)| y * v).collect();
                inputs[0].accumulate_grad_owned(da);
            }
            if inputs[1].tracks_grad() {
                let a = inputs[0].data();
                let db: Vec<f32> = g.iter().zip(a.iter()).map(|(y, v)| y * v).collect();
                inputs[1].accumulate_grad_owned(db);
            }
        }
        OpKind::Scale(c) => {
            if inputs[0].tracks_grad() {
                let da: Vec<f32> = g.iter().map(|v| v * c).collect();
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::Matmul => {
            use super::ops::{gemm_f64, narrow_f32, transpose_widen, widen};
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let n = inputs[1].shape()[1];
            let g64 = widen(g);
            if inputs[0].tracks_grad() {
                // dA = g @ B^T
                let bt = transpose_widen(&inputs[1].data(), k, n);
                let mut da = vec![0.0f64; m * k];
                gemm_f64(&g64, &bt, m, n, k, &mut da);
                inputs[0].accumulate_grad_owned(narrow_f32(da));
            }
            if inputs[1].tracks_grad() {
                // dB = A^T @ g
                let at = transpose_widen(&inputs[0].data(), m, k);
                let mut db = vec![0.0f64; k * n];
                gemm_f64(&at, &g64, k, m, n, &mut db);
                inputs[1].accumulate_grad_owned(narrow_f32(db));
            }
        }
        OpKind::Transpose => {
            if inputs[0].tracks_grad() {
                let (m, n) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::Reshape => add_into(&inputs[0], g),
        OpKind::Concat { axis } => {
            let shape = out.shape();
            let (outer, total, inner) = axis_split(shape, *axis);
            let mut offset = 0;
            for p in inputs {
                let pn = p.shape()[*axis];
                if p.tracks_grad() {
                    let mut dp = vec![0.0f32; p.numel()];
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + pn) * inner];
                        dp[o * pn * inner..(o + 1) * pn * inner].copy_from_slice(src);
                    }
                    p.accumulate_grad_owned(dp);
                }
                offset += pn;
            }
        }
        OpKind::Narrow { axis, start } => {
            if inputs[0].tracks_grad() {
                let s = inputs[0].shape();
                let (outer, n, inner) = axis_split(s, *axis);
                let len = out.shape()[*axis];
                let mut da = vec![0.0f32; inputs[0].numel()];
                for o in 0..outer {
                    let dst = &mut da[(o * n + start) * inner..(o * n + start + len) * inner];
                    dst.copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::Softmax { axis } => {
            if inputs[0].tracks_grad() {
                let s = out.data();
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let mut da = vec![0.0f32; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let mut dot = 0.0f64;
                        for j in 0..n {
                            dot += g[idx(j)] as f64 * s[idx(j)] as f64;
                        }
                        for j in 0..n {
                            da[idx(j)] =
                                (s[idx(j)] as f64 * (g[idx(j)] as f64 - dot)) as f32;
                        }
                    }
                }
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::LayerNorm { eps } => {
            let x = inputs[0].data();
            let gamma = inputs[1].data();
            let d = gamma.len();
            let rows = x.len() / d;
            let need_x = inputs[0].tracks_grad();
            let need_g = inputs[1].tracks_grad();
            let need_b = inputs[2].tracks_grad();
            let mut dx = vec![0.0f32; need_x as usize * x.len()];
            let mut dg = vec![0.0f64; d];
            let mut db = vec![0.0f64; d];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + *eps as f64).sqrt();
                if need_g || need_b {
                    for j in 0..d {
                        let xh = (row[j] as f64 - mean) * inv;
                        dg[j] += gr[j] as f64 * xh;
                        db[j] += gr[j] as f64;
                    }
                }
                if need_x {
                    let mut sum_gy = 0.0f64;
                    let mut sum_gy_xh = 0.0f64;
                    for j in 0..d {
                        let gy = gr[j] as f64 * gamma[j] as f64;
                        let xh = (row[j] as f64 - mean) * inv;
                        sum_gy += gy;
                        sum_gy_xh += gy * xh;
                    }
                    let (m1, m2) = (sum_gy / d as f64, sum_gy_xh / d as f64);
                    for j in 0..d {
                        let gy = gr[j] as f64 * gamma[j] as f64;
                        let xh = (row[j] as f64 - mean) * inv;
                        dx[r * d + j] = ((gy - m1 - xh * m2) * inv) as f32;
                    }
                }
            }
            if need_x {
                inputs[0].accumulate_grad_owned(dx);
            }
            if need_g {
                let v: Vec<f32> = dg.into_iter().map(|v| v as f32).collect();
                inputs[1].accumulate_grad_owned(v);
            }
            if need_b {
                let v: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                inputs[2].accumulate_grad_owned(v);
            }
        }
        OpKind::Gelu => {
            if inputs[0].tracks_grad() {
                let x = inputs[0].data();
                let da: Vec<f32> = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| (gelu_grad_f64(v as f64) * gv as f64) as f32)
                    .collect();
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::Softplus => {
            if inputs[0].tracks_grad() {
                let x = inputs[0].data();
                let da: Vec<f32> = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| (sigmoid_f64(v as f64) * gv as f64) as f32)
                    .collect();
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::Sigmoid => {
            if inputs[0].tracks_grad() {
                let s = out.data();
                let da: Vec<f32> = s
                    .iter()
                    .zip(g)
                    .map(|(&sv, &gv)| {
                        let s64 = sv as f64;
                        (s64 * (1.0 - s64) * gv as f64) as f32
                    })
                    .collect();
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::Abs => {
            if inputs[0].tracks_grad() {
                let x = inputs[0].data();
                let da: Vec<f32> = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else if v < 0.0 { -gv } else { 0.0 })
                    .collect();
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::Sum => {
            if inputs[0].tracks_grad() {
                inputs[0].accumulate_grad_owned(vec![g[0]; inputs[0].numel()]);
            }
        }
        OpKind::Mean => {
            if inputs[0].tracks_grad() {
                let n = inputs[0].numel();
                inputs[0].accumulate_grad_owned(vec![g[0] / n as f32; n]);
            }
        }
        OpKind::GatherRows { indices } => {
            if inputs[0].tracks_grad() {
                let c = inputs[0].shape()[1];
                let mut da = vec![0.0f32; inputs[0].numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += g[r * c + j];
                    }
                }
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::SplitHeads { n_heads } => {
            if inputs[0].tracks_grad() {
                let (rows, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let dh = d / n_heads;
                let mut da = vec![0.0f32; rows * d];
                for h in 0..*n_heads {
                    for r in 0..rows {
                        for k in 0..dh {
                            da[r * d + h * dh + k] = g[(h * rows + r) * dh + k];
                        }
                    }
                }
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::Upsample2x => {
            if inputs[0].tracks_grad() {
                let s = inputs[0].shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let mut da = vec![0.0f32; h * w * c];
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let dst = ((y / 2) * w + x / 2) * c;
                        let src = (y * 2 * w + x) * c;
                        for ch in 0..c {
                            da[dst + ch] += g[src + ch];
                        }
                    }
                }
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::SpaceToDepth => {
            if inputs[0].tracks_grad() {
                let s = inputs[0].shape();
                let (h, w, c) = (s[0] / 2, s[1] / 2, s[2]);
                let mut da = vec![0.0f32; inputs[0].numel()];
                for y in 0..h {
                    for x in 0..w {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let img = (((2 * y + dy) * 2 * w) + 2 * x + dx) * c;
                                let col = (y * w + x) * 4 * c + (2 * dy + dx) * c;
                                da[img..img + c].copy_from_slice(&g[col..col + c]);
                            }
                        }
                    }
                }
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::DepthToSpace => {
            if inputs[0].tracks_grad() {
                let s = inputs[0].shape();
                let (h, w, c) = (s[0], s[1], s[2] / 4);
                let mut da = vec![0.0f32; inputs[0].numel()];
                for y in 0..h {
                    for x in 0..w {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let col = (y * w + x) * 4 * c + (2 * dy + dx) * c;
                                let img = (((2 * y + dy) * 2 * w) + 2 * x + dx) * c;
                                da[col..col + c].copy_from_slice(&g[img..img + c]);
                            }
                        }
                    }
                }
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::Unfold3x3 => {
            if inputs[0].tracks_grad() {
                let s = inputs[0].shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let mut da = vec![0.0f32; h * w * c];
                for y in 0..h {
                    for x in 0..w {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) =
                                    (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let img = (sy as usize * w + sx as usize) * c;
                                let col = (y * w + x) * 9 * c + (ky * 3 + kx) * c;
                                for ch in 0..c {
                                    da[img + ch] += g[col + ch];
                                }
                            }
                        }
                    }
                }
                inputs[0].accumulate_grad_owned(da);
            }
        }
        OpKind::CrossEntropy { targets } => {
            if inputs[0].tracks_grad() {
                let v = inputs[0].shape()[1];
                let x = inputs[0].data();
                let rows = targets.len();
                let scale = g[0] / rows as f32;
                let mut da = vec![0.0f32; x.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &x[r * v..(r + 1) * v];
                    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let denom: f64 = row.iter().map(|&u| ((u - mx) as f64).exp()).sum();
                    for j in 0..v {
                        let p = ((row[j] - mx) as f64).exp() / denom;
                        let onehot = (j == t) as u8 as f64;
                        da[r * v + j] = ((p - onehot) * scale as f64) as f32;
                    }
                }
                inputs[0].accumulate_grad_owned(da);
            }
        }
    }
}
