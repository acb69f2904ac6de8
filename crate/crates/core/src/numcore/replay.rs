//! f64 replay of a recorded graph.
//!
//! The finite-difference oracle re-evaluates the loss at perturbed leaf
//! values. Doing that replay in f64 removes the f32 cancellation noise that
//! would otherwise swamp small gradients at eps-scale differences; the
//! function semantics are identical op for op.

use std::collections::HashMap;

use super::array::Array;
use super::grad::topo_order;
use super::ops::{axis_split, gelu_f64, sigmoid_f64, softplus_f64, OpKind};

/// Evaluate `root` (any node of a recorded graph) in f64, substituting the
/// data of leaves by node id. Graph structure is data-independent, so the
/// replay stays valid at perturbed leaf values.
pub(crate) fn eval_f64(root: &Array, overrides: &HashMap<usize, Vec<f64>>) -> Vec<f64> {
    let order = topo_order(root);
    let mut vals: HashMap<usize, Vec<f64>> = HashMap::new();
    for node in &order {
        let id = node.node_id();
        if let Some(v) = overrides.get(&id) {
            vals.insert(id, v.clone());
            continue;
        }
        let Some(op) = node.0.op.as_ref() else {
            vals.insert(id, node.data().iter().map(|&v| v as f64).collect());
            continue;
        };
        let ins: Vec<&Vec<f64>> = op
            .inputs
            .iter()
            .map(|a| vals.get(&a.node_id()).expect("topo order"))
            .collect();
        let out = eval_op(&op.kind, &ins, &op.inputs, node);
        vals.insert(id, out);
    }
    vals.remove(&root.node_id()).expect("root evaluated")
}

fn eval_op(kind: &OpKind, ins: &[&Vec<f64>], in_arrays: &[Array], out: &Array) -> Vec<f64> {
    match kind {
        OpKind::Add => ins[0].iter().zip(ins[1]).map(|(a, b)| a + b).collect(),
        OpKind::AddBias => {
            let d = ins[1].len();
            ins[0]
                .iter()
                .enumerate()
                .map(|(i, a)| a + ins[1][i % d])
                .collect()
        }
        OpKind::Sub => ins[0].iter().zip(ins[1]).map(|(a, b)| a - b).collect(),
        OpKind::Mul => ins[0].iter().zip(ins[1]).map(|(a, b)| a * b).collect(),
        OpKind::Scale(c) => ins[0].iter().map(|a| a * *c as f64).collect(),
        OpKind::Matmul => {
            let (m, k) = (in_arrays[0].shape()[0], in_arrays[0].shape()[1]);
            let n = in_arrays[1].shape()[1];
            let (a, b) = (ins[0], ins[1]);
            let mut o = vec![0.0f64; m * n];
            for i in 0..m {
                for kk in 0..k {
                    let aik = a[i * k + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        o[i * n + j] += aik * b[kk * n + j];
                    }
                }
            }
            o
        }
        OpKind::Transpose => {
            let (m, n) = (in_arrays[0].shape()[0], in_arrays[0].shape()[1]);
            let mut o = vec![0.0f64; m * n];
            for i in 0..m {
                for j in 0..n {
                    o[j * m + i] = ins[0][i * n + j];
                }
            }
            o
        }
        OpKind::Reshape => ins[0].clone(),
        OpKind::Concat { axis } => {
            let shape = out.shape();
            let (outer, total, inner) = axis_split(shape, *axis);
            let mut o = vec![0.0f64; shape.iter().product()];
            let mut offset = 0;
            for (p, arr) in ins.iter().zip(in_arrays) {
                let pn = arr.shape()[*axis];
                for ou in 0..outer {
                    for j in 0..pn * inner {
                        o[(ou * total + offset) * inner + j] = p[ou * pn * inner + j];
                    }
                }
                offset += pn;
            }
            o
        }
        OpKind::Narrow { axis, start } => {
            let s = in_arrays[0].shape();
            let (outer, n, inner) = axis_split(s, *axis);
            let len = out.shape()[*axis];
            let mut o = vec![0.0f64; outer * len * inner];
            for ou in 0..outer {
                for j in 0..len * inner {
                    o[ou * len * inner + j] = ins[0][(ou * n + start) * inner + j];
                }
            }
            o
        }
        OpKind::Softmax { axis } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let mut o = vec![0.0f64; ins[0].len()];
            for ou in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (ou * n + j) * inner + i;
                    let mx = (0..n).map(|j| ins[0][idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for j in 0..n {
                        let e = (ins[0][idx(j)] - mx).exp();
                        o[idx(j)] = e;
                        denom += e;
                    }
                    for j in 0..n {
                        o[idx(j)] /= denom;
                    }
                }
            }
            o
        }
        OpKind::LayerNorm { eps } => {
            let d = ins[1].len();
            let rows = ins[0].len() / d;
            let mut o = vec![0.0f64; ins[0].len()];
            for r in 0..rows {
                let row = &ins[0][r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + *eps as f64).sqrt();
                for j in 0..d {
                    o[r * d + j] = (row[j] - mean) * inv * ins[1][j] + ins[2][j];
                }
            }
            o
        }
        OpKind::Gelu => ins[0].iter().map(|&x| gelu_f64(x)).collect(),
        OpKind::Softplus => ins[0].iter().map(|&x| softplus_f64(x)).collect(),
        OpKind::Sigmoid => ins[0].iter().map(|&x| sigmoid_f64(x)).collect(),
        OpKind::Abs => ins[0].iter().map(|x| x.abs()).collect(),
        OpKind::Sum => vec![ins[0].iter().sum()],
        OpKind::Mean => vec![ins[0].iter().sum::<f64>() / ins[0].len() as f64],
        OpKind::GatherRows { indices } => {
            let c = in_arrays[0].shape()[1];
            let mut o = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                o.extend_from_slice(&ins[0][i * c..(i + 1) * c]);
            }
            o
        }
        OpKind::SplitHeads { n_heads } => {
            let (rows, d) = (in_arrays[0].shape()[0], in_arrays[0].shape()[1]);
            let dh = d / n_heads;
            let mut o = vec![0.0f64; rows * d];
            for h in 0..*n_heads {
                for r in 0..rows {
                    for k in 0..dh {
                        o[(h * rows + r) * dh + k] = ins[0][r * d + h * dh + k];
                    }
                }
            }
            o
        }
        OpKind::Upsample2x => {
            let s = in_arrays[0].shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            let mut o = vec![0.0f64; 4 * h * w * c];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    for ch in 0..c {
                        o[(y * 2 * w + x) * c + ch] = ins[0][((y / 2) * w + x / 2) * c + ch];
                    }
                }
            }
            o
        }
        OpKind::SpaceToDepth => {
            let s = in_arrays[0].shape();
            let (h, w, c) = (s[0] / 2, s[1] / 2, s[2]);
            let mut o = vec![0.0f64; ins[0].len()];
            for y in 0..h {
                for x in 0..w {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            for ch in 0..c {
                                o[(y * w + x) * 4 * c + (2 * dy + dx) * c + ch] =
                                    ins[0][(((2 * y + dy) * 2 * w) + 2 * x + dx) * c + ch];
                            }
                        }
                    }
                }
            }
            o
        }
        OpKind::DepthToSpace => {
            let s = in_arrays[0].shape();
            let (h, w, c) = (s[0], s[1], s[2] / 4);
            let mut o = vec![0.0f64; ins[0].len()];
            for y in 0..h {
                for x in 0..w {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            for ch in 0..c {
                                o[(((2 * y + dy) * 2 * w) + 2 * x + dx) * c + ch] =
                                    ins[0][(y * w + x) * 4 * c + (2 * dy + dx) * c + ch];
                            }
                        }
                    }
                }
            }
            o
        }
        OpKind::Unfold3x3 => {
            let s = in_arrays[0].shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            let mut o = vec![0.0f64; h * w * 9 * c];
            for y in 0..h {
                for x in 0..w {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) =
                                (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for ch in 0..c {
                                o[(y * w + x) * 9 * c + (ky * 3 + kx) * c + ch] =
                                    ins[0][(sy as usize * w + sx as usize) * c + ch];
                            }
                        }
                    }
                }
            }
            o
        }
        OpKind::CrossEntropy { targets } => {
            let v = in_arrays[0].shape()[1];
            let mut total = 0.0f64;
            for (r, &t) in targets.iter().enumerate() {
                let row = &ins[0][r * v..(r + 1) * v];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            vec![total / targets.len() as f64]
        }
    }
}
