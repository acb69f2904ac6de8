//! Named parameter store with freeze groups.

use super::array::Array;
use crate::error::Result;
use std::collections::HashMap;

/// Parameter groups the trainer freezes or trains as units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Semantic,
    Spatial,
    Queries,
    DepthHead,
    Adapter,
    Dit,
    Codec,
    /// Patch encoder for edit-mode image augmentation; never trained.
    PatchEncoder,
    /// Depth head of the probing baseline.
    Probe,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Semantic => "semantic",
            ParamGroup::Spatial => "spatial",
            ParamGroup::Queries => "queries",
            ParamGroup::DepthHead => "depth_head",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Dit => "dit",
            ParamGroup::Codec => "codec",
            ParamGroup::PatchEncoder => "patch_encoder",
            ParamGroup::Probe => "probe",
        }
    }

    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Semantic,
        ParamGroup::Spatial,
        ParamGroup::Queries,
        ParamGroup::DepthHead,
        ParamGroup::Adapter,
        ParamGroup::Dit,
        ParamGroup::Codec,
        ParamGroup::PatchEncoder,
        ParamGroup::Probe,
    ];
}

struct Entry {
    name: String,
    group: ParamGroup,
    array: Array,
}

/// Insertion-ordered map of named parameters.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, array: Array) -> Array {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            group,
            array: array.clone(),
        });
        array
    }

    pub fn get(&self, name: &str) -> &Array {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].array
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamGroup, &Array)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.group, &e.array))
    }

    /// Names sorted lexicographically; the stable order used for
    /// checkpoints and hashing.
    pub fn sorted_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.entries.iter().map(|e| e.name.clone()).collect();
        names.sort();
        names
    }

    pub fn group_of(&self, name: &str) -> ParamGroup {
        let i = self.index[name];
        self.entries[i].group
    }

    /// Set trainability per group; groups not listed become frozen.
    pub fn set_trainable_groups(&self, trainable: &[ParamGroup]) {
        for e in &self.entries {
            e.array.set_requires_grad(trainable.contains(&e.group));
        }
    }

    pub fn zero_grads(&self) {
        for e in &self.entries {
            e.array.zero_grad();
        }
    }

    /// Order-sensitive hash of the raw f32 bits of every parameter in a
    /// group, visited in sorted-name order. Only used for equality checks.
    pub fn group_hash(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for name in self.sorted_names() {
            let e = &self.entries[self.index[&name]];
            if e.group != group {
                continue;
            }
            for v in e.array.data().iter() {
                h = (h ^ v.to_bits() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                h ^= h >> 29;
            }
        }
        h
    }

    /// Global L2 norm of all present gradients.
    pub fn grad_norm(&self) -> f32 {
        let mut acc = 0.0f64;
        for e in &self.entries {
            if let Some(g) = e.array.grad() {
                for v in g {
                    acc += v as f64 * v as f64;
                }
            }
        }
        acc.sqrt() as f32
    }

    /// Scale all gradients so the global norm is at most `max_norm`;
    /// returns the pre-clip norm.
    pub fn clip_grad_norm(&self, max_norm: f32) -> f32 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for e in &self.entries {
                let mut g = e.array.0.grad.borrow_mut();
                if let Some(buf) = g.as_mut() {
                    for v in buf.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        norm
    }
}

/// Bias-corrected adaptive-moment optimizer. Moment buffers exist only for
/// parameters that were trainable when the state was created.
pub struct OptimizerState {
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
    pub step: u64,
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, lr: f32) -> Self {
        let mut m = HashMap::new();
        let mut v = HashMap::new();
        for (name, _, a) in params.iter() {
            if a.requires_grad_flag() {
                m.insert(name.to_string(), vec![0.0; a.numel()]);
                v.insert(name.to_string(), vec![0.0; a.numel()]);
            }
        }
        OptimizerState {
            m,
            v,
            step: 0,
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    /// One update over all trainable parameters; grads are zeroed afterward.
    /// Frozen parameters are untouched.
    pub fn adam_step(&mut self, params: &ParamStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for name in params.sorted_names() {
            let a = params.get(&name);
            if !a.requires_grad_flag() {
                continue;
            }
            let g = a
                .grad()
                .ok_or_else(|| crate::error::Error::MissingGrad { name: name.clone() })?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let mut w = a.values();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            a.set_data(&w);
            a.zero_grad();
        }
        Ok(())
    }

    pub fn moment_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.m.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        match (self.m.get(name), self.v.get(name)) {
            (Some(m), Some(v)) => Some((m.as_slice(), v.as_slice())),
            _ => None,
        }
    }

    pub fn restore_moments(&mut self, name: &str, m: Vec<f32>, v: Vec<f32>) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }
}
