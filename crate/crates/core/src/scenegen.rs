//! Procedural geometric scenes with analytic metric depth.
//!
//! Scenes are billboards (circle / square / triangle) at metric depths in
//! [1, 9] m over a background plane at 10 m, rasterized orthographically so
//! the depth map is exact by construction. Prompts are token sequences over
//! a closed vocabulary that round-trip to a quantized canonical scene.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ValidMask};
use crate::numcore::{Array, Rng};

pub const BACKGROUND_Z: f32 = 10.0;
pub const BACKGROUND_ALBEDO: f32 = 0.95;
pub const Z_MIN: f32 = 1.0;
pub const Z_MAX: f32 = 9.0;
pub const MAX_PRIMITIVES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    T2i,
    EditAdd,
    EditRemove,
    EditReplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: Kind,
    /// Center in [0,1]^2 scene coordinates (x right, y down).
    pub center: (f32, f32),
    /// Half extent in scene units, in (0, 0.5].
    pub half_size: f32,
    /// Metric depth in meters, in [1, 9].
    pub z: f32,
    /// Gray level in [0, 1].
    pub albedo: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub background_z: f32,
    pub task_tag: TaskTag,
}

impl Primitive {
    /// Whether scene point (x, y) lies inside this billboard.
    pub fn covers(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = (self.center.0 as f64, self.center.1 as f64);
        let hs = self.half_size as f64;
        match self.kind {
            Kind::Circle => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= hs * hs
            }
            Kind::Square => (x - cx).abs() <= hs && (y - cy).abs() <= hs,
            Kind::Triangle => {
                // Apex at (cx, cy - hs), base from (cx - hs, cy + hs) to (cx + hs, cy + hs).
                let t = y - (cy - hs);
                t >= 0.0 && t <= 2.0 * hs && (x - cx).abs() <= t / 2.0
            }
        }
    }

    /// Analytic covered area in scene units squared.
    pub fn area(&self) -> f64 {
        let hs = self.half_size as f64;
        match self.kind {
            Kind::Circle => std::f64::consts::PI * hs * hs,
            Kind::Square => 4.0 * hs * hs,
            Kind::Triangle => 2.0 * hs * hs,
        }
    }

    /// Analytic perimeter in scene units.
    pub fn perimeter(&self) -> f64 {
        let hs = self.half_size as f64;
        match self.kind {
            Kind::Circle => 2.0 * std::f64::consts::PI * hs,
            Kind::Square => 8.0 * hs,
            Kind::Triangle => 2.0 * hs + 2.0 * (hs * hs + 4.0 * hs * hs).sqrt(),
        }
    }
}

impl SceneSpec {
    pub fn empty() -> Self {
        SceneSpec {
            primitives: Vec::new(),
            background_z: BACKGROUND_Z,
            task_tag: TaskTag::T2i,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.len() > MAX_PRIMITIVES {
            return Err(Error::Config(format!(
                "scene has {} primitives, max {MAX_PRIMITIVES}",
                self.primitives.len()
            )));
        }
        for p in &self.primitives {
            if !(Z_MIN..=Z_MAX).contains(&p.z) || self.background_z <= p.z {
                return Err(Error::Config(format!("primitive depth {} out of range", p.z)));
            }
            if !(0.0 < p.half_size && p.half_size <= 0.5) {
                return Err(Error::Config(format!("half_size {} out of range", p.half_size)));
            }
        }
        Ok(())
    }

    /// Primitives in canonical order (by depth, then x, then y).
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.primitives.len()).collect();
        idx.sort_by(|&a, &b| {
            let (pa, pb) = (&self.primitives[a], &self.primitives[b]);
            pa.z.partial_cmp(&pb.z)
                .unwrap()
                .then(pa.center.0.partial_cmp(&pb.center.0).unwrap())
                .then(pa.center.1.partial_cmp(&pb.center.1).unwrap())
        });
        idx
    }

    /// Snap every field to its prompt quantization bin, in canonical order.
    /// This is the fixed point of tokenize -> detokenize.
    pub fn quantized(&self) -> SceneSpec {
        let prims = self
            .canonical_order()
            .into_iter()
            .map(|i| {
                let p = &self.primitives[i];
                Primitive {
                    kind: p.kind,
                    center: (bin_center(p.center.0, 0.0, 1.0, POS_BINS), bin_center(p.center.1, 0.0, 1.0, POS_BINS)),
                    half_size: bin_center(p.half_size, 0.0, 0.5, SIZE_BINS),
                    z: bin_center(p.z, Z_MIN, Z_MAX, DEPTH_BINS),
                    albedo: bin_center(p.albedo, 0.0, 1.0, ALBEDO_BINS),
                }
            })
            .collect();
        SceneSpec {
            primitives: prims,
            background_z: self.background_z,
            task_tag: self.task_tag,
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering

fn shade(albedo: f32) -> [f32; 3] {
    [albedo, albedo, albedo]
}

/// Orthographic z-buffer raster at (h, w): each pixel takes the albedo and
/// depth of the nearest covering primitive, else the background.
pub fn render(spec: &SceneSpec, h: usize, w: usize) -> (Array, DepthMap, ValidMask) {
    let mut image = vec![0.0f32; h * w * 3];
    let mut depth = vec![spec.background_z; h * w];
    let bg = shade(BACKGROUND_ALBEDO);
    for px in 0..h * w {
        image[px * 3..px * 3 + 3].copy_from_slice(&bg);
    }
    for p in &spec.primitives {
        // Conservative pixel bounding box around the billboard.
        let hs = p.half_size as f64;
        let (cx, cy) = (p.center.0 as f64, p.center.1 as f64);
        let x0 = (((cx - hs) * w as f64).floor().max(0.0)) as usize;
        let x1 = (((cx + hs) * w as f64).ceil().min(w as f64)) as usize;
        let y0 = (((cy - hs) * h as f64).floor().max(0.0)) as usize;
        let y1 = (((cy + hs) * h as f64).ceil().min(h as f64)) as usize;
        let color = shade(p.albedo);
        for r in y0..y1 {
            let y = (r as f64 + 0.5) / h as f64;
            for c in x0..x1 {
                let x = (c as f64 + 0.5) / w as f64;
                if p.covers(x, y) && p.z < depth[r * w + c] {
                    depth[r * w + c] = p.z;
                    image[(r * w + c) * 3..(r * w + c) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    let image = Array::from_vec(image, &[h, w, 3]).unwrap();
    let depth = DepthMap::from_vec(depth, h, w);
    let mask = ValidMask::all_true(h, w);
    (image, depth, mask)
}

/// Per-primitive visibility (canonical order): true where that primitive is
/// the nearest cover of the pixel. Used for template checks on samples.
pub fn visible_masks(spec: &SceneSpec, h: usize, w: usize) -> Vec<Vec<bool>> {
    let order = spec.canonical_order();
    let mut masks = vec![vec![false; h * w]; order.len()];
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            let mut best: Option<(usize, f32)> = None;
            for (slot, &i) in order.iter().enumerate() {
                let p = &spec.primitives[i];
                if p.covers(x, y) && best.is_none_or(|(_, z)| p.z < z) {
                    best = Some((slot, p.z));
                }
            }
            if let Some((slot, _)) = best {
                masks[slot][r * w + c] = true;
            }
        }
    }
    masks
}

// ---------------------------------------------------------------------------
// Vocabulary

pub const POS_BINS: usize = 8;
pub const DEPTH_BINS: usize = 8;
pub const SIZE_BINS: usize = 4;
pub const ALBEDO_BINS: usize = 4;

pub const TOK_BOS: u32 = 0;
pub const TOK_EOS: u32 = 1;
pub const TOK_SEP: u32 = 2;
pub const TOK_REL: u32 = 3;
const TOK_TASK0: u32 = 4; // t2i, add, remove, replace
const TOK_KIND0: u32 = 8; // circle, square, triangle
const TOK_X0: u32 = 11;
const TOK_Y0: u32 = TOK_X0 + POS_BINS as u32; // 19
const TOK_Z0: u32 = TOK_Y0 + POS_BINS as u32; // 27
const TOK_SIZE0: u32 = TOK_Z0 + DEPTH_BINS as u32; // 35
const TOK_ALBEDO0: u32 = TOK_SIZE0 + SIZE_BINS as u32; // 39
const TOK_REL0: u32 = TOK_ALBEDO0 + ALBEDO_BINS as u32; // 43: in-front-of, behind, left-of, right-of, above, below
const TOK_REF0: u32 = TOK_REL0 + 6; // 49: p0..p4

pub const VOCAB_SIZE: usize = (TOK_REF0 as usize) + MAX_PRIMITIVES; // 54

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    InFrontOf,
    Behind,
    LeftOf,
    RightOf,
    Above,
    Below,
}

/// A relation clause `primitives[a] <relation> primitives[b]` (canonical order).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelClause {
    pub a: usize,
    pub rel: Relation,
    pub b: usize,
}

fn bin_of(v: f32, lo: f32, hi: f32, bins: usize) -> usize {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((t * bins as f32) as usize).min(bins - 1)
}

fn bin_center(v: f32, lo: f32, hi: f32, bins: usize) -> f32 {
    let b = bin_of(v, lo, hi, bins);
    lo + (hi - lo) * ((b as f32 + 0.5) / bins as f32)
}

/// True geometric relations re-derived from the spec, bounded so prompts
/// stay short: depth order for consecutive canonical pairs, plus one clear
/// lateral relation for the nearest pair.
pub fn derive_relations(spec: &SceneSpec) -> Vec<RelClause> {
    let order = spec.canonical_order();
    let prims: Vec<&Primitive> = order.iter().map(|&i| &spec.primitives[i]).collect();
    let mut out = Vec::new();
    let mut lateral_emitted = false;
    for a in 0..prims.len().saturating_sub(1) {
        let b = a + 1;
        let (pa, pb) = (prims[a], prims[b]);
        // Canonical order sorts by z, so pa.z <= pb.z; emit only strict.
        if pa.z < pb.z {
            out.push(RelClause { a, rel: Relation::InFrontOf, b });
        }
        if lateral_emitted {
            continue;
        }
        let dx = pa.center.0 - pb.center.0;
        let dy = pa.center.1 - pb.center.1;
        let margin = pa.half_size + pb.half_size;
        let lateral = if dx < -margin {
            Some(Relation::LeftOf)
        } else if dx > margin {
            Some(Relation::RightOf)
        } else if dy < -margin {
            Some(Relation::Above)
        } else if dy > margin {
            Some(Relation::Below)
        } else {
            None
        };
        if let Some(rel) = lateral {
            out.push(RelClause { a, rel, b });
            lateral_emitted = true;
        }
    }
    out
}

/// Check a relation claim against scene geometry.
pub fn relation_holds(spec: &SceneSpec, clause: &RelClause) -> bool {
    let order = spec.canonical_order();
    if clause.a >= order.len() || clause.b >= order.len() {
        return false;
    }
    let pa = &spec.primitives[order[clause.a]];
    let pb = &spec.primitives[order[clause.b]];
    let margin = pa.half_size + pb.half_size;
    match clause.rel {
        Relation::InFrontOf => pa.z < pb.z,
        Relation::Behind => pa.z > pb.z,
        Relation::LeftOf => pa.center.0 - pb.center.0 < -margin,
        Relation::RightOf => pa.center.0 - pb.center.0 > margin,
        Relation::Above => pa.center.1 - pb.center.1 < -margin,
        Relation::Below => pa.center.1 - pb.center.1 > margin,
    }
}

/// Deterministic token encoding: task tag, then primitives in canonical
/// order, then derived relation clauses.
pub fn tokenize(spec: &SceneSpec) -> Vec<u32> {
    let mut toks = vec![TOK_BOS, TOK_TASK0 + spec.task_tag as u32];
    for &i in &spec.canonical_order() {
        let p = &spec.primitives[i];
        toks.push(TOK_SEP);
        toks.push(TOK_KIND0 + p.kind as u32);
        toks.push(TOK_SIZE0 + bin_of(p.half_size, 0.0, 0.5, SIZE_BINS) as u32);
        toks.push(TOK_ALBEDO0 + bin_of(p.albedo, 0.0, 1.0, ALBEDO_BINS) as u32);
        toks.push(TOK_X0 + bin_of(p.center.0, 0.0, 1.0, POS_BINS) as u32);
        toks.push(TOK_Y0 + bin_of(p.center.1, 0.0, 1.0, POS_BINS) as u32);
        toks.push(TOK_Z0 + bin_of(p.z, Z_MIN, Z_MAX, DEPTH_BINS) as u32);
    }
    for clause in derive_relations(spec) {
        toks.push(TOK_REL);
        toks.push(TOK_REF0 + clause.a as u32);
        toks.push(TOK_REL0 + clause.rel as u32);
        toks.push(TOK_REF0 + clause.b as u32);
    }
    toks.push(TOK_EOS);
    toks
}

fn expect(tokens: &[u32], pos: usize, what: &str) -> Result<u32> {
    tokens.get(pos).copied().ok_or_else(|| Error::MalformedPrompt {
        reason: format!("truncated prompt, expected {what} at {pos}"),
    })
}

fn detok_field(tok: u32, base: u32, bins: usize, what: &str) -> Result<usize> {
    if tok < base || tok >= base + bins as u32 {
        return Err(Error::MalformedPrompt {
            reason: format!("token {tok} is not a valid {what}"),
        });
    }
    Ok((tok - base) as usize)
}

/// Parse tokens back into the canonical quantized scene. Relation clauses
/// are validated structurally but carry no additional geometry.
pub fn detokenize(tokens: &[u32]) -> Result<SceneSpec> {
    if tokens.iter().any(|&t| t >= VOCAB_SIZE as u32) {
        return Err(Error::MalformedPrompt {
            reason: "token outside vocabulary".into(),
        });
    }
    if expect(tokens, 0, "<bos>")? != TOK_BOS {
        return Err(Error::MalformedPrompt {
            reason: "prompt must start with <bos>".into(),
        });
    }
    let task = match expect(tokens, 1, "task")? {
        t if (TOK_TASK0..TOK_TASK0 + 4).contains(&t) => match t - TOK_TASK0 {
            0 => TaskTag::T2i,
            1 => TaskTag::EditAdd,
            2 => TaskTag::EditRemove,
            _ => TaskTag::EditReplace,
        },
        t => {
            return Err(Error::MalformedPrompt {
                reason: format!("token {t} is not a task tag"),
            })
        }
    };
    let mut prims = Vec::new();
    let mut pos = 2;
    while expect(tokens, pos, "<sep>/<rel>/<eos>")? == TOK_SEP {
        let kind = match detok_field(expect(tokens, pos + 1, "kind")?, TOK_KIND0, 3, "kind")? {
            0 => Kind::Circle,
            1 => Kind::Square,
            _ => Kind::Triangle,
        };
        let size = detok_field(expect(tokens, pos + 2, "size")?, TOK_SIZE0, SIZE_BINS, "size")?;
        let alb = detok_field(expect(tokens, pos + 3, "albedo")?, TOK_ALBEDO0, ALBEDO_BINS, "albedo")?;
        let x = detok_field(expect(tokens, pos + 4, "x")?, TOK_X0, POS_BINS, "x position")?;
        let y = detok_field(expect(tokens, pos + 5, "y")?, TOK_Y0, POS_BINS, "y position")?;
        let z = detok_field(expect(tokens, pos + 6, "z")?, TOK_Z0, DEPTH_BINS, "depth")?;
        let center_of = |b: usize, lo: f32, hi: f32, bins: usize| {
            lo + (hi - lo) * ((b as f32 + 0.5) / bins as f32)
        };
        prims.push(Primitive {
            kind,
            center: (
                center_of(x, 0.0, 1.0, POS_BINS),
                center_of(y, 0.0, 1.0, POS_BINS),
            ),
            half_size: center_of(size, 0.0, 0.5, SIZE_BINS),
            z: center_of(z, Z_MIN, Z_MAX, DEPTH_BINS),
            albedo: center_of(alb, 0.0, 1.0, ALBEDO_BINS),
        });
        pos += 7;
        if prims.len() > MAX_PRIMITIVES {
            return Err(Error::MalformedPrompt {
                reason: format!("more than {MAX_PRIMITIVES} primitives"),
            });
        }
    }
    while expect(tokens, pos, "<rel> or <eos>")? == TOK_REL {
        detok_field(expect(tokens, pos + 1, "ref")?, TOK_REF0, MAX_PRIMITIVES, "reference")?;
        detok_field(expect(tokens, pos + 2, "relation")?, TOK_REL0, 6, "relation")?;
        detok_field(expect(tokens, pos + 3, "ref")?, TOK_REF0, MAX_PRIMITIVES, "reference")?;
        pos += 4;
    }
    if expect(tokens, pos, "<eos>")? != TOK_EOS || pos + 1 != tokens.len() {
        return Err(Error::MalformedPrompt {
            reason: "expected <eos> terminator".into(),
        });
    }
    Ok(SceneSpec {
        primitives: prims,
        background_z: BACKGROUND_Z,
        task_tag: task,
    })
}

/// Emitted relation clauses of a prompt, for faithfulness checks.
pub fn prompt_relations(tokens: &[u32]) -> Vec<RelClause> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + 3 < tokens.len() {
        if tokens[i] == TOK_REL {
            let a = (tokens[i + 1] - TOK_REF0) as usize;
            let r = match tokens[i + 2] - TOK_REL0 {
                0 => Relation::InFrontOf,
                1 => Relation::Behind,
                2 => Relation::LeftOf,
                3 => Relation::RightOf,
                4 => Relation::Above,
                _ => Relation::Below,
            };
            let b = (tokens[i + 3] - TOK_REF0) as usize;
            out.push(RelClause { a, rel: r, b });
            i += 4;
        } else {
            i += 1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Coarse,
    Fine,
}

/// Scene complexity caps per curriculum phase.
#[derive(Debug, Clone, Copy)]
pub struct CurriculumPhase {
    pub phase: Phase,
    pub max_primitives: usize,
    pub min_depth_gap: f32,
    pub size_range: (f32, f32),
}

impl CurriculumPhase {
    pub fn coarse() -> Self {
        CurriculumPhase {
            phase: Phase::Coarse,
            max_primitives: 2,
            min_depth_gap: 2.0,
            size_range: (0.15, 0.3),
        }
    }

    pub fn fine() -> Self {
        CurriculumPhase {
            phase: Phase::Fine,
            max_primitives: MAX_PRIMITIVES,
            min_depth_gap: 0.5,
            size_range: (0.08, 0.3),
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Coarse => Self::coarse(),
            Phase::Fine => Self::fine(),
        }
    }
}

/// Task mixture weights; must sum to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaskMix {
    pub t2i: f32,
    pub edit_add: f32,
    pub edit_remove: f32,
    pub edit_replace: f32,
}

impl TaskMix {
    pub fn t2i_only() -> Self {
        TaskMix {
            t2i: 1.0,
            edit_add: 0.0,
            edit_remove: 0.0,
            edit_replace: 0.0,
        }
    }

    pub fn mixed() -> Self {
        TaskMix {
            t2i: 0.7,
            edit_add: 0.1,
            edit_remove: 0.1,
            edit_replace: 0.1,
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> TaskTag {
        let u = rng.uniform() as f32;
        if u < self.t2i {
            TaskTag::T2i
        } else if u < self.t2i + self.edit_add {
            TaskTag::EditAdd
        } else if u < self.t2i + self.edit_add + self.edit_remove {
            TaskTag::EditRemove
        } else {
            TaskTag::EditReplace
        }
    }
}

fn sample_depths(rng: &mut Rng, n: usize, min_gap: f32) -> Vec<f32> {
    // Sorted depths with guaranteed pairwise gaps: draw in the compressed
    // range then re-expand by i * gap.
    let span = Z_MAX - Z_MIN - (n as f32 - 1.0) * min_gap;
    let mut us: Vec<f32> = (0..n).map(|_| rng.uniform() as f32 * span).collect();
    us.sort_by(|a, b| a.partial_cmp(b).unwrap());
    us.iter()
        .enumerate()
        .map(|(i, u)| Z_MIN + u + i as f32 * min_gap)
        .collect()
}

fn sample_primitive(rng: &mut Rng, phase: &CurriculumPhase, z: f32) -> Primitive {
    let kind = match rng.below(3) {
        0 => Kind::Circle,
        1 => Kind::Square,
        _ => Kind::Triangle,
    };
    Primitive {
        kind,
        center: (rng.range_f32(0.2, 0.8), rng.range_f32(0.2, 0.8)),
        half_size: rng.range_f32(phase.size_range.0, phase.size_range.1),
        z,
        albedo: rng.range_f32(0.05, 0.75),
    }
}

fn base_scene(rng: &mut Rng, phase: &CurriculumPhase, n: usize, task: TaskTag) -> SceneSpec {
    let depths = sample_depths(rng, n, phase.min_depth_gap);
    SceneSpec {
        primitives: depths
            .into_iter()
            .map(|z| sample_primitive(rng, phase, z))
            .collect(),
        background_z: BACKGROUND_Z,
        task_tag: task,
    }
}

/// A generated sample: the target scene, plus the pre-edit source scene for
/// editing tasks.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub target: SceneSpec,
    pub source: Option<SceneSpec>,
}

/// Deterministic per-index generation: the caller keys `rng` by sample index
/// (`rng.fork(index)`), so regenerating any index yields an identical scene
/// regardless of generation order or worker count.
pub fn gen_scene(rng: &mut Rng, phase: &CurriculumPhase, task: TaskTag) -> ScenePair {
    match task {
        TaskTag::T2i => {
            let n = rng.int_in(1, phase.max_primitives);
            ScenePair {
                target: base_scene(rng, phase, n, task),
                source: None,
            }
        }
        TaskTag::EditAdd => {
            // Target has one more primitive than the source; all shared
            // primitives are bit-identical.
            let n = rng.int_in(1, phase.max_primitives);
            let target = base_scene(rng, phase, n, task);
            let removed = rng.below(n);
            let mut source = target.clone();
            source.primitives.remove(removed);
            let source = (!source.primitives.is_empty()).then_some(source);
            ScenePair { target, source }
        }
        TaskTag::EditRemove => {
            let n = rng.int_in(2, phase.max_primitives.max(2));
            let source = base_scene(rng, phase, n, task);
            let removed = rng.below(n);
            let mut target = source.clone();
            target.primitives.remove(removed);
            ScenePair {
                target,
                source: Some(source),
            }
        }
        TaskTag::EditReplace => {
            // Same footprint and depth, different kind and albedo.
            let n = rng.int_in(1, phase.max_primitives);
            let source = base_scene(rng, phase, n, task);
            let which = rng.below(n);
            let mut target = source.clone();
            let p = &mut target.primitives[which];
            p.kind = match (p.kind as usize + 1 + rng.below(2)) % 3 {
                0 => Kind::Circle,
                1 => Kind::Square,
                _ => Kind::Triangle,
            };
            p.albedo = rng.range_f32(0.05, 0.75);
            ScenePair {
                target,
                source: Some(source),
            }
        }
    }
}

/// One training sample with rendered tensors.
#[derive(Clone)]
pub struct Sample {
    pub prompt: Vec<u32>,
    pub image: Array,
    pub depth: DepthMap,
    pub mask: ValidMask,
    pub source_image: Option<Array>,
    pub spec: SceneSpec,
}

pub struct Batch {
    pub samples: Vec<Sample>,
}

pub fn make_sample(base_rng: &Rng, index: u64, phase: &CurriculumPhase, mix: &TaskMix, h: usize, w: usize) -> Sample {
    let mut rng = base_rng.fork(index);
    let task = mix.sample(&mut rng);
    let pair = gen_scene(&mut rng, phase, task);
    let (image, depth, mask) = render(&pair.target, h, w);
    let source_image = pair.source.as_ref().map(|s| render(s, h, w).0);
    Sample {
        prompt: tokenize(&pair.target),
        image,
        depth,
        mask,
        source_image,
        spec: pair.target,
    }
}

/// Samples for indices [offset, offset + size); deterministic in
/// (rng seed/stream, phase, indices) alone.
pub fn make_batch(
    base_rng: &Rng,
    offset: u64,
    size: usize,
    phase: &CurriculumPhase,
    mix: &TaskMix,
    h: usize,
    w: usize,
) -> Batch {
    Batch {
        samples: (0..size as u64)
            .map(|i| make_sample(base_rng, offset + i, phase, mix, h, w))
            .collect(),
    }
}

/// FNV-1a hash of the prompt stream of a batch range; ablation variants
/// assert this to prove they consumed identical data.
pub fn batch_stream_hash(base_rng: &Rng, offset: u64, count: usize, phase: &CurriculumPhase, mix: &TaskMix) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for i in 0..count as u64 {
        let mut rng = base_rng.fork(offset + i);
        let task = mix.sample(&mut rng);
        let pair = gen_scene(&mut rng, phase, task);
        for t in tokenize(&pair.target) {
            for b in t.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        for p in &pair.target.primitives {
            for v in [p.center.0, p.center.1, p.half_size, p.z, p.albedo] {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
    }
    h
}
