//! Versioned binary checkpoints.
//!
//! Layout: magic "SPFZ", u32 format version, u32 header length, JSON header
//! (config snapshot, run state, tensor directory with name/shape/offset),
//! raw little-endian f32 tensor payloads, trailing CRC32 over everything
//! before it.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::{OptimizerState, ParamStore};

pub const MAGIC: &[u8; 4] = b"SPFZ";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload region.
    pub offset: u64,
}

/// Trainer position for exact resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub seed: u64,
    /// Global step counter (next step to execute).
    pub next_step: u64,
    /// 1 or 2.
    pub stage: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub run_state: RunState,
    pub opt_step: u64,
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub tensors: Vec<TensorEntry>,
}

fn crc32(bytes: &[u8]) -> u32 {
    // IEEE 802.3 polynomial, bitwise.
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Serialize parameters (sorted by name), optimizer moments (under `m:` and
/// `v:` prefixes), and the run state.
pub fn to_bytes(
    store: &ParamStore,
    opt: Option<&OptimizerState>,
    cfg: &ModelConfig,
    run_state: &RunState,
) -> Vec<u8> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for name in store.sorted_names() {
        let a = store.get(&name);
        tensors.push((name.clone(), a.shape().to_vec(), a.values()));
    }
    let (opt_step, lr, betas, eps) = match opt {
        Some(o) => {
            for name in o.moment_names() {
                let (m, v) = o.moments(&name).unwrap();
                let shape = vec![m.len()];
                tensors.push((format!("m:{name}"), shape.clone(), m.to_vec()));
                tensors.push((format!("v:{name}"), shape, v.to_vec()));
            }
            (o.step, o.lr, o.betas, o.eps)
        }
        None => (0, 0.0, (0.9, 0.999), 1e-8),
    };

    let mut directory = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        directory.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += 4 * data.len() as u64;
    }
    let header = Header {
        config: cfg.clone(),
        run_state: run_state.clone(),
        opt_step,
        lr,
        betas,
        eps,
        tensors: directory,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(16 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, _, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub struct Loaded {
    pub header: Header,
    pub tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

pub fn from_bytes(bytes: &[u8]) -> Result<Loaded> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::CorruptCheckpoint {
            reason: "truncated header".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            what: format!("format version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start + 4 {
        return Err(Error::CorruptCheckpoint {
            reason: "truncated payload".into(),
        });
    }
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(&bytes[..bytes.len() - 4]);
    if stored_crc != computed {
        return Err(Error::CorruptCheckpoint {
            reason: format!("crc {computed:08x} != stored {stored_crc:08x}"),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| {
        Error::CorruptCheckpoint {
            reason: format!("header parse: {e}"),
        }
    })?;
    let payload = &bytes[payload_start..bytes.len() - 4];
    let mut tensors = HashMap::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * numel;
        if end > payload.len() {
            return Err(Error::CorruptCheckpoint {
                reason: format!("tensor {} out of bounds", entry.name),
            });
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(entry.name.clone(), (entry.shape.clone(), data));
    }
    Ok(Loaded { header, tensors })
}

fn config_field_diff(a: &ModelConfig, b: &ModelConfig) -> Option<String> {
    macro_rules! diff {
        ($field:ident) => {
            if a.$field != b.$field {
                return Some(format!(
                    "config field {}: {:?} != {:?}",
                    stringify!($field),
                    a.$field,
                    b.$field
                ));
            }
        };
    }
    diff!(m_layers);
    diff!(l_layers);
    diff!(d_model);
    diff!(n_heads);
    diff!(vocab_size);
    diff!(n_geo_tokens);
    diff!(height);
    diff!(width);
    diff!(c_latent);
    diff!(t_steps);
    diff!(lambda);
    diff!(share_strategy);
    diff!(inject_mode);
    diff!(n_dit_blocks);
    diff!(max_seq_len);
    diff!(beta_start);
    diff!(beta_end);
    None
}

/// Strict restore: the stored config must match `expected` exactly, and
/// every parameter in `store` must be present at its exact shape. Optimizer
/// moments are restored into `opt` when present.
pub fn load_into(
    loaded: &Loaded,
    expected: &ModelConfig,
    store: &ParamStore,
    opt: Option<&mut OptimizerState>,
) -> Result<RunState> {
    if let Some(field) = config_field_diff(&loaded.header.config, expected) {
        return Err(Error::VersionMismatch { what: field });
    }
    for name in store.sorted_names() {
        let a = store.get(&name);
        let (shape, data) = loaded
            .tensors
            .get(&name)
            .ok_or_else(|| Error::CorruptCheckpoint {
                reason: format!("missing tensor {name}"),
            })?;
        if shape != a.shape() {
            return Err(Error::ShapeMismatchOnLoad {
                name: name.clone(),
                found: shape.clone(),
                expected: a.shape().to_vec(),
            });
        }
        a.set_data(data);
    }
    if let Some(opt) = opt {
        opt.step = loaded.header.opt_step;
        opt.lr = loaded.header.lr;
        opt.betas = loaded.header.betas;
        opt.eps = loaded.header.eps;
        for name in store.sorted_names() {
            if let (Some((_, m)), Some((_, v))) = (
                loaded.tensors.get(&format!("m:{name}")),
                loaded.tensors.get(&format!("v:{name}")),
            ) {
                opt.restore_moments(&name, m.clone(), v.clone());
            }
        }
    }
    Ok(loaded.header.run_state.clone())
}

/// Partial restore for warm starts: copies every stored tensor whose name
/// and shape match a parameter; ignores the rest. Optimizer state untouched.
pub fn warm_start(loaded: &Loaded, store: &ParamStore) -> Result<usize> {
    let mut copied = 0;
    for name in store.sorted_names() {
        if let Some((shape, data)) = loaded.tensors.get(&name) {
            let a = store.get(&name);
            if shape != a.shape() {
                return Err(Error::ShapeMismatchOnLoad {
                    name: name.clone(),
                    found: shape.clone(),
                    expected: a.shape().to_vec(),
                });
            }
            a.set_data(data);
            copied += 1;
        }
    }
    Ok(copied)
}

pub fn save(
    path: &Path,
    store: &ParamStore,
    opt: Option<&OptimizerState>,
    cfg: &ModelConfig,
    run_state: &RunState,
) -> Result<()> {
    std::fs::write(path, to_bytes(store, opt, cfg, run_state))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Loaded> {
    if !path.exists() {
        return Err(Error::UntrainedModel {
            path: path.display().to_string(),
        });
    }
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Array, ParamGroup, Rng};

    fn small_store(seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed).stream("ckpt-test");
        store.insert(
            "b.second",
            ParamGroup::Spatial,
            Array::randn(&[2, 3], &mut rng).requires_grad(true),
        );
        store.insert(
            "a.first",
            ParamGroup::Queries,
            Array::randn(&[4], &mut rng).requires_grad(true),
        );
        store
    }

    fn state() -> RunState {
        RunState {
            seed: 7,
            next_step: 42,
            stage: 2,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let cfg = ModelConfig::tiny();
        let store = small_store(1);
        let bytes1 = to_bytes(&store, None, &cfg, &state());
        let loaded = from_bytes(&bytes1).unwrap();
        let store2 = small_store(99);
        load_into(&loaded, &cfg, &store2, None).unwrap();
        let bytes2 = to_bytes(&store2, None, &cfg, &state());
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn magic_and_truncation_errors() {
        assert!(matches!(from_bytes(b"NOPE"), Err(Error::BadMagic)));
        assert!(matches!(from_bytes(b"SP"), Err(Error::BadMagic)));
        let cfg = ModelConfig::tiny();
        let bytes = to_bytes(&small_store(1), None, &cfg, &state());
        // Truncating anywhere must yield a clean error, never a panic.
        for cut in [4usize, 11, 20, bytes.len() - 5, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn corruption_is_detected_by_crc() {
        let cfg = ModelConfig::tiny();
        let mut bytes = to_bytes(&small_store(1), None, &cfg, &state());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::CorruptCheckpoint { .. }) | Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn config_mismatch_names_field() {
        let cfg = ModelConfig::tiny();
        let store = small_store(1);
        let bytes = to_bytes(&store, None, &cfg, &state());
        let loaded = from_bytes(&bytes).unwrap();
        let mut other = cfg.clone();
        other.d_model = 16;
        match load_into(&loaded, &other, &store, None) {
            Err(Error::VersionMismatch { what }) => {
                assert!(what.contains("d_model"), "message: {what}")
            }
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let cfg = ModelConfig::tiny();
        let bytes = to_bytes(&small_store(1), None, &cfg, &state());
        let loaded = from_bytes(&bytes).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        store.insert(
            "a.first",
            ParamGroup::Queries,
            Array::randn(&[5], &mut rng),
        );
        match load_into(&loaded, &cfg, &store, None) {
            Err(Error::ShapeMismatchOnLoad { name, .. }) => assert_eq!(name, "a.first"),
            other => panic!("expected ShapeMismatchOnLoad, got {other:?}"),
        }
    }

    #[test]
    fn optimizer_state_round_trips() {
        let cfg = ModelConfig::tiny();
        let store = small_store(1);
        let mut opt = OptimizerState::new(&store, 1e-3);
        store.get("a.first").accumulate_grad(&[0.1, -0.2, 0.3, 0.4]);
        store
            .get("b.second")
            .accumulate_grad(&[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        opt.adam_step(&store).unwrap();
        let bytes = to_bytes(&store, Some(&opt), &cfg, &state());
        let loaded = from_bytes(&bytes).unwrap();
        let store2 = small_store(50);
        let mut opt2 = OptimizerState::new(&store2, 9.0);
        let rs = load_into(&loaded, &cfg, &store2, Some(&mut opt2)).unwrap();
        assert_eq!(rs, state());
        assert_eq!(opt2.step, 1);
        assert_eq!(opt2.lr, 1e-3);
        let (m1, v1) = opt.moments("a.first").unwrap();
        let (m2, v2) = opt2.moments("a.first").unwrap();
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn save_load_save_is_idempotent() {
        let dir = std::env::temp_dir().join("spatialgen-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("one.spfz");
        let p2 = dir.join("two.spfz");
        let cfg = ModelConfig::tiny();
        let store = small_store(1);
        save(&p1, &store, None, &cfg, &state()).unwrap();
        let loaded = load(&p1).unwrap();
        let store2 = small_store(3);
        load_into(&loaded, &cfg, &store2, None).unwrap();
        save(&p2, &store2, None, &cfg, &state()).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn missing_file_is_untrained_model() {
        let p = std::env::temp_dir().join("spatialgen-ckpt-tests/definitely-absent.spfz");
        assert!(matches!(load(&p), Err(Error::UntrainedModel { .. })));
    }
}
