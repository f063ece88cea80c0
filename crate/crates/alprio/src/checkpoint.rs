//! Checkpoint container: a flat sequence of named tensors in the same binary
//! layout as standalone tensor files, prefixed per entry with a length-coded
//! UTF-8 name, plus a JSON sidecar (`<path>.json`) carrying the metadata
//! needed to reconstruct the owning model.
//!
//! Optimiser moments are deliberately not persisted; loading a checkpoint
//! yields fresh Adam state. Payloads are stored in 32-bit floats, so save and
//! load round-trips are bit-exact at the file level: saving a freshly loaded
//! checkpoint reproduces the original bytes.

use crate::controller::{ControllerArch, ControllerWeights};
use crate::error::{Error, Result};
use crate::ppo::PPOConfig;
use crate::predictor::{PredictorConfig, PredictorWeights};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Write the tensors in iteration order.
pub fn write_tensors(w: &mut impl Write, tensors: &IndexMap<String, Tensor>) -> std::io::Result<()> {
    for (name, tensor) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        tensor.write_to(w)?;
    }
    Ok(())
}

pub fn read_tensors(r: &mut impl Read) -> Result<IndexMap<String, Tensor>> {
    let mut out = IndexMap::new();
    loop {
        let mut len_buf = [0u8; 2];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::Format(format!("checkpoint read: {e}"))),
        }
        let name_len = usize::from(u16::from_le_bytes(len_buf));
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|e| Error::Format(format!("checkpoint name: {e}")))?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Format(format!("checkpoint name not UTF-8: {e}")))?;
        let tensor = Tensor::read_from(r)?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate tensor name '{name}'")));
        }
    }
    Ok(out)
}

fn save_with_sidecar<M: Serialize>(
    path: &Path,
    tensors: &IndexMap<String, Tensor>,
    meta: &M,
) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensors(&mut f, tensors).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Format(format!("sidecar encode: {e}")))?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

fn load_with_sidecar<M: DeserializeOwned>(path: &Path) -> Result<(IndexMap<String, Tensor>, M)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let tensors = read_tensors(&mut f)?;
    let side = sidecar_path(path);
    let json = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: M =
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("sidecar decode: {e}")))?;
    Ok((tensors, meta))
}

fn fresh_moments(tensors: &IndexMap<String, Tensor>) -> IndexMap<String, Tensor> {
    tensors
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControllerMeta {
    kind: String,
    arch: ControllerArch,
    step_counter: u64,
    /// PPO settings the controller was trained with, kept for the record.
    ppo: PPOConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictorMeta {
    kind: String,
    config: PredictorConfig,
    step_counter: u64,
}

pub fn save_controller(path: &Path, w: &ControllerWeights, ppo: &PPOConfig) -> Result<()> {
    save_with_sidecar(
        path,
        &w.named_tensors,
        &ControllerMeta {
            kind: "controller".into(),
            arch: w.arch.clone(),
            step_counter: w.step_counter,
            ppo: ppo.clone(),
        },
    )
}

pub fn load_controller(path: &Path) -> Result<(ControllerWeights, PPOConfig)> {
    let (tensors, meta): (_, ControllerMeta) = load_with_sidecar(path)?;
    if meta.kind != "controller" {
        return Err(Error::Format(format!(
            "expected controller checkpoint, found '{}'",
            meta.kind
        )));
    }
    meta.arch.validate()?;
    let reference = ControllerWeights::init(&meta.arch, 0)?;
    check_layout(&tensors, &reference.named_tensors)?;
    let moments = fresh_moments(&tensors);
    Ok((
        ControllerWeights {
            arch: meta.arch,
            named_tensors: tensors,
            step_counter: meta.step_counter,
            moment1: moments.clone(),
            moment2: moments,
        },
        meta.ppo,
    ))
}

pub fn save_predictor(path: &Path, w: &PredictorWeights, cfg: &PredictorConfig) -> Result<()> {
    save_with_sidecar(
        path,
        &w.named_tensors,
        &PredictorMeta {
            kind: "predictor".into(),
            config: cfg.clone(),
            step_counter: w.step_counter,
        },
    )
}

pub fn load_predictor(path: &Path) -> Result<(PredictorWeights, PredictorConfig)> {
    let (tensors, meta): (_, PredictorMeta) = load_with_sidecar(path)?;
    if meta.kind != "predictor" {
        return Err(Error::Format(format!(
            "expected predictor checkpoint, found '{}'",
            meta.kind
        )));
    }
    meta.config.validate()?;
    let reference = PredictorWeights::init(&meta.config, 0);
    check_layout(&tensors, &reference.named_tensors)?;
    let moments = fresh_moments(&tensors);
    Ok((
        PredictorWeights {
            named_tensors: tensors,
            step_counter: meta.step_counter,
            moment1: moments.clone(),
            moment2: moments,
        },
        meta.config,
    ))
}

/// Reject checkpoints whose tensor names or shapes disagree with what the
/// sidecar metadata implies.
fn check_layout(
    found: &IndexMap<String, Tensor>,
    expected: &IndexMap<String, Tensor>,
) -> Result<()> {
    for (name, t) in expected {
        match found.get(name) {
            None => return Err(Error::Format(format!("checkpoint missing tensor '{name}'"))),
            Some(f) if f.shape != t.shape => {
                return Err(Error::Format(format!(
                    "tensor '{name}' shape {:?}, expected {:?}",
                    f.shape, t.shape
                )));
            }
            Some(_) => {}
        }
    }
    if let Some((name, _)) = found.iter().find(|(n, _)| !expected.contains_key(*n)) {
        return Err(Error::Format(format!("unexpected tensor '{name}'")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ControllerArch;
    use tempfile::tempdir;

    fn arch() -> ControllerArch {
        ControllerArch {
            image_h: 16,
            image_w: 16,
            conv_channels: [2, 3, 3],
            fc_size: 8,
            hidden_size: 6,
        }
    }

    #[test]
    fn container_round_trip_preserves_order_and_bytes() {
        let mut tensors = IndexMap::new();
        tensors.insert("b".to_string(), Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        tensors.insert(
            "a".to_string(),
            Tensor::from_vec(&[2, 2], vec![0.5, -0.5, 0.25, 8.0]).unwrap(),
        );
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).unwrap();
        let back = read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(back, tensors);
        assert_eq!(
            back.keys().collect::<Vec<_>>(),
            vec!["b", "a"],
            "insertion order must survive"
        );
        let mut again = Vec::new();
        write_tensors(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn truncated_container_is_rejected() {
        let mut tensors = IndexMap::new();
        tensors.insert("w".to_string(), Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_tensors(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn controller_checkpoint_file_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("controller.ckpt");
        let w = ControllerWeights::init(&arch(), 3).unwrap();
        let ppo = PPOConfig::default();
        save_controller(&path, &w, &ppo).unwrap();
        let first = std::fs::read(&path).unwrap();

        let (loaded, loaded_ppo) = load_controller(&path).unwrap();
        assert_eq!(loaded.arch, w.arch);
        assert_eq!(loaded.step_counter, w.step_counter);
        assert_eq!(loaded_ppo, ppo);
        let path2 = dir.path().join("controller2.ckpt");
        save_controller(&path2, &loaded, &loaded_ppo).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn predictor_checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("predictor.ckpt");
        let cfg = PredictorConfig {
            channel_widths: [2, 3, 4],
            ..PredictorConfig::default()
        };
        let mut w = PredictorWeights::init(&cfg, 7);
        w.step_counter = 42;
        save_predictor(&path, &w, &cfg).unwrap();
        let (loaded, loaded_cfg) = load_predictor(&path).unwrap();
        assert_eq!(loaded.step_counter, 42);
        assert_eq!(loaded_cfg.channel_widths, cfg.channel_widths);
        assert_eq!(
            loaded.named_tensors.keys().collect::<Vec<_>>(),
            w.named_tensors.keys().collect::<Vec<_>>()
        );
        // payload survives up to f32 storage precision
        for (name, t) in &w.named_tensors {
            for (a, b) in t.data.iter().zip(&loaded.named_tensors[name].data) {
                assert_eq!(*a as f32, *b as f32, "{name}");
            }
        }
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let w = ControllerWeights::init(&arch(), 1).unwrap();
        save_controller(&path, &w, &PPOConfig::default()).unwrap();
        assert!(load_predictor(&path).is_err());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let w = ControllerWeights::init(&arch(), 1).unwrap();
        save_controller(&path, &w, &PPOConfig::default()).unwrap();
        // rewrite the container missing one tensor but keep the sidecar
        let mut tensors = w.named_tensors.clone();
        tensors.shift_remove("pol.w");
        let mut f = std::fs::File::create(&path).unwrap();
        write_tensors(&mut f, &tensors).unwrap();
        drop(f);
        assert!(load_controller(&path).is_err());
    }
}
