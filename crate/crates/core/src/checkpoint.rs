//! Single-file checkpoints with a JSON sidecar.
//!
//! Layout: the 7-byte magic `VICLF01`, a little-endian `u32` header length,
//! the JSON header, then every tensor listed in the header as little-endian
//! `f64` values in header order. The codebook is stored as the tensor
//! `codebook.entries`. Headers hold no timestamps so identical runs produce
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneWeights};
use crate::canvas::CanvasConfig;
use crate::error::{Error, Result};
use crate::fusion::{MultiSetup, MultiWeights};
use crate::nn::Params;
use crate::prompt_gen::{PgConfig, PgWeights};
use crate::tokenizer::Codebook;

pub const MAGIC: &[u8; 7] = b"VICLF01";
const CODEBOOK_TENSOR: &str = "codebook.entries";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Backbone,
    Pg,
    Multi,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Pg => "pg",
            Self::Multi => "multi",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Backbone, Self::Pg, Self::Multi]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Checkpoint(format!("unknown stage `{s}`")))
    }
}

/// What is needed to rebuild the module before its tensors are loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModuleSpec {
    Backbone { backbone: BackboneConfig, geometry: CanvasConfig },
    Pg { pg: PgConfig, geometry: CanvasConfig },
    Multi { backbone: BackboneConfig, geometry: CanvasConfig, setup: MultiSetup },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    /// Producer name and version.
    pub producer: String,
    pub module: ModuleSpec,
    pub codebook_vocab: usize,
    pub codebook_patch: usize,
    pub weights_hash: String,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint whose tensors still need to be placed in a module.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    tensors: BTreeMap<String, Vec<f64>>,
}

/// Sidecar path: the checkpoint path with `.json` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Per-save metadata shared by every stage.
#[derive(Debug, Clone)]
pub struct SaveMeta<'a> {
    pub config_hash: &'a str,
    pub seed: u64,
    pub codebook: &'a Codebook,
    pub loss_trace: &'a [f64],
}

fn encode(stage: Stage, module: ModuleSpec, params: &impl Params, meta: &SaveMeta) -> Result<(Vec<u8>, CheckpointHeader)> {
    let cb = meta.codebook.entries();
    let mut tensors: Vec<(String, &[f64])> = params.tensors();
    tensors.push((CODEBOOK_TENSOR.into(), cb.as_slice().expect("standard layout")));
    let header = CheckpointHeader {
        stage,
        config_hash: meta.config_hash.to_string(),
        seed: meta.seed,
        producer: format!("viclfuse {}", env!("CARGO_PKG_VERSION")),
        module,
        codebook_vocab: meta.codebook.vocab_size(),
        codebook_patch: meta.codebook.patch_size(),
        weights_hash: params.weights_hash(),
        loss_trace: meta.loss_trace.to_vec(),
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), len: t.len() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut out = Vec::with_capacity(11 + json.len() + 8 * tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok((out, header))
}

fn write(path: &Path, bytes: &[u8], header: &CheckpointHeader) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(header)? + "\n")?;
    Ok(())
}

pub fn save_backbone(path: &Path, w: &BackboneWeights, geometry: &CanvasConfig, meta: &SaveMeta) -> Result<CheckpointHeader> {
    let module = ModuleSpec::Backbone { backbone: w.config, geometry: *geometry };
    let (bytes, header) = encode(Stage::Backbone, module, w, meta)?;
    write(path, &bytes, &header)?;
    Ok(header)
}

pub fn save_pg(path: &Path, w: &PgWeights, geometry: &CanvasConfig, meta: &SaveMeta) -> Result<CheckpointHeader> {
    let module = ModuleSpec::Pg { pg: w.config, geometry: *geometry };
    let (bytes, header) = encode(Stage::Pg, module, w, meta)?;
    write(path, &bytes, &header)?;
    Ok(header)
}

pub fn save_multi(
    path: &Path,
    w: &MultiWeights,
    setup: &MultiSetup,
    geometry: &CanvasConfig,
    meta: &SaveMeta,
) -> Result<CheckpointHeader> {
    let module = ModuleSpec::Multi { backbone: w.main.config, geometry: *geometry, setup: *setup };
    let (bytes, header) = encode(Stage::Multi, module, w, meta)?;
    write(path, &bytes, &header)?;
    Ok(header)
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 11 || &bytes[..7] != MAGIC {
            return Err(bad("bad magic, not a VICLF01 checkpoint"));
        }
        let len = u32::from_le_bytes(bytes[7..11].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(11..11 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut pos = 11 + len;
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let end = pos + 8 * e.len;
            let raw = bytes.get(pos..end).ok_or_else(|| bad("truncated tensor payload"))?;
            let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if tensors.insert(e.name.clone(), vals).is_some() {
                return Err(bad(&format!("duplicate tensor `{}`", e.name)));
            }
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor payload"));
        }
        Ok(Self { header, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?)
    }

    /// Rejects a checkpoint of another stage or from another config.
    pub fn expect(&self, stage: Stage, config_hash: &str) -> Result<()> {
        if self.header.stage != stage {
            return Err(Error::Checkpoint(format!("expected a {stage} checkpoint, found {}", self.header.stage)));
        }
        if self.header.config_hash != config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs current {}",
                self.header.config_hash, config_hash
            )));
        }
        Ok(())
    }

    pub fn codebook(&self) -> Result<Codebook> {
        let v = self.header.codebook_vocab;
        let data = self.tensors.get(CODEBOOK_TENSOR).ok_or_else(|| Error::Checkpoint("missing codebook".into()))?;
        let dim = if v == 0 { 0 } else { data.len() / v };
        let entries = Array2::from_shape_vec((v, dim), data.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Codebook::new(entries, self.header.codebook_patch)
    }

    fn fill(&self, params: &mut impl Params) -> Result<()> {
        let mut expected = 0;
        for (name, t) in params.tensors_mut() {
            let src = self.tensors.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.len() != t.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has {} values, expected {}", src.len(), t.len())));
            }
            t.copy_from_slice(src);
            expected += 1;
        }
        if expected + 1 != self.tensors.len() {
            return Err(Error::Checkpoint("checkpoint holds tensors the module does not have".into()));
        }
        if params.weights_hash() != self.header.weights_hash {
            return Err(Error::Checkpoint("weights hash does not match the payload".into()));
        }
        Ok(())
    }

    pub fn backbone(&self) -> Result<BackboneWeights> {
        let ModuleSpec::Backbone { backbone, geometry } = &self.header.module else {
            return Err(Error::Checkpoint("not a backbone checkpoint".into()));
        };
        let mut w = BackboneWeights::init(backbone, geometry, 0)?;
        self.fill(&mut w)?;
        Ok(w)
    }

    pub fn pg(&self) -> Result<PgWeights> {
        let ModuleSpec::Pg { pg, geometry } = &self.header.module else {
            return Err(Error::Checkpoint("not a prompt generator checkpoint".into()));
        };
        let mut w = PgWeights::init(pg, geometry, 0)?;
        self.fill(&mut w)?;
        Ok(w)
    }

    pub fn multi(&self) -> Result<(MultiWeights, MultiSetup)> {
        let ModuleSpec::Multi { backbone, geometry, setup } = &self.header.module else {
            return Err(Error::Checkpoint("not a multi-branch checkpoint".into()));
        };
        let base = BackboneWeights::init(backbone, geometry, 0)?;
        let mut w = MultiWeights::init(&base, setup, 0)?;
        self.fill(&mut w)?;
        Ok((w, *setup))
    }
}
