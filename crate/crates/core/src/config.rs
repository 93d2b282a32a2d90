//! Run configuration: every knob of every stage in one strict JSON document.
//!
//! A config file is deep-merged over [`RunConfig::default`] and then decoded
//! with unknown keys rejected, so `{}` yields the defaults and a partial
//! section only overrides the fields it names.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::canvas::CanvasConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionRange, MultiSetup};
use crate::prompt_gen::{PgConfig, PgTrainConfig};
use crate::taskgen::TaskSpec;
use crate::train::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub k_g1: usize,
    pub k_g2: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self::for_k(16)
    }
}

impl RetrievalConfig {
    /// Default grouping for top-`k` retrieval: half high-similarity, half
    /// low-similarity, so {4, 4} at K=8 and {8, 8} at K=16.
    pub fn for_k(k: usize) -> Self {
        Self { k, k_g1: k / 2, k_g2: k / 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub n_down: usize,
    pub n_up: usize,
    pub heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { n_down: 8, n_up: 14, heads: 4 }
    }
}

/// Step size and schedule of one training stage; its seed is derived from the
/// run seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTrain {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgStageTrain {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: StageTrain,
    pub prompt_generator: PgStageTrain,
    pub multi: StageTrain,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: StageTrain { lr: 0.05, epochs: 30, batch: 1 },
            prompt_generator: PgStageTrain { lambda: 0.9, lr: 0.1, epochs: 8, batch: 4 },
            multi: StageTrain { lr: 0.05, epochs: 10, batch: 16 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], threshold: crate::eval::DEFAULT_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Root holding `data/<task>/...`; falls back to `VICLFUSE_DATA_DIR`, then
    /// to `out_dir`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_dir: None, out_dir: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub geometry: CanvasConfig,
    pub backbone: BackboneConfig,
    pub retrieval: RetrievalConfig,
    pub prompt_generator: PgConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskSpec::default(),
            geometry: CanvasConfig::default(),
            backbone: BackboneConfig::default(),
            retrieval: RetrievalConfig::default(),
            prompt_generator: PgConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Deterministic 64-bit seed for a named stage of run `seed`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl RunConfig {
    /// Parses a JSON object merged over the defaults, then validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(text)?;
        if !over.is_object() {
            return Err(Error::Config(vec!["config: top level must be a JSON object".into()]));
        }
        let mut base = serde_json::to_value(Self::default())?;
        merge(&mut base, over);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(vec![format!("config: {e}")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Same config with the run seed and the data seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.task.seed = seed;
        c
    }

    /// Checks every constraint and reports all violations with field paths.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.geometry.collect_errors("geometry", &mut errs);
        self.backbone.collect_errors("backbone", &mut errs);
        if self.backbone.patch_size != self.geometry.patch_size {
            errs.push("backbone.patch_size: must equal geometry.patch_size".into());
        }
        let r = &self.retrieval;
        if r.k == 0 {
            errs.push("retrieval.k: must be positive".into());
        }
        if r.k_g1 == 0 || r.k_g2 == 0 {
            errs.push("retrieval.k_g1, retrieval.k_g2: must be positive".into());
        }
        if r.k_g1 + r.k_g2 > r.k {
            errs.push(format!("retrieval: K_g1+K_g2 <= K violated ({} + {} > {})", r.k_g1, r.k_g2, r.k));
        }
        // support pairs double as training queries, ranked without themselves
        self.task.collect_errors("task", r.k + 1, &mut errs);
        if self.task.size != self.geometry.quadrant_h || self.task.size != self.geometry.quadrant_w {
            errs.push("task.size: must equal geometry.quadrant_h and geometry.quadrant_w".into());
        }
        if self.prompt_generator.token_dim == 0 {
            errs.push("prompt_generator.token_dim: must be positive".into());
        }
        let f = &self.fusion;
        if f.n_down == 0 || f.n_down > f.n_up {
            errs.push("fusion: need 1 <= n_down <= n_up".into());
        }
        if f.n_up > self.backbone.depth {
            errs.push(format!("fusion.n_up: exceeds backbone.depth {}", self.backbone.depth));
        }
        if f.heads == 0 || self.backbone.embed_dim % f.heads != 0 {
            errs.push("fusion.heads: must divide backbone.embed_dim".into());
        }
        for (name, s) in [("train.backbone", self.train.backbone), ("train.multi", self.train.multi)] {
            s.sgd(0).collect_errors(name, &mut errs);
            if s.epochs == 0 {
                errs.push(format!("{name}.epochs: must be positive"));
            }
        }
        let pg = &self.train.prompt_generator;
        self.pg_train(0).collect_errors("train.prompt_generator", &mut errs);
        if pg.epochs == 0 {
            errs.push("train.prompt_generator.epochs: must be positive".into());
        }
        if self.eval.seeds.is_empty() {
            errs.push("eval.seeds: must be nonempty".into());
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            errs.push("eval.threshold: must lie in (0, 1)".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// SHA-256 of the canonical JSON with paths removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        hex::encode(Sha256::digest(serde_json::to_string(&c).expect("config serializes")))
    }

    pub fn stage_seed(&self, tag: &str) -> u64 {
        derive_seed(self.seed, tag)
    }

    pub fn backbone_sgd(&self) -> SgdConfig {
        self.train.backbone.sgd(self.stage_seed("backbone"))
    }

    pub fn multi_sgd(&self) -> SgdConfig {
        self.train.multi.sgd(self.stage_seed("multi"))
    }

    pub fn pg_train(&self, seed: u64) -> PgTrainConfig {
        let p = &self.train.prompt_generator;
        PgTrainConfig { lambda: p.lambda, sgd: SgdConfig { lr: p.lr, epochs: p.epochs, batch: p.batch, seed } }
    }

    pub fn pg_sgd(&self) -> PgTrainConfig {
        self.pg_train(self.stage_seed("prompt_generator"))
    }

    pub fn fusion_range(&self) -> FusionRange {
        FusionRange::new(self.fusion.n_down, self.fusion.n_up).expect("validated")
    }

    pub fn multi_setup(&self) -> MultiSetup {
        MultiSetup::full(self.fusion_range(), self.fusion.heads)
    }

    /// Data root: explicit path, then `VICLFUSE_DATA_DIR`, then the output dir.
    pub fn data_root(&self) -> PathBuf {
        self.paths
            .data_dir
            .clone()
            .or_else(|| std::env::var_os("VICLFUSE_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| self.paths.out_dir.clone())
    }
}

impl StageTrain {
    pub fn sgd(&self, seed: u64) -> SgdConfig {
        SgdConfig { lr: self.lr, epochs: self.epochs, batch: self.batch, seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.retrieval.k, c.retrieval.k_g1, c.retrieval.k_g2), (16, 8, 8));
        assert_eq!((c.fusion.n_down, c.fusion.n_up), (8, 14));
        assert_eq!(c.train.multi, StageTrain { lr: 0.05, epochs: 10, batch: 16 });
        assert_eq!(c.train.prompt_generator.lambda, 0.9);
    }

    #[test]
    fn oversized_groups_rejected_with_path() {
        let err = RunConfig::from_json(r#"{"retrieval": {"k_g1": 10, "k_g2": 10}}"#).unwrap_err();
        match err {
            Error::Config(errs) => assert!(errs.iter().any(|e| e.contains("K_g1+K_g2 <= K")), "{errs:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_violations_reported() {
        let err = RunConfig::from_json(r#"{"retrieval": {"k": 0}, "fusion": {"n_up": 20}, "eval": {"seeds": []}}"#)
            .unwrap_err();
        match err {
            Error::Config(errs) => {
                assert!(errs.iter().any(|e| e.starts_with("retrieval.k")));
                assert!(errs.iter().any(|e| e.starts_with("fusion.n_up")));
                assert!(errs.iter().any(|e| e.starts_with("eval.seeds")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"fusion": {"n_dwn": 3}}"#).is_err());
        assert!(RunConfig::from_json("[]").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"multi": {"epochs": 3}}}"#).unwrap();
        assert_eq!(c.train.multi, StageTrain { lr: 0.05, epochs: 3, batch: 16 });
        assert_eq!(c.train.backbone, TrainConfig::default().backbone);
    }

    #[test]
    fn emit_then_parse_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 7;
        c.fusion.n_down = 9;
        c.paths.data_dir = Some("somewhere".into());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.with_seed(1).hash());
    }

    #[test]
    fn stage_seeds_differ() {
        let c = RunConfig::default();
        assert_ne!(c.stage_seed("backbone"), c.stage_seed("multi"));
        assert_eq!(c.stage_seed("backbone"), derive_seed(0, "backbone"));
    }
}
