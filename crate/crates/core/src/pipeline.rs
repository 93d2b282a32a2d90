//! End-to-end orchestration for one seed: data, tokenizer, backbone,
//! retrieval, prompt generator, multi-branch training and evaluation.
//!
//! Support pairs double as training queries for every stage; each is ranked
//! against the rest of the support set with itself excluded. Held-out queries
//! are only used for evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{finetune_backbone, infer_inpaint, train_backbone, BackboneWeights};
use crate::canvas::{compose_canvas, Canvas, Image, Label, SupportPair};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{binarize, miou, mse};
use crate::fusion::{
    build_canvases_from_groups, make_variant, predict_label, train_multi, AblationVariant, GroupCanvases,
    MultiSample, MultiSetup, MultiWeights,
};
use crate::prompt_gen::{build_fused_canvas, condense, target_tokens, train_prompt_generator, PgSample, PgWeights};
use crate::retrieval::{embed_image, mpgs_partition, split_even, RankedSupport, SupportIndex};
use crate::taskgen::{generate, Dataset, TaskKind};
use crate::tokenizer::{fit_codebook, Codebook};

/// How the ranked support list becomes guidance groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// High-similarity prefix and low-similarity suffix.
    Mpgs { k_g1: usize, k_g2: usize },
    /// `n` contiguous near-equal groups.
    Even { n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Top1,
    CondenserSingle,
    /// Mainstream finetuned on the holistic canvas with no guidance.
    NoFusion,
    Multi(AblationVariant),
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Self::Top1 => "top1".into(),
            Self::CondenserSingle => "condenser_single".into(),
            Self::NoFusion => "no_fusion".into(),
            Self::Multi(v) => format!("multi_{v}"),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(Self::Top1),
            "condenser_single" => Ok(Self::CondenserSingle),
            "no_fusion" => Ok(Self::NoFusion),
            _ => match s.strip_prefix("multi_") {
                Some(v) => Ok(Self::Multi(v.parse()?)),
                None => Err(Error::UnknownVariant(s.to_string())),
            },
        }
    }
}

/// One evaluated query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query_id: u64,
    pub score: f64,
}

/// Score of a prediction: mIoU after binarization for mask tasks, MSE for
/// colorization.
pub fn score_prediction(task: TaskKind, pred: &Image, gt: &Label, threshold: f64) -> Result<f64> {
    match task {
        TaskKind::Seg | TaskKind::Det => miou(&binarize(pred, threshold), gt),
        TaskKind::Color => mse(pred, gt.image()),
    }
}

pub fn fit_tokenizer(cfg: &RunConfig, ds: &Dataset) -> Result<Codebook> {
    let images: Vec<Image> =
        ds.support.iter().flat_map(|p| [p.image.clone(), p.label.image().clone()]).collect();
    fit_codebook(&images, cfg.backbone.vocab, cfg.geometry.patch_size, cfg.stage_seed("tokenizer"))
}

fn pixel_cosine(a: &Image, b: &Image) -> f64 {
    let (x, y) = (a.pixels(), b.pixels());
    let dot: f64 = x.iter().zip(y.iter()).map(|(p, q)| p * q).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        dot / (nx * ny)
    }
}

/// Ground-truth canvases for backbone training. No backbone exists yet to
/// embed images, so each support pair is prompted with its nearest other
/// support pair by raw-pixel cosine similarity.
pub fn backbone_canvases(cfg: &RunConfig, support: &[SupportPair]) -> Result<Vec<Canvas>> {
    if support.len() < 2 {
        return Err(Error::Empty("support set with at least two pairs"));
    }
    let mut out = Vec::with_capacity(support.len());
    for (i, q) in support.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, p) in support.iter().enumerate() {
            if j == i {
                continue;
            }
            let s = pixel_cosine(&q.image, &p.image);
            if s > best.0 {
                best = (s, j);
            }
        }
        let canvas = compose_canvas(&support[best.1], &q.image, &cfg.geometry)?;
        out.push(canvas.with_quadrant(crate::canvas::Quadrant::BR, q.label.image())?);
    }
    Ok(out)
}

/// Guidance groups of `ranked` under `grouping`, holistic group first.
pub fn groups_of(ranked: &RankedSupport, grouping: Grouping) -> Result<(Vec<SupportPair>, Vec<Vec<SupportPair>>)> {
    match grouping {
        Grouping::Mpgs { k_g1, k_g2 } => {
            let g = mpgs_partition(ranked, k_g1, k_g2)?;
            Ok((g.holistic, vec![g.high, g.low]))
        }
        Grouping::Even { n } => Ok((ranked.pairs(), split_even(ranked, n)?)),
    }
}

/// State of one seed's run, filled stage by stage.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub cfg: RunConfig,
    pub dataset: Dataset,
    pub codebook: Codebook,
    pub backbone: BackboneWeights,
    pub backbone_trace: Vec<f64>,
    /// Leave-one-out top-K of every support pair.
    pub support_ranked: Vec<RankedSupport>,
    /// Top-K of every held-out query.
    pub query_ranked: Vec<RankedSupport>,
    pub pg: Option<PgWeights>,
    pub pg_trace: Vec<f64>,
}

impl SeedRun {
    /// Generates data, fits the tokenizer and trains the backbone.
    pub fn through_backbone(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = generate(&cfg.task)?;
        Self::with_dataset(cfg, dataset)
    }

    pub fn with_dataset(cfg: &RunConfig, dataset: Dataset) -> Result<Self> {
        let codebook = fit_tokenizer(cfg, &dataset)?;
        let canvases = backbone_canvases(cfg, &dataset.support)?;
        let (backbone, trace) = train_backbone(&canvases, &codebook, &cfg.backbone, &cfg.geometry, &cfg.backbone_sgd())?;
        Self::with_backbone(cfg, dataset, codebook, backbone, trace)
    }

    /// Ranks support and queries with an already trained backbone.
    pub fn with_backbone(
        cfg: &RunConfig,
        dataset: Dataset,
        codebook: Codebook,
        backbone: BackboneWeights,
        backbone_trace: Vec<f64>,
    ) -> Result<Self> {
        let index = SupportIndex::build(&dataset.support, &backbone, &cfg.geometry)?;
        let k = cfg.retrieval.k;
        let support_ranked = dataset
            .support
            .iter()
            .zip(index.embeddings())
            .map(|(p, e)| index.rank(e, &dataset.support, k, p.id, Some(p.id)))
            .collect::<Result<Vec<_>>>()?;
        let query_ranked = dataset
            .queries
            .iter()
            .map(|q| {
                let e = embed_image(&q.image, &backbone, &cfg.geometry)?;
                index.rank(&e, &dataset.support, k, q.id, None)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            codebook,
            backbone,
            backbone_trace,
            support_ranked,
            query_ranked,
            pg: None,
            pg_trace: Vec::new(),
        })
    }

    pub fn grouping(&self) -> Grouping {
        Grouping::Mpgs { k_g1: self.cfg.retrieval.k_g1, k_g2: self.cfg.retrieval.k_g2 }
    }

    pub fn pg_samples(&self) -> Result<Vec<PgSample>> {
        self.dataset
            .support
            .iter()
            .zip(&self.support_ranked)
            .map(|(p, r)| {
                Ok(PgSample {
                    group: r.pairs(),
                    query: p.image.clone(),
                    target: target_tokens(p.label.image(), &self.cfg.geometry, &self.codebook)?,
                })
            })
            .collect()
    }

    pub fn train_pg(&mut self) -> Result<()> {
        let samples = self.pg_samples()?;
        let (pg, trace) = train_prompt_generator(
            &samples,
            &self.backbone,
            &self.cfg.geometry,
            &self.cfg.prompt_generator,
            &self.cfg.pg_sgd(),
        )?;
        self.pg = Some(pg);
        self.pg_trace = trace;
        Ok(())
    }

    pub fn set_pg(&mut self, pg: PgWeights) {
        self.pg = Some(pg);
    }

    fn pg(&self) -> Result<&PgWeights> {
        self.pg.as_ref().ok_or_else(|| Error::MissingWeights("prompt generator".into()))
    }

    fn canvases_for(&self, ranked: &RankedSupport, query: &Image, grouping: Grouping) -> Result<GroupCanvases> {
        let (holistic, groups) = groups_of(ranked, grouping)?;
        build_canvases_from_groups(&holistic, &groups, query, self.pg()?, &self.cfg.geometry)
    }

    /// Training samples for the multi-branch stage.
    pub fn multi_samples(&self, grouping: Grouping) -> Result<Vec<MultiSample>> {
        self.dataset
            .support
            .iter()
            .zip(&self.support_ranked)
            .map(|(p, r)| {
                Ok(MultiSample {
                    canvases: self.canvases_for(r, &p.image, grouping)?,
                    target: target_tokens(p.label.image(), &self.cfg.geometry, &self.codebook)?,
                    key: p.id,
                })
            })
            .collect()
    }

    pub fn query_canvases(&self, grouping: Grouping) -> Result<Vec<GroupCanvases>> {
        self.dataset
            .queries
            .iter()
            .zip(&self.query_ranked)
            .map(|(q, r)| self.canvases_for(r, &q.image, grouping))
            .collect()
    }

    /// Setup of `variant` with this run's fusion settings.
    pub fn setup(&self, variant: AblationVariant) -> MultiSetup {
        make_variant(variant, &self.cfg.multi_setup(), self.cfg.stage_seed("random_guidance"))
    }

    pub fn train_multi(&self, setup: &MultiSetup, samples: &[MultiSample]) -> Result<(MultiWeights, Vec<f64>)> {
        train_multi(samples, &self.backbone, &self.backbone, setup, &self.cfg.geometry, &self.cfg.multi_sgd())
    }

    /// Mainstream finetuned on holistic canvases alone.
    pub fn train_no_fusion(&self, samples: &[MultiSample]) -> Result<(BackboneWeights, Vec<f64>)> {
        let inputs: Vec<Canvas> = samples.iter().map(|s| s.canvases.main.clone()).collect();
        let targets: Vec<_> = samples.iter().map(|s| s.target.clone()).collect();
        finetune_backbone(self.backbone.clone(), &inputs, &targets, &self.cfg.geometry, &self.cfg.multi_sgd())
    }

    fn score_all(&self, mut predict: impl FnMut(usize) -> Result<Image>) -> Result<Vec<QueryScore>> {
        self.dataset
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let pred = predict(i)?;
                let score = score_prediction(self.cfg.task.task, &pred, &q.label, self.cfg.eval.threshold)?;
                Ok(QueryScore { query_id: q.id, score })
            })
            .collect()
    }

    /// Rank-1 support pair as the prompt, frozen backbone.
    pub fn eval_top1(&self) -> Result<Vec<QueryScore>> {
        self.score_all(|i| {
            let q = &self.dataset.queries[i];
            let top = &self.query_ranked[i].entries[0].pair;
            infer_inpaint(&compose_canvas(top, &q.image, &self.cfg.geometry)?, &self.backbone, &self.codebook, &self.cfg.geometry)
        })
    }

    /// All K pairs fused by the prompt generator, frozen backbone.
    pub fn eval_condenser(&self) -> Result<Vec<QueryScore>> {
        let pg = self.pg()?;
        self.score_all(|i| {
            let q = &self.dataset.queries[i];
            let fp = condense(&self.query_ranked[i].pairs(), &q.image, pg, &self.cfg.geometry)?;
            let canvas = build_fused_canvas(&fp, &q.image, &self.cfg.geometry)?;
            infer_inpaint(&canvas, &self.backbone, &self.codebook, &self.cfg.geometry)
        })
    }

    pub fn eval_multi(&self, weights: &MultiWeights, setup: &MultiSetup, canvases: &[GroupCanvases]) -> Result<Vec<QueryScore>> {
        self.score_all(|i| {
            let key = self.dataset.queries[i].id;
            predict_label(&canvases[i], weights, &self.backbone, setup, key, &self.codebook, &self.cfg.geometry)
        })
    }

    pub fn eval_no_fusion(&self, weights: &BackboneWeights, canvases: &[GroupCanvases]) -> Result<Vec<QueryScore>> {
        self.score_all(|i| infer_inpaint(&canvases[i].main, weights, &self.codebook, &self.cfg.geometry))
    }

    /// Trains whatever `method` needs on top of the shared stages and scores
    /// the held-out queries.
    pub fn run_method(&self, method: Method, grouping: Grouping) -> Result<Vec<QueryScore>> {
        match method {
            Method::Top1 => self.eval_top1(),
            Method::CondenserSingle => self.eval_condenser(),
            Method::NoFusion => {
                let (w, _) = self.train_no_fusion(&self.multi_samples(grouping)?)?;
                self.eval_no_fusion(&w, &self.query_canvases(grouping)?)
            }
            Method::Multi(v) => self.run_setup(&self.setup(v), grouping),
        }
    }

    /// Trains and scores a multi-branch model with an explicit setup.
    pub fn run_setup(&self, setup: &MultiSetup, grouping: Grouping) -> Result<Vec<QueryScore>> {
        let (w, _) = self.train_multi(setup, &self.multi_samples(grouping)?)?;
        self.eval_multi(&w, setup, &self.query_canvases(grouping)?)
    }
}

pub fn mean(scores: &[QueryScore]) -> f64 {
    scores.iter().map(|s| s.score).sum::<f64>() / scores.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        let mut all = vec![Method::Top1, Method::CondenserSingle, Method::NoFusion];
        all.extend(AblationVariant::ALL.map(Method::Multi));
        for m in all {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!(Method::Multi(AblationVariant::Full).name(), "multi_full");
        assert!("multi_nope".parse::<Method>().is_err());
    }
}
