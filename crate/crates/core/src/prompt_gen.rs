//! Prompt generator: condenses a group of support pairs into one fused pair
//! conditioned on the query, and trains it through the frozen backbone.
//!
//! Query patches attend over the patches of every group image. One attention
//! head pools member image patches into the fused image, a second pools member
//! label patches into the fused label. Each head ends in a gated sigmoid
//! projection
//!
//! ```text
//! out = pooled + gate * (sigmoid(pooled W + b) - pooled)
//! ```
//!
//! with `gate` kept in `[0, 1]`, so outputs stay in `[0, 1]` and a zero gate
//! passes the pooled pixels through unchanged.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{canvas_grad, masked_ce_with_grad, BackboneWeights, TokenLogits};
use crate::canvas::{
    compose_parts, masked_patch_indices, patchify, quadrant_view, unpatchify, Canvas, CanvasConfig, Image, Quadrant,
    SupportPair,
};
use crate::error::{Error, Result};
use crate::eval::mse;
use crate::nn::{
    mha_backward, mha_forward, nest, nest_mut, normal_mat, sigmoid, slice_of, slice_of_mut, AttnCache, Linear, Mat,
    Params,
};
use crate::backbone::masked_ce_loss;
use crate::tokenizer::{Codebook, TokenGrid};
use crate::train::{run_sgd, SgdConfig};

const MATCH_SCALE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgConfig {
    /// Width of the matching space queries and keys are projected into.
    pub token_dim: usize,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self { token_dim: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgTrainConfig {
    pub lambda: f64,
    pub sgd: SgdConfig,
}

impl PgTrainConfig {
    pub(crate) fn collect_errors(&self, path: &str, errs: &mut Vec<String>) {
        if !(0.0..=1.0).contains(&self.lambda) {
            errs.push(format!("{path}.lambda: must lie in [0, 1]"));
        }
        self.sgd.collect_errors(path, errs);
    }
}

/// A fused support pair; the label may hold continuous values.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPair {
    pub image: Image,
    pub label: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgHead {
    pub query: Linear,
    pub key: Linear,
    pub out: Linear,
    pub gate: Array1<f64>,
}

impl PgHead {
    fn init(rng: &mut ChaCha8Rng, token_dim: usize, patch_dim: usize) -> Self {
        let mut out = Linear::identity(patch_dim);
        out.weight *= 4.0;
        out.bias.fill(-2.0);
        let _ = rng;
        let mut match_proj = Linear::identity(token_dim);
        match_proj.weight *= MATCH_SCALE;
        Self {
            query: match_proj.clone(),
            key: match_proj,
            out,
            gate: Array1::zeros(patch_dim),
        }
    }

    fn project_gate(&mut self) {
        self.gate.mapv_inplace(|g| g.clamp(0.0, 1.0));
    }
}

impl Params for PgHead {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = nest("query", self.query.tensors());
        out.extend(nest("key", self.key.tensors()));
        out.extend(nest("out", self.out.tensors()));
        out.push(("gate".into(), self.gate.as_slice().expect("contiguous")));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = nest_mut("query", self.query.tensors_mut());
        out.extend(nest_mut("key", self.key.tensors_mut()));
        out.extend(nest_mut("out", self.out.tensors_mut()));
        out.push(("gate".into(), self.gate.as_slice_mut().expect("contiguous")));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgWeights {
    pub config: PgConfig,
    pub embed: Linear,
    pub pos: Mat,
    pub image_head: PgHead,
    pub label_head: PgHead,
}

impl PgWeights {
    pub fn init(config: &PgConfig, geometry: &CanvasConfig, seed: u64) -> Result<Self> {
        geometry.validate()?;
        if config.token_dim == 0 {
            return Err(Error::Config(vec!["prompt_generator.token_dim: must be positive".into()]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pd = geometry.patch_dim();
        let dc = config.token_dim;
        Ok(Self {
            config: *config,
            embed: Linear::init(&mut rng, pd, dc),
            pos: normal_mat(&mut rng, geometry.patches_per_quadrant(), dc, 0.1),
            image_head: PgHead::init(&mut rng, dc, pd),
            label_head: PgHead::init(&mut rng, dc, pd),
        })
    }

    fn tokens(&self, patches: &Mat) -> Mat {
        self.embed.forward(patches) + &self.pos
    }

    fn project(&mut self) {
        self.image_head.project_gate();
        self.label_head.project_gate();
    }
}

impl Params for PgWeights {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = nest("embed", self.embed.tensors());
        out.push(("pos".into(), slice_of(&self.pos)));
        out.extend(nest("image_head", self.image_head.tensors()));
        out.extend(nest("label_head", self.label_head.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = nest_mut("embed", self.embed.tensors_mut());
        out.push(("pos".into(), slice_of_mut(&mut self.pos)));
        out.extend(nest_mut("image_head", self.image_head.tensors_mut()));
        out.extend(nest_mut("label_head", self.label_head.tensors_mut()));
        out
    }
}

struct HeadCache {
    q: Mat,
    k: Mat,
    values: Mat,
    attn: AttnCache,
    pooled: Mat,
    sig: Mat,
}

struct CondenseCache {
    query_patches: Mat,
    member_patches: Vec<Mat>,
    query_tokens: Mat,
    member_tokens: Mat,
    image: HeadCache,
    label: HeadCache,
}

/// Members sorted by id (content hash on ties) so the fusion does not depend
/// on the order the group arrives in.
fn canonical_order(group: &[SupportPair]) -> Vec<&SupportPair> {
    let key = |p: &SupportPair| {
        let mut h = Sha256::new();
        for v in p.image.pixels().iter().chain(p.label.image().pixels().iter()) {
            h.update(v.to_le_bytes());
        }
        (p.id, h.finalize().to_vec())
    };
    let mut keyed: Vec<_> = group.iter().map(|p| (key(p), p)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    keyed.into_iter().map(|(_, p)| p).collect()
}

fn head_forward(head: &PgHead, query_tokens: &Mat, member_tokens: &Mat, values: Mat) -> (Mat, HeadCache) {
    let q = head.query.forward(query_tokens);
    let k = head.key.forward(member_tokens);
    let (pooled, attn) = mha_forward(&q, &k, &values, 1);
    let sig = head.out.forward(&pooled).mapv(sigmoid);
    let out = &pooled + &((&sig - &pooled) * &head.gate);
    (out, HeadCache { q, k, values, attn, pooled, sig })
}

/// Returns gradients w.r.t. query tokens and member tokens.
fn head_backward(head: &PgHead, c: &HeadCache, qt: &Mat, mt: &Mat, dout: &Mat, g: &mut PgHead) -> (Mat, Mat) {
    g.gate += &(dout * &(&c.sig - &c.pooled)).sum_axis(Axis(0));
    let dsig = dout * &head.gate;
    let dz = &dsig * &c.sig.mapv(|s| s * (1.0 - s));
    let mut dpooled = head.out.backward(&c.pooled, &dz, Some(&mut g.out));
    dpooled += &(dout * &head.gate.mapv(|v| 1.0 - v));
    let (dq, dk, _) = mha_backward(&c.q, &c.k, &c.values, &c.attn, &dpooled, 1);
    let dqt = head.query.backward(qt, &dq, Some(&mut g.query));
    let dmt = head.key.backward(mt, &dk, Some(&mut g.key));
    (dqt, dmt)
}

fn condense_impl(group: &[SupportPair], query: &Image, params: &PgWeights, geometry: &CanvasConfig) -> Result<(FusedPair, CondenseCache)> {
    if group.is_empty() {
        return Err(Error::Empty("prompt group"));
    }
    let qdims = (geometry.quadrant_h, geometry.quadrant_w);
    if query.dims() != qdims {
        return Err(Error::Shape(format!("query {:?} vs quadrant {qdims:?}", query.dims())));
    }
    let p = geometry.patch_size;
    let members = canonical_order(group);
    let query_patches = patchify(query.pixels(), p);
    if query_patches.dim() != (params.pos.nrows(), params.embed.weight.nrows()) {
        return Err(Error::Shape("prompt generator geometry does not match the canvas".into()));
    }
    let mut member_patches = Vec::with_capacity(members.len());
    let mut img_rows = Vec::with_capacity(members.len());
    let mut lbl_rows = Vec::with_capacity(members.len());
    for m in &members {
        if m.image.dims() != qdims {
            return Err(Error::Shape(format!("member {} is {:?}, expected {qdims:?}", m.id, m.image.dims())));
        }
        let ip = patchify(m.image.pixels(), p);
        lbl_rows.push(patchify(m.label.image().pixels(), p));
        img_rows.push(ip.clone());
        member_patches.push(ip);
    }
    let cat = |rows: &[Mat]| {
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal widths")
    };
    let query_tokens = params.tokens(&query_patches);
    let member_tokens = cat(&member_patches.iter().map(|m| params.tokens(m)).collect::<Vec<_>>());
    let (img_out, image) = head_forward(&params.image_head, &query_tokens, &member_tokens, cat(&img_rows));
    let (lbl_out, label) = head_forward(&params.label_head, &query_tokens, &member_tokens, cat(&lbl_rows));
    let (h, w) = qdims;
    let fused = FusedPair {
        image: Image::from_raw(unpatchify(&img_out, h, w, p)),
        label: Image::from_raw(unpatchify(&lbl_out, h, w, p)),
    };
    let cache = CondenseCache { query_patches, member_patches, query_tokens, member_tokens, image, label };
    Ok((fused, cache))
}

/// Fuses `group` into one support pair for `query`.
pub fn condense(group: &[SupportPair], query: &Image, params: &PgWeights, geometry: &CanvasConfig) -> Result<FusedPair> {
    Ok(condense_impl(group, query, params, geometry)?.0)
}

/// Fused pair and the parameter gradient of `<d_image, fused.image> +
/// <d_label, fused.label>`, for callers that chain their own loss.
pub fn condense_grad(
    group: &[SupportPair],
    query: &Image,
    params: &PgWeights,
    geometry: &CanvasConfig,
    d_image: &Array3<f64>,
    d_label: &Array3<f64>,
) -> Result<(FusedPair, PgWeights)> {
    let (fp, cache) = condense_impl(group, query, params, geometry)?;
    for d in [d_image, d_label] {
        if d.dim() != fp.image.pixels().dim() {
            return Err(Error::Shape(format!("upstream gradient {:?} vs fused {:?}", d.dim(), fp.image.pixels().dim())));
        }
    }
    let p = geometry.patch_size;
    let mut grad = params.clone();
    grad.zero();
    condense_backward(params, &cache, &patchify(d_image, p), &patchify(d_label, p), &mut grad);
    Ok((fp, grad))
}

/// Accumulates parameter gradients given gradients on the fused image and
/// label patch matrices.
fn condense_backward(params: &PgWeights, c: &CondenseCache, d_img: &Mat, d_lbl: &Mat, g: &mut PgWeights) {
    let (dq1, dm1) = head_backward(&params.image_head, &c.image, &c.query_tokens, &c.member_tokens, d_img, &mut g.image_head);
    let (dq2, dm2) = head_backward(&params.label_head, &c.label, &c.query_tokens, &c.member_tokens, d_lbl, &mut g.label_head);
    let dqt = dq1 + dq2;
    let dmt = dm1 + dm2;
    let n = params.pos.nrows();
    params.embed.backward_params(&c.query_patches, &dqt, &mut g.embed);
    g.pos += &dqt;
    for (j, mp) in c.member_patches.iter().enumerate() {
        let block = dmt.slice(ndarray::s![j * n..(j + 1) * n, ..]).to_owned();
        params.embed.backward_params(mp, &block, &mut g.embed);
        g.pos += &block;
    }
}

/// Canvas with the fused pair on top, the query bottom-left and the mask fill
/// bottom-right.
pub fn build_fused_canvas(fp: &FusedPair, query: &Image, geometry: &CanvasConfig) -> Result<Canvas> {
    compose_parts(&fp.image, &fp.label, query, geometry)
}

/// `(1 - lambda) * MSE(fused image, query) + lambda * masked CE`.
pub fn pg_loss(
    fp: &FusedPair,
    query: &Image,
    logits: &TokenLogits,
    target: &TokenGrid,
    mask: &[usize],
    lambda: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidValue(format!("lambda {lambda} outside [0, 1]")));
    }
    let align = mse(&fp.image, query)?;
    let ce = masked_ce_loss(logits, target, mask)?;
    Ok((1.0 - lambda) * align + lambda * ce)
}

/// Full-canvas token grid whose bottom-right quadrant holds the tokens of
/// `label`; other positions are zero and never enter the masked loss.
pub fn target_tokens(label: &Image, geometry: &CanvasConfig, cb: &Codebook) -> Result<TokenGrid> {
    let quad = crate::tokenizer::encode(label, cb)?;
    let (gr, gc) = geometry.patch_grid();
    let mut grid = Array2::zeros((gr, gc));
    let (hr, hc) = (gr / 2, gc / 2);
    for r in 0..hr {
        for c in 0..hc {
            grid[[hr + r, hc + c]] = quad.tokens()[[r, c]];
        }
    }
    Ok(TokenGrid::new(grid))
}

/// One prompt-generator training example.
#[derive(Debug, Clone)]
pub struct PgSample {
    pub group: Vec<SupportPair>,
    pub query: Image,
    pub target: TokenGrid,
}

/// Loss and parameter gradient for one sample through the frozen backbone.
pub(crate) fn pg_sample_grad(
    params: &PgWeights,
    sample: &PgSample,
    backbone: &BackboneWeights,
    geometry: &CanvasConfig,
    mask: &[usize],
    lambda: f64,
    grad: &mut PgWeights,
) -> Result<f64> {
    let (fp, cache) = condense_impl(&sample.group, &sample.query, params, geometry)?;
    let canvas = build_fused_canvas(&fp, &sample.query, geometry)?;
    let patches = patchify(canvas.pixels(), geometry.patch_size);
    let (logits, trace) = backbone.forward_patches(&patches);
    let (ce, dlogits) = masked_ce_with_grad(&logits, &sample.target, mask)?;
    let dpatches = backbone.backward_patches(&trace, &(dlogits * lambda), None);
    let dcanvas = canvas_grad(&dpatches, geometry);
    let p = geometry.patch_size;
    let mut d_img = patchify(&quadrant_view(&dcanvas, Quadrant::TL).to_owned(), p);
    let d_lbl = patchify(&quadrant_view(&dcanvas, Quadrant::TR).to_owned(), p);

    let fused_img = patchify(fp.image.pixels(), p);
    let query_p = patchify(sample.query.pixels(), p);
    let n = fused_img.len() as f64;
    let diff = &fused_img - &query_p;
    let align = diff.iter().map(|v| v * v).sum::<f64>() / n;
    d_img += &(diff * (2.0 * (1.0 - lambda) / n));

    condense_backward(params, &cache, &d_img, &d_lbl, grad);
    Ok((1.0 - lambda) * align + lambda * ce)
}

/// Optimizes the prompt generator only; the backbone is borrowed immutably and
/// is never updated.
pub fn train_prompt_generator(
    samples: &[PgSample],
    backbone: &BackboneWeights,
    geometry: &CanvasConfig,
    config: &PgConfig,
    train: &PgTrainConfig,
) -> Result<(PgWeights, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Empty("prompt generator samples"));
    }
    let mut errs = Vec::new();
    train.collect_errors("pg_train", &mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut params = PgWeights::init(config, geometry, train.sgd.seed)?;
    let mask = masked_patch_indices(geometry);
    let trace = run_sgd(
        &mut params,
        samples.len(),
        &train.sgd,
        |p, i, g| pg_sample_grad(p, &samples[i], backbone, geometry, &mask, train.lambda, g),
        |p| p.project(),
    )?;
    Ok((params, trace))
}
