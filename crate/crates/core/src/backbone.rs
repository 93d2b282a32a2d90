//! Masked-token inpainting transformer.
//!
//! Patches of the canvas are linearly embedded, passed through `depth`
//! pre-norm transformer blocks, and a final norm + linear head predicts a
//! codebook token for every patch. Only the bottom-right quadrant is ever
//! masked; the loss is the mean cross-entropy over its patches.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canvas::{
    masked_patch_indices, patchify, quadrant_patch_indices, unpatchify, Canvas, CanvasConfig, Image, Quadrant,
};
use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_backward, log_softmax_rows, mha_backward, mha_forward, nest, nest_mut, normal_mat, slice_of,
    slice_of_mut, AttnCache, LayerNorm, Linear, LnCache, Mat, Params,
};
use crate::tokenizer::{decode, encode_canvas, Codebook, TokenGrid};
use crate::train::{run_sgd, SgdConfig};

const POS_STD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub vocab: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { depth: 16, embed_dim: 128, heads: 4, mlp_ratio: 2.0, patch_size: 8, vocab: 64 }
    }
}

impl BackboneConfig {
    pub fn hidden_dim(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.collect_errors("backbone", &mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub(crate) fn collect_errors(&self, path: &str, errs: &mut Vec<String>) {
        if self.depth == 0 {
            errs.push(format!("{path}.depth: must be at least 1"));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            errs.push(format!("{path}.embed_dim: must be a positive multiple of heads"));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            errs.push(format!("{path}.mlp_ratio: must be positive"));
        }
        if self.patch_size == 0 {
            errs.push(format!("{path}.patch_size: must be positive"));
        }
        if self.vocab < 2 {
            errs.push(format!("{path}.vocab: must be at least 2"));
        }
    }
}

/// Token features after `block_index` blocks (0 = patch embedding).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub features: Mat,
    pub block_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogits {
    pub logits: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BlockParams {
    fn init(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            q: Linear::init(rng, d, d),
            k: Linear::init(rng, d, d),
            v: Linear::init(rng, d, d),
            proj: Linear::init(rng, d, d),
            ln2: LayerNorm::new(d),
            fc1: Linear::init(rng, d, hidden),
            fc2: Linear::init(rng, hidden, d),
        }
    }

    /// Residual-only block: attention and MLP branches contribute nothing.
    pub fn zero_branches(&mut self) {
        for lin in [&mut self.proj, &mut self.fc2] {
            lin.weight.fill(0.0);
            lin.bias.fill(0.0);
        }
    }
}

impl Params for BlockParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = nest("ln1", self.ln1.tensors());
        out.extend(nest("q", self.q.tensors()));
        out.extend(nest("k", self.k.tensors()));
        out.extend(nest("v", self.v.tensors()));
        out.extend(nest("proj", self.proj.tensors()));
        out.extend(nest("ln2", self.ln2.tensors()));
        out.extend(nest("fc1", self.fc1.tensors()));
        out.extend(nest("fc2", self.fc2.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = nest_mut("ln1", self.ln1.tensors_mut());
        out.extend(nest_mut("q", self.q.tensors_mut()));
        out.extend(nest_mut("k", self.k.tensors_mut()));
        out.extend(nest_mut("v", self.v.tensors_mut()));
        out.extend(nest_mut("proj", self.proj.tensors_mut()));
        out.extend(nest_mut("ln2", self.ln2.tensors_mut()));
        out.extend(nest_mut("fc1", self.fc1.tensors_mut()));
        out.extend(nest_mut("fc2", self.fc2.tensors_mut()));
        out
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Mat,
    ln1: LnCache,
    h: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: AttnCache,
    ctx: Mat,
    ln2: LnCache,
    h2: Mat,
    u: Mat,
    a: Mat,
}

pub fn block_forward(p: &BlockParams, x: &Mat, heads: usize) -> (Mat, BlockCache) {
    let (h, ln1) = p.ln1.forward(x);
    let q = p.q.forward(&h);
    let k = p.k.forward(&h);
    let v = p.v.forward(&h);
    let (ctx, attn) = mha_forward(&q, &k, &v, heads);
    let x1 = x + &p.proj.forward(&ctx);
    let (h2, ln2) = p.ln2.forward(&x1);
    let u = p.fc1.forward(&h2);
    let a = gelu(&u);
    let out = &x1 + &p.fc2.forward(&a);
    let cache = BlockCache { x: x.clone(), ln1, h, q, k, v, attn, ctx, ln2, h2, u, a };
    (out, cache)
}

/// Backward through one block. Parameter gradients go to `grad` when given.
pub fn block_backward(p: &BlockParams, c: &BlockCache, dy: &Mat, heads: usize, mut grad: Option<&mut BlockParams>) -> Mat {
    let da = p.fc2.backward(&c.a, dy, grad.as_deref_mut().map(|g| &mut g.fc2));
    let du = gelu_backward(&c.u, &da);
    let dh2 = p.fc1.backward(&c.h2, &du, grad.as_deref_mut().map(|g| &mut g.fc1));
    let mut dx1 = p.ln2.backward(&c.ln2, &dh2, grad.as_deref_mut().map(|g| &mut g.ln2));
    dx1 += dy;
    let dctx = p.proj.backward(&c.ctx, &dx1, grad.as_deref_mut().map(|g| &mut g.proj));
    let (dq, dk, dv) = mha_backward(&c.q, &c.k, &c.v, &c.attn, &dctx, heads);
    let mut dh = p.q.backward(&c.h, &dq, grad.as_deref_mut().map(|g| &mut g.q));
    dh += &p.k.backward(&c.h, &dk, grad.as_deref_mut().map(|g| &mut g.k));
    dh += &p.v.backward(&c.h, &dv, grad.as_deref_mut().map(|g| &mut g.v));
    let mut dx = p.ln1.backward(&c.ln1, &dh, grad.as_deref_mut().map(|g| &mut g.ln1));
    dx += &dx1;
    debug_assert_eq!(dx.dim(), c.x.dim());
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub patch_embed: Linear,
    pub pos: Mat,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl BackboneWeights {
    pub fn init(config: &BackboneConfig, geometry: &CanvasConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        geometry.validate()?;
        if config.patch_size != geometry.patch_size {
            return Err(Error::Shape(format!(
                "backbone patch size {} vs canvas patch size {}",
                config.patch_size, geometry.patch_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let patch_embed = Linear::init(&mut rng, geometry.patch_dim(), d);
        // a vector per position inside a quadrant plus one per quadrant, so
        // corresponding positions of different quadrants start out related
        let within = normal_mat(&mut rng, geometry.patches_per_quadrant(), d, POS_STD);
        let quad = normal_mat(&mut rng, 4, d, 0.1);
        let mut pos = Array2::zeros((geometry.num_patches(), d));
        for (qi, q) in Quadrant::ALL.iter().enumerate() {
            for (j, &idx) in quadrant_patch_indices(geometry, *q).iter().enumerate() {
                pos.row_mut(idx).assign(&(&within.row(j) + &quad.row(qi)));
            }
        }
        let blocks = (0..config.depth).map(|_| BlockParams::init(&mut rng, d, config.hidden_dim())).collect();
        let head = Linear::init(&mut rng, d, config.vocab);
        Ok(Self { config: *config, patch_embed, pos, blocks, norm: LayerNorm::new(d), head })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_patches(&self) -> usize {
        self.pos.nrows()
    }

    fn check_canvas(&self, canvas: &Canvas) -> Result<Mat> {
        let patches = patchify(canvas.pixels(), self.config.patch_size);
        if patches.dim() != (self.num_patches(), self.patch_embed.weight.nrows()) {
            return Err(Error::Shape(format!(
                "canvas yields {:?} patches, backbone expects {:?}",
                patches.dim(),
                (self.num_patches(), self.patch_embed.weight.nrows())
            )));
        }
        Ok(patches)
    }

    pub(crate) fn embed_patches(&self, patches: &Mat) -> Mat {
        self.patch_embed.forward(patches) + &self.pos
    }

    /// Gradient w.r.t. the raw patch matrix; parameter gradients into `grad`.
    pub(crate) fn embed_backward(&self, patches: &Mat, dx: &Mat, grad: Option<&mut BackboneWeights>) -> Mat {
        match grad {
            Some(g) => {
                g.pos += dx;
                self.patch_embed.backward(patches, dx, Some(&mut g.patch_embed))
            }
            None => self.patch_embed.backward(patches, dx, None),
        }
    }

    pub fn patch_embed(&self, canvas: &Canvas) -> Result<FeatureSequence> {
        let patches = self.check_canvas(canvas)?;
        Ok(FeatureSequence { features: self.embed_patches(&patches), block_index: 0 })
    }

    /// Applies block `i` (1-based) to features that have passed blocks `1..i`.
    pub fn run_block(&self, i: usize, x: &FeatureSequence) -> Result<FeatureSequence> {
        if i == 0 || i > self.depth() || x.block_index + 1 != i {
            return Err(Error::BlockOrder { requested: i, found: x.block_index });
        }
        let (features, _) = block_forward(&self.blocks[i - 1], &x.features, self.config.heads);
        Ok(FeatureSequence { features, block_index: i })
    }

    pub fn predict_tokens(&self, x: &FeatureSequence) -> Result<TokenLogits> {
        if x.block_index != self.depth() {
            return Err(Error::BlockOrder { requested: self.depth() + 1, found: x.block_index });
        }
        Ok(TokenLogits { logits: self.head_forward(&x.features).0 })
    }

    pub(crate) fn head_forward(&self, x: &Mat) -> (Mat, (LnCache, Mat)) {
        let (n, cache) = self.norm.forward(x);
        (self.head.forward(&n), (cache, n))
    }

    pub(crate) fn head_backward(&self, cache: &(LnCache, Mat), dlogits: &Mat, grad: Option<&mut BackboneWeights>) -> Mat {
        match grad {
            Some(g) => {
                let dn = self.head.backward(&cache.1, dlogits, Some(&mut g.head));
                self.norm.backward(&cache.0, &dn, Some(&mut g.norm))
            }
            None => {
                let dn = self.head.backward(&cache.1, dlogits, None);
                self.norm.backward(&cache.0, &dn, None)
            }
        }
    }

    /// Features after every block, index 0 being the patch embedding.
    pub fn forward_features(&self, canvas: &Canvas) -> Result<Vec<FeatureSequence>> {
        let mut out = vec![self.patch_embed(canvas)?];
        for i in 1..=self.depth() {
            let next = self.run_block(i, out.last().expect("nonempty"))?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn forward(&self, canvas: &Canvas) -> Result<TokenLogits> {
        let patches = self.check_canvas(canvas)?;
        Ok(self.forward_patches(&patches).0)
    }

    /// Full forward pass on a patch matrix, keeping caches for backward.
    pub(crate) fn forward_patches(&self, patches: &Mat) -> (TokenLogits, ForwardTrace) {
        let mut x = self.embed_patches(patches);
        let mut caches = Vec::with_capacity(self.depth());
        for b in &self.blocks {
            let (y, c) = block_forward(b, &x, self.config.heads);
            caches.push(c);
            x = y;
        }
        let (logits, head) = self.head_forward(&x);
        (TokenLogits { logits }, ForwardTrace { patches: patches.clone(), blocks: caches, head })
    }

    /// Backward of [`Self::forward_patches`]; returns the patch-matrix gradient.
    pub(crate) fn backward_patches(&self, trace: &ForwardTrace, dlogits: &Mat, mut grad: Option<&mut BackboneWeights>) -> Mat {
        let mut dx = self.head_backward(&trace.head, dlogits, grad.as_deref_mut());
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let g = grad.as_deref_mut().map(|g| &mut g.blocks[i]);
            dx = block_backward(b, &trace.blocks[i], &dx, self.config.heads, g);
        }
        self.embed_backward(&trace.patches, &dx, grad)
    }
}

pub(crate) struct ForwardTrace {
    patches: Mat,
    blocks: Vec<BlockCache>,
    head: (LnCache, Mat),
}

impl Params for BackboneWeights {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = nest("patch_embed", self.patch_embed.tensors());
        out.push(("pos".into(), slice_of(&self.pos)));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(nest(&format!("blocks.{i}"), b.tensors()));
        }
        out.extend(nest("norm", self.norm.tensors()));
        out.extend(nest("head", self.head.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = nest_mut("patch_embed", self.patch_embed.tensors_mut());
        out.push(("pos".into(), slice_of_mut(&mut self.pos)));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(nest_mut(&format!("blocks.{i}"), b.tensors_mut()));
        }
        out.extend(nest_mut("norm", self.norm.tensors_mut()));
        out.extend(nest_mut("head", self.head.tensors_mut()));
        out
    }
}

/// Mean of `-log softmax(logits)[target]` over the masked patch positions.
pub fn masked_ce_loss(logits: &TokenLogits, target: &TokenGrid, mask: &[usize]) -> Result<f64> {
    Ok(masked_ce_with_grad(logits, target, mask)?.0)
}

/// Loss and its gradient w.r.t. the logits.
pub fn masked_ce_with_grad(logits: &TokenLogits, target: &TokenGrid, mask: &[usize]) -> Result<(f64, Mat)> {
    if mask.is_empty() {
        return Err(Error::Empty("loss mask"));
    }
    let l = &logits.logits;
    if target.len() != l.nrows() {
        return Err(Error::Shape(format!("{} logit rows vs {} target tokens", l.nrows(), target.len())));
    }
    let rows = l.select(Axis(0), mask);
    let logp = log_softmax_rows(&rows);
    let mut grad = Array2::zeros(l.raw_dim());
    let scale = 1.0 / mask.len() as f64;
    let mut loss = 0.0;
    for (j, &i) in mask.iter().enumerate() {
        let t = target.at(i);
        if t >= l.ncols() {
            return Err(Error::Codebook(format!("target token {t} outside {} logits", l.ncols())));
        }
        loss -= logp[[j, t]];
        let mut g = grad.row_mut(i);
        for (k, lp) in logp.row(j).iter().enumerate() {
            g[k] = lp.exp() * scale;
        }
        g[t] -= scale;
    }
    Ok((loss * scale, grad))
}

pub fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Decodes argmax tokens at the masked positions into the predicted label.
pub fn decode_masked(logits: &TokenLogits, geometry: &CanvasConfig, cb: &Codebook) -> Result<Image> {
    let mask = masked_patch_indices(geometry);
    let qr = geometry.quadrant_h / geometry.patch_size;
    let qc = geometry.quadrant_w / geometry.patch_size;
    let toks: Vec<usize> = mask.iter().map(|&i| argmax_row(logits.logits.row(i))).collect();
    let grid = TokenGrid::new(Array2::from_shape_vec((qr, qc), toks).expect("quadrant grid"));
    decode(&grid, cb)
}

/// Replaces the bottom-right quadrant with the mask fill.
pub fn mask_canvas(canvas: &Canvas, geometry: &CanvasConfig) -> Result<Canvas> {
    let fill = Image::filled(geometry.quadrant_h, geometry.quadrant_w, geometry.mask_fill)?;
    canvas.with_quadrant(Quadrant::BR, &fill)
}

/// Trains the backbone on ground-truth canvases: the bottom-right quadrant is
/// mask-filled on input and its true tokens are the targets.
pub fn train_backbone(
    dataset: &[Canvas],
    cb: &Codebook,
    config: &BackboneConfig,
    geometry: &CanvasConfig,
    sgd: &SgdConfig,
) -> Result<(BackboneWeights, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Empty("backbone training canvases"));
    }
    let weights = BackboneWeights::init(config, geometry, sgd.seed)?;
    let inputs = dataset.iter().map(|c| mask_canvas(c, geometry)).collect::<Result<Vec<_>>>()?;
    let targets = dataset.iter().map(|c| encode_canvas(c, cb)).collect::<Result<Vec<_>>>()?;
    finetune_backbone(weights, &inputs, &targets, geometry, sgd)
}

/// Continues training `weights` on already-masked input canvases with the
/// given full-canvas target tokens (only bottom-right positions are scored).
pub fn finetune_backbone(
    mut weights: BackboneWeights,
    inputs: &[Canvas],
    targets: &[TokenGrid],
    geometry: &CanvasConfig,
    sgd: &SgdConfig,
) -> Result<(BackboneWeights, Vec<f64>)> {
    if inputs.len() != targets.len() {
        return Err(Error::Shape(format!("{} inputs vs {} targets", inputs.len(), targets.len())));
    }
    let mask = masked_patch_indices(geometry);
    let patches = inputs.iter().map(|c| weights.check_canvas(c)).collect::<Result<Vec<_>>>()?;
    let trace = run_sgd(
        &mut weights,
        inputs.len(),
        sgd,
        |w, i, g| {
            let (logits, tr) = w.forward_patches(&patches[i]);
            let (loss, dl) = masked_ce_with_grad(&logits, &targets[i], &mask)?;
            w.backward_patches(&tr, &dl, Some(g));
            Ok(loss)
        },
        |_| {},
    )?;
    Ok((weights, trace))
}

/// Predicts the bottom-right quadrant of a (masked) canvas.
pub fn infer_inpaint(canvas: &Canvas, weights: &BackboneWeights, cb: &Codebook, geometry: &CanvasConfig) -> Result<Image> {
    let logits = weights.forward(canvas)?;
    decode_masked(&logits, geometry, cb)
}

/// Pixel-space gradient of a canvas from its patch-matrix gradient.
pub(crate) fn canvas_grad(dpatches: &Mat, geometry: &CanvasConfig) -> ndarray::Array3<f64> {
    let (h, w) = geometry.canvas_dims();
    unpatchify(dpatches, h, w, geometry.patch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::quadrant_patch_indices;
    use crate::nn::testing::{check_input, check_params};
    use rand::Rng;

    fn mini() -> (BackboneConfig, CanvasConfig) {
        (
            BackboneConfig { depth: 2, embed_dim: 8, heads: 2, mlp_ratio: 2.0, patch_size: 2, vocab: 5 },
            CanvasConfig { quadrant_h: 2, quadrant_w: 2, patch_size: 2, mask_fill: 0.0 },
        )
    }

    fn random_canvas(geometry: &CanvasConfig, seed: u64) -> Canvas {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = geometry.canvas_dims();
        Canvas::from_raw(ndarray::Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f64>()))
    }

    #[test]
    fn default_shapes() {
        let geometry = CanvasConfig::default();
        let w = BackboneWeights::init(&BackboneConfig::default(), &geometry, 0).unwrap();
        let c = random_canvas(&geometry, 1);
        let f = w.patch_embed(&c).unwrap();
        assert_eq!(f.features.dim(), (64, 128));
        assert_eq!(w.forward(&c).unwrap().logits.dim(), (64, 64));
    }

    #[test]
    fn zero_projection_embeds_to_positions() {
        let (cfg, geometry) = mini();
        let mut w = BackboneWeights::init(&cfg, &geometry, 0).unwrap();
        w.patch_embed.weight.fill(0.0);
        let c = Canvas::from_raw(ndarray::Array3::zeros((4, 4, 3)));
        assert_eq!(w.patch_embed(&c).unwrap().features, w.pos);
    }

    #[test]
    fn embedding_is_patch_local() {
        let geometry = CanvasConfig::default();
        let w = BackboneWeights::init(&BackboneConfig::default(), &geometry, 0).unwrap();
        let a = random_canvas(&geometry, 3);
        let b = a.with_quadrant(Quadrant::BR, &Image::filled(32, 32, 0.7).unwrap()).unwrap();
        let fa = w.patch_embed(&a).unwrap().features;
        let fb = w.patch_embed(&b).unwrap().features;
        let masked = masked_patch_indices(&geometry);
        for i in 0..64 {
            let same = fa.row(i) == fb.row(i);
            assert_eq!(same, !masked.contains(&i), "patch {i}");
        }
    }

    #[test]
    fn zero_branches_give_identity_block() {
        let (cfg, geometry) = mini();
        let mut w = BackboneWeights::init(&cfg, &geometry, 0).unwrap();
        w.blocks[0].zero_branches();
        let x = w.patch_embed(&random_canvas(&geometry, 2)).unwrap();
        assert_eq!(w.run_block(1, &x).unwrap().features, x.features);
    }

    #[test]
    fn out_of_order_block_rejected() {
        let (cfg, geometry) = mini();
        let w = BackboneWeights::init(&cfg, &geometry, 0).unwrap();
        let x = w.patch_embed(&random_canvas(&geometry, 2)).unwrap();
        assert!(matches!(w.run_block(2, &x), Err(Error::BlockOrder { .. })));
        assert!(matches!(w.predict_tokens(&x), Err(Error::BlockOrder { .. })));
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let (cfg, geometry) = mini();
        let w = BackboneWeights::init(&cfg, &geometry, 4).unwrap();
        let x = w.patch_embed(&random_canvas(&geometry, 5)).unwrap().features;
        let perm = [2, 0, 3, 1];
        let xp = x.select(Axis(0), &perm);
        let (y, _) = block_forward(&w.blocks[0], &x, 2);
        let (yp, _) = block_forward(&w.blocks[0], &xp, 2);
        let y_perm = y.select(Axis(0), &perm);
        for (a, b) in yp.iter().zip(y_perm.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradients_match_central_differences() {
        let (cfg, geometry) = mini();
        let w = BackboneWeights::init(&cfg, &geometry, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = normal_mat(&mut rng, 4, 8, 1.0);
        let probe = normal_mat(&mut rng, 4, 8, 1.0);
        let block = &w.blocks[0];
        let (_, cache) = block_forward(block, &x, 2);
        let mut g = block.clone();
        g.zero();
        let dx = block_backward(block, &cache, &probe, 2, Some(&mut g));
        check_input(&x, &dx, |xi| (&block_forward(block, xi, 2).0 * &probe).sum());
        check_params(block, &g, 1, |b| (&block_forward(b, &x, 2).0 * &probe).sum());
    }

    #[test]
    fn full_model_ce_gradients() {
        let (cfg, geometry) = mini();
        let w = BackboneWeights::init(&cfg, &geometry, 8).unwrap();
        let c = random_canvas(&geometry, 9);
        let patches = patchify(c.pixels(), 2);
        let target = TokenGrid::new(Array2::from_shape_vec((2, 2), vec![1, 4, 0, 2]).unwrap());
        let mask = vec![1, 3];
        let (logits, tr) = w.forward_patches(&patches);
        let (_, dl) = masked_ce_with_grad(&logits, &target, &mask).unwrap();
        let mut g = w.clone();
        g.zero();
        let dp = w.backward_patches(&tr, &dl, Some(&mut g));
        let loss = |m: &BackboneWeights, p: &Mat| masked_ce_loss(&m.forward_patches(p).0, &target, &mask).unwrap();
        check_params(&w, &g, 1, |m| loss(m, &patches));
        check_input(&patches, &dp, |p| loss(&w, p));
    }

    #[test]
    fn head_with_zero_weights_emits_bias() {
        let (cfg, geometry) = mini();
        let mut w = BackboneWeights::init(&cfg, &geometry, 0).unwrap();
        w.head.weight.fill(0.0);
        w.head.bias = ndarray::arr1(&[0.5, -1.0, 2.0, 0.0, 3.0]);
        let feats = w.forward_features(&random_canvas(&geometry, 1)).unwrap();
        let logits = w.predict_tokens(feats.last().unwrap()).unwrap();
        for row in logits.logits.rows() {
            assert_eq!(row, w.head.bias);
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = TokenLogits { logits: Array2::zeros((64, 64)) };
        let target = TokenGrid::new(Array2::from_shape_fn((8, 8), |(r, c)| (r * 8 + c) % 64));
        let mask = masked_patch_indices(&CanvasConfig::default());
        let l = masked_ce_loss(&logits, &target, &mask).unwrap();
        assert!((l - 64f64.ln()).abs() < 1e-12);
        assert!((l - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn hand_case_two_positions() {
        let logits = TokenLogits { logits: ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]) };
        let target = TokenGrid::new(ndarray::arr2(&[[0, 1]]));
        let l = masked_ce_loss(&logits, &target, &[0, 1]).unwrap();
        let e = std::f64::consts::E;
        assert!((l + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let target = TokenGrid::new(ndarray::arr2(&[[2, 0, 1]]));
        let mut prev = f64::INFINITY;
        for gap in [1.0, 5.0, 10.0, 20.0] {
            let logits = TokenLogits {
                logits: Array2::from_shape_fn((3, 4), |(i, k)| if k == target.at(i) { gap } else { 0.0 }),
            };
            let l = masked_ce_loss(&logits, &target, &[0, 1, 2]).unwrap();
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn empty_mask_rejected() {
        let logits = TokenLogits { logits: Array2::zeros((2, 2)) };
        let target = TokenGrid::new(ndarray::arr2(&[[0, 1]]));
        assert!(matches!(masked_ce_loss(&logits, &target, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn truncated_forward_matches_prefix() {
        let (cfg, geometry) = mini();
        let w = BackboneWeights::init(&cfg, &geometry, 3).unwrap();
        let c = random_canvas(&geometry, 4);
        let all = w.forward_features(&c).unwrap();
        let mut one = w.clone();
        one.blocks.truncate(1);
        let prefix = one.forward_features(&c).unwrap();
        assert_eq!(prefix[1], all[1]);
    }

    #[test]
    fn masked_quadrant_is_br() {
        let geometry = CanvasConfig::default();
        assert_eq!(masked_patch_indices(&geometry), quadrant_patch_indices(&geometry, Quadrant::BR));
    }
}
