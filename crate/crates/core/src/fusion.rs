//! Multi-branch inpainting: a trainable mainstream fed the holistic canvas,
//! guided by frozen auxiliary branches through per-block cross-attention
//! (FUSE) modules over a contiguous block range.
//!
//! A FUSE module at block `i` computes
//!
//! ```text
//! Q = Wq LN(p_m)    K = Wk LN([p_g1; p_g2])    V = Wv [p_g1; p_g2]
//! p_m' = p_m + Wo Attn(Q, K, V)
//! ```
//!
//! with `Wo` zero at init, so an untrained model is exactly the backbone.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    block_backward, block_forward, decode_masked, masked_ce_with_grad, BackboneWeights, BlockCache, FeatureSequence,
    TokenLogits,
};
use crate::canvas::{masked_patch_indices, patchify, Canvas, CanvasConfig, Image};
use crate::error::{Error, Result};
use crate::nn::{mha_backward, mha_forward, nest, nest_mut, AttnCache, LayerNorm, Linear, LnCache, Mat, Params};
use crate::prompt_gen::{build_fused_canvas, condense, PgWeights};
use crate::retrieval::PromptGroups;
use crate::tokenizer::{Codebook, TokenGrid};
use crate::train::{run_sgd, SgdConfig};

const FUSE_MATCH_SCALE: f64 = 1.5;

/// Inclusive 1-based block range `[down, up]`, or empty (fusion disabled).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionRange {
    bounds: Option<(usize, usize)>,
}

impl FusionRange {
    pub fn new(down: usize, up: usize) -> Result<Self> {
        if down == 0 || down > up {
            return Err(Error::InvalidValue(format!("fusion range [{down}, {up}] must satisfy 1 <= N_down <= N_up")));
        }
        Ok(Self { bounds: Some((down, up)) })
    }

    pub fn empty() -> Self {
        Self { bounds: None }
    }

    /// Range of `width` blocks centred on `center`; `[8, 14]` is center 11,
    /// width 7. Width 0 is the empty range.
    pub fn centered(center: usize, width: usize) -> Result<Self> {
        if width == 0 {
            return Ok(Self::empty());
        }
        let half = width / 2;
        if center <= half {
            return Err(Error::InvalidValue(format!("fusion center {center} too small for width {width}")));
        }
        let down = center - half;
        Self::new(down, down + width - 1)
    }

    pub fn bounds(&self) -> Option<(usize, usize)> {
        self.bounds
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_none()
    }

    pub fn len(&self) -> usize {
        self.bounds.map_or(0, |(d, u)| u - d + 1)
    }

    pub fn contains(&self, block: usize) -> bool {
        self.bounds.is_some_and(|(d, u)| (d..=u).contains(&block))
    }

    pub fn check_depth(&self, depth: usize) -> Result<()> {
        match self.bounds {
            Some((_, up)) if up > depth => {
                Err(Error::InvalidValue(format!("fusion range ends at block {up} but depth is {depth}")))
            }
            _ => Ok(()),
        }
    }

    fn slot(&self, block: usize) -> Option<usize> {
        self.bounds.filter(|_| self.contains(block)).map(|(d, _)| block - d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    Separate,
    /// One projection serves Q, K and V.
    All,
    /// K and V share a projection.
    KeyValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuseMode {
    pub sharing: Sharing,
    pub cross_attention: bool,
    pub residual: bool,
}

impl Default for FuseMode {
    fn default() -> Self {
        Self { sharing: Sharing::Separate, cross_attention: true, residual: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseBlock {
    pub ln_q: LayerNorm,
    pub ln_k: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy)]
enum Role {
    Q,
    K,
    V,
}

impl FuseBlock {
    /// Q, K and V start as the same scaled identity, so attention initially
    /// follows feature similarity; the output projection starts at zero.
    fn init(d: usize) -> Self {
        let mut m = Linear::identity(d);
        m.weight *= FUSE_MATCH_SCALE;
        Self {
            ln_q: LayerNorm::new(d),
            ln_k: LayerNorm::new(d),
            q: m.clone(),
            k: m.clone(),
            v: Linear::identity(d),
            out: Linear::zeros(d, d),
        }
    }

    fn proj(&self, sharing: Sharing, role: Role) -> &Linear {
        match (sharing, role) {
            (_, Role::Q) | (Sharing::All, _) => &self.q,
            (_, Role::K) | (Sharing::KeyValue, Role::V) => &self.k,
            (Sharing::Separate, Role::V) => &self.v,
        }
    }

    fn proj_mut(&mut self, sharing: Sharing, role: Role) -> &mut Linear {
        match (sharing, role) {
            (_, Role::Q) | (Sharing::All, _) => &mut self.q,
            (_, Role::K) | (Sharing::KeyValue, Role::V) => &mut self.k,
            (Sharing::Separate, Role::V) => &mut self.v,
        }
    }
}

impl Params for FuseBlock {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = nest("ln_q", self.ln_q.tensors());
        out.extend(nest("ln_k", self.ln_k.tensors()));
        out.extend(nest("q", self.q.tensors()));
        out.extend(nest("k", self.k.tensors()));
        out.extend(nest("v", self.v.tensors()));
        out.extend(nest("out", self.out.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = nest_mut("ln_q", self.ln_q.tensors_mut());
        out.extend(nest_mut("ln_k", self.ln_k.tensors_mut()));
        out.extend(nest_mut("q", self.q.tensors_mut()));
        out.extend(nest_mut("k", self.k.tensors_mut()));
        out.extend(nest_mut("v", self.v.tensors_mut()));
        out.extend(nest_mut("out", self.out.tensors_mut()));
        out
    }
}

/// One FUSE block per fused backbone block.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseParams {
    pub range: FusionRange,
    pub heads: usize,
    pub mode: FuseMode,
    pub blocks: Vec<FuseBlock>,
}

impl FuseParams {
    pub fn init(embed_dim: usize, heads: usize, range: FusionRange, mode: FuseMode, seed: u64) -> Result<Self> {
        if heads == 0 || embed_dim % heads != 0 {
            return Err(Error::InvalidValue(format!("fuse heads {heads} must divide embed dim {embed_dim}")));
        }
        let _ = seed;
        let blocks = (0..range.len()).map(|_| FuseBlock::init(embed_dim)).collect();
        Ok(Self { range, heads, mode, blocks })
    }

    pub fn block(&self, i: usize) -> Option<&FuseBlock> {
        self.range.slot(i).map(|s| &self.blocks[s])
    }
}

impl Params for FuseParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (j, b) in self.blocks.iter().enumerate() {
            out.extend(nest(&format!("fuse.{j}"), b.tensors()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (j, b) in self.blocks.iter_mut().enumerate() {
            out.extend(nest_mut(&format!("fuse.{j}"), b.tensors_mut()));
        }
        out
    }
}

struct FuseCache {
    ln_q: LnCache,
    hq: Mat,
    guide: Mat,
    ln_k: LnCache,
    hk: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Option<AttnCache>,
    ctx: Mat,
}

fn concat_rows(parts: &[&Mat]) -> Mat {
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    concatenate(Axis(0), &views).expect("equal widths")
}

fn fuse_forward(b: &FuseBlock, mode: FuseMode, heads: usize, main: &Mat, guides: &[&Mat]) -> (Mat, FuseCache) {
    let (hq, ln_q) = b.ln_q.forward(main);
    let guide = concat_rows(guides);
    let (hk, ln_k) = b.ln_k.forward(&guide);
    let q = b.proj(mode.sharing, Role::Q).forward(&hq);
    let k = b.proj(mode.sharing, Role::K).forward(&hk);
    let v = b.proj(mode.sharing, Role::V).forward(&guide);
    let (ctx, attn) = if mode.cross_attention {
        let (ctx, a) = mha_forward(&q, &k, &v, heads);
        (ctx, Some(a))
    } else {
        let mean = v.mean_axis(Axis(0)).expect("nonempty guidance");
        (Array2::from_shape_fn(main.dim(), |(_, c)| mean[c]), None)
    };
    let delta = b.out.forward(&ctx);
    let y = if mode.residual { main + &delta } else { delta };
    (y, FuseCache { ln_q, hq, guide, ln_k, hk, q, k, v, attn, ctx })
}

/// Returns the mainstream gradient; parameter gradients go to `g`.
fn fuse_backward(b: &FuseBlock, mode: FuseMode, heads: usize, c: &FuseCache, dy: &Mat, g: Option<&mut FuseBlock>) -> Mat {
    let s = mode.sharing;
    let mut g = g;
    let dctx = b.out.backward(&c.ctx, dy, g.as_deref_mut().map(|g| &mut g.out));
    let (dq, dk, dv) = match &c.attn {
        Some(a) => mha_backward(&c.q, &c.k, &c.v, a, &dctx, heads),
        None => {
            let col = dctx.sum_axis(Axis(0)) / c.v.nrows() as f64;
            let dv = Array2::from_shape_fn(c.v.dim(), |(_, j)| col[j]);
            (Array2::zeros(c.q.dim()), Array2::zeros(c.k.dim()), dv)
        }
    };
    let dhq = b.proj(s, Role::Q).backward(&c.hq, &dq, g.as_deref_mut().map(|g| g.proj_mut(s, Role::Q)));
    let dhk = b.proj(s, Role::K).backward(&c.hk, &dk, g.as_deref_mut().map(|g| g.proj_mut(s, Role::K)));
    if let Some(g) = g.as_deref_mut() {
        b.proj(s, Role::V).backward_params(&c.guide, &dv, g.proj_mut(s, Role::V));
        b.ln_k.backward(&c.ln_k, &dhk, Some(&mut g.ln_k));
    }
    let mut dmain = b.ln_q.backward(&c.ln_q, &dhq, g.map(|g| &mut g.ln_q));
    if mode.residual {
        dmain += dy;
    }
    dmain
}

/// One FUSE application at block `i` with the high- and low-similarity
/// guidance features of the same block.
pub fn fuse_step(
    i: usize,
    mainstream: &FeatureSequence,
    g1: &FeatureSequence,
    g2: &FeatureSequence,
    fp: &FuseParams,
) -> Result<FeatureSequence> {
    for s in [mainstream, g1, g2] {
        if s.block_index != i {
            return Err(Error::BlockOrder { requested: i, found: s.block_index });
        }
        if s.features.dim() != mainstream.features.dim() {
            return Err(Error::Shape(format!("guidance {:?} vs mainstream {:?}", s.features.dim(), mainstream.features.dim())));
        }
    }
    let b = fp.block(i).ok_or_else(|| Error::InvalidValue(format!("block {i} lies outside the fusion range")))?;
    if b.q.weight.nrows() != mainstream.features.ncols() {
        return Err(Error::Shape("fuse width does not match the features".into()));
    }
    let (features, _) = fuse_forward(b, fp.mode, fp.heads, &mainstream.features, &[&g1.features, &g2.features]);
    Ok(FeatureSequence { features, block_index: i })
}

/// Output of [`fuse_step`] together with the mainstream gradient and the
/// parameter gradient of `<dy, output>`. Guidance is frozen and gets none.
pub fn fuse_step_grad(
    i: usize,
    mainstream: &FeatureSequence,
    g1: &FeatureSequence,
    g2: &FeatureSequence,
    fp: &FuseParams,
    dy: &Mat,
) -> Result<(FeatureSequence, Mat, FuseParams)> {
    let out = fuse_step(i, mainstream, g1, g2, fp)?;
    if dy.dim() != out.features.dim() {
        return Err(Error::Shape(format!("upstream gradient {:?} vs output {:?}", dy.dim(), out.features.dim())));
    }
    let slot = fp.range.slot(i).expect("checked by fuse_step");
    let b = &fp.blocks[slot];
    let (_, cache) = fuse_forward(b, fp.mode, fp.heads, &mainstream.features, &[&g1.features, &g2.features]);
    let mut grad = fp.clone();
    grad.zero();
    let dmain = fuse_backward(b, fp.mode, fp.heads, &cache, dy, Some(&mut grad.blocks[slot]));
    Ok((out, dmain, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    OnlyG1,
    OnlyG2,
    G1AsMain,
    G2AsMain,
    RandomGuidance,
    FreezeBackbone,
    #[serde(rename = "shared_1mlp")]
    Shared1Mlp,
    #[serde(rename = "shared_2mlp")]
    Shared2Mlp,
    NoCrossAttention,
    NoResidual,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 11] = [
        Self::Full,
        Self::OnlyG1,
        Self::OnlyG2,
        Self::G1AsMain,
        Self::G2AsMain,
        Self::RandomGuidance,
        Self::FreezeBackbone,
        Self::Shared1Mlp,
        Self::Shared2Mlp,
        Self::NoCrossAttention,
        Self::NoResidual,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::OnlyG1 => "only_g1",
            Self::OnlyG2 => "only_g2",
            Self::G1AsMain => "g1_as_main",
            Self::G2AsMain => "g2_as_main",
            Self::RandomGuidance => "random_guidance",
            Self::FreezeBackbone => "freeze_backbone",
            Self::Shared1Mlp => "shared_1mlp",
            Self::Shared2Mlp => "shared_2mlp",
            Self::NoCrossAttention => "no_cross_attention",
            Self::NoResidual => "no_residual",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Which canvas feeds the mainstream and which feed the guidance slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Roles {
    Standard,
    OnlyG1,
    OnlyG2,
    G1AsMain,
    G2AsMain,
}

/// Everything a multi-branch run needs besides weights and data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiSetup {
    pub variant: AblationVariant,
    pub range: FusionRange,
    pub heads: usize,
    pub mode: FuseMode,
    pub roles: Roles,
    /// Seed of the noise replacing guidance features, when set.
    pub random_guidance: Option<u64>,
    pub train_mainstream: bool,
}

impl MultiSetup {
    pub fn full(range: FusionRange, heads: usize) -> Self {
        Self {
            variant: AblationVariant::Full,
            range,
            heads,
            mode: FuseMode::default(),
            roles: Roles::Standard,
            random_guidance: None,
            train_mainstream: true,
        }
    }
}

/// Configuration of ablation `v` derived from `base`.
pub fn make_variant(v: AblationVariant, base: &MultiSetup, noise_seed: u64) -> MultiSetup {
    let mut s = MultiSetup::full(base.range, base.heads);
    s.variant = v;
    match v {
        AblationVariant::Full => {}
        AblationVariant::OnlyG1 => s.roles = Roles::OnlyG1,
        AblationVariant::OnlyG2 => s.roles = Roles::OnlyG2,
        AblationVariant::G1AsMain => s.roles = Roles::G1AsMain,
        AblationVariant::G2AsMain => s.roles = Roles::G2AsMain,
        AblationVariant::RandomGuidance => s.random_guidance = Some(noise_seed),
        AblationVariant::FreezeBackbone => s.train_mainstream = false,
        AblationVariant::Shared1Mlp => s.mode.sharing = Sharing::All,
        AblationVariant::Shared2Mlp => s.mode.sharing = Sharing::KeyValue,
        AblationVariant::NoCrossAttention => s.mode.cross_attention = false,
        AblationVariant::NoResidual => s.mode.residual = false,
    }
    s
}

/// The holistic canvas and one canvas per guidance group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCanvases {
    pub main: Canvas,
    pub guides: Vec<Canvas>,
}

fn fused_canvas(group: &[crate::canvas::SupportPair], query: &Image, pg: &PgWeights, geometry: &CanvasConfig) -> Result<Canvas> {
    build_fused_canvas(&condense(group, query, pg, geometry)?, query, geometry)
}

/// `X_gm`, `X_g1`, `X_g2` from the three prompt groups.
pub fn build_group_canvases(groups: &PromptGroups, query: &Image, pg: &PgWeights, geometry: &CanvasConfig) -> Result<GroupCanvases> {
    Ok(GroupCanvases {
        main: fused_canvas(&groups.holistic, query, pg, geometry)?,
        guides: vec![fused_canvas(&groups.high, query, pg, geometry)?, fused_canvas(&groups.low, query, pg, geometry)?],
    })
}

/// Holistic canvas plus one guidance canvas per entry of `groups`.
pub fn build_canvases_from_groups(
    holistic: &[crate::canvas::SupportPair],
    groups: &[Vec<crate::canvas::SupportPair>],
    query: &Image,
    pg: &PgWeights,
    geometry: &CanvasConfig,
) -> Result<GroupCanvases> {
    Ok(GroupCanvases {
        main: fused_canvas(holistic, query, pg, geometry)?,
        guides: groups.iter().map(|g| fused_canvas(g, query, pg, geometry)).collect::<Result<_>>()?,
    })
}

/// Trainable part of the multi-branch model.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiWeights {
    pub main: BackboneWeights,
    pub fuse: FuseParams,
}

impl MultiWeights {
    /// Mainstream copied from `backbone`, FUSE output projections zero.
    pub fn init(backbone: &BackboneWeights, setup: &MultiSetup, seed: u64) -> Result<Self> {
        setup.range.check_depth(backbone.depth())?;
        let fuse = FuseParams::init(backbone.config.embed_dim, setup.heads, setup.range, setup.mode, seed)?;
        Ok(Self { main: backbone.clone(), fuse })
    }
}

impl Params for MultiWeights {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = nest("main", self.main.tensors());
        out.extend(self.fuse.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = nest_mut("main", self.main.tensors_mut());
        out.extend(self.fuse.tensors_mut());
        out
    }
}

/// Guidance features at each fused block: `streams[s][j]` is stream `s` at
/// block `N_down + j`.
#[derive(Debug, Clone)]
pub struct Guidance {
    streams: Vec<Vec<Mat>>,
}

impl Guidance {
    fn at(&self, slot: usize) -> Vec<&Mat> {
        self.streams.iter().map(|s| &s[slot]).collect()
    }
}

fn role_canvases<'a>(c: &'a GroupCanvases, roles: Roles) -> Result<(&'a Canvas, Vec<&'a Canvas>)> {
    let need = |n: usize| {
        if c.guides.len() < n {
            Err(Error::InvalidValue(format!("variant needs {n} guidance canvases, got {}", c.guides.len())))
        } else {
            Ok(())
        }
    };
    Ok(match roles {
        Roles::Standard => (&c.main, c.guides.iter().collect()),
        Roles::OnlyG1 => {
            need(1)?;
            (&c.main, vec![&c.guides[0], &c.guides[0]])
        }
        Roles::OnlyG2 => {
            need(2)?;
            (&c.main, vec![&c.guides[1], &c.guides[1]])
        }
        Roles::G1AsMain => {
            need(2)?;
            (&c.guides[0], vec![&c.main, &c.guides[1]])
        }
        Roles::G2AsMain => {
            need(2)?;
            (&c.guides[1], vec![&c.guides[0], &c.main])
        }
    })
}

/// Mainstream patch matrix and frozen guidance features for one sample.
/// `key` seeds the noise of the random-guidance variant.
pub fn prepare_inputs(
    canvases: &GroupCanvases,
    aux: &BackboneWeights,
    setup: &MultiSetup,
    key: u64,
) -> Result<(Mat, Guidance)> {
    let (main, guides) = role_canvases(canvases, setup.roles)?;
    if guides.is_empty() {
        return Err(Error::Empty("guidance canvases"));
    }
    let patches = patchify(main.pixels(), aux.config.patch_size);
    if patches.nrows() != aux.num_patches() {
        return Err(Error::Shape("canvas does not match the backbone geometry".into()));
    }
    let Some((down, up)) = setup.range.bounds() else {
        return Ok((patches, Guidance { streams: vec![Vec::new(); guides.len()] }));
    };
    let streams = match setup.random_guidance {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let shape = (aux.num_patches(), aux.config.embed_dim);
            guides
                .iter()
                .map(|_| (down..=up).map(|_| Array2::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng))).collect())
                .collect()
        }
        None => guides
            .iter()
            .map(|c| Ok(aux.forward_features(c)?.drain(down..=up).map(|f| f.features).collect()))
            .collect::<Result<_>>()?,
    };
    Ok((patches, Guidance { streams }))
}

struct MultiTrace {
    patches: Mat,
    blocks: Vec<BlockCache>,
    fuses: Vec<Option<FuseCache>>,
    head: (crate::nn::LnCache, Mat),
}

fn forward_cached(w: &MultiWeights, patches: &Mat, guidance: &Guidance, keep: bool) -> (TokenLogits, Vec<Mat>, MultiTrace) {
    let heads = w.main.config.heads;
    let mut x = w.main.embed_patches(patches);
    let mut feats = Vec::new();
    if !keep {
        feats.push(x.clone());
    }
    let mut blocks = Vec::with_capacity(w.main.depth());
    let mut fuses = Vec::with_capacity(w.main.depth());
    for (idx, b) in w.main.blocks.iter().enumerate() {
        let (y, c) = block_forward(b, &x, heads);
        blocks.push(c);
        x = y;
        match w.fuse.range.slot(idx + 1) {
            Some(slot) => {
                let (y, fc) = fuse_forward(&w.fuse.blocks[slot], w.fuse.mode, w.fuse.heads, &x, &guidance.at(slot));
                x = y;
                fuses.push(Some(fc));
            }
            None => fuses.push(None),
        }
        if !keep {
            feats.push(x.clone());
        }
    }
    let (logits, head) = w.main.head_forward(&x);
    (TokenLogits { logits }, feats, MultiTrace { patches: patches.clone(), blocks, fuses, head })
}

fn backward_cached(w: &MultiWeights, t: &MultiTrace, dlogits: &Mat, grad: &mut MultiWeights, train_main: bool) {
    let heads = w.main.config.heads;
    let mut dx = w.main.head_backward(&t.head, dlogits, train_main.then_some(&mut grad.main));
    for idx in (0..w.main.depth()).rev() {
        if let (Some(fc), Some(slot)) = (&t.fuses[idx], w.fuse.range.slot(idx + 1)) {
            dx = fuse_backward(&w.fuse.blocks[slot], w.fuse.mode, w.fuse.heads, fc, &dx, Some(&mut grad.fuse.blocks[slot]));
        }
        let g = train_main.then(|| &mut grad.main.blocks[idx]);
        dx = block_backward(&w.main.blocks[idx], &t.blocks[idx], &dx, heads, g);
    }
    if train_main {
        w.main.embed_backward(&t.patches, &dx, Some(&mut grad.main));
    }
}

fn check_setup(weights: &MultiWeights, aux: &BackboneWeights, setup: &MultiSetup) -> Result<()> {
    if weights.fuse.range != setup.range || weights.fuse.mode != setup.mode {
        return Err(Error::InvalidValue("fuse parameters were built for a different setup".into()));
    }
    if aux.config != weights.main.config || aux.num_patches() != weights.main.num_patches() {
        return Err(Error::Shape("auxiliary and mainstream backbones differ in shape".into()));
    }
    Ok(())
}

/// Logits of the mainstream on the prepared inputs.
pub fn multi_forward_prepared(weights: &MultiWeights, patches: &Mat, guidance: &Guidance) -> TokenLogits {
    forward_cached(weights, patches, guidance, true).0
}

/// Mainstream logits for the canvases in `canvases` (role assignment per
/// `setup`), with the frozen `aux` backbone producing guidance features.
pub fn multi_forward(
    canvases: &GroupCanvases,
    weights: &MultiWeights,
    aux: &BackboneWeights,
    setup: &MultiSetup,
    key: u64,
) -> Result<TokenLogits> {
    check_setup(weights, aux, setup)?;
    let (patches, guidance) = prepare_inputs(canvases, aux, setup, key)?;
    Ok(multi_forward_prepared(weights, &patches, &guidance))
}

/// Mainstream features after the embedding and after every block (FUSE
/// included where applied).
pub fn multi_features(
    canvases: &GroupCanvases,
    weights: &MultiWeights,
    aux: &BackboneWeights,
    setup: &MultiSetup,
    key: u64,
) -> Result<Vec<FeatureSequence>> {
    check_setup(weights, aux, setup)?;
    let (patches, guidance) = prepare_inputs(canvases, aux, setup, key)?;
    let feats = forward_cached(weights, &patches, &guidance, false).1;
    Ok(feats.into_iter().enumerate().map(|(block_index, features)| FeatureSequence { features, block_index }).collect())
}

/// Decoded bottom-right quadrant of the mainstream prediction.
pub fn predict_label(
    canvases: &GroupCanvases,
    weights: &MultiWeights,
    aux: &BackboneWeights,
    setup: &MultiSetup,
    key: u64,
    cb: &Codebook,
    geometry: &CanvasConfig,
) -> Result<Image> {
    let logits = multi_forward(canvases, weights, aux, setup, key)?;
    decode_masked(&logits, geometry, cb)
}

/// One multi-branch training example.
#[derive(Debug, Clone)]
pub struct MultiSample {
    pub canvases: GroupCanvases,
    pub target: TokenGrid,
    pub key: u64,
}

/// Masked CE of the mainstream prediction on prepared inputs and its gradient
/// with respect to every mainstream and FUSE parameter.
pub fn multi_loss_grad(
    w: &MultiWeights,
    patches: &Mat,
    guidance: &Guidance,
    target: &TokenGrid,
    mask: &[usize],
) -> Result<(f64, MultiWeights)> {
    let mut grad = w.clone();
    grad.zero();
    let loss = multi_sample_grad(w, patches, guidance, target, mask, true, &mut grad)?;
    Ok((loss, grad))
}

/// Loss and gradient for prepared inputs, accumulated into `grad`.
pub(crate) fn multi_sample_grad(
    w: &MultiWeights,
    patches: &Mat,
    guidance: &Guidance,
    target: &TokenGrid,
    mask: &[usize],
    train_main: bool,
    grad: &mut MultiWeights,
) -> Result<f64> {
    let (logits, _, trace) = forward_cached(w, patches, guidance, true);
    let (loss, dl) = masked_ce_with_grad(&logits, target, mask)?;
    backward_cached(w, &trace, &dl, grad, train_main);
    Ok(loss)
}

/// Trains mainstream, head and FUSE modules with masked CE against the true
/// label tokens. `aux` is only read; guidance features are computed once per
/// sample up front.
pub fn train_multi(
    samples: &[MultiSample],
    aux: &BackboneWeights,
    init: &BackboneWeights,
    setup: &MultiSetup,
    geometry: &CanvasConfig,
    sgd: &SgdConfig,
) -> Result<(MultiWeights, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Empty("multi-branch training samples"));
    }
    let mut errs = Vec::new();
    sgd.collect_errors("multi", &mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut weights = MultiWeights::init(init, setup, sgd.seed)?;
    check_setup(&weights, aux, setup)?;
    let prepared = samples.iter().map(|s| prepare_inputs(&s.canvases, aux, setup, s.key)).collect::<Result<Vec<_>>>()?;
    let mask = masked_patch_indices(geometry);
    let trace = run_sgd(
        &mut weights,
        samples.len(),
        sgd,
        |w, i, g| {
            let (patches, guidance) = &prepared[i];
            multi_sample_grad(w, patches, guidance, &samples[i].target, &mask, setup.train_mainstream, g)
        },
        |_| {},
    )?;
    Ok((weights, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::canvas::{compose_parts, Quadrant};
    use crate::nn::testing::{check_input, check_params};
    use rand::Rng;

    fn mini() -> (BackboneConfig, CanvasConfig) {
        (
            BackboneConfig { depth: 2, embed_dim: 8, heads: 2, mlp_ratio: 2.0, patch_size: 1, vocab: 5 },
            CanvasConfig { quadrant_h: 1, quadrant_w: 1, patch_size: 1, mask_fill: 0.0 },
        )
    }

    fn small() -> (BackboneConfig, CanvasConfig) {
        (
            BackboneConfig { depth: 4, embed_dim: 8, heads: 2, mlp_ratio: 2.0, patch_size: 2, vocab: 6 },
            CanvasConfig { quadrant_h: 4, quadrant_w: 4, patch_size: 2, mask_fill: 0.0 },
        )
    }

    fn rand_image(rng: &mut ChaCha8Rng, q: usize) -> Image {
        Image::new(ndarray::Array3::from_shape_fn((q, q, 3), |_| rng.gen::<f64>())).unwrap()
    }

    fn rand_canvases(rng: &mut ChaCha8Rng, g: &CanvasConfig, query: &Image) -> GroupCanvases {
        let q = g.quadrant_h;
        let mut mk = || compose_parts(&rand_image(rng, q), &rand_image(rng, q), query, g).unwrap();
        GroupCanvases { main: mk(), guides: vec![mk(), mk()] }
    }

    fn randomize_out(w: &mut MultiWeights, rng: &mut ChaCha8Rng) {
        for b in &mut w.fuse.blocks {
            b.out.weight.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            b.out.bias.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
            b.ln_q.gamma.mapv_inplace(|_| rng.gen_range(0.5..1.5));
            b.ln_k.beta.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
        }
    }

    #[test]
    fn centered_ranges() {
        assert_eq!(FusionRange::centered(11, 7).unwrap().bounds(), Some((8, 14)));
        assert!(FusionRange::centered(5, 0).unwrap().is_empty());
        assert_eq!(FusionRange::centered(3, 1).unwrap().bounds(), Some((3, 3)));
        assert!(FusionRange::new(0, 3).is_err());
        assert!(FusionRange::new(5, 4).is_err());
        assert!(FusionRange::new(8, 14).unwrap().check_depth(12).is_err());
    }

    #[test]
    fn variant_ids_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.as_str().parse::<AblationVariant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
        assert!(matches!("bogus".parse::<AblationVariant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn zero_projection_is_identity() {
        let (bc, g) = small();
        let backbone = BackboneWeights::init(&bc, &g, 0).unwrap();
        let setup = MultiSetup::full(FusionRange::new(2, 3).unwrap(), 2);
        let w = MultiWeights::init(&backbone, &setup, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let q = rand_image(&mut rng, 4);
            let c = rand_canvases(&mut rng, &g, &q);
            let multi = multi_forward(&c, &w, &backbone, &setup, 0).unwrap();
            assert_eq!(multi, backbone.forward(&c.main).unwrap());
        }
    }

    #[test]
    fn no_residual_at_init_zeroes_features() {
        let (bc, g) = small();
        let backbone = BackboneWeights::init(&bc, &g, 0).unwrap();
        let base = MultiSetup::full(FusionRange::new(2, 2).unwrap(), 2);
        let setup = make_variant(AblationVariant::NoResidual, &base, 0);
        let w = MultiWeights::init(&backbone, &setup, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_image(&mut rng, 4);
        let c = rand_canvases(&mut rng, &g, &q);
        let feats = multi_features(&c, &w, &backbone, &setup, 0).unwrap();
        assert!(feats[2].features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guidance_only_affects_fused_blocks_onward() {
        let (bc, g) = small();
        let backbone = BackboneWeights::init(&bc, &g, 0).unwrap();
        let setup = MultiSetup::full(FusionRange::new(3, 4).unwrap(), 2);
        let mut w = MultiWeights::init(&backbone, &setup, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        randomize_out(&mut w, &mut rng);
        let q = rand_image(&mut rng, 4);
        let a = rand_canvases(&mut rng, &g, &q);
        let mut b = a.clone();
        b.guides[0] = a.guides[0].with_quadrant(Quadrant::TL, &rand_image(&mut rng, 4)).unwrap();
        let fa = multi_features(&a, &w, &backbone, &setup, 0).unwrap();
        let fb = multi_features(&b, &w, &backbone, &setup, 0).unwrap();
        for i in 0..3 {
            assert_eq!(fa[i], fb[i]);
        }
        assert_ne!(fa[3], fb[3]);
    }

    #[test]
    fn fuse_step_ignores_guidance_token_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut fp = FuseParams::init(8, 2, FusionRange::new(1, 1).unwrap(), FuseMode::default(), 0).unwrap();
        fp.blocks[0].out = Linear::init(&mut rng, 8, 8);
        let seq = |rng: &mut ChaCha8Rng| FeatureSequence {
            features: Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0)),
            block_index: 1,
        };
        let (m, g1, g2) = (seq(&mut rng), seq(&mut rng), seq(&mut rng));
        let base = fuse_step(1, &m, &g1, &g2, &fp).unwrap();
        // swap g1 and g2 wholesale and reverse rows inside each
        let rev = |s: &FeatureSequence| FeatureSequence {
            features: s.features.slice(ndarray::s![..;-1, ..]).to_owned(),
            block_index: 1,
        };
        let perm = fuse_step(1, &m, &rev(&g2), &rev(&g1), &fp).unwrap();
        for (a, b) in base.features.iter().zip(perm.features.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(fuse_step(2, &m, &g1, &g2, &fp).is_err());
    }

    fn fuse_fd(mode: FuseMode) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut block = FuseBlock::init(8);
        block.q = Linear::init(&mut rng, 8, 8);
        block.k = Linear::init(&mut rng, 8, 8);
        block.v = Linear::init(&mut rng, 8, 8);
        block.out = Linear::init(&mut rng, 8, 8);
        block.ln_k.gamma.mapv_inplace(|_| rng.gen_range(0.5..1.5));
        let m = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
        let g1 = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
        let g2 = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
        let loss = |b: &FuseBlock, x: &Mat| (fuse_forward(b, mode, 2, x, &[&g1, &g2]).0 * &probe).sum();
        let (_, cache) = fuse_forward(&block, mode, 2, &m, &[&g1, &g2]);
        let mut grad = block.clone();
        grad.zero();
        let dm = fuse_backward(&block, mode, 2, &cache, &probe, Some(&mut grad));
        check_params(&block, &grad, 1, |b| loss(b, &m));
        check_input(&m, &dm, |x| loss(&block, x));
    }

    #[test]
    fn fuse_gradients_match_central_differences() {
        fuse_fd(FuseMode::default());
        for sharing in [Sharing::All, Sharing::KeyValue] {
            fuse_fd(FuseMode { sharing, ..FuseMode::default() });
        }
        fuse_fd(FuseMode { cross_attention: false, ..FuseMode::default() });
        fuse_fd(FuseMode { residual: false, ..FuseMode::default() });
    }

    #[test]
    fn full_composition_gradients_on_mini_config() {
        let (bc, g) = mini();
        assert_eq!(g.num_patches(), 4);
        let backbone = BackboneWeights::init(&bc, &g, 0).unwrap();
        let setup = MultiSetup::full(FusionRange::new(1, 2).unwrap(), 2);
        let mut w = MultiWeights::init(&backbone, &setup, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        randomize_out(&mut w, &mut rng);
        let q = rand_image(&mut rng, 1);
        let c = rand_canvases(&mut rng, &g, &q);
        let (patches, guidance) = prepare_inputs(&c, &backbone, &setup, 0).unwrap();
        let target = TokenGrid::new(ndarray::arr2(&[[0, 1], [2, 4]]));
        let mask = masked_patch_indices(&g);
        let mut grad = w.clone();
        grad.zero();
        multi_sample_grad(&w, &patches, &guidance, &target, &mask, true, &mut grad).unwrap();
        let loss = |p: &MultiWeights| {
            let logits = multi_forward_prepared(p, &patches, &guidance);
            crate::backbone::masked_ce_loss(&logits, &target, &mask).unwrap()
        };
        check_params(&w, &grad, 1, loss);
    }

    fn toy_samples(g: &CanvasConfig, n: usize, seed: u64) -> Vec<MultiSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let q = rand_image(&mut rng, g.quadrant_h);
                let (gr, gc) = g.patch_grid();
                let target = TokenGrid::new(Array2::from_shape_fn((gr, gc), |_| rng.gen_range(0..6)));
                MultiSample { canvases: rand_canvases(&mut rng, g, &q), target, key: i as u64 }
            })
            .collect()
    }

    #[test]
    fn training_respects_freezes_and_improves() {
        let (bc, g) = small();
        let backbone = BackboneWeights::init(&bc, &g, 0).unwrap();
        let aux_hash = backbone.weights_hash();
        let samples = toy_samples(&g, 8, 9);
        let sgd = SgdConfig { lr: 0.05, epochs: 10, batch: 4, seed: 0 };
        let setup = MultiSetup::full(FusionRange::new(2, 3).unwrap(), 2);
        let (w, trace) = train_multi(&samples, &backbone, &backbone, &setup, &g, &sgd).unwrap();
        assert_eq!(backbone.weights_hash(), aux_hash);
        assert!(trace.last().unwrap() < trace.first().unwrap());
        assert_ne!(w.main, backbone);

        let frozen = make_variant(AblationVariant::FreezeBackbone, &setup, 0);
        let (wf, _) = train_multi(&samples, &backbone, &backbone, &frozen, &g, &sgd).unwrap();
        assert_eq!(wf.main, backbone);
        assert_ne!(wf.fuse, MultiWeights::init(&backbone, &frozen, 0).unwrap().fuse);
    }

    #[test]
    fn random_guidance_is_reproducible() {
        let (bc, g) = small();
        let backbone = BackboneWeights::init(&bc, &g, 0).unwrap();
        let base = MultiSetup::full(FusionRange::new(2, 3).unwrap(), 2);
        let setup = make_variant(AblationVariant::RandomGuidance, &base, 42);
        let mut w = MultiWeights::init(&backbone, &setup, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        randomize_out(&mut w, &mut rng);
        let q = rand_image(&mut rng, 4);
        let c = rand_canvases(&mut rng, &g, &q);
        let a = multi_forward(&c, &w, &backbone, &setup, 3).unwrap();
        assert_eq!(a, multi_forward(&c, &w, &backbone, &setup, 3).unwrap());
        let other = rand_canvases(&mut rng, &g, &q);
        let swapped = GroupCanvases { main: c.main.clone(), guides: other.guides };
        assert_eq!(a, multi_forward(&swapped, &w, &backbone, &setup, 3).unwrap());
    }

    #[test]
    fn role_swaps_pick_the_right_canvas() {
        let (bc, g) = small();
        let backbone = BackboneWeights::init(&bc, &g, 0).unwrap();
        let base = MultiSetup::full(FusionRange::empty(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = rand_image(&mut rng, 4);
        let c = rand_canvases(&mut rng, &g, &q);
        let s = make_variant(AblationVariant::G1AsMain, &base, 0);
        let w = MultiWeights::init(&backbone, &s, 0).unwrap();
        assert_eq!(multi_forward(&c, &w, &backbone, &s, 0).unwrap(), backbone.forward(&c.guides[0]).unwrap());
        let s = make_variant(AblationVariant::G2AsMain, &base, 0);
        assert_eq!(multi_forward(&c, &w, &backbone, &s, 0).unwrap(), backbone.forward(&c.guides[1]).unwrap());
    }
}
