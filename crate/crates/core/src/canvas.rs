//! Images, labels, support pairs and the 2x2 in-context canvas.
//!
//! A canvas stacks a prompt pair above the query:
//!
//! ```text
//! +--------------+--------------+
//! | prompt image | prompt label |
//! +--------------+--------------+
//! | query image  |  mask fill   |
//! +--------------+--------------+
//! ```
//!
//! Patch tokens are indexed row-major over the whole canvas patch grid, so the
//! bottom-right quadrant owns rows `gh/2..gh` and columns `gw/2..gw`.

use ndarray::{s, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB raster with values in `[0, 1]`, stored as `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image must be (H, W, 3), got ({h}, {w}, {c})")));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidValue(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    /// Builds an image without range validation. Callers guarantee `[0, 1]`.
    pub(crate) fn from_raw(pixels: Array3<f64>) -> Self {
        debug_assert_eq!(pixels.dim().2, 3);
        Self { pixels }
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((h, w, 3), value))
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        Self::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| f(y, x, c)))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    SegMask,
    DetBoxmask,
    ColorTarget,
}

/// A task label. Masks are stored as 3-channel images so every canvas quadrant
/// has the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    image: Image,
    kind: LabelKind,
}

impl Label {
    pub fn new(image: Image, kind: LabelKind) -> Result<Self> {
        match kind {
            LabelKind::ColorTarget => {}
            LabelKind::SegMask | LabelKind::DetBoxmask => {
                for px in image.pixels.rows() {
                    let v = px[0];
                    if (v != 0.0 && v != 1.0) || px[1] != v || px[2] != v {
                        return Err(Error::InvalidValue(
                            "mask pixels must be exactly 0 or 1 on every channel".into(),
                        ));
                    }
                }
                if kind == LabelKind::DetBoxmask && !is_single_rectangle(&image) {
                    return Err(Error::InvalidValue(
                        "box mask foreground must be one filled axis-aligned rectangle".into(),
                    ));
                }
            }
        }
        Ok(Self { image, kind })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }
}

fn is_single_rectangle(img: &Image) -> bool {
    let (h, w) = img.dims();
    let fg = |y: usize, x: usize| img.pixels[[y, x, 0]] == 1.0;
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if fg(y, x) {
                bounds = Some(match bounds {
                    None => (y, y, x, x),
                    Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
                });
            }
        }
    }
    match bounds {
        None => true,
        Some((y0, y1, x0, x1)) => (y0..=y1).all(|y| (x0..=x1).all(|x| fg(y, x))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportPair {
    pub image: Image,
    pub label: Label,
    pub id: u64,
}

impl SupportPair {
    pub fn new(image: Image, label: Label, id: u64) -> Result<Self> {
        if image.dims() != label.image().dims() {
            return Err(Error::Shape(format!(
                "pair {id}: image {:?} vs label {:?}",
                image.dims(),
                label.image().dims()
            )));
        }
        Ok(Self { image, label, id })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanvasConfig {
    pub quadrant_h: usize,
    pub quadrant_w: usize,
    pub patch_size: usize,
    pub mask_fill: f64,
}

impl Default for CanvasConfig {
    fn default() -> Self {
        Self { quadrant_h: 32, quadrant_w: 32, patch_size: 8, mask_fill: 0.0 }
    }
}

impl CanvasConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.collect_errors("geometry", &mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub(crate) fn collect_errors(&self, path: &str, errs: &mut Vec<String>) {
        if self.patch_size == 0 {
            errs.push(format!("{path}.patch_size: must be positive"));
            return;
        }
        if self.quadrant_h == 0 || self.quadrant_h % self.patch_size != 0 {
            errs.push(format!("{path}.quadrant_h: must be a positive multiple of patch_size"));
        }
        if self.quadrant_w == 0 || self.quadrant_w % self.patch_size != 0 {
            errs.push(format!("{path}.quadrant_w: must be a positive multiple of patch_size"));
        }
        if !(0.0..=1.0).contains(&self.mask_fill) {
            errs.push(format!("{path}.mask_fill: must lie in [0, 1]"));
        }
    }

    pub fn canvas_dims(&self) -> (usize, usize) {
        (2 * self.quadrant_h, 2 * self.quadrant_w)
    }

    /// Patch grid of the full canvas as `(rows, cols)`.
    pub fn patch_grid(&self) -> (usize, usize) {
        (2 * self.quadrant_h / self.patch_size, 2 * self.quadrant_w / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.patch_grid();
        r * c
    }

    pub fn patches_per_quadrant(&self) -> usize {
        (self.quadrant_h / self.patch_size) * (self.quadrant_w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    TL,
    TR,
    BL,
    BR,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TL, Quadrant::TR, Quadrant::BL, Quadrant::BR];

    /// `(row, col)` offset of the quadrant in units of quadrants.
    fn offset(self) -> (usize, usize) {
        match self {
            Quadrant::TL => (0, 0),
            Quadrant::TR => (0, 1),
            Quadrant::BL => (1, 0),
            Quadrant::BR => (1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pixels: Array3<f64>,
    masked_region: Quadrant,
}

impl Canvas {
    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn masked_region(&self) -> Quadrant {
        self.masked_region
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }

    pub(crate) fn from_raw(pixels: Array3<f64>) -> Self {
        Self { pixels, masked_region: Quadrant::BR }
    }

    /// Returns a copy with `which` overwritten by `img`.
    pub fn with_quadrant(&self, which: Quadrant, img: &Image) -> Result<Canvas> {
        let (h, w) = self.dims();
        if img.dims() != (h / 2, w / 2) {
            return Err(Error::Shape(format!(
                "quadrant is {:?}, image is {:?}",
                (h / 2, w / 2),
                img.dims()
            )));
        }
        let mut out = self.clone();
        quadrant_view_mut(&mut out.pixels, which).assign(img.pixels());
        Ok(out)
    }
}

fn quadrant_slice(h: usize, w: usize, which: Quadrant) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let (qr, qc) = which.offset();
    (qr * h..(qr + 1) * h, qc * w..(qc + 1) * w)
}

fn quadrant_view_mut(pixels: &mut Array3<f64>, which: Quadrant) -> ndarray::ArrayViewMut3<'_, f64> {
    let (h, w, _) = pixels.dim();
    let (rows, cols) = quadrant_slice(h / 2, w / 2, which);
    pixels.slice_mut(s![rows, cols, ..])
}

pub(crate) fn quadrant_view(pixels: &Array3<f64>, which: Quadrant) -> ArrayView3<'_, f64> {
    let (h, w, _) = pixels.dim();
    let (rows, cols) = quadrant_slice(h / 2, w / 2, which);
    pixels.slice(s![rows, cols, ..])
}

/// Places a prompt pair and the query on a canvas, bottom-right filled with
/// `cfg.mask_fill`.
pub fn compose_canvas(pair: &SupportPair, query: &Image, cfg: &CanvasConfig) -> Result<Canvas> {
    compose_parts(&pair.image, pair.label.image(), query, cfg)
}

/// Same layout as [`compose_canvas`] from loose parts; used for fused prompts.
pub fn compose_parts(
    prompt_image: &Image,
    prompt_label: &Image,
    query: &Image,
    cfg: &CanvasConfig,
) -> Result<Canvas> {
    cfg.validate()?;
    let q = (cfg.quadrant_h, cfg.quadrant_w);
    for (name, img) in [("prompt image", prompt_image), ("prompt label", prompt_label), ("query", query)] {
        if img.dims() != q {
            return Err(Error::Shape(format!("{name} is {:?}, expected quadrant {q:?}", img.dims())));
        }
    }
    let (ch, cw) = cfg.canvas_dims();
    let mut pixels = Array3::from_elem((ch, cw, 3), cfg.mask_fill);
    quadrant_view_mut(&mut pixels, Quadrant::TL).assign(prompt_image.pixels());
    quadrant_view_mut(&mut pixels, Quadrant::TR).assign(prompt_label.pixels());
    quadrant_view_mut(&mut pixels, Quadrant::BL).assign(query.pixels());
    Ok(Canvas { pixels, masked_region: Quadrant::BR })
}

pub fn extract_quadrant(canvas: &Canvas, which: Quadrant) -> Image {
    Image::from_raw(quadrant_view(&canvas.pixels, which).to_owned())
}

/// Row-major patch indices of the masked (bottom-right) quadrant.
pub fn masked_patch_indices(cfg: &CanvasConfig) -> Vec<usize> {
    quadrant_patch_indices(cfg, Quadrant::BR)
}

pub fn quadrant_patch_indices(cfg: &CanvasConfig, which: Quadrant) -> Vec<usize> {
    let (gr, gc) = cfg.patch_grid();
    let (qr, qc) = which.offset();
    let (hr, hc) = (gr / 2, gc / 2);
    let mut out = Vec::with_capacity(hr * hc);
    for r in qr * hr..(qr + 1) * hr {
        for c in qc * hc..(qc + 1) * hc {
            out.push(r * gc + c);
        }
    }
    out
}

/// Flattens `(H, W, 3)` into `(num_patches, p*p*3)` with patches row-major and
/// each patch laid out as `(py, px, channel)`.
pub fn patchify(pixels: &Array3<f64>, patch: usize) -> Array2<f64> {
    let (h, w, c) = pixels.dim();
    let (gr, gc) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut out = Array2::zeros((gr * gc, dim));
    for pr in 0..gr {
        for pc in 0..gc {
            let mut row = out.row_mut(pr * gc + pc);
            let mut k = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..c {
                        row[k] = pixels[[pr * patch + y, pc * patch + x, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Array2<f64>, h: usize, w: usize, patch: usize) -> Array3<f64> {
    let gc = w / patch;
    let mut out = Array3::zeros((h, w, 3));
    for (i, row) in patches.rows().into_iter().enumerate() {
        let (pr, pc) = (i / gc, i % gc);
        let mut k = 0;
        for y in 0..patch {
            for x in 0..patch {
                for ch in 0..3 {
                    out[[pr * patch + y, pc * patch + x, ch]] = row[k];
                    k += 1;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(fill: f64) -> CanvasConfig {
        CanvasConfig { quadrant_h: 2, quadrant_w: 2, patch_size: 1, mask_fill: fill }
    }

    fn flat_pair(img: f64, lbl: f64, n: usize) -> SupportPair {
        let image = Image::filled(n, n, img).unwrap();
        let label = Label::new(Image::filled(n, n, lbl).unwrap(), LabelKind::SegMask).unwrap();
        SupportPair::new(image, label, 0).unwrap()
    }

    #[test]
    fn compose_hand_case() {
        let cfg = tiny_cfg(0.0);
        let pair = flat_pair(0.2, 1.0, 2);
        let query = Image::filled(2, 2, 0.5).unwrap();
        let canvas = compose_canvas(&pair, &query, &cfg).unwrap();
        assert_eq!(canvas.dims(), (4, 4));
        let expect = [[0.2, 1.0], [0.5, 0.0]];
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    assert_eq!(canvas.pixels()[[y, x, c]], expect[y / 2][x / 2]);
                }
            }
        }
        assert!(extract_quadrant(&canvas, Quadrant::BR).pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_round_trip() {
        let cfg = CanvasConfig::default();
        let image = Image::from_fn(32, 32, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0).unwrap();
        let label = Label::new(
            Image::from_fn(32, 32, |y, _, _| if y < 10 { 1.0 } else { 0.0 }).unwrap(),
            LabelKind::SegMask,
        )
        .unwrap();
        let pair = SupportPair::new(image.clone(), label.clone(), 3).unwrap();
        let query = Image::from_fn(32, 32, |y, x, _| ((x + y) % 5) as f64 / 4.0).unwrap();
        let canvas = compose_canvas(&pair, &query, &cfg).unwrap();
        assert_eq!(extract_quadrant(&canvas, Quadrant::TL), image);
        assert_eq!(&extract_quadrant(&canvas, Quadrant::TR), label.image());
        assert_eq!(extract_quadrant(&canvas, Quadrant::BL), query);
        assert_eq!(canvas.masked_region(), Quadrant::BR);
    }

    #[test]
    fn bottom_row_identical_when_fill_matches_query() {
        let cfg = tiny_cfg(0.5);
        let canvas = compose_canvas(&flat_pair(0.1, 0.0, 2), &Image::filled(2, 2, 0.5).unwrap(), &cfg).unwrap();
        assert_eq!(extract_quadrant(&canvas, Quadrant::BL), extract_quadrant(&canvas, Quadrant::BR));
    }

    #[test]
    fn compose_rejects_dimension_mismatch() {
        let cfg = tiny_cfg(0.0);
        let err = compose_canvas(&flat_pair(0.2, 1.0, 2), &Image::filled(3, 3, 0.5).unwrap(), &cfg);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn masked_indices_default_geometry() {
        let idx = masked_patch_indices(&CanvasConfig::default());
        assert_eq!(idx.len(), 16);
        for i in idx {
            let (r, c) = (i / 8, i % 8);
            assert!((4..8).contains(&r) && (4..8).contains(&c));
        }
    }

    #[test]
    fn masked_indices_single_patch_quadrant() {
        let cfg = CanvasConfig { quadrant_h: 8, quadrant_w: 8, patch_size: 8, mask_fill: 0.0 };
        assert_eq!(masked_patch_indices(&cfg), vec![3]);
    }

    #[test]
    fn quadrant_indices_partition_grid() {
        let cfg = CanvasConfig { quadrant_h: 16, quadrant_w: 24, patch_size: 8, mask_fill: 0.0 };
        let mut all: Vec<usize> = Quadrant::ALL.iter().flat_map(|q| quadrant_patch_indices(&cfg, *q)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..cfg.num_patches()).collect::<Vec<_>>());
    }

    #[test]
    fn label_rejects_non_binary_mask() {
        let img = Image::filled(2, 2, 0.5).unwrap();
        assert!(Label::new(img.clone(), LabelKind::SegMask).is_err());
        assert!(Label::new(img, LabelKind::ColorTarget).is_ok());
    }

    #[test]
    fn box_label_requires_rectangle() {
        let l_shape = Image::from_fn(4, 4, |y, x, _| if y == 0 || x == 0 { 1.0 } else { 0.0 }).unwrap();
        assert!(Label::new(l_shape, LabelKind::DetBoxmask).is_err());
        let rect = Image::from_fn(4, 4, |y, x, _| if (1..3).contains(&y) && x < 3 { 1.0 } else { 0.0 }).unwrap();
        assert!(Label::new(rect, LabelKind::DetBoxmask).is_ok());
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::filled(2, 2, 1.5).is_err());
        assert!(Image::filled(2, 2, f64::NAN).is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let px = Array3::from_shape_fn((16, 24, 3), |(y, x, c)| (y * 100 + x * 3 + c) as f64);
        let p = patchify(&px, 8);
        assert_eq!(p.dim(), (6, 192));
        assert_eq!(unpatchify(&p, 16, 24, 8), px);
    }
}
