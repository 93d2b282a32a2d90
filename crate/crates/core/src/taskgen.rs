//! Procedural shape datasets for segmentation, detection and colorization.
//!
//! Each image is a textured background with one to three shapes of the
//! sample's class (circle, square or triangle), optionally plus distractor
//! shapes of another class. Foreground hue depends on the class so image
//! similarity carries class signal. Pixel values are quantized to 8 bits at
//! generation time, so PNG storage round-trips exactly.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canvas::{Image, Label, LabelKind, SupportPair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Seg,
    Det,
    Color,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Seg => "seg",
            Self::Det => "det",
            Self::Color => "color",
        }
    }

    pub fn label_kind(&self) -> LabelKind {
        match self {
            Self::Seg => LabelKind::SegMask,
            Self::Det => LabelKind::DetBoxmask,
            Self::Color => LabelKind::ColorTarget,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(Self::Seg),
            "det" => Ok(Self::Det),
            "color" => Ok(Self::Color),
            _ => Err(Error::InvalidValue(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [Self::Circle, Self::Square, Self::Triangle];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub n_support: usize,
    pub n_query: usize,
    pub seed: u64,
    /// Side of each square image in pixels.
    pub size: usize,
    pub max_shapes: usize,
    pub max_distractors: usize,
    /// Shape half-extent range as a fraction of `size`.
    pub radius: (f64, f64),
    /// Amplitude of the per-pixel background noise.
    pub texture_noise: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::Seg,
            n_support: 256,
            n_query: 64,
            seed: 0,
            size: 32,
            max_shapes: 3,
            max_distractors: 1,
            radius: (0.12, 0.28),
            texture_noise: 0.05,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self, max_k: usize) -> Result<()> {
        let mut errs = Vec::new();
        self.collect_errors("task", max_k, &mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub(crate) fn collect_errors(&self, path: &str, max_k: usize, errs: &mut Vec<String>) {
        if self.n_support == 0 {
            errs.push(format!("{path}.n_support: must be positive"));
        }
        if self.n_support < max_k {
            errs.push(format!("{path}.n_support: must be at least K = {max_k}"));
        }
        if self.size < 4 {
            errs.push(format!("{path}.size: must be at least 4"));
        }
        if self.max_shapes == 0 {
            errs.push(format!("{path}.max_shapes: must be positive"));
        }
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            errs.push(format!("{path}.radius: need 0 < min <= max <= 0.5"));
        }
        if !(0.0..=0.5).contains(&self.texture_noise) {
            errs.push(format!("{path}.texture_noise: must lie in [0, 0.5]"));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub color: [f64; 3],
    pub foreground: bool,
}

impl Shape {
    /// Coverage test at the pixel centre `(x + 0.5, y + 0.5)`.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.r * self.r,
            ShapeKind::Square => dx.abs() <= self.r && dy.abs() <= self.r,
            // apex up, base at cy + r spanning 2r
            ShapeKind::Triangle => dy >= -self.r && dy <= self.r && dx.abs() <= (dy + self.r) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f64; 3],
    pub stripe: [f64; 3],
    pub freq: f64,
    pub angle: f64,
    pub phase: f64,
    pub noise_seed: u64,
    pub noise: f64,
}

/// Everything needed to re-render one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub class: ShapeKind,
    pub background: Background,
    /// Painted in order; later shapes occlude earlier ones.
    pub shapes: Vec<Shape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub image: Image,
    pub label: Label,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: TaskSpec,
    pub seed: u64,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub support: Vec<SupportPair>,
    pub queries: Vec<QuerySample>,
    pub manifest: Manifest,
    /// Scene of every support sample followed by every query; empty after
    /// loading from disk.
    pub scenes: Vec<Scene>,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Luminance replicated to three channels, quantized to 8 bits.
pub fn to_grayscale(img: &Image) -> Image {
    let px = img.pixels();
    let (h, w) = img.dims();
    Image::from_fn(h, w, |y, x, _| quantize(luminance([px[[y, x, 0]], px[[y, x, 1]], px[[y, x, 2]]])))
        .expect("luminance of unit values is in [0, 1]")
}

fn class_hue(class: ShapeKind) -> [f64; 3] {
    match class {
        ShapeKind::Circle => [0.9, 0.3, 0.2],
        ShapeKind::Square => [0.2, 0.8, 0.3],
        ShapeKind::Triangle => [0.25, 0.35, 0.95],
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn sample_shape(rng: &mut ChaCha8Rng, spec: &TaskSpec, kind: ShapeKind, color: [f64; 3], foreground: bool) -> Shape {
    let s = spec.size as f64;
    let r = rng.gen_range(spec.radius.0..=spec.radius.1) * s;
    let margin = r.min(s / 2.0 - 1.0);
    Shape {
        kind,
        cx: rng.gen_range(margin..=s - margin),
        cy: rng.gen_range(margin..=s - margin),
        r,
        color,
        foreground,
    }
}

fn sample_scene(rng: &mut ChaCha8Rng, spec: &TaskSpec) -> Scene {
    let class = ShapeKind::ALL[rng.gen_range(0..3)];
    let background = Background {
        base: [rng.gen_range(0.05..0.45), rng.gen_range(0.05..0.45), rng.gen_range(0.05..0.45)],
        stripe: [rng.gen_range(0.0..0.15), rng.gen_range(0.0..0.15), rng.gen_range(0.0..0.15)],
        freq: rng.gen_range(0.1..0.6),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        noise_seed: rng.gen(),
        noise: spec.texture_noise,
    };
    let n_fg = match spec.task {
        TaskKind::Det => 1,
        _ => rng.gen_range(1..=spec.max_shapes),
    };
    let n_dis = rng.gen_range(0..=spec.max_distractors);
    let mut shapes: Vec<Shape> = (0..n_fg)
        .map(|_| {
            let c = jitter(rng, class_hue(class), 0.1);
            sample_shape(rng, spec, class, c, true)
        })
        .collect();
    for _ in 0..n_dis {
        let others: Vec<_> = ShapeKind::ALL.into_iter().filter(|k| *k != class).collect();
        let kind = others[rng.gen_range(0..others.len())];
        let c = jitter(rng, class_hue(kind), 0.1);
        let sh = sample_shape(rng, spec, kind, c, false);
        // distractors go behind the foreground
        shapes.insert(0, sh);
    }
    Scene { class, background, shapes }
}

/// Pixel image of a scene.
pub fn render_image(scene: &Scene, size: usize) -> Image {
    let bg = &scene.background;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(bg.noise_seed);
    let (ca, sa) = (bg.angle.cos(), bg.angle.sin());
    let mut px = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let t = (bg.freq * (x as f64 * ca + y as f64 * sa) + bg.phase).sin();
            for c in 0..3 {
                let n = if bg.noise > 0.0 { noise_rng.gen_range(-bg.noise..=bg.noise) } else { 0.0 };
                px[[y, x, c]] = bg.base[c] + bg.stripe[c] * t + n;
            }
        }
    }
    for sh in &scene.shapes {
        for y in 0..size {
            for x in 0..size {
                if sh.covers(y, x) {
                    for c in 0..3 {
                        px[[y, x, c]] = sh.color[c];
                    }
                }
            }
        }
    }
    Image::new(px.mapv(quantize)).expect("quantized values are in [0, 1]")
}

/// Visible foreground mask: the topmost shape at each pixel is foreground.
pub fn render_mask(scene: &Scene, size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for sh in &scene.shapes {
        for y in 0..size {
            for x in 0..size {
                if sh.covers(y, x) {
                    mask[y * size + x] = sh.foreground;
                }
            }
        }
    }
    mask
}

fn mask_image(mask: &[bool], size: usize) -> Image {
    Image::from_fn(size, size, |y, x, _| f64::from(u8::from(mask[y * size + x]))).expect("binary")
}

/// Minimal filled rectangle covering every set pixel of `mask`.
pub fn bounding_box(mask: &[bool], size: usize) -> Vec<bool> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / size, i % size);
        b = Some(match b {
            None => (y, y, x, x),
            Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
        });
    }
    let mut out = vec![false; size * size];
    if let Some((y0, y1, x0, x1)) = b {
        for y in y0..=y1 {
            for x in x0..=x1 {
                out[y * size + x] = true;
            }
        }
    }
    out
}

/// Input image and label of a scene for the given task.
pub fn render_sample(scene: &Scene, task: TaskKind, size: usize) -> Result<(Image, Label)> {
    let color = render_image(scene, size);
    match task {
        TaskKind::Seg => Ok((color, Label::new(mask_image(&render_mask(scene, size), size), LabelKind::SegMask)?)),
        TaskKind::Det => {
            let bx = bounding_box(&render_mask(scene, size), size);
            Ok((color, Label::new(mask_image(&bx, size), LabelKind::DetBoxmask)?))
        }
        TaskKind::Color => Ok((to_grayscale(&color), Label::new(color, LabelKind::ColorTarget)?)),
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn image_bytes(img: &Image) -> Vec<u8> {
    img.pixels().iter().map(|v| (v * 255.0).round() as u8).collect()
}

fn content_hash(support: &[SupportPair], queries: &[QuerySample]) -> String {
    let mut h = Sha256::new();
    for p in support {
        h.update(p.id.to_le_bytes());
        h.update(image_bytes(&p.image));
        h.update(image_bytes(p.label.image()));
    }
    for q in queries {
        h.update(q.id.to_le_bytes());
        h.update(image_bytes(&q.image));
        h.update(image_bytes(q.label.image()));
    }
    hex::encode(h.finalize())
}

/// Generates the dataset of `spec`. Support ids are `0..n_support`, query ids
/// follow. Sample `i` draws from its own RNG stream, and a sample whose image
/// repeats an earlier one (or whose object vanished under occlusion) is
/// redrawn from the next attempt of the same stream.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate(1)?;
    let total = spec.n_support + spec.n_query;
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let mut scenes = Vec::with_capacity(total);
    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        let mut rng = sample_rng(spec.seed, i as u64);
        loop {
            let scene = sample_scene(&mut rng, spec);
            if !render_mask(&scene, spec.size).iter().any(|&m| m) {
                continue;
            }
            let (img, lbl) = render_sample(&scene, spec.task, spec.size)?;
            if seen.insert(image_bytes(&img)) {
                scenes.push(scene);
                samples.push((img, lbl));
                break;
            }
        }
    }
    let mut support = Vec::with_capacity(spec.n_support);
    let mut queries = Vec::with_capacity(spec.n_query);
    for (i, (img, lbl)) in samples.into_iter().enumerate() {
        if i < spec.n_support {
            support.push(SupportPair::new(img, lbl, i as u64)?);
        } else {
            queries.push(QuerySample { image: img, label: lbl, id: i as u64 });
        }
    }
    let manifest = Manifest { spec: spec.clone(), seed: spec.seed, content_hash: content_hash(&support, &queries) };
    Ok(Dataset { support, queries, manifest, scenes })
}

pub fn gen_segmentation(spec: &TaskSpec) -> Result<Dataset> {
    generate(&TaskSpec { task: TaskKind::Seg, ..spec.clone() })
}

pub fn gen_detection(spec: &TaskSpec) -> Result<Dataset> {
    generate(&TaskSpec { task: TaskKind::Det, ..spec.clone() })
}

pub fn gen_colorization(spec: &TaskSpec) -> Result<Dataset> {
    generate(&TaskSpec { task: TaskKind::Color, ..spec.clone() })
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = img.dims();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, image_bytes(img)).expect("buffer matches dims");
    buf.save(path)?;
    Ok(())
}

fn load_png(path: &Path) -> Result<Image> {
    let buf = image::open(path)?.to_rgb8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let px = Array3::from_shape_vec((h, w, 3), buf.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect())
        .expect("rgb buffer");
    Image::new(px)
}

pub fn task_dir(root: &Path, task: TaskKind) -> PathBuf {
    root.join("data").join(task.as_str())
}

/// Writes `<root>/data/<task>/{support,query}/pair_NNNNNN_{img,lbl}.png` and
/// `<root>/data/<task>/manifest.json`.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<PathBuf> {
    let dir = task_dir(root, ds.manifest.spec.task);
    let split = |name: &str, items: Vec<(&Image, &Image, u64)>| -> Result<()> {
        let d = dir.join(name);
        fs::create_dir_all(&d)?;
        for (img, lbl, id) in items {
            save_png(img, &d.join(format!("pair_{id:06}_img.png")))?;
            save_png(lbl, &d.join(format!("pair_{id:06}_lbl.png")))?;
        }
        Ok(())
    };
    split("support", ds.support.iter().map(|p| (&p.image, p.label.image(), p.id)).collect())?;
    split("query", ds.queries.iter().map(|q| (&q.image, q.label.image(), q.id)).collect())?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&ds.manifest)?)?;
    Ok(dir)
}

/// Reads a dataset written by [`save_dataset`] and checks its content hash.
pub fn load_dataset(root: &Path, task: TaskKind) -> Result<Dataset> {
    let dir = task_dir(root, task);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let kind = manifest.spec.task.label_kind();
    let read = |split: &str, id: u64| -> Result<(Image, Label)> {
        let d = dir.join(split);
        let img = load_png(&d.join(format!("pair_{id:06}_img.png")))?;
        let lbl = Label::new(load_png(&d.join(format!("pair_{id:06}_lbl.png")))?, kind)?;
        Ok((img, lbl))
    };
    let spec = &manifest.spec;
    let support = (0..spec.n_support as u64)
        .map(|id| read("support", id).and_then(|(img, lbl)| SupportPair::new(img, lbl, id)))
        .collect::<Result<Vec<_>>>()?;
    let queries = (spec.n_support as u64..(spec.n_support + spec.n_query) as u64)
        .map(|id| read("query", id).map(|(image, label)| QuerySample { image, label, id }))
        .collect::<Result<Vec<_>>>()?;
    let hash = content_hash(&support, &queries);
    if hash != manifest.content_hash {
        return Err(Error::InvalidValue(format!("dataset content hash {hash} does not match manifest")));
    }
    Ok(Dataset { support, queries, manifest, scenes: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: TaskKind) -> TaskSpec {
        TaskSpec { task, n_support: 24, n_query: 8, seed: 3, ..TaskSpec::default() }
    }

    #[test]
    fn same_seed_same_dataset() {
        for task in [TaskKind::Seg, TaskKind::Det, TaskKind::Color] {
            let a = generate(&small(task)).unwrap();
            let b = generate(&small(task)).unwrap();
            assert_eq!(a, b);
            let c = generate(&TaskSpec { seed: 4, ..small(task) }).unwrap();
            assert_ne!(a.manifest.content_hash, c.manifest.content_hash);
        }
    }

    #[test]
    fn zero_queries() {
        let ds = gen_segmentation(&TaskSpec { n_query: 0, ..small(TaskKind::Seg) }).unwrap();
        assert!(ds.queries.is_empty());
        assert_eq!(ds.support.len(), 24);
    }

    #[test]
    fn rerender_reproduces_labels() {
        for task in [TaskKind::Seg, TaskKind::Det, TaskKind::Color] {
            let ds = generate(&small(task)).unwrap();
            let labels = ds.support.iter().map(|p| &p.label).chain(ds.queries.iter().map(|q| &q.label));
            for (scene, lbl) in ds.scenes.iter().zip(labels) {
                let (_, again) = render_sample(scene, task, 32).unwrap();
                assert_eq!(&again, lbl);
            }
        }
    }

    #[test]
    fn detection_box_is_minimal_superset() {
        let ds = gen_detection(&small(TaskKind::Det)).unwrap();
        for (scene, p) in ds.scenes.iter().zip(&ds.support) {
            let mask = render_mask(scene, 32);
            let bx = p.label.image().pixels();
            let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
            let mut area = 0;
            for y in 0..32 {
                for x in 0..32 {
                    if mask[y * 32 + x] {
                        area += 1;
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                    }
                }
            }
            let mut box_area = 0;
            for y in 0..32 {
                for x in 0..32 {
                    let inside = (y0..=y1).contains(&y) && (x0..=x1).contains(&x);
                    assert_eq!(bx[[y, x, 0]] == 1.0, inside);
                    box_area += usize::from(inside);
                }
            }
            assert!(box_area >= area);
            assert_eq!(scene.shapes.iter().filter(|s| s.foreground).count(), 1);
        }
    }

    #[test]
    fn grayscale_contract() {
        assert!((luminance([1.0, 0.0, 0.0]) - 0.299).abs() < 1e-15);
        let ds = gen_colorization(&small(TaskKind::Color)).unwrap();
        for p in &ds.support {
            for px in p.image.pixels().rows() {
                assert!(px[0] == px[1] && px[1] == px[2]);
            }
            assert_eq!(to_grayscale(&p.image), p.image);
            assert_eq!(to_grayscale(p.label.image()), p.image);
        }
    }

    #[test]
    fn queries_do_not_repeat_support() {
        let ds = generate(&small(TaskKind::Seg)).unwrap();
        for q in &ds.queries {
            assert!(ds.support.iter().all(|p| p.image != q.image));
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&TaskSpec { n_support: 5, n_query: 2, ..small(TaskKind::Det) }).unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        assert!(path.join("support/pair_000004_lbl.png").exists());
        assert!(path.join("query/pair_000005_img.png").exists());
        let back = load_dataset(dir.path(), TaskKind::Det).unwrap();
        assert_eq!(back.support, ds.support);
        assert_eq!(back.queries, ds.queries);
        assert_eq!(back.manifest, ds.manifest);
    }

    #[test]
    fn spec_validation_lists_problems() {
        let bad = TaskSpec { n_support: 4, size: 2, radius: (0.3, 0.1), ..TaskSpec::default() };
        match bad.validate(16) {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
