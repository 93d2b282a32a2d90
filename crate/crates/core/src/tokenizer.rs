//! Patch-palette vector quantizer used as the frozen tokenizer.
//!
//! Every `patch x patch x 3` block of an image is mapped to the index of its
//! nearest codebook row (squared Euclidean distance, lowest index on ties), and
//! decoding pastes the codebook rows back.

use std::collections::HashSet;

use ndarray::{Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::canvas::{patchify, unpatchify, Canvas, Image};
use crate::error::{Error, Result};

pub const KMEANS_ITERS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Array2<f64>,
    patch_size: usize,
}

impl Codebook {
    pub fn new(entries: Array2<f64>, patch_size: usize) -> Result<Self> {
        let (v, dim) = entries.dim();
        if v < 2 {
            return Err(Error::Codebook(format!("need at least 2 entries, got {v}")));
        }
        if dim != patch_size * patch_size * 3 {
            return Err(Error::Codebook(format!("entry width {dim} does not match patch size {patch_size}")));
        }
        if entries.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) {
            return Err(Error::Codebook("entries must be finite and within [0, 1]".into()));
        }
        let mut seen = HashSet::new();
        for row in entries.rows() {
            if !seen.insert(row_key(row)) {
                return Err(Error::Codebook("codebook rows must be pairwise distinct".into()));
            }
        }
        Ok(Self { entries, patch_size })
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn vocab_size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Index of the nearest entry; ties go to the lowest index.
    pub fn nearest(&self, patch: ArrayView1<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, row) in self.entries.rows().into_iter().enumerate() {
            let d: f64 = row.iter().zip(patch.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

fn row_key(row: ArrayView1<f64>) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    tokens: Array2<usize>,
}

impl TokenGrid {
    pub fn new(tokens: Array2<usize>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &Array2<usize> {
        &self.tokens
    }

    /// Row-major token at flattened patch index `i`.
    pub fn at(&self, i: usize) -> usize {
        let cols = self.tokens.ncols();
        self.tokens[[i / cols, i % cols]]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lloyd's k-means over all patches of `images`, seeded with k-means++ over the
/// distinct patches. Runs exactly [`KMEANS_ITERS`] iterations.
pub fn fit_codebook(images: &[Image], vocab: usize, patch_size: usize, seed: u64) -> Result<Codebook> {
    if images.is_empty() {
        return Err(Error::Empty("codebook training images"));
    }
    let mut rows: Vec<Array2<f64>> = Vec::with_capacity(images.len());
    for img in images {
        let (h, w) = img.dims();
        if h % patch_size != 0 || w % patch_size != 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by patch {patch_size}")));
        }
        rows.push(patchify(img.pixels(), patch_size));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let data = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal patch widths");

    let mut seen = HashSet::new();
    let distinct: Vec<usize> = (0..data.nrows()).filter(|&i| seen.insert(row_key(data.row(i)))).collect();
    if vocab > distinct.len() {
        return Err(Error::Codebook(format!(
            "vocabulary {vocab} exceeds the {} distinct patches available",
            distinct.len()
        )));
    }
    if vocab < 2 {
        return Err(Error::Codebook(format!("need at least 2 entries, got {vocab}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(&data, &distinct, vocab, &mut rng);
    let mut assign = vec![0usize; data.nrows()];
    let dim = data.ncols();

    for _ in 0..KMEANS_ITERS {
        let mut dists = vec![0.0; data.nrows()];
        for (i, row) in data.rows().into_iter().enumerate() {
            let (k, d) = nearest_with_dist(&centroids, row);
            assign[i] = k;
            dists[i] = d;
        }
        let mut sums = Array2::<f64>::zeros((vocab, dim));
        let mut counts = vec![0usize; vocab];
        for (i, row) in data.rows().into_iter().enumerate() {
            let k = assign[i];
            counts[k] += 1;
            let mut s = sums.row_mut(k);
            s += &row;
        }
        for k in 0..vocab {
            if counts[k] > 0 {
                let c = &sums.row(k) / counts[k] as f64;
                centroids.row_mut(k).assign(&c);
            } else {
                // empty cluster: move to the worst-served point
                let far = (0..data.nrows())
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("nonempty data");
                centroids.row_mut(k).assign(&data.row(far));
                dists[far] = 0.0;
            }
        }
    }
    centroids.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Codebook::new(centroids, patch_size)
}

fn kmeans_pp_init(data: &Array2<f64>, distinct: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut centroids = Array2::zeros((k, data.ncols()));
    let first = distinct[rng.gen_range(0..distinct.len())];
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = distinct.iter().map(|&i| sq_dist(data.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = None;
            for (j, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(j);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            // all remaining distinct points coincide with chosen centroids; cannot happen while k <= distinct
            unreachable!("k-means++ ran out of distinct points")
        };
        centroids.row_mut(c).assign(&data.row(distinct[pick]));
        for (j, &i) in distinct.iter().enumerate() {
            let d = sq_dist(data.row(i), centroids.row(c));
            if d < d2[j] {
                d2[j] = d;
            }
        }
    }
    centroids
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_with_dist(centroids: &Array2<f64>, row: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(row, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

pub fn encode_pixels(pixels: &Array3<f64>, cb: &Codebook) -> Result<TokenGrid> {
    let p = cb.patch_size();
    let (h, w, _) = pixels.dim();
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by patch {p}")));
    }
    let patches = patchify(pixels, p);
    let toks: Vec<usize> = patches.rows().into_iter().map(|r| cb.nearest(r)).collect();
    Ok(TokenGrid::new(Array2::from_shape_vec((h / p, w / p), toks).expect("grid size")))
}

pub fn encode(image: &Image, cb: &Codebook) -> Result<TokenGrid> {
    encode_pixels(image.pixels(), cb)
}

pub fn encode_canvas(canvas: &Canvas, cb: &Codebook) -> Result<TokenGrid> {
    encode_pixels(canvas.pixels(), cb)
}

pub fn decode(tokens: &TokenGrid, cb: &Codebook) -> Result<Image> {
    let p = cb.patch_size();
    let (gr, gc) = tokens.tokens.dim();
    let mut patches = Array2::zeros((gr * gc, cb.entries.ncols()));
    for (i, &t) in tokens.tokens.iter().enumerate() {
        if t >= cb.vocab_size() {
            return Err(Error::Codebook(format!("token {t} out of range for vocabulary {}", cb.vocab_size())));
        }
        patches.row_mut(i).assign(&cb.entries.row(t));
    }
    Ok(Image::from_raw(unpatchify(&patches, gr * p, gc * p, p)))
}
