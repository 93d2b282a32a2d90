//! Similarity retrieval of support pairs and grouping of the ranked list.

use ndarray::{Array1, Array3, Axis};

use crate::backbone::BackboneWeights;
use crate::canvas::{CanvasConfig, Canvas, Image, SupportPair};
use crate::error::{Error, Result};

/// L2-normalized image descriptor. `degenerate` marks an all-zero feature mean,
/// in which case `vector` is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Array1<f64>,
    pub degenerate: bool,
}

impl Embedding {
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.vector.dot(&other.vector).clamp(-1.0, 1.0)
    }
}

/// Mean final-block feature of the image tiled into all four quadrants.
pub fn embed_image(img: &Image, weights: &BackboneWeights, geometry: &CanvasConfig) -> Result<Embedding> {
    let (h, w) = img.dims();
    if (h, w) != (geometry.quadrant_h, geometry.quadrant_w) {
        return Err(Error::Shape(format!("image {:?} vs quadrant {:?}", (h, w), (geometry.quadrant_h, geometry.quadrant_w))));
    }
    let px = img.pixels();
    let tiled = Array3::from_shape_fn((2 * h, 2 * w, 3), |(y, x, c)| px[[y % h, x % w, c]]);
    let feats = weights.forward_features(&Canvas::from_raw(tiled))?;
    let last = &feats.last().expect("at least the embedding").features;
    let mean = last.mean_axis(Axis(0)).expect("nonempty patch set");
    let norm = mean.dot(&mean).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Ok(Embedding { vector: Array1::zeros(mean.len()), degenerate: true });
    }
    Ok(Embedding { vector: mean / norm, degenerate: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub pair: SupportPair,
    pub score: f64,
}

/// Top-K support pairs, scores non-increasing, ties by ascending pair id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSupport {
    pub entries: Vec<RankedEntry>,
    pub query_id: u64,
}

impl RankedSupport {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pairs(&self) -> Vec<SupportPair> {
        self.entries.iter().map(|e| e.pair.clone()).collect()
    }
}

/// Precomputed support embeddings so many queries can be ranked cheaply.
#[derive(Debug, Clone)]
pub struct SupportIndex {
    embeddings: Vec<Embedding>,
}

impl SupportIndex {
    pub fn build(support: &[SupportPair], weights: &BackboneWeights, geometry: &CanvasConfig) -> Result<Self> {
        let embeddings = support.iter().map(|p| embed_image(&p.image, weights, geometry)).collect::<Result<_>>()?;
        Ok(Self { embeddings })
    }

    pub fn from_embeddings(embeddings: Vec<Embedding>) -> Self {
        Self { embeddings }
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    /// Ranks `support` against `query`, skipping the pair whose id equals
    /// `exclude` (leave-one-out when support pairs double as training queries).
    pub fn rank(
        &self,
        query: &Embedding,
        support: &[SupportPair],
        k: usize,
        query_id: u64,
        exclude: Option<u64>,
    ) -> Result<RankedSupport> {
        let mut scored: Vec<(f64, usize)> = support
            .iter()
            .enumerate()
            .filter(|(_, p)| Some(p.id) != exclude)
            .map(|(i, _)| (query.cosine(&self.embeddings[i]), i))
            .collect();
        if k == 0 || k > scored.len() {
            return Err(Error::TopK { k, available: scored.len() });
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(support[a.1].id.cmp(&support[b.1].id)));
        let entries = scored
            .into_iter()
            .take(k)
            .map(|(score, i)| RankedEntry { pair: support[i].clone(), score })
            .collect();
        Ok(RankedSupport { entries, query_id })
    }
}

/// Cosine ranking of `support` by similarity to `query`.
pub fn select_top_k(
    query: &Image,
    support: &[SupportPair],
    k: usize,
    weights: &BackboneWeights,
    geometry: &CanvasConfig,
) -> Result<RankedSupport> {
    if k == 0 || k > support.len() {
        return Err(Error::TopK { k, available: support.len() });
    }
    let index = SupportIndex::build(support, weights, geometry)?;
    let q = embed_image(query, weights, geometry)?;
    index.rank(&q, support, k, 0, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptGroups {
    /// All K pairs in rank order.
    pub holistic: Vec<SupportPair>,
    /// First `K_g1` ranks.
    pub high: Vec<SupportPair>,
    /// Last `K_g2` ranks.
    pub low: Vec<SupportPair>,
}

pub fn mpgs_partition(ranked: &RankedSupport, k_g1: usize, k_g2: usize) -> Result<PromptGroups> {
    let k = ranked.len();
    if k_g1 == 0 || k_g2 == 0 || k_g1 + k_g2 > k {
        return Err(Error::GroupSize { k, k_g1, k_g2 });
    }
    let all = ranked.pairs();
    Ok(PromptGroups { high: all[..k_g1].to_vec(), low: all[k - k_g2..].to_vec(), holistic: all })
}

/// Splits the ranking into `n` contiguous, near-equal groups (earlier groups
/// take the remainder). Used by the group-count ablation.
pub fn split_even(ranked: &RankedSupport, n: usize) -> Result<Vec<Vec<SupportPair>>> {
    let k = ranked.len();
    if n == 0 || n > k {
        return Err(Error::GroupSize { k, k_g1: n, k_g2: 0 });
    }
    let all = ranked.pairs();
    let (base, extra) = (k / n, k % n);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for g in 0..n {
        let len = base + usize::from(g < extra);
        out.push(all[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::{Label, LabelKind};

    fn pair(id: u64) -> SupportPair {
        let img = Image::filled(2, 2, 0.5).unwrap();
        let lbl = Label::new(Image::filled(2, 2, 0.0).unwrap(), LabelKind::SegMask).unwrap();
        SupportPair::new(img, lbl, id).unwrap()
    }

    fn ranked(k: usize) -> RankedSupport {
        RankedSupport {
            entries: (0..k).map(|i| RankedEntry { pair: pair(i as u64), score: 1.0 - i as f64 * 0.01 }).collect(),
            query_id: 0,
        }
    }

    fn ids(v: &[SupportPair]) -> Vec<u64> {
        v.iter().map(|p| p.id).collect()
    }

    #[test]
    fn default_group_sizes() {
        let g = mpgs_partition(&ranked(16), 8, 8).unwrap();
        assert_eq!(ids(&g.high), (0..8).collect::<Vec<_>>());
        assert_eq!(ids(&g.low), (8..16).collect::<Vec<_>>());
        assert_eq!(ids(&g.holistic), (0..16).collect::<Vec<_>>());
        let g = mpgs_partition(&ranked(8), 4, 4).unwrap();
        assert_eq!(ids(&g.high), vec![0, 1, 2, 3]);
        assert_eq!(ids(&g.low), vec![4, 5, 6, 7]);
    }

    #[test]
    fn degenerate_pair_split() {
        let g = mpgs_partition(&ranked(2), 1, 1).unwrap();
        assert_eq!(ids(&g.high), vec![0]);
        assert_eq!(ids(&g.low), vec![1]);
    }

    #[test]
    fn oversized_groups_rejected() {
        assert!(matches!(mpgs_partition(&ranked(16), 10, 10), Err(Error::GroupSize { .. })));
        assert!(matches!(mpgs_partition(&ranked(4), 0, 2), Err(Error::GroupSize { .. })));
    }

    #[test]
    fn even_split_sizes() {
        let groups = split_even(&ranked(16), 4).unwrap();
        assert!(groups.iter().all(|g| g.len() == 4));
        assert_eq!(ids(&groups[3]), vec![12, 13, 14, 15]);
        let groups = split_even(&ranked(5), 2).unwrap();
        assert_eq!(ids(&groups[0]), vec![0, 1, 2]);
    }

    #[test]
    fn ties_rank_by_ascending_id() {
        let support: Vec<SupportPair> = [5u64, 2, 9, 1].iter().map(|&i| pair(i)).collect();
        let e = Embedding { vector: ndarray::arr1(&[1.0, 0.0]), degenerate: false };
        let index = SupportIndex::from_embeddings(vec![e.clone(); 4]);
        let r = index.rank(&e, &support, 4, 0, None).unwrap();
        assert_eq!(r.entries.iter().map(|e| e.pair.id).collect::<Vec<_>>(), vec![1, 2, 5, 9]);
        assert!(index.rank(&e, &support, 5, 0, None).is_err());
        let loo = index.rank(&e, &support, 3, 2, Some(2)).unwrap();
        assert_eq!(loo.entries.iter().map(|e| e.pair.id).collect::<Vec<_>>(), vec![1, 5, 9]);
    }
}
