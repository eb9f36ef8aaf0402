//! Identity similarity between source and generated portraits.
//!
//! The embedder is a hand-built descriptor of the masked face region, not a
//! learned face-recognition network, so scores are only comparable within
//! this crate's corpus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, Mask};

pub const EMBEDDING_DIMS: usize = 64;
const BLOCKS: usize = 4;
const CELLS: usize = 2;
const ORIENTATION_BINS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.iter().map(|v| k * v).collect())
    }
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.0.len() != b.0.len() {
        return Err(Error::dims(format!("embedding lengths {} vs {}", a.0.len(), b.0.len())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector("cosine similarity of a zero embedding".into()));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn normalize_to(v: &mut [f64], target: f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x *= target / n);
    }
}

/// Splits `[lo, hi)` into `parts` contiguous ranges.
fn split(lo: usize, hi: usize, parts: usize) -> Vec<(usize, usize)> {
    let n = hi - lo;
    (0..parts).map(|i| (lo + i * n / parts, lo + (i + 1) * n / parts)).collect()
}

/// 16 mean-centred block means over the mask's bounding box followed by 48
/// gradient-orientation bins (2x2 cells, 12 bins each, magnitude weighted
/// and centred per cell). Each part gets a share of the unit norm
/// proportional to its length, so unstructured input spreads over all 64
/// dimensions. The result is invariant to `a * img + b` for `a > 0`.
pub fn toy_embed(img: &ImageGrid, mask: &Mask) -> Result<EmbeddingVector> {
    if !mask.matches(img.height(), img.width()) {
        return Err(Error::dims(format!(
            "mask {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            img.height(),
            img.width()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let luma = img.to_luma();
    let l = |y: usize, x: usize| luma.get(y, x, 0);

    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) > 0.0 {
                bbox = Some(match bbox {
                    None => (y, y + 1, x, x + 1),
                    Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y + 1), x0.min(x), x1.max(x + 1)),
                });
            }
        }
    }
    let (y0, y1, x0, x1) = bbox.ok_or_else(|| Error::EmptyMask("toy_embed needs a non-zero mask".into()))?;

    let (mut mass, mut total) = (0.0, 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            mass += mask.get(y, x);
            total += mask.get(y, x) * l(y, x);
        }
    }
    let global_mean = total / mass;

    let mut blocks = Vec::with_capacity(BLOCKS * BLOCKS);
    for &(by0, by1) in &split(y0, y1, BLOCKS) {
        for &(bx0, bx1) in &split(x0, x1, BLOCKS) {
            let (mut m, mut s) = (0.0, 0.0);
            for y in by0..by1 {
                for x in bx0..bx1 {
                    m += mask.get(y, x);
                    s += mask.get(y, x) * l(y, x);
                }
            }
            blocks.push(if m > 0.0 { s / m - global_mean } else { 0.0 });
        }
    }

    let mut hist = Vec::with_capacity(CELLS * CELLS * ORIENTATION_BINS);
    for &(cy0, cy1) in &split(y0, y1, CELLS) {
        for &(cx0, cx1) in &split(x0, x1, CELLS) {
            let mut bins = [0.0; ORIENTATION_BINS];
            for y in cy0..cy1 {
                for x in cx0..cx1 {
                    let wgt = mask.get(y, x);
                    if wgt == 0.0 {
                        continue;
                    }
                    let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
                    let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
                    // Sobel taps: near-isotropic response, so texture without
                    // structure does not favour the diagonals.
                    let gx = (l(ym, xp) + 2.0 * l(y, xp) + l(yp, xp)) - (l(ym, xm) + 2.0 * l(y, xm) + l(yp, xm));
                    let gy = (l(yp, xm) + 2.0 * l(yp, x) + l(yp, xp)) - (l(ym, xm) + 2.0 * l(ym, x) + l(ym, xp));
                    let mag = (gx * gx + gy * gy).sqrt();
                    if mag == 0.0 {
                        continue;
                    }
                    // Linear vote between the two nearest bin centres.
                    let pos = gy.atan2(gx).rem_euclid(std::f64::consts::PI) / std::f64::consts::PI * ORIENTATION_BINS as f64 - 0.5;
                    let lo = pos.floor();
                    let frac = pos - lo;
                    let b0 = (lo as isize).rem_euclid(ORIENTATION_BINS as isize) as usize;
                    let b1 = (b0 + 1) % ORIENTATION_BINS;
                    bins[b0] += wgt * mag * (1.0 - frac);
                    bins[b1] += wgt * mag * frac;
                }
            }
            let mean = bins.iter().sum::<f64>() / ORIENTATION_BINS as f64;
            hist.extend(bins.iter().map(|b| b - mean));
        }
    }

    let share = |n: usize| (n as f64 / EMBEDDING_DIMS as f64).sqrt();
    let (nb, nh) = (share(blocks.len()), share(hist.len()));
    normalize_to(&mut blocks, nb);
    normalize_to(&mut hist, nh);
    let mut v = blocks;
    v.extend(hist);
    normalize_to(&mut v, 1.0);
    debug_assert_eq!(v.len(), EMBEDDING_DIMS);
    Ok(EmbeddingVector(v))
}

pub struct IdPair<'a> {
    pub name: String,
    pub source: &'a ImageGrid,
    pub generated: &'a ImageGrid,
    pub mask: &'a Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub kind: String,
    pub index: usize,
    pub name: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub kind: String,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdReport {
    pub pairs: Vec<PairRecord>,
    pub summary: SummaryRecord,
}

impl IdReport {
    /// One JSON object per line: every pair, then the summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&serde_json::to_string(p).expect("record serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.summary).expect("summary serializes"));
        out.push('\n');
        out
    }
}

pub fn id_score_report(pairs: &[IdPair<'_>]) -> Result<IdReport> {
    if pairs.is_empty() {
        return Err(Error::param("pairs", "report needs at least one pair"));
    }
    let mut records = Vec::with_capacity(pairs.len());
    for (index, p) in pairs.iter().enumerate() {
        let a = toy_embed(p.source, p.mask)?;
        let b = toy_embed(p.generated, p.mask)?;
        records.push(PairRecord {
            kind: "pair".into(),
            index,
            name: p.name.clone(),
            similarity: cosine_similarity(&a, &b)?,
        });
    }
    let sims: Vec<f64> = records.iter().map(|r| r.similarity).collect();
    let summary = SummaryRecord {
        kind: "summary".into(),
        count: sims.len(),
        mean: sims.iter().sum::<f64>() / sims.len() as f64,
        min: sims.iter().copied().fold(f64::INFINITY, f64::min),
        max: sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(IdReport {
        pairs: records,
        summary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AestheticScore {
    /// No aesthetic predictor ships with this crate.
    Unavailable,
}

pub fn aesthetic_score(_img: &ImageGrid) -> AestheticScore {
    AestheticScore::Unavailable
}
