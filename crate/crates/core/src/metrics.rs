//! Evaluation metrics and visualizations: cross-shot set consistency, a
//! block-matching dynamic-degree proxy, and y–t slices.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::subject_mask::SubjectMaskSet;
use crate::tensor::{norm_f64, cosine_with_norms, Tensor};

/// Maps one frame `P×C` and its subject mask to a feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn extract(&self, frame: &[f32], channels: usize, mask: &[bool]) -> Result<Vec<f32>>;
}

/// Zeroes background patches and mean-pools the remaining latent channels.
/// Non-semantic; it stands where a self-supervised image encoder would go.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaskedMeanPool;

impl FeatureExtractor for MaskedMeanPool {
    fn name(&self) -> &str {
        "masked-mean"
    }

    fn extract(&self, frame: &[f32], channels: usize, mask: &[bool]) -> Result<Vec<f32>> {
        if frame.len() != mask.len() * channels {
            return Err(Error::dims("masked-mean", &[frame.len()], &[mask.len(), channels]));
        }
        let mut acc = vec![0.0f64; channels];
        for (row, &on) in frame.chunks_exact(channels).zip(mask) {
            if on {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
        }
        let n = mask.len().max(1) as f64;
        Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
    }
}

#[derive(Clone)]
pub struct FeatureExtractorRegistry {
    entries: BTreeMap<String, Arc<dyn FeatureExtractor>>,
}

impl Default for FeatureExtractorRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register(Arc::new(MaskedMeanPool));
        r
    }
}

impl FeatureExtractorRegistry {
    pub fn register(&mut self, e: Arc<dyn FeatureExtractor>) {
        self.entries.insert(e.name().to_string(), e);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn FeatureExtractor>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::config(format!("unknown feature extractor `{name}`")))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    pub sem: f64,
    pub n: usize,
}

impl MeanSem {
    /// Mean and standard error (sample standard deviation over `√n`).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, sem: 0.0, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sem = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Self { mean, sem, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub set_consistency: MeanSem,
    /// Mean similarity of adjacent frames within each shot.
    pub subject_consistency: MeanSem,
    pub pair_count: usize,
    pub extractor: String,
}

/// `C(S·F, 2) − S·C(F, 2)`: frame pairs that span two different shots.
pub fn expected_pair_count(shots: usize, frames: usize) -> usize {
    let choose2 = |n: usize| n * n.saturating_sub(1) / 2;
    choose2(shots * frames) - shots * choose2(frames)
}

/// Cosine similarity where a zero vector scores 0 against anything.
fn feature_similarity(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        cosine_with_norms(a, na, b, nb)
    }
}

/// Mean pairwise feature similarity over every frame pair from different
/// shots, after masking out the background.
pub fn set_consistency(
    frames: &Tensor,
    masks: &SubjectMaskSet,
    extractor: &dyn FeatureExtractor,
    par: Parallelism,
) -> Result<ConsistencyReport> {
    let (s_n, f_n, p, c) = frames.dims4()?;
    if [masks.shots(), masks.frames(), masks.patches()] != [s_n, f_n, p] {
        return Err(Error::dims(
            "set_consistency masks",
            &[s_n, f_n, p],
            &[masks.shots(), masks.frames(), masks.patches()],
        ));
    }
    if s_n < 2 {
        return Err(Error::InsufficientShots(s_n));
    }
    let feats = par.try_map(s_n * f_n, |i| {
        let (s, f) = (i / f_n, i % f_n);
        extractor.extract(frames.block(&[s, f]), c, masks.mask(s, f))
    })?;
    let norms: Vec<f64> = feats.iter().map(|v| norm_f64(v)).collect();
    let sim = |i: usize, j: usize| feature_similarity(&feats[i], norms[i], &feats[j], norms[j]);

    // Pairs in lexicographic (i, j) order with i < j and different shots.
    let cross = par.map(s_n * f_n, |i| {
        ((i / f_n + 1) * f_n..s_n * f_n).map(|j| sim(i, j)).collect::<Vec<_>>()
    });
    let cross: Vec<f64> = cross.concat();
    let within: Vec<f64> = (0..s_n)
        .flat_map(|s| (0..f_n.saturating_sub(1)).map(move |f| (s * f_n + f, s * f_n + f + 1)))
        .map(|(i, j)| sim(i, j))
        .collect();
    Ok(ConsistencyReport {
        pair_count: cross.len(),
        set_consistency: MeanSem::of(&cross),
        subject_consistency: MeanSem::of(&within),
        extractor: extractor.name().to_string(),
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMatching {
    pub block: usize,
    pub radius: usize,
}

impl Default for BlockMatching {
    fn default() -> Self {
        Self { block: 8, radius: 4 }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicDegree {
    pub score: f64,
    pub dynamic: bool,
}

pub fn dynamic_degree(video: &Tensor, flow_threshold: f64) -> Result<DynamicDegree> {
    dynamic_degree_with(video, flow_threshold, BlockMatching::default())
}

/// Mean block-matching displacement between adjacent frames of `F×H×W`.
///
/// Blocks tile the frame from offset `r` so every candidate displacement in
/// `[−r, r]²` stays inside the frame; `r` shrinks when the frame is too small
/// to fit one block with its search window. SAD ties go to the smaller
/// displacement, then to the lexicographically smaller `(dy, dx)`.
pub fn dynamic_degree_with(video: &Tensor, flow_threshold: f64, bm: BlockMatching) -> Result<DynamicDegree> {
    let (f_n, h, w) = video.dims3()?;
    if f_n < 2 {
        return Err(Error::Precondition("dynamic degree needs at least two frames".into()));
    }
    let b = bm.block;
    if b == 0 || h < b || w < b {
        return Err(Error::config(format!("frame {h}×{w} smaller than block {b}")));
    }
    let r = bm.radius.min((h - b) / 2).min((w - b) / 2);
    let starts = |n: usize| (r..=n - b - r).step_by(b).collect::<Vec<_>>();
    let (ys, xs) = (starts(h), starts(w));
    let mut candidates: Vec<(i64, i64)> = Vec::new();
    for dy in -(r as i64)..=r as i64 {
        for dx in -(r as i64)..=r as i64 {
            candidates.push((dy, dx));
        }
    }
    candidates.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));

    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..f_n - 1 {
        let (a, nxt) = (video.block(&[f]), video.block(&[f + 1]));
        for &y in &ys {
            for &x in &xs {
                let mut best = (f64::INFINITY, 0.0);
                for &(dy, dx) in &candidates {
                    let (y2, x2) = ((y as i64 + dy) as usize, (x as i64 + dx) as usize);
                    let mut sad = 0.0f64;
                    for by in 0..b {
                        let ra = &a[(y + by) * w + x..(y + by) * w + x + b];
                        let rb = &nxt[(y2 + by) * w + x2..(y2 + by) * w + x2 + b];
                        sad += ra.iter().zip(rb).map(|(p, q)| (*p as f64 - *q as f64).abs()).sum::<f64>();
                    }
                    if sad < best.0 {
                        best = (sad, ((dy * dy + dx * dx) as f64).sqrt());
                    }
                }
                total += best.1;
                count += 1;
            }
        }
    }
    let score = total / count as f64;
    Ok(DynamicDegree {
        score,
        dynamic: score > flow_threshold,
    })
}

/// The `H×F` slice at one column of `F×H×W`. Without a column, picks the
/// column with the largest temporal variance summed over rows (lowest index
/// on ties).
pub fn yt_slice(video: &Tensor, column: Option<usize>) -> Result<(Tensor, usize)> {
    let (f_n, h, w) = video.dims3()?;
    if f_n == 0 || h == 0 || w == 0 {
        return Err(Error::Precondition("yt_slice needs a non-empty video".into()));
    }
    let col = match column {
        Some(c) if c >= w => {
            return Err(Error::Range {
                what: "yt_slice column",
                value: c as i64,
                lo: 0,
                hi: w as i64 - 1,
            })
        }
        Some(c) => c,
        None => {
            let scores = column_variances(video);
            let mut best = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            best
        }
    };
    let d = video.data();
    let slice = Tensor::from_fn(&[h, f_n], |i| d[(i % f_n) * h * w + (i / f_n) * w + col]);
    Ok((slice, col))
}

/// Per column, the population variance over frames summed over rows.
pub fn column_variances(video: &Tensor) -> Vec<f64> {
    let s = video.shape();
    let (f_n, h, w) = (s[0], s[1], s[2]);
    let d = video.data();
    (0..w)
        .map(|x| {
            (0..h)
                .map(|y| {
                    let vals = (0..f_n).map(|f| d[f * h * w + y * w + x] as f64);
                    let mean = vals.clone().sum::<f64>() / f_n as f64;
                    vals.map(|v| (v - mean).powi(2)).sum::<f64>() / f_n as f64
                })
                .sum()
        })
        .collect()
}

/// Nearest-upsampled images of one latent channel: `S×F×P×C` →
/// `S×F×(side·scale)×(side·scale)`.
pub fn render_frames(latents: &Tensor, side: usize, channel: usize, scale: usize) -> Result<Tensor> {
    let (s_n, f_n, p, c) = latents.dims4()?;
    if p != side * side {
        return Err(Error::dims("render_frames", latents.shape(), &[side, side]));
    }
    if channel >= c || scale == 0 {
        return Err(Error::config(format!("cannot render channel {channel} of {c} at scale {scale}")));
    }
    let n = side * scale;
    let d = latents.data();
    Ok(Tensor::from_fn(&[s_n, f_n, n, n], |i| {
        let (sf, rest) = (i / (n * n), i % (n * n));
        let (y, x) = (rest / n / scale, rest % n / scale);
        d[(sf * p + y * side + x) * c + channel]
    }))
}

/// Binary PGM (P5) bytes of an `H×W` image, min–max normalized to 0–255.
pub fn pgm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image.dims2()?;
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = (hi - lo) as f64;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| {
        if range > 0.0 {
            (((v - lo) as f64 / range) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    std::fs::write(path, pgm_bytes(image)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub mean: f64,
    pub sem: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn push(&mut self, metric: impl Into<String>, m: MeanSem) {
        self.rows.push(MetricRow {
            metric: metric.into(),
            mean: m.mean,
            sem: m.sem,
            n: m.n,
        });
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "metric,mean,sem,n")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.metric, r.mean, r.sem, r.n)?;
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}
