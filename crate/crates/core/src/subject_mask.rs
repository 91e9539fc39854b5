//! Subject localization from the estimated clean latent.
//!
//! Each denoising step estimates `x̂0` from the noisy latent and the predicted
//! noise, scores every patch with a pluggable [`Segmenter`], and binarizes the
//! scores with Otsu's method over a 256-bin histogram.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::tensor::Tensor;

/// Cumulative signal rates `ᾱ_t` for `t ∈ [0, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Scaled-linear betas (`β` linear in `√β`), the latent-diffusion default.
    pub fn scaled_linear(total: u32, beta_start: f64, beta_end: f64) -> Self {
        let n = total as usize;
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let mut alphas = Vec::with_capacity(n + 1);
        alphas.push(1.0);
        let mut prod = 1.0f64;
        for j in 0..n {
            let frac = if n > 1 { j as f64 / (n - 1) as f64 } else { 0.0 };
            let beta = (a + (b - a) * frac).powi(2);
            prod *= 1.0 - beta;
            alphas.push(prod);
        }
        Self {
            alphas_cumprod: alphas,
        }
    }

    pub fn for_total_steps(total: u32) -> Self {
        Self::scaled_linear(total, 0.00085, 0.012)
    }

    pub fn from_alphas(alphas_cumprod: Vec<f64>) -> Result<Self> {
        let Some(&first) = alphas_cumprod.first() else {
            return Err(Error::config("empty noise schedule"));
        };
        if (first - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("alpha_bar_0 must be 1, got {first}")));
        }
        for w in alphas_cumprod.windows(2) {
            if w[1] > w[0] {
                return Err(Error::config("alpha_bar must be nonincreasing in t"));
            }
        }
        if alphas_cumprod.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::config("alpha_bar must lie in (0, 1]"));
        }
        Ok(Self { alphas_cumprod })
    }

    pub fn total_steps(&self) -> u32 {
        (self.alphas_cumprod.len() - 1) as u32
    }

    pub fn alpha_bar(&self, t: u32) -> Result<f64> {
        self.alphas_cumprod
            .get(t as usize)
            .copied()
            .ok_or(Error::Range {
                what: "timestep",
                value: t as i64,
                lo: 0,
                hi: self.total_steps() as i64,
            })
    }
}

/// `x̂0 = (x − √(1−ᾱ_t)·e_t) / √ᾱ_t`.
pub fn estimate_x0(x: &Tensor, e_t: &Tensor, t: u32, sched: &NoiseSchedule) -> Result<Tensor> {
    estimate_x0_with_alpha(x, e_t, sched.alpha_bar(t)?)
}

pub fn estimate_x0_with_alpha(x: &Tensor, e_t: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if x.shape() != e_t.shape() {
        return Err(Error::dims("estimate_x0", x.shape(), e_t.shape()));
    }
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::config(format!("alpha_bar {alpha_bar} outside (0, 1]")));
    }
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt();
    let data = x
        .data()
        .iter()
        .zip(e_t.data())
        .map(|(&x, &e)| ((x as f64 - sn * e as f64) / sa) as f32)
        .collect();
    let out = Tensor::new(x.shape().to_vec(), data)?;
    if !out.all_finite() {
        return Err(Error::NonFinite("estimate_x0"));
    }
    Ok(out)
}

/// Zero-shot subject scorer: maps an estimated clean frame `P×C` and the
/// subject text to per-patch scores in `[0, 1]`.
pub trait Segmenter: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, x0_hat: &Tensor, prompt_subject: &str) -> Result<Tensor>;
}

/// Deterministic stand-in for a text-prompted segmenter: the squared
/// activation of one latent channel, normalized by its maximum over the
/// frame. It ignores the prompt and carries no semantics.
#[derive(Clone, Debug)]
pub struct SubjectChannelSegmenter {
    pub channel: usize,
}

impl Segmenter for SubjectChannelSegmenter {
    fn name(&self) -> &str {
        "subject-channel"
    }

    fn score(&self, x0_hat: &Tensor, _prompt_subject: &str) -> Result<Tensor> {
        let (p, c) = x0_hat.dims2()?;
        if self.channel >= c {
            return Err(Error::config(format!(
                "subject channel {} outside {c} channels",
                self.channel
            )));
        }
        let energy: Vec<f64> = x0_hat
            .data()
            .chunks_exact(c)
            .map(|row| (row[self.channel] as f64).powi(2))
            .collect();
        let max = energy.iter().copied().fold(0.0f64, f64::max);
        let data = if max > 0.0 {
            energy.iter().map(|e| (e / max) as f32).collect()
        } else {
            vec![0.0; p]
        };
        Tensor::new(vec![p], data)
    }
}

/// Name-keyed segmenters, resolvable from configuration.
#[derive(Clone)]
pub struct SegmenterRegistry {
    entries: BTreeMap<String, Arc<dyn Segmenter>>,
}

impl Default for SegmenterRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register(Arc::new(SubjectChannelSegmenter { channel: 0 }));
        r
    }
}

impl SegmenterRegistry {
    pub fn register(&mut self, s: Arc<dyn Segmenter>) {
        self.entries.insert(s.name().to_string(), s);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Segmenter>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::config(format!("unknown segmenter `{name}`")))
    }
}

/// Per-patch subject saliency of one estimated clean frame.
pub fn saliency(x0_hat: &Tensor, prompt_subject: &str, extractor: &dyn Segmenter) -> Result<Tensor> {
    let (p, _) = x0_hat.dims2()?;
    let s = extractor.score(x0_hat, prompt_subject)?;
    if s.shape() != [p] {
        return Err(Error::dims("saliency", &[p], s.shape()));
    }
    if s.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Integrity(format!(
            "segmenter `{}` produced scores outside [0, 1]",
            extractor.name()
        )));
    }
    Ok(s)
}

pub const OTSU_BINS: usize = 256;
pub const MAX_OTSU_SCORES: usize = 1 << 18;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct OtsuThreshold {
    /// Scores strictly above this value are foreground.
    pub threshold: f32,
    /// Set when all scores were identical; the threshold is then the common
    /// value and the mask is empty.
    pub fallback: bool,
}

/// Lower edges of the 256 histogram bins spanning `[min, max]`.
pub fn otsu_bin_edges(min: f32, max: f32) -> [f32; OTSU_BINS] {
    let (lo, span) = (min as f64, max as f64 - min as f64);
    std::array::from_fn(|j| (lo + j as f64 * span / OTSU_BINS as f64) as f32)
}

/// Bin index of `v`: the number of interior edges it lies strictly above, so
/// `bin(v) >= k` exactly when `v > edges[k]`.
pub fn otsu_bin(v: f32, edges: &[f32; OTSU_BINS]) -> usize {
    edges[1..].partition_point(|&e| v > e)
}

/// Otsu's threshold over a 256-bin histogram on `[min, max]`.
///
/// The between-class variance `ω0·ω1·(μ0−μ1)²` is compared exactly in
/// integer arithmetic on bin indices; ties resolve to the lower edge.
pub fn otsu_threshold(scores: &[f32]) -> Result<OtsuThreshold> {
    if scores.len() < 2 {
        return Err(Error::Precondition(format!(
            "Otsu needs at least two scores, got {}",
            scores.len()
        )));
    }
    // keeps the exact u128 cross-multiplication below from overflowing
    if scores.len() > MAX_OTSU_SCORES {
        return Err(Error::Precondition(format!(
            "Otsu supports at most {MAX_OTSU_SCORES} scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("otsu_threshold input"));
    }
    let min = scores.iter().copied().fold(f32::INFINITY, f32::min);
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if min == max {
        return Ok(OtsuThreshold {
            threshold: max,
            fallback: true,
        });
    }
    let edges = otsu_bin_edges(min, max);
    let mut hist = [0u64; OTSU_BINS];
    for &v in scores {
        hist[otsu_bin(v, &edges)] += 1;
    }
    let n = scores.len() as i128;
    let total: i128 = hist.iter().enumerate().map(|(b, &h)| b as i128 * h as i128).sum();

    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0i128, 0i128);
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1] as i128;
        s0 += (k - 1) as i128 * hist[k - 1] as i128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // σ_B² · n² = (n·S0 − n0·S)² / (n0·n1)
        let num = (n * s0 - n0 * total).unsigned_abs().pow(2);
        let den = (n0 * n1) as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    let (k, _, _) = best.expect("non-constant scores occupy the first and last bins");
    Ok(OtsuThreshold {
        threshold: edges[k],
        fallback: false,
    })
}

/// Boolean subject masks per `(shot, frame, patch)` with the saliency and
/// thresholds that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectMaskSet {
    shots: usize,
    frames: usize,
    patches: usize,
    masks: Vec<bool>,
    thresholds: Vec<f32>,
    fallback: Vec<bool>,
    saliency: Tensor,
}

impl SubjectMaskSet {
    /// Wraps explicit masks; saliency is the 0/1 indicator and every
    /// threshold is 0.5.
    pub fn from_masks(shots: usize, frames: usize, patches: usize, masks: Vec<bool>) -> Result<Self> {
        if masks.len() != shots * frames * patches {
            return Err(Error::dims("SubjectMaskSet", &[shots, frames, patches], &[masks.len()]));
        }
        let saliency = Tensor::new(
            vec![shots, frames, patches],
            masks.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )?;
        Ok(Self {
            shots,
            frames,
            patches,
            masks,
            thresholds: vec![0.5; shots * frames],
            fallback: vec![false; shots * frames],
            saliency,
        })
    }

    pub fn all_true(shots: usize, frames: usize, patches: usize) -> Self {
        Self::from_masks(shots, frames, patches, vec![true; shots * frames * patches])
            .expect("consistent extents")
    }

    /// Thresholds every `(shot, frame)` saliency row with Otsu's method.
    pub fn from_saliency(saliency: Tensor) -> Result<Self> {
        let (shots, frames, patches) = saliency.dims3()?;
        let mut masks = Vec::with_capacity(saliency.len());
        let mut thresholds = Vec::with_capacity(shots * frames);
        let mut fallback = Vec::with_capacity(shots * frames);
        for s in 0..shots {
            for f in 0..frames {
                let row = saliency.block(&[s, f]);
                let t = otsu_threshold(row)?;
                masks.extend(row.iter().map(|&v| v > t.threshold));
                thresholds.push(t.threshold);
                fallback.push(t.fallback);
            }
        }
        Ok(Self {
            shots,
            frames,
            patches,
            masks,
            thresholds,
            fallback,
            saliency,
        })
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn mask(&self, shot: usize, frame: usize) -> &[bool] {
        let start = (shot * self.frames + frame) * self.patches;
        &self.masks[start..start + self.patches]
    }

    pub fn threshold(&self, shot: usize, frame: usize) -> f32 {
        self.thresholds[shot * self.frames + frame]
    }

    pub fn fallback(&self, shot: usize, frame: usize) -> bool {
        self.fallback[shot * self.frames + frame]
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }

    pub fn saliency(&self) -> &Tensor {
        &self.saliency
    }

    /// Keeps only the listed shots, in the given order.
    pub fn select_shots(&self, shots: &[usize]) -> Self {
        let mut out = Self {
            shots: shots.len(),
            frames: self.frames,
            patches: self.patches,
            masks: Vec::new(),
            thresholds: Vec::new(),
            fallback: Vec::new(),
            saliency: Tensor::zeros(&[0]),
        };
        let mut sal = Vec::new();
        for &s in shots {
            for f in 0..self.frames {
                out.masks.extend_from_slice(self.mask(s, f));
                out.thresholds.push(self.threshold(s, f));
                out.fallback.push(self.fallback(s, f));
                sal.extend_from_slice(self.saliency.block(&[s, f]));
            }
        }
        out.saliency = Tensor::new(vec![shots.len(), self.frames, self.patches], sal)
            .expect("consistent extents");
        out
    }

    /// Checks the set's invariants: masks reproduce `saliency > threshold`,
    /// and each mask is neither empty nor full unless its fallback fired.
    pub fn validate(&self) -> Result<()> {
        for s in 0..self.shots {
            for f in 0..self.frames {
                let m = self.mask(s, f);
                let thr = self.threshold(s, f);
                let sal = self.saliency.block(&[s, f]);
                if m.iter().zip(sal).any(|(&b, &v)| b != (v > thr)) {
                    return Err(Error::Integrity(format!(
                        "mask ({s},{f}) disagrees with its threshold"
                    )));
                }
                let on = m.iter().filter(|&&b| b).count();
                if !self.fallback(s, f) && (on == 0 || on == m.len()) {
                    return Err(Error::Integrity(format!(
                        "mask ({s},{f}) is empty or full without fallback"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Nearest-neighbour resampling of square patch grids from `side_from` to
    /// `side_to` per side. Thresholds are kept, so each resampled mask still
    /// equals its resampled saliency above threshold.
    pub fn resample(&self, side_from: usize, side_to: usize) -> Result<Self> {
        if side_from * side_from != self.patches {
            return Err(Error::dims("resample", &[self.patches], &[side_from, side_from]));
        }
        if side_to == side_from {
            return Ok(self.clone());
        }
        if side_to == 0 {
            return Err(Error::config("cannot resample to an empty grid"));
        }
        let src = |y: usize| ((2 * y + 1) * side_from) / (2 * side_to);
        let index: Vec<usize> = (0..side_to * side_to)
            .map(|i| src(i / side_to) * side_from + src(i % side_to))
            .collect();
        let p_to = side_to * side_to;
        let mut masks = Vec::with_capacity(self.shots * self.frames * p_to);
        let mut sal = Vec::with_capacity(masks.capacity());
        for s in 0..self.shots {
            for f in 0..self.frames {
                let m = self.mask(s, f);
                let v = self.saliency.block(&[s, f]);
                masks.extend(index.iter().map(|&i| m[i]));
                sal.extend(index.iter().map(|&i| v[i]));
            }
        }
        Ok(Self {
            shots: self.shots,
            frames: self.frames,
            patches: p_to,
            masks,
            thresholds: self.thresholds.clone(),
            fallback: self.fallback.clone(),
            saliency: Tensor::new(vec![self.shots, self.frames, p_to], sal)?,
        })
    }
}

/// Masks for a batch of estimated clean latents `S×F×P×C`.
pub fn compute_masks(
    x0_hat: &Tensor,
    prompt_subject: &str,
    segmenter: &dyn Segmenter,
    par: Parallelism,
) -> Result<SubjectMaskSet> {
    let (s_n, f_n, p, _) = x0_hat.dims4()?;
    let rows = par.try_map(s_n * f_n, |i| {
        let frame = x0_hat.sub(&[i / f_n, i % f_n]);
        saliency(&frame, prompt_subject, segmenter).map(Tensor::into_data)
    })?;
    let sal = Tensor::new(vec![s_n, f_n, p], rows.concat())?;
    SubjectMaskSet::from_saliency(sal)
}
