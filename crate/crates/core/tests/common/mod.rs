// Brute-force reference implementations shared by the integration tests.
// Each oracle recomputes its quantity from the definition with no shortcuts.
#![allow(dead_code)]

use rand::Rng;
use storyboard_core::pipeline::{StoryboardConfig, ToyModelSpec};
use storyboard_core::subject_mask::SubjectMaskSet;
use storyboard_core::Tensor;

pub fn rand_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

pub fn rand_masks<R: Rng>(s: usize, f: usize, p: usize, rng: &mut R) -> SubjectMaskSet {
    let m = (0..s * f * p).map(|_| rng.gen_bool(0.5)).collect();
    SubjectMaskSet::from_masks(s, f, p, m).unwrap()
}

/// Dense masked attention for query shot `shot` at `frame`: keys are every
/// shot's frame `frame` in index order, masked keys get `-inf` before the
/// softmax, and the query shot's own block is never masked.
pub fn dense_sdsa(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    masks: &SubjectMaskSet,
    frame: usize,
    shot: usize,
) -> Vec<f64> {
    let s = q.shape();
    let (s_n, p, d) = (s[0], s[2], s[3]);
    let mut keys = Vec::new();
    let mut vals = Vec::new();
    let mut allowed = Vec::new();
    for src in 0..s_n {
        for j in 0..p {
            keys.push(&k.block(&[src, frame])[j * d..(j + 1) * d]);
            vals.push(&v.block(&[src, frame])[j * d..(j + 1) * d]);
            allowed.push(src == shot || masks.mask(src, frame)[j]);
        }
    }
    let qb = q.block(&[shot, frame]);
    let mut out = vec![0.0f64; p * d];
    for i in 0..p {
        let qi = &qb[i * d..(i + 1) * d];
        let logits: Vec<f64> = keys
            .iter()
            .zip(&allowed)
            .map(|(kj, &ok)| {
                if !ok {
                    return f64::NEG_INFINITY;
                }
                let dot: f64 = qi.iter().zip(*kj).map(|(a, b)| *a as f64 * *b as f64).sum();
                dot / (d as f64).sqrt()
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for (wj, vj) in w.iter().zip(&vals) {
            for c in 0..d {
                out[i * d + c] += wj / z * vj[c] as f64;
            }
        }
    }
    out
}

fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let dot = |x: &[f32], y: &[f32]| -> f64 {
        let mut acc = 0.0f64;
        for (p, q) in x.iter().zip(y) {
            acc += *p as f64 * *q as f64;
        }
        acc
    };
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Exhaustive argmax-cosine search over every candidate row; first index wins
/// ties and zero rows are skipped.
pub fn exhaustive_argmax(query: &[f32], candidates: &[f32], d: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..candidates.len() / d {
        let Some(s) = cosine(query, &candidates[j * d..(j + 1) * d]) else {
            continue;
        };
        if best.is_none() || s > best.unwrap().1 {
            best = Some((j, s));
        }
    }
    best.map(|b| b.0)
}

/// Tries every one of the 256 histogram edges as the threshold and keeps the
/// one with the largest between-class variance, computed exactly from counts
/// and bin-index sums. Returns the winning edge index.
pub fn exhaustive_otsu(scores: &[f32]) -> usize {
    let min = scores.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let edge = |j: usize| (min as f64 + j as f64 * (max as f64 - min as f64) / 256.0) as f32;
    let bin = |v: f32| (1..256).filter(|&j| v > edge(j)).count() as i128;
    let bins: Vec<i128> = scores.iter().map(|&v| bin(v)).collect();
    let mut best: Option<(usize, u128, u128)> = None;
    for k in 1..256 {
        let (mut n0, mut s0, mut n1, mut s1) = (0i128, 0i128, 0i128, 0i128);
        for (&v, &b) in scores.iter().zip(&bins) {
            if v > edge(k) {
                n1 += 1;
                s1 += b;
            } else {
                n0 += 1;
                s0 += b;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // ω0·ω1·(μ0 − μ1)² = (s0·n1 − s1·n0)² / (n²·n0·n1)
        let num = (s0 * n1 - s1 * n0).unsigned_abs().pow(2);
        let den = (n0 * n1) as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    best.expect("non-constant scores").0
}

/// Cross-shot masked-mean similarity by explicit double loop.
pub fn set_consistency_oracle(frames: &Tensor, masks: &SubjectMaskSet) -> (usize, f64) {
    let s = frames.shape();
    let (s_n, f_n, p, c) = (s[0], s[1], s[2], s[3]);
    let feature = |sh: usize, f: usize| -> Vec<f32> {
        let blk = frames.block(&[sh, f]);
        let m = masks.mask(sh, f);
        (0..c)
            .map(|ch| {
                let sum: f64 = (0..p).filter(|&i| m[i]).map(|i| blk[i * c + ch] as f64).sum();
                (sum / p as f64) as f32
            })
            .collect()
    };
    let mut n = 0;
    let mut total = 0.0;
    for s1 in 0..s_n {
        for f1 in 0..f_n {
            for s2 in s1 + 1..s_n {
                for f2 in 0..f_n {
                    n += 1;
                    total += cosine(&feature(s1, f1), &feature(s2, f2)).unwrap_or(0.0);
                }
            }
        }
    }
    (n, total / n as f64)
}

/// Column of `F×H×W` with the largest summed temporal variance, scanning
/// every column.
pub fn brute_force_column(video: &Tensor) -> usize {
    let s = video.shape();
    let (f_n, h, w) = (s[0], s[1], s[2]);
    let at = |f: usize, y: usize, x: usize| video.data()[f * h * w + y * w + x] as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for x in 0..w {
        let mut total = 0.0;
        for y in 0..h {
            let mean = (0..f_n).map(|f| at(f, y, x)).sum::<f64>() / f_n as f64;
            total += (0..f_n).map(|f| (at(f, y, x) - mean).powi(2)).sum::<f64>() / f_n as f64;
        }
        if total > best.1 {
            best = (x, total);
        }
    }
    best.0
}

/// `F×H×W` video of a random texture shifted right by `shift` px per frame.
pub fn shifted_video<R: Rng>(frames: usize, h: usize, w: usize, shift: usize, rng: &mut R) -> Tensor {
    let base: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    Tensor::from_fn(&[frames, h, w], |i| {
        let (f, rest) = (i / (h * w), i % (h * w));
        let (y, x) = (rest / w, rest % w);
        base[y * w + (x + w * frames - f * shift) % w]
    })
}

/// Probability of at least `wins` successes in `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    for k in wins..=n {
        let mut c = 1.0f64;
        for i in 0..k {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        p += c / 2f64.powi(n as i32);
    }
    p
}

/// Default configuration with a smaller model, for tests that sweep many
/// pipeline runs.
pub fn small_config(seed: u64) -> StoryboardConfig {
    StoryboardConfig {
        sampler_steps: 20,
        model: ToyModelSpec {
            layers: 3,
            patches_per_side: 4,
            channels: 8,
            frames: 5,
            weight_seed: 3,
        },
        seed,
        ..StoryboardConfig::default()
    }
}

pub fn fox_prompts(n: usize) -> Vec<String> {
    const PLACES: [&str; 8] = [
        "in fresh snow",
        "by a river",
        "inside a barn",
        "on a hill at dusk",
        "under a bridge",
        "in a wheat field",
        "on a rooftop",
        "beside a campfire",
    ];
    (0..n)
        .map(|i| format!("a red fox, {}, watercolor", PLACES[i % PLACES.len()]))
        .collect()
}
