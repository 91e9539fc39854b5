//! Two-phase query injection.
//!
//! Early steps (`t ≥ t_pres`) replace the live queries with the cached
//! vanilla ones (Q Preservation). Later steps build a flow field by matching
//! each vanilla query to its most cosine-similar vanilla query in the two
//! bracketing keyframes, then blend the *consistent* queries found at those
//! matched locations (Q Flow). Q dropout randomly hands patches back to the
//! live queries.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::QueryRole;
use crate::audit::AuditRecord;
use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::seeding::{rng_for, sha256_hex};
use crate::tensor::{cosine_with_norms, norm_f64, sigmoid, Tensor};

/// Vanilla-pass queries keyed by `(timestep, layer)`, written once during the
/// caching pass and read-only afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    entries: BTreeMap<(u32, usize), Tensor>,
    seed_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntryInfo {
    pub t: u32,
    pub layer: usize,
    pub shape: Vec<usize>,
    pub sha256: String,
}

impl FeatureCache {
    pub fn new(seed_fingerprint: impl Into<String>) -> Self {
        Self {
            entries: BTreeMap::new(),
            seed_fingerprint: seed_fingerprint.into(),
        }
    }

    pub fn insert(&mut self, t: u32, layer: usize, q: Tensor) -> Result<()> {
        if self.entries.contains_key(&(t, layer)) {
            return Err(Error::Integrity(format!(
                "cache entry (t={t}, layer={layer}) written twice"
            )));
        }
        self.entries.insert((t, layer), q);
        Ok(())
    }

    pub fn get(&self, t: u32, layer: usize) -> Result<&Tensor> {
        self.entries
            .get(&(t, layer))
            .ok_or(Error::CacheMiss { t, layer })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = (u32, usize)> + '_ {
        self.entries.keys().copied()
    }

    pub fn seed_fingerprint(&self) -> &str {
        &self.seed_fingerprint
    }

    /// Fails with the first missing `(t, layer)` pair.
    pub fn ensure_covers(&self, timesteps: &[u32], layers: usize) -> Result<()> {
        for &t in timesteps {
            for layer in 0..layers {
                self.get(t, layer)?;
            }
        }
        Ok(())
    }

    pub fn index(&self) -> Vec<CacheEntryInfo> {
        self.entries
            .iter()
            .map(|(&(t, layer), q)| CacheEntryInfo {
                t,
                layer,
                shape: q.shape().to_vec(),
                sha256: sha256_hex(&q.to_bytes()),
            })
            .collect()
    }
}

/// Keyframes at a fixed spacing, always including the first and last frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyframeIndex {
    frames: usize,
    spacing: usize,
    keyframes: Vec<usize>,
}

impl KeyframeIndex {
    pub fn new(frames: usize, spacing: usize) -> Result<Self> {
        if frames == 0 || spacing == 0 {
            return Err(Error::config("keyframes need frames >= 1 and spacing >= 1"));
        }
        let mut keyframes: Vec<usize> = (0..frames).step_by(spacing).collect();
        if *keyframes.last().expect("frame 0 present") != frames - 1 {
            keyframes.push(frames - 1);
        }
        Ok(Self {
            frames,
            spacing,
            keyframes,
        })
    }

    pub fn keyframes(&self) -> &[usize] {
        &self.keyframes
    }

    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// The two nearest keyframes `f_A ≤ f ≤ f_B`, with `f_A < f_B`. A keyframe
    /// brackets with its successor, the last keyframe with its predecessor.
    pub fn bracket(&self, frame: usize) -> Result<(usize, usize)> {
        if frame >= self.frames {
            return Err(Error::Range {
                what: "frame",
                value: frame as i64,
                lo: 0,
                hi: self.frames as i64 - 1,
            });
        }
        if self.keyframes.len() < 2 {
            return Err(Error::config("flow bracket needs at least two keyframes"));
        }
        let i = self.keyframes.partition_point(|&k| k <= frame) - 1;
        let i = i.min(self.keyframes.len() - 2);
        Ok((self.keyframes[i], self.keyframes[i + 1]))
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendWeight {
    /// `w = sigmoid((f_B − f) / (f_B − f_A))`.
    #[default]
    Sigmoid,
    /// `w = (f_B − f) / (f_B − f_A)`.
    Linear,
}

impl BlendWeight {
    pub fn weight(self, fa: usize, fb: usize, f: usize) -> f64 {
        let r = (fb as f64 - f as f64) / (fb as f64 - fa as f64);
        match self {
            BlendWeight::Sigmoid => sigmoid(r),
            BlendWeight::Linear => r,
        }
    }
}

/// Index and similarity of the most cosine-similar candidate row. Zero-norm
/// candidates are never selected; ties go to the lowest index.
pub fn argmax_cosine(
    query: &[f32],
    query_norm: f64,
    candidates: &[f32],
    candidate_norms: &[f64],
) -> Option<(usize, f64)> {
    if query_norm == 0.0 {
        return None;
    }
    let d = query.len();
    let mut best: Option<(usize, f64)> = None;
    for (j, (row, &n)) in candidates.chunks_exact(d).zip(candidate_norms).enumerate() {
        if n == 0.0 {
            continue;
        }
        let s = cosine_with_norms(query, query_norm, row, n);
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best
}

fn row_norms(data: &[f32], d: usize) -> Vec<f64> {
    data.chunks_exact(d).map(norm_f64).collect()
}

/// Matched patch locations for one frame of one shot.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub frame: usize,
    pub key_a: usize,
    pub key_b: usize,
    pub weight: f64,
    /// `(patch in f_A, patch in f_B)` per patch; `None` where the vanilla query
    /// has zero norm (or no candidate does), and the live query is kept.
    pub matches: Vec<Option<(usize, usize)>>,
}

fn flow_field_with_norms(
    q_v: &Tensor,
    norms: &[f64],
    kf: &KeyframeIndex,
    frame: usize,
    weight: BlendWeight,
) -> Result<FlowField> {
    let (_, p, d) = q_v.dims3()?;
    let (fa, fb) = kf.bracket(frame)?;
    let cand = |k: usize| (q_v.block(&[k]), &norms[k * p..(k + 1) * p]);
    let (ca, na) = cand(fa);
    let (cb, nb) = cand(fb);
    let query = q_v.block(&[frame]);
    let matches = (0..p)
        .map(|i| {
            let q = &query[i * d..(i + 1) * d];
            let qn = norms[frame * p + i];
            let a = argmax_cosine(q, qn, ca, na)?;
            let b = argmax_cosine(q, qn, cb, nb)?;
            Some((a.0, b.0))
        })
        .collect();
    Ok(FlowField {
        frame,
        key_a: fa,
        key_b: fb,
        weight: weight.weight(fa, fb, frame),
        matches,
    })
}

/// Flow field of frame `frame` from vanilla queries `F×P×d`.
pub fn flow_field(q_v: &Tensor, kf: &KeyframeIndex, frame: usize, weight: BlendWeight) -> Result<FlowField> {
    let (f, _, d) = q_v.dims3()?;
    if f != kf.frames() {
        return Err(Error::dims("flow_field", &[kf.frames()], &[f]));
    }
    let norms = row_norms(q_v.data(), d);
    flow_field_with_norms(q_v, &norms, kf, frame, weight)
}

#[derive(Clone, Debug)]
pub struct QFlowOutput {
    pub q: Tensor,
    pub field: FlowField,
    /// Patches whose vanilla query could not be matched.
    pub skipped: usize,
}

fn blend_with_field(q_c: &Tensor, field: &FlowField) -> Result<(Vec<f32>, usize)> {
    let (_, p, d) = q_c.dims3()?;
    let w = field.weight;
    let (qa, qb, own) = (
        q_c.block(&[field.key_a]),
        q_c.block(&[field.key_b]),
        q_c.block(&[field.frame]),
    );
    let mut out = Vec::with_capacity(p * d);
    let mut skipped = 0;
    for (i, m) in field.matches.iter().enumerate() {
        match *m {
            Some((ia, ib)) => {
                let a = &qa[ia * d..(ia + 1) * d];
                let b = &qb[ib * d..(ib + 1) * d];
                out.extend(
                    a.iter()
                        .zip(b)
                        .map(|(&x, &y)| (w * x as f64 + (1.0 - w) * y as f64) as f32),
                );
            }
            None => {
                skipped += 1;
                out.extend_from_slice(&own[i * d..(i + 1) * d]);
            }
        }
    }
    Ok((out, skipped))
}

/// Flow-based query for frame `frame`: consistent queries `q_c` blended at
/// the locations matched on the vanilla queries `q_v` (both `F×P×d`).
pub fn q_flow(
    q_c: &Tensor,
    q_v: &Tensor,
    kf: &KeyframeIndex,
    frame: usize,
    weight: BlendWeight,
) -> Result<QFlowOutput> {
    if q_c.shape() != q_v.shape() {
        return Err(Error::dims("q_flow", q_c.shape(), q_v.shape()));
    }
    let (_, p, d) = q_c.dims3()?;
    let field = flow_field(q_v, kf, frame, weight)?;
    let (data, skipped) = blend_with_field(q_c, &field)?;
    if skipped > 0 {
        log::debug!("q_flow frame {frame}: {skipped} zero-norm queries kept live");
    }
    Ok(QFlowOutput {
        q: Tensor::new(vec![p, d], data)?,
        field,
        skipped,
    })
}

/// [`q_flow`] over every `(shot, frame)` of `S×F×P×d` query batches.
pub fn q_flow_batch(
    q_c: &Tensor,
    q_v: &Tensor,
    kf: &KeyframeIndex,
    weight: BlendWeight,
    par: Parallelism,
) -> Result<(Tensor, usize)> {
    if q_c.shape() != q_v.shape() {
        return Err(Error::dims("q_flow_batch", q_c.shape(), q_v.shape()));
    }
    let (s_n, f_n, p, d) = q_c.dims4()?;
    if f_n != kf.frames() {
        return Err(Error::dims("q_flow_batch", &[kf.frames()], &[f_n]));
    }
    let shots_v: Vec<Tensor> = (0..s_n).map(|s| q_v.sub(&[s])).collect();
    let shots_c: Vec<Tensor> = (0..s_n).map(|s| q_c.sub(&[s])).collect();
    let norms: Vec<Vec<f64>> = shots_v.iter().map(|t| row_norms(t.data(), d)).collect();
    let parts = par.try_map(s_n * f_n, |i| {
        let (s, f) = (i / f_n, i % f_n);
        let field = flow_field_with_norms(&shots_v[s], &norms[s], kf, f, weight)?;
        blend_with_field(&shots_c[s], &field)
    })?;
    let mut data = Vec::with_capacity(q_c.len());
    let mut skipped = 0;
    for (part, sk) in parts {
        data.extend_from_slice(&part);
        skipped += sk;
    }
    Ok((Tensor::new(vec![s_n, f_n, p, d], data)?, skipped))
}

/// Replaces the live queries with the cached vanilla queries.
pub fn q_preserve(q_c: &Tensor, cache: &FeatureCache, t: u32, layer: usize, t_pres: u32) -> Result<(Tensor, QueryRole)> {
    if t < t_pres {
        return Err(Error::Precondition(format!(
            "Q preservation at t={t} outside [t_pres={t_pres}, T]"
        )));
    }
    let cached = cache.get(t, layer)?;
    if cached.shape() != q_c.shape() {
        return Err(Error::dims("q_preserve", q_c.shape(), cached.shape()));
    }
    Ok((cached.clone(), QueryRole::Vanilla))
}

#[derive(Clone, Debug)]
pub struct DropoutOutput {
    pub q: Tensor,
    /// Fraction of patches that kept `q_c`.
    pub kept_fraction: f64,
}

/// Per patch (row along the last axis), keep `q_c` with probability `rate`,
/// else keep `q_injected`.
pub fn q_dropout<R: Rng + ?Sized>(
    q_injected: &Tensor,
    q_c: &Tensor,
    rate: f64,
    rng: &mut R,
) -> Result<DropoutOutput> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("Q dropout rate {rate} outside [0, 1]")));
    }
    if q_injected.shape() != q_c.shape() {
        return Err(Error::dims("q_dropout", q_injected.shape(), q_c.shape()));
    }
    if rate == 0.0 {
        return Ok(DropoutOutput {
            q: q_injected.clone(),
            kept_fraction: 0.0,
        });
    }
    if rate == 1.0 {
        return Ok(DropoutOutput {
            q: q_c.clone(),
            kept_fraction: 1.0,
        });
    }
    let d = q_c.last_dim().max(1);
    let rows = q_c.len() / d;
    let mut out = q_injected.clone();
    let mut kept = 0usize;
    for r in 0..rows {
        if rng.gen::<f64>() < rate {
            kept += 1;
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&q_c.data()[r * d..(r + 1) * d]);
        }
    }
    Ok(DropoutOutput {
        q: out,
        kept_fraction: if rows == 0 { 0.0 } else { kept as f64 / rows as f64 },
    })
}

/// Settings that decide which query feeds each (timestep, layer).
#[derive(Clone, Debug)]
pub struct QueryControl {
    pub t_pres: u32,
    /// `None` injects on every layer.
    pub injection_layers: Option<BTreeSet<usize>>,
    pub dropout: f64,
    pub keyframes: KeyframeIndex,
    pub blend_weight: BlendWeight,
    /// Root seed for the per-(t, layer, shot) dropout streams.
    pub seed: u64,
}

impl QueryControl {
    pub fn injects(&self, layer: usize) -> bool {
        self.injection_layers
            .as_ref()
            .map_or(true, |s| s.contains(&layer))
    }

    /// Role chosen for `(t, layer)` before any feature is touched.
    pub fn role_for(&self, t: u32, layer: usize) -> QueryRole {
        if !self.injects(layer) {
            QueryRole::Consistent
        } else if t >= self.t_pres {
            QueryRole::Vanilla
        } else {
            QueryRole::Flow
        }
    }
}

#[derive(Clone, Debug)]
pub struct QuerySelection {
    pub q: Tensor,
    pub role: QueryRole,
    pub record: AuditRecord,
}

/// Chooses the queries for one `(t, layer)` over a `S×F×P×d` batch: Q
/// Preservation for `t ≥ t_pres`, Q Flow below it, pass-through on layers
/// outside the injection set; injected queries then go through Q dropout.
pub fn select_q(
    t: u32,
    layer: usize,
    q_c: &Tensor,
    cache: &FeatureCache,
    ctl: &QueryControl,
    par: Parallelism,
) -> Result<QuerySelection> {
    let role = ctl.role_for(t, layer);
    let injected = match role {
        QueryRole::Consistent => {
            return Ok(QuerySelection {
                q: q_c.clone(),
                role,
                record: AuditRecord::Query {
                    t,
                    layer,
                    role,
                    dropout_kept_fraction: None,
                },
            })
        }
        QueryRole::Vanilla => q_preserve(q_c, cache, t, layer, ctl.t_pres)?.0,
        QueryRole::Flow => {
            let q_v = cache.get(t, layer)?;
            let (q, skipped) = q_flow_batch(q_c, q_v, &ctl.keyframes, ctl.blend_weight, par)?;
            if skipped > 0 {
                log::debug!("t={t} layer={layer}: {skipped} patches kept live queries");
            }
            q
        }
    };

    let (s_n, ..) = q_c.dims4()?;
    let mut shots = Vec::with_capacity(s_n);
    let mut kept = 0.0;
    for s in 0..s_n {
        let mut rng = rng_for(&[ctl.seed, 0x5150, t as u64, layer as u64, s as u64]);
        let out = q_dropout(&injected.sub(&[s]), &q_c.sub(&[s]), ctl.dropout, &mut rng)?;
        kept += out.kept_fraction;
        shots.push(out.q);
    }
    let q = Tensor::stack(&shots)?;
    Ok(QuerySelection {
        q,
        role,
        record: AuditRecord::Query {
            t,
            layer,
            role,
            dropout_kept_fraction: Some(if s_n == 0 { 0.0 } else { kept / s_n as f64 }),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn keyframes_pin_endpoints() {
        let kf = KeyframeIndex::new(8, 4).unwrap();
        assert_eq!(kf.keyframes(), &[0, 4, 7]);
        assert_eq!(kf.bracket(0).unwrap(), (0, 4));
        assert_eq!(kf.bracket(3).unwrap(), (0, 4));
        assert_eq!(kf.bracket(4).unwrap(), (4, 7));
        assert_eq!(kf.bracket(7).unwrap(), (4, 7));
        assert_eq!(KeyframeIndex::new(9, 4).unwrap().keyframes(), &[0, 4, 8]);
        assert!(KeyframeIndex::new(1, 4).unwrap().bracket(0).is_err());
        assert!(kf.bracket(8).is_err());
    }

    #[test]
    fn cache_is_write_once_and_reports_misses() {
        let mut c = FeatureCache::new("fp");
        c.insert(980, 0, Tensor::zeros(&[1])).unwrap();
        assert!(c.insert(980, 0, Tensor::zeros(&[1])).is_err());
        assert!(matches!(c.get(980, 1), Err(Error::CacheMiss { t: 980, layer: 1 })));
        assert!(c.ensure_covers(&[980], 2).is_err());
    }

    #[test]
    fn preserve_returns_cache_verbatim() {
        let mut c = FeatureCache::new("fp");
        let cached = rand_t(&[2, 3, 4, 2], 1);
        c.insert(800, 1, cached.clone()).unwrap();
        let (q, role) = q_preserve(&rand_t(&[2, 3, 4, 2], 2), &c, 800, 1, 750).unwrap();
        assert_eq!(q, cached);
        assert_eq!(role, QueryRole::Vanilla);
        assert!(matches!(
            q_preserve(&cached, &c, 740, 1, 750),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn keyframe_self_match_uses_sigmoid_one() {
        let kf = KeyframeIndex::new(5, 4).unwrap();
        let q_v = rand_t(&[5, 6, 3], 3);
        let q_c = rand_t(&[5, 6, 3], 4);
        let out = q_flow(&q_c, &q_v, &kf, 0, BlendWeight::Sigmoid).unwrap();
        assert!((out.field.weight - 0.731059).abs() < 1e-6);
        for (p, m) in out.field.matches.iter().enumerate() {
            let (a, b) = m.unwrap();
            assert_eq!(a, p);
            let w = out.field.weight;
            for c in 0..3 {
                let want = w * q_c.block(&[0, p])[c] as f64 + (1.0 - w) * q_c.block(&[4, b])[c] as f64;
                assert_eq!(out.q.data()[p * 3 + c], want as f32);
            }
        }
    }

    #[test]
    fn constant_consistent_queries_pass_through() {
        let kf = KeyframeIndex::new(6, 2).unwrap();
        let q_v = rand_t(&[6, 8, 4], 5);
        let q_c = Tensor::full(&[6, 8, 4], 0.37);
        for f in 0..6 {
            let out = q_flow(&q_c, &q_v, &kf, f, BlendWeight::Sigmoid).unwrap();
            assert!(out.q.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_query_keeps_live_value() {
        let kf = KeyframeIndex::new(3, 2).unwrap();
        let mut q_v = rand_t(&[3, 4, 2], 6);
        q_v.block_mut(&[1])[..2].copy_from_slice(&[0.0, 0.0]);
        let q_c = rand_t(&[3, 4, 2], 7);
        let out = q_flow(&q_c, &q_v, &kf, 1, BlendWeight::Sigmoid).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(&out.q.data()[..2], &q_c.block(&[1])[..2]);
    }

    #[test]
    fn linear_weight_alternative() {
        assert_eq!(BlendWeight::Linear.weight(0, 4, 1), 0.75);
        assert_eq!(BlendWeight::Sigmoid.weight(0, 4, 4), 0.5);
    }

    #[test]
    fn batch_flow_matches_per_frame() {
        let kf = KeyframeIndex::new(6, 4).unwrap();
        let q_v = rand_t(&[2, 6, 8, 4], 8);
        let q_c = rand_t(&[2, 6, 8, 4], 9);
        let (batch, _) = q_flow_batch(&q_c, &q_v, &kf, BlendWeight::Sigmoid, Parallelism::Rayon).unwrap();
        for s in 0..2 {
            for f in 0..6 {
                let one = q_flow(&q_c.sub(&[s]), &q_v.sub(&[s]), &kf, f, BlendWeight::Sigmoid).unwrap();
                assert_eq!(batch.block(&[s, f]), one.q.data());
            }
        }
    }

    #[test]
    fn dropout_extremes_and_rate_bounds() {
        let a = rand_t(&[10, 3], 10);
        let b = rand_t(&[10, 3], 11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(q_dropout(&a, &b, 0.0, &mut rng).unwrap().q, a);
        assert_eq!(q_dropout(&a, &b, 1.0, &mut rng).unwrap().q, b);
        assert!(q_dropout(&a, &b, 1.5, &mut rng).is_err());
        assert!(q_dropout(&a, &b, -0.1, &mut rng).is_err());
    }

    #[test]
    fn select_q_dispatch() {
        let kf = KeyframeIndex::new(4, 2).unwrap();
        let mut cache = FeatureCache::new("fp");
        for t in [750, 749, 300] {
            for l in 0..2 {
                cache.insert(t, l, rand_t(&[2, 4, 5, 3], t as u64 + l as u64)).unwrap();
            }
        }
        let ctl = QueryControl {
            t_pres: 750,
            injection_layers: Some([0].into_iter().collect()),
            dropout: 0.0,
            keyframes: kf,
            blend_weight: BlendWeight::Sigmoid,
            seed: 1,
        };
        let q_c = rand_t(&[2, 4, 5, 3], 99);
        let par = Parallelism::Sequential;
        let s = select_q(750, 0, &q_c, &cache, &ctl, par).unwrap();
        assert_eq!(s.role, QueryRole::Vanilla);
        assert_eq!(&s.q, cache.get(750, 0).unwrap());
        assert_eq!(select_q(749, 0, &q_c, &cache, &ctl, par).unwrap().role, QueryRole::Flow);
        let pass = select_q(300, 1, &q_c, &cache, &ctl, par).unwrap();
        assert_eq!(pass.role, QueryRole::Consistent);
        assert_eq!(pass.q, q_c);
    }
}
