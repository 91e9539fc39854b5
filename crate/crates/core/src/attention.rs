//! Spatial self-attention, its framewise subject-driven extension across
//! shots, and sub-batched execution.
//!
//! Masked logits are set to [`MASKED_LOGIT`] before the softmax and the
//! corresponding weights are then forced to exactly zero, which realizes the
//! `log M` additive mask without producing NaN.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::subject_mask::SubjectMaskSet;
use crate::tensor::{dot_f64, matmul_raw, Tensor};

pub const MASKED_LOGIT: f64 = -1e30;

/// Provenance of a query tensor as it moves through injection.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryRole {
    /// Cached from the vanilla pass.
    Vanilla,
    /// Computed live by the consistency-enabled pass.
    Consistent,
    /// Blended along the vanilla flow field.
    Flow,
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl LayerWeights {
    /// Gaussian weights with variance `1/channels` for the input projections
    /// and `1/d_k` for the output projection.
    pub fn random<R: Rng>(channels: usize, d_k: usize, rng: &mut R) -> Self {
        let mut gen = |rows: usize, cols: usize| {
            let scale = (1.0 / rows as f64).sqrt() as f32;
            Tensor::from_fn(&[rows, cols], |_| {
                let z: f32 = StandardNormal.sample(rng);
                z * scale
            })
        };
        let w_q = gen(channels, d_k);
        let w_k = gen(channels, d_k);
        let w_v = gen(channels, d_k);
        let w_o = gen(d_k, channels);
        Self { w_q, w_k, w_v, w_o }
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_k(&self) -> usize {
        self.w_q.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let (c, d) = self.w_q.dims2()?;
        for w in [&self.w_k, &self.w_v] {
            if w.shape() != [c, d] {
                return Err(Error::dims("LayerWeights", self.w_q.shape(), w.shape()));
            }
        }
        if self.w_o.shape() != [d, c] {
            return Err(Error::dims("LayerWeights", self.w_q.shape(), self.w_o.shape()));
        }
        if d == 0 {
            return Err(Error::config("d_k must be at least 1"));
        }
        Ok(())
    }
}

/// Per-layer Q/K/V features indexed `(shot, frame, patch, dim)`.
#[derive(Clone, Debug)]
pub struct AttnFeatures {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub layer_id: usize,
    pub role: QueryRole,
}

impl AttnFeatures {
    pub fn new(q: Tensor, k: Tensor, v: Tensor, layer_id: usize, role: QueryRole) -> Result<Self> {
        let (_, _, _, d) = q.dims4()?;
        if d == 0 {
            return Err(Error::config("d_k must be at least 1"));
        }
        if k.shape() != q.shape() {
            return Err(Error::dims("AttnFeatures", q.shape(), k.shape()));
        }
        if v.shape() != q.shape() {
            return Err(Error::dims("AttnFeatures", q.shape(), v.shape()));
        }
        Ok(Self {
            q,
            k,
            v,
            layer_id,
            role,
        })
    }

    pub fn shots(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn patches(&self) -> usize {
        self.q.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.q.shape()[3]
    }

    /// Replaces the queries, keeping keys and values.
    pub fn with_query(self, q: Tensor, role: QueryRole) -> Result<Self> {
        AttnFeatures::new(q, self.k, self.v, self.layer_id, role)
    }
}

/// Q/K/V of one frame, as returned by [`self_attention`].
#[derive(Clone, Debug)]
pub struct FrameQkv {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// One contiguous run of keys/values in an extended attention, with an
/// optional per-key admissibility mask (`None` admits every key).
#[derive(Clone, Copy)]
pub struct KeyBlock<'a> {
    pub keys: &'a [f32],
    pub values: &'a [f32],
    pub allowed: Option<&'a [bool]>,
}

/// `softmax(Q K⁺ᵀ / √d + log M⁺) V⁺` for one query block against a
/// concatenation of key blocks.
pub fn attend_blocks(q: &[f32], d: usize, blocks: &[KeyBlock<'_>]) -> Result<Vec<f32>> {
    let n_keys: usize = blocks.iter().map(|b| b.keys.len() / d).sum();
    let n_q = q.len() / d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = vec![0.0f64; n_keys];
    let mut admitted = vec![false; n_keys];
    let mut out = vec![0.0f32; n_q * d];
    let mut acc = vec![0.0f64; d];

    for (qi, q_row) in q.chunks_exact(d).enumerate() {
        let mut idx = 0;
        let mut max = f64::NEG_INFINITY;
        for b in blocks {
            for (j, k_row) in b.keys.chunks_exact(d).enumerate() {
                let ok = b.allowed.map_or(true, |m| m[j]);
                admitted[idx] = ok;
                logits[idx] = if ok {
                    let l = dot_f64(q_row, k_row) * scale;
                    if l > max {
                        max = l;
                    }
                    l
                } else {
                    MASKED_LOGIT
                };
                idx += 1;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: qi });
        }
        let mut denom = 0.0f64;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            denom += *l;
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut idx = 0;
        for b in blocks {
            for v_row in b.values.chunks_exact(d) {
                if admitted[idx] {
                    let w = logits[idx] / denom;
                    for (a, &v) in acc.iter_mut().zip(v_row) {
                        *a += w * v as f64;
                    }
                }
                idx += 1;
            }
        }
        for (o, a) in out[qi * d..(qi + 1) * d].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(out)
}

/// Attention weights for one query block over a key concatenation; masked
/// entries are exactly zero. Exposed for audits and tests.
pub fn attention_weights(q: &[f32], d: usize, blocks: &[KeyBlock<'_>]) -> Result<Vec<Vec<f64>>> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut rows = Vec::new();
    for (qi, q_row) in q.chunks_exact(d).enumerate() {
        let mut logits = Vec::new();
        let mut ok = Vec::new();
        for b in blocks {
            for (j, k_row) in b.keys.chunks_exact(d).enumerate() {
                let a = b.allowed.map_or(true, |m| m[j]);
                ok.push(a);
                logits.push(if a {
                    dot_f64(q_row, k_row) * scale
                } else {
                    MASKED_LOGIT
                });
            }
        }
        let max = logits
            .iter()
            .zip(&ok)
            .filter(|(_, &a)| a)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: qi });
        }
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        rows.push(
            exps.iter()
                .zip(&ok)
                .map(|(e, &a)| if a { e / denom } else { 0.0 })
                .collect(),
        );
    }
    Ok(rows)
}

/// Plain single-frame attention `softmax(QKᵀ/√d)·V` (before `W_O`).
pub fn attend(q: &[f32], k: &[f32], v: &[f32], d: usize) -> Result<Vec<f32>> {
    attend_blocks(
        q,
        d,
        &[KeyBlock {
            keys: k,
            values: v,
            allowed: None,
        }],
    )
}

/// Self-attention over the patches of one frame: returns `(A·V)·W_O` and the
/// Q/K/V it was computed from.
pub fn self_attention(x: &Tensor, weights: &LayerWeights) -> Result<(Tensor, FrameQkv)> {
    weights.validate()?;
    let (p, c) = x.dims2()?;
    if p == 0 {
        return Err(Error::config("self_attention needs at least one patch"));
    }
    if c != weights.channels() {
        return Err(Error::dims("self_attention", x.shape(), weights.w_q.shape()));
    }
    let d = weights.d_k();
    let proj = |w: &Tensor| Tensor::new(vec![p, d], matmul_raw(x.data(), p, c, w.data(), d));
    let q = proj(&weights.w_q)?;
    let k = proj(&weights.w_k)?;
    let v = proj(&weights.w_v)?;
    let h = attend(q.data(), k.data(), v.data(), d)?;
    let o = Tensor::new(vec![p, c], matmul_raw(&h, p, d, weights.w_o.data(), c))?;
    if !o.all_finite() {
        return Err(Error::NonFinite("self_attention"));
    }
    Ok((o, FrameQkv { q, k, v }))
}

/// Which shots each shot's extended keys span, in ascending shot order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionTopology {
    sources: Vec<Vec<usize>>,
}

impl AttentionTopology {
    /// Every shot reads every shot.
    pub fn full(shots: usize) -> Self {
        Self {
            sources: (0..shots).map(|_| (0..shots).collect()).collect(),
        }
    }

    /// Every shot reads only itself.
    pub fn isolated(shots: usize) -> Self {
        Self {
            sources: (0..shots).map(|s| vec![s]).collect(),
        }
    }

    pub fn from_sources(mut sources: Vec<Vec<usize>>) -> Result<Self> {
        let n = sources.len();
        for (shot, list) in sources.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if !list.contains(&shot) {
                return Err(Error::config(format!("shot {shot} must attend to itself")));
            }
            if list.iter().any(|&s| s >= n) {
                return Err(Error::config(format!("shot {shot} reads a shot outside 0..{n}")));
            }
        }
        Ok(Self { sources })
    }

    pub fn shots(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self, shot: usize) -> &[usize] {
        &self.sources[shot]
    }
}

#[derive(Clone, Debug, Default)]
pub struct SdsaOptions {
    /// `None` concatenates every shot.
    pub topology: Option<AttentionTopology>,
    /// Additionally attend to the middle frame of each source shot.
    pub middle_frame: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MaskProvenance {
    SelfOnes,
    SubjectMask,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskBlock {
    pub shot: usize,
    pub frame: usize,
    pub provenance: MaskProvenance,
    pub offset: usize,
    pub len: usize,
}

/// The concatenated mask `M⁺` for one (shot, frame). Every query row shares
/// the same key admissibility, so it is stored once per key.
#[derive(Clone, Debug)]
pub struct AttnMask {
    query_patches: usize,
    key_allowed: Vec<bool>,
    blocks: Vec<MaskBlock>,
}

impl AttnMask {
    pub fn query_patches(&self) -> usize {
        self.query_patches
    }

    pub fn key_patches(&self) -> usize {
        self.key_allowed.len()
    }

    pub fn allowed(&self, _query: usize, key: usize) -> bool {
        self.key_allowed[key]
    }

    pub fn row(&self, _query: usize) -> &[bool] {
        &self.key_allowed
    }

    pub fn blocks(&self) -> &[MaskBlock] {
        &self.blocks
    }

    /// Dense `query_patches × key_patches` boolean matrix.
    pub fn to_dense(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.query_patches * self.key_allowed.len());
        for _ in 0..self.query_patches {
            out.extend_from_slice(&self.key_allowed);
        }
        out
    }
}

fn check_masks(feats: &AttnFeatures, masks: &SubjectMaskSet) -> Result<()> {
    let want = [feats.shots(), feats.frames(), feats.patches()];
    let got = [masks.shots(), masks.frames(), masks.patches()];
    if want != got {
        return Err(Error::dims("framewise_sdsa masks", &want, &got));
    }
    Ok(())
}

/// The (shot, frame) key sources for query shot `shot` at `frame`.
fn key_sources(
    shots: usize,
    frames: usize,
    frame: usize,
    shot: usize,
    opts: &SdsaOptions,
) -> Vec<(usize, usize, bool)> {
    let sources: Vec<usize> = match &opts.topology {
        Some(t) => t.sources(shot).to_vec(),
        None => (0..shots).collect(),
    };
    let mut out: Vec<(usize, usize, bool)> =
        sources.iter().map(|&s| (s, frame, s == shot)).collect();
    if opts.middle_frame {
        let mid = frames / 2;
        if mid != frame {
            out.extend(sources.iter().map(|&s| (s, mid, false)));
        }
    }
    out
}

/// Builds `M⁺` for query shot `shot` at `frame`: all-ones over the shot's own
/// frame and the subject masks of the other source frames.
pub fn extended_mask(
    masks: &SubjectMaskSet,
    frame: usize,
    shot: usize,
    opts: &SdsaOptions,
) -> Result<AttnMask> {
    let (s_n, f_n, p) = (masks.shots(), masks.frames(), masks.patches());
    if shot >= s_n || frame >= f_n {
        return Err(Error::Range {
            what: "sdsa (shot, frame)",
            value: (shot * f_n + frame) as i64,
            lo: 0,
            hi: (s_n * f_n) as i64 - 1,
        });
    }
    let mut key_allowed = Vec::new();
    let mut blocks = Vec::new();
    for (s, f, is_self) in key_sources(s_n, f_n, frame, shot, opts) {
        let offset = key_allowed.len();
        if is_self {
            key_allowed.extend(std::iter::repeat(true).take(p));
        } else {
            key_allowed.extend_from_slice(masks.mask(s, f));
        }
        blocks.push(MaskBlock {
            shot: s,
            frame: f,
            provenance: if is_self {
                MaskProvenance::SelfOnes
            } else {
                MaskProvenance::SubjectMask
            },
            offset,
            len: p,
        });
    }
    Ok(AttnMask {
        query_patches: p,
        key_allowed,
        blocks,
    })
}

/// Framewise subject-driven self-attention `h_{i,f}` for query shot `shot` at
/// `frame`, concatenating every shot's frame `frame` in index order.
pub fn framewise_sdsa(
    feats: &AttnFeatures,
    masks: &SubjectMaskSet,
    frame: usize,
    shot: usize,
) -> Result<Tensor> {
    framewise_sdsa_with(feats, masks, frame, shot, &SdsaOptions::default())
}

pub fn framewise_sdsa_with(
    feats: &AttnFeatures,
    masks: &SubjectMaskSet,
    frame: usize,
    shot: usize,
    opts: &SdsaOptions,
) -> Result<Tensor> {
    check_masks(feats, masks)?;
    if let Some(t) = &opts.topology {
        if t.shots() != feats.shots() {
            return Err(Error::dims("sdsa topology", &[feats.shots()], &[t.shots()]));
        }
    }
    let (s_n, f_n, p, d) = (feats.shots(), feats.frames(), feats.patches(), feats.dim());
    if shot >= s_n || frame >= f_n {
        return Err(Error::Range {
            what: "sdsa (shot, frame)",
            value: (shot * f_n + frame) as i64,
            lo: 0,
            hi: (s_n * f_n) as i64 - 1,
        });
    }
    let blocks: Vec<KeyBlock<'_>> = key_sources(s_n, f_n, frame, shot, opts)
        .into_iter()
        .map(|(s, f, is_self)| KeyBlock {
            keys: feats.k.block(&[s, f]),
            values: feats.v.block(&[s, f]),
            allowed: if is_self { None } else { Some(masks.mask(s, f)) },
        })
        .collect();
    let h = attend_blocks(feats.q.block(&[shot, frame]), d, &blocks)?;
    Tensor::new(vec![p, d], h)
}

/// How each (shot, frame) work item attends.
#[derive(Clone, Copy)]
pub enum AttentionMode<'a> {
    /// Each frame attends only to its own patches.
    Plain,
    Framewise {
        masks: &'a SubjectMaskSet,
        options: &'a SdsaOptions,
    },
}

/// Splits `items` work items into consecutive chunks of at most `sub_batch`.
pub fn chunk_plan(items: usize, sub_batch: usize) -> Result<Vec<Range<usize>>> {
    if sub_batch == 0 {
        return Err(Error::config("sub_batch must be positive"));
    }
    Ok((0..items)
        .step_by(sub_batch)
        .map(|start| start..(start + sub_batch).min(items))
        .collect())
}

/// Framewise attention for every (shot, frame), processed in sub-batches of
/// `sub_batch` work items in lexicographic order.
pub fn sub_batched_attention(
    feats: &AttnFeatures,
    masks: &SubjectMaskSet,
    sub_batch: usize,
) -> Result<Tensor> {
    let options = SdsaOptions::default();
    sub_batched_attention_with(
        feats,
        AttentionMode::Framewise {
            masks,
            options: &options,
        },
        sub_batch,
        Parallelism::default(),
    )
}

pub fn sub_batched_attention_with(
    feats: &AttnFeatures,
    mode: AttentionMode<'_>,
    sub_batch: usize,
    par: Parallelism,
) -> Result<Tensor> {
    let (s_n, f_n, p, d) = (feats.shots(), feats.frames(), feats.patches(), feats.dim());
    let items = s_n * f_n;
    if sub_batch > items.max(1) {
        return Err(Error::config(format!(
            "sub_batch {sub_batch} exceeds {items} work items"
        )));
    }
    if let AttentionMode::Framewise { masks, .. } = mode {
        check_masks(feats, masks)?;
    }
    let mut out = Vec::with_capacity(items * p * d);
    for chunk in chunk_plan(items, sub_batch)? {
        let start = chunk.start;
        let parts = par.try_map(chunk.len(), |i| {
            let item = start + i;
            let (shot, frame) = (item / f_n, item % f_n);
            match mode {
                AttentionMode::Plain => attend(
                    feats.q.block(&[shot, frame]),
                    feats.k.block(&[shot, frame]),
                    feats.v.block(&[shot, frame]),
                    d,
                ),
                AttentionMode::Framewise { masks, options } => {
                    framewise_sdsa_with(feats, masks, frame, shot, options).map(Tensor::into_data)
                }
            }
        })?;
        for part in parts {
            out.extend_from_slice(&part);
        }
    }
    Tensor::new(vec![s_n, f_n, p, d], out)
}
