//! Refinement feature injection: blend attention outputs of subject patches
//! toward their best-matching patches anywhere in the anchor shots.
//!
//! A [`RefinementStep`] is built once per (step, layer) from the conditional
//! pass and then applied, unchanged, to both guidance passes.

use std::sync::Arc;

use crate::audit::Pass;
use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::query_control::argmax_cosine;
use crate::subject_mask::SubjectMaskSet;
use crate::tensor::{norm_f64, Tensor};

/// Output features `F×P×d` of one anchor shot.
#[derive(Clone, Copy, Debug)]
pub struct AnchorFeatures<'a> {
    pub shot: usize,
    pub feats: &'a Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchMatch {
    pub source: usize,
    pub frame: usize,
    pub patch: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMap {
    pub target: (usize, usize),
    /// Anchor shot ids in the order their features were searched.
    pub sources: Vec<usize>,
    pub frames: usize,
    pub patches: usize,
    /// One entry per target patch; `None` for zero-norm target features.
    pub matches: Vec<Option<PatchMatch>>,
}

impl CorrespondenceMap {
    pub fn unmatched(&self) -> usize {
        self.matches.iter().filter(|m| m.is_none()).count()
    }
}

fn check_anchors(anchors: &[AnchorFeatures<'_>]) -> Result<(usize, usize, usize)> {
    let Some(first) = anchors.first() else {
        return Err(Error::config("refinement needs at least one anchor"));
    };
    let dims = first.feats.dims3()?;
    for a in anchors {
        if a.feats.shape() != first.feats.shape() {
            return Err(Error::dims("anchor features", first.feats.shape(), a.feats.shape()));
        }
    }
    Ok(dims)
}

/// Per target patch, the argmax-cosine `(anchor, frame, patch)` over every
/// frame of every anchor; ties go to the lowest linear index.
pub fn build_correspondence(
    target: (usize, usize),
    target_feats: &Tensor,
    anchors: &[AnchorFeatures<'_>],
) -> Result<CorrespondenceMap> {
    let (frames, patches, d) = check_anchors(anchors)?;
    let (p_t, d_t) = target_feats.dims2()?;
    if d_t != d {
        return Err(Error::dims("build_correspondence", target_feats.shape(), anchors[0].feats.shape()));
    }
    let per_anchor = frames * patches;
    let mut candidates = Vec::with_capacity(anchors.len() * per_anchor * d);
    for a in anchors {
        candidates.extend_from_slice(a.feats.data());
    }
    let norms: Vec<f64> = candidates.chunks_exact(d).map(norm_f64).collect();
    let matches = target_feats
        .data()
        .chunks_exact(d)
        .map(|q| {
            let (j, score) = argmax_cosine(q, norm_f64(q), &candidates, &norms)?;
            let (ai, rest) = (j / per_anchor, j % per_anchor);
            Some(PatchMatch {
                source: anchors[ai].shot,
                frame: rest / patches,
                patch: rest % patches,
                score,
            })
        })
        .collect::<Vec<_>>();
    debug_assert_eq!(matches.len(), p_t);
    Ok(CorrespondenceMap {
        target,
        sources: anchors.iter().map(|a| a.shot).collect(),
        frames,
        patches,
        matches,
    })
}

/// `o ← (1−blend)·o + blend·o_anchor[match]` on subject patches; every other
/// patch is returned bit-unchanged.
pub fn inject_refinement(
    o_target: &Tensor,
    anchors: &[AnchorFeatures<'_>],
    map: &CorrespondenceMap,
    mask: &[bool],
    blend: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::config(format!("refinement blend {blend} outside [0, 1]")));
    }
    let (frames, patches, d) = check_anchors(anchors)?;
    let ids: Vec<usize> = anchors.iter().map(|a| a.shot).collect();
    if ids != map.sources || frames != map.frames || patches != map.patches {
        return Err(Error::Integrity(format!(
            "correspondence map built for anchors {:?} ({}×{}) applied to {:?} ({}×{})",
            map.sources, map.frames, map.patches, ids, frames, patches
        )));
    }
    let (p, d_t) = o_target.dims2()?;
    if d_t != d || mask.len() != p || map.matches.len() != p {
        return Err(Error::Integrity(format!(
            "target {:?}, mask {} and map {} disagree",
            o_target.shape(),
            mask.len(),
            map.matches.len()
        )));
    }
    let mut out = o_target.clone();
    for (i, (m, &on)) in map.matches.iter().zip(mask).enumerate() {
        let (true, Some(m)) = (on, m) else { continue };
        let ai = map
            .sources
            .iter()
            .position(|&s| s == m.source)
            .expect("match source is listed");
        let src = &anchors[ai].feats.block(&[m.frame])[m.patch * d..(m.patch + 1) * d];
        for (o, &a) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
            *o = ((1.0 - blend) * *o as f64 + blend * a as f64) as f32;
        }
    }
    Ok(out)
}

/// Correspondence maps and masks for one (step, layer), shared verbatim by
/// the conditional and unconditional passes.
#[derive(Debug)]
pub struct RefinementStep {
    t: u32,
    layer: usize,
    id: u64,
    anchors: Vec<usize>,
    blend: f64,
    masks: SubjectMaskSet,
    /// Per `(shot, frame)` in lexicographic order; `None` for a shot with no
    /// anchor other than itself.
    maps: Vec<Option<Arc<CorrespondenceMap>>>,
    applied: Vec<Pass>,
}

fn sources_for(anchors: &[usize], shot: usize) -> Vec<usize> {
    anchors.iter().copied().filter(|&a| a != shot).collect()
}

impl RefinementStep {
    /// Builds maps from the conditional pass outputs `o_cond` (`S×F×P×d`).
    /// Each shot matches against every anchor except itself.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        t: u32,
        layer: usize,
        id: u64,
        o_cond: &Tensor,
        anchors: &[usize],
        masks: SubjectMaskSet,
        blend: f64,
        par: Parallelism,
    ) -> Result<Self> {
        let (s_n, f_n, p, _) = o_cond.dims4()?;
        if [masks.shots(), masks.frames(), masks.patches()] != [s_n, f_n, p] {
            return Err(Error::dims(
                "refinement masks",
                &[s_n, f_n, p],
                &[masks.shots(), masks.frames(), masks.patches()],
            ));
        }
        if anchors.is_empty() {
            return Err(Error::config("refinement needs at least one anchor"));
        }
        let shot_feats: Vec<Tensor> = (0..s_n).map(|s| o_cond.sub(&[s])).collect();
        let maps = par.try_map(s_n * f_n, |i| {
            let (s, f) = (i / f_n, i % f_n);
            let srcs = sources_for(anchors, s);
            if srcs.is_empty() {
                return Ok(None);
            }
            let feats: Vec<AnchorFeatures<'_>> = srcs
                .iter()
                .map(|&a| AnchorFeatures {
                    shot: a,
                    feats: &shot_feats[a],
                })
                .collect();
            build_correspondence((s, f), &o_cond.sub(&[s, f]), &feats).map(|m| Some(Arc::new(m)))
        })?;
        Ok(Self {
            t,
            layer,
            id,
            anchors: anchors.to_vec(),
            blend,
            masks,
            maps,
            applied: Vec::new(),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn map(&self, shot: usize, frame: usize) -> Option<&Arc<CorrespondenceMap>> {
        self.maps[shot * self.masks.frames() + frame].as_ref()
    }

    pub fn applied_passes(&self) -> &[Pass] {
        &self.applied
    }

    /// Applies the step's maps to one pass's outputs. The handle refuses a
    /// different (t, layer) and a second application to the same pass.
    pub fn apply(&mut self, t: u32, layer: usize, pass: Pass, o: &Tensor, par: Parallelism) -> Result<Tensor> {
        if (t, layer) != (self.t, self.layer) {
            return Err(Error::Integrity(format!(
                "refinement handle for t={} layer={} used at t={t} layer={layer}",
                self.t, self.layer
            )));
        }
        if self.applied.contains(&pass) {
            return Err(Error::Integrity(format!("refinement applied twice to {pass:?}")));
        }
        let (s_n, f_n, p, d) = o.dims4()?;
        if [s_n, f_n, p] != [self.masks.shots(), self.masks.frames(), self.masks.patches()] {
            return Err(Error::dims(
                "refinement apply",
                o.shape(),
                &[self.masks.shots(), self.masks.frames(), self.masks.patches()],
            ));
        }
        let shot_feats: Vec<Tensor> = (0..s_n).map(|s| o.sub(&[s])).collect();
        let parts = par.try_map(s_n * f_n, |i| {
            let (s, f) = (i / f_n, i % f_n);
            let target = o.sub(&[s, f]);
            let Some(map) = &self.maps[i] else {
                return Ok(target.into_data());
            };
            let feats: Vec<AnchorFeatures<'_>> = sources_for(&self.anchors, s)
                .into_iter()
                .map(|a| AnchorFeatures {
                    shot: a,
                    feats: &shot_feats[a],
                })
                .collect();
            inject_refinement(&target, &feats, map, self.masks.mask(s, f), self.blend).map(Tensor::into_data)
        })?;
        self.applied.push(pass);
        Tensor::new(vec![s_n, f_n, p, d], parts.concat())
    }
}
