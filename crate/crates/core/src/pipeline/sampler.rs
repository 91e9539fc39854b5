//! Deterministic DDIM sampling with the consistency hooks wired in.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    sub_batched_attention_with, AttentionMode, AttentionTopology, AttnFeatures, QueryRole, SdsaOptions,
};
use crate::audit::{AuditLog, AuditRecord, Pass};
use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::query_control::{select_q, FeatureCache, KeyframeIndex, QueryControl};
use crate::refinement::RefinementStep;
use crate::seeding::{fingerprint, rng_for};
use crate::subject_mask::{compute_masks, estimate_x0, NoiseSchedule, Segmenter, SubjectMaskSet};
use crate::tensor::Tensor;

use super::config::{StoryboardConfig, Window};
use super::model::{DenoiserHooks, HookCtx, NoHooks, ToyModel};

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain generation; caches queries.
    Vanilla,
    /// SDSA and query injection.
    Consistent,
    /// Consistent plus refinement injection.
    Refined,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Vanilla, Mode::Consistent, Mode::Refined];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Consistent => "consistent",
            Mode::Refined => "refined",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown mode `{s}`")))
    }
}

/// Sampler step `k` visits `t = round(T·(1 − k/steps))`.
pub fn mapped_timesteps(total: u32, steps: u32) -> Vec<u32> {
    (0..steps)
        .map(|k| (total as f64 * (1.0 - k as f64 / steps as f64)).round() as u32)
        .collect()
}

/// Number of mapped timesteps inside `window`.
pub fn steps_in_window(timesteps: &[u32], window: Option<Window>) -> usize {
    window.map_or(0, |w| timesteps.iter().filter(|&&t| w.contains(t)).count())
}

/// Anchors read each other; every other shot reads itself and the anchors.
pub fn anchor_topology(shots: usize, anchors: &[usize]) -> Result<AttentionTopology> {
    if anchors.is_empty() {
        return Err(Error::config("anchor set is empty"));
    }
    if let Some(&bad) = anchors.iter().find(|&&a| a >= shots) {
        return Err(Error::config(format!("anchor {bad} outside {shots} shots")));
    }
    let sources = (0..shots)
        .map(|s| {
            let mut v = anchors.to_vec();
            if !anchors.contains(&s) {
                v.push(s);
            }
            v
        })
        .collect();
    AttentionTopology::from_sources(sources)
}

/// Per-shot initial noise `F×P×C`, each shot from its own seeded stream so a
/// shot's noise does not depend on the batch it is in.
pub fn initial_noise(seed: u64, shots: usize, frames: usize, patches: usize, channels: usize) -> Tensor {
    let parts: Vec<Tensor> = (0..shots)
        .map(|s| {
            let mut rng = rng_for(&[seed, 0x4e4f, s as u64]);
            Tensor::from_fn(&[frames, patches, channels], |_| StandardNormal.sample(&mut rng))
        })
        .collect();
    Tensor::stack(&parts).expect("equal shot shapes")
}

/// Fingerprint of the sampler's random state: the seed and the initial noise.
pub fn seed_fingerprint(seed: u64, noise: &Tensor) -> String {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(&noise.to_bytes());
    fingerprint(&bytes)
}

/// Everything one sampling pass needs.
pub struct SampleRequest<'a> {
    pub config: &'a StoryboardConfig,
    pub model: &'a ToyModel,
    /// Full prompt per shot.
    pub prompts: &'a [String],
    pub subject: &'a str,
    pub mode: Mode,
    /// Required for consistent and refined modes.
    pub cache: Option<&'a FeatureCache>,
    pub segmenter: &'a dyn Segmenter,
    pub par: Parallelism,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub latents: Tensor,
    pub audit: AuditLog,
    pub seed_fingerprint: String,
    /// Filled by vanilla passes only.
    pub cache: Option<FeatureCache>,
    /// Masks of the last step that computed any.
    pub last_masks: Option<SubjectMaskSet>,
    pub mask_steps: usize,
    pub mask_fallbacks: usize,
}

/// Masks resampled to each layer's grid on demand.
struct StepMasks {
    base_side: usize,
    base: SubjectMaskSet,
    by_side: BTreeMap<usize, SubjectMaskSet>,
}

impl StepMasks {
    fn new(base: SubjectMaskSet, base_side: usize) -> Self {
        Self {
            base_side,
            base,
            by_side: BTreeMap::new(),
        }
    }

    fn at(&mut self, side: usize) -> Result<&SubjectMaskSet> {
        if side == self.base_side {
            return Ok(&self.base);
        }
        if !self.by_side.contains_key(&side) {
            let m = self.base.resample(self.base_side, side)?;
            self.by_side.insert(side, m);
        }
        Ok(&self.by_side[&side])
    }
}

struct StepHooks<'a> {
    mode: Mode,
    t: u32,
    step: usize,
    layers: usize,
    par: Parallelism,
    audit: &'a mut AuditLog,
    vanilla_cache: Option<&'a mut FeatureCache>,
    cache: Option<&'a FeatureCache>,
    ctl: &'a QueryControl,
    sdsa: Option<SdsaOptions>,
    refine: Option<(&'a BTreeSet<usize>, f64)>,
    anchors: &'a [usize],
    masks: Option<StepMasks>,
    refine_steps: BTreeMap<usize, RefinementStep>,
}

impl StepHooks<'_> {
    fn masks_at(&mut self, side: usize) -> Result<SubjectMaskSet> {
        self.masks
            .as_mut()
            .ok_or_else(|| Error::Precondition("subject masks missing for an active window".into()))?
            .at(side)
            .cloned()
    }
}

impl DenoiserHooks for StepHooks<'_> {
    fn query(&mut self, ctx: &HookCtx, q: Tensor) -> Result<(Tensor, QueryRole)> {
        match (self.mode, ctx.pass) {
            (Mode::Vanilla, Pass::Cond) => {
                if let Some(c) = self.vanilla_cache.as_deref_mut() {
                    c.insert(ctx.t, ctx.layer, q.clone())?;
                }
                Ok((q, QueryRole::Vanilla))
            }
            (Mode::Vanilla, Pass::Uncond) => Ok((q, QueryRole::Vanilla)),
            (_, Pass::Uncond) => Ok((q, QueryRole::Consistent)),
            (_, Pass::Cond) => {
                let cache = self
                    .cache
                    .ok_or_else(|| Error::Precondition("query injection needs a vanilla cache".into()))?;
                let sel = select_q(ctx.t, ctx.layer, &q, cache, self.ctl, self.par)?;
                self.audit.push(sel.record);
                Ok((sel.q, sel.role))
            }
        }
    }

    fn attend(&mut self, ctx: &HookCtx, feats: &AttnFeatures, sub_batch: usize, par: Parallelism) -> Result<Tensor> {
        let Some(options) = self.sdsa.clone().filter(|_| ctx.pass == Pass::Cond) else {
            return sub_batched_attention_with(feats, AttentionMode::Plain, sub_batch, par);
        };
        let masks = self.masks_at(ctx.side)?;
        let out = sub_batched_attention_with(
            feats,
            AttentionMode::Framewise {
                masks: &masks,
                options: &options,
            },
            sub_batch,
            par,
        )?;
        self.audit.push(AuditRecord::Sdsa {
            t: ctx.t,
            layer: ctx.layer,
        });
        Ok(out)
    }

    fn output(&mut self, ctx: &HookCtx, o: Tensor) -> Result<Tensor> {
        let Some((layers, blend)) = self.refine else {
            return Ok(o);
        };
        if !layers.contains(&ctx.layer) {
            return Ok(o);
        }
        if ctx.pass == Pass::Cond {
            let masks = self.masks_at(ctx.side)?;
            let id = (self.step * self.layers + ctx.layer) as u64;
            let step = RefinementStep::build(ctx.t, ctx.layer, id, &o, self.anchors, masks, blend, self.par)?;
            self.refine_steps.insert(ctx.layer, step);
        }
        let step = self.refine_steps.get_mut(&ctx.layer).ok_or_else(|| {
            Error::Integrity("unconditional refinement without a conditional map".into())
        })?;
        let out = step.apply(ctx.t, ctx.layer, ctx.pass, &o, self.par)?;
        self.audit.push(AuditRecord::Refine {
            t: ctx.t,
            layer: ctx.layer,
            pass: ctx.pass,
            map_id: step.id(),
        });
        Ok(out)
    }
}

/// Runs one full denoising pass.
pub fn sample(req: &SampleRequest<'_>) -> Result<SampleOutput> {
    let cfg = req.config;
    let shots = req.prompts.len();
    cfg.validate(shots)?;
    let spec = req.model.spec();
    if spec != &cfg.model {
        return Err(Error::config("model does not match config.model"));
    }
    let (f_n, side, c) = (spec.frames, spec.patches_per_side, spec.channels);
    let p = side * side;
    let sched = NoiseSchedule::for_total_steps(cfg.total_steps);
    let timesteps = mapped_timesteps(cfg.total_steps, cfg.sampler_steps);
    let anchors = cfg.resolved_anchors(shots)?;
    let topology = anchor_topology(shots, &anchors)?;
    let sub_batch = cfg.effective_sub_batch(shots);
    let refine_layers: BTreeSet<usize> = match &cfg.refine_layers {
        Some(l) => l.iter().copied().collect(),
        None => BTreeSet::from([req.model.coarse_layer()]),
    };
    let ctl = QueryControl {
        t_pres: cfg.t_pres,
        injection_layers: cfg.injection_layers.as_ref().map(|l| l.iter().copied().collect()),
        dropout: cfg.q_dropout,
        keyframes: KeyframeIndex::new(f_n, cfg.keyframe_spacing)?,
        blend_weight: cfg.blend_weight,
        seed: cfg.seed,
    };

    let mut x = initial_noise(cfg.seed, shots, f_n, p, c);
    let fp = seed_fingerprint(cfg.seed, &x);
    let mut vanilla_cache = match req.mode {
        Mode::Vanilla => Some(FeatureCache::new(fp.clone())),
        _ => {
            let cache = req
                .cache
                .ok_or_else(|| Error::Precondition(format!("{} pass needs a vanilla cache", req.mode)))?;
            if cache.seed_fingerprint() != fp {
                return Err(Error::Reproducibility(format!(
                    "cache fingerprint {} does not match sampler fingerprint {fp}",
                    cache.seed_fingerprint()
                )));
            }
            None
        }
    };

    let cond_bias: Vec<Vec<f32>> = req.prompts.iter().map(|s| req.model.prompt_bias(s)).collect();
    let uncond_bias = vec![vec![0.0f32; c]; shots];
    let mut audit = AuditLog::default();
    let mut prev_eps: Option<Tensor> = None;
    let mut last_masks = None;
    let (mut mask_steps, mut mask_fallbacks) = (0, 0);

    for (k, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
        let alpha = sched.alpha_bar(t)?;
        let alpha_prev = sched.alpha_bar(t_prev)?;
        let sdsa_on = req.mode != Mode::Vanilla && cfg.sdsa_window.is_some_and(|w| w.contains(t));
        let refine_on = req.mode == Mode::Refined && cfg.refine_window.is_some_and(|w| w.contains(t));

        let masks = if sdsa_on || refine_on {
            let eps = match &prev_eps {
                Some(e) => e.clone(),
                None => req.model.denoise(&x, t, alpha, &cond_bias, Pass::Cond, &mut NoHooks, sub_batch, req.par)?,
            };
            let x0 = estimate_x0(&x, &eps, t, &sched)?;
            let m = compute_masks(&x0, req.subject, req.segmenter, req.par)?;
            m.validate()?;
            mask_steps += 1;
            mask_fallbacks += m.fallback_count();
            last_masks = Some(m.clone());
            Some(StepMasks::new(m, side))
        } else {
            None
        };

        let mut hooks = StepHooks {
            mode: req.mode,
            t,
            step: k,
            layers: spec.layers,
            par: req.par,
            audit: &mut audit,
            vanilla_cache: vanilla_cache.as_mut(),
            cache: req.cache,
            ctl: &ctl,
            sdsa: sdsa_on.then(|| SdsaOptions {
                topology: Some(topology.clone()),
                middle_frame: cfg.middle_frame,
            }),
            refine: refine_on.then_some((&refine_layers, cfg.refine_blend)),
            anchors: &anchors,
            masks,
            refine_steps: BTreeMap::new(),
        };
        let e_c = req
            .model
            .denoise(&x, t, alpha, &cond_bias, Pass::Cond, &mut hooks, sub_batch, req.par)?;
        let e_u = req
            .model
            .denoise(&x, t, alpha, &uncond_bias, Pass::Uncond, &mut hooks, sub_batch, req.par)?;
        debug_assert_eq!(hooks.t, t);
        if let Some(bad) = hooks.refine_steps.values().find(|s| s.applied_passes().len() != 2) {
            return Err(Error::Integrity(format!(
                "refinement map {} was not applied to both passes",
                bad.id()
            )));
        }

        let g = cfg.guidance_scale;
        let eps_data: Vec<f32> = e_u
            .data()
            .iter()
            .zip(e_c.data())
            .map(|(&u, &cnd)| (u as f64 + g * (cnd as f64 - u as f64)) as f32)
            .collect();
        let eps = Tensor::new(x.shape().to_vec(), eps_data)?;
        let x0 = estimate_x0(&x, &eps, t, &sched)?;
        let (sa, sb) = (alpha_prev.sqrt(), (1.0 - alpha_prev).sqrt());
        let next: Vec<f32> = x0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&x0v, &ev)| (sa * x0v as f64 + sb * ev as f64) as f32)
            .collect();
        x = Tensor::new(x.shape().to_vec(), next)?;
        if !x.all_finite() {
            return Err(Error::NonFinite("sampler update"));
        }
        prev_eps = Some(eps);
    }

    if let Some(cache) = &vanilla_cache {
        cache.ensure_covers(&timesteps, spec.layers)?;
    }
    Ok(SampleOutput {
        latents: x,
        audit,
        seed_fingerprint: fp,
        cache: vanilla_cache,
        last_masks,
        mask_steps,
        mask_fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_window_counts() {
        let ts = mapped_timesteps(1000, 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[49], 20);
        assert_eq!(steps_in_window(&ts, Some(Window::new(550, 950))), 20);
        assert_eq!(steps_in_window(&ts, Some(Window::new(590, 950))), 18);
        assert_eq!(ts.iter().filter(|&&t| t >= 750).count(), 13);
        assert_eq!(steps_in_window(&ts, None), 0);
    }

    #[test]
    fn topology_definition() {
        let t = anchor_topology(3, &[0, 1]).unwrap();
        assert_eq!(t.sources(0), &[0, 1]);
        assert_eq!(t.sources(2), &[0, 1, 2]);
        assert_eq!(anchor_topology(3, &[0, 1, 2]).unwrap(), AttentionTopology::full(3));
        assert!(anchor_topology(3, &[]).is_err());
        assert!(anchor_topology(3, &[3]).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("refined".parse::<Mode>().unwrap(), Mode::Refined);
        assert!("fancy".parse::<Mode>().is_err());
    }
}
