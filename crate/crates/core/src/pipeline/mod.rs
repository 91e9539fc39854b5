//! Three-pass storyboard generation: a vanilla pass that caches queries, a
//! consistent pass with framewise SDSA and query injection, and a refined pass
//! that adds refinement injection.

pub mod config;
pub mod model;
pub mod sampler;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use config::{StoryboardConfig, ToyModelSpec, Window};
pub use model::{DenoiserHooks, HookCtx, NoHooks, ToyModel};
pub use sampler::{
    anchor_topology, initial_noise, mapped_timesteps, sample, seed_fingerprint, steps_in_window, Mode,
    SampleOutput, SampleRequest,
};

use crate::audit::AuditLog;
use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::query_control::FeatureCache;
use crate::subject_mask::{Segmenter, SegmenterRegistry, SubjectMaskSet};
use crate::tensor::Tensor;

/// The result of one pass.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub config: StoryboardConfig,
    pub prompts: Vec<String>,
    pub mode: Mode,
    pub outputs: Tensor,
    pub audit: AuditLog,
    pub seed_fingerprint: String,
    pub last_masks: Option<SubjectMaskSet>,
    pub mask_fallbacks: usize,
}

/// Runs the passes in order for one batch of shots sharing a subject.
pub struct Pipeline {
    config: StoryboardConfig,
    subject: String,
    prompts: Vec<String>,
    model: ToyModel,
    segmenter: Arc<dyn Segmenter>,
    par: Parallelism,
    cache: Option<FeatureCache>,
    runs: BTreeMap<Mode, PipelineRun>,
}

impl Pipeline {
    pub fn new(config: StoryboardConfig, subject: impl Into<String>, prompts: Vec<String>) -> Result<Self> {
        config.validate(prompts.len())?;
        let segmenter = SegmenterRegistry::default().get(&config.segmenter)?;
        let model = ToyModel::new(&config.model)?;
        Ok(Self {
            config,
            subject: subject.into(),
            prompts,
            model,
            segmenter,
            par: Parallelism::default(),
            cache: None,
            runs: BTreeMap::new(),
        })
    }

    pub fn with_parallelism(mut self, par: Parallelism) -> Self {
        self.par = par;
        self
    }

    pub fn with_segmenter(mut self, segmenter: Arc<dyn Segmenter>) -> Self {
        self.segmenter = segmenter;
        self
    }

    pub fn config(&self) -> &StoryboardConfig {
        &self.config
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn cache(&self) -> Option<&FeatureCache> {
        self.cache.as_ref()
    }

    pub fn output(&self, mode: Mode) -> Option<&PipelineRun> {
        self.runs.get(&mode)
    }

    /// Runs one pass. Consistent needs a completed vanilla pass and refined
    /// needs a completed consistent pass.
    pub fn run(&mut self, mode: Mode) -> Result<&PipelineRun> {
        let needs = match mode {
            Mode::Vanilla => None,
            Mode::Consistent => Some(Mode::Vanilla),
            Mode::Refined => Some(Mode::Consistent),
        };
        if let Some(prev) = needs {
            if !self.runs.contains_key(&prev) {
                return Err(Error::Precondition(format!("{mode} pass requires a {prev} pass first")));
            }
        }
        let out = sample(&SampleRequest {
            config: &self.config,
            model: &self.model,
            prompts: &self.prompts,
            subject: &self.subject,
            mode,
            cache: self.cache.as_ref(),
            segmenter: self.segmenter.as_ref(),
            par: self.par,
        })?;
        if mode == Mode::Vanilla {
            self.cache = out.cache;
            self.runs.clear();
        }
        let run = PipelineRun {
            config: self.config.clone(),
            prompts: self.prompts.clone(),
            mode,
            outputs: out.latents,
            audit: out.audit,
            seed_fingerprint: out.seed_fingerprint,
            last_masks: out.last_masks,
            mask_fallbacks: out.mask_fallbacks,
        };
        self.runs.insert(mode, run);
        Ok(&self.runs[&mode])
    }

    /// Runs every pass up to and including `last`.
    pub fn run_through(&mut self, last: Mode) -> Result<()> {
        for mode in Mode::ALL.into_iter().filter(|&m| m <= last) {
            self.run(mode)?;
        }
        Ok(())
    }
}
