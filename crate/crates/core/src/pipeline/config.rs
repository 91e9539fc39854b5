use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::query_control::BlendWeight;

/// Inclusive timestep interval, written as `[lo, hi]`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct Window {
    pub lo: u32,
    pub hi: u32,
}

impl Window {
    pub const fn new(lo: u32, hi: u32) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, t: u32) -> bool {
        self.lo <= t && t <= self.hi
    }
}

impl From<[u32; 2]> for Window {
    fn from([lo, hi]: [u32; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<Window> for [u32; 2] {
    fn from(w: Window) -> Self {
        [w.lo, w.hi]
    }
}

/// Shape and weight seed of the toy spatial-attention denoiser.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelSpec {
    pub layers: usize,
    pub patches_per_side: usize,
    pub channels: usize,
    pub frames: usize,
    pub weight_seed: u64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self {
            layers: 4,
            patches_per_side: 8,
            channels: 16,
            frames: 8,
            weight_seed: 0,
        }
    }
}

impl ToyModelSpec {
    pub fn patches(&self) -> usize {
        self.patches_per_side * self.patches_per_side
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("patches_per_side", self.patches_per_side),
            ("channels", self.channels),
            ("frames", self.frames),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoryboardConfig {
    pub total_steps: u32,
    pub sampler_steps: u32,
    pub t_pres: u32,
    /// `None` disables framewise SDSA.
    pub sdsa_window: Option<Window>,
    /// `None` disables refinement injection.
    pub refine_window: Option<Window>,
    pub q_dropout: f64,
    pub keyframe_spacing: usize,
    /// `None` means the first two shots.
    pub anchors: Option<Vec<usize>>,
    pub seed: u64,
    /// `None` processes every (shot, frame) in one batch.
    pub sub_batch: Option<usize>,
    pub model: ToyModelSpec,
    /// Layers receiving query injection; `None` means all.
    pub injection_layers: Option<Vec<usize>>,
    /// Layers receiving refinement injection; `None` means the coarse layer.
    pub refine_layers: Option<Vec<usize>>,
    pub refine_blend: f64,
    pub blend_weight: BlendWeight,
    pub guidance_scale: f64,
    /// Also attend to each source shot's middle frame under SDSA.
    pub middle_frame: bool,
    pub segmenter: String,
    pub flow_threshold: f64,
    pub flow_radius: usize,
}

impl Default for StoryboardConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            sampler_steps: 50,
            t_pres: 750,
            sdsa_window: Some(Window::new(550, 950)),
            refine_window: Some(Window::new(590, 950)),
            q_dropout: 0.0,
            keyframe_spacing: 4,
            anchors: None,
            seed: 0,
            sub_batch: None,
            model: ToyModelSpec::default(),
            injection_layers: None,
            refine_layers: None,
            refine_blend: 0.8,
            blend_weight: BlendWeight::Sigmoid,
            guidance_scale: 1.0,
            middle_frame: false,
            segmenter: "subject-channel".into(),
            flow_threshold: 1.0,
            flow_radius: 4,
        }
    }
}

impl StoryboardConfig {
    /// Anchor shot ids for a batch of `shots`, sorted.
    pub fn resolved_anchors(&self, shots: usize) -> Result<Vec<usize>> {
        let mut a = match &self.anchors {
            Some(a) => a.clone(),
            None => (0..shots.min(2)).collect(),
        };
        a.sort_unstable();
        a.dedup();
        if a.is_empty() {
            return Err(Error::config("anchor set is empty"));
        }
        if let Some(&bad) = a.iter().find(|&&s| s >= shots) {
            return Err(Error::config(format!("anchor {bad} outside {shots} shots")));
        }
        Ok(a)
    }

    /// Checks every field against the batch size.
    pub fn validate(&self, shots: usize) -> Result<()> {
        self.model.validate()?;
        if shots == 0 {
            return Err(Error::config("no shots to generate"));
        }
        if self.total_steps == 0 || self.sampler_steps == 0 {
            return Err(Error::config("total_steps and sampler_steps must be positive"));
        }
        if self.sampler_steps > self.total_steps {
            return Err(Error::config("sampler_steps exceeds total_steps"));
        }
        if self.t_pres > self.total_steps {
            return Err(Error::Range {
                what: "t_pres",
                value: self.t_pres as i64,
                lo: 0,
                hi: self.total_steps as i64,
            });
        }
        for (name, w) in [("sdsa_window", self.sdsa_window), ("refine_window", self.refine_window)] {
            if let Some(w) = w {
                if w.lo > w.hi || w.hi > self.total_steps {
                    return Err(Error::config(format!(
                        "{name} [{}, {}] not inside [0, {}]",
                        w.lo, w.hi, self.total_steps
                    )));
                }
            }
        }
        for (name, v) in [
            ("q_dropout", self.q_dropout),
            ("refine_blend", self.refine_blend),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::config("guidance_scale must be finite"));
        }
        if self.keyframe_spacing == 0 {
            return Err(Error::config("keyframe_spacing must be positive"));
        }
        if let Some(b) = self.sub_batch {
            let items = shots * self.model.frames;
            if b == 0 || b > items {
                return Err(Error::config(format!("sub_batch {b} outside 1..={items}")));
            }
        }
        for (name, layers) in [
            ("injection_layers", &self.injection_layers),
            ("refine_layers", &self.refine_layers),
        ] {
            if let Some(bad) = layers.iter().flatten().find(|&&l| l >= self.model.layers) {
                return Err(Error::config(format!(
                    "{name} contains {bad} but the model has {} layers",
                    self.model.layers
                )));
            }
        }
        if self.flow_threshold.is_nan() {
            return Err(Error::config("flow_threshold is NaN"));
        }
        self.resolved_anchors(shots)?;
        Ok(())
    }

    /// The sub-batch size actually used for `shots` shots.
    pub fn effective_sub_batch(&self, shots: usize) -> usize {
        self.sub_batch.unwrap_or(shots * self.model.frames)
    }
}
