//! Toy latent video denoiser: a stack of per-frame spatial self-attention
//! layers with residual connections and an additive prompt bias. It predicts
//! a bounded clean latent and reports the implied noise estimate.

use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::attention::{sub_batched_attention_with, AttentionMode, AttnFeatures, LayerWeights, QueryRole};
use crate::audit::Pass;
use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::seeding::rng_for;
use crate::tensor::{project_last, Tensor};

use super::config::ToyModelSpec;

/// Position of a hook invocation.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct HookCtx {
    pub t: u32,
    pub layer: usize,
    pub pass: Pass,
    /// Patch grid side of this layer.
    pub side: usize,
}

/// Callbacks invoked by [`ToyModel::denoise`] at fixed points of every layer:
/// query substitution before attention, the attention itself, and output
/// injection after it. Errors abort the step and are tagged with `(t, layer)`.
pub trait DenoiserHooks {
    fn query(&mut self, _ctx: &HookCtx, q: Tensor) -> Result<(Tensor, QueryRole)> {
        Ok((q, QueryRole::Vanilla))
    }

    fn attend(&mut self, _ctx: &HookCtx, feats: &AttnFeatures, sub_batch: usize, par: Parallelism) -> Result<Tensor> {
        sub_batched_attention_with(feats, AttentionMode::Plain, sub_batch, par)
    }

    fn output(&mut self, _ctx: &HookCtx, o: Tensor) -> Result<Tensor> {
        Ok(o)
    }
}

/// Hooks that change nothing.
pub struct NoHooks;

impl DenoiserHooks for NoHooks {}

#[derive(Clone, Debug)]
pub struct ModelLayer {
    pub weights: LayerWeights,
    pub side: usize,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    spec: ToyModelSpec,
    layers: Vec<ModelLayer>,
    w_out: Tensor,
    coarse: usize,
}

/// Grid side per layer: with three or more layers the inner layers run at
/// half resolution when the grid side is even.
pub fn layer_sides(spec: &ToyModelSpec) -> Vec<usize> {
    let side = spec.patches_per_side;
    let inner = if side % 2 == 0 && side >= 2 { side / 2 } else { side };
    (0..spec.layers)
        .map(|l| {
            if spec.layers >= 3 && l > 0 && l + 1 < spec.layers {
                inner
            } else {
                side
            }
        })
        .collect()
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn gaussian(shape: &[usize], scale: f32, parts: &[u64]) -> Tensor {
    let mut rng = rng_for(parts);
    Tensor::from_fn(shape, |_| {
        let z: f32 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

/// Average-pools each `side_from²` patch grid of a `S×F×P×C` tensor down to
/// `side_to²`.
pub fn pool(x: &Tensor, side_from: usize, side_to: usize) -> Result<Tensor> {
    let (s, f, p, c) = x.dims4()?;
    if side_to == side_from {
        return Ok(x.clone());
    }
    if p != side_from * side_from || side_to == 0 || side_from % side_to != 0 {
        return Err(Error::dims("pool", x.shape(), &[side_to, side_to]));
    }
    let k = side_from / side_to;
    let inv = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(s * f * side_to * side_to * c);
    let mut acc = vec![0.0f64; c];
    for frame in x.data().chunks_exact(p * c) {
        for y in 0..side_to {
            for xx in 0..side_to {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let src = (y * k + dy) * side_from + xx * k + dx;
                        for (a, &v) in acc.iter_mut().zip(&frame[src * c..(src + 1) * c]) {
                            *a += v as f64;
                        }
                    }
                }
                out.extend(acc.iter().map(|a| (a * inv) as f32));
            }
        }
    }
    Tensor::new(vec![s, f, side_to * side_to, c], out)
}

/// Nearest-neighbour upsampling, the adjoint layout of [`pool`].
pub fn upsample(x: &Tensor, side_from: usize, side_to: usize) -> Result<Tensor> {
    let (s, f, p, c) = x.dims4()?;
    if side_to == side_from {
        return Ok(x.clone());
    }
    if p != side_from * side_from || side_from == 0 || side_to % side_from != 0 {
        return Err(Error::dims("upsample", x.shape(), &[side_to, side_to]));
    }
    let k = side_to / side_from;
    let mut out = Vec::with_capacity(s * f * side_to * side_to * c);
    for frame in x.data().chunks_exact(p * c) {
        for y in 0..side_to {
            for xx in 0..side_to {
                let src = (y / k) * side_from + xx / k;
                out.extend_from_slice(&frame[src * c..(src + 1) * c]);
            }
        }
    }
    Tensor::new(vec![s, f, side_to * side_to, c], out)
}

impl ToyModel {
    pub fn new(spec: &ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let sides = layer_sides(spec);
        let layers = sides
            .iter()
            .enumerate()
            .map(|(l, &side)| ModelLayer {
                weights: LayerWeights::random(c, c, &mut rng_for(&[spec.weight_seed, 0x4c41, l as u64])),
                side,
            })
            .collect();
        let coarse = (0..sides.len())
            .min_by_key(|&l| (sides[l], l))
            .expect("at least one layer");
        let w_out = gaussian(&[c, c], (1.0 / c as f64).sqrt() as f32, &[spec.weight_seed, 0x4f55]);
        Ok(Self {
            spec: spec.clone(),
            layers,
            w_out,
            coarse,
        })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[ModelLayer] {
        &self.layers
    }

    /// The first layer with the smallest patch grid.
    pub fn coarse_layer(&self) -> usize {
        self.coarse
    }

    /// Mean of deterministic per-token vectors derived from a hash of each
    /// lowercase alphanumeric token. Empty prompts give the zero vector.
    pub fn prompt_bias(&self, prompt: &str) -> Vec<f32> {
        let c = self.spec.channels;
        let tokens: Vec<String> = prompt
            .split(|ch: char| !ch.is_alphanumeric())
            .filter(|s| !s.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut acc = vec![0.0f64; c];
        for tok in &tokens {
            let digest = Sha256::digest(tok.as_bytes());
            let h = u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"));
            let v = gaussian(&[c], 0.5, &[self.spec.weight_seed, 0x544f, h]);
            for (a, &x) in acc.iter_mut().zip(v.data()) {
                *a += x as f64;
            }
        }
        let n = tokens.len().max(1) as f64;
        acc.into_iter().map(|a| (a / n) as f32).collect()
    }

    /// One noise prediction for a `S×F×P×C` batch. `bias` holds one prompt
    /// vector per shot (zeros for the unconditional pass).
    #[allow(clippy::too_many_arguments)]
    pub fn denoise(
        &self,
        x: &Tensor,
        t: u32,
        alpha_bar: f64,
        bias: &[Vec<f32>],
        pass: Pass,
        hooks: &mut dyn DenoiserHooks,
        sub_batch: usize,
        par: Parallelism,
    ) -> Result<Tensor> {
        let (s_n, f_n, p, c) = x.dims4()?;
        let side = self.spec.patches_per_side;
        if p != side * side || c != self.spec.channels || f_n != self.spec.frames {
            return Err(Error::dims(
                "denoise",
                x.shape(),
                &[s_n, self.spec.frames, side * side, self.spec.channels],
            ));
        }
        if bias.len() != s_n || bias.iter().any(|b| b.len() != c) {
            return Err(Error::dims("prompt bias", &[s_n, c], &[bias.len()]));
        }
        // `content` is everything the layers add on top of the input latent.
        let mut content = Tensor::zeros(x.shape());
        for (s, shot) in content.data_mut().chunks_exact_mut(f_n * p * c).enumerate() {
            for row in shot.chunks_exact_mut(c) {
                row.copy_from_slice(&bias[s]);
            }
        }

        for (l, layer) in self.layers.iter().enumerate() {
            let ctx = HookCtx {
                t,
                layer: l,
                pass,
                side: layer.side,
            };
            let at = |e: Error| e.at_step(t, l);
            let h = add(x, &content);
            let hin = pool(&h, side, layer.side).map_err(at)?;
            let w = &layer.weights;
            let q = project_last(&hin, &w.w_q).map_err(at)?;
            let k = project_last(&hin, &w.w_k).map_err(at)?;
            let v = project_last(&hin, &w.w_v).map_err(at)?;
            let (q, role) = hooks.query(&ctx, q).map_err(at)?;
            let feats = AttnFeatures::new(q, k, v, l, role).map_err(at)?;
            let a = hooks.attend(&ctx, &feats, sub_batch, par).map_err(at)?;
            let o = project_last(&a, &w.w_o).map_err(at)?;
            let o = hooks.output(&ctx, o).map_err(at)?;
            let up = upsample(&o, layer.side, side).map_err(at)?;
            for (cv, &ov) in content.data_mut().iter_mut().zip(up.data()) {
                *cv += ov;
            }
        }

        // x̂0 = tanh(√ᾱ·x + content·W_out): the skip term is the best linear
        // denoiser for unit-variance data, so late steps keep their structure.
        let proj = project_last(&content, &self.w_out)?;
        let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
        let eps: Vec<f32> = x
            .data()
            .iter()
            .zip(proj.data())
            .map(|(&xv, &pv)| {
                if sb == 0.0 {
                    return 0.0;
                }
                let x0 = (sa * xv as f64 + pv as f64).tanh();
                ((xv as f64 - sa * x0) / sb) as f32
            })
            .collect();
        let eps = Tensor::new(x.shape().to_vec(), eps)?;
        if !eps.all_finite() {
            return Err(Error::NonFinite("denoise"));
        }
        Ok(eps)
    }
}
