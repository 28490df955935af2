//! The shared K-way latent variable: posteriors, prior KL, latent
//! embeddings and the emotion head.

use demp_tensor::{ParamId, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ctx, DialogueModel, EncoderOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorSource {
    FromContext,
    FromResponse,
}

/// `q(z | ·)` over the K latent categories.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    pub logits: Tensor,
    pub log_probs: Tensor,
    pub probs: Tensor,
    pub source: PosteriorSource,
}

impl LatentPosterior {
    pub fn from_logits(logits: Tensor, source: PosteriorSource) -> Result<Self> {
        let logits = if logits.shape().len() == 1 {
            logits
        } else {
            logits.reshape(&[logits.numel()])?
        };
        Ok(LatentPosterior {
            log_probs: logits.log_softmax(0)?,
            probs: logits.softmax(0)?,
            logits,
            source,
        })
    }

    /// Builds a posterior that reproduces the given probabilities. Zero
    /// entries map to the smallest positive logit offset, which contributes
    /// nothing representable to any sum.
    pub fn from_probs(ctx: &Ctx, probs: &[f64], source: PosteriorSource) -> Result<Self> {
        let logits = probs.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
        Self::from_logits(ctx.constant(logits, &[probs.len()])?, source)
    }

    pub fn k(&self) -> usize {
        self.probs.numel()
    }

    pub fn prob_values(&self) -> Vec<f64> {
        self.probs.values()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        self.logits.with_values(argmax)
    }
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `q(z | x) = softmax(FFN(H_0))` from a model's own posterior head.
pub fn posterior(ctx: &Ctx, model: &DialogueModel, enc: &EncoderOutput, source: PosteriorSource) -> Result<LatentPosterior> {
    let logits = model.posterior_logits(ctx, &enc.summary()?)?;
    LatentPosterior::from_logits(logits, source)
}

/// `KL(q || uniform) = Σ q_k (ln q_k + ln K)`.
pub fn kl_to_prior(q: &LatentPosterior) -> Result<Tensor> {
    let k = q.k();
    let ln_k = q.probs.tape().constant(vec![(k as f64).ln(); k], &[k])?;
    Ok(q.probs.mul(&q.log_probs.add(&ln_k)?)?.sum())
}

/// Plain-number version of [`kl_to_prior`] with `0 ln 0 = 0`.
pub fn kl_to_uniform(q: &[f64]) -> f64 {
    let ln_k = (q.len() as f64).ln();
    q.iter().filter(|p| **p > 0.0).map(|p| p * (p.ln() + ln_k)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum SampleMode {
    /// One-hot sample in the forward pass, Gumbel-softmax gradient backward.
    StGumbel { temperature: f64 },
    /// Most probable category, no gradient to `q`.
    Argmax,
    /// Every category, weighted by `q`.
    Enumerate,
}

/// The outcome of [`sample_latent`].
#[derive(Debug, Clone)]
pub enum LatentSample {
    /// A single category. `weights` is a `[1 × K]` row selecting it, carrying
    /// the straight-through gradient when sampled.
    Single { index: usize, weights: Tensor },
    /// All K categories with their probabilities `[K]`.
    Enumerate { weights: Tensor },
}

impl LatentSample {
    /// `(index, weight)` for every category that takes part.
    pub fn indices(&self) -> Vec<(usize, f64)> {
        match self {
            LatentSample::Single { index, .. } => vec![(*index, 1.0)],
            LatentSample::Enumerate { weights } => weights.values().into_iter().enumerate().collect(),
        }
    }
}

/// Draws from `q` under `mode`.
pub fn sample_latent<R: Rng + ?Sized>(q: &LatentPosterior, mode: SampleMode, rng: &mut R) -> Result<LatentSample> {
    let tape = q.probs.tape();
    let k = q.k();
    match mode {
        SampleMode::Argmax => {
            let index = q.argmax();
            Ok(LatentSample::Single {
                index,
                weights: tape.constant(one_hot(index, k), &[1, k])?,
            })
        }
        SampleMode::Enumerate => Ok(LatentSample::Enumerate { weights: q.probs.clone() }),
        SampleMode::StGumbel { temperature } => {
            let noise: Vec<f64> = (0..k).map(|_| gumbel(rng)).collect();
            st_gumbel(q, &noise, temperature)
        }
    }
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Straight-through sample from fixed Gumbel `noise`.
pub fn st_gumbel(q: &LatentPosterior, noise: &[f64], temperature: f64) -> Result<LatentSample> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("gumbel temperature must be positive, got {temperature}")));
    }
    let k = q.k();
    let tape = q.probs.tape();
    let perturbed = q.log_probs.add(&tape.constant(noise.to_vec(), &[k])?)?;
    let index = perturbed.with_values(argmax);
    let soft = perturbed.scale(1.0 / temperature).softmax(0)?;
    // Forward value is exactly one-hot: soft - soft is 0 bit for bit.
    let st = soft.sub(&soft.detach())?.add(&tape.constant(one_hot(index, k), &[k])?)?;
    Ok(LatentSample::Single {
        index,
        weights: st.reshape(&[1, k])?,
    })
}

fn one_hot(index: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[index] = 1.0;
    v
}

/// Latent table `E_z [K × d]` and emotion head `W_e [labels × d]`.
#[derive(Debug, Clone)]
pub struct LatentSpace {
    pub e_z: ParamId,
    pub w_e: ParamId,
    pub k: usize,
    pub n_labels: usize,
}

impl LatentSpace {
    /// `E_[z]` for category `index`, as `[1 × d]`.
    pub fn embedding(&self, ctx: &Ctx, index: usize) -> Result<Tensor> {
        Ok(ctx.p(self.e_z).embedding(&[index])?)
    }

    /// `weightsᵀ E_z`: the selected row for a one-hot, the posterior mean
    /// embedding for probabilities.
    pub fn mix(&self, ctx: &Ctx, weights: &Tensor) -> Result<Tensor> {
        let w = weights.reshape(&[1, self.k])?;
        Ok(w.matmul(&ctx.p(self.e_z))?)
    }

    /// Emotion logits `W_e E_[z]` as `[1 × labels]`.
    pub fn emotion_logits(&self, ctx: &Ctx, e: &Tensor) -> Result<Tensor> {
        Ok(e.matmul_t(&ctx.p(self.w_e))?)
    }

    /// `p_e = softmax(W_e E_[z])`.
    pub fn emotion_probs(&self, ctx: &Ctx, e: &Tensor) -> Result<Vec<f64>> {
        Ok(self.emotion_logits(ctx, e)?.softmax(1)?.values())
    }

    /// `-ln p_e[label]`.
    pub fn emotion_loss(&self, ctx: &Ctx, e: &Tensor, label: usize) -> Result<Tensor> {
        if label >= self.n_labels {
            return Err(Error::invalid(format!(
                "emotion label id {label} outside {} labels",
                self.n_labels
            )));
        }
        Ok(self.emotion_logits(ctx, e)?.cross_entropy(&[label], None)?)
    }

    /// Embedding used for emotion supervision under `sample`.
    pub fn supervised_embedding(&self, ctx: &Ctx, sample: &LatentSample) -> Result<Tensor> {
        match sample {
            LatentSample::Single { weights, .. } | LatentSample::Enumerate { weights } => self.mix(ctx, weights),
        }
    }
}
