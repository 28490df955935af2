//! Training losses: paired bounds L1/L2, unpaired bounds L3/L4 with the
//! reconstruction reward, KL annealing, and their combination.

use std::str::FromStr;

use demp_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedExample, SideSeqs};
use crate::error::{Error, Result};
use crate::inference::{decode_sequence, enumerate_sequences, sequence_log_prob, Decoded, Decoding, GenerationPolicy};
use crate::latent::{kl_to_prior, posterior, sample_latent, st_gumbel, LatentPosterior, LatentSample, SampleMode};
use crate::model::{Ctx, Direction, DualEmp, Role};

/// Which losses take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// `L_cy + L_c + L_y`.
    #[default]
    Dual,
    /// `L_cy` only.
    DualPaired,
    /// Forward model only: its NLL, the context posterior's KL and the
    /// context emotion loss.
    SingPaired,
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Ablation::Dual),
            "dual-paired" => Ok(Ablation::DualPaired),
            "sing-paired" => Ok(Ablation::SingPaired),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected dual, dual-paired or sing-paired)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

/// `λ = min(1, step / warmup)`.
pub fn kl_anneal_weight(step: u64, warmup_steps: u64) -> Result<f64> {
    if warmup_steps == 0 {
        return Err(Error::invalid("KL warmup must be at least one step"));
    }
    Ok((step as f64 / warmup_steps as f64).min(1.0))
}

/// Length-normalized reconstruction probability `exp(-nll / len)`.
pub fn reward(nll_sum: f64, target_len: usize) -> f64 {
    (-nll_sum / target_len as f64).exp()
}

/// Per-term values averaged over the examples of each stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1_forward_nll: f64,
    pub l1_backward_nll: f64,
    pub l1_kl: f64,
    pub l2_backward_nll: f64,
    pub l2_forward_nll: f64,
    pub l2_kl: f64,
    pub l_emo_context: f64,
    pub l_emo_response: f64,
    /// The emotion term entering `L_cy`: the mean of the two directions, or
    /// the context term alone when only the forward model trains.
    pub l_emo_paired: f64,
    pub l3_reconstruction: f64,
    pub l3_kl: f64,
    pub l3_emo: f64,
    pub l3_reward_mean: f64,
    pub l3_baseline: f64,
    pub l3_skipped: usize,
    pub l4_reconstruction: f64,
    pub l4_kl: f64,
    pub l4_emo: f64,
    pub l4_reward_mean: f64,
    pub l4_baseline: f64,
    pub l4_skipped: usize,
    pub anneal_weight: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub paired_examples: usize,
    pub unpaired_context_examples: usize,
    pub unpaired_response_examples: usize,
    pub total: f64,
}

impl LossBreakdown {
    pub fn l1(&self) -> f64 {
        self.l1_forward_nll + self.l1_backward_nll + self.anneal_weight * self.l1_kl
    }

    pub fn l2(&self) -> f64 {
        self.l2_backward_nll + self.l2_forward_nll + self.anneal_weight * self.l2_kl
    }

    pub fn l_cy(&self) -> f64 {
        self.l1() + self.l2() + self.alpha * self.l_emo_paired
    }

    pub fn l3(&self) -> f64 {
        self.l3_reconstruction + self.anneal_weight * self.l3_kl
    }

    pub fn l4(&self) -> f64 {
        self.l4_reconstruction + self.anneal_weight * self.l4_kl
    }

    pub fn l_c(&self) -> f64 {
        self.l3() + self.beta * self.l3_emo
    }

    pub fn l_y(&self) -> f64 {
        self.l4() + self.gamma * self.l4_emo
    }

    /// `L_cy + L_c + L_y` from the components.
    pub fn recompute_total(&self) -> f64 {
        self.l_cy() + self.l_c() + self.l_y()
    }
}

/// The tape terms shared by L1 and L2 for one paired example.
pub struct PairedTerms {
    pub l1_forward_nll: Tensor,
    pub l1_backward_nll: Tensor,
    pub l1_kl: Tensor,
    pub l2_backward_nll: Tensor,
    pub l2_forward_nll: Tensor,
    pub l2_kl: Tensor,
    pub emo_context: Tensor,
    pub emo_response: Tensor,
    pub q_context: LatentPosterior,
    pub q_response: LatentPosterior,
}

impl PairedTerms {
    pub fn l1(&self, lambda: f64) -> Result<Tensor> {
        Ok(self.l1_forward_nll.add(&self.l1_backward_nll)?.add(&self.l1_kl.scale(lambda))?)
    }

    pub fn l2(&self, lambda: f64) -> Result<Tensor> {
        Ok(self.l2_backward_nll.add(&self.l2_forward_nll)?.add(&self.l2_kl.scale(lambda))?)
    }

    /// `L1 + L2 + α (L_emo(c) + L_emo(y)) / 2`.
    pub fn l_cy(&self, lambda: f64, alpha: f64) -> Result<Tensor> {
        let emo = self.emo_context.add(&self.emo_response)?.scale(alpha / 2.0);
        Ok(self.l1(lambda)?.add(&self.l2(lambda)?)?.add(&emo)?)
    }
}

fn sides(ex: &EncodedExample) -> Result<(&SideSeqs, &SideSeqs)> {
    match (&ex.context, &ex.response) {
        (Some(c), Some(y)) => Ok((c, y)),
        _ => Err(Error::invalid("paired loss needs both a context and a response")),
    }
}

/// Expected NLL under `sample`: `Σ_k w_k nll(k)` when enumerating, the
/// single term otherwise. `nll` receives the latent embedding.
fn expected<F>(ctx: &Ctx, model: &DualEmp, sample: &LatentSample, per_k: &mut [Option<Tensor>], mut nll: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    match sample {
        LatentSample::Single { weights, .. } => nll(&model.latent.mix(ctx, weights)?),
        LatentSample::Enumerate { weights } => {
            let k = per_k.len();
            let mut terms = Vec::with_capacity(k);
            for (i, slot) in per_k.iter_mut().enumerate() {
                if slot.is_none() {
                    *slot = Some(nll(&model.latent.embedding(ctx, i)?)?);
                }
                terms.push(slot.clone().expect("filled above"));
            }
            Ok(weights.mul(&Tensor::stack_scalars(&terms)?)?.sum())
        }
    }
}

/// Computes both posteriors, the four decoder NLLs and both emotion terms.
/// In enumerate mode each `(direction, k)` NLL is evaluated once and shared
/// by L1 and L2.
pub fn paired_terms<R: Rng + ?Sized>(ctx: &Ctx, model: &DualEmp, ex: &EncodedExample, mode: SampleMode, rng: &mut R) -> Result<PairedTerms> {
    let (c, y) = sides(ex)?;
    let h_c = model.forward.encode(ctx, &c.enc)?;
    let h_y = model.backward.encode(ctx, &y.enc)?;
    let q_c = posterior(ctx, &model.forward, &h_c, Direction::Forward.source())?;
    let q_y = posterior(ctx, &model.backward, &h_y, Direction::Backward.source())?;
    let s_c = sample_latent(&q_c, mode, rng)?;
    let s_y = sample_latent(&q_y, mode, rng)?;

    let k = model.latent.k;
    let mut fwd_cache = vec![None; k];
    let mut bwd_cache = vec![None; k];
    let mut fwd = |e: &Tensor| model.forward.sequence_nll(ctx, &h_c, e, &y.dec_in, &y.target);
    let l1_forward_nll = expected(ctx, model, &s_c, &mut fwd_cache, &mut fwd)?;
    let l2_forward_nll = expected(ctx, model, &s_y, &mut fwd_cache, &mut fwd)?;
    let mut bwd = |e: &Tensor| model.backward.sequence_nll(ctx, &h_y, e, &c.dec_in, &c.target);
    let l1_backward_nll = expected(ctx, model, &s_c, &mut bwd_cache, &mut bwd)?;
    let l2_backward_nll = expected(ctx, model, &s_y, &mut bwd_cache, &mut bwd)?;

    let emo_context = model
        .latent
        .emotion_loss(ctx, &model.latent.supervised_embedding(ctx, &s_c)?, ex.label)?;
    let emo_response = model
        .latent
        .emotion_loss(ctx, &model.latent.supervised_embedding(ctx, &s_y)?, ex.label)?;
    Ok(PairedTerms {
        l1_forward_nll,
        l1_backward_nll,
        l1_kl: kl_to_prior(&q_c)?,
        l2_backward_nll,
        l2_forward_nll,
        l2_kl: kl_to_prior(&q_y)?,
        emo_context,
        emo_response,
        q_context: q_c,
        q_response: q_y,
    })
}

/// Forward-model-only terms: `(NLL, KL, L_emo)` from the context posterior.
pub fn forward_terms<R: Rng + ?Sized>(
    ctx: &Ctx,
    model: &DualEmp,
    ex: &EncodedExample,
    mode: SampleMode,
    rng: &mut R,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, y) = sides(ex)?;
    let h_c = model.forward.encode(ctx, &c.enc)?;
    let q_c = posterior(ctx, &model.forward, &h_c, Direction::Forward.source())?;
    let s_c = sample_latent(&q_c, mode, rng)?;
    let mut cache = vec![None; model.latent.k];
    let nll = expected(ctx, model, &s_c, &mut cache, |e| {
        model.forward.sequence_nll(ctx, &h_c, e, &y.dec_in, &y.target)
    })?;
    let emo = model
        .latent
        .emotion_loss(ctx, &model.latent.supervised_embedding(ctx, &s_c)?, ex.label)?;
    Ok((nll, kl_to_prior(&q_c)?, emo))
}

/// How pseudo sequences are produced for the unpaired bounds.
#[derive(Debug, Clone, PartialEq)]
pub enum PseudoMode {
    /// One multinomial sample per latent choice.
    Sample(GenerationPolicy),
    /// Every sequence the policy allows, weighted by its probability. Only
    /// for tiny vocabularies and lengths.
    Enumerate(GenerationPolicy),
}

impl PseudoMode {
    pub fn policy(&self) -> &GenerationPolicy {
        match self {
            PseudoMode::Sample(p) | PseudoMode::Enumerate(p) => p,
        }
    }
}

/// One generated pseudo sequence and its reward.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSample {
    pub latent: usize,
    pub decoded: Decoded,
    /// Probability of the sequence under the generator (1 when sampled).
    pub weight: f64,
    /// Reconstruction NLL of the observed side given the pseudo sequence.
    pub reconstruction_nll: f64,
    pub reward: f64,
}

/// Pseudo sequences and rewards for one unpaired example, computed without
/// gradients ahead of the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub samples: Vec<RewardSample>,
    /// Gumbel noise behind a straight-through latent draw.
    pub gumbel: Option<Vec<f64>>,
    /// Samples dropped because the pseudo sequence came out empty.
    pub skipped: usize,
}

impl Rollout {
    /// Mean reward, weighting enumerated sequences by their probability.
    pub fn mean_reward(&self) -> Option<f64> {
        if self.samples.is_empty() {
            return None;
        }
        let mut by_latent: std::collections::BTreeMap<usize, (f64, f64)> = Default::default();
        for s in &self.samples {
            let e = by_latent.entry(s.latent).or_default();
            e.0 += s.weight * s.reward;
            e.1 += s.weight;
        }
        Some(by_latent.values().map(|(r, w)| r / w).sum::<f64>() / by_latent.len() as f64)
    }
}

/// The observed side of an unpaired example for `direction`'s generator:
/// contexts feed the forward model, responses the backward model.
fn observed(ex: &EncodedExample, direction: Direction) -> Result<&SideSeqs> {
    let side = match direction {
        Direction::Forward => ex.context.as_ref(),
        Direction::Backward => ex.response.as_ref(),
    };
    side.ok_or_else(|| Error::invalid(format!("{direction:?} unpaired loss is missing its input side")))
}

/// Encoder input for a pseudo sequence as the reconstruction model reads it.
fn pseudo_input(tokens: &[usize], direction: Direction, max_positions: usize) -> Result<SideSeqs> {
    match direction {
        Direction::Forward => SideSeqs::response(tokens.to_vec(), max_positions),
        Direction::Backward => Ok(SideSeqs::context(&[(Role::Speaker, tokens.to_vec())], max_positions)?.0),
    }
}

fn reconstruction_nll(ctx: &Ctx, model: &DualEmp, direction: Direction, x: &SideSeqs, pseudo: &[usize], latent: &Tensor) -> Result<Tensor> {
    let recon = model.model(direction.other());
    let input = pseudo_input(pseudo, direction, model.config.max_positions)?;
    let enc = recon.encode(ctx, &input.enc)?;
    recon.sequence_nll(ctx, &enc, latent, &x.dec_in, &x.target)
}

/// Latent categories taking part and the straight-through noise, if any.
fn latent_choices<R: Rng + ?Sized>(q: &LatentPosterior, mode: SampleMode, rng: &mut R) -> Result<(Vec<usize>, Option<Vec<f64>>)> {
    match mode {
        SampleMode::Enumerate => Ok(((0..q.k()).collect(), None)),
        SampleMode::Argmax => Ok((vec![q.argmax()], None)),
        SampleMode::StGumbel { temperature } => {
            let noise: Vec<f64> = (0..q.k())
                .map(|_| {
                    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    -(-u.ln()).ln()
                })
                .collect();
            let LatentSample::Single { index, .. } = st_gumbel(q, &noise, temperature)? else {
                unreachable!("straight-through sampling yields one category")
            };
            Ok((vec![index], Some(noise)))
        }
    }
}

/// Generates pseudo sequences with `direction`'s model from the observed
/// side and scores them with the other model's reconstruction.
pub fn rollout<R: Rng + ?Sized>(
    model: &DualEmp,
    ex: &EncodedExample,
    direction: Direction,
    mode: SampleMode,
    pseudo: &PseudoMode,
    rng: &mut R,
) -> Result<Rollout> {
    let x = observed(ex, direction)?;
    let gen = model.model(direction);
    let ctx = Ctx::new(&model.store);
    let enc = gen.encode(&ctx, &x.enc)?;
    let q = posterior(&ctx, gen, &enc, direction.source())?;
    let (latents, gumbel) = latent_choices(&q, mode, rng)?;
    let mut samples = Vec::new();
    let mut skipped = 0;
    for k in latents {
        let e = model.latent.embedding(&ctx, k)?;
        let drawn: Vec<(Decoded, f64)> = match pseudo {
            PseudoMode::Sample(policy) => vec![(decode_sequence(&ctx, gen, &enc, &e, policy, Decoding::Sample, rng)?, 1.0)],
            PseudoMode::Enumerate(policy) => enumerate_sequences(&ctx, gen, &enc, &e, policy, 100_000)?,
        };
        for (decoded, weight) in drawn {
            if decoded.tokens.is_empty() {
                skipped += 1;
                continue;
            }
            let scratch = Ctx::new(&model.store);
            let e_k = model.latent.embedding(&scratch, k)?;
            let nll = reconstruction_nll(&scratch, model, direction, x, &decoded.tokens, &e_k)?.item();
            samples.push(RewardSample {
                latent: k,
                decoded,
                weight,
                reconstruction_nll: nll,
                reward: reward(nll, x.target.len()),
            });
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} empty pseudo sequences");
    }
    Ok(Rollout { samples, gumbel, skipped })
}

/// Tape terms of one unpaired bound.
pub struct UnpairedTerms {
    pub reconstruction: Tensor,
    pub kl: Tensor,
    pub emo: Tensor,
    /// Zero-valued surrogate whose gradient is the policy gradient
    /// `-(r - b) ∇ log p(pseudo)` for the generator.
    pub policy: Tensor,
    pub reward_mean: f64,
    pub skipped: usize,
}

impl UnpairedTerms {
    /// `recon + λ KL + weight · L_emo + policy surrogate`.
    pub fn loss(&self, lambda: f64, emo_weight: f64) -> Result<Tensor> {
        Ok(self
            .reconstruction
            .add(&self.kl.scale(lambda))?
            .add(&self.emo.scale(emo_weight))?
            .add(&self.policy)?)
    }
}

/// L3 (`Direction::Forward`, unpaired context) or L4
/// (`Direction::Backward`, unpaired response) for one example, using the
/// pseudo sequences in `rollout` and reward baseline `baseline`.
pub fn unpaired_terms(
    ctx: &Ctx,
    model: &DualEmp,
    ex: &EncodedExample,
    direction: Direction,
    mode: SampleMode,
    pseudo: &PseudoMode,
    rollout: &Rollout,
    baseline: f64,
) -> Result<UnpairedTerms> {
    let x = observed(ex, direction)?;
    let gen = model.model(direction);
    let enc = gen.encode(ctx, &x.enc)?;
    let q = posterior(ctx, gen, &enc, direction.source())?;
    let kl = kl_to_prior(&q)?;

    // Latent weight (on the tape) and embedding for each category used.
    let k = model.latent.k;
    let mut slots: Vec<Option<(Tensor, Tensor)>> = vec![None; k];
    let sample = match mode {
        SampleMode::Enumerate => {
            for (i, slot) in slots.iter_mut().enumerate() {
                *slot = Some((q.probs.index(i)?, model.latent.embedding(ctx, i)?));
            }
            LatentSample::Enumerate { weights: q.probs.clone() }
        }
        SampleMode::Argmax => {
            let index = q.argmax();
            slots[index] = Some((ctx.tape.scalar(1.0), model.latent.embedding(ctx, index)?));
            sample_latent(&q, SampleMode::Argmax, &mut rand::rngs::mock::StepRng::new(0, 0))?
        }
        SampleMode::StGumbel { temperature } => {
            let noise = rollout
                .gumbel
                .as_ref()
                .ok_or_else(|| Error::invalid("straight-through rollout lost its noise"))?;
            let s = st_gumbel(&q, noise, temperature)?;
            if let LatentSample::Single { index, weights } = &s {
                slots[*index] = Some((ctx.tape.scalar(1.0), model.latent.mix(ctx, weights)?));
            }
            s
        }
    };
    let emo = model
        .latent
        .emotion_loss(ctx, &model.latent.supervised_embedding(ctx, &sample)?, ex.label)?;

    let enumerated = matches!(pseudo, PseudoMode::Enumerate(_));
    let mut recon_terms = Vec::new();
    let mut policy_terms = Vec::new();
    for s in &rollout.samples {
        let (w, e) = slots[s.latent]
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("rollout used latent {} outside this draw", s.latent)))?;
        let nll = reconstruction_nll(ctx, model, direction, x, &s.decoded.tokens, e)?;
        recon_terms.push(w.mul(&nll.scale(s.weight))?);

        let log_p = sequence_log_prob(ctx, gen, &enc, e, &s.decoded.actions(), pseudo.policy())?;
        let score = if enumerated { log_p.exp() } else { log_p };
        let centered = score.sub(&score.detach())?;
        let advantage = w.detach().item() * (s.reward - baseline);
        policy_terms.push(centered.scale(-advantage));
    }
    let sum = |terms: Vec<Tensor>| -> Result<Tensor> {
        if terms.is_empty() {
            Ok(ctx.tape.scalar(0.0))
        } else {
            Ok(Tensor::stack_scalars(&terms)?.sum())
        }
    };
    Ok(UnpairedTerms {
        reconstruction: sum(recon_terms)?,
        kl,
        emo,
        policy: sum(policy_terms)?,
        reward_mean: rollout.mean_reward().unwrap_or(0.0),
        skipped: rollout.skipped,
    })
}

/// Exponential moving average of batch-mean rewards, seeded by the first
/// batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBaseline {
    pub value: Option<f64>,
    pub momentum: f64,
}

impl RewardBaseline {
    pub fn new(momentum: f64) -> Self {
        RewardBaseline { value: None, momentum }
    }

    /// Baseline to use for a batch with mean reward `batch_mean`.
    pub fn current(&mut self, batch_mean: f64) -> f64 {
        *self.value.get_or_insert(batch_mean)
    }

    pub fn update(&mut self, batch_mean: f64) {
        let b = self.current(batch_mean);
        self.value = Some(self.momentum * b + (1.0 - self.momentum) * batch_mean);
    }
}

/// Everything [`total_loss`] needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub ablation: Ablation,
    pub weights: LossWeights,
    pub lambda: f64,
    pub mode: SampleMode,
    pub pseudo: PseudoMode,
    pub dropout: f64,
}

/// Reward baselines for L3 and L4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub context: RewardBaseline,
    pub response: RewardBaseline,
}

impl Baselines {
    pub fn new(momentum: f64) -> Self {
        Baselines {
            context: RewardBaseline::new(momentum),
            response: RewardBaseline::new(momentum),
        }
    }
}

/// Evaluates `L = L_cy + L_c + L_y` over three mini-batches, each averaged
/// over its examples; empty batches contribute zero. With `accumulate` the
/// gradient of the total is added to `model.store`'s gradient buffers.
pub fn total_loss(
    model: &mut DualEmp,
    paired: &[EncodedExample],
    unpaired_c: &[EncodedExample],
    unpaired_y: &[EncodedExample],
    settings: &LossSettings,
    baselines: &mut Baselines,
    rng: &mut ChaCha8Rng,
    accumulate: bool,
) -> Result<LossBreakdown> {
    let (unpaired_c, unpaired_y) = match settings.ablation {
        Ablation::Dual => (unpaired_c, unpaired_y),
        Ablation::DualPaired | Ablation::SingPaired => (&[][..], &[][..]),
    };
    if paired.is_empty() && unpaired_c.is_empty() && unpaired_y.is_empty() {
        return Err(Error::invalid("every mini-batch is empty"));
    }
    let w = settings.weights;
    let lambda = settings.lambda;
    let mut b = LossBreakdown {
        anneal_weight: lambda,
        alpha: w.alpha,
        beta: w.beta,
        gamma: w.gamma,
        paired_examples: paired.len(),
        unpaired_context_examples: unpaired_c.len(),
        unpaired_response_examples: unpaired_y.len(),
        ..Default::default()
    };

    let n = paired.len() as f64;
    for ex in paired {
        let seed = rng.gen();
        let mut ex_rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = Ctx::training(&model.store, settings.dropout, seed);
        let loss = if settings.ablation == Ablation::SingPaired {
            let (nll, kl, emo) = forward_terms(&ctx, model, ex, settings.mode, &mut ex_rng)?;
            b.l1_forward_nll += nll.item() / n;
            b.l1_kl += kl.item() / n;
            b.l_emo_context += emo.item() / n;
            b.l_emo_paired += emo.item() / n;
            nll.add(&kl.scale(lambda))?.add(&emo.scale(w.alpha))?
        } else {
            let t = paired_terms(&ctx, model, ex, settings.mode, &mut ex_rng)?;
            b.l1_forward_nll += t.l1_forward_nll.item() / n;
            b.l1_backward_nll += t.l1_backward_nll.item() / n;
            b.l1_kl += t.l1_kl.item() / n;
            b.l2_backward_nll += t.l2_backward_nll.item() / n;
            b.l2_forward_nll += t.l2_forward_nll.item() / n;
            b.l2_kl += t.l2_kl.item() / n;
            b.l_emo_context += t.emo_context.item() / n;
            b.l_emo_response += t.emo_response.item() / n;
            b.l_emo_paired += (t.emo_context.item() + t.emo_response.item()) / (2.0 * n);
            t.l_cy(lambda, w.alpha)?
        };
        let tape = ctx.tape.clone();
        drop(ctx);
        if accumulate {
            loss.scale(1.0 / n).backward()?;
            tape.accumulate_param_grads(&mut model.store, 1.0);
        }
    }

    for (direction, batch, emo_weight) in [
        (Direction::Forward, unpaired_c, w.beta),
        (Direction::Backward, unpaired_y, w.gamma),
    ] {
        if batch.is_empty() {
            continue;
        }
        let n = batch.len() as f64;
        let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
        let mut rollouts = Vec::with_capacity(batch.len());
        for (ex, seed) in batch.iter().zip(&seeds) {
            let mut ex_rng = ChaCha8Rng::seed_from_u64(*seed);
            rollouts.push(rollout(model, ex, direction, settings.mode, &settings.pseudo, &mut ex_rng)?);
        }
        let rewards: Vec<f64> = rollouts.iter().filter_map(Rollout::mean_reward).collect();
        let batch_mean = if rewards.is_empty() {
            0.0
        } else {
            rewards.iter().sum::<f64>() / rewards.len() as f64
        };
        let baseline_state = match direction {
            Direction::Forward => &mut baselines.context,
            Direction::Backward => &mut baselines.response,
        };
        let baseline = baseline_state.current(batch_mean);
        baseline_state.update(batch_mean);

        let (mut recon, mut kl, mut emo, mut skipped) = (0.0, 0.0, 0.0, 0);
        for ((ex, r), seed) in batch.iter().zip(&rollouts).zip(&seeds) {
            let ctx = Ctx::training(&model.store, settings.dropout, seed.wrapping_add(1));
            let t = unpaired_terms(&ctx, model, ex, direction, settings.mode, &settings.pseudo, r, baseline)?;
            recon += t.reconstruction.item() / n;
            kl += t.kl.item() / n;
            emo += t.emo.item() / n;
            skipped += t.skipped;
            let loss = t.loss(lambda, emo_weight)?;
            let tape = ctx.tape.clone();
            drop(ctx);
            if accumulate {
                loss.scale(1.0 / n).backward()?;
                tape.accumulate_param_grads(&mut model.store, 1.0);
            }
        }
        match direction {
            Direction::Forward => {
                b.l3_reconstruction = recon;
                b.l3_kl = kl;
                b.l3_emo = emo;
                b.l3_reward_mean = batch_mean;
                b.l3_baseline = baseline;
                b.l3_skipped = skipped;
            }
            Direction::Backward => {
                b.l4_reconstruction = recon;
                b.l4_kl = kl;
                b.l4_emo = emo;
                b.l4_reward_mean = batch_mean;
                b.l4_baseline = baseline;
                b.l4_skipped = skipped;
            }
        }
    }
    b.total = b.recompute_total();
    Ok(b)
}
