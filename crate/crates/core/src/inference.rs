//! Decoding: greedy generation, sampled rollouts, exhaustive enumeration of
//! short sequences, and emotion prediction.

use demp_tensor::{Tensor, MASKED};
use rand::Rng;
use serde::Serialize;

use crate::data::{CTX, EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::latent::{argmax, posterior, LatentPosterior};
use crate::model::{Ctx, DialogueModel, Direction, DualEmp, EncoderOutput, SequenceInput};

pub const MAX_DECODE_STEPS: usize = 30;

/// Which tokens may be emitted at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationPolicy {
    /// Never emitted. Always includes PAD, SOS and CTX.
    pub banned: Vec<usize>,
    /// EOS is banned until this many tokens have been emitted.
    pub min_len: usize,
    /// Decoding stops after this many non-EOS tokens.
    pub max_len: usize,
}

impl GenerationPolicy {
    pub fn new(max_len: usize, min_len: usize, extra_banned: &[usize]) -> Self {
        let mut banned = vec![PAD, SOS, CTX];
        banned.extend(extra_banned.iter().copied().filter(|t| ![PAD, SOS, CTX].contains(t)));
        GenerationPolicy { banned, min_len, max_len }
    }

    /// Greedy inference: empty output allowed.
    pub fn inference(max_len: usize) -> Self {
        Self::new(max_len, 0, &[])
    }

    /// Pseudo-sequence sampling: at least one token.
    pub fn pseudo(max_len: usize) -> Self {
        Self::new(max_len, 1, &[])
    }

    /// Additive mask for the step that emits token number `step`.
    pub fn mask_row(&self, step: usize, vocab: usize) -> Vec<f64> {
        let mut m = vec![0.0; vocab];
        for &t in &self.banned {
            if t < vocab {
                m[t] = MASKED;
            }
        }
        if step < self.min_len {
            m[EOS] = MASKED;
        }
        m
    }

    fn check(&self, vocab: usize) -> Result<()> {
        let open = (0..vocab).filter(|t| !self.banned.contains(t) && *t != EOS).count();
        if open == 0 && self.min_len > 0 {
            return Err(Error::invalid("generation policy bans every token"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    /// Multinomial sampling at temperature 1.
    Sample,
}

/// A decoded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Emitted tokens, EOS excluded.
    pub tokens: Vec<usize>,
    pub terminated_by_eos: bool,
    /// Probability of each chosen action, EOS included when emitted.
    pub step_probs: Vec<f64>,
}

impl Decoded {
    /// The actions taken: tokens plus the final EOS when emitted.
    pub fn actions(&self) -> Vec<usize> {
        let mut a = self.tokens.clone();
        if self.terminated_by_eos {
            a.push(EOS);
        }
        a
    }
}

/// Masked next-token distribution after `prefix`.
fn next_distribution(
    ctx: &Ctx,
    model: &DialogueModel,
    enc: &EncoderOutput,
    latent: &Tensor,
    prefix: &[usize],
    policy: &GenerationPolicy,
) -> Result<Vec<f64>> {
    let decoded = model.decode(ctx, prefix, enc, latent)?;
    let last = decoded.slice(0, prefix.len() - 1, 1)?;
    let logits = model.vocab_logits(ctx, &last)?;
    let vocab = logits.numel();
    let mask = ctx.constant(policy.mask_row(prefix.len() - 1, vocab), &[1, vocab])?;
    Ok(logits.add(&mask)?.softmax(1)?.values())
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_open = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last_open = i;
            if u < acc {
                return i;
            }
        }
    }
    last_open
}

/// Decodes token by token from `[SOS]` until EOS or `policy.max_len`.
pub fn decode_sequence<R: Rng + ?Sized>(
    ctx: &Ctx,
    model: &DialogueModel,
    enc: &EncoderOutput,
    latent: &Tensor,
    policy: &GenerationPolicy,
    decoding: Decoding,
    rng: &mut R,
) -> Result<Decoded> {
    let vocab = ctx.store.get(model.w_out).shape[0];
    policy.check(vocab)?;
    let mut prefix = vec![SOS];
    let mut out = Decoded {
        tokens: Vec::new(),
        terminated_by_eos: false,
        step_probs: Vec::new(),
    };
    while out.tokens.len() < policy.max_len {
        let probs = next_distribution(ctx, model, enc, latent, &prefix, policy)?;
        let next = match decoding {
            Decoding::Greedy => argmax(&probs),
            Decoding::Sample => sample_index(&probs, rng),
        };
        out.step_probs.push(probs[next]);
        if next == EOS {
            out.terminated_by_eos = true;
            break;
        }
        out.tokens.push(next);
        prefix.push(next);
    }
    Ok(out)
}

/// Every action sequence the policy can produce, with its probability.
/// Refuses to expand more than `limit` sequences.
pub fn enumerate_sequences(
    ctx: &Ctx,
    model: &DialogueModel,
    enc: &EncoderOutput,
    latent: &Tensor,
    policy: &GenerationPolicy,
    limit: usize,
) -> Result<Vec<(Decoded, f64)>> {
    let mut done = Vec::new();
    let mut stack = vec![(vec![SOS], Vec::<f64>::new(), 1.0)];
    while let Some((prefix, step_probs, prob)) = stack.pop() {
        let emitted = prefix.len() - 1;
        if emitted == policy.max_len {
            done.push((
                Decoded {
                    tokens: prefix[1..].to_vec(),
                    terminated_by_eos: false,
                    step_probs,
                },
                prob,
            ));
            continue;
        }
        let probs = next_distribution(ctx, model, enc, latent, &prefix, policy)?;
        for (tok, p) in probs.iter().enumerate().rev() {
            if *p == 0.0 {
                continue;
            }
            let mut sp = step_probs.clone();
            sp.push(*p);
            if tok == EOS {
                done.push((
                    Decoded {
                        tokens: prefix[1..].to_vec(),
                        terminated_by_eos: true,
                        step_probs: sp,
                    },
                    prob * p,
                ));
            } else {
                let mut next = prefix.clone();
                next.push(tok);
                stack.push((next, sp, prob * p));
            }
        }
        if done.len() + stack.len() > limit {
            return Err(Error::invalid(format!("more than {limit} sequences to enumerate")));
        }
    }
    Ok(done)
}

/// `log p(actions)` under the policy, on the tape.
pub fn sequence_log_prob(
    ctx: &Ctx,
    model: &DialogueModel,
    enc: &EncoderOutput,
    latent: &Tensor,
    actions: &[usize],
    policy: &GenerationPolicy,
) -> Result<Tensor> {
    if actions.is_empty() {
        return Err(Error::invalid("no actions to score"));
    }
    let mut prefix = vec![SOS];
    prefix.extend_from_slice(&actions[..actions.len() - 1]);
    let logits = model.vocab_logits(ctx, &model.decode(ctx, &prefix, enc, latent)?)?;
    let vocab = logits.shape()[1];
    let mask: Vec<f64> = (0..actions.len()).flat_map(|s| policy.mask_row(s, vocab)).collect();
    let masked = logits.add(&ctx.constant(mask, &[actions.len(), vocab])?)?;
    Ok(masked.cross_entropy(actions, None)?.scale(-(actions.len() as f64)))
}

/// Output of [`greedy_generate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationResult {
    /// Generated tokens without EOS.
    pub tokens: Vec<usize>,
    pub terminated_by_eos: bool,
    pub emotion: usize,
    pub emotion_prob: f64,
    pub latent: usize,
    pub step_probs: Vec<f64>,
}

fn infer_latent(ctx: &Ctx, model: &DualEmp, direction: Direction, input: &SequenceInput) -> Result<(EncoderOutput, LatentPosterior)> {
    let m = model.model(direction);
    let enc = m.encode(ctx, input)?;
    let q = posterior(ctx, m, &enc, direction.source())?;
    Ok((enc, q))
}

/// Encodes `input`, fixes the latent at `argmax q`, and decodes greedily
/// for at most `max_steps` tokens (and never past `max_positions`).
/// `Direction::Backward` runs the response-to-context model.
pub fn greedy_generate(model: &DualEmp, input: &SequenceInput, direction: Direction, max_steps: usize) -> Result<GenerationResult> {
    let ctx = Ctx::new(&model.store);
    let (enc, q) = infer_latent(&ctx, model, direction, input)?;
    let latent = q.argmax();
    let e = model.latent.embedding(&ctx, latent)?;
    let policy = GenerationPolicy::inference(max_steps.min(model.config.max_positions));
    let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
    let out = decode_sequence(&ctx, model.model(direction), &enc, &e, &policy, Decoding::Greedy, &mut no_rng)?;
    let p_e = model.latent.emotion_probs(&ctx, &e)?;
    let emotion = argmax(&p_e);
    Ok(GenerationResult {
        tokens: out.tokens,
        terminated_by_eos: out.terminated_by_eos,
        emotion,
        emotion_prob: p_e[emotion],
        latent,
        step_probs: out.step_probs,
    })
}

/// Emotion label (lowest id on ties) and its probability, read from the
/// latent embedding at `argmax q(z | c)`.
pub fn predict_emotion(model: &DualEmp, context: &SequenceInput) -> Result<(usize, f64)> {
    let ctx = Ctx::new(&model.store);
    let (_, q) = infer_latent(&ctx, model, Direction::Forward, context)?;
    let e = model.latent.embedding(&ctx, q.argmax())?;
    let p_e = model.latent.emotion_probs(&ctx, &e)?;
    let label = argmax(&p_e);
    Ok((label, p_e[label]))
}
