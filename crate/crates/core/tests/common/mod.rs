//! Toy models and brute-force reference computations shared by the
//! integration tests. The references evaluate every probability token by
//! token with a hand-written softmax, so they share no loss code with the
//! library.
#![allow(dead_code)]

use demp_core::config::ModelConfig;
use demp_core::data::{EncodedExample, SideSeqs, CTX, EOS, PAD, SOS};
use demp_core::model::{Ctx, DialogueModel, Direction, DualEmp, EncoderOutput, Role};

pub fn toy_config(vocab_size: usize, k: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model,
        n_heads: 2,
        n_layers: 1,
        d_ff: 2 * d_model,
        k_latent: k,
        n_labels: 3,
        max_positions: 16,
        dropout: 0.0,
    }
}

pub fn toy_model(vocab_size: usize, k: usize, seed: u64) -> DualEmp {
    DualEmp::new(toy_config(vocab_size, k, 4), seed).unwrap()
}

/// A paired example with single-utterance context `c` and response `y`.
pub fn paired(c: &[usize], y: &[usize], label: usize) -> EncodedExample {
    EncodedExample {
        context: Some(SideSeqs::context(&[(Role::Speaker, c.to_vec())], 16).unwrap().0),
        response: Some(SideSeqs::response(y.to_vec(), 16).unwrap()),
        label,
    }
}

pub fn lone_context(c: &[usize], label: usize) -> EncodedExample {
    EncodedExample {
        context: Some(SideSeqs::context(&[(Role::Speaker, c.to_vec())], 16).unwrap().0),
        response: None,
        label,
    }
}

pub fn lone_response(y: &[usize], label: usize) -> EncodedExample {
    EncodedExample {
        context: None,
        response: Some(SideSeqs::response(y.to_vec(), 16).unwrap()),
        label,
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn side(ex: &EncodedExample, context: bool) -> &SideSeqs {
    if context {
        ex.context.as_ref().unwrap()
    } else {
        ex.response.as_ref().unwrap()
    }
}

/// `q(z | x)` from `dir`'s encoder and posterior head.
pub fn q_of(model: &DualEmp, dir: Direction, x: &SideSeqs) -> Vec<f64> {
    let ctx = Ctx::new(&model.store);
    let m = model.model(dir);
    let enc = m.encode(&ctx, &x.enc).unwrap();
    softmax(&m.posterior_logits(&ctx, &enc.summary().unwrap()).unwrap().values())
}

/// Row `k` of the latent table.
pub fn e_row(model: &DualEmp, k: usize) -> Vec<f64> {
    let d = model.config.d_model;
    model.store.get(model.latent.e_z).value[k * d..(k + 1) * d].to_vec()
}

/// Next-token distribution after `prefix` with additive `mask` (zeros for
/// an unmasked step), computed from the final decoder row only.
pub fn next_probs(ctx: &Ctx, m: &DialogueModel, enc: &EncoderOutput, latent: &[f64], prefix: &[usize], banned: &[usize]) -> Vec<f64> {
    let z = ctx.constant(latent.to_vec(), &[1, latent.len()]).unwrap();
    let rows = m.decode(ctx, prefix, enc, &z).unwrap();
    let logits = m.vocab_logits(ctx, &rows).unwrap().values();
    let v = logits.len() / prefix.len();
    let last: Vec<f64> = logits[(prefix.len() - 1) * v..].to_vec();
    let allowed: Vec<usize> = (0..v).filter(|t| !banned.contains(t)).collect();
    let p = softmax(&allowed.iter().map(|&t| last[t]).collect::<Vec<_>>());
    let mut out = vec![0.0; v];
    for (t, pt) in allowed.iter().zip(p) {
        out[*t] = pt;
    }
    out
}

/// `-log p(target | source, z)` under `generator`, built one prefix at a
/// time. `target` is the bare token list; EOS is appended.
pub fn nll(model: &DualEmp, generator: Direction, source: &SideSeqs, latent: &[f64], target: &[usize]) -> f64 {
    let ctx = Ctx::new(&model.store);
    let m = model.model(generator);
    let enc = m.encode(&ctx, &source.enc).unwrap();
    let mut prefix = vec![SOS];
    let mut total = 0.0;
    for &t in target.iter().chain(std::iter::once(&EOS)) {
        total -= next_probs(&ctx, m, &enc, latent, &prefix, &[]).get(t).copied().unwrap().ln();
        prefix.push(t);
    }
    total
}

pub fn kl_uniform(q: &[f64]) -> f64 {
    let k = q.len() as f64;
    q.iter().filter(|&&p| p > 0.0).map(|p| p * (p * k).ln()).sum()
}

/// Brute-force L1 (`Direction::Forward`) or L2 (`Direction::Backward`):
/// `Σ_k q_k [nll_fwd(y | c, k) + nll_bwd(c | y, k)] + λ KL(q ‖ uniform)`.
pub fn paired_bound(model: &DualEmp, ex: &EncodedExample, posterior_from: Direction, lambda: f64) -> (f64, f64, f64) {
    let (c, y) = (side(ex, true), side(ex, false));
    let q = match posterior_from {
        Direction::Forward => q_of(model, Direction::Forward, c),
        Direction::Backward => q_of(model, Direction::Backward, y),
    };
    let (mut f, mut b) = (0.0, 0.0);
    for (k, qk) in q.iter().enumerate() {
        let e = e_row(model, k);
        f += qk * nll(model, Direction::Forward, c, &e, y.tokens());
        b += qk * nll(model, Direction::Backward, y, &e, c.tokens());
    }
    let kl = kl_uniform(&q);
    (f, b, f + b + lambda * kl)
}

/// Every pseudo sequence of at most `max_len` tokens that the pseudo
/// policy allows (no PAD/SOS/CTX, no EOS first), with its probability.
pub fn pseudo_sequences(model: &DualEmp, generator: Direction, source: &SideSeqs, latent: &[f64], max_len: usize) -> Vec<(Vec<usize>, f64)> {
    let ctx = Ctx::new(&model.store);
    let m = model.model(generator);
    let enc = m.encode(&ctx, &source.enc).unwrap();
    let mut out = Vec::new();
    let mut frontier = vec![(Vec::<usize>::new(), 1.0)];
    while let Some((toks, p)) = frontier.pop() {
        if toks.len() == max_len {
            out.push((toks, p));
            continue;
        }
        let mut banned = vec![PAD, SOS, CTX];
        if toks.is_empty() {
            banned.push(EOS);
        }
        let mut prefix = vec![SOS];
        prefix.extend(&toks);
        let probs = next_probs(&ctx, m, &enc, latent, &prefix, &banned);
        for (t, pt) in probs.iter().enumerate() {
            if *pt == 0.0 {
                continue;
            }
            if t == EOS {
                out.push((toks.clone(), p * pt));
            } else {
                let mut next = toks.clone();
                next.push(t);
                frontier.push((next, p * pt));
            }
        }
    }
    out
}

/// The observed side's encoder input for a pseudo sequence, as the
/// reconstruction model reads it.
pub fn pseudo_side(tokens: &[usize], generator: Direction) -> SideSeqs {
    match generator {
        Direction::Forward => SideSeqs::response(tokens.to_vec(), 16).unwrap(),
        Direction::Backward => SideSeqs::context(&[(Role::Speaker, tokens.to_vec())], 16).unwrap().0,
    }
}

/// Brute-force L3 (`Direction::Forward`, unpaired context) or L4
/// (`Direction::Backward`, unpaired response) reconstruction term and KL:
/// `Σ_k q_k Σ_ŷ p(ŷ | x, k) nll_other(x | ŷ, k)`.
pub fn unpaired_bound(model: &DualEmp, x: &SideSeqs, generator: Direction, max_len: usize) -> (f64, f64) {
    let q = q_of(model, generator, x);
    let mut recon = 0.0;
    for (k, qk) in q.iter().enumerate() {
        let e = e_row(model, k);
        for (seq, p) in pseudo_sequences(model, generator, x, &e, max_len) {
            let src = pseudo_side(&seq, generator);
            recon += qk * p * nll(model, generator.other(), &src, &e, x.tokens());
        }
    }
    (recon, kl_uniform(&q))
}
