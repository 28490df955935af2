use demp_tensor::{ParamId, Tensor};

use super::input::SequenceInput;
use super::layers::{causal_mask, key_mask, Ctx, FeedForward, Init, LayerNorm, MultiHeadAttention};
use crate::config::{ModelConfig, N_ROLES};
use crate::error::{Error, Result};

/// Word, position and role tables of one dialogue model.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub word: ParamId,
    pub position: ParamId,
    pub role: ParamId,
}

impl Embeddings {
    pub(crate) fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Embeddings {
            word: init.table(&format!("{name}.word"), cfg.vocab_size, cfg.d_model)?,
            position: init.table(&format!("{name}.position"), cfg.max_positions, cfg.d_model)?,
            role: init.table(&format!("{name}.role"), N_ROLES, cfg.d_model)?,
        })
    }

    /// Sum of the word, position and role rows at every position.
    pub fn embed_sequence(&self, ctx: &Ctx, input: &SequenceInput) -> Result<Tensor> {
        input.validate()?;
        let w = ctx.p(self.word).embedding(&input.tokens)?;
        let p = ctx.p(self.position).embedding(&input.positions)?;
        let r = ctx.p(self.role).embedding(&input.roles)?;
        Ok(w.add(&p)?.add(&r)?)
    }

    /// Decoder-side token embedding: word plus position.
    pub fn embed_tokens(&self, ctx: &Ctx, tokens: &[usize]) -> Result<Tensor> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let w = ctx.p(self.word).embedding(tokens)?;
        Ok(w.add(&ctx.p(self.position).embedding(&positions)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), cfg.d_model, cfg.n_heads)?,
            attn_norm: LayerNorm::new(init, &format!("{name}.attn_norm"), cfg.d_model)?,
            ffn: FeedForward::new(init, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, cfg.d_model)?,
            ffn_norm: LayerNorm::new(init, &format!("{name}.ffn_norm"), cfg.d_model)?,
        })
    }

    fn forward(&self, ctx: &Ctx, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let a = ctx.dropout(&self.attn.forward(ctx, x, x, x, mask)?)?;
        let h = self.attn_norm.forward(ctx, &x.add(&a)?)?;
        let f = ctx.dropout(&self.ffn.forward(ctx, &h)?)?;
        self.ffn_norm.forward(ctx, &h.add(&f)?)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    /// Attends to the encoder states.
    pub cross_h: MultiHeadAttention,
    /// Attends to the latent embedding.
    pub cross_z: MultiHeadAttention,
    /// Maps the concatenated `[C_H; C_Z]` back to model width.
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DecoderLayer {
    fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), d, cfg.n_heads)?,
            self_norm: LayerNorm::new(init, &format!("{name}.self_norm"), d)?,
            cross_h: MultiHeadAttention::new(init, &format!("{name}.cross_h"), d, cfg.n_heads)?,
            cross_z: MultiHeadAttention::new(init, &format!("{name}.cross_z"), d, cfg.n_heads)?,
            ffn: FeedForward::new(init, &format!("{name}.ffn"), 2 * d, cfg.d_ff, d)?,
            ffn_norm: LayerNorm::new(init, &format!("{name}.ffn_norm"), d)?,
        })
    }

    fn forward(
        &self,
        ctx: &Ctx,
        y: &Tensor,
        causal: &Tensor,
        enc: &EncoderOutput,
        enc_mask: Option<&Tensor>,
        latent: &Tensor,
    ) -> Result<Tensor> {
        let sa = ctx.dropout(&self.self_attn.forward(ctx, y, y, y, Some(causal))?)?;
        let d = self.self_norm.forward(ctx, &y.add(&sa)?)?;
        let c_h = self.cross_h.forward(ctx, &d, &enc.h, &enc.h, enc_mask)?;
        let c_z = self.cross_z.forward(ctx, &d, latent, latent, None)?;
        let f = ctx.dropout(&self.ffn.forward(ctx, &Tensor::concat(&[c_h, c_z], 1)?)?)?;
        self.ffn_norm.forward(ctx, &d.add(&f)?)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// One row per input position, the summary slot first.
    pub h: Tensor,
    /// Which rows are real tokens.
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    /// Row 0, the summary of the whole input, as `[1 × d]`.
    pub fn summary(&self) -> Result<Tensor> {
        Ok(self.h.slice(0, 0, 1)?)
    }
}

/// Posterior network `d → d → K` with ReLU.
#[derive(Debug, Clone)]
pub struct PosteriorHead {
    pub hidden: super::layers::Linear,
    pub logits: super::layers::Linear,
}

/// One direction's encoder, decoder, posterior head and output projection.
#[derive(Debug, Clone)]
pub struct DialogueModel {
    pub name: String,
    pub embeddings: Embeddings,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub posterior: PosteriorHead,
    /// Output projection `[V × d]`, untied from the word table.
    pub w_out: ParamId,
    max_positions: usize,
    d_model: usize,
}

impl DialogueModel {
    pub(crate) fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let embeddings = Embeddings::new(init, &format!("{name}.emb"), cfg)?;
        let encoder = (0..cfg.n_layers)
            .map(|l| EncoderLayer::new(init, &format!("{name}.enc.{l}"), cfg))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.n_layers)
            .map(|l| DecoderLayer::new(init, &format!("{name}.dec.{l}"), cfg))
            .collect::<Result<_>>()?;
        let posterior = PosteriorHead {
            hidden: super::layers::Linear::new(init, &format!("{name}.posterior.hidden"), d, d)?,
            logits: super::layers::Linear::new(init, &format!("{name}.posterior.logits"), d, cfg.k_latent)?,
        };
        let w_out = init.matrix(&format!("{name}.w_out"), cfg.vocab_size, d)?;
        Ok(DialogueModel {
            name: name.to_string(),
            embeddings,
            encoder,
            decoder,
            posterior,
            w_out,
            max_positions: cfg.max_positions,
            d_model: d,
        })
    }

    pub fn encode(&self, ctx: &Ctx, input: &SequenceInput) -> Result<EncoderOutput> {
        if input.real_len() == 0 {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        if input.len() > self.max_positions {
            return Err(Error::invalid(format!(
                "sequence of {} positions exceeds max_positions {}",
                input.len(),
                self.max_positions
            )));
        }
        let mask = key_mask(ctx, input.len(), &input.mask)?;
        let mut h = ctx.dropout(&self.embeddings.embed_sequence(ctx, input)?)?;
        for layer in &self.encoder {
            h = layer.forward(ctx, &h, mask.as_ref())?;
        }
        Ok(EncoderOutput {
            h,
            mask: input.mask.clone(),
        })
    }

    /// Runs the decoder on `[latent; emb(prefix)]` and returns the `t` rows
    /// after the latent slot, row `i` predicting the token after `prefix[i]`.
    pub fn decode(&self, ctx: &Ctx, prefix: &[usize], enc: &EncoderOutput, latent: &Tensor) -> Result<Tensor> {
        if latent.shape() != [1, self.d_model] {
            return Err(Error::Tensor(demp_tensor::TensorError::Shape {
                op: "decode latent",
                lhs: latent.shape(),
                rhs: vec![1, self.d_model],
            }));
        }
        if enc.h.shape()[1] != self.d_model {
            return Err(Error::Tensor(demp_tensor::TensorError::Shape {
                op: "decode encoder states",
                lhs: enc.h.shape(),
                rhs: vec![enc.h.shape()[0], self.d_model],
            }));
        }
        if prefix.is_empty() {
            return Err(Error::invalid("decoder prefix is empty"));
        }
        if prefix.len() > self.max_positions {
            return Err(Error::invalid(format!(
                "decoder prefix of {} tokens exceeds max_positions {}",
                prefix.len(),
                self.max_positions
            )));
        }
        let t = prefix.len() + 1;
        let tokens = self.embeddings.embed_tokens(ctx, prefix)?;
        let mut y = ctx.dropout(&Tensor::concat(&[latent.clone(), tokens], 0)?)?;
        let causal = causal_mask(ctx, t)?;
        let enc_mask = key_mask(ctx, t, &enc.mask)?;
        for layer in &self.decoder {
            y = layer.forward(ctx, &y, &causal, enc, enc_mask.as_ref(), latent)?;
        }
        Ok(y.slice(0, 1, t - 1)?)
    }

    /// Unnormalized vocabulary scores `[t × V]`.
    pub fn vocab_logits(&self, ctx: &Ctx, decoded: &Tensor) -> Result<Tensor> {
        Ok(decoded.matmul_t(&ctx.p(self.w_out))?)
    }

    /// Summed negative log-likelihood of `target` under teacher forcing on
    /// `prefix`.
    pub fn sequence_nll(
        &self,
        ctx: &Ctx,
        enc: &EncoderOutput,
        latent: &Tensor,
        prefix: &[usize],
        target: &[usize],
    ) -> Result<Tensor> {
        if prefix.len() != target.len() {
            return Err(Error::invalid(format!(
                "prefix length {} differs from target length {}",
                prefix.len(),
                target.len()
            )));
        }
        let logits = self.vocab_logits(ctx, &self.decode(ctx, prefix, enc, latent)?)?;
        Ok(logits.cross_entropy(target, None)?.scale(target.len() as f64))
    }

    pub fn posterior_logits(&self, ctx: &Ctx, summary: &Tensor) -> Result<Tensor> {
        let h = self.posterior.hidden.forward(ctx, summary)?.relu();
        self.posterior.logits.forward(ctx, &h)
    }
}
