use super::corpus::{DialogueExample, UnpairedExample, UnpairedKind};
use super::tokenize::tokenize;
use super::vocab::{Vocabulary, EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::model::{Role, SequenceInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSide {
    Paired,
    ContextOnly,
    ResponseOnly,
}

#[derive(Debug, Clone, Copy)]
pub enum BatchSource<'a> {
    Paired(&'a DialogueExample),
    Unpaired(&'a UnpairedExample),
}

impl BatchSource<'_> {
    fn label(&self) -> usize {
        match self {
            BatchSource::Paired(e) => e.emotion,
            BatchSource::Unpaired(u) => u.label,
        }
    }
}

/// One side of one example, unpadded.
#[derive(Debug, Clone, PartialEq)]
pub struct SideSeqs {
    /// `[CTX] + tokens + [EOS]`.
    pub enc: SequenceInput,
    /// `[SOS] + tokens`.
    pub dec_in: Vec<usize>,
    /// `tokens + [EOS]`.
    pub target: Vec<usize>,
}

impl SideSeqs {
    /// The bare token ids.
    pub fn tokens(&self) -> &[usize] {
        &self.dec_in[1..]
    }

    fn build(utterances: &[(Role, Vec<usize>)], summary_role: Role) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut roles = Vec::new();
        for (role, ids) in utterances {
            tokens.extend_from_slice(ids);
            roles.extend(std::iter::repeat_n(role.id(), ids.len()));
        }
        let last = utterances.last().map_or(summary_role, |u| u.0);
        let mut enc_tokens = tokens.clone();
        enc_tokens.push(EOS);
        roles.push(last.id());
        let enc = SequenceInput::with_summary(&enc_tokens, &roles, summary_role)?;
        let mut dec_in = vec![SOS];
        dec_in.extend_from_slice(&tokens);
        let mut target = tokens;
        target.push(EOS);
        Ok(SideSeqs { enc, dec_in, target })
    }

    /// A context made of role-tagged utterances. Oldest utterances, then
    /// oldest tokens, are dropped until it fits; the flag reports whether
    /// anything was cut.
    pub fn context(utterances: &[(Role, Vec<usize>)], max_positions: usize) -> Result<(Self, bool)> {
        if max_positions < 3 {
            return Err(Error::invalid("max_positions must leave room for CTX, one token and EOS"));
        }
        let budget = max_positions - 2;
        let total = |u: &[(Role, Vec<usize>)]| u.iter().map(|x| x.1.len()).sum::<usize>();
        let mut start = 0;
        while start + 1 < utterances.len() && total(&utterances[start..]) > budget {
            start += 1;
        }
        let mut kept = utterances[start..].to_vec();
        let mut truncated = start > 0;
        if total(&kept) > budget {
            let first = &mut kept[0].1;
            let excess = first.len() - budget;
            first.drain(..excess);
            truncated = true;
        }
        Ok((Self::build(&kept, Role::Speaker)?, truncated))
    }

    /// A listener response. Responses are never truncated.
    pub fn response(tokens: Vec<usize>, max_positions: usize) -> Result<Self> {
        if tokens.len() + 2 > max_positions {
            return Err(Error::invalid(format!(
                "response of {} tokens does not fit in {max_positions} positions",
                tokens.len()
            )));
        }
        Self::build(&[(Role::Listener, tokens)], Role::Listener)
    }
}

/// Unpadded view of one batch row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub context: Option<SideSeqs>,
    pub response: Option<SideSeqs>,
    pub label: usize,
}

/// Right-padded matrices for one side of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSide {
    pub ids: Vec<Vec<usize>>,
    pub roles: Vec<Vec<usize>>,
    pub positions: Vec<Vec<usize>>,
    /// `true` on real tokens.
    pub mask: Vec<Vec<bool>>,
    pub dec_in: Vec<Vec<usize>>,
    pub target: Vec<Vec<usize>>,
    pub dec_mask: Vec<Vec<bool>>,
}

fn pad_rows(rows: Vec<Vec<usize>>, fill: usize) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mask = rows
        .iter()
        .map(|r| (0..width).map(|i| i < r.len()).collect())
        .collect();
    let padded = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, fill);
            r
        })
        .collect();
    (padded, mask)
}

impl PaddedSide {
    fn from_seqs(seqs: &[SideSeqs]) -> Self {
        let (ids, mask) = pad_rows(seqs.iter().map(|s| s.enc.tokens.clone()).collect(), PAD);
        let (roles, _) = pad_rows(seqs.iter().map(|s| s.enc.roles.clone()).collect(), Role::Listener.id());
        let width = ids.first().map_or(0, Vec::len);
        let positions = vec![(0..width).collect(); seqs.len()];
        let (dec_in, dec_mask) = pad_rows(seqs.iter().map(|s| s.dec_in.clone()).collect(), PAD);
        let (target, _) = pad_rows(seqs.iter().map(|s| s.target.clone()).collect(), PAD);
        PaddedSide {
            ids,
            roles,
            positions,
            mask,
            dec_in,
            target,
            dec_mask,
        }
    }

    fn row(&self, i: usize) -> SideSeqs {
        let n = self.mask[i].iter().filter(|m| **m).count();
        let t = self.dec_mask[i].iter().filter(|m| **m).count();
        SideSeqs {
            enc: SequenceInput {
                tokens: self.ids[i][..n].to_vec(),
                positions: self.positions[i][..n].to_vec(),
                roles: self.roles[i][..n].to_vec(),
                mask: vec![true; n],
            },
            dec_in: self.dec_in[i][..t].to_vec(),
            target: self.target[i][..t].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub side: BatchSide,
    pub context: Option<PaddedSide>,
    pub response: Option<PaddedSide>,
    pub labels: Vec<usize>,
    /// Rows whose context had to be shortened.
    pub truncated: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> EncodedExample {
        EncodedExample {
            context: self.context.as_ref().map(|s| s.row(i)),
            response: self.response.as_ref().map(|s| s.row(i)),
            label: self.labels[i],
        }
    }

    pub fn examples(&self) -> Vec<EncodedExample> {
        (0..self.len()).map(|i| self.example(i)).collect()
    }
}

fn ids(vocab: &Vocabulary, text: &str) -> Vec<usize> {
    vocab.encode(&tokenize(text))
}

/// Tokenizes, encodes and pads `sources` for `side`.
pub fn make_batch(sources: &[BatchSource], vocab: &Vocabulary, side: BatchSide, max_positions: usize) -> Result<Batch> {
    let mut contexts = Vec::new();
    let mut responses = Vec::new();
    let mut truncated = 0;
    for src in sources {
        let want_context = side != BatchSide::ResponseOnly;
        let want_response = side != BatchSide::ContextOnly;
        match src {
            BatchSource::Paired(e) => {
                if want_context {
                    let utts: Vec<(Role, Vec<usize>)> = e.context().iter().map(|u| (u.role, ids(vocab, &u.text))).collect();
                    let (seqs, cut) = SideSeqs::context(&utts, max_positions)?;
                    truncated += usize::from(cut);
                    contexts.push(seqs);
                }
                if want_response {
                    responses.push(SideSeqs::response(ids(vocab, e.response()), max_positions)?);
                }
            }
            BatchSource::Unpaired(u) => match (side, u.kind) {
                (BatchSide::ContextOnly, UnpairedKind::Context) => {
                    let (seqs, cut) = SideSeqs::context(&[(Role::Speaker, ids(vocab, &u.text))], max_positions)?;
                    truncated += usize::from(cut);
                    contexts.push(seqs);
                }
                (BatchSide::ResponseOnly, UnpairedKind::Response) => {
                    responses.push(SideSeqs::response(ids(vocab, &u.text), max_positions)?);
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "unpaired {:?} text cannot fill a {side:?} batch",
                        u.kind
                    )))
                }
            },
        }
    }
    if truncated > 0 {
        log::debug!("truncated {truncated} contexts to {max_positions} positions");
    }
    let pad = |v: &Vec<SideSeqs>| (!v.is_empty()).then(|| PaddedSide::from_seqs(v));
    Ok(Batch {
        side,
        context: pad(&contexts),
        response: pad(&responses),
        labels: sources.iter().map(BatchSource::label).collect(),
        truncated,
    })
}
