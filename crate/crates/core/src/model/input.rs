use serde::{Deserialize, Serialize};

use crate::data::CTX;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Speaker,
    Listener,
}

impl Role {
    pub fn id(self) -> usize {
        match self {
            Role::Speaker => 0,
            Role::Listener => 1,
        }
    }

    pub fn other(self) -> Role {
        match self {
            Role::Speaker => Role::Listener,
            Role::Listener => Role::Speaker,
        }
    }
}

/// One sequence as the embedding layer sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub roles: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

impl SequenceInput {
    /// Unpadded input with positions `0..n`.
    pub fn new(tokens: Vec<usize>, roles: Vec<usize>) -> Result<Self> {
        let n = tokens.len();
        let input = SequenceInput {
            tokens,
            positions: (0..n).collect(),
            roles,
            mask: vec![true; n],
        };
        input.validate()?;
        Ok(input)
    }

    /// `[CTX] + tokens` where the summary slot takes `ctx_role`.
    pub fn with_summary(tokens: &[usize], roles: &[usize], ctx_role: Role) -> Result<Self> {
        if tokens.len() != roles.len() {
            return Err(Error::invalid(format!(
                "{} tokens but {} role ids",
                tokens.len(),
                roles.len()
            )));
        }
        let mut t = Vec::with_capacity(tokens.len() + 1);
        t.push(CTX);
        t.extend_from_slice(tokens);
        let mut r = Vec::with_capacity(roles.len() + 1);
        r.push(ctx_role.id());
        r.extend_from_slice(roles);
        Self::new(t, r)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of unmasked positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Appends `n` masked padding positions.
    pub fn padded(&self, n: usize, pad: usize) -> Self {
        let mut out = self.clone();
        let start = self.len();
        out.tokens.extend(std::iter::repeat_n(pad, n));
        out.positions.extend(start..start + n);
        out.roles.extend(std::iter::repeat_n(Role::Listener.id(), n));
        out.mask.extend(std::iter::repeat_n(false, n));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.positions.len() != n || self.roles.len() != n || self.mask.len() != n {
            return Err(Error::invalid("sequence id lists differ in length"));
        }
        if self.roles.iter().any(|&r| r >= crate::config::N_ROLES) {
            return Err(Error::invalid("role id outside {speaker, listener}"));
        }
        if self.positions.iter().enumerate().any(|(i, &p)| p != i) {
            return Err(Error::invalid("position ids must count up from 0"));
        }
        Ok(())
    }
}
