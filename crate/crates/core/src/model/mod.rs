//! Encoder-decoder dialogue models and the coupled forward/backward pair.

mod input;
mod layers;
mod transformer;

pub use input::{Role, SequenceInput};
pub use layers::{causal_mask, key_mask, Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use transformer::{DecoderLayer, DialogueModel, Embeddings, EncoderLayer, EncoderOutput, PosteriorHead};

use demp_tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::latent::{LatentSpace, PosteriorSource};
use layers::Init;

/// Which dialogue model runs as the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Context to response.
    Forward,
    /// Response to context.
    Backward,
}

impl Direction {
    pub fn other(self) -> Direction {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }

    /// The posterior this direction's encoder produces.
    pub fn source(self) -> PosteriorSource {
        match self {
            Direction::Forward => PosteriorSource::FromContext,
            Direction::Backward => PosteriorSource::FromResponse,
        }
    }

    /// Role of the summary slot and of every token in this direction's input.
    pub fn input_role(self) -> Role {
        match self {
            Direction::Forward => Role::Speaker,
            Direction::Backward => Role::Listener,
        }
    }
}

/// Forward and backward dialogue models sharing one latent space. All
/// parameters live in `store`.
#[derive(Debug, Clone)]
pub struct DualEmp {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub forward: DialogueModel,
    pub backward: DialogueModel,
    pub latent: LatentSpace,
}

impl DualEmp {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let forward = DialogueModel::new(&mut init, "forward", &config)?;
        let backward = DialogueModel::new(&mut init, "backward", &config)?;
        let latent = LatentSpace {
            e_z: init.table("latent.e_z", config.k_latent, config.d_model)?,
            w_e: init.matrix("latent.w_e", config.n_labels, config.d_model)?,
            k: config.k_latent,
            n_labels: config.n_labels,
        };
        Ok(DualEmp {
            config,
            store,
            forward,
            backward,
            latent,
        })
    }

    pub fn model(&self, direction: Direction) -> &DialogueModel {
        match direction {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }

    /// Names of one model's parameters with the model prefix removed.
    pub fn inventory(&self, direction: Direction) -> Vec<(String, Vec<usize>)> {
        let prefix = format!("{}.", self.model(direction).name);
        self.store
            .iter()
            .filter_map(|p| p.name.strip_prefix(&prefix).map(|n| (n.to_string(), p.shape.clone())))
            .collect()
    }
}
