//! Text handling, corpora, the unpaired-data filter and batching.

mod batch;
mod corpus;
mod filter;
mod synth;
mod tagger;
mod tokenize;
mod vocab;

pub use batch::{make_batch, Batch, BatchSide, BatchSource, EncodedExample, PaddedSide, SideSeqs};
pub use corpus::{
    expand, load_paired, load_unpaired, parse_paired, write_jsonl, DialogueExample, LabelSet, RawConversation, RawUtterance,
    UnpairedExample, UnpairedKind, UnpairedRecord, Utterance, DEFAULT_LABELS,
};
pub use filter::{filter_unpaired, FilterStats};
pub use synth::{synth_corpus, SynthCorpus, SynthOptions};
pub use tagger::{train_tagger, Tagger, TaggerOptions};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{Vocabulary, CTX, EOS, N_SPECIAL, PAD, SOS, SPECIAL_TOKENS, UNK};
