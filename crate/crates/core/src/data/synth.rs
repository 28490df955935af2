use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{write_jsonl, LabelSet, RawConversation, RawUtterance, UnpairedKind, UnpairedRecord};
use crate::error::{Error, Result};
use crate::model::Role;

pub const MARKERS_PER_LABEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n_labels: usize,
    /// Conversations generated per label before splitting.
    pub examples_per_label: usize,
    /// Distinct word types in the generated text.
    pub vocab_size: usize,
    /// Probability that an utterance carries its own label's marker rather
    /// than a random label's.
    pub separability: f64,
    /// Listener turns per conversation.
    pub turn_pairs: usize,
    /// Unpaired contexts and responses generated per label.
    pub unpaired_per_label: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n_labels: 8,
            examples_per_label: 50,
            vocab_size: 60,
            separability: 1.0,
            turn_pairs: 1,
            unpaired_per_label: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub labels: LabelSet,
    pub train: Vec<RawConversation>,
    pub valid: Vec<RawConversation>,
    pub test: Vec<RawConversation>,
    /// Candidate pools with their generating label kept as `emotion`.
    pub unpaired_contexts: Vec<UnpairedRecord>,
    pub unpaired_responses: Vec<UnpairedRecord>,
}

struct Generator {
    opts: SynthOptions,
    rng: ChaCha8Rng,
    fillers: Vec<String>,
}

impl Generator {
    fn marker(&mut self, label: usize) -> String {
        let owner = if self.rng.gen_bool(self.opts.separability) {
            label
        } else {
            self.rng.gen_range(0..self.opts.n_labels)
        };
        format!("m{owner}x{}", self.rng.gen_range(0..MARKERS_PER_LABEL))
    }

    fn filler(&mut self) -> String {
        self.fillers.choose(&mut self.rng).expect("at least one filler").clone()
    }

    /// A situation statement around topic words `a b c`.
    fn speaker(&mut self, label: usize, topic: &[String; 3]) -> String {
        let m = self.marker(label);
        let [a, b, c] = topic;
        match self.rng.gen_range(0..3) {
            0 => format!("{a} {b} {m} {c} ."),
            1 => format!("{m} {a} {b} !"),
            _ => format!("{a} {m} {b} {c} ."),
        }
    }

    /// A reply echoing the first two topic words.
    fn listener(&mut self, label: usize, topic: &[String; 3]) -> String {
        let m = self.marker(label);
        let [a, b, _] = topic;
        match self.rng.gen_range(0..3) {
            0 => format!("{m} {a} {b} ?"),
            1 => format!("{a} {b} {m} !"),
            _ => format!("{m} , {b} {a} ."),
        }
    }

    fn topic(&mut self) -> [String; 3] {
        [self.filler(), self.filler(), self.filler()]
    }

    fn conversation(&mut self, id: String, label: usize, labels: &LabelSet) -> RawConversation {
        let mut utterances = Vec::new();
        for _ in 0..self.opts.turn_pairs {
            let topic = self.topic();
            utterances.push(RawUtterance {
                role: Role::Speaker,
                text: self.speaker(label, &topic),
            });
            utterances.push(RawUtterance {
                role: Role::Listener,
                text: self.listener(label, &topic),
            });
        }
        RawConversation {
            conv_id: id,
            emotion: labels.name(label).to_string(),
            utterances,
        }
    }
}

/// Template dialogues whose emotion is signalled by per-label marker words.
pub fn synth_corpus(opts: &SynthOptions) -> Result<SynthCorpus> {
    if !(0.0..=1.0).contains(&opts.separability) {
        return Err(Error::invalid(format!("separability {} outside [0, 1]", opts.separability)));
    }
    if opts.vocab_size <= opts.n_labels * MARKERS_PER_LABEL {
        return Err(Error::invalid(format!(
            "vocab_size {} must exceed {} marker words",
            opts.vocab_size,
            opts.n_labels * MARKERS_PER_LABEL
        )));
    }
    if opts.turn_pairs == 0 {
        return Err(Error::invalid("turn_pairs must be at least 1"));
    }
    let labels = if opts.n_labels <= super::DEFAULT_LABELS.len() {
        LabelSet::first(opts.n_labels)?
    } else {
        LabelSet::new((0..opts.n_labels).map(|i| format!("label{i}")).collect())?
    };
    let n_fillers = opts.vocab_size - opts.n_labels * MARKERS_PER_LABEL;
    let mut g = Generator {
        opts: opts.clone(),
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        fillers: (0..n_fillers).map(|i| format!("w{i}")).collect(),
    };

    let mut convs = Vec::new();
    for label in 0..opts.n_labels {
        for i in 0..opts.examples_per_label {
            convs.push(g.conversation(format!("synth-{label}-{i}"), label, &labels));
        }
    }
    convs.shuffle(&mut g.rng);
    let n_valid = convs.len() / 10;
    let n_test = convs.len() / 10;
    let test = convs.split_off(convs.len() - n_test);
    let valid = convs.split_off(convs.len() - n_valid);

    let mut unpaired_contexts = Vec::new();
    let mut unpaired_responses = Vec::new();
    for label in 0..opts.n_labels {
        for _ in 0..opts.unpaired_per_label {
            let topic = g.topic();
            let text = g.speaker(label, &topic);
            unpaired_contexts.push(UnpairedRecord {
                text,
                kind: UnpairedKind::Context,
                emotion: Some(labels.name(label).to_string()),
                confidence: None,
            });
            let topic = g.topic();
            let text = g.listener(label, &topic);
            unpaired_responses.push(UnpairedRecord {
                text,
                kind: UnpairedKind::Response,
                emotion: Some(labels.name(label).to_string()),
                confidence: None,
            });
        }
    }
    unpaired_contexts.shuffle(&mut g.rng);
    unpaired_responses.shuffle(&mut g.rng);

    Ok(SynthCorpus {
        labels,
        train: convs,
        valid,
        test,
        unpaired_contexts,
        unpaired_responses,
    })
}

impl SynthCorpus {
    pub const FILES: [&'static str; 6] = [
        "labels.txt",
        "train.jsonl",
        "valid.jsonl",
        "test.jsonl",
        "unpaired_context.jsonl",
        "unpaired_response.jsonl",
    ];

    /// Writes every split under `dir` using the names in [`Self::FILES`].
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let labels_path = dir.join(Self::FILES[0]);
        let mut text = self.labels.names().join("\n");
        text.push('\n');
        std::fs::write(&labels_path, text).map_err(|e| Error::io(&labels_path, e))?;
        write_jsonl(&dir.join(Self::FILES[1]), &self.train)?;
        write_jsonl(&dir.join(Self::FILES[2]), &self.valid)?;
        write_jsonl(&dir.join(Self::FILES[3]), &self.test)?;
        write_jsonl(&dir.join(Self::FILES[4]), &self.unpaired_contexts)?;
        write_jsonl(&dir.join(Self::FILES[5]), &self.unpaired_responses)
    }

    pub fn all_conversations(&self) -> impl Iterator<Item = &RawConversation> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}
