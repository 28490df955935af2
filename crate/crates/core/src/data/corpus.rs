use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Role;

/// The 32 emotion labels of the empathetic dialogue corpus.
pub const DEFAULT_LABELS: [&str; 32] = [
    "afraid",
    "angry",
    "annoyed",
    "anticipating",
    "anxious",
    "apprehensive",
    "ashamed",
    "caring",
    "confident",
    "content",
    "devastated",
    "disappointed",
    "disgusted",
    "embarrassed",
    "excited",
    "faithful",
    "furious",
    "grateful",
    "guilty",
    "hopeful",
    "impressed",
    "jealous",
    "joyful",
    "lonely",
    "nostalgic",
    "prepared",
    "proud",
    "sad",
    "sentimental",
    "surprised",
    "terrified",
    "trusting",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet {
    names: Vec<String>,
}

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet {
            names: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LabelSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("label set is empty"));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::invalid("label set contains duplicates"));
        }
        Ok(LabelSet { names })
    }

    /// The first `n` default labels.
    pub fn first(n: usize) -> Result<Self> {
        if n == 0 || n > DEFAULT_LABELS.len() {
            return Err(Error::invalid(format!("need between 1 and 32 default labels, asked for {n}")));
        }
        Self::new(DEFAULT_LABELS[..n].iter().map(|s| s.to_string()).collect())
    }

    /// One label per non-empty line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawUtterance {
    pub role: Role,
    pub text: String,
}

/// One line of a paired corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawConversation {
    pub conv_id: String,
    pub emotion: String,
    pub utterances: Vec<RawUtterance>,
}

pub type Utterance = RawUtterance;

/// A context and the listener turn answering it.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueExample {
    pub conv_id: String,
    pub emotion: usize,
    /// Every utterance up to and including the response.
    pub utterances: Vec<Utterance>,
}

impl DialogueExample {
    pub fn context(&self) -> &[Utterance] {
        &self.utterances[..self.utterances.len() - 1]
    }

    pub fn response(&self) -> &str {
        &self.utterances[self.utterances.len() - 1].text
    }

    /// Context utterances joined by spaces.
    pub fn context_text(&self) -> String {
        self.context().iter().map(|u| u.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

fn check_conversation(conv: &RawConversation) -> std::result::Result<(), String> {
    if conv.utterances.len() < 2 {
        return Err(format!("conversation {} has fewer than 2 utterances", conv.conv_id));
    }
    let mut expected = Role::Speaker;
    for (i, u) in conv.utterances.iter().enumerate() {
        if u.role != expected {
            return Err(format!(
                "conversation {}: utterance {i} should be {expected:?}, found {:?}",
                conv.conv_id, u.role
            ));
        }
        expected = expected.other();
    }
    Ok(())
}

/// One example per listener turn; a trailing speaker turn yields none.
pub fn expand(conv: &RawConversation, emotion: usize) -> Vec<DialogueExample> {
    conv.utterances
        .iter()
        .enumerate()
        .filter(|(_, u)| u.role == Role::Listener)
        .map(|(i, _)| DialogueExample {
            conv_id: conv.conv_id.clone(),
            emotion,
            utterances: conv.utterances[..=i].to_vec(),
        })
        .collect()
}

/// Parses paired JSONL text. `origin` names the source in errors.
pub fn parse_paired(text: &str, origin: &Path, labels: &LabelSet) -> Result<Vec<DialogueExample>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let conv: RawConversation = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        check_conversation(&conv).map_err(fail)?;
        let emotion = labels
            .id(&conv.emotion)
            .map_err(|_| fail(format!("unknown emotion label {:?}", conv.emotion)))?;
        out.extend(expand(&conv, emotion));
    }
    Ok(out)
}

pub fn load_paired(path: &Path, labels: &LabelSet) -> Result<Vec<DialogueExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_paired(&text, path, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnpairedKind {
    Context,
    Response,
}

/// One line of an unpaired file. Candidate pools may omit the label and
/// confidence; filtered output always has both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnpairedRecord {
    pub text: String,
    pub kind: UnpairedKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// A filtered unpaired utterance with its pseudo label.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpairedExample {
    pub text: String,
    pub kind: UnpairedKind,
    pub label: usize,
    pub confidence: f64,
}

impl UnpairedExample {
    pub fn from_record(record: &UnpairedRecord, labels: &LabelSet) -> Result<Self> {
        let emotion = record
            .emotion
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("unpaired record {:?} has no emotion label", record.text)))?;
        Ok(UnpairedExample {
            text: record.text.clone(),
            kind: record.kind,
            label: labels.id(emotion)?,
            confidence: record.confidence.unwrap_or(1.0),
        })
    }

    pub fn to_record(&self, labels: &LabelSet) -> UnpairedRecord {
        UnpairedRecord {
            text: self.text.clone(),
            kind: self.kind,
            emotion: Some(labels.name(self.label).to_string()),
            confidence: Some(self.confidence),
        }
    }
}

pub fn load_unpaired(path: &Path) -> Result<Vec<UnpairedRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}
