//! Automatic evaluation: BLEU, Distinct-n, perplexity, embedding-based
//! similarity and emotion accuracy.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{detokenize, make_batch, tokenize, BatchSide, BatchSource, DialogueExample, EncodedExample, Vocabulary};
use crate::error::{Error, Result};
use crate::inference::{greedy_generate, MAX_DECODE_STEPS};
use crate::latent::posterior;
use crate::model::{Ctx, Direction, DualEmp};

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches of `hyp` against `reference`, and the number of
/// n-grams in `hyp`.
pub fn modified_precision(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let h = ngrams(hyp, n);
    let r = ngrams(reference, n);
    let clipped = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    (clipped, hyp.len().saturating_sub(n - 1).min(hyp.len()))
}

/// Corpus BLEU with brevity penalty. Precisions for n ≥ 2 use add-one
/// smoothing; the unigram precision is unsmoothed.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() || max_n == 0 {
        return Err(Error::invalid("BLEU needs at least one sentence and max_n ≥ 1"));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut clipped, mut total) = (0usize, 0usize);
        for (h, r) in hypotheses.iter().zip(references) {
            let (c, t) = modified_precision(h, r, n);
            clipped += c;
            total += t;
        }
        let p = if n == 1 {
            if total == 0 {
                0.0
            } else {
                clipped as f64 / total as f64
            }
        } else {
            (clipped as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let c: usize = hypotheses.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Distinct n-grams over all n-grams in the corpus; 0 when there are none.
pub fn distinct_n(hypotheses: &[Vec<String>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("distinct-n needs n ≥ 1"));
    }
    let mut seen = std::collections::HashSet::new();
    let mut total = 0usize;
    for h in hypotheses {
        for w in h.windows(n) {
            seen.insert(w);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { seen.len() as f64 / total as f64 })
}

/// `exp` of the token-mean NLL of the gold responses under the forward
/// model, with the latent fixed at `argmax q(z | c)`. EOS counts as a token.
pub fn perplexity(model: &DualEmp, corpus: &[EncodedExample]) -> Result<f64> {
    let (nll, tokens) = corpus_nll(model, corpus)?;
    Ok((nll / tokens as f64).exp())
}

/// Summed NLL and token count behind [`perplexity`].
pub fn corpus_nll(model: &DualEmp, corpus: &[EncodedExample]) -> Result<(f64, usize)> {
    if corpus.is_empty() {
        return Err(Error::invalid("perplexity of an empty corpus"));
    }
    let mut nll = 0.0;
    let mut tokens = 0;
    for ex in corpus {
        let (Some(c), Some(y)) = (&ex.context, &ex.response) else {
            return Err(Error::invalid("perplexity needs paired examples"));
        };
        let ctx = Ctx::new(&model.store);
        let enc = model.forward.encode(&ctx, &c.enc)?;
        let q = posterior(&ctx, &model.forward, &enc, Direction::Forward.source())?;
        let e = model.latent.embedding(&ctx, q.argmax())?;
        nll += model.forward.sequence_nll(&ctx, &enc, &e, &y.dec_in, &y.target)?.item();
        tokens += y.target.len();
    }
    Ok((nll, tokens))
}

/// Word vectors for the embedding-based metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vectors: HashMap<String, Vec<f64>>,
    unknown: Option<Vec<f64>>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new(vectors: HashMap<String, Vec<f64>>, unknown: Option<Vec<f64>>) -> Result<Self> {
        let dim = vectors
            .values()
            .chain(unknown.iter())
            .map(Vec::len)
            .next()
            .ok_or_else(|| Error::invalid("embedding table is empty"))?;
        if vectors.values().chain(unknown.iter()).any(|v| v.len() != dim) {
            return Err(Error::invalid("embedding vectors differ in dimension"));
        }
        Ok(EmbeddingTable { vectors, unknown, dim })
    }

    /// The forward model's word embeddings; out-of-vocabulary tokens map to
    /// the `<UNK>` row.
    pub fn from_model(model: &DualEmp, vocab: &Vocabulary) -> Result<Self> {
        let w = &model.store.get(model.forward.embeddings.word).value;
        let d = model.config.d_model;
        let row = |i: usize| w[i * d..(i + 1) * d].to_vec();
        let vectors = vocab.tokens().iter().enumerate().map(|(i, t)| (t.clone(), row(i))).collect();
        Self::new(vectors, Some(row(crate::data::UNK)))
    }

    /// Lines of `token v1 v2 ...`; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let v = parts
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            vectors.insert(token.to_string(), v);
        }
        let unknown = vectors.get(crate::data::SPECIAL_TOKENS[crate::data::UNK]).cloned();
        Self::new(vectors, unknown)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).or(self.unknown.as_ref()).map(Vec::as_slice)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScores {
    pub average: f64,
    pub greedy: f64,
    pub extrema: f64,
    /// Pairs left out because a side had no embeddable token.
    pub skipped: usize,
}

/// Embedding similarity of one pair, or `None` if either side is empty.
pub fn embedding_pair(hyp: &[String], reference: &[String], table: &EmbeddingTable) -> Option<(f64, f64, f64)> {
    let vecs = |s: &[String]| -> Vec<&[f64]> { s.iter().filter_map(|t| table.lookup(t)).collect() };
    let (h, r) = (vecs(hyp), vecs(reference));
    if h.is_empty() || r.is_empty() {
        return None;
    }
    let mean = |vs: &[&[f64]]| -> Vec<f64> {
        (0..table.dim).map(|j| vs.iter().map(|v| v[j]).sum::<f64>() / vs.len() as f64).collect()
    };
    let extrema = |vs: &[&[f64]]| -> Vec<f64> {
        (0..table.dim)
            .map(|j| vs.iter().map(|v| v[j]).fold(0.0, |best: f64, x| if x.abs() > best.abs() { x } else { best }))
            .collect()
    };
    let one_way = |a: &[&[f64]], b: &[&[f64]]| -> f64 {
        a.iter()
            .map(|x| b.iter().map(|y| cosine(x, y)).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / a.len() as f64
    };
    Some((
        cosine(&mean(&h), &mean(&r)),
        (one_way(&h, &r) + one_way(&r, &h)) / 2.0,
        cosine(&extrema(&h), &extrema(&r)),
    ))
}

/// Average, Greedy and Extrema scores averaged over sentence pairs.
pub fn embedding_metrics(hypotheses: &[Vec<String>], references: &[Vec<String>], table: &EmbeddingTable) -> Result<EmbeddingScores> {
    if hypotheses.len() != references.len() {
        return Err(Error::invalid("hypothesis and reference counts differ"));
    }
    let mut sums = (0.0, 0.0, 0.0);
    let mut n = 0usize;
    let mut skipped = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        match embedding_pair(h, r, table) {
            Some((a, g, e)) => {
                sums.0 += a;
                sums.1 += g;
                sums.2 += e;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("embedding metrics skipped {skipped} pairs with an empty side");
    }
    let avg = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(EmbeddingScores {
        average: avg(sums.0),
        greedy: avg(sums.1),
        extrema: avg(sums.2),
        skipped,
    })
}

pub fn emotion_accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::invalid("emotion accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub ppl: f64,
    pub emb_average: f64,
    pub emb_greedy: f64,
    pub emb_extrema: f64,
    pub emotion_accuracy: f64,
    pub samples: usize,
    pub embedding_skipped: usize,
}

impl MetricReport {
    pub fn table(&self) -> String {
        let rows = [
            ("BLEU", self.bleu),
            ("Dist-1", self.dist1),
            ("Dist-2", self.dist2),
            ("PPL", self.ppl),
            ("Emb-Average", self.emb_average),
            ("Emb-Greedy", self.emb_greedy),
            ("Emb-Extrema", self.emb_extrema),
            ("Emotion-Acc", self.emotion_accuracy),
        ];
        let mut out = format!("{:<12} {:>10}\n", "metric", "value");
        for (name, v) in rows {
            out.push_str(&format!("{name:<12} {v:>10.4}\n"));
        }
        out.push_str(&format!("{:<12} {:>10}\n", "samples", self.samples));
        out
    }
}

/// One generated response next to its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub conv_id: String,
    pub context: String,
    pub reference: String,
    pub hypothesis: String,
    pub gold_emotion: String,
    pub predicted_emotion: String,
}

/// Greedy responses, emotion predictions and every metric over `examples`.
pub fn evaluate(
    model: &DualEmp,
    vocab: &Vocabulary,
    labels: &[String],
    examples: &[DialogueExample],
    table: Option<&EmbeddingTable>,
) -> Result<(MetricReport, Vec<EvalSample>)> {
    if examples.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let sources: Vec<BatchSource> = examples.iter().map(BatchSource::Paired).collect();
    let encoded = make_batch(&sources, vocab, BatchSide::Paired, model.config.max_positions)?.examples();
    let own_table;
    let table = match table {
        Some(t) => t,
        None => {
            own_table = EmbeddingTable::from_model(model, vocab)?;
            &own_table
        }
    };
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    let mut samples = Vec::new();
    for (ex, enc) in examples.iter().zip(&encoded) {
        let c = enc.context.as_ref().expect("paired batch has contexts");
        let out = greedy_generate(model, &c.enc, Direction::Forward, MAX_DECODE_STEPS)?;
        let hyp = vocab.decode(&out.tokens);
        let reference = tokenize(ex.response());
        samples.push(EvalSample {
            conv_id: ex.conv_id.clone(),
            context: ex.context_text(),
            reference: detokenize(&reference),
            hypothesis: detokenize(&hyp),
            gold_emotion: labels[ex.emotion].clone(),
            predicted_emotion: labels[out.emotion].clone(),
        });
        hyps.push(hyp);
        refs.push(reference);
        preds.push(out.emotion);
        golds.push(ex.emotion);
    }
    let emb = embedding_metrics(&hyps, &refs, table)?;
    let report = MetricReport {
        bleu: bleu(&hyps, &refs, 4)?,
        dist1: distinct_n(&hyps, 1)?,
        dist2: distinct_n(&hyps, 2)?,
        ppl: perplexity(model, &encoded)?,
        emb_average: emb.average,
        emb_greedy: emb.greedy,
        emb_extrema: emb.extrema,
        emotion_accuracy: emotion_accuracy(&preds, &golds)?,
        samples: examples.len(),
        embedding_skipped: emb.skipped,
    };
    Ok((report, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_examples() {
        let h = vec![words("the cat sat on the mat")];
        assert!((bleu(&h, &h, 4).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu(&[words("a b c d")], &[words("e f g h")], 4).unwrap(), 0.0);
        assert_eq!(modified_precision(&words("the cat the cat"), &words("the cat sat"), 1), (2, 4));
        assert!(bleu(&[words("a")], &[words("a"), words("b")], 4).is_err());
    }

    #[test]
    fn distinct_examples() {
        let c = vec![words("a b a b")];
        assert_eq!(distinct_n(&c, 1).unwrap(), 0.5);
        assert!((distinct_n(&c, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct_n(&[words("x y z")], 1).unwrap(), 1.0);
        assert_eq!(distinct_n(&[words("x")], 2).unwrap(), 0.0);
        assert!(distinct_n(&c, 0).is_err());
    }

    fn unit_table() -> EmbeddingTable {
        let mut v = HashMap::new();
        v.insert("a".to_string(), vec![1.0, 0.0]);
        v.insert("b".to_string(), vec![0.0, 1.0]);
        EmbeddingTable::new(v, None).unwrap()
    }

    #[test]
    fn embedding_examples() {
        let t = unit_table();
        let s = embedding_metrics(&[words("a b")], &[words("a b")], &t).unwrap();
        assert!((s.average - 1.0).abs() < 1e-12 && (s.greedy - 1.0).abs() < 1e-12 && (s.extrema - 1.0).abs() < 1e-12);
        let s = embedding_metrics(&[words("a")], &[words("b")], &t).unwrap();
        assert_eq!((s.average, s.greedy, s.extrema), (0.0, 0.0, 0.0));
        let (avg, _, _) = embedding_pair(&words("a b"), &words("a"), &t).unwrap();
        assert!((avg - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let s = embedding_metrics(&[words("zzz")], &[words("a")], &t).unwrap();
        assert_eq!(s.skipped, 1);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(emotion_accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(emotion_accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(emotion_accuracy(&[1, 2, 3, 0], &[1, 2, 3, 4]).unwrap(), 0.75);
        assert!(emotion_accuracy(&[1], &[1, 2]).is_err());
    }
}
