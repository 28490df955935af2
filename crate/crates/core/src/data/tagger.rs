use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::corpus::DialogueExample;
use super::tokenize::tokenize;
use crate::error::{Error, Result};
use crate::latent::argmax;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaggerOptions {
    pub learning_rate: f64,
    /// L2 penalty on weights (biases are not penalized).
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once an iteration improves the objective by less than this.
    pub tol: f64,
}

impl Default for TaggerOptions {
    fn default() -> Self {
        TaggerOptions {
            learning_rate: 1.0,
            l2: 1e-4,
            max_iters: 2000,
            tol: 1e-9,
        }
    }
}

/// Multinomial logistic regression on binary bag-of-words features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tagger {
    features: HashMap<String, usize>,
    n_labels: usize,
    /// `[labels × features]`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Tagger {
    fn active(&self, text: &str) -> Vec<usize> {
        let set: BTreeSet<usize> = tokenize(text).iter().filter_map(|t| self.features.get(t).copied()).collect();
        set.into_iter().collect()
    }

    fn scores(&self, active: &[usize]) -> Vec<f64> {
        let nf = self.features.len();
        let mut z = self.bias.clone();
        for (l, zl) in z.iter_mut().enumerate() {
            for &f in active {
                *zl += self.weights[l * nf + f];
            }
        }
        softmax_in_place(&mut z);
        z
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn probs(&self, text: &str) -> Vec<f64> {
        self.scores(&self.active(text))
    }

    /// Most probable label (lowest id on ties) and its probability.
    pub fn classify(&self, text: &str) -> (usize, f64) {
        let p = self.probs(text);
        let best = argmax(&p);
        (best, p[best])
    }

    /// Fits on `(text, label)` pairs.
    pub fn fit(samples: &[(String, usize)], n_labels: usize, opts: TaggerOptions) -> Result<Self> {
        let distinct: BTreeSet<usize> = samples.iter().map(|s| s.1).collect();
        if distinct.len() < 2 {
            return Err(Error::invalid(format!(
                "tagger needs at least 2 labels in the training data, found {}",
                distinct.len()
            )));
        }
        if let Some(&bad) = distinct.iter().find(|&&l| l >= n_labels) {
            return Err(Error::invalid(format!("label id {bad} outside {n_labels} labels")));
        }
        let vocab: BTreeSet<String> = samples.iter().flat_map(|(t, _)| tokenize(t)).collect();
        let features: HashMap<String, usize> = vocab.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
        let nf = features.len();
        let mut tagger = Tagger {
            features,
            n_labels,
            weights: vec![0.0; n_labels * nf],
            bias: vec![0.0; n_labels],
        };
        let rows: Vec<Vec<usize>> = samples.iter().map(|(t, _)| tagger.active(t)).collect();
        let n = samples.len() as f64;
        let mut previous = f64::INFINITY;
        for _ in 0..opts.max_iters {
            let mut gw = vec![0.0; tagger.weights.len()];
            let mut gb = vec![0.0; n_labels];
            let mut loss = 0.0;
            for (active, (_, label)) in rows.iter().zip(samples) {
                let mut p = tagger.scores(active);
                loss -= p[*label].max(f64::MIN_POSITIVE).ln();
                p[*label] -= 1.0;
                for (l, pl) in p.iter().enumerate() {
                    gb[l] += pl;
                    for &f in active {
                        gw[l * nf + f] += pl;
                    }
                }
            }
            let penalty: f64 = tagger.weights.iter().map(|w| w * w).sum::<f64>() * opts.l2 / 2.0;
            let objective = loss / n + penalty;
            for (w, g) in tagger.weights.iter_mut().zip(&gw) {
                *w -= opts.learning_rate * (g / n + opts.l2 * *w);
            }
            for (b, g) in tagger.bias.iter_mut().zip(&gb) {
                *b -= opts.learning_rate * g / n;
            }
            if previous - objective < opts.tol {
                break;
            }
            previous = objective;
        }
        Ok(tagger)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Trains on the context side of labelled dialogues.
pub fn train_tagger(examples: &[DialogueExample], n_labels: usize, opts: TaggerOptions) -> Result<Tagger> {
    let samples: Vec<(String, usize)> = examples.iter().map(|e| (e.context_text(), e.emotion)).collect();
    Tagger::fit(&samples, n_labels, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(pairs: &[(&str, usize)]) -> Vec<(String, usize)> {
        pairs.iter().map(|(t, l)| (t.to_string(), *l)).collect()
    }

    #[test]
    fn separable_markers_are_learned() {
        let data = samples(&[
            ("the dog mk0 ran", 0),
            ("a mk0 cat", 0),
            ("mk1 the cat", 1),
            ("dog mk1", 1),
            ("mk2 a dog ran", 2),
            ("cat mk2", 2),
        ]);
        let t = Tagger::fit(&data, 3, TaggerOptions::default()).unwrap();
        for (text, label) in &data {
            assert_eq!(t.classify(text).0, *label, "{text}");
        }
        assert!((t.probs("mk1 dog").iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_features_fall_back_to_the_majority() {
        let data = samples(&[("same", 1), ("same", 1), ("same", 0), ("same", 1), ("same", 2)]);
        let t = Tagger::fit(&data, 3, TaggerOptions::default()).unwrap();
        assert_eq!(t.classify("same").0, 1);
        assert_eq!(t.classify("unseen words").0, 1);
    }

    #[test]
    fn one_label_is_rejected() {
        let data = samples(&[("a", 0), ("b", 0)]);
        assert!(Tagger::fit(&data, 2, TaggerOptions::default()).is_err());
    }
}
