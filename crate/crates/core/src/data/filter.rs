use serde::Serialize;

use super::corpus::{UnpairedExample, UnpairedRecord};
use super::tokenize::tokenize;
use crate::error::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FilterStats {
    pub kept: usize,
    pub dropped_confidence: usize,
    pub dropped_length: usize,
}

/// Keeps candidates whose classifier confidence is strictly above
/// `threshold` and whose token length is at least `min_len`.
pub fn filter_unpaired<F>(
    candidates: &[UnpairedRecord],
    mut classify: F,
    threshold: f64,
    min_len: usize,
) -> Result<(Vec<UnpairedExample>, FilterStats)>
where
    F: FnMut(&UnpairedRecord) -> Result<(usize, f64)>,
{
    let mut kept = Vec::new();
    let mut stats = FilterStats::default();
    for c in candidates {
        let (label, confidence) = classify(c)?;
        if confidence <= threshold {
            stats.dropped_confidence += 1;
        } else if tokenize(&c.text).len() < min_len {
            stats.dropped_length += 1;
        } else {
            stats.kept += 1;
            kept.push(UnpairedExample {
                text: c.text.clone(),
                kind: c.kind,
                label,
                confidence,
            });
        }
    }
    log::info!(
        "unpaired filter: kept {}, dropped {} below confidence {threshold}, {} shorter than {min_len}",
        stats.kept,
        stats.dropped_confidence,
        stats.dropped_length
    );
    Ok((kept, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnpairedKind;
    use proptest::prelude::*;

    fn rec(text: &str, confidence: f64) -> UnpairedRecord {
        UnpairedRecord {
            text: text.into(),
            kind: UnpairedKind::Context,
            emotion: Some("sad".into()),
            confidence: Some(confidence),
        }
    }

    fn own_confidence(r: &UnpairedRecord) -> Result<(usize, f64)> {
        Ok((0, r.confidence.unwrap()))
    }

    #[test]
    fn threshold_and_length_rules() {
        let items = [
            rec("one two three four five", 0.59),
            rec("one two", 0.61),
            rec("one two three", 0.61),
            rec("one two three", 0.60),
        ];
        let (kept, stats) = filter_unpaired(&items, own_confidence, 0.60, 3).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].text, "one two three");
        assert_eq!(kept[0].confidence, 0.61);
        assert_eq!(
            stats,
            FilterStats {
                kept: 1,
                dropped_confidence: 2,
                dropped_length: 1
            }
        );
    }

    proptest! {
        #[test]
        fn kept_count_is_monotone_in_threshold(confs in prop::collection::vec(0.0f64..1.0, 1..60), lens in prop::collection::vec(0usize..6, 60)) {
            let items: Vec<_> = confs
                .iter()
                .zip(&lens)
                .map(|(c, n)| rec(&vec!["w"; *n].join(" "), *c))
                .collect();
            let mut last = usize::MAX;
            for s in [0.50, 0.55, 0.60, 0.65, 0.70] {
                let (kept, _) = filter_unpaired(&items, own_confidence, s, 3).unwrap();
                prop_assert!(kept.len() <= last);
                last = kept.len();
            }
        }
    }
}
