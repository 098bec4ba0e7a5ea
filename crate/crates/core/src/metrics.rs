//! Evaluation: chunk-level slot F1 with conlleval semantics and intent
//! classification accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("contract violation: {0}")]
    Contract(String),
}

/// A labeled span of tokens; `end` is inclusive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Chunk {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkingMode {
    /// conlleval behavior: `I-X` after `O` or after a different type starts
    /// a new chunk.
    Lenient,
    /// `I-X` without a matching open chunk is treated as outside.
    Strict,
}

enum TagKind<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> TagKind<'_> {
    if let Some(label) = tag.strip_prefix("B-") {
        if !label.is_empty() {
            return TagKind::Begin(label);
        }
    }
    if let Some(label) = tag.strip_prefix("I-") {
        if !label.is_empty() {
            return TagKind::Inside(label);
        }
    }
    // `O` and anything malformed count as outside.
    TagKind::Outside
}

/// Extract labeled chunks from an IOB tag sequence.
pub fn extract_chunks<S: AsRef<str>>(tags: &[S], mode: ChunkingMode) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (t, tag) in tags.iter().enumerate() {
        match parse_tag(tag.as_ref()) {
            TagKind::Outside => {
                if let Some((label, start)) = open.take() {
                    chunks.push(Chunk {
                        label,
                        start,
                        end: t - 1,
                    });
                }
            }
            TagKind::Begin(label) => {
                if let Some((prev, start)) = open.take() {
                    chunks.push(Chunk {
                        label: prev,
                        start,
                        end: t - 1,
                    });
                }
                open = Some((label.to_string(), t));
            }
            TagKind::Inside(label) => match open {
                Some((ref prev, _)) if prev == label => {}
                _ => {
                    if let Some((prev, start)) = open.take() {
                        chunks.push(Chunk {
                            label: prev,
                            start,
                            end: t - 1,
                        });
                    }
                    if matches!(mode, ChunkingMode::Lenient) {
                        open = Some((label.to_string(), t));
                    }
                }
            },
        }
    }
    if let Some((label, start)) = open {
        chunks.push(Chunk {
            label,
            start,
            end: tags.len() - 1,
        });
    }
    chunks
}

/// Micro-averaged precision/recall/F1 over exactly matching (type, span)
/// chunks, as percentages.
pub fn slot_f1<S: AsRef<str>>(
    gold: &[Vec<S>],
    pred: &[Vec<S>],
    mode: ChunkingMode,
) -> Result<(f64, f64, f64), MetricsError> {
    let counts = chunk_counts(gold, pred, mode)?;
    Ok(counts.prf())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChunkCounts {
    pub true_positive: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl ChunkCounts {
    pub fn prf(&self) -> (f64, f64, f64) {
        let p = if self.predicted == 0 {
            0.0
        } else {
            100.0 * self.true_positive as f64 / self.predicted as f64
        };
        let r = if self.gold == 0 {
            0.0
        } else {
            100.0 * self.true_positive as f64 / self.gold as f64
        };
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f1)
    }
}

pub fn chunk_counts<S: AsRef<str>>(
    gold: &[Vec<S>],
    pred: &[Vec<S>],
    mode: ChunkingMode,
) -> Result<ChunkCounts, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::Contract(format!(
            "gold has {} utterances, predictions have {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut counts = ChunkCounts::default();
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(MetricsError::Contract(format!(
                "tag sequences of different lengths: {} vs {}",
                g.len(),
                p.len()
            )));
        }
        let gc = extract_chunks(g, mode);
        let pc = extract_chunks(p, mode);
        counts.gold += gc.len();
        counts.predicted += pc.len();
        // Chunks within one utterance are disjoint and ordered, so exact
        // matches can be counted against a set.
        let gset: std::collections::HashSet<&Chunk> = gc.iter().collect();
        counts.true_positive += pc.iter().filter(|c| gset.contains(c)).count();
    }
    Ok(counts)
}

/// Exact-match accuracy over intent labels, as a percentage.
pub fn intent_accuracy<S: AsRef<str>>(gold: &[S], pred: &[S]) -> Result<f64, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::Contract(format!(
            "gold has {} labels, predictions have {}",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(MetricsError::Contract(
            "intent accuracy over an empty list".into(),
        ));
    }
    let correct = gold
        .iter()
        .zip(pred)
        .filter(|(g, p)| g.as_ref() == p.as_ref())
        .count();
    Ok(100.0 * correct as f64 / gold.len() as f64)
}

/// Full evaluation result: slot F1 with its supporting chunk counts, intent
/// accuracy, and the intent confusion counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub intent_accuracy: f64,
    pub true_positive_chunks: usize,
    pub predicted_chunks: usize,
    pub gold_chunks: usize,
    pub correct_intents: usize,
    pub total_utterances: usize,
    /// `(gold intent, predicted intent) -> count`, flattened and sorted.
    pub intent_confusion: Vec<IntentConfusionEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentConfusionEntry {
    pub gold: String,
    pub predicted: String,
    pub count: usize,
}

impl EvalReport {
    /// Assemble a report from per-utterance gold and predicted labels.
    pub fn from_predictions<S: AsRef<str>>(
        gold_tags: &[Vec<S>],
        pred_tags: &[Vec<S>],
        gold_intents: &[S],
        pred_intents: &[S],
        mode: ChunkingMode,
    ) -> Result<EvalReport, MetricsError> {
        let counts = chunk_counts(gold_tags, pred_tags, mode)?;
        let (slot_precision, slot_recall, slot_f1) = counts.prf();
        let intent_acc = intent_accuracy(gold_intents, pred_intents)?;
        let correct = gold_intents
            .iter()
            .zip(pred_intents)
            .filter(|(g, p)| g.as_ref() == p.as_ref())
            .count();
        let mut confusion: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (g, p) in gold_intents.iter().zip(pred_intents) {
            *confusion
                .entry((g.as_ref().to_string(), p.as_ref().to_string()))
                .or_default() += 1;
        }
        Ok(EvalReport {
            slot_precision,
            slot_recall,
            slot_f1,
            intent_accuracy: intent_acc,
            true_positive_chunks: counts.true_positive,
            predicted_chunks: counts.predicted,
            gold_chunks: counts.gold,
            correct_intents: correct,
            total_utterances: gold_intents.len(),
            intent_confusion: confusion
                .into_iter()
                .map(|((gold, predicted), count)| IntentConfusionEntry {
                    gold,
                    predicted,
                    count,
                })
                .collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Run greedy prediction over a dataset and score it. Deterministic: two
/// evaluations of the same frozen model produce identical reports.
pub fn evaluate<T: crate::tensor::Scalar>(
    model: &crate::bimodel::BiModel<T>,
    data: &[crate::data::Utterance],
    vocab: &crate::data::Vocabulary,
    batch_size: usize,
) -> Result<EvalReport, MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::Contract("evaluate on an empty dataset".into()));
    }
    let predictions = model
        .predict_corpus(data, vocab, batch_size)
        .map_err(|e| MetricsError::Contract(e.to_string()))?;
    let gold_tags: Vec<&Vec<String>> = data.iter().map(|u| &u.slot_tags).collect();
    let gold_tags: Vec<Vec<&str>> = gold_tags
        .iter()
        .map(|tags| tags.iter().map(|t| t.as_str()).collect())
        .collect();
    let pred_tags: Vec<Vec<&str>> = predictions
        .iter()
        .map(|(_, tags)| tags.iter().map(|t| t.as_str()).collect())
        .collect();
    let gold_intents: Vec<&str> = data.iter().map(|u| u.intent.as_str()).collect();
    let pred_intents: Vec<&str> = predictions.iter().map(|(i, _)| i.as_str()).collect();
    EvalReport::from_predictions(
        &gold_tags,
        &pred_tags,
        &gold_intents,
        &pred_intents,
        ChunkingMode::Lenient,
    )
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "metric            value")?;
        writeln!(f, "----------------  --------")?;
        writeln!(f, "slot precision    {:8.2}", self.slot_precision)?;
        writeln!(f, "slot recall       {:8.2}", self.slot_recall)?;
        writeln!(f, "slot F1           {:8.2}", self.slot_f1)?;
        writeln!(f, "intent accuracy   {:8.2}", self.intent_accuracy)?;
        writeln!(
            f,
            "chunks            {} matched / {} predicted / {} gold",
            self.true_positive_chunks, self.predicted_chunks, self.gold_chunks
        )?;
        write!(
            f,
            "intents           {} correct / {} total",
            self.correct_intents, self.total_utterances
        )
    }
}
