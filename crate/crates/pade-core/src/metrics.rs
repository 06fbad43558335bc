//! Hallucination metrics as pure functions over label/prediction sets:
//! instance- and sentence-level object hallucination rates over captions,
//! and binary object-existence scores.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objects mentioned by a caption and the ground-truth objects of its
/// image. Labels are lowercased and trimmed at construction so matching is
/// exact string equality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionObjects {
    mentioned: BTreeSet<String>,
    ground_truth: BTreeSet<String>,
}

fn normalize(label: &str) -> String {
    label.trim().to_lowercase()
}

impl CaptionObjects {
    pub fn new<I, J, S, T>(mentioned: I, ground_truth: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        Self {
            mentioned: mentioned.into_iter().map(|s| normalize(s.as_ref())).collect(),
            ground_truth: ground_truth
                .into_iter()
                .map(|s| normalize(s.as_ref()))
                .collect(),
        }
    }

    pub fn mentioned(&self) -> &BTreeSet<String> {
        &self.mentioned
    }

    pub fn hallucinated_count(&self) -> usize {
        self.mentioned.difference(&self.ground_truth).count()
    }
}

/// JSON-lines record shape: `{"mentioned": [...], "ground_truth": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub mentioned: Vec<String>,
    pub ground_truth: Vec<String>,
}

impl From<&CaptionRecord> for CaptionObjects {
    fn from(record: &CaptionRecord) -> Self {
        CaptionObjects::new(&record.mentioned, &record.ground_truth)
    }
}

/// Instance-level hallucination rate, pooled over the corpus: hallucinated
/// object mentions divided by all object mentions.
pub fn chair_i(corpus: &[CaptionObjects]) -> Result<f64> {
    let mentioned: usize = corpus.iter().map(|c| c.mentioned.len()).sum();
    if mentioned == 0 {
        return Err(Error::UndefinedMetric(
            "instance-level rate needs at least one mentioned object".into(),
        ));
    }
    let hallucinated: usize = corpus.iter().map(CaptionObjects::hallucinated_count).sum();
    Ok(hallucinated as f64 / mentioned as f64)
}

/// Sentence-level hallucination rate: fraction of captions mentioning at
/// least one object absent from the ground truth.
pub fn chair_s(corpus: &[CaptionObjects]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::UndefinedMetric(
            "sentence-level rate needs a non-empty corpus".into(),
        ));
    }
    let hallucinated = corpus
        .iter()
        .filter(|c| c.hallucinated_count() > 0)
        .count();
    Ok(hallucinated as f64 / corpus.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

/// One yes/no probe: the model's answer and the true label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryOutcome {
    pub pred: Answer,
    pub label: Answer,
}

/// Confusion-matrix scores with "yes" as the positive class. Components
/// whose denominator is zero are reported as absent rather than zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

pub fn pope_scores(outcomes: &[BinaryOutcome]) -> Result<PopeScores> {
    if outcomes.is_empty() {
        return Err(Error::UndefinedMetric(
            "scores need at least one outcome".into(),
        ));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    for o in outcomes {
        match (o.pred, o.label) {
            (Answer::Yes, Answer::Yes) => tp += 1,
            (Answer::Yes, Answer::No) => fp += 1,
            (Answer::No, Answer::Yes) => fn_ += 1,
            (Answer::No, Answer::No) => tn += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / outcomes.len() as f64;
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(PopeScores {
        accuracy,
        precision,
        recall,
        f1,
    })
}
