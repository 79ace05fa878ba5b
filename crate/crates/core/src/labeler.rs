//! Word-salad chunk labels from chunk embeddings, the chopping point, and the
//! relabeling that turns them into probe training targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelerConfig {
    /// Cosine similarity at or above which a chunk counts as a repeat.
    pub theta: f64,
    /// How many preceding chunks are compared against.
    pub window: usize,
    /// Length of the salad run that establishes a chopping point.
    pub consecutive_required: usize,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            theta: 0.99,
            window: 100,
            consecutive_required: 2,
        }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "theta must be in (0, 1], got {}",
                self.theta
            )));
        }
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be >= 1".into()));
        }
        if self.consecutive_required == 0 {
            return Err(Error::InvalidConfig(
                "consecutive_required must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

fn unit(v: &[f32]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok(v.iter().map(|&x| f64::from(x) / norm).collect())
}

/// Flags chunk `i` when any of the `window` chunks before it has cosine
/// similarity `>= theta`. The first chunk is never flagged.
pub fn label_salad_chunks<R: AsRef<[f32]>>(
    embeddings: &[R],
    config: &LabelerConfig,
) -> Result<Vec<bool>> {
    config.validate()?;
    let Some(first) = embeddings.first() else {
        return Err(Error::Empty("no embeddings to label"));
    };
    let dim = first.as_ref().len();
    let units = embeddings
        .iter()
        .map(|e| {
            let e = e.as_ref();
            if e.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: e.len(),
                });
            }
            unit(e)
        })
        .collect::<Result<Vec<_>>>()?;

    let labels = (0..units.len())
        .map(|i| {
            let lo = i.saturating_sub(config.window);
            units[lo..i].iter().any(|prev| {
                let sim: f64 = prev.iter().zip(&units[i]).map(|(a, b)| a * b).sum();
                sim >= config.theta
            })
        })
        .collect();
    Ok(labels)
}

/// Smallest 1-based `t` where `labels[t..t + k)` are all salad.
pub fn find_chopping_point(labels: &[bool], consecutive_required: usize) -> Option<usize> {
    if consecutive_required == 0 {
        return None;
    }
    let mut run = 0;
    for (i, &salad) in labels.iter().enumerate() {
        run = if salad { run + 1 } else { 0 };
        if run == consecutive_required {
            return Some(i + 2 - consecutive_required);
        }
    }
    None
}

/// Zeros before the chopping point and ones from it onward. Without a
/// chopping point every chunk becomes a negative.
pub fn relabel_for_training(labels: &[bool], chopping_point: Option<usize>) -> Result<Vec<bool>> {
    match chopping_point {
        None => Ok(vec![false; labels.len()]),
        Some(t) if t >= 1 && t <= labels.len() => {
            Ok((1..=labels.len()).map(|i| i >= t).collect())
        }
        Some(t) => Err(Error::OutOfRange(format!(
            "chopping point {t} outside 1..={}",
            labels.len()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLabels {
    pub salad: Vec<bool>,
    pub chopping_point: Option<usize>,
    pub train: Vec<bool>,
}

/// Salad labels, chopping point and training labels for one trace.
pub fn curate<R: AsRef<[f32]>>(embeddings: &[R], config: &LabelerConfig) -> Result<TraceLabels> {
    let salad = label_salad_chunks(embeddings, config)?;
    let chopping_point = find_chopping_point(&salad, config.consecutive_required);
    let train = relabel_for_training(&salad, chopping_point)?;
    Ok(TraceLabels {
        salad,
        chopping_point,
        train,
    })
}
