//! Offline re-enactment of the chop policy over a recorded trace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Action, DetectorState, PolicyConfig};
use crate::probe::ProbeModel;
use crate::trace::TraceRecord;
use crate::vectors::VectorTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub trace_id: String,
    /// 1-based index of the chunk whose boundary triggered the chop.
    pub chop_index: Option<usize>,
    /// Probe scores for every boundary evaluated, the chop boundary included.
    pub probabilities: Vec<f64>,
    pub decisions: Vec<Action>,
    pub tokens_total: usize,
    pub tokens_kept: usize,
    pub tokens_saved: usize,
    /// Whole chunks left in the generation after truncation.
    pub kept_chunks: usize,
    /// Rescue budget granted on a chop; not counted in `tokens_saved`.
    pub regen_budget: Option<u32>,
}

/// Scores each chunk's trailing-delimiter hidden state (rows
/// `first_row..first_row + chunks`) and runs the policy until the first chop.
/// Nothing is scored past the chop, since a live run would hand over to
/// rescue regeneration there.
pub fn replay(
    trace: &TraceRecord,
    hidden: &VectorTable,
    first_row: usize,
    model: &ProbeModel,
    config: &PolicyConfig,
) -> Result<ReplayReport> {
    config.validate()?;
    trace.validate()?;
    if hidden.dim() != model.dim() {
        return Err(Error::DimMismatch {
            expected: model.dim(),
            found: hidden.dim(),
        });
    }
    let rows = hidden
        .rows_range(first_row, trace.chunks.len())
        .ok_or_else(|| {
            Error::MissingVectors(format!(
                "trace {} needs rows {}..{} but the table has {}",
                trace.trace_id,
                first_row,
                first_row + trace.chunks.len(),
                hidden.count()
            ))
        })?;

    let tokens_total = trace.len();
    let mut state = DetectorState::new();
    let mut report = ReplayReport {
        trace_id: trace.trace_id.clone(),
        chop_index: None,
        probabilities: Vec::with_capacity(rows.len()),
        decisions: Vec::with_capacity(rows.len()),
        tokens_total,
        tokens_kept: tokens_total,
        tokens_saved: 0,
        kept_chunks: trace.chunks.len(),
        regen_budget: None,
    };
    for (chunk, h) in trace.chunks.iter().zip(rows) {
        let p = model.predict(h)?;
        let decision = state.on_chunk_boundary(p, chunk.token_count, config)?;
        report.probabilities.push(p);
        report.decisions.push(decision.action);
        if decision.is_chop() {
            let end = trace.delimiter_positions[chunk.index - 1] + 1;
            let kept = end - decision.truncate_tokens;
            report.chop_index = Some(chunk.index);
            report.tokens_kept = kept;
            report.tokens_saved = tokens_total - kept;
            report.kept_chunks = trace
                .delimiter_positions
                .iter()
                .take_while(|&&p| p < kept)
                .count();
            report.regen_budget = decision.regen.map(|r| r.budget);
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::DelimiterSet;

    const D: u32 = 1;

    /// Chunks of the given lengths, each followed by the delimiter.
    fn trace(lengths: &[usize], tail: usize) -> TraceRecord {
        let mut ids = Vec::new();
        for &n in lengths {
            ids.extend(std::iter::repeat_n(7u32, n));
            ids.push(D);
        }
        ids.extend(std::iter::repeat_n(7u32, tail));
        TraceRecord::from_tokens("r", "m", "t", 0.0, ids, &DelimiterSet::single([D]).unwrap())
    }

    /// Probe along the first axis; rows scaled so the probability is `p`.
    fn fixture(ps: &[f64]) -> (ProbeModel, VectorTable) {
        let model = ProbeModel::new(vec![1.0, 0.0], 0.0).unwrap();
        let rows: Vec<[f32; 2]> = ps.iter().map(|&p| [(p / (1.0 - p)).ln() as f32, 0.5]).collect();
        (model, VectorTable::from_rows(2, &rows).unwrap())
    }

    #[test]
    fn chops_on_second_high_long_chunk() {
        let t = trace(&[20, 20, 20, 20], 5);
        let (m, h) = fixture(&[0.1, 0.9, 0.9, 0.9]);
        let r = replay(&t, &h, 0, &m, &PolicyConfig::default()).unwrap();
        assert_eq!(r.chop_index, Some(3));
        assert_eq!(r.probabilities.len(), 3);
        assert!((r.probabilities[0] - 0.1).abs() < 1e-6);
        assert_eq!(r.decisions, vec![Action::Continue, Action::Continue, Action::Chop]);
        // chunk 3 spans 42..62, delimiter at 62
        assert_eq!(r.tokens_total, 89);
        assert_eq!(r.tokens_kept, 42);
        assert_eq!(r.tokens_saved, 47);
        assert_eq!(r.kept_chunks, 2);
        assert_eq!(r.regen_budget, Some(4096));
    }

    #[test]
    fn benign_trace_saves_nothing() {
        let t = trace(&[15, 3, 40], 0);
        let (m, h) = fixture(&[0.2, 0.3, 0.1]);
        let r = replay(&t, &h, 0, &m, &PolicyConfig::default()).unwrap();
        assert_eq!(r.chop_index, None);
        assert_eq!(r.tokens_saved, 0);
        assert_eq!(r.kept_chunks, 3);
        assert_eq!(r, replay(&t, &h, 0, &m, &PolicyConfig::default()).unwrap());
    }

    #[test]
    fn missing_rows_and_dim_errors() {
        let t = trace(&[15, 3, 40], 0);
        let (m, h) = fixture(&[0.2, 0.3]);
        assert!(matches!(
            replay(&t, &h, 0, &m, &PolicyConfig::default()),
            Err(Error::MissingVectors(_))
        ));
        let (_, h3) = fixture(&[0.2, 0.3, 0.4]);
        let wide = ProbeModel::zeros(3);
        assert!(matches!(
            replay(&t, &h3, 0, &wide, &PolicyConfig::default()),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn offset_rows_are_honored() {
        let t = trace(&[20, 20], 0);
        let (m, h) = fixture(&[0.1, 0.1, 0.9, 0.9]);
        assert_eq!(replay(&t, &h, 0, &m, &PolicyConfig::default()).unwrap().chop_index, None);
        assert_eq!(replay(&t, &h, 2, &m, &PolicyConfig::default()).unwrap().chop_index, Some(2));
    }
}
