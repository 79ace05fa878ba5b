//! Corpus statistics: salad token and chunk shares, before/after
//! chopping-point ratios, length savings and classifier overhead.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeler::find_chopping_point;
use crate::trace::{ChunkRecord, TraceRecord};

fn pct(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

/// Two-decimal rounding for reported figures.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn salad_flags(trace: &TraceRecord) -> Result<Vec<bool>> {
    trace
        .chunks
        .iter()
        .map(|c| {
            c.salad_label.ok_or_else(|| Error::UnlabeledChunk {
                trace_id: trace.trace_id.clone(),
                index: c.index,
            })
        })
        .collect()
}

/// Share of chunk tokens that sit in salad chunks, over `chunks` only.
/// Returns 0 for chunks that hold no tokens at all.
pub fn salad_token_share(chunks: &[ChunkRecord]) -> Option<f64> {
    let mut salad = 0;
    let mut total = 0;
    for c in chunks {
        total += c.token_count;
        if c.salad_label? {
            salad += c.token_count;
        }
    }
    Some(if total == 0 { 0.0 } else { pct(salad, total) })
}

pub fn salad_token_percentage(trace: &TraceRecord) -> Result<f64> {
    salad_flags(trace)?;
    Ok(salad_token_share(&trace.chunks).expect("labels checked"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub trace_id: String,
    pub total_tokens: usize,
    pub salad_tokens: usize,
    pub total_chunks: usize,
    pub salad_chunks: usize,
    pub chopping_point: Option<usize>,
    pub pre_point_salad_pct: Option<f64>,
    pub post_point_salad_pct: Option<f64>,
}

impl TraceStats {
    pub fn salad_token_pct(&self) -> f64 {
        if self.total_tokens == 0 {
            0.0
        } else {
            pct(self.salad_tokens, self.total_tokens)
        }
    }

    pub fn salad_chunk_pct(&self) -> f64 {
        if self.total_chunks == 0 {
            0.0
        } else {
            pct(self.salad_chunks, self.total_chunks)
        }
    }
}

pub fn trace_stats(trace: &TraceRecord, consecutive_required: usize) -> Result<TraceStats> {
    let flags = salad_flags(trace)?;
    let chopping_point = find_chopping_point(&flags, consecutive_required);
    let (pre, post) = match chopping_point {
        Some(t) => {
            let (before, after) = flags.split_at(t - 1);
            let share = |s: &[bool]| {
                (!s.is_empty()).then(|| pct(s.iter().filter(|&&b| b).count(), s.len()))
            };
            (share(before), share(after))
        }
        None => (None, None),
    };
    Ok(TraceStats {
        trace_id: trace.trace_id.clone(),
        total_tokens: trace.chunks.iter().map(|c| c.token_count).sum(),
        salad_tokens: trace
            .chunks
            .iter()
            .zip(&flags)
            .filter(|(_, &s)| s)
            .map(|(c, _)| c.token_count)
            .sum(),
        total_chunks: flags.len(),
        salad_chunks: flags.iter().filter(|&&b| b).count(),
        chopping_point,
        pre_point_salad_pct: pre,
        post_point_salad_pct: post,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkLabelStats {
    pub traces: usize,
    pub traces_with_point: usize,
    /// Salad tokens over all chunk tokens, pooled across traces.
    pub overall_salad_token_pct: f64,
    /// Salad chunks over all chunks, pooled across traces.
    pub overall_salad_chunk_pct: f64,
    /// Pooled over chunks before the chopping point, traces with a point only.
    pub pre_point_pct: Option<f64>,
    /// Pooled over chunks at or after the chopping point.
    pub post_point_pct: Option<f64>,
    pub per_trace: Vec<TraceStats>,
}

pub fn chunk_label_stats(
    traces: &[TraceRecord],
    consecutive_required: usize,
) -> Result<ChunkLabelStats> {
    if traces.is_empty() {
        return Err(Error::Empty("no traces to analyze"));
    }
    let per_trace = traces
        .iter()
        .map(|t| trace_stats(t, consecutive_required))
        .collect::<Result<Vec<_>>>()?;

    let (mut chunks, mut salad_chunks, mut tokens, mut salad_tokens) = (0, 0, 0, 0);
    let (mut pre_n, mut pre_s, mut post_n, mut post_s) = (0, 0, 0, 0);
    for (trace, stats) in traces.iter().zip(&per_trace) {
        chunks += stats.total_chunks;
        salad_chunks += stats.salad_chunks;
        tokens += stats.total_tokens;
        salad_tokens += stats.salad_tokens;
        if let Some(t) = stats.chopping_point {
            for c in &trace.chunks {
                let salad = c.salad_label == Some(true);
                if c.index < t {
                    pre_n += 1;
                    pre_s += usize::from(salad);
                } else {
                    post_n += 1;
                    post_s += usize::from(salad);
                }
            }
        }
    }
    let share = |s, n| if n == 0 { None } else { Some(pct(s, n)) };
    Ok(ChunkLabelStats {
        traces: traces.len(),
        traces_with_point: per_trace.iter().filter(|s| s.chopping_point.is_some()).count(),
        overall_salad_token_pct: share(salad_tokens, tokens).unwrap_or(0.0),
        overall_salad_chunk_pct: share(salad_chunks, chunks).unwrap_or(0.0),
        pre_point_pct: share(pre_s, pre_n),
        post_point_pct: share(post_s, post_n),
        per_trace,
    })
}

impl ChunkLabelStats {
    /// Flat per-trace table plus a pooled `ALL` row. Percentages carry two
    /// decimals; empty cells mark values that do not apply.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{:.2}", x)).unwrap_or_default();
        let mut out = String::from(
            "trace_id,total_tokens,salad_tokens,salad_token_pct,total_chunks,salad_chunks,salad_chunk_pct,chopping_point,pre_point_salad_pct,post_point_salad_pct\n",
        );
        for s in &self.per_trace {
            let _ = writeln!(
                out,
                "{},{},{},{:.2},{},{},{:.2},{},{},{}",
                csv_field(&s.trace_id),
                s.total_tokens,
                s.salad_tokens,
                s.salad_token_pct(),
                s.total_chunks,
                s.salad_chunks,
                s.salad_chunk_pct(),
                s.chopping_point.map(|t| t.to_string()).unwrap_or_default(),
                opt(s.pre_point_salad_pct),
                opt(s.post_point_salad_pct),
            );
        }
        let tokens: usize = self.per_trace.iter().map(|s| s.total_tokens).sum();
        let salad_tokens: usize = self.per_trace.iter().map(|s| s.salad_tokens).sum();
        let chunks: usize = self.per_trace.iter().map(|s| s.total_chunks).sum();
        let salad_chunks: usize = self.per_trace.iter().map(|s| s.salad_chunks).sum();
        let _ = writeln!(
            out,
            "ALL,{},{},{:.2},{},{},{:.2},,{},{}",
            tokens,
            salad_tokens,
            self.overall_salad_token_pct,
            chunks,
            salad_chunks,
            self.overall_salad_chunk_pct,
            opt(self.pre_point_pct),
            opt(self.post_point_pct),
        );
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthSavings {
    /// Positive when the new generation is shorter.
    pub delta_pct: f64,
}

pub fn length_savings(original_len: usize, new_len: usize) -> Result<LengthSavings> {
    if original_len == 0 {
        return Err(Error::OutOfRange("original length is 0".into()));
    }
    Ok(LengthSavings {
        delta_pct: 100.0 * (original_len as f64 - new_len as f64) / original_len as f64,
    })
}

/// Classifier time per chunk relative to the decoding time of that chunk.
pub fn overhead_ratio(t_classifier: f64, t_llm_step: f64, mean_chunk_len: f64) -> Result<f64> {
    for (name, v) in [
        ("t_classifier", t_classifier),
        ("t_llm_step", t_llm_step),
        ("mean_chunk_len", mean_chunk_len),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::OutOfRange(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(t_classifier / (mean_chunk_len * t_llm_step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::ChunkRecord;

    fn trace(counts: &[usize], labels: &[u8]) -> TraceRecord {
        let mut pos = Vec::new();
        let mut at = 0;
        let chunks = counts
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&n, &l))| {
                at += n;
                pos.push(at);
                at += 1;
                ChunkRecord {
                    salad_label: Some(l == 1),
                    ..ChunkRecord::new(i + 1, n)
                }
            })
            .collect();
        TraceRecord {
            trace_id: "t".into(),
            model_id: "m".into(),
            task: "x".into(),
            temperature: 0.0,
            token_ids: None,
            token_count: Some(at),
            delimiter_positions: pos,
            chunks,
            hidden_ref: None,
            embed_ref: None,
        }
    }

    #[test]
    fn token_percentage_examples() {
        let t = trace(&[10, 10, 20], &[0, 1, 1]);
        t.validate().unwrap();
        assert_eq!(salad_token_percentage(&t).unwrap(), 75.0);
        assert_eq!(salad_token_percentage(&trace(&[3, 4], &[0, 0])).unwrap(), 0.0);
        let mut t = trace(&[3, 4], &[0, 1]);
        t.chunks[1].salad_label = None;
        assert!(matches!(
            salad_token_percentage(&t),
            Err(Error::UnlabeledChunk { index: 2, .. })
        ));
    }

    #[test]
    fn before_and_after_point() {
        let stats = chunk_label_stats(&[trace(&[5, 5, 5, 5], &[0, 0, 1, 1])], 2).unwrap();
        assert_eq!(stats.overall_salad_chunk_pct, 50.0);
        assert_eq!(stats.pre_point_pct, Some(0.0));
        assert_eq!(stats.post_point_pct, Some(100.0));
        assert_eq!(stats.per_trace[0].chopping_point, Some(3));
    }

    #[test]
    fn no_point_leaves_pre_post_absent() {
        let stats = chunk_label_stats(&[trace(&[5, 5, 5], &[0, 1, 0])], 2).unwrap();
        assert!(stats.pre_point_pct.is_none() && stats.post_point_pct.is_none());
        assert!((stats.overall_salad_chunk_pct - 100.0 / 3.0).abs() < 1e-12);
        assert!(chunk_label_stats(&[], 2).is_err());
    }

    #[test]
    fn pooled_counts_match_recount() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let corpus: Vec<TraceRecord> = (0..40)
            .map(|_| {
                let n = rng.random_range(1..30);
                let counts: Vec<usize> = (0..n).map(|_| rng.random_range(0..40)).collect();
                let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
                trace(&counts, &labels)
            })
            .collect();
        let stats = chunk_label_stats(&corpus, 2).unwrap();

        // recount from scratch
        let (mut n, mut s, mut tok, mut stok) = (0usize, 0usize, 0usize, 0usize);
        let (mut pn, mut ps, mut qn, mut qs) = (0usize, 0usize, 0usize, 0usize);
        for t in &corpus {
            let labels: Vec<bool> = t.chunks.iter().map(|c| c.salad_label.unwrap()).collect();
            let point = (0..labels.len()).find(|&i| i + 1 < labels.len() && labels[i] && labels[i + 1]);
            for (i, c) in t.chunks.iter().enumerate() {
                n += 1;
                tok += c.token_count;
                if labels[i] {
                    s += 1;
                    stok += c.token_count;
                }
                if let Some(p) = point {
                    if i < p {
                        pn += 1;
                        ps += labels[i] as usize;
                    } else {
                        qn += 1;
                        qs += labels[i] as usize;
                    }
                }
            }
        }
        assert_eq!(stats.overall_salad_chunk_pct, 100.0 * s as f64 / n as f64);
        assert_eq!(stats.overall_salad_token_pct, 100.0 * stok as f64 / tok as f64);
        assert_eq!(stats.pre_point_pct, (pn > 0).then(|| 100.0 * ps as f64 / pn as f64));
        assert_eq!(stats.post_point_pct, (qn > 0).then(|| 100.0 * qs as f64 / qn as f64));
        for p in &stats.per_trace {
            assert!((0.0..=100.0).contains(&p.salad_token_pct()));
        }
    }

    #[test]
    fn csv_has_row_per_trace_plus_total() {
        let stats = chunk_label_stats(&[trace(&[5, 5, 5, 5], &[0, 0, 1, 1])], 2).unwrap();
        let csv = stats.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "t,20,10,50.00,4,2,50.00,3,0.00,100.00");
        assert!(lines[2].starts_with("ALL,20,10,50.00"));
    }

    #[test]
    fn length_savings_examples() {
        let s = length_savings(1904, 1082).unwrap().delta_pct;
        assert!((s - 43.19).abs() < 0.1, "{s}");
        assert_eq!(length_savings(500, 500).unwrap().delta_pct, 0.0);
        assert!(length_savings(100, 120).unwrap().delta_pct < 0.0);
        assert!(length_savings(0, 1).is_err());
    }

    #[test]
    fn overhead_examples() {
        let r = overhead_ratio(4.95, 39.16, 32.0).unwrap();
        assert!((r - 0.00395).abs() < 1e-5, "{r}");
        assert_eq!(overhead_ratio(2.0, 2.0, 1.0).unwrap(), 1.0);
        let a = overhead_ratio(1.0, 3.0, 10.0).unwrap();
        let b = overhead_ratio(1.0, 3.0, 20.0).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
        assert!((overhead_ratio(1.0, 6.0, 10.0).unwrap() - a / 2.0).abs() < 1e-15);
        assert!(overhead_ratio(0.0, 1.0, 1.0).is_err());
        assert!(overhead_ratio(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn rounding_to_two_places() {
        assert_eq!(round2(43.17226890756303), 43.17);
        assert_eq!(round2(0.3949), 0.39);
    }
}
