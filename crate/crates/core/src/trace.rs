//! Reasoning-trace records and the line-delimited JSON manifest that stores
//! them. Vectors live in separate [`VectorTable`](crate::vectors::VectorTable)
//! files referenced by row offset.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunker::{segment, DelimiterSet};
use crate::error::{Error, Result};

/// Pointer into a vector table: rows `first_row..first_row + chunks.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorRef {
    pub path: String,
    pub first_row: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    /// 1-based position in the trace.
    pub index: usize,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "binary_label")]
    pub salad_label: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "binary_label")]
    pub train_label: Option<bool>,
}

impl ChunkRecord {
    pub fn new(index: usize, token_count: usize) -> Self {
        Self {
            index,
            token_count,
            text: None,
            salad_label: None,
            train_label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trace_id: String,
    pub model_id: String,
    pub task: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<u32>>,
    /// Length of the trace when `token_ids` are withheld.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<usize>,
    pub delimiter_positions: Vec<usize>,
    pub chunks: Vec<ChunkRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_ref: Option<VectorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_ref: Option<VectorRef>,
}

impl TraceRecord {
    /// Builds a record by segmenting `token_ids`; tokens after the last
    /// delimiter are kept in `token_ids` but produce no chunk.
    pub fn from_tokens(
        trace_id: impl Into<String>,
        model_id: impl Into<String>,
        task: impl Into<String>,
        temperature: f64,
        token_ids: Vec<u32>,
        delimiters: &DelimiterSet,
    ) -> Self {
        let seg = segment(&token_ids, delimiters);
        let chunks = seg
            .spans
            .iter()
            .enumerate()
            .map(|(i, s)| ChunkRecord::new(i + 1, s.len()))
            .collect();
        Self {
            trace_id: trace_id.into(),
            model_id: model_id.into(),
            task: task.into(),
            temperature,
            delimiter_positions: seg.spans.iter().map(|s| s.delimiter()).collect(),
            token_ids: Some(token_ids),
            token_count: None,
            chunks,
            hidden_ref: None,
            embed_ref: None,
        }
    }

    /// Total generated length, trailing partial chunk included.
    pub fn len(&self) -> usize {
        match (&self.token_ids, self.token_count) {
            (Some(ids), _) => ids.len(),
            (None, Some(n)) => n,
            (None, None) => self.chunked_len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index just past the last delimiter.
    pub fn chunked_len(&self) -> usize {
        self.delimiter_positions.last().map_or(0, |p| p + 1)
    }

    /// Token offset at which chunk `index` (1-based) begins.
    pub fn chunk_start(&self, index: usize) -> Option<usize> {
        match index {
            0 => None,
            1 if !self.delimiter_positions.is_empty() => Some(0),
            i => self.delimiter_positions.get(i - 1).map(|_| self.delimiter_positions[i - 2] + 1),
        }
    }

    pub fn salad_labels(&self) -> Option<Vec<bool>> {
        self.chunks.iter().map(|c| c.salad_label).collect()
    }

    pub fn train_labels(&self) -> Option<Vec<bool>> {
        self.chunks.iter().map(|c| c.train_label).collect()
    }

    /// Structural checks that need no tokenizer knowledge.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::invalid_trace(&self.trace_id, reason);
        if self
            .delimiter_positions
            .windows(2)
            .any(|w| w[0] >= w[1])
        {
            return Err(bad("delimiter_positions not strictly increasing".into()));
        }
        if self.chunks.len() != self.delimiter_positions.len() {
            return Err(bad(format!(
                "{} chunks for {} delimiters",
                self.chunks.len(),
                self.delimiter_positions.len()
            )));
        }
        let mut prev_end: Option<usize> = None;
        for (i, (chunk, &pos)) in self.chunks.iter().zip(&self.delimiter_positions).enumerate() {
            if chunk.index != i + 1 {
                return Err(bad(format!(
                    "chunk at position {} has index {}",
                    i + 1,
                    chunk.index
                )));
            }
            let start = prev_end.map_or(0, |p| p + 1);
            if pos - start != chunk.token_count {
                return Err(bad(format!(
                    "chunk {} declares {} tokens but its delimiter sits at {}",
                    chunk.index, chunk.token_count, pos
                )));
            }
            prev_end = Some(pos);
        }
        let total: usize = self.chunks.iter().map(|c| c.token_count + 1).sum();
        if total != self.chunked_len() {
            return Err(bad("chunk token counts do not cover the chunked span".into()));
        }
        if let (Some(ids), Some(n)) = (&self.token_ids, self.token_count) {
            if ids.len() != n {
                return Err(bad(format!("token_count {n} but {} token_ids", ids.len())));
            }
        }
        if self.chunked_len() > self.len() {
            return Err(bad("delimiter position past end of trace".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(bad(format!("temperature {}", self.temperature)));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus a check that every delimiter position
    /// holds a delimiter token. Skipped when ids are withheld.
    pub fn validate_with(&self, delimiters: &DelimiterSet) -> Result<()> {
        self.validate()?;
        let Some(ids) = &self.token_ids else {
            return Ok(());
        };
        for &pos in &self.delimiter_positions {
            let prev = pos.checked_sub(1).map(|p| ids[p]);
            if !delimiters.is_boundary(prev, ids[pos]) {
                return Err(Error::invalid_trace(
                    &self.trace_id,
                    format!("token {} at {} is not a delimiter", ids[pos], pos),
                ));
            }
        }
        Ok(())
    }
}

pub fn render_trace(trace: &TraceRecord) -> String {
    // TraceRecord holds only strings, numbers and sequences
    serde_json::to_string(trace).expect("trace serializes")
}

pub fn parse_trace(line: &str) -> Result<TraceRecord> {
    let trace: TraceRecord =
        serde_json::from_str(line).map_err(|source| Error::Manifest { line: 1, source })?;
    trace.validate()?;
    Ok(trace)
}

pub fn read_manifest_from(reader: impl Read) -> Result<Vec<TraceRecord>> {
    let mut traces = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: TraceRecord = serde_json::from_str(&line)
            .map_err(|source| Error::Manifest { line: i + 1, source })?;
        trace.validate()?;
        traces.push(trace);
    }
    Ok(traces)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    read_manifest_from(fs::File::open(path)?)
}

pub fn write_manifest_to(mut writer: impl Write, traces: &[TraceRecord]) -> Result<()> {
    for t in traces {
        writeln!(writer, "{}", render_trace(t))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_manifest(path: impl AsRef<Path>, traces: &[TraceRecord]) -> Result<()> {
    write_manifest_to(BufWriter::new(fs::File::create(path)?), traces)
}

/// First table row for each trace: the reference's `first_row` when present,
/// otherwise rows are assumed packed in manifest order.
pub fn resolve_first_rows(
    traces: &[TraceRecord],
    reference: impl Fn(&TraceRecord) -> Option<&VectorRef>,
) -> Vec<usize> {
    let mut next = 0usize;
    traces
        .iter()
        .map(|t| {
            let first = reference(t).map_or(next, |r| r.first_row as usize);
            next = first + t.chunks.len();
            first
        })
        .collect()
}

mod binary_label {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<bool>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_u8(u8::from(*b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
        match Option::<u8>::deserialize(d)? {
            None => Ok(None),
            Some(0) => Ok(Some(false)),
            Some(1) => Ok(Some(true)),
            Some(v) => Err(de::Error::custom(format!("label must be 0 or 1, got {v}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TraceRecord {
        let d = DelimiterSet::single([9]).unwrap();
        let mut t = TraceRecord::from_tokens("t1", "m", "gsm8k", 0.6, vec![5, 6, 9, 7, 9, 3], &d);
        t.chunks[1].salad_label = Some(true);
        t.chunks[0].salad_label = Some(false);
        t.hidden_ref = Some(VectorRef {
            path: "h.wscv".into(),
            first_row: 4,
        });
        t
    }

    #[test]
    fn from_tokens_builds_consistent_record() {
        let t = sample();
        assert_eq!(t.delimiter_positions, vec![2, 4]);
        assert_eq!(t.chunks.len(), 2);
        assert_eq!(t.chunks[0].token_count, 2);
        assert_eq!(t.chunks[1].token_count, 1);
        assert_eq!(t.len(), 6);
        assert_eq!(t.chunked_len(), 5);
        assert_eq!(t.chunk_start(1), Some(0));
        assert_eq!(t.chunk_start(2), Some(3));
        assert_eq!(t.chunk_start(3), None);
        t.validate_with(&DelimiterSet::single([9]).unwrap()).unwrap();
        assert!(t.validate_with(&DelimiterSet::single([8]).unwrap()).is_err());
    }

    #[test]
    fn field_names_and_labels_on_the_wire() {
        let line = render_trace(&sample());
        for key in [
            "\"trace_id\"",
            "\"model_id\"",
            "\"task\"",
            "\"temperature\"",
            "\"token_ids\"",
            "\"delimiter_positions\"",
            "\"chunks\"",
            "\"hidden_ref\"",
            "\"first_row\"",
            "\"salad_label\":1",
            "\"salad_label\":0",
        ] {
            assert!(line.contains(key), "{key} missing from {line}");
        }
        assert!(!line.contains("embed_ref"));
    }

    #[test]
    fn withheld_ids_use_token_count() {
        let line = r#"{"trace_id":"a","model_id":"m","task":"x","temperature":0.0,"token_count":9,"delimiter_positions":[3,5],"chunks":[{"index":1,"token_count":3},{"index":2,"token_count":1}]}"#;
        let t = parse_trace(line).unwrap();
        assert_eq!(t.len(), 9);
    }

    #[test]
    fn inconsistent_records_rejected() {
        let mut t = sample();
        t.chunks[1].token_count = 4;
        assert!(t.validate().is_err());

        let mut t = sample();
        t.chunks.pop();
        assert!(t.validate().is_err());

        let mut t = sample();
        t.delimiter_positions = vec![4, 2];
        assert!(t.validate().is_err());

        let bad_label = r#"{"trace_id":"a","model_id":"m","task":"x","temperature":0.0,"token_count":2,"delimiter_positions":[1],"chunks":[{"index":1,"token_count":1,"salad_label":2}]}"#;
        assert!(matches!(parse_trace(bad_label), Err(Error::Manifest { .. })));
    }

    #[test]
    fn manifest_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let traces = vec![sample(), sample()];
        write_manifest(&p, &traces).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), traces);
    }

    #[test]
    fn first_rows_pack_when_refs_missing() {
        let mut a = sample();
        a.hidden_ref = None;
        let b = a.clone();
        let mut c = sample();
        c.hidden_ref.as_mut().unwrap().first_row = 40;
        let rows = resolve_first_rows(&[a, b, c], |t| t.hidden_ref.as_ref());
        assert_eq!(rows, vec![0, 2, 40]);
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            ids in prop::collection::vec(0u32..8, 0..80),
            labels in prop::collection::vec(prop::option::of(any::<bool>()), 80),
            temp in 0.0f64..2.0,
        ) {
            let d = DelimiterSet::single([0]).unwrap();
            let mut t = TraceRecord::from_tokens("id", "model", "task", temp, ids, &d);
            for (c, l) in t.chunks.iter_mut().zip(&labels) {
                c.salad_label = *l;
                c.train_label = l.map(|b| !b);
                c.text = Some(format!("chunk \"{}\"\n\n", c.index));
            }
            t.embed_ref = Some(VectorRef { path: "e.wscv".into(), first_row: 3 });
            let back = parse_trace(&render_trace(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
