//! Splits a token stream into delimiter-terminated chunks, either over a whole
//! trace or one token at a time during decoding.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids that close a chunk.
///
/// Tokenizers encode a blank line either as one merged token or as two
/// newline tokens. `Pair(a, b)` matches `b` only when it directly follows `a`;
/// the leading `a` then stays inside the chunk span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelimiterSet {
    Single(BTreeSet<u32>),
    Pair(u32, u32),
}

impl DelimiterSet {
    pub fn single(ids: impl IntoIterator<Item = u32>) -> Result<Self> {
        let ids: BTreeSet<u32> = ids.into_iter().collect();
        if ids.is_empty() {
            return Err(Error::InvalidConfig("delimiter id set is empty".into()));
        }
        Ok(DelimiterSet::Single(ids))
    }

    pub fn pair(first: u32, second: u32) -> Self {
        DelimiterSet::Pair(first, second)
    }

    /// Whether `token` closes a chunk, given the token emitted before it.
    pub fn is_boundary(&self, prev: Option<u32>, token: u32) -> bool {
        match self {
            DelimiterSet::Single(ids) => ids.contains(&token),
            DelimiterSet::Pair(a, b) => token == *b && prev == Some(*a),
        }
    }
}

/// One chunk: `start..end` holds its tokens and `end` is the position of the
/// trailing delimiter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSpan {
    pub start: usize,
    pub end: usize,
}

impl ChunkSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    /// Consecutive delimiters produce an empty span.
    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn delimiter(&self) -> usize {
        self.end
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub spans: Vec<ChunkSpan>,
    /// Tokens after the last delimiter; never a chunk.
    pub remainder: Range<usize>,
}

pub fn segment(token_ids: &[u32], delimiters: &DelimiterSet) -> Segmentation {
    let mut spans = Vec::new();
    let mut start = 0;
    let mut prev = None;
    for (pos, &tok) in token_ids.iter().enumerate() {
        if delimiters.is_boundary(prev, tok) {
            spans.push(ChunkSpan { start, end: pos });
            start = pos + 1;
            // a closing token cannot open the next pair
            prev = None;
        } else {
            prev = Some(tok);
        }
    }
    Segmentation {
        spans,
        remainder: start..token_ids.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkBoundaryEvent {
    /// Tokens since the previous delimiter, both delimiters excluded.
    pub chunk_len: usize,
    /// Index of the delimiter in the full sequence (prompt included).
    pub position: usize,
}

/// Streaming chunk tracker for a single generation.
#[derive(Debug, Clone)]
pub struct ChunkerState {
    delimiters: DelimiterSet,
    chunk_start: usize,
    tokens_seen: usize,
    prev: Option<u32>,
}

impl ChunkerState {
    /// The first chunk starts right after the prompt.
    pub fn new(delimiters: DelimiterSet, prompt_len: usize) -> Self {
        Self {
            delimiters,
            chunk_start: prompt_len,
            tokens_seen: prompt_len,
            prev: None,
        }
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    pub fn last_delimiter_pos(&self) -> Option<usize> {
        self.chunk_start.checked_sub(1)
    }

    pub fn feed_token(&mut self, token_id: u32) -> Option<ChunkBoundaryEvent> {
        let position = self.tokens_seen;
        self.tokens_seen += 1;
        if self.delimiters.is_boundary(self.prev, token_id) {
            let event = ChunkBoundaryEvent {
                chunk_len: position - self.chunk_start,
                position,
            };
            self.chunk_start = position + 1;
            self.prev = None;
            Some(event)
        } else {
            self.prev = Some(token_id);
            None
        }
    }

    /// Rewinds after the caller dropped tokens from the end of the sequence;
    /// `new_len` is the sequence length after truncation.
    pub fn truncate_to(&mut self, new_len: usize) {
        self.tokens_seen = new_len;
        self.chunk_start = self.chunk_start.min(new_len);
        self.prev = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nine() -> DelimiterSet {
        DelimiterSet::single([9]).unwrap()
    }

    #[test]
    fn segments_simple_sequence() {
        let seg = segment(&[5, 6, 9, 7, 9], &nine());
        assert_eq!(
            seg.spans,
            vec![ChunkSpan { start: 0, end: 2 }, ChunkSpan { start: 3, end: 4 }]
        );
        assert_eq!(seg.spans[0].delimiter(), 2);
        assert_eq!(seg.spans[1].delimiter(), 4);
        assert!(seg.remainder.is_empty());
    }

    #[test]
    fn consecutive_delimiters_give_empty_spans() {
        let seg = segment(&[9, 9], &nine());
        assert_eq!(seg.spans.len(), 2);
        assert!(seg.spans.iter().all(|s| s.is_empty() && s.range().is_empty()));
    }

    #[test]
    fn trailing_tokens_are_remainder() {
        let seg = segment(&[1, 9, 2, 3], &nine());
        assert_eq!(seg.spans.len(), 1);
        assert_eq!(seg.remainder, 2..4);
        assert!(segment(&[], &nine()).spans.is_empty());
    }

    #[test]
    fn empty_delimiter_set_rejected() {
        assert!(DelimiterSet::single([]).is_err());
    }

    #[test]
    fn pair_delimiter_matches_second_token() {
        let d = DelimiterSet::pair(4, 4);
        let seg = segment(&[1, 4, 4, 2, 4, 3, 4, 4, 4], &d);
        // 4,4 at 1..=2 closes; lone 4 at 4 does not; 4,4 at 6..=7 closes; 8 is a lone 4
        assert_eq!(
            seg.spans,
            vec![ChunkSpan { start: 0, end: 2 }, ChunkSpan { start: 3, end: 7 }]
        );
        assert_eq!(seg.remainder, 8..9);
    }

    #[test]
    fn streaming_counts_from_prompt_end() {
        let mut st = ChunkerState::new(nine(), 3);
        assert_eq!(st.last_delimiter_pos(), Some(2));
        for t in [1, 2, 3, 4] {
            assert_eq!(st.feed_token(t), None);
        }
        let ev = st.feed_token(9).unwrap();
        assert_eq!(ev.chunk_len, 4);
        assert_eq!(ev.position, 7);
        assert_eq!(st.feed_token(9).unwrap().chunk_len, 0);
    }

    #[test]
    fn chop_after_event_lands_on_previous_delimiter() {
        let prompt = vec![4u32, 4, 9];
        let mut ids = prompt.clone();
        let mut st = ChunkerState::new(nine(), prompt.len());
        for t in [3, 3, 9, 1, 1, 1, 9] {
            ids.push(t);
            if let Some(ev) = st.feed_token(t) {
                // dropping chunk_len + 1 tokens removes the chunk and its delimiter
                let kept = ids.len() - (ev.chunk_len + 1);
                assert_eq!(ids[kept - 1], 9);
                assert_eq!(kept, ev.position - ev.chunk_len);
            }
        }
    }

    proptest! {
        #[test]
        fn segmentation_is_lossless(ids in prop::collection::vec(0u32..6, 0..200), delim in 0u32..6) {
            let d = DelimiterSet::single([delim]).unwrap();
            let seg = segment(&ids, &d);
            let mut rebuilt = Vec::new();
            for s in &seg.spans {
                rebuilt.extend_from_slice(&ids[s.range()]);
                rebuilt.push(ids[s.delimiter()]);
            }
            rebuilt.extend_from_slice(&ids[seg.remainder.clone()]);
            prop_assert_eq!(rebuilt, ids);
        }

        #[test]
        fn streaming_equals_offline(ids in prop::collection::vec(0u32..5, 0..200), pair in any::<bool>()) {
            let d = if pair { DelimiterSet::pair(0, 1) } else { DelimiterSet::single([0, 1]).unwrap() };
            let offline: Vec<(usize, usize)> = segment(&ids, &d).spans.iter().map(|s| (s.len(), s.delimiter())).collect();
            let mut st = ChunkerState::new(d, 0);
            let online: Vec<(usize, usize)> = ids.iter().filter_map(|&t| st.feed_token(t)).map(|e| (e.chunk_len, e.position)).collect();
            prop_assert_eq!(online, offline);
        }
    }
}
