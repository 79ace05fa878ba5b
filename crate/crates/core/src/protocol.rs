//! Length-prefixed binary frames spoken by the decision sidecar.
//!
//! Every frame is `len: u32 | type: u8 | payload[len]`, where `len` counts
//! payload bytes only. All integers and reals are little-endian.
//!
//! | type | frame       | payload                                                        |
//! |------|-------------|----------------------------------------------------------------|
//! | 0x01 | HELLO       | `hidden_dim: u32`                                              |
//! | 0x02 | CHUNK_EVENT | `stream_id: u64, chunk_len: u32, dim: u32, dim x f32`          |
//! | 0x03 | DECISION    | `stream_id: u64, action: u8, probability: f32, regen_budget: u32` |
//! | 0x04 | RESET       | `stream_id: u64`                                               |
//! | 0x05 | ERROR       | `code_len: u16, code: utf8, message: utf8 (rest)`              |

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const HELLO: u8 = 0x01;
pub const CHUNK_EVENT: u8 = 0x02;
pub const DECISION: u8 = 0x03;
pub const RESET: u8 = 0x04;
pub const ERROR: u8 = 0x05;

/// Upper bound on a payload; a CHUNK_EVENT at dim 65536 is ~256 KiB.
pub const MAX_PAYLOAD: u32 = 16 << 20;

pub const ACTION_CONTINUE: u8 = 0;
pub const ACTION_CHOP: u8 = 1;

/// Error codes sent in ERROR frames.
pub mod codes {
    pub const DIM_MISMATCH: &str = "dim_mismatch";
    pub const MALFORMED: &str = "malformed";
    pub const NO_HELLO: &str = "no_hello";
    pub const STREAM_CHOPPED: &str = "stream_chopped";
    pub const UNEXPECTED_FRAME: &str = "unexpected_frame";
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Hello {
        hidden_dim: u32,
    },
    ChunkEvent {
        stream_id: u64,
        chunk_len: u32,
        hidden: Vec<f32>,
    },
    Decision {
        stream_id: u64,
        chop: bool,
        probability: f32,
        regen_budget: u32,
    },
    Reset {
        stream_id: u64,
    },
    Error {
        code: String,
        message: String,
    },
}

impl Frame {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Frame::Error {
            code: code.to_owned(),
            message: message.into(),
        }
    }

    pub fn type_byte(&self) -> u8 {
        match self {
            Frame::Hello { .. } => HELLO,
            Frame::ChunkEvent { .. } => CHUNK_EVENT,
            Frame::Decision { .. } => DECISION,
            Frame::Reset { .. } => RESET,
            Frame::Error { .. } => ERROR,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        match self {
            Frame::Hello { hidden_dim } => p.extend_from_slice(&hidden_dim.to_le_bytes()),
            Frame::ChunkEvent {
                stream_id,
                chunk_len,
                hidden,
            } => {
                p.reserve(16 + hidden.len() * 4);
                p.extend_from_slice(&stream_id.to_le_bytes());
                p.extend_from_slice(&chunk_len.to_le_bytes());
                p.extend_from_slice(&(hidden.len() as u32).to_le_bytes());
                for v in hidden {
                    p.extend_from_slice(&v.to_le_bytes());
                }
            }
            Frame::Decision {
                stream_id,
                chop,
                probability,
                regen_budget,
            } => {
                p.extend_from_slice(&stream_id.to_le_bytes());
                p.push(if *chop { ACTION_CHOP } else { ACTION_CONTINUE });
                p.extend_from_slice(&probability.to_le_bytes());
                p.extend_from_slice(&regen_budget.to_le_bytes());
            }
            Frame::Reset { stream_id } => p.extend_from_slice(&stream_id.to_le_bytes()),
            Frame::Error { code, message } => {
                let code = &code.as_bytes()[..code.len().min(u16::MAX as usize)];
                p.extend_from_slice(&(code.len() as u16).to_le_bytes());
                p.extend_from_slice(code);
                p.extend_from_slice(message.as_bytes());
            }
        }
        p
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(5 + payload.len());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.push(self.type_byte());
        out.extend_from_slice(&payload);
        out
    }

    /// Decodes one complete frame from the front of `bytes`, returning it with
    /// the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Frame, usize)> {
        if bytes.len() < 5 {
            return Err(Error::Protocol("frame header truncated".into()));
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(Error::Protocol(format!("payload of {len} bytes exceeds limit")));
        }
        let end = 5 + len as usize;
        let payload = bytes
            .get(5..end)
            .ok_or_else(|| Error::Protocol("payload truncated".into()))?;
        Ok((Self::decode_payload(bytes[4], payload)?, end))
    }

    pub fn decode_payload(kind: u8, p: &[u8]) -> Result<Frame> {
        let want = |n: usize| -> Result<()> {
            if p.len() == n {
                Ok(())
            } else {
                Err(Error::Protocol(format!(
                    "frame type {kind:#04x} expects {n} payload bytes, got {}",
                    p.len()
                )))
            }
        };
        let u32_at = |o: usize| u32::from_le_bytes(p[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(p[o..o + 8].try_into().unwrap());
        match kind {
            HELLO => {
                want(4)?;
                Ok(Frame::Hello {
                    hidden_dim: u32_at(0),
                })
            }
            CHUNK_EVENT => {
                if p.len() < 16 {
                    return Err(Error::Protocol("chunk event header truncated".into()));
                }
                let dim = u32_at(12) as usize;
                want(16 + dim * 4)?;
                Ok(Frame::ChunkEvent {
                    stream_id: u64_at(0),
                    chunk_len: u32_at(8),
                    hidden: p[16..]
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                })
            }
            DECISION => {
                want(17)?;
                let chop = match p[8] {
                    ACTION_CONTINUE => false,
                    ACTION_CHOP => true,
                    a => return Err(Error::Protocol(format!("unknown action {a}"))),
                };
                Ok(Frame::Decision {
                    stream_id: u64_at(0),
                    chop,
                    probability: f32::from_bits(u32_at(9)),
                    regen_budget: u32_at(13),
                })
            }
            RESET => {
                want(8)?;
                Ok(Frame::Reset {
                    stream_id: u64_at(0),
                })
            }
            ERROR => {
                if p.len() < 2 {
                    return Err(Error::Protocol("error frame truncated".into()));
                }
                let code_len = u16::from_le_bytes([p[0], p[1]]) as usize;
                let code = p
                    .get(2..2 + code_len)
                    .ok_or_else(|| Error::Protocol("error code truncated".into()))?;
                let text = |b: &[u8]| {
                    String::from_utf8(b.to_vec())
                        .map_err(|_| Error::Protocol("error frame is not utf-8".into()))
                };
                Ok(Frame::Error {
                    code: text(code)?,
                    message: text(&p[2 + code_len..])?,
                })
            }
            other => Err(Error::Protocol(format!("unknown frame type {other:#04x}"))),
        }
    }
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut header = [0u8; 5];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("frame header truncated".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header[..4].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Protocol("payload truncated".into()),
        _ => e.into(),
    })?;
    Frame::decode_payload(header[4], &payload).map(Some)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&frame.encode())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hello_layout() {
        assert_eq!(
            Frame::Hello { hidden_dim: 8 }.encode(),
            vec![4, 0, 0, 0, 0x01, 8, 0, 0, 0]
        );
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(Frame::decode(&[1, 0, 0]).is_err());
        // unknown type
        assert!(Frame::decode(&[0, 0, 0, 0, 0x09]).is_err());
        // HELLO with 3 payload bytes
        assert!(Frame::decode(&[3, 0, 0, 0, 0x01, 1, 2, 3]).is_err());
        // CHUNK_EVENT whose dim disagrees with its length
        let mut ev = Frame::ChunkEvent {
            stream_id: 1,
            chunk_len: 2,
            hidden: vec![1.0, 2.0],
        }
        .encode();
        ev[5 + 12] = 3;
        assert!(Frame::decode(&ev).is_err());
        // DECISION with action 7
        let mut d = Frame::Decision {
            stream_id: 1,
            chop: false,
            probability: 0.5,
            regen_budget: 0,
        }
        .encode();
        d[5 + 8] = 7;
        assert!(Frame::decode(&d).is_err());
        // oversize length prefix
        assert!(Frame::decode(&[0xff, 0xff, 0xff, 0xff, 0x01]).is_err());
    }

    #[test]
    fn stream_reader_handles_eof() {
        let mut bytes = Frame::Reset { stream_id: 3 }.encode();
        bytes.extend(Frame::Hello { hidden_dim: 2 }.encode());
        let mut cur = io::Cursor::new(bytes);
        assert_eq!(read_frame(&mut cur).unwrap(), Some(Frame::Reset { stream_id: 3 }));
        assert_eq!(read_frame(&mut cur).unwrap(), Some(Frame::Hello { hidden_dim: 2 }));
        assert_eq!(read_frame(&mut cur).unwrap(), None);

        let mut cut = io::Cursor::new(Frame::Reset { stream_id: 3 }.encode()[..7].to_vec());
        assert!(matches!(read_frame(&mut cut), Err(Error::Protocol(_))));
    }

    fn any_frame() -> impl Strategy<Value = Frame> {
        prop_oneof![
            any::<u32>().prop_map(|hidden_dim| Frame::Hello { hidden_dim }),
            (any::<u64>(), any::<u32>(), prop::collection::vec(-1e6f32..1e6, 0..64)).prop_map(
                |(stream_id, chunk_len, hidden)| Frame::ChunkEvent { stream_id, chunk_len, hidden }
            ),
            (any::<u64>(), any::<bool>(), 0.0f32..1.0, any::<u32>()).prop_map(
                |(stream_id, chop, probability, regen_budget)| Frame::Decision { stream_id, chop, probability, regen_budget }
            ),
            any::<u64>().prop_map(|stream_id| Frame::Reset { stream_id }),
            ("[a-z_]{0,20}", ".{0,40}").prop_map(|(code, message)| Frame::Error { code, message }),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_identity(frame in any_frame()) {
            let bytes = frame.encode();
            let (back, used) = Frame::decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back.encode(), bytes);
            prop_assert_eq!(back, frame);
        }
    }
}
