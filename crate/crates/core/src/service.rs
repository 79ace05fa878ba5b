//! Decision sidecar: answers CHUNK_EVENT frames with chop decisions.
//!
//! The service only advises. Truncating the sequence and injecting the
//! rescue prompt are left to the caller's inference engine. Stream ids are
//! scoped to a connection; each connection owns the detector state of its
//! streams.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::policy::{DetectorState, PolicyConfig};
use crate::probe::ProbeModel;
use crate::protocol::{codes, read_frame, write_frame, Frame};

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub frames: Vec<Frame>,
    pub close: bool,
}

impl Reply {
    fn one(frame: Frame) -> Self {
        Self {
            frames: vec![frame],
            close: false,
        }
    }

    fn none() -> Self {
        Self {
            frames: Vec::new(),
            close: false,
        }
    }

    fn fatal(code: &str, message: impl Into<String>) -> Self {
        Self {
            frames: vec![Frame::error(code, message)],
            close: true,
        }
    }
}

/// Transport-free protocol state for one connection.
#[derive(Debug)]
pub struct Session {
    model: Arc<ProbeModel>,
    config: Arc<PolicyConfig>,
    greeted: bool,
    streams: HashMap<u64, DetectorState>,
}

impl Session {
    pub fn new(model: Arc<ProbeModel>, config: Arc<PolicyConfig>) -> Self {
        Self {
            model,
            config,
            greeted: false,
            streams: HashMap::new(),
        }
    }

    pub fn active_streams(&self) -> usize {
        self.streams.len()
    }

    pub fn handle(&mut self, frame: Frame) -> Reply {
        let dim = self.model.dim();
        match frame {
            Frame::Hello { hidden_dim } => {
                if hidden_dim as usize != dim {
                    return Reply::one(Frame::error(
                        codes::DIM_MISMATCH,
                        format!("client hidden dim {hidden_dim}, model dim {dim}"),
                    ));
                }
                self.greeted = true;
                // acknowledge with the model's dim
                Reply::one(Frame::Hello { hidden_dim })
            }
            Frame::ChunkEvent {
                stream_id,
                chunk_len,
                hidden,
            } => {
                if !self.greeted {
                    return Reply::fatal(codes::NO_HELLO, "CHUNK_EVENT before HELLO");
                }
                if hidden.len() != dim {
                    return Reply::one(Frame::error(
                        codes::DIM_MISMATCH,
                        format!("event dim {}, model dim {dim}", hidden.len()),
                    ));
                }
                let p = match self.model.predict(&hidden) {
                    Ok(p) => p,
                    Err(e) => return Reply::one(Frame::error(codes::MALFORMED, e.to_string())),
                };
                let state = self.streams.entry(stream_id).or_default();
                match state.on_chunk_boundary(p, chunk_len as usize, &self.config) {
                    Ok(d) => Reply::one(Frame::Decision {
                        stream_id,
                        chop: d.is_chop(),
                        probability: p as f32,
                        regen_budget: d.regen.map_or(0, |r| r.budget),
                    }),
                    Err(Error::StreamChopped) => Reply::one(Frame::error(
                        codes::STREAM_CHOPPED,
                        format!("stream {stream_id} already chopped; send RESET to reuse it"),
                    )),
                    Err(e) => Reply::one(Frame::error(codes::MALFORMED, e.to_string())),
                }
            }
            Frame::Reset { stream_id } => {
                self.streams.remove(&stream_id);
                Reply::none()
            }
            Frame::Decision { .. } | Frame::Error { .. } => {
                Reply::fatal(codes::UNEXPECTED_FRAME, "clients may not send DECISION or ERROR")
            }
        }
    }
}

fn handle_connection(stream: TcpStream, model: Arc<ProbeModel>, config: Arc<PolicyConfig>) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut session = Session::new(model, config);
    loop {
        let reply = match read_frame(&mut reader) {
            Ok(Some(frame)) => session.handle(frame),
            Ok(None) => return Ok(()),
            Err(Error::Protocol(msg)) => Reply::fatal(codes::MALFORMED, msg),
            Err(e) => return Err(e),
        };
        for f in &reply.frames {
            write_frame(&mut writer, f)?;
        }
        writer.flush()?;
        if reply.close {
            return Ok(());
        }
    }
}

pub struct Server {
    listener: TcpListener,
    model: Arc<ProbeModel>,
    config: Arc<PolicyConfig>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, model: ProbeModel, config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            model: Arc::new(model),
            config: Arc::new(config),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections forever, one thread per connection.
    pub fn run(self) -> Result<()> {
        for conn in self.listener.incoming() {
            let conn = match conn {
                Ok(c) => c,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let peer = conn.peer_addr().ok();
            let (model, config) = (Arc::clone(&self.model), Arc::clone(&self.config));
            thread::spawn(move || {
                debug!("connection from {peer:?}");
                if let Err(e) = handle_connection(conn, model, config) {
                    debug!("connection {peer:?} ended: {e}");
                }
            });
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> Result<SocketAddr> {
        let addr = self.local_addr()?;
        thread::spawn(move || {
            if let Err(e) = self.run() {
                warn!("server stopped: {e}");
            }
        });
        Ok(addr)
    }
}

pub fn serve(endpoint: impl ToSocketAddrs, model: ProbeModel, config: PolicyConfig) -> Result<()> {
    Server::bind(endpoint, model, config)?.run()
}

/// Blocking client for the sidecar protocol.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Client {
    /// Connects and performs the HELLO exchange.
    pub fn connect(addr: impl ToSocketAddrs, hidden_dim: u32) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut client = Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        };
        match client.request(&Frame::Hello { hidden_dim })? {
            Frame::Hello { .. } => Ok(client),
            Frame::Error { code, message } => Err(Error::Protocol(format!("{code}: {message}"))),
            other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn send(&mut self, frame: &Frame) -> Result<()> {
        write_frame(&mut self.writer, frame)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Frame> {
        read_frame(&mut self.reader)?.ok_or_else(|| Error::Protocol("connection closed".into()))
    }

    pub fn request(&mut self, frame: &Frame) -> Result<Frame> {
        self.send(frame)?;
        self.recv()
    }

    pub fn chunk_event(&mut self, stream_id: u64, chunk_len: u32, hidden: &[f32]) -> Result<Frame> {
        self.request(&Frame::ChunkEvent {
            stream_id,
            chunk_len,
            hidden: hidden.to_vec(),
        })
    }

    pub fn reset(&mut self, stream_id: u64) -> Result<()> {
        self.send(&Frame::Reset { stream_id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(dim: usize) -> Session {
        let mut w = vec![0.0; dim];
        w[0] = 1.0;
        Session::new(
            Arc::new(ProbeModel::new(w, 0.0).unwrap()),
            Arc::new(PolicyConfig::default()),
        )
    }

    fn event(stream_id: u64, chunk_len: u32, x0: f32, dim: usize) -> Frame {
        let mut hidden = vec![0.0; dim];
        hidden[0] = x0;
        Frame::ChunkEvent {
            stream_id,
            chunk_len,
            hidden,
        }
    }

    #[test]
    fn low_score_continues() {
        let mut s = session(8);
        assert_eq!(s.handle(Frame::Hello { hidden_dim: 8 }).frames, vec![Frame::Hello { hidden_dim: 8 }]);
        let r = s.handle(event(1, 20, -2.0, 8));
        match &r.frames[..] {
            [Frame::Decision { stream_id: 1, chop: false, regen_budget: 0, probability }] => {
                assert!(*probability < 0.5)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_high_long_events_chop() {
        let mut s = session(4);
        s.handle(Frame::Hello { hidden_dim: 4 });
        s.handle(event(9, 20, 3.0, 4));
        let r = s.handle(event(9, 30, 3.0, 4));
        assert!(matches!(
            r.frames[..],
            [Frame::Decision { chop: true, regen_budget: 4096, .. }]
        ));
        let again = s.handle(event(9, 30, 3.0, 4));
        assert!(matches!(&again.frames[..], [Frame::Error { code, .. }] if code == codes::STREAM_CHOPPED));
        assert!(!again.close);
        s.handle(Frame::Reset { stream_id: 9 });
        assert_eq!(s.active_streams(), 0);
        let fresh = s.handle(event(9, 30, 3.0, 4));
        assert!(matches!(fresh.frames[..], [Frame::Decision { chop: false, .. }]));
    }

    #[test]
    fn dim_mismatch_keeps_connection() {
        let mut s = session(16);
        let r = s.handle(Frame::Hello { hidden_dim: 8 });
        assert!(matches!(&r.frames[..], [Frame::Error { code, .. }] if code == "dim_mismatch"));
        assert!(!r.close);
        s.handle(Frame::Hello { hidden_dim: 16 });
        let r = s.handle(event(1, 3, 1.0, 8));
        assert!(matches!(&r.frames[..], [Frame::Error { code, .. }] if code == "dim_mismatch"));
        assert!(!r.close);
    }

    #[test]
    fn protocol_violations_close() {
        let mut s = session(2);
        assert!(s.handle(event(1, 3, 1.0, 2)).close);
        let mut s = session(2);
        s.handle(Frame::Hello { hidden_dim: 2 });
        assert!(s.handle(Frame::error("x", "y")).close);
    }

    #[test]
    fn streams_are_isolated() {
        let mut s = session(2);
        s.handle(Frame::Hello { hidden_dim: 2 });
        s.handle(event(1, 20, 3.0, 2));
        s.handle(event(2, 20, -3.0, 2));
        let r = s.handle(event(1, 20, 3.0, 2));
        assert!(matches!(r.frames[..], [Frame::Decision { stream_id: 1, chop: true, .. }]));
    }
}
