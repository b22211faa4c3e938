use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{decode_response, encode_request, Decoded, WireError};
use super::{EvalRequest, EvalResponse};

enum Inbound {
    Line(String),
    Closed(String),
}

/// Connection to a trainer with any number of requests in flight.
///
/// A reader thread forwards response lines; completions are matched to
/// requests by id. Each request carries its own deadline.
pub struct TrainerClient {
    stream: TcpStream,
    inbound: Receiver<Inbound>,
    pending: HashMap<u64, Instant>,
    closed: Option<String>,
    unmatched: Vec<EvalResponse>,
}

impl TrainerClient {
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, WireError> {
        let transport = |e: std::io::Error| WireError::Transport(format!("{endpoint}: {e}"));
        let addrs: Vec<_> = endpoint.to_socket_addrs().map_err(transport)?.collect();
        let mut last = WireError::Transport(format!("{endpoint}: no addresses"));
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout.max(Duration::from_millis(1))) {
                Ok(stream) => return Self::from_stream(stream).map_err(transport),
                Err(e) => last = transport(e),
            }
        }
        Err(last)
    }

    fn from_stream(stream: TcpStream) -> std::io::Result<Self> {
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let (tx, inbound) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                match line {
                    Ok(l) if l.trim().is_empty() => continue,
                    Ok(l) => {
                        if tx.send(Inbound::Line(l)).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Inbound::Closed(e.to_string()));
                        return;
                    }
                }
            }
            let _ = tx.send(Inbound::Closed("connection closed by trainer".into()));
        });
        Ok(TrainerClient { stream, inbound, pending: HashMap::new(), closed: None, unmatched: Vec::new() })
    }

    /// Sends a request and starts its timeout clock.
    pub fn submit(&mut self, request: &EvalRequest, timeout: Duration) -> Result<(), WireError> {
        if let Some(reason) = &self.closed {
            return Err(WireError::Transport(reason.clone()));
        }
        let mut line = encode_request(request);
        line.push('\n');
        self.stream
            .write_all(line.as_bytes())
            .and_then(|_| self.stream.flush())
            .map_err(|e| WireError::Transport(e.to_string()))?;
        self.pending.insert(request.id, Instant::now() + timeout);
        Ok(())
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    /// Responses whose id matched no pending request (late or foreign).
    pub fn take_unmatched(&mut self) -> Vec<EvalResponse> {
        std::mem::take(&mut self.unmatched)
    }

    /// Blocks until one pending request completes, fails or times out.
    /// Returns `None` when nothing is in flight.
    pub fn next_completion(&mut self) -> Option<EvalResponse> {
        loop {
            let (&soonest, &deadline) = self.pending.iter().min_by_key(|(id, d)| (**d, **id))?;
            if let Some(reason) = &self.closed {
                self.pending.remove(&soonest);
                return Some(EvalResponse::failed(soonest, format!("transport: {reason}")));
            }
            let wait = deadline.saturating_duration_since(Instant::now());
            match self.inbound.recv_timeout(wait) {
                Ok(Inbound::Line(line)) => {
                    if let Some(done) = self.accept_line(&line) {
                        return Some(done);
                    }
                }
                Ok(Inbound::Closed(reason)) => self.closed = Some(reason),
                Err(RecvTimeoutError::Disconnected) => self.closed = Some("reader stopped".into()),
                Err(RecvTimeoutError::Timeout) => {
                    self.pending.remove(&soonest);
                    return Some(EvalResponse::failed(soonest, "timeout"));
                }
            }
        }
    }

    fn accept_line(&mut self, line: &str) -> Option<EvalResponse> {
        let (id, response) = match decode_response(line) {
            Decoded::Response(r) => (r.id, r),
            Decoded::Invalid { id, detail } => (id, EvalResponse::failed(id, detail)),
            Decoded::Garbage(detail) => {
                log::warn!("unparseable trainer line: {detail}");
                return self.single_pending().map(|only| {
                    self.pending.remove(&only);
                    EvalResponse::failed(only, detail)
                });
            }
        };
        if self.pending.remove(&id).is_some() {
            return Some(response);
        }
        log::warn!("response for unknown request id {id}");
        self.unmatched.push(response);
        // With a single request outstanding the stray answer can only have
        // been meant for it.
        self.single_pending().map(|only| {
            self.pending.remove(&only);
            EvalResponse::failed(only, "id mismatch")
        })
    }

    fn single_pending(&self) -> Option<u64> {
        if self.pending.len() == 1 {
            self.pending.keys().next().copied()
        } else {
            None
        }
    }
}

impl Drop for TrainerClient {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// One request over a fresh connection. Never panics and never returns an
/// error; every failure mode becomes a `failed` response with a distinct
/// detail string.
pub fn external_evaluate(endpoint: &str, request: &EvalRequest, timeout: Duration) -> EvalResponse {
    let start = Instant::now();
    let mut client = match TrainerClient::connect(endpoint, timeout) {
        Ok(c) => c,
        Err(e) => return EvalResponse::failed(request.id, e.to_string()),
    };
    let remaining = timeout.saturating_sub(start.elapsed());
    if let Err(e) = client.submit(request, remaining) {
        return EvalResponse::failed(request.id, e.to_string());
    }
    client
        .next_completion()
        .unwrap_or_else(|| EvalResponse::failed(request.id, "transport: no response"))
}
