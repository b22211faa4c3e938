use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use super::wire::{decode_request, encode_response};
use super::{oracle_evaluate, EvalResponse, OracleConfig};

type Cache = Arc<Mutex<HashMap<u64, String>>>;

/// Answers one request line with one response line. Requests with an id
/// already seen get the earlier answer again.
pub fn handle_request_line(config: &OracleConfig, line: &str, cache: &Mutex<HashMap<u64, String>>) -> Option<String> {
    let request = match decode_request(line) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("{e}");
            return None;
        }
    };
    let mut cache = cache.lock().expect("cache lock");
    let answer = cache.entry(request.id).or_insert_with(|| {
        let resp = match oracle_evaluate(config, &request.blocks) {
            Ok(acc) => EvalResponse::ok(request.id, acc),
            Err(e) => EvalResponse::failed(request.id, e.to_string()),
        };
        encode_response(&resp)
    });
    Some(answer.clone())
}

/// Serves the simulated oracle over the trainer protocol until `stop` is set.
/// Each connection gets its own thread; the answer cache is shared.
pub fn serve_oracle(listener: TcpListener, config: OracleConfig, stop: Arc<AtomicBool>) -> std::io::Result<()> {
    let cache: Cache = Arc::default();
    let config = Arc::new(config);
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let (config, cache) = (Arc::clone(&config), Arc::clone(&cache));
        thread::spawn(move || {
            if let Err(e) = serve_connection(stream, &config, &cache) {
                log::debug!("connection ended: {e}");
            }
        });
    }
    Ok(())
}

fn serve_connection(stream: TcpStream, config: &OracleConfig, cache: &Cache) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(mut answer) = handle_request_line(config, &line, cache) {
            answer.push('\n');
            writer.write_all(answer.as_bytes())?;
            writer.flush()?;
        }
    }
    Ok(())
}

/// A background oracle server bound to a local port; stops on drop.
pub struct OracleServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl OracleServer {
    pub fn spawn(bind: &str, config: OracleConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = thread::spawn(move || {
            let _ = serve_oracle(listener, config, flag);
        });
        Ok(OracleServer { addr, stop, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }
}

impl Drop for OracleServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop so it sees the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
