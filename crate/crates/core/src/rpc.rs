//! Newline-delimited JSON request/response protocol, shared by the core
//! service, site commanders and remote drivers.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

pub const BAD_REQUEST: i64 = 400;
pub const NOT_FOUND: i64 = 404;
pub const CONFLICT: i64 = 409;
pub const UNREALIZABLE: i64 = 422;
pub const REJECTED: i64 = 424;
pub const INTERNAL: i64 = 500;
pub const TRANSPORT: i64 = 502;
pub const UNAVAILABLE: i64 = 503;

/// Fields are in key order so the serialized form is canonical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct RpcError {
    pub code: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Json>,
    pub message: String,
}

impl RpcError {
    pub fn new(code: i64, message: impl Into<String>) -> Self {
        RpcError {
            code,
            data: None,
            message: message.into(),
        }
    }

    pub fn with_data(mut self, data: Json) -> Self {
        self.data = Some(data);
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(BAD_REQUEST, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(NOT_FOUND, message)
    }

    pub fn transport(message: impl Into<String>) -> Self {
        Self::new(TRANSPORT, message)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub method: String,
    #[serde(default)]
    pub params: Json,
}

/// Anything that answers requests by method name.
pub trait Handler: Send + Sync {
    fn handle(&self, method: &str, params: Json) -> Result<Json, RpcError>;
}

/// Deserializes method params, mapping failures to a bad request.
pub fn params<T: serde::de::DeserializeOwned>(p: Json) -> Result<T, RpcError> {
    let p = if p.is_null() { json!({}) } else { p };
    serde_json::from_value(p).map_err(|e| RpcError::bad_request(format!("bad params: {e}")))
}

pub fn to_result<T: Serialize>(v: &T) -> Result<Json, RpcError> {
    serde_json::to_value(v).map_err(|e| RpcError::new(INTERNAL, e.to_string()))
}

fn response(id: Json, outcome: Result<Json, RpcError>) -> String {
    let body = match outcome {
        Ok(result) => json!({ "id": id, "result": result }),
        Err(error) => json!({ "id": id, "error": error }),
    };
    body.to_string()
}

/// Answers one request line with one response line (no trailing newline).
/// Malformed input gets an error response rather than a dropped connection.
pub fn handle_line(handler: &dyn Handler, line: &str) -> String {
    let raw: Json = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return response(Json::Null, Err(RpcError::bad_request(format!("malformed json: {e}")))),
    };
    let id = raw.get("id").cloned().unwrap_or(Json::Null);
    match serde_json::from_value::<Request>(raw) {
        Ok(req) => {
            log::debug!("rpc {} #{}", req.method, req.id);
            response(id, handler.handle(&req.method, req.params))
        }
        Err(e) => response(id, Err(RpcError::bad_request(format!("malformed request: {e}")))),
    }
}

fn serve_connection(handler: Arc<dyn Handler>, stream: TcpStream) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut out = handle_line(handler.as_ref(), &line);
        out.push('\n');
        writer.write_all(out.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// A running listener. Dropping the handle leaves it running; call [`Server::shutdown`].
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds `addr` and serves each connection on its own thread.
    pub fn bind(addr: impl ToSocketAddrs, handler: Arc<dyn Handler>) -> io::Result<Server> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = thread::Builder::new().name(format!("rpc-{addr}")).spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let h = handler.clone();
                        thread::spawn(move || {
                            if let Err(e) = serve_connection(h, stream) {
                                log::debug!("connection closed: {e}");
                            }
                        });
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        })?;
        Ok(Server {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// A persistent client connection.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next: u64,
}

impl Client {
    pub fn connect(addr: &str) -> Result<Client, RpcError> {
        let stream = TcpStream::connect(addr).map_err(|e| RpcError::transport(format!("connect {addr}: {e}")))?;
        let writer = stream.try_clone().map_err(|e| RpcError::transport(e.to_string()))?;
        Ok(Client {
            reader: BufReader::new(stream),
            writer,
            next: 1,
        })
    }

    pub fn set_timeout(&self, t: Option<Duration>) {
        let _ = self.writer.set_read_timeout(t);
    }

    /// Sends a raw line and returns the raw response line.
    pub fn raw(&mut self, line: &str) -> Result<String, RpcError> {
        let io = |e: io::Error| RpcError::transport(e.to_string());
        self.writer.write_all(line.as_bytes()).map_err(io)?;
        self.writer.write_all(b"\n").map_err(io)?;
        self.writer.flush().map_err(io)?;
        let mut out = String::new();
        if self.reader.read_line(&mut out).map_err(io)? == 0 {
            return Err(RpcError::transport("connection closed"));
        }
        Ok(out.trim_end().to_string())
    }

    pub fn call(&mut self, method: &str, params: Json) -> Result<Json, RpcError> {
        let id = self.next;
        self.next += 1;
        let line = json!({ "id": id, "method": method, "params": params }).to_string();
        let reply: Json = serde_json::from_str(&self.raw(&line)?)
            .map_err(|e| RpcError::transport(format!("bad response: {e}")))?;
        if reply.get("id") != Some(&json!(id)) {
            return Err(RpcError::transport("response id mismatch"));
        }
        if let Some(err) = reply.get("error") {
            return Err(serde_json::from_value(err.clone())
                .unwrap_or_else(|_| RpcError::transport("unparseable error")));
        }
        Ok(reply.get("result").cloned().unwrap_or(Json::Null))
    }

    pub fn close(self) {
        let _ = self.writer.shutdown(Shutdown::Both);
    }
}

/// Reaches endpoints by name: in-process handlers registered here first,
/// otherwise a TCP connection per call.
#[derive(Default)]
pub struct Transport {
    local: RwLock<HashMap<String, Arc<dyn Handler>>>,
}

impl Transport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, endpoint: &str, handler: Arc<dyn Handler>) {
        self.local.write().insert(endpoint.to_string(), handler);
    }

    pub fn unregister(&self, endpoint: &str) {
        self.local.write().remove(endpoint);
    }

    pub fn call(&self, endpoint: &str, method: &str, params: Json) -> Result<Json, RpcError> {
        let local = self.local.read().get(endpoint).cloned();
        match local {
            Some(h) => h.handle(method, params),
            None if endpoint.starts_with("local:") => {
                Err(RpcError::transport(format!("no local endpoint {endpoint}")))
            }
            None => {
                let mut c = Client::connect(endpoint)?;
                c.set_timeout(Some(Duration::from_secs(30)));
                let out = c.call(method, params);
                c.close();
                out
            }
        }
    }
}
