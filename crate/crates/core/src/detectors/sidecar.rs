use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use thiserror::Error;

use super::protocol::{self, Request, WireRole, PROTOCOL_VERSION};
use super::{check_region, DetectError, Detection, Detector, Frame, Input, Role};
use crate::geometry::BBox;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum SidecarError {
    #[error("cannot reach sidecar {endpoint}: {source}")]
    Connect {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error("sidecar i/o: {0}")]
    Io(#[from] io::Error),
    #[error("sidecar did not answer within {0:?}")]
    Timeout(Duration),
    #[error("sidecar closed the connection")]
    Closed,
    #[error("malformed sidecar response: {0}")]
    Malformed(String),
    #[error("sidecar speaks protocol v{got}, expected v{expected}")]
    VersionMismatch { expected: u64, got: u64 },
    #[error("sidecar answered id {got}, expected {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("sidecar reported: {0}")]
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Spawn a process and talk over its stdin/stdout.
    Command(Vec<String>),
    /// Connect to `host:port`.
    Tcp(String),
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Command(argv) => write!(f, "stdio:{}", argv.join(" ")),
            Endpoint::Tcp(addr) => write!(f, "tcp://{addr}"),
        }
    }
}

impl std::str::FromStr for Endpoint {
    type Err = String;

    /// `tcp://host:port`, or a whitespace-separated command line.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        let argv: Vec<String> = s.split_whitespace().map(str::to_owned).collect();
        if argv.is_empty() {
            return Err("empty sidecar command".into());
        }
        Ok(Endpoint::Command(argv))
    }
}

#[derive(Debug, Clone)]
pub struct SidecarConfig {
    pub endpoint: Endpoint,
    pub role: Role,
    pub input_size: u32,
    pub timeout: Duration,
}

impl SidecarConfig {
    pub fn new(endpoint: Endpoint, role: Role) -> Self {
        SidecarConfig {
            endpoint,
            role,
            input_size: role.default_input_size(),
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn spawn_reader<R: io::Read + Send + 'static>(src: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(src).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl Connection {
    fn open(endpoint: &Endpoint) -> Result<Self, SidecarError> {
        let connect_err = |source| SidecarError::Connect {
            endpoint: endpoint.to_string(),
            source,
        };
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(connect_err)?;
                let read_half = stream.try_clone().map_err(connect_err)?;
                Ok(Connection {
                    writer: Box::new(stream),
                    lines: spawn_reader(read_half),
                    child: None,
                })
            }
            Endpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(connect_err)?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Connection {
                    writer: Box::new(stdin),
                    lines: spawn_reader(stdout),
                    child: Some(child),
                })
            }
        }
    }
}

/// Client for an external detector process.
///
/// Connects lazily on the first call. Requests are serialized over a single
/// connection, so concurrent callers queue. After a timeout or transport
/// failure the connection is dropped and the next call reconnects; a late
/// answer to an abandoned request can therefore never be mistaken for a new
/// one.
pub struct SidecarClient {
    name: String,
    cfg: SidecarConfig,
    conn: Mutex<Option<Connection>>,
    next_id: AtomicU64,
}

pub fn sidecar_client(cfg: SidecarConfig) -> SidecarClient {
    assert!(cfg.input_size > 0, "input size must be positive");
    SidecarClient {
        name: format!("sidecar-{}", cfg.role.name()),
        cfg,
        conn: Mutex::new(None),
        next_id: AtomicU64::new(1),
    }
}

impl SidecarClient {
    pub fn config(&self) -> &SidecarConfig {
        &self.cfg
    }

    fn wire_role(&self) -> WireRole {
        if self.cfg.role.is_pose_scale() {
            WireRole::Coarse
        } else {
            WireRole::Fine
        }
    }

    fn exchange(&self, req: &Request, frame: Frame) -> Result<Vec<Detection>, SidecarError> {
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(Connection::open(&self.cfg.endpoint)?);
        }
        let conn = guard.as_mut().expect("just opened");

        let result = (|| {
            let mut line = protocol::encode_request(req);
            line.push('\n');
            conn.writer.write_all(line.as_bytes())?;
            conn.writer.flush()?;
            match conn.lines.recv_timeout(self.cfg.timeout) {
                Ok(Ok(resp)) => protocol::decode_response(&resp, req.id, frame),
                Ok(Err(e)) => Err(SidecarError::Io(e)),
                Err(RecvTimeoutError::Timeout) => Err(SidecarError::Timeout(self.cfg.timeout)),
                Err(RecvTimeoutError::Disconnected) => Err(SidecarError::Closed),
            }
        })();

        match &result {
            // the stream is still in sync after these
            Ok(_) | Err(SidecarError::Remote(_)) | Err(SidecarError::Malformed(_)) => {}
            Err(_) => *guard = None,
        }
        result
    }
}

impl Detector for SidecarClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn role(&self) -> Role {
        self.cfg.role
    }

    fn input_size(&self) -> u32 {
        self.cfg.input_size
    }

    fn detect(&self, input: Input<'_>, region: Option<&BBox>) -> Result<Vec<Detection>, DetectError> {
        check_region(&input, region)?;
        let req = Request {
            v: PROTOCOL_VERSION,
            id: self.next_id.fetch_add(1, Ordering::Relaxed),
            role: self.wire_role(),
            image: input.reference(),
            region: region.map(BBox::to_array),
            input_size: self.cfg.input_size,
        };
        let frame = if region.is_some() { Frame::Crop } else { Frame::Global };
        let dets = self.exchange(&req, frame)?;
        let expected = self.cfg.role.label();
        if let Some(d) = dets.iter().find(|d| d.label != expected) {
            return Err(SidecarError::Malformed(format!(
                "{:?} detection from a {} detector",
                d.label,
                self.cfg.role.name()
            ))
            .into());
        }
        Ok(dets)
    }
}
