//! Models hosted in a child process, spoken to over stdin/stdout.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use super::wire::{Handshake, RequestRef, Response, PROTOCOL_VERSION};
use super::{GatewayError, LogitVector, ModalityKind, Model, Pair};

#[derive(Clone, Debug, PartialEq)]
pub struct SessionOptions {
    pub handshake_timeout: Duration,
    pub request_timeout: Duration,
    /// Larger batches are split into several requests.
    pub max_pairs_per_request: usize,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            handshake_timeout: Duration::from_secs(30),
            request_timeout: Duration::from_secs(300),
            max_pairs_per_request: 1024,
        }
    }
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    dead: bool,
}

/// A model process speaking the [`wire`](super::wire) protocol.
///
/// One request is in flight at a time; concurrent callers are serialized.
/// Any crash, timeout or protocol violation marks the session dead and every
/// later call fails with [`GatewayError::SessionDead`].
pub struct ExternalModel {
    classes: usize,
    kinds: [ModalityKind; 2],
    options: SessionOptions,
    session: Mutex<Session>,
}

impl ExternalModel {
    /// Runs `command` through `sh -c` and waits for its handshake line.
    pub fn spawn(command: &str, options: SessionOptions) -> Result<Self, GatewayError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(GatewayError::Spawn)?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");

        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });

        let mut session = Session {
            child,
            stdin,
            lines: rx,
            next_id: 0,
            dead: false,
        };
        let handshake = match session.lines.recv_timeout(options.handshake_timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => {
                session.kill();
                return Err(GatewayError::Io(e));
            }
            Err(RecvTimeoutError::Timeout) => {
                session.kill();
                return Err(GatewayError::HandshakeTimeout(options.handshake_timeout));
            }
            Err(RecvTimeoutError::Disconnected) => {
                session.kill();
                return Err(GatewayError::Handshake(
                    "process exited before sending a handshake".into(),
                ));
            }
        };
        let (classes, kinds) = match parse_handshake(&handshake) {
            Ok(v) => v,
            Err(e) => {
                session.kill();
                return Err(e);
            }
        };
        log::debug!("external model: {classes} classes, modalities {kinds:?}");
        Ok(Self {
            classes,
            kinds,
            options,
            session: Mutex::new(session),
        })
    }

    pub fn modality_kinds(&self) -> [ModalityKind; 2] {
        self.kinds
    }

    pub fn is_dead(&self) -> bool {
        self.session.lock().map(|s| s.dead).unwrap_or(true)
    }

    fn round_trip(&self, session: &mut Session, pairs: &[Pair<'_>]) -> Result<Vec<LogitVector>, GatewayError> {
        let id = session.next_id;
        session.next_id += 1;
        let request = RequestRef {
            id,
            pairs: pairs.to_vec(),
        };
        let mut line = serde_json::to_string(&request).map_err(std::io::Error::from)?;
        line.push('\n');
        if session
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| session.stdin.flush())
            .is_err()
        {
            return Err(GatewayError::Crashed { batch: id });
        }
        let reply = match session.lines.recv_timeout(self.options.request_timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) => {
                return Err(GatewayError::Crashed { batch: id })
            }
            Err(RecvTimeoutError::Timeout) => {
                return Err(GatewayError::Timeout {
                    batch: id,
                    timeout: self.options.request_timeout,
                })
            }
        };
        let response: Response = serde_json::from_str(&reply).map_err(|e| GatewayError::Protocol {
            batch: id,
            message: format!("unparseable response: {e}"),
        })?;
        if response.id != id {
            return Err(GatewayError::Protocol {
                batch: id,
                message: format!("expected response id {id}, got {}", response.id),
            });
        }
        if response.logits.len() != pairs.len() {
            return Err(GatewayError::SchemaMismatch {
                batch: id,
                message: format!("{} pairs sent, {} logit vectors returned", pairs.len(), response.logits.len()),
            });
        }
        response
            .logits
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                if v.len() != self.classes {
                    Err(GatewayError::SchemaMismatch {
                        batch: id,
                        message: format!("pair {i}: expected {} logits, got {}", self.classes, v.len()),
                    })
                } else if v.iter().any(|x| !x.is_finite()) {
                    Err(GatewayError::SchemaMismatch {
                        batch: id,
                        message: format!("pair {i}: non-finite logit"),
                    })
                } else {
                    Ok(LogitVector(v))
                }
            })
            .collect()
    }
}

fn parse_handshake(line: &str) -> Result<(usize, [ModalityKind; 2]), GatewayError> {
    let h: Handshake = serde_json::from_str(line)
        .map_err(|e| GatewayError::Handshake(format!("unparseable handshake {:?}: {e}", line.trim())))?;
    if h.protocol != PROTOCOL_VERSION {
        return Err(GatewayError::Handshake(format!(
            "unsupported protocol version {} (expected {PROTOCOL_VERSION})",
            h.protocol
        )));
    }
    if h.classes == 0 {
        return Err(GatewayError::Handshake("model declares zero classes".into()));
    }
    match h.modalities.as_slice() {
        [a, b] => Ok((h.classes, [a.kind, b.kind])),
        other => Err(GatewayError::Handshake(format!(
            "expected exactly two modalities, got {}",
            other.len()
        ))),
    }
}

impl Session {
    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for ExternalModel {
    fn drop(&mut self) {
        if let Ok(s) = self.session.get_mut() {
            s.kill();
        }
    }
}

impl Model for ExternalModel {
    fn classes(&self) -> usize {
        self.classes
    }

    fn evaluate_batch(&self, pairs: &[Pair<'_>]) -> Result<Vec<LogitVector>, GatewayError> {
        for (index, (a, b)) in pairs.iter().enumerate() {
            if a.kind() != self.kinds[0] || b.kind() != self.kinds[1] {
                return Err(GatewayError::Shape {
                    index,
                    message: format!(
                        "model expects ({}, {}), got ({}, {})",
                        self.kinds[0],
                        self.kinds[1],
                        a.kind(),
                        b.kind()
                    ),
                });
            }
        }
        let mut session = self.session.lock().map_err(|_| GatewayError::SessionDead)?;
        if session.dead {
            return Err(GatewayError::SessionDead);
        }
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(self.options.max_pairs_per_request.max(1)) {
            match self.round_trip(&mut session, chunk) {
                Ok(v) => out.extend(v),
                Err(e) => {
                    session.dead = true;
                    session.kill();
                    return Err(e);
                }
            }
        }
        Ok(out)
    }
}
