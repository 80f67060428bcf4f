//! Line-oriented query protocol.
//!
//! Each request is one line: `NEIGHBORS <id>` or `PATHS <id1> <id2> <max_len>`.
//! The reply is one tab-separated triple per line followed by an empty
//! line. Path replies list each path's triples in order, paths in the
//! store's order. A malformed request gets a single `ERR <message>` line
//! before the empty line. The connection stays open for further requests.

use std::sync::Arc;

use kgscout_core::KnowledgeGraph;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

use crate::api::MAX_PATH_LEN;

/// Longest request line accepted, in bytes.
const MAX_LINE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Neighbors(String),
    Paths { from: String, to: String, max_len: usize },
}

pub fn parse_request(line: &str) -> Result<Request, String> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["NEIGHBORS", id] => Ok(Request::Neighbors(id.to_string())),
        ["PATHS", from, to, n] => {
            let max_len: usize = n.parse().map_err(|_| format!("bad max_len {n:?}"))?;
            if max_len == 0 || max_len > MAX_PATH_LEN {
                return Err(format!("max_len must be in 1..={MAX_PATH_LEN}"));
            }
            Ok(Request::Paths {
                from: from.to_string(),
                to: to.to_string(),
                max_len,
            })
        }
        ["NEIGHBORS", ..] => Err("usage: NEIGHBORS <id>".into()),
        ["PATHS", ..] => Err("usage: PATHS <id1> <id2> <max_len>".into()),
        [] => Err("empty request".into()),
        [verb, ..] => Err(format!("unknown command {verb:?}")),
    }
}

/// Full reply text for one request line, including the terminating empty line.
pub fn respond(kg: &KnowledgeGraph, line: &str) -> String {
    let mut out = String::new();
    match parse_request(line) {
        Ok(Request::Neighbors(id)) => {
            for t in kg.neighbors(&id) {
                out.push_str(&format!("{t}\n"));
            }
        }
        Ok(Request::Paths { from, to, max_len }) => {
            for t in kg.find_paths(&from, &to, max_len).iter().flatten() {
                out.push_str(&format!("{t}\n"));
            }
        }
        Err(e) => out.push_str(&format!("ERR {e}\n")),
    }
    out.push('\n');
    out
}

async fn handle(kg: Arc<KnowledgeGraph>, stream: TcpStream) -> std::io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut reader = BufReader::new(read);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = (&mut reader).take(MAX_LINE as u64 + 1).read_until(b'\n', &mut buf).await?;
        if n == 0 {
            return Ok(());
        }
        let reply = if buf.len() > MAX_LINE && !buf.ends_with(b"\n") {
            write.write_all(b"ERR request line too long\n\n").await?;
            return Ok(());
        } else {
            match std::str::from_utf8(&buf) {
                Ok(line) => {
                    let line = line.trim_end_matches(['\n', '\r']).to_string();
                    let kg = kg.clone();
                    tokio::task::spawn_blocking(move || respond(&kg, &line))
                        .await
                        .unwrap_or_else(|e| format!("ERR internal error: {e}\n\n"))
                }
                Err(_) => "ERR request is not UTF-8\n\n".to_string(),
            }
        };
        write.write_all(reply.as_bytes()).await?;
    }
}

/// Accepts connections until the listener fails.
pub async fn serve_lines(listener: TcpListener, kg: Arc<KnowledgeGraph>) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let kg = kg.clone();
        tokio::spawn(async move {
            if let Err(e) = handle(kg, stream).await {
                tracing::debug!(%peer, error = %e, "line connection closed");
            }
        });
    }
}
