use std::sync::Arc;

use kgscout_core::{KnowledgeGraph, Triple};
use kgscout_service::lines::serve_lines;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

fn kg() -> KnowledgeGraph {
    KnowledgeGraph::from_triples([
        Triple::parse("A", "r", "B").unwrap(),
        Triple::parse("B", "s", "C").unwrap(),
        Triple::parse("A", "t", "C").unwrap(),
        Triple::parse("C", "u", "A").unwrap(),
    ])
}

async fn start() -> std::net::SocketAddr {
    let listener = TcpListener::bind(("127.0.0.1", 0)).await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve_lines(listener, Arc::new(kg())));
    addr
}

/// Reads one reply: every line up to and including the empty terminator.
async fn reply(reader: &mut BufReader<tokio::net::tcp::OwnedReadHalf>) -> Vec<String> {
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).await.unwrap();
        assert!(n > 0, "connection closed mid-reply");
        let line = line.trim_end_matches('\n').to_string();
        if line.is_empty() {
            return lines;
        }
        lines.push(line);
    }
}

#[tokio::test]
async fn several_requests_on_one_connection() {
    let addr = start().await;
    let (read, mut write) = TcpStream::connect(addr).await.unwrap().into_split();
    let mut reader = BufReader::new(read);

    write.write_all(b"NEIGHBORS A\n").await.unwrap();
    assert_eq!(reply(&mut reader).await, vec!["A\tr\tB", "A\tt\tC"]);

    write.write_all(b"PATHS A C 2\r\n").await.unwrap();
    assert_eq!(reply(&mut reader).await, vec!["A\tt\tC", "A\tr\tB", "B\ts\tC"]);

    write.write_all(b"PATHS A A 3\n").await.unwrap();
    assert_eq!(reply(&mut reader).await, vec!["A\tt\tC", "C\tu\tA", "A\tr\tB", "B\ts\tC", "C\tu\tA"]);

    write.write_all(b"NEIGHBORS nowhere\n").await.unwrap();
    assert!(reply(&mut reader).await.is_empty());

    write.write_all(b"JUMP A\n").await.unwrap();
    let err = reply(&mut reader).await;
    assert_eq!(err.len(), 1);
    assert!(err[0].starts_with("ERR "));

    // The connection survives an error.
    write.write_all(b"NEIGHBORS B\n").await.unwrap();
    assert_eq!(reply(&mut reader).await, vec!["B\ts\tC"]);
}

#[tokio::test]
async fn overlong_line_is_refused() {
    let addr = start().await;
    let (read, mut write) = TcpStream::connect(addr).await.unwrap().into_split();
    let mut reader = BufReader::new(read);
    let long = format!("NEIGHBORS {}\n", "x".repeat(10_000));
    write.write_all(long.as_bytes()).await.unwrap();
    let err = reply(&mut reader).await;
    assert_eq!(err, vec!["ERR request line too long"]);
}

#[tokio::test]
async fn concurrent_clients() {
    let addr = start().await;
    let mut tasks = Vec::new();
    for _ in 0..8 {
        tasks.push(tokio::spawn(async move {
            let (read, mut write) = TcpStream::connect(addr).await.unwrap().into_split();
            let mut reader = BufReader::new(read);
            for _ in 0..20 {
                write.write_all(b"NEIGHBORS C\n").await.unwrap();
                assert_eq!(reply(&mut reader).await, vec!["C\tu\tA"]);
            }
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
}
