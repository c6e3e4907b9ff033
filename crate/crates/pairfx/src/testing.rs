//! Scripted HTTP mock server for client tests and the acceptance suite.
//! Serves each connection on its own thread and tracks hit counts plus the
//! peak number of concurrent requests.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

/// Maps (hit index, request body) to (status code, response body).
pub type MockScript = Arc<dyn Fn(usize, &str) -> (u16, String) + Send + Sync>;

pub struct MockServer {
    addr: SocketAddr,
    hits: Arc<AtomicUsize>,
    max_concurrent: Arc<AtomicUsize>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(script: MockScript) -> Self {
        Self::start_with_delay(script, Duration::ZERO)
    }

    /// `delay` holds each response open, making concurrency observable.
    pub fn start_with_delay(script: MockScript, delay: Duration) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        listener.set_nonblocking(true).expect("nonblocking listener");
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let max_concurrent = Arc::new(AtomicUsize::new(0));
        let concurrent = Arc::new(AtomicUsize::new(0));
        let shutdown = Arc::new(AtomicBool::new(false));

        let handle = {
            let hits = hits.clone();
            let max_concurrent = max_concurrent.clone();
            let shutdown = shutdown.clone();
            std::thread::spawn(move || {
                let mut workers = Vec::new();
                while !shutdown.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let hit = hits.fetch_add(1, Ordering::SeqCst);
                            let script = script.clone();
                            let concurrent = concurrent.clone();
                            let max_concurrent = max_concurrent.clone();
                            workers.push(std::thread::spawn(move || {
                                let now = concurrent.fetch_add(1, Ordering::SeqCst) + 1;
                                max_concurrent.fetch_max(now, Ordering::SeqCst);
                                handle_connection(stream, hit, &script, delay);
                                concurrent.fetch_sub(1, Ordering::SeqCst);
                            }));
                        }
                        Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(1));
                        }
                        Err(_) => break,
                    }
                }
                for w in workers {
                    let _ = w.join();
                }
            })
        };

        MockServer {
            addr,
            hits,
            max_concurrent,
            shutdown,
            handle: Some(handle),
        }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Total requests received so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// Peak number of simultaneously open requests.
    pub fn max_concurrent(&self) -> usize {
        self.max_concurrent.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(mut stream: TcpStream, hit: usize, script: &MockScript, delay: Duration) {
    stream
        .set_read_timeout(Some(Duration::from_secs(5)))
        .ok();
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    // Read headers, then the body per Content-Length.
    let body_start;
    loop {
        match stream.read(&mut chunk) {
            Ok(0) => return,
            Ok(n) => {
                buf.extend_from_slice(&chunk[..n]);
                if let Some(pos) = find_header_end(&buf) {
                    body_start = pos;
                    break;
                }
            }
            Err(_) => return,
        }
    }
    let headers = String::from_utf8_lossy(&buf[..body_start]).to_string();
    let content_length = headers
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            if name.eq_ignore_ascii_case("content-length") {
                value.trim().parse::<usize>().ok()
            } else {
                None
            }
        })
        .unwrap_or(0);
    while buf.len() < body_start + content_length {
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(_) => return,
        }
    }
    let body = String::from_utf8_lossy(&buf[body_start..]).to_string();

    if !delay.is_zero() {
        std::thread::sleep(delay);
    }
    let (status, response_body) = script(hit, &body);
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        _ => "Unknown",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{response_body}",
        response_body.len()
    );
    let _ = stream.write_all(response.as_bytes());
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
}
