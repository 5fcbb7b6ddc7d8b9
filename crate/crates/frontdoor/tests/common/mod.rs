//! Helpers shared by the frontdoor integration tests: a background server,
//! a minimal HTTP/1.1 client over a real socket, and fixture files.
#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use lsid_core::artifacts::ArtifactStore;
use lsid_core::backends::fixture::{FixtureColor, FixtureRect, FixtureScene};
use lsid_core::backends::{BackendKind, BackendSet};
use lsid_core::geometry::FrameSize;
use lsid_frontdoor::service::{self, AppState};
use serde_json::Value;

pub struct Server {
    pub addr: SocketAddr,
    pub state: AppState,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Server {
    pub fn start(store_root: &Path) -> Self {
        let state = AppState::new(ArtifactStore::open(store_root).unwrap(), BackendKind::Mock, Arc::new(BackendSet::mock));
        Self::start_with(state)
    }

    pub fn start_with(state: AppState) -> Self {
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let serving = state.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                service::serve(listener, serving, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
        });
        Self {
            addr: addr_rx.recv().unwrap(),
            state,
            stop: Some(stop_tx),
            thread: Some(thread),
        }
    }

    pub fn request(&self, method: &str, path: &str, content_type: Option<&str>, body: &[u8]) -> Resp {
        http(self.addr, method, path, content_type, body)
    }

    pub fn get(&self, path: &str) -> Resp {
        self.request("GET", path, None, &[])
    }

    pub fn post(&self, path: &str) -> Resp {
        self.request("POST", path, None, &[])
    }

    pub fn patch_json(&self, path: &str, body: &Value) -> Resp {
        self.request("PATCH", path, Some("application/json"), body.to_string().as_bytes())
    }

    /// POST /runs; returns the new run id.
    pub fn create_run(&self, png: &[u8], phrase: &str, prompt: &str, config: Option<&Value>) -> Resp {
        let mut fields: Vec<(&str, Option<&str>, Vec<u8>)> = vec![
            ("image", Some("image.png"), png.to_vec()),
            ("phrase", None, phrase.as_bytes().to_vec()),
            ("prompt", None, prompt.as_bytes().to_vec()),
        ];
        if let Some(c) = config {
            fields.push(("config", None, c.to_string().into_bytes()));
        }
        let (ct, body) = multipart(&fields);
        self.request("POST", "/runs", Some(&ct), &body)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[derive(Debug)]
pub struct Resp {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Resp {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("status {} body not JSON ({e}): {}", self.status, String::from_utf8_lossy(&self.body)))
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

pub fn multipart(fields: &[(&str, Option<&str>, Vec<u8>)]) -> (String, Vec<u8>) {
    let boundary = "lsid-test-boundary-7d3f";
    let mut body = Vec::new();
    for (name, filename, data) in fields {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        match filename {
            Some(f) => body.extend_from_slice(
                format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{f}\"\r\nContent-Type: image/png\r\n\r\n")
                    .as_bytes(),
            ),
            None => body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes()),
        }
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

/// One request per connection.
pub fn http(addr: SocketAddr, method: &str, path: &str, content_type: Option<&str>, body: &[u8]) -> Resp {
    let mut stream = TcpStream::connect(addr).unwrap();
    let mut head = format!("{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Length: {}\r\n", body.len());
    if let Some(ct) = content_type {
        head.push_str(&format!("Content-Type: {ct}\r\n"));
    }
    head.push_str("\r\n");
    stream.write_all(head.as_bytes()).unwrap();
    stream.write_all(body).unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();

    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").expect("no header terminator");
    let head = String::from_utf8_lossy(&raw[..split]).into_owned();
    let mut lines = head.split("\r\n");
    let status: u16 = lines.next().unwrap().split(' ').nth(1).unwrap().parse().unwrap();
    let headers: Vec<(String, String)> = lines
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    let mut body = raw[split + 4..].to_vec();
    let chunked = headers
        .iter()
        .any(|(k, v)| k.eq_ignore_ascii_case("transfer-encoding") && v.contains("chunked"));
    if chunked {
        body = dechunk(&body);
    }
    Resp { status, headers, body }
}

fn dechunk(mut data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let line_end = data.windows(2).position(|w| w == b"\r\n").unwrap();
        let size = usize::from_str_radix(std::str::from_utf8(&data[..line_end]).unwrap().trim(), 16).unwrap();
        data = &data[line_end + 2..];
        if size == 0 {
            return out;
        }
        out.extend_from_slice(&data[..size]);
        data = &data[size + 2..];
    }
}

/// Three red rectangles and a green one, 96×72.
pub fn scene() -> FixtureScene {
    FixtureScene::new(FrameSize::new(96, 72).unwrap())
        .with(FixtureRect::new(FixtureColor::Red, 8, 8, 40, 36))
        .with(FixtureRect::new(FixtureColor::Red, 60, 40, 80, 64))
        .with(FixtureRect::new(FixtureColor::Red, 84, 4, 90, 10))
        .with(FixtureRect::new(FixtureColor::Green, 50, 6, 70, 24))
}

pub fn write_png(dir: &Path, name: &str, scene: &FixtureScene) -> (PathBuf, Vec<u8>) {
    let png = scene.render().to_png().unwrap();
    let path = dir.join(name);
    std::fs::write(&path, &png).unwrap();
    (path, png)
}

pub fn lsid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsid"))
        .args(args)
        .env_remove("REPLICATE_API_TOKEN")
        .output()
        .unwrap()
}

/// Run id printed by `lsid run` on its first line.
pub fn printed_run_id(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout);
    stdout
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("run "))
        .unwrap_or_else(|| panic!("unexpected output: {stdout}"))
        .to_string()
}
