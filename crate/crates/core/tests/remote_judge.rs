//! The HTTP judge client against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use refvfx::codec::PixelVideo;
use refvfx::eval::{JudgeRequest, RemoteConfig, RemoteJudge, Templates};

const GOOD: &str = r#"{"eos":{"answer":true,"rationale":"it burns"},"efs":{"answer":"True","rationale":"same fire"},"cls":{"answer":false,"rationale":"red leaked"}}"#;

#[derive(Default)]
struct Seen {
    hits: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    auth: Mutex<Vec<String>>,
    bodies: Mutex<Vec<String>>,
}

/// Serve forever; `reply(n)` gives status and body for the n-th request.
fn serve(reply: impl Fn(usize) -> (u16, String) + Send + Sync + 'static, delay: Duration) -> (String, Arc<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/judge", listener.local_addr().unwrap());
    let seen = Arc::new(Seen::default());
    let reply = Arc::new(reply);
    let s = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let (s, reply) = (s.clone(), reply.clone());
            std::thread::spawn(move || handle(stream.unwrap(), &s, &*reply, delay));
        }
    });
    (url, seen)
}

fn handle(stream: TcpStream, seen: &Seen, reply: &dyn Fn(usize) -> (u16, String), delay: Duration) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        if lower.starts_with("authorization:") {
            seen.auth.lock().unwrap().push(line[14..].trim().to_string());
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    seen.bodies.lock().unwrap().push(String::from_utf8(body).unwrap());

    let now = seen.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    seen.peak.fetch_max(now, Ordering::SeqCst);
    std::thread::sleep(delay);
    let n = seen.hits.fetch_add(1, Ordering::SeqCst);
    let (status, text) = reply(n);
    seen.in_flight.fetch_sub(1, Ordering::SeqCst);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}

fn client(url: &str) -> RemoteConfig {
    let mut c = RemoteConfig::new(url, "secret");
    c.backoff = Duration::from_millis(5);
    c
}

fn clip(v: f64) -> PixelVideo {
    PixelVideo::filled(2, 2, 2, 3, v)
}

#[test]
fn parses_answers_and_sends_bearer_key() {
    let (url, seen) = serve(|_| (200, GOOD.into()), Duration::ZERO);
    let judge = RemoteJudge::new(client(&url), Templates::default());
    let v = judge.judge(&clip(0.0), &clip(1.0)).unwrap();
    assert!(v.eos && v.efs && !v.cls);
    assert!((v.score - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(v.rationale.cls, "red leaked");
    assert_eq!(seen.auth.lock().unwrap().as_slice(), ["Bearer secret"]);
    let body: JudgeRequest = serde_json::from_str(&seen.bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(body.generated.rgb[0], vec![255; 12]);
    assert_eq!(body.reference.rgb[1], vec![128; 12]);
    assert_eq!(body.templates, Templates::default());
}

#[test]
fn transport_failures_are_retried() {
    let (url, seen) = serve(|n| if n < 2 { (503, "busy".into()) } else { (200, GOOD.into()) }, Duration::ZERO);
    let judge = RemoteJudge::new(client(&url), Templates::default());
    assert!(judge.judge(&clip(0.0), &clip(0.5)).unwrap().eos);
    assert_eq!(judge.requests(), 3);
    assert_eq!(seen.hits.load(Ordering::SeqCst), 3);

    let (url, _) = serve(|_| (500, "down".into()), Duration::ZERO);
    let judge = RemoteJudge::new(client(&url), Templates::default());
    assert!(judge.judge(&clip(0.0), &clip(0.5)).is_err());
    assert_eq!(judge.requests(), 3);
}

#[test]
fn malformed_answers_fail_without_retry() {
    for bad in ["not json", r#"{"eos":{"answer":"maybe"},"efs":{"answer":true},"cls":{"answer":true}}"#] {
        let (url, _) = serve(move |_| (200, bad.into()), Duration::ZERO);
        let judge = RemoteJudge::new(client(&url), Templates::default());
        assert!(judge.judge(&clip(0.0), &clip(0.5)).is_err(), "{bad}");
        assert_eq!(judge.requests(), 1);
    }
}

#[test]
fn repeated_clips_hit_the_cache() {
    let (url, seen) = serve(|_| (200, GOOD.into()), Duration::ZERO);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = client(&url);
    cfg.cache_dir = Some(dir.path().to_path_buf());
    let judge = RemoteJudge::new(cfg.clone(), Templates::default());
    let (a, b) = (clip(0.0), clip(0.25));
    let first = judge.judge(&a, &b).unwrap();
    assert_eq!(judge.judge(&a, &b).unwrap(), first);
    assert_eq!((judge.requests(), judge.cache_hits()), (1, 1));

    // a fresh client reads the on-disk cache
    let again = RemoteJudge::new(cfg, Templates::default());
    assert_eq!(again.judge(&a, &b).unwrap(), first);
    assert_eq!(again.requests(), 0);
    assert_eq!(seen.hits.load(Ordering::SeqCst), 1);

    // changing a template changes the key
    let mut t = Templates::default();
    t.eos.push('!');
    assert_ne!(RemoteJudge::new(client(&url), t).cache_key(&a, &b), judge.cache_key(&a, &b));
}

#[test]
fn concurrency_is_bounded_and_order_kept() {
    let (url, seen) = serve(|_| (200, GOOD.into()), Duration::from_millis(40));
    let mut cfg = client(&url);
    cfg.concurrency = 3;
    let judge = RemoteJudge::new(cfg, Templates::default());
    let clips: Vec<PixelVideo> = (0..10).map(|i| clip(i as f64 / 10.0)).collect();
    let reference = clip(-1.0);
    let items: Vec<_> = clips.iter().map(|c| (&reference, c)).collect();
    let out = judge.judge_all(&items);
    assert_eq!(out.len(), 10);
    assert!(out.iter().all(|r| r.as_ref().unwrap().eos));
    let peak = seen.peak.load(Ordering::SeqCst);
    assert!((2..=3).contains(&peak), "peak {peak}");
    assert!(judge.judge_all(&[]).is_empty());
}
