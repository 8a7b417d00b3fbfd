//! Remote scorer against an in-process HTTP server speaking the service's
//! wire format.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

use biasaudit::analysis::{RunStatus, Stage};
use biasaudit::audit::{audit_experiment, AuditOptions};
use biasaudit::scorer::{
    score_batch, BatchOptions, CandidateProbability, MaskedQuery, RemoteConfig, RemoteScorer, Scorer, ScorerError,
    VocabStatus,
};
use biasaudit::templates::{Assets, Experiment};

struct Request {
    method: String,
    path: String,
    body: String,
}

type Handler = dyn Fn(&Request) -> (u16, String) + Send + Sync;

struct FakeService {
    url: String,
    requests: Arc<Mutex<Vec<(String, String, String)>>>,
}

fn serve(handler: Arc<Handler>) -> FakeService {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let log = requests.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let handler = handler.clone();
            let log = log.clone();
            thread::spawn(move || handle(stream, &*handler, &log));
        }
    });
    FakeService { url, requests }
}

fn handle(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<(String, String, String)>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut content_length = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; content_length];
    reader.read_exact(&mut body).unwrap();
    let req = Request {
        method,
        path,
        body: String::from_utf8(body).unwrap(),
    };
    log.lock().unwrap().push((req.method.clone(), req.path.clone(), req.body.clone()));
    let (status, body) = handler(&req);
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
}

fn scorer(url: &str, model: &str) -> RemoteScorer {
    RemoteScorer::new(
        model,
        RemoteConfig {
            endpoint: Some(url.to_string()),
            timeout_secs: 10,
            max_in_flight: 4,
        },
    )
}

fn query_param<'a>(path: &'a str, key: &str) -> Option<&'a str> {
    path.split_once('?')?
        .1
        .split('&')
        .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

#[test]
fn score_request_and_response_shapes() {
    let svc = serve(Arc::new(|req: &Request| {
        assert_eq!((req.method.as_str(), req.path.as_str()), ("POST", "/v1/score"));
        let body: Value = serde_json::from_str(&req.body).unwrap();
        assert_eq!(body["model"], "bert-base-uncased");
        assert_eq!(body["candidates"], json!(["he", "she"]));
        assert!(body["text"].as_str().unwrap().contains("[MASK]"));
        let resp = json!({
            "results": [
                {"candidate": "he", "probability": 0.61, "compatible": true, "token_id": 2002},
                {"candidate": "she", "probability": 0.22, "compatible": true, "token_id": 2016}
            ],
            "model_mask_token": "[MASK]",
            "normalized": false
        });
        (200, resp.to_string())
    }));
    let s = scorer(&svc.url, "bert-base-uncased");
    let q = MaskedQuery::new("[MASK] is a nurse.", ["he", "she"]).unwrap();
    let r = s.score(&q).unwrap();
    assert_eq!(
        r,
        vec![
            CandidateProbability::compatible("he", 0.61),
            CandidateProbability::compatible("she", 0.22)
        ]
    );
    assert_eq!(svc.requests.lock().unwrap().len(), 1);
}

#[test]
fn tokenize_reports_subword_splits() {
    let svc = serve(Arc::new(|req: &Request| {
        assert_eq!(req.method, "GET");
        assert!(req.path.starts_with("/v1/tokenize?"));
        assert_eq!(query_param(&req.path, "model"), Some("bert-base-uncased"));
        let pieces = match query_param(&req.path, "word") {
            Some("engineer") => json!(["engine", "##er"]),
            Some(w) => json!([w]),
            None => return (400, "{}".into()),
        };
        (200, json!({ "pieces": pieces }).to_string())
    }));
    let s = scorer(&svc.url, "bert-base-uncased");
    assert_eq!(
        s.vocab_check("engineer").unwrap(),
        VocabStatus::MultiToken(vec!["engine".into(), "##er".into()])
    );
    assert!(s.vocab_check("nurse").unwrap().is_single());
}

#[test]
fn unavailable_backend_is_retried_and_bad_request_is_not() {
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let svc = serve(Arc::new(move |req: &Request| {
        let body: Value = serde_json::from_str(&req.body).unwrap();
        if body["text"].as_str().unwrap().contains("bad") {
            return (400, json!({"error": "text must contain exactly one mask"}).to_string());
        }
        // First attempt at every query fails as if the model were loading.
        if counter.fetch_add(1, Ordering::SeqCst) % 2 == 0 {
            return (503, json!({"error": "loading"}).to_string());
        }
        let results: Vec<Value> = body["candidates"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| json!({"candidate": c, "probability": 0.5, "compatible": true}))
            .collect();
        (200, json!({ "results": results, "normalized": false }).to_string())
    }));
    let s = scorer(&svc.url, "m");
    let good = MaskedQuery::new("[MASK] is a judge.", ["he", "she"]).unwrap();
    let out = score_batch(
        &s,
        std::slice::from_ref(&good),
        BatchOptions {
            concurrency: 1,
            retries: 2,
        },
    );
    assert!(out[0].is_ok());
    assert_eq!(calls.load(Ordering::SeqCst), 2);

    let bad = MaskedQuery::new("[MASK] is bad.", ["he", "she"]).unwrap();
    let out = score_batch(
        &s,
        &[bad],
        BatchOptions {
            concurrency: 1,
            retries: 2,
        },
    );
    let failure = out[0].as_ref().unwrap_err();
    assert_eq!(failure.attempts, 1);
    assert!(matches!(failure.error, ScorerError::InvalidQuery(_)));
}

#[test]
fn protocol_violations_are_reported() {
    let svc = serve(Arc::new(|_req: &Request| (200, json!({"results": []}).to_string())));
    let q = MaskedQuery::new("[MASK] is a chef.", ["he", "she"]).unwrap();
    assert!(matches!(scorer(&svc.url, "m").score(&q), Err(ScorerError::Protocol(_))));
    let svc = serve(Arc::new(|_req: &Request| (500, "boom".into())));
    assert!(matches!(
        scorer(&svc.url, "m").score(&q),
        Err(ScorerError::Backend { status: 500, .. })
    ));
}

#[test]
fn multi_token_names_make_names_experiment_not_applicable() {
    // A BPE-style tokenizer splits some names, as with roberta-base.
    let svc = serve(Arc::new(|req: &Request| {
        if req.path.starts_with("/v1/tokenize") {
            let word = query_param(&req.path, "word").unwrap_or_default();
            let pieces = if word.len() > 6 {
                json!([&word[..4], &word[4..]])
            } else {
                json!([word])
            };
            return (200, json!({ "pieces": pieces }).to_string());
        }
        (500, "scoring should not be reached".into())
    }));
    let s = scorer(&svc.url, "roberta-base");
    let opts = AuditOptions {
        batch: BatchOptions::default(),
        stage: Stage::Before,
        seed: None,
        reversed: false,
    };
    let run = audit_experiment(&s, &Assets::shipped(), Experiment::MaleFemaleNames, &opts).unwrap();
    assert_eq!(run.status, RunStatus::NotApplicable);
    assert!(run.note.unwrap().contains("Jennifer"));
    let json = serde_json::to_string(&run.status).unwrap();
    assert_eq!(json, "\"N/A\"");
}
