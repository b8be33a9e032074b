use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use xplain_core::gateway::{GatewayError, ModelHandle, RemoteConfig, RetryPolicy, MODEL_URL_ENV};
use xplain_core::imaging::{decode_xpb1_batch, encode_xpb1_batch};
use xplain_core::{ImageTensor, RangeTag};

#[derive(Debug, Clone)]
struct Recorded {
    method: String,
    path: String,
    headers: HashMap<String, String>,
    body: Vec<u8>,
}

type Handler = dyn Fn(&Recorded, usize) -> (u16, String) + Send + Sync;

struct MockServer {
    url: String,
    log: Arc<Mutex<Vec<Recorded>>>,
}

impl MockServer {
    /// Serves each connection on its own thread; `handler` receives the
    /// request and its 0-based arrival index.
    fn start(handler: impl Fn(&Recorded, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log2 = log.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (log, handler) = (log2.clone(), handler.clone());
                std::thread::spawn(move || serve(stream, &log, &*handler));
            }
        });
        Self { url, log }
    }

    fn requests(&self) -> Vec<Recorded> {
        self.log.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, log: &Mutex<Vec<Recorded>>, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut headers = HashMap::new();
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let len: usize = headers
        .get("content-length")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    let req = Recorded {
        method,
        path,
        headers,
        body,
    };
    let index = {
        let mut log = log.lock().unwrap();
        log.push(req.clone());
        log.len() - 1
    };
    let (status, reply) = handler(&req, index);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    );
    let _ = stream.flush();
}

fn fast_config(url: &str) -> RemoteConfig {
    let mut cfg = RemoteConfig::new(url);
    cfg.retry = RetryPolicy {
        backoff: vec![Duration::from_millis(5); 3],
    };
    cfg.timeout = Duration::from_secs(10);
    cfg
}

fn classes() -> Vec<String> {
    ["glioma", "meningioma", "notumor", "pituitary"]
        .map(String::from)
        .to_vec()
}

fn image(v: f32) -> ImageTensor {
    ImageTensor::filled([v, -v, 0.5], 4, 4, RangeTag::Normalized).unwrap()
}

fn fixed_row(n: usize) -> String {
    let rows: Vec<&str> = (0..n).map(|_| "[0.7,0.1,0.1,0.1]").collect();
    format!(r#"{{"probs":[{}],"model":"mock"}}"#, rows.join(","))
}

fn frames_in(req: &Recorded) -> usize {
    decode_xpb1_batch(&req.body).unwrap().len()
}

#[test]
fn golden_predict_request_and_passthrough() {
    let server = MockServer::start(|req, _| (200, fixed_row(frames_in(req))));
    let h = ModelHandle::remote_with_classes(fast_config(&server.url), classes()).unwrap();
    let images = vec![image(0.25), image(-1.5)];
    let rows = h.predict_batch(&images).unwrap();
    assert_eq!(rows, vec![vec![0.7, 0.1, 0.1, 0.1]; 2]);

    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    let req = &reqs[0];
    assert_eq!(req.method, "POST");
    assert_eq!(req.path, "/v1/predict");
    assert_eq!(req.body, encode_xpb1_batch(&images));
    assert_eq!(&req.body[..4], b"XPB1");
    assert_eq!(
        req.headers.get("content-type").map(String::as_str),
        Some("application/octet-stream")
    );
    assert!(!req.headers.get("x-request-id").unwrap().is_empty());
    assert_eq!(h.top_class(&image(0.0)).unwrap(), (0, 0.7));
}

#[test]
fn server_errors_are_retried_with_the_same_request_id() {
    let server = MockServer::start(|req, i| {
        if i < 2 {
            (503, "busy".into())
        } else {
            (200, fixed_row(frames_in(req)))
        }
    });
    let h = ModelHandle::remote_with_classes(fast_config(&server.url), classes()).unwrap();
    h.predict_batch(&[image(1.0)]).unwrap();
    let reqs = server.requests();
    assert_eq!(reqs.len(), 3);
    let ids: Vec<&String> = reqs.iter().map(|r| &r.headers["x-request-id"]).collect();
    assert!(ids.iter().all(|id| *id == ids[0]));
    assert!(reqs.iter().all(|r| r.body == reqs[0].body));
}

#[test]
fn persistent_failure_is_remote_unavailable() {
    let server = MockServer::start(|_, _| (500, "boom".into()));
    let h = ModelHandle::remote_with_classes(fast_config(&server.url), classes()).unwrap();
    match h.predict_batch(&[image(1.0)]) {
        Err(GatewayError::RemoteUnavailable { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(server.requests().len(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start(|_, _| (400, r#"{"error":"bad shape"}"#.into()));
    let h = ModelHandle::remote_with_classes(fast_config(&server.url), classes()).unwrap();
    assert!(matches!(
        h.predict_batch(&[image(1.0)]),
        Err(GatewayError::ProtocolError(_))
    ));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn malformed_replies_are_protocol_errors() {
    let wrong_count = MockServer::start(|_, _| (200, fixed_row(3)));
    let h = ModelHandle::remote_with_classes(fast_config(&wrong_count.url), classes()).unwrap();
    assert!(matches!(
        h.predict_batch(&[image(1.0)]),
        Err(GatewayError::ProtocolError(_))
    ));

    let bad_sum =
        MockServer::start(|_, _| (200, r#"{"probs":[[0.7,0.2,0.1,0.1]],"model":"m"}"#.into()));
    let h = ModelHandle::remote_with_classes(fast_config(&bad_sum.url), classes()).unwrap();
    assert!(matches!(
        h.predict_batch(&[image(1.0)]),
        Err(GatewayError::ProtocolError(_))
    ));

    let garbage = MockServer::start(|_, _| (200, "not json".into()));
    let h = ModelHandle::remote_with_classes(fast_config(&garbage.url), classes()).unwrap();
    assert!(matches!(
        h.predict_batch(&[image(1.0)]),
        Err(GatewayError::ProtocolError(_))
    ));
}

#[test]
fn large_batches_are_split_and_reassembled_in_order() {
    // Each row puts its mass on a class derived from the frame's first value.
    let server = MockServer::start(|req, _| {
        let frames = decode_xpb1_batch(&req.body).unwrap();
        let rows: Vec<String> = frames
            .iter()
            .map(|f| {
                let k = (f.data()[0] as usize) % 4;
                let mut row = [0.0; 4];
                row[k] = 1.0;
                format!("[{},{},{},{}]", row[0], row[1], row[2], row[3])
            })
            .collect();
        (
            200,
            format!(r#"{{"probs":[{}],"model":"m"}}"#, rows.join(",")),
        )
    });
    let h = ModelHandle::remote_with_classes(fast_config(&server.url), classes()).unwrap();
    let images: Vec<ImageTensor> = (0..130).map(|i| image(i as f32)).collect();
    let rows = h.predict_batch(&images).unwrap();
    assert_eq!(rows.len(), 130);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[i % 4], 1.0, "row {i}");
    }
    let mut sizes: Vec<usize> = server.requests().iter().map(frames_in).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![2, 64, 64]);
    let mut ids: Vec<String> = server
        .requests()
        .iter()
        .map(|r| r.headers["x-request-id"].clone())
        .collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 3);
}

#[test]
fn meta_endpoint_supplies_class_names() {
    let server = MockServer::start(|req, _| {
        assert_eq!(req.method, "GET");
        assert_eq!(req.path, "/v1/meta");
        (
            200,
            r#"{"class_names":["glioma","meningioma","notumor","pituitary"],"input_shape":[3,4,4],"model":"vgg16"}"#
                .into(),
        )
    });
    let h = ModelHandle::remote(fast_config(&server.url)).unwrap();
    assert_eq!(h.class_names(), classes().as_slice());
    assert_eq!(h.model_id(), "vgg16");
    let wrong = ImageTensor::filled([0.0; 3], 5, 5, RangeTag::Normalized).unwrap();
    assert!(matches!(
        h.predict_batch(&[wrong]),
        Err(GatewayError::ShapeMismatch(_))
    ));
}

#[test]
fn unreachable_server_is_remote_unavailable() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let h = ModelHandle::remote_with_classes(fast_config(&url), classes()).unwrap();
    assert!(matches!(
        h.predict_batch(&[image(1.0)]),
        Err(GatewayError::RemoteUnavailable { .. })
    ));
}

#[test]
fn endpoint_from_environment() {
    std::env::set_var(MODEL_URL_ENV, "http://example.invalid:9000/");
    let cfg = RemoteConfig::from_env().unwrap();
    assert_eq!(cfg.url, "http://example.invalid:9000");
    assert_eq!(cfg.batch_cap, 64);
    assert_eq!(cfg.max_in_flight, 4);
    assert_eq!(
        cfg.retry.backoff,
        [100, 400, 1600].map(Duration::from_millis)
    );
    std::env::set_var(MODEL_URL_ENV, "");
    assert!(RemoteConfig::from_env().is_none());
    std::env::remove_var(MODEL_URL_ENV);
}
