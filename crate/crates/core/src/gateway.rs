//! Uniform classifier handle over a native network or a remote service.
//!
//! The remote protocol is plain HTTP:
//!
//! * `POST {url}/v1/predict` with an XPB1 batch body, header `X-Request-Id`,
//!   replying `{"probs": [[...], ...], "model": "..."}`.
//! * `GET {url}/v1/meta` replying `{"class_names": [...], "input_shape": [3, h, w], "model": "..."}`.
//!
//! Batches larger than the request cap are split and sent concurrently.
//! Transport failures and 5xx replies are retried with the same request id;
//! 4xx replies are not retried.

use crate::imaging::{encode_xpb1_batch, ImageTensor, RangeTag};
use crate::nnet::{Batch, Network, NnetError, Shape};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};
use thiserror::Error;

pub const MODEL_URL_ENV: &str = "XPLAIN_MODEL_URL";
pub const REQUEST_ID_HEADER: &str = "X-Request-Id";
pub const DEFAULT_BATCH_CAP: usize = 64;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;
const NATIVE_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("remote model at {url} unavailable after {attempts} attempts: {last_error}")]
    RemoteUnavailable {
        url: String,
        attempts: usize,
        last_error: String,
    },
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backend does not expose gradients")]
    GradientsUnavailable,
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nnet(#[from] NnetError),
}

pub type Result<T> = std::result::Result<T, GatewayError>;

/// One probability vector per image.
type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub has_gradients: bool,
    pub has_feature_maps: bool,
}

/// Delays before each retry; the number of retries is `backoff.len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            backoff: [100, 400, 1600]
                .into_iter()
                .map(Duration::from_millis)
                .collect(),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            backoff: Vec::new(),
        }
    }

    pub fn attempts(&self) -> usize {
        self.backoff.len() + 1
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub url: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub batch_cap: usize,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into().trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            batch_cap: DEFAULT_BATCH_CAP,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }

    /// Endpoint from `XPLAIN_MODEL_URL`, if set and non-empty.
    pub fn from_env() -> Option<Self> {
        std::env::var(MODEL_URL_ENV)
            .ok()
            .filter(|v| !v.trim().is_empty())
            .map(Self::new)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteMeta {
    pub class_names: Vec<String>,
    pub input_shape: Vec<usize>,
    pub model: String,
}

#[derive(Debug, Deserialize)]
struct PredictReply {
    probs: Vec<Vec<f64>>,
    #[serde(default)]
    model: String,
}

#[derive(Debug)]
pub struct RemoteClient {
    config: RemoteConfig,
    agent: ureq::Agent,
    input_shape: Option<Shape>,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        if config.batch_cap == 0 || config.max_in_flight == 0 {
            return Err(GatewayError::Config(
                "batch cap and in-flight limit must be >= 1".into(),
            ));
        }
        if !config.url.starts_with("http://") && !config.url.starts_with("https://") {
            return Err(GatewayError::Config(format!(
                "model URL must be http(s): {:?}",
                config.url
            )));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            agent,
            input_shape: None,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn with_retries<T>(&self, request_id: &str, mut call: impl FnMut() -> Attempt<T>) -> Result<T> {
        let mut last_error = String::new();
        for attempt in 0..self.config.retry.attempts() {
            if attempt > 0 {
                std::thread::sleep(self.config.retry.backoff[attempt - 1]);
                log::warn!("retrying request {request_id} (attempt {})", attempt + 1);
            }
            match call() {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => last_error = msg,
            }
        }
        Err(GatewayError::RemoteUnavailable {
            url: self.config.url.clone(),
            attempts: self.config.retry.attempts(),
            last_error,
        })
    }

    pub fn meta(&self) -> Result<RemoteMeta> {
        let url = format!("{}/v1/meta", self.config.url);
        let id = next_request_id();
        self.with_retries(&id, || {
            let reply = self.agent.get(&url).header(REQUEST_ID_HEADER, &id).call();
            classify(reply, |body| {
                serde_json::from_str::<RemoteMeta>(&body)
                    .map_err(|e| format!("bad meta reply: {e}"))
            })
        })
    }

    /// Sends one chunk of at most `batch_cap` frames.
    fn predict_chunk(
        &self,
        body: &[u8],
        expected_rows: usize,
        request_id: &str,
    ) -> Result<(Vec<Vec<f64>>, String)> {
        let url = format!("{}/v1/predict", self.config.url);
        self.with_retries(request_id, || {
            let reply = self
                .agent
                .post(&url)
                .header(REQUEST_ID_HEADER, request_id)
                .content_type("application/octet-stream")
                .send(body);
            classify(reply, |text| {
                let parsed: PredictReply =
                    serde_json::from_str(&text).map_err(|e| format!("bad predict reply: {e}"))?;
                if parsed.probs.len() != expected_rows {
                    return Err(format!(
                        "sent {expected_rows} images, got {} rows",
                        parsed.probs.len()
                    ));
                }
                Ok((parsed.probs, parsed.model))
            })
        })
    }

    fn predict(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<&[ImageTensor]> = images.chunks(self.config.batch_cap).collect();
        let results: Vec<Mutex<Option<Result<Rows>>>> =
            chunks.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_in_flight.min(chunks.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= chunks.len() {
                        break;
                    }
                    let body = encode_xpb1_batch(chunks[i]);
                    let id = next_request_id();
                    let start = Instant::now();
                    let out =
                        self.predict_chunk(&body, chunks[i].len(), &id)
                            .map(|(rows, model)| {
                                log::debug!(
                                    "request {id}: {} rows from {model:?} in {:?}",
                                    rows.len(),
                                    start.elapsed()
                                );
                                rows
                            });
                    *results[i].lock().expect("result slot") = Some(out);
                });
            }
        });
        let mut rows = Vec::with_capacity(images.len());
        for slot in results {
            rows.extend(
                slot.into_inner()
                    .expect("result slot")
                    .expect("every chunk is processed")?,
            );
        }
        Ok(rows)
    }
}

enum Attempt<T> {
    Done(T),
    Retry(String),
    Fatal(GatewayError),
}

fn classify<T>(
    reply: std::result::Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    parse: impl FnOnce(String) -> std::result::Result<T, String>,
) -> Attempt<T> {
    let mut response = match reply {
        Ok(r) => r,
        Err(e) => return Attempt::Retry(e.to_string()),
    };
    let status = response.status().as_u16();
    let body = match response.body_mut().read_to_string() {
        Ok(b) => b,
        Err(e) => return Attempt::Retry(format!("reading reply: {e}")),
    };
    match status {
        200..=299 => match parse(body) {
            Ok(v) => Attempt::Done(v),
            Err(msg) => Attempt::Fatal(GatewayError::ProtocolError(msg)),
        },
        400..=499 => Attempt::Fatal(GatewayError::ProtocolError(format!(
            "HTTP {status}: {}",
            body.trim()
        ))),
        _ => Attempt::Retry(format!("HTTP {status}: {}", body.trim())),
    }
}

fn next_request_id() -> String {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos());
    format!(
        "{:x}-{:x}-{}",
        std::process::id(),
        nanos,
        COUNTER.fetch_add(1, Ordering::Relaxed)
    )
}

#[derive(Debug)]
pub enum Backend {
    Native(Network),
    Remote(RemoteClient),
}

/// A classifier that maps normalized images to probability rows.
#[derive(Debug)]
pub struct ModelHandle {
    backend: Backend,
    class_names: Vec<String>,
    model_id: String,
}

impl ModelHandle {
    pub fn native(network: Network, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() != network.output_shape().len() {
            return Err(GatewayError::ShapeMismatch(format!(
                "{} class names for {} outputs",
                class_names.len(),
                network.output_shape().len()
            )));
        }
        if !network.ends_with_softmax() {
            return Err(GatewayError::Config(
                "native network must end in softmax".into(),
            ));
        }
        Ok(Self {
            backend: Backend::Native(network),
            class_names,
            model_id: "native".into(),
        })
    }

    /// Connects to a remote model, reading class names and input shape from
    /// its meta endpoint.
    pub fn remote(config: RemoteConfig) -> Result<Self> {
        let mut client = RemoteClient::new(config)?;
        let meta = client.meta()?;
        if meta.class_names.len() < 2 {
            return Err(GatewayError::ProtocolError(
                "meta lists fewer than 2 classes".into(),
            ));
        }
        client.input_shape = match meta.input_shape.as_slice() {
            [c, h, w] => Some(Shape::new(*c, *h, *w)),
            [] => None,
            other => {
                return Err(GatewayError::ProtocolError(format!(
                    "bad input_shape {other:?}"
                )))
            }
        };
        Ok(Self {
            backend: Backend::Remote(client),
            class_names: meta.class_names,
            model_id: meta.model,
        })
    }

    /// Remote handle with known class names; makes no network call.
    pub fn remote_with_classes(config: RemoteConfig, class_names: Vec<String>) -> Result<Self> {
        let client = RemoteClient::new(config)?;
        Ok(Self {
            model_id: client.config.url.clone(),
            backend: Backend::Remote(client),
            class_names,
        })
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn is_remote(&self) -> bool {
        matches!(self.backend, Backend::Remote(_))
    }

    pub fn capabilities(&self) -> Capabilities {
        let native = matches!(self.backend, Backend::Native(_));
        Capabilities {
            has_gradients: native,
            has_feature_maps: native,
        }
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn network(&self) -> Option<&Network> {
        match &self.backend {
            Backend::Native(n) => Some(n),
            Backend::Remote(_) => None,
        }
    }

    /// Network for gradient-based methods.
    pub fn gradients(&self) -> Result<&Network> {
        self.network().ok_or(GatewayError::GradientsUnavailable)
    }

    /// Expected `(channels, height, width)` when known.
    pub fn input_shape(&self) -> Option<Shape> {
        match &self.backend {
            Backend::Native(n) => Some(n.input_shape()),
            Backend::Remote(c) => c.input_shape,
        }
    }

    fn check_inputs(&self, images: &[ImageTensor]) -> Result<()> {
        for img in images {
            if img.range() != RangeTag::Normalized {
                return Err(GatewayError::ShapeMismatch(format!(
                    "expected Normalized tensors, got {:?}",
                    img.range()
                )));
            }
            if let Some(shape) = self.input_shape() {
                let (c, h, w) = img.shape();
                if Shape::new(c, h, w) != shape {
                    return Err(GatewayError::ShapeMismatch(format!(
                        "expected {shape}, got ({c}, {h}, {w})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// One probability row per image, each non-negative and summing to 1.
    pub fn predict_batch(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(images)?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let rows = match &self.backend {
            Backend::Native(net) => {
                let chunks: Vec<Vec<Vec<f64>>> = images
                    .par_chunks(NATIVE_CHUNK)
                    .map(|chunk| Ok(net.predict(&Batch::from_images(chunk)?)?.to_rows()))
                    .collect::<Result<_>>()?;
                chunks.into_iter().flatten().collect()
            }
            Backend::Remote(client) => client.predict(images)?,
        };
        validate_rows(&rows, images.len(), self.num_classes())?;
        Ok(rows)
    }

    pub fn top_class(&self, image: &ImageTensor) -> Result<(usize, f64)> {
        let rows = self.predict_batch(std::slice::from_ref(image))?;
        Ok(top_class_of(&rows[0]))
    }
}

/// Argmax with the lowest index winning ties.
pub fn top_class_of(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    (best, row[best])
}

pub fn validate_rows(rows: &[Vec<f64>], expected_rows: usize, classes: usize) -> Result<()> {
    if rows.len() != expected_rows {
        return Err(GatewayError::ProtocolError(format!(
            "expected {expected_rows} rows, got {}",
            rows.len()
        )));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != classes {
            return Err(GatewayError::ProtocolError(format!(
                "row {i} has {} entries for {classes} classes",
                row.len()
            )));
        }
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(GatewayError::ProtocolError(format!(
                "row {i} has negative or non-finite entries"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(GatewayError::ProtocolError(format!(
                "row {i} sums to {sum}"
            )));
        }
    }
    Ok(())
}
