use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataio::ActivationMatrix;
use crate::embed::{EmbedRequest, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthStatus {
    pub status: String,
    pub dim: usize,
    #[serde(default)]
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    pub timeout: Duration,
    /// Extra attempts after the first failure of a request.
    pub retries: usize,
    pub retry_backoff: Duration,
    pub max_batch: usize,
    pub max_in_flight: usize,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(30),
            retries: 2,
            retry_backoff: Duration::from_millis(100),
            max_batch: 32,
            max_in_flight: 4,
        }
    }
}

/// Client for the embedding sidecar (`POST /embed`, `GET /health`).
///
/// The first successful response fixes the session dimension; any later
/// response with a different width is rejected.
pub struct HttpEmbedder {
    cfg: HttpConfig,
    agent: ureq::Agent,
    session_dim: Mutex<Option<usize>>,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    texts: &'a [Vec<String>],
    masked: Vec<[usize; 2]>,
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl HttpEmbedder {
    pub fn new(cfg: HttpConfig) -> Result<Self> {
        if cfg.max_batch == 0 || cfg.max_in_flight == 0 {
            return Err(Error::invalid("max_batch and max_in_flight must be positive"));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .build()
            .into();
        Ok(Self { cfg, agent, session_dim: Mutex::new(None) })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    pub fn session_dim(&self) -> Option<usize> {
        *self.session_dim.lock().unwrap()
    }

    pub fn health(&self) -> Result<HealthStatus> {
        let url = format!("{}/health", self.cfg.endpoint);
        let status: HealthStatus = self.with_retries(|| {
            let mut resp = self.agent.get(&url).call().map_err(classify)?;
            resp.body_mut()
                .read_json::<HealthStatus>()
                .map_err(|e| Attempt::Fatal(Error::Provider(format!("bad /health body: {e}"))))
        })?;
        if status.status != "ok" {
            return Err(Error::Provider(format!("sidecar reports status {:?}", status.status)));
        }
        self.check_dim(status.dim)?;
        Ok(status)
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        let mut session = self.session_dim.lock().unwrap();
        match *session {
            Some(d) if d != dim => Err(Error::Provider(format!(
                "dimension {dim} differs from session dimension {d}"
            ))),
            _ => {
                *session = Some(dim);
                Ok(())
            }
        }
    }

    fn with_retries<T>(&self, mut op: impl FnMut() -> std::result::Result<T, Attempt>) -> Result<T> {
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(self.cfg.retry_backoff * attempt as u32);
            }
            match op() {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(Error::Provider(format!(
            "{} failed after {} attempts: {last}",
            self.cfg.endpoint,
            self.cfg.retries + 1
        )))
    }

    fn embed_chunk(&self, texts: &[Vec<String>], masked: Vec<[usize; 2]>) -> Result<Vec<Vec<f64>>> {
        let url = format!("{}/embed", self.cfg.endpoint);
        let body = WireRequest { texts, masked };
        let resp: EmbedResponse = self.with_retries(|| {
            let mut resp = self.agent.post(&url).send_json(&body).map_err(classify)?;
            resp.body_mut()
                .read_json::<EmbedResponse>()
                .map_err(|e| Attempt::Fatal(Error::Provider(format!("bad /embed body: {e}"))))
        })?;
        if resp.embeddings.len() != texts.len() {
            return Err(Error::Provider(format!(
                "sent {} texts, received {} embeddings",
                texts.len(),
                resp.embeddings.len()
            )));
        }
        if let Some(row) = resp.embeddings.iter().find(|r| r.len() != resp.dim) {
            return Err(Error::Provider(format!("row of width {} in a dim={} response", row.len(), resp.dim)));
        }
        self.check_dim(resp.dim)?;
        Ok(resp.embeddings)
    }
}

fn classify(err: ureq::Error) -> Attempt {
    match err {
        ureq::Error::StatusCode(code) if code >= 500 => Attempt::Retry(format!("status {code}")),
        ureq::Error::StatusCode(code) => Attempt::Fatal(Error::Provider(format!("sidecar answered status {code}"))),
        other => Attempt::Retry(other.to_string()),
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed(&self, req: &EmbedRequest) -> Result<ActivationMatrix> {
        req.validate()?;
        let n = req.texts.len();
        let chunk = self.cfg.max_batch;
        let starts: Vec<usize> = (0..n).step_by(chunk).collect();

        // Results are slotted by chunk index, never by completion order.
        let mut results: Vec<Option<Result<Vec<Vec<f64>>>>> = (0..starts.len()).map(|_| None).collect();
        for wave in (0..starts.len()).collect::<Vec<_>>().chunks(self.cfg.max_in_flight) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&c| {
                        let start = starts[c];
                        let end = (start + chunk).min(n);
                        let masked: Vec<[usize; 2]> = req
                            .masked
                            .iter()
                            .filter(|(t, _)| (start..end).contains(t))
                            .map(|&(t, j)| [t - start, j])
                            .collect();
                        let texts = &req.texts[start..end];
                        (c, scope.spawn(move || self.embed_chunk(texts, masked)))
                    })
                    .collect();
                for (c, h) in handles {
                    results[c] = Some(h.join().unwrap_or_else(|_| Err(Error::Provider("worker panicked".into()))));
                }
            });
        }

        let mut rows = Vec::with_capacity(n);
        for r in results {
            rows.extend(r.expect("every chunk ran")?);
        }
        let dim = self.session_dim().unwrap_or(0);
        let mut data = Matrix::zeros(n, dim);
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                data[(i, j)] = *v;
            }
        }
        ActivationMatrix::new(data)
    }
}
