//! Remote victims over JSON/HTTP.
//!
//! Request (POST, `Content-Type: application/json`, compact JSON, fields in
//! this order):
//!
//! ```text
//! {"task":"classify"|"detect","c":C,"h":H,"w":W,"data_b64":"<base64 of C·H·W bytes>"}
//! ```
//!
//! Bytes are `round(v · 255)` in `(channel, row, col)` order, standard base64
//! with padding. Responses:
//!
//! ```text
//! {"probs":[f64, ...]}
//! {"detections":[{"box":[x1,y1,x2,y2],"class_id":k,"confidence":p}, ...]}
//! ```
//!
//! Timeouts, connection failures and 5xx statuses are retryable transport
//! errors; anything else that does not parse into a valid output is a
//! protocol error.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::image::{Dims, Image};

use super::{Classifier, ClassifierOutput, Detection, Detector, DetectorOutput, VictimError};

/// Environment variable holding the request timeout in milliseconds.
pub const TIMEOUT_ENV: &str = "RFPAR_REMOTE_TIMEOUT_MS";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Detect,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct QueryRequest {
    pub task: Task,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data_b64: String,
}

impl QueryRequest {
    pub fn new(task: Task, x: &Image) -> Self {
        let d = x.dims();
        Self {
            task,
            c: d.channels,
            h: d.height,
            w: d.width,
            data_b64: base64::engine::general_purpose::STANDARD.encode(x.to_bytes()),
        }
    }

    /// Exact request body bytes.
    pub fn to_body(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request serializes")
    }

    /// Decodes the image carried by a request (server side).
    pub fn image(&self) -> Result<Image, VictimError> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data_b64)
            .map_err(|e| VictimError::Protocol(format!("bad base64: {e}")))?;
        Image::from_bytes(Dims::new(self.c, self.h, self.w), &bytes)
            .map_err(|e| VictimError::Protocol(e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub probs: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectResponse {
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone)]
pub struct RemoteVictim {
    endpoint: String,
    dims: Option<Dims>,
    agent: ureq::Agent,
    retries: usize,
}

impl RemoteVictim {
    /// Uses the timeout from `RFPAR_REMOTE_TIMEOUT_MS` when set.
    pub fn new(endpoint: impl Into<String>) -> Self {
        let timeout = std::env::var(TIMEOUT_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_millis)
            .unwrap_or(DEFAULT_TIMEOUT);
        Self::with_timeout(endpoint, timeout)
    }

    pub fn with_timeout(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self {
            endpoint: endpoint.into(),
            dims: None,
            agent,
            retries: 0,
        }
    }

    /// Repeats a request up to `retries` more times on transport errors.
    pub fn with_retries(mut self, retries: usize) -> Self {
        self.retries = retries;
        self
    }

    pub fn expecting(mut self, dims: Dims) -> Self {
        self.dims = Some(dims);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn post(&self, request: &QueryRequest) -> Result<Vec<u8>, VictimError> {
        let mut attempt = 0;
        loop {
            match self.post_once(request) {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    attempt += 1;
                    log::warn!("{}: {e}; retry {attempt}/{}", self.endpoint, self.retries);
                }
                other => return other,
            }
        }
    }

    fn post_once(&self, request: &QueryRequest) -> Result<Vec<u8>, VictimError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .send(&request.to_body()[..])
            .map_err(|e| VictimError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 500 {
            return Err(VictimError::Transport(format!("server returned {status}")));
        }
        if status != 200 {
            return Err(VictimError::Protocol(format!("server returned {status}")));
        }
        resp.body_mut()
            .read_to_vec()
            .map_err(|e| VictimError::Transport(e.to_string()))
    }
}

/// Parses and validates a classify response body.
pub fn parse_classify(body: &[u8]) -> Result<ClassifierOutput, VictimError> {
    let parsed: ClassifyResponse =
        serde_json::from_slice(body).map_err(|e| VictimError::Protocol(e.to_string()))?;
    ClassifierOutput::new(parsed.probs).map_err(|e| VictimError::Protocol(e.to_string()))
}

/// Parses and validates a detect response body.
pub fn parse_detect(body: &[u8]) -> Result<DetectorOutput, VictimError> {
    let parsed: DetectResponse =
        serde_json::from_slice(body).map_err(|e| VictimError::Protocol(e.to_string()))?;
    DetectorOutput::new(parsed.detections).map_err(|e| VictimError::Protocol(e.to_string()))
}

impl Classifier for RemoteVictim {
    fn input_dims(&self) -> Option<Dims> {
        self.dims
    }

    fn classify(&self, x: &Image) -> Result<ClassifierOutput, VictimError> {
        parse_classify(&self.post(&QueryRequest::new(Task::Classify, x))?)
    }
}

impl Detector for RemoteVictim {
    fn input_dims(&self) -> Option<Dims> {
        self.dims
    }

    fn detect(&self, x: &Image) -> Result<DetectorOutput, VictimError> {
        parse_detect(&self.post(&QueryRequest::new(Task::Detect, x))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_body_layout() {
        let x = Image::new(Dims::new(1, 1, 3), vec![0.0, 0.5, 1.0]).unwrap();
        let body = QueryRequest::new(Task::Classify, &x).to_body();
        // bytes 0, 128, 255 -> "AID/"
        assert_eq!(
            std::str::from_utf8(&body).unwrap(),
            r#"{"task":"classify","c":1,"h":1,"w":3,"data_b64":"AID/"}"#
        );
        let req: QueryRequest = serde_json::from_slice(&body).unwrap();
        assert_eq!(req.image().unwrap().to_bytes(), vec![0, 128, 255]);
    }

    #[test]
    fn response_validation() {
        assert!(parse_classify(br#"{"probs":[0.25,0.75]}"#).is_ok());
        assert!(matches!(
            parse_classify(br#"{"probs":[0.5,0.75]}"#),
            Err(VictimError::Protocol(_))
        ));
        assert!(matches!(parse_classify(b"{}"), Err(VictimError::Protocol(_))));
        let d = parse_detect(
            br#"{"detections":[{"box":[1,2,3,4],"class_id":2,"confidence":0.75}]}"#,
        )
        .unwrap();
        assert_eq!(d.candidates[0].class_id, 2);
        assert!(parse_detect(
            br#"{"detections":[{"box":[3,2,1,4],"class_id":0,"confidence":0.7}]}"#
        )
        .is_err());
        assert!(parse_detect(
            br#"{"detections":[{"box":[1,2,3,4],"class_id":0,"confidence":1.5}]}"#
        )
        .is_err());
    }
}
