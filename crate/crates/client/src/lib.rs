//! Typed calls against a running editing service. Float payloads come back
//! decoded; PNG previews stay as raw bytes.

use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;

use sosvae::api::{
    decode_bytes, decode_f64s, EditRequest, EditResponse, ErrorBody, ModelInfo, SampleRequest, SampleResponse,
    ScaleRequest, ScaleResponse, SessionDebug,
};
use sosvae::edits::PixelEdit;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server answered {status}: {message}")]
    Api { status: StatusCode, message: String },
    #[error("bad payload: {0}")]
    Payload(#[from] sosvae::Error),
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub session_id: String,
    pub mean: Vec<f64>,
    pub sample: Vec<f64>,
    pub mean_png: Vec<u8>,
    pub sample_png: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub values: Vec<f64>,
    pub png: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` like `http://127.0.0.1:8080`, without the `/api` suffix.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn read<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Api { status, message })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Self::read(self.http.get(format!("{}{path}", self.base)).send().await?).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        Self::read(self.http.post(format!("{}{path}", self.base)).json(body).send().await?).await
    }

    pub async fn model(&self) -> Result<ModelInfo> {
        self.get("/api/model").await
    }

    pub async fn sample(&self, seed: u64) -> Result<Sample> {
        let r: SampleResponse = self.post("/api/sample", &SampleRequest { seed }).await?;
        Ok(Sample {
            session_id: r.session_id,
            mean: decode_f64s(&r.mean)?,
            sample: decode_f64s(&r.sample)?,
            mean_png: decode_bytes(&r.mean_png)?,
            sample_png: decode_bytes(&r.sample_png)?,
        })
    }

    pub async fn scale(&self, session_id: &str, coefficients: &[f64]) -> Result<Image> {
        let req = ScaleRequest {
            session_id: session_id.to_string(),
            coefficients: coefficients.to_vec(),
        };
        let r: ScaleResponse = self.post("/api/scale", &req).await?;
        Ok(Image {
            values: decode_f64s(&r.sample)?,
            png: decode_bytes(&r.sample_png)?,
        })
    }

    pub async fn edit(&self, session_id: &str, edits: &[PixelEdit], reset: bool) -> Result<Image> {
        let req = EditRequest {
            session_id: session_id.to_string(),
            edits: edits.to_vec(),
            reset,
        };
        let r: EditResponse = self.post("/api/edit", &req).await?;
        Ok(Image {
            values: decode_f64s(&r.conditioned_image)?,
            png: decode_bytes(&r.conditioned_png)?,
        })
    }

    pub async fn debug(&self, session_id: &str) -> Result<SessionDebug> {
        self.get(&format!("/api/session/{session_id}/debug")).await
    }
}
