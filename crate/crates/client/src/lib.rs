//! Async client for the `/v1` HTTP API.

use denerd_api::core::stats::RankSumResult;
use denerd_api::core::workbench::ImageAnnotations;
use denerd_api::types::*;
use denerd_api::ApiError;
use reqwest::{Method, Response};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The server answered with a structured error.
    #[error("{} ({status}): {}", kind_name(.error), .error.message)]
    Api { status: u16, error: ApiError },
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("unexpected response ({status}): {body}")]
    Unexpected { status: u16, body: String },
}

fn kind_name(e: &ApiError) -> String {
    serde_json::to_value(e.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

impl ClientError {
    pub fn api(&self) -> Option<&ApiError> {
        match self {
            ClientError::Api { error, .. } => Some(error),
            _ => None,
        }
    }
}

pub type ClientResult<T> = Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8757`.
    pub fn new(base: &str) -> Self {
        Client {
            base: base.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1{}", self.base, path)
    }

    async fn check(resp: Response) -> ClientResult<Response> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body = resp.text().await?;
        match serde_json::from_str::<ApiError>(&body) {
            Ok(error) => Err(ClientError::Api { status: status.as_u16(), error }),
            Err(_) => Err(ClientError::Unexpected { status: status.as_u16(), body }),
        }
    }

    async fn send<B: Serialize + ?Sized, T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&B>) -> ClientResult<T> {
        let mut req = self.http.request(method, self.url(path));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = Self::check(req.send().await?).await?;
        Ok(resp.json().await?)
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> ClientResult<T> {
        self.send::<(), T>(Method::GET, path, None).await
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> ClientResult<T> {
        self.send(Method::POST, path, Some(body)).await
    }

    async fn bytes(&self, path: &str) -> ClientResult<Vec<u8>> {
        let resp = Self::check(self.http.get(self.url(path)).send().await?).await?;
        Ok(resp.bytes().await?.to_vec())
    }

    pub async fn health(&self) -> ClientResult<Health> {
        self.get("/health").await
    }

    pub async fn images(&self) -> ClientResult<Vec<ImageInfo>> {
        self.get("/images").await
    }

    pub async fn image_png(&self, id: &str) -> ClientResult<Vec<u8>> {
        self.bytes(&format!("/images/{id}")).await
    }

    pub async fn expression_png(&self, id: &str) -> ClientResult<Vec<u8>> {
        self.bytes(&format!("/images/{id}/expression")).await
    }

    pub async fn annotations(&self, id: &str) -> ClientResult<ImageAnnotations> {
        self.get(&format!("/images/{id}/annotations")).await
    }

    pub async fn add_boxes(&self, id: &str, req: &AddBoxesRequest) -> ClientResult<ImageAnnotations> {
        self.post(&format!("/images/{id}/annotations"), req).await
    }

    pub async fn remove_boxes(&self, id: &str, req: &RemoveBoxesRequest) -> ClientResult<RemoveBoxesResponse> {
        self.post(&format!("/images/{id}/annotations/remove"), req).await
    }

    pub async fn export(&self, req: &ExportRequest) -> ClientResult<ExportResponse> {
        self.post("/export", req).await
    }

    pub async fn import(&self, req: &ImportRequest) -> ClientResult<ImportResponse> {
        self.post("/import", req).await
    }

    pub async fn generate_corpus(&self, req: &GenerateCorpusRequest) -> ClientResult<GenerateCorpusResponse> {
        self.post("/corpus", req).await
    }

    pub async fn generate_dataset(&self, req: &GenerateDatasetRequest) -> ClientResult<GenerateDatasetResponse> {
        self.post("/dataset", req).await
    }

    pub async fn train(&self, req: &TrainRequest) -> ClientResult<TrainResponse> {
        self.post("/train", req).await
    }

    pub async fn detect(&self, req: &DetectRequest) -> ClientResult<DetectResponse> {
        self.post("/detect", req).await
    }

    pub async fn register(&self, req: &RegisterRequest) -> ClientResult<RegisterResponse> {
        self.post("/register", req).await
    }

    pub async fn quantify(&self, req: &QuantifyRequest) -> ClientResult<QuantifyResponse> {
        self.post("/quantify", req).await
    }

    pub async fn stats(&self, req: &StatsRequest) -> ClientResult<StatsResponse> {
        self.post("/stats", req).await
    }

    pub async fn ranksum(&self, req: &RanksumRequest) -> ClientResult<RankSumResult> {
        self.post("/ranksum", req).await
    }

    pub async fn run(&self, req: &RunRequest) -> ClientResult<RunResponse> {
        self.post("/run", req).await
    }

    pub async fn run_all(&self, req: &RunAllRequest) -> ClientResult<RunAllResponse> {
        self.post("/run-all", req).await
    }

    pub async fn report(&self, req: &ReportRequest) -> ClientResult<ReportResponse> {
        self.post("/report", req).await
    }
}
