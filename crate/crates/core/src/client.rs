//! Blocking HTTP client for the job server.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use ureq::Agent;

use crate::service::{
    Created, CreateRequest, ExperimentSummary, PollRequest, PollResponse, ResultAck, ResumeRequest, StatusResponse,
    WireResult,
};
use crate::checkpoint::CheckpointRef;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] ureq::Error),
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String },
}

pub struct Client {
    base: String,
    agent: Agent,
}

impl Client {
    pub fn new(base: &str) -> Self {
        let agent: Agent = Agent::config_builder().http_status_as_error(false).build().into();
        Self { base: base.trim_end_matches('/').to_string(), agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn finish<T: DeserializeOwned>(mut resp: ureq::http::Response<ureq::Body>) -> Result<T, ClientError> {
        let status = resp.status().as_u16();
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(ClientError::Status { status, body });
        }
        Ok(resp.body_mut().read_json()?)
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::finish(self.agent.get(&self.url(path)).call()?)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::finish(self.agent.post(&self.url(path)).send_json(body)?)
    }

    pub fn submit(&self, req: &CreateRequest) -> Result<Created, ClientError> {
        self.post("/experiments", req)
    }

    /// Submits a raw JSON body, for callers that already hold one.
    pub fn submit_value(&self, body: &Value) -> Result<Created, ClientError> {
        self.post("/experiments", body)
    }

    pub fn list(&self) -> Result<Vec<ExperimentSummary>, ClientError> {
        self.get("/experiments")
    }

    pub fn status(&self, id: &str) -> Result<StatusResponse, ClientError> {
        self.get(&format!("/experiments/{id}"))
    }

    pub fn resume(&self, id: &str, additional_n: u64) -> Result<StatusResponse, ClientError> {
        self.post(&format!("/experiments/{id}/resume"), &ResumeRequest { additional_n })
    }

    pub fn poll(&self, id: &str, worker_id: &str) -> Result<PollResponse, ClientError> {
        self.post(&format!("/experiments/{id}/jobs/poll"), &PollRequest { worker_id: worker_id.into() })
    }

    pub fn report(&self, id: &str, result: &WireResult) -> Result<ResultAck, ClientError> {
        self.post(&format!("/experiments/{id}/results"), result)
    }

    pub fn upload_checkpoint(&self, id: &str, config_id: u64, rung: usize, bytes: &[u8]) -> Result<CheckpointRef, ClientError> {
        let url = self.url(&format!("/experiments/{id}/checkpoints/{config_id}/{rung}"));
        Self::finish(self.agent.put(&url).send(bytes)?)
    }

    pub fn download_checkpoint(&self, id: &str, digest: &str) -> Result<Vec<u8>, ClientError> {
        let mut resp = self.agent.get(&self.url(&format!("/experiments/{id}/checkpoints/{digest}"))).call()?;
        let status = resp.status().as_u16();
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(ClientError::Status { status, body });
        }
        Ok(resp.body_mut().read_to_vec()?)
    }

    pub fn export(&self, id: &str, format: &str) -> Result<String, ClientError> {
        let mut resp = self.agent.get(&self.url(&format!("/experiments/{id}/export?format={format}"))).call()?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string()?;
        if status >= 400 {
            return Err(ClientError::Status { status, body });
        }
        Ok(body)
    }
}
