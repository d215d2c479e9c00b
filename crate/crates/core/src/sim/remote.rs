use std::collections::BTreeMap;
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use super::api::LoopApi;
use crate::blueprint::BlueprintDraft;
use crate::clock::Millis;
use crate::error::{Error, Result};
use crate::experiments::{AteResult, ExperimentSpec, LearnerKind};
use crate::service::{
    DecisionRequest, DecisionResponse, DisplayRequest, MaintenanceReport, MaintenanceRequest, ObservationBatch,
    RankingRequest, RankingResponse,
};
use crate::space::DecisionSpace;

/// Drives a running server over its HTTP API.
pub struct Remote {
    base: String,
    client: Client,
}

impl Remote {
    pub fn new(base_url: &str) -> Result<Self> {
        let client = Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| Error::Remote(e.to_string()))?;
        let r = Self { base: base_url.trim_end_matches('/').to_string(), client };
        r.now()?;
        Ok(r)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, rb: RequestBuilder) -> Result<Vec<u8>> {
        let resp = rb.send().map_err(|e| Error::Remote(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| Error::Remote(e.to_string()))?.to_vec();
        if status.is_success() {
            return Ok(bytes);
        }
        let msg = serde_json::from_slice::<Value>(&bytes)
            .ok()
            .and_then(|v| v.get("message").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_else(|| String::from_utf8_lossy(&bytes).into_owned());
        Err(Error::Remote(format!("{status}: {msg}")))
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        Ok(serde_json::from_slice(&self.send(self.client.post(self.url(path)).json(body))?)?)
    }

    fn post_unit<B: Serialize>(&self, path: &str, body: &B) -> Result<()> {
        self.send(self.client.post(self.url(path)).json(body)).map(|_| ())
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.send(self.client.get(self.url(path)))?)?)
    }
}

impl LoopApi for Remote {
    fn controls_clock(&self) -> bool {
        false
    }

    fn set_time(&self, _t: Millis) {}

    fn now(&self) -> Result<Millis> {
        let v: Value = self.get("/v1/healthz")?;
        v.get("now").and_then(Value::as_i64).ok_or_else(|| Error::Remote("healthz has no `now`".into()))
    }

    fn register_usecase(&self, usecase: &str, space: DecisionSpace) -> Result<()> {
        self.post_unit("/v1/usecases", &json!({"usecase_id": usecase, "decision_space": space}))
    }

    fn create_blueprint(&self, usecase: &str, draft: &BlueprintDraft) -> Result<u32> {
        let mut body = serde_json::to_value(draft)?;
        body["usecase_id"] = json!(usecase);
        let v: Value = self.post("/v1/blueprints", &body)?;
        v.get("version")
            .and_then(Value::as_u64)
            .map(|v| v as u32)
            .ok_or_else(|| Error::Remote("blueprint response has no version".into()))
    }

    fn activate(&self, usecase: &str, version: u32) -> Result<()> {
        self.post_unit(&format!("/v1/blueprints/{usecase}/{version}:activate"), &json!({}))
    }

    fn get_decision(&self, req: &DecisionRequest) -> Result<DecisionResponse> {
        self.post("/v1/decision", req)
    }

    fn log_observations(&self, batch: &ObservationBatch) -> Result<()> {
        self.post_unit("/v1/observations", batch)
    }

    fn get_ranking(&self, req: &RankingRequest) -> Result<RankingResponse> {
        self.post("/v1/ranking", req)
    }

    fn log_display(&self, req: &DisplayRequest) -> Result<()> {
        self.post_unit("/v1/display", req)
    }

    fn maintain(&self, usecase: &str, req: &MaintenanceRequest) -> Result<MaintenanceReport> {
        self.post(&format!("/v1/usecases/{usecase}:maintain"), req)
    }

    fn create_experiment(&self, spec: &ExperimentSpec) -> Result<String> {
        let v: Value = self.post("/v1/experiments", spec)?;
        v.get("experiment_id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Remote("experiment response has no id".into()))
    }

    fn advance_phase(&self, experiment_id: &str, learner: LearnerKind) -> Result<()> {
        let name = format!("{learner:?}").to_ascii_lowercase();
        self.post_unit(&format!("/v1/experiments/{experiment_id}:advance_phase"), &json!({"learner": name}))
    }

    fn ate(&self, experiment_id: &str) -> Result<AteResult> {
        self.get(&format!("/v1/experiments/{experiment_id}/ate"))
    }

    fn predict_cate(&self, experiment_id: &str, x: &[f64]) -> Result<BTreeMap<String, f64>> {
        let xs: Vec<String> = x.iter().map(f64::to_string).collect();
        self.get(&format!("/v1/experiments/{experiment_id}/cate?x={}", xs.join(",")))
    }
}
