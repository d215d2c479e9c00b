//! JSON-over-HTTP surface of the platform.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::blueprint::{BlueprintDraft, StrategyBlueprint};
use crate::clock::{Millis, DAY};
use crate::error::Error;
use crate::experiments::{default_base_config, ExperimentSpec, LearnerKind};
use crate::features::{FeatureGroup, AppContext};
use crate::policy::parse_policy;
use crate::registry::ModelArtifact;
use crate::service::{DecisionRequest, DisplayRequest, MaintenanceRequest, ObservationBatch, Platform, PlatformConfig, RankingRequest};
use crate::space::DecisionSpace;

pub const DEFAULT_PORT: u16 = 8080;

/// Server settings; the platform section is passed through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: String,
    pub port: u16,
    pub platform: PlatformConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1".into(), port: DEFAULT_PORT, platform: PlatformConfig::default() }
    }
}

/// Error envelope: `{"error": code, "message": text}`.
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::Validation(_)
        | Error::KindMismatch(_)
        | Error::InvalidArgument(_)
        | Error::Policy(_)
        | Error::WrongDecisionSpace { .. }
        | Error::UsecaseMismatch(..)
        | Error::Json(_) => StatusCode::BAD_REQUEST,
        Error::NotFound { .. } | Error::UnknownUsecase(_) => StatusCode::NOT_FOUND,
        Error::Duplicate { .. } | Error::State(_) | Error::NothingToRollback(_) => StatusCode::CONFLICT,
        Error::InsufficientData(_) => StatusCode::UNPROCESSABLE_ENTITY,
        Error::Capacity(_) => StatusCode::TOO_MANY_REQUESTS,
        Error::Remote(_) => StatusCode::BAD_GATEWAY,
        Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let details = match &self.0 {
            Error::Validation(v) | Error::KindMismatch(v) => v.clone(),
            _ => Vec::new(),
        };
        let body = json!({"error": self.0.code(), "message": self.0.to_string(), "details": details});
        (status_for(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = State<Arc<Platform>>;

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    Ok(serde_json::from_slice(bytes).map_err(Error::from)?)
}

/// Splits `name:action` path segments.
fn action(target: &str) -> Result<(&str, &str), ApiError> {
    target
        .rsplit_once(':')
        .ok_or_else(|| ApiError(Error::not_found("route", target)))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> crate::Result<T> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::State(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

pub fn router(platform: Arc<Platform>) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/stats", get(stats))
        .route("/v1/decision", post(decision))
        .route("/v1/observations", post(observations))
        .route("/v1/ranking", post(ranking))
        .route("/v1/display", post(display))
        .route("/v1/usecases", get(list_usecases).post(register_usecase))
        .route("/v1/usecases/{target}", post(usecase_action))
        .route("/v1/feature_groups", post(register_group))
        .route("/v1/features/{group}/{key}", put(put_features))
        .route("/v1/blueprints", post(create_blueprint))
        .route("/v1/blueprints/{usecase}", get(list_blueprints))
        .route("/v1/blueprints/{usecase}/{target}", get(get_blueprint).post(blueprint_action))
        .route("/v1/models/{key}", get(list_models).post(model_action))
        .route("/v1/drift/{usecase}", get(drift))
        .route("/v1/experiments", get(list_experiments).post(create_experiment))
        .route("/v1/experiments/{target}", get(get_experiment).post(experiment_action))
        .route("/v1/experiments/{id}/ate", get(ate))
        .route("/v1/experiments/{id}/cate", get(cate))
        .route("/v1/policy:check", post(policy_check))
        .with_state(platform)
}

/// Serves until the process is stopped.
pub async fn serve(platform: Arc<Platform>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(platform)).await
}

async fn healthz(State(p): Shared) -> Json<Value> {
    Json(json!({"status": "ok", "now": p.now()}))
}

async fn stats(State(p): Shared) -> Json<Value> {
    Json(serde_json::to_value(p.stats()).unwrap_or(Value::Null))
}

async fn decision(State(p): Shared, b: Bytes) -> ApiResult<Value> {
    let req: DecisionRequest = body(&b)?;
    Ok(Json(serde_json::to_value(p.get_decision(&req)?).map_err(Error::from)?))
}

async fn observations(State(p): Shared, b: Bytes) -> Result<StatusCode, ApiError> {
    let batch: ObservationBatch = body(&b)?;
    p.log_observations(&batch)?;
    Ok(StatusCode::ACCEPTED)
}

async fn ranking(State(p): Shared, b: Bytes) -> ApiResult<Value> {
    let req: RankingRequest = body(&b)?;
    Ok(Json(serde_json::to_value(p.get_ranking(&req)?).map_err(Error::from)?))
}

async fn display(State(p): Shared, b: Bytes) -> Result<StatusCode, ApiError> {
    let req: DisplayRequest = body(&b)?;
    p.log_display(&req)?;
    Ok(StatusCode::ACCEPTED)
}

#[derive(Deserialize)]
struct RegisterUsecase {
    usecase_id: String,
    decision_space: DecisionSpace,
}

async fn register_usecase(State(p): Shared, b: Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let req: RegisterUsecase = body(&b)?;
    p.blueprints.register_usecase(&req.usecase_id, req.decision_space)?;
    Ok((StatusCode::CREATED, Json(json!({"usecase_id": req.usecase_id, "decision_space": req.decision_space}))))
}

async fn list_usecases(State(p): Shared) -> ApiResult<Vec<Value>> {
    let mut out = Vec::new();
    for u in p.blueprints.usecases() {
        let production = p.blueprints.production(&u)?.map(|bp| bp.version);
        out.push(json!({
            "usecase_id": u,
            "decision_space": p.blueprints.decision_space(&u)?,
            "production_version": production,
            "production_model": p.registry.snapshot().production_id(&u),
            "training_rows": p.training_row_count(&u),
        }));
    }
    Ok(Json(out))
}

async fn usecase_action(State(p): Shared, Path(target): Path<String>, b: Bytes) -> ApiResult<Value> {
    let (usecase, act) = action(&target)?;
    let usecase = usecase.to_string();
    match act {
        "rollback" => {
            let reinstated = p.registry.rollback(&usecase, p.now())?;
            Ok(Json(json!({"usecase_id": usecase, "production_model": reinstated})))
        }
        "maintain" => {
            let req: MaintenanceRequest = if b.is_empty() { MaintenanceRequest::default() } else { body(&b)? };
            let report = blocking(move || p.maintain(&usecase, &req)).await?;
            Ok(Json(serde_json::to_value(report).map_err(Error::from)?))
        }
        other => Err(ApiError(Error::not_found("usecase action", other))),
    }
}

async fn register_group(State(p): Shared, b: Bytes) -> Result<(StatusCode, Json<FeatureGroup>), ApiError> {
    let group: FeatureGroup = body(&b)?;
    p.features.register_group(group.clone())?;
    p.save_features()?;
    Ok((StatusCode::CREATED, Json(group)))
}

async fn put_features(State(p): Shared, Path((group, key)): Path<(String, String)>, b: Bytes) -> Result<StatusCode, ApiError> {
    let values: AppContext = body(&b)?;
    p.features.put_features(&group, &key, &values)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct CreateBlueprint {
    usecase_id: String,
    /// Registers the usecase first when it is unknown.
    #[serde(default)]
    decision_space: Option<DecisionSpace>,
    #[serde(flatten)]
    draft: BlueprintDraft,
}

async fn create_blueprint(State(p): Shared, b: Bytes) -> Result<(StatusCode, Json<StrategyBlueprint>), ApiError> {
    let req: CreateBlueprint = body(&b)?;
    if let Some(space) = req.decision_space {
        if !p.blueprints.usecases().contains(&req.usecase_id) {
            p.blueprints.register_usecase(&req.usecase_id, space)?;
        }
    }
    let fs = &p.features;
    let bp = p.blueprints.create_version(&req.usecase_id, req.draft, &|g| fs.has_group(g), p.now())?;
    Ok((StatusCode::CREATED, Json((*bp).clone())))
}

async fn list_blueprints(State(p): Shared, Path(usecase): Path<String>) -> ApiResult<Vec<StrategyBlueprint>> {
    Ok(Json(p.blueprints.list(&usecase)?))
}

fn parse_version(s: &str) -> Result<u32, ApiError> {
    s.parse().map_err(|_| ApiError(Error::invalid(format!("`{s}` is not a version number"))))
}

async fn get_blueprint(State(p): Shared, Path((usecase, version)): Path<(String, String)>) -> ApiResult<StrategyBlueprint> {
    Ok(Json(p.blueprints.get(&usecase, parse_version(&version)?)?))
}

async fn blueprint_action(State(p): Shared, Path((usecase, target)): Path<(String, String)>) -> ApiResult<StrategyBlueprint> {
    let (version, act) = action(&target)?;
    if act != "activate" {
        return Err(ApiError(Error::not_found("blueprint action", act)));
    }
    Ok(Json(p.blueprints.activate(&usecase, parse_version(version)?)?))
}

#[derive(Serialize)]
struct ModelList {
    usecase_id: String,
    production_model: Option<String>,
    models: Vec<ModelArtifact>,
}

async fn list_models(State(p): Shared, Path(usecase): Path<String>) -> ApiResult<ModelList> {
    p.blueprints.decision_space(&usecase)?;
    let snap = p.registry.snapshot();
    Ok(Json(ModelList {
        production_model: snap.production_id(&usecase).map(str::to_string),
        models: snap.artifacts(&usecase),
        usecase_id: usecase,
    }))
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct Window {
    since: Option<Millis>,
    until: Option<Millis>,
}

async fn model_action(State(p): Shared, Path(target): Path<String>, b: Bytes) -> ApiResult<Value> {
    let (id, act) = action(&target)?;
    if act != "promote" {
        return Err(ApiError(Error::not_found("model action", act)));
    }
    let w: Window = if b.is_empty() { Window::default() } else { body(&b)? };
    let id = id.to_string();
    let pp = p.clone();
    let idc = id.clone();
    let outcome = blocking(move || pp.evaluate_and_promote(&idc, w.since, w.until)).await?;
    Ok(Json(json!({"model_id": id, "outcome": outcome, "shadow": p.registry.shadow_summary(&id)})))
}

#[derive(Deserialize)]
struct DriftQuery {
    baseline_start: Option<Millis>,
    baseline_end: Option<Millis>,
    current_start: Option<Millis>,
    current_end: Option<Millis>,
}

/// Defaults compare the previous day with the last day.
async fn drift(State(p): Shared, Path(usecase): Path<String>, Query(q): Query<DriftQuery>) -> ApiResult<Value> {
    let now = p.now();
    let current = (q.current_start.unwrap_or(now - DAY), q.current_end.unwrap_or(now + 1));
    let baseline = (q.baseline_start.unwrap_or(current.0 - DAY), q.baseline_end.unwrap_or(current.0));
    let report = blocking(move || p.check_drift(&usecase, baseline, current)).await?;
    Ok(Json(serde_json::to_value(report).map_err(Error::from)?))
}

async fn create_experiment(State(p): Shared, b: Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let spec: ExperimentSpec = body(&b)?;
    let exp = p.experiments.create(spec, p.now())?;
    Ok((StatusCode::CREATED, Json(serde_json::to_value(&*exp).map_err(Error::from)?)))
}

async fn list_experiments(State(p): Shared) -> ApiResult<Value> {
    let all: Vec<Value> = p.experiments.list().iter().filter_map(|e| serde_json::to_value(&**e).ok()).collect();
    Ok(Json(Value::Array(all)))
}

async fn get_experiment(State(p): Shared, Path(id): Path<String>) -> ApiResult<Value> {
    Ok(Json(serde_json::to_value(&*p.experiments.get(&id)?).map_err(Error::from)?))
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct AdvanceBody {
    learner: Option<String>,
}

async fn experiment_action(State(p): Shared, Path(target): Path<String>, b: Bytes) -> ApiResult<Value> {
    let (id, act) = action(&target)?;
    let id = id.to_string();
    let exp = match act {
        "advance_phase" => {
            let req: AdvanceBody = if b.is_empty() { AdvanceBody::default() } else { body(&b)? };
            let kind: LearnerKind = req.learner.as_deref().unwrap_or("x").parse()?;
            blocking(move || p.experiments.advance_phase(&id, kind, &default_base_config())).await?
        }
        "stop" => p.experiments.stop(&id)?,
        other => return Err(ApiError(Error::not_found("experiment action", other))),
    };
    Ok(Json(serde_json::to_value(&*exp).map_err(Error::from)?))
}

#[derive(Deserialize)]
struct AteQuery {
    arm: Option<String>,
}

async fn ate(State(p): Shared, Path(id): Path<String>, Query(q): Query<AteQuery>) -> ApiResult<Value> {
    let r = p.experiments.ate(&id, q.arm.as_deref())?;
    Ok(Json(serde_json::to_value(r).map_err(Error::from)?))
}

#[derive(Deserialize)]
struct CateQuery {
    x: String,
}

/// `x` is a comma-separated covariate vector.
async fn cate(State(p): Shared, Path(id): Path<String>, Query(q): Query<CateQuery>) -> ApiResult<BTreeMap<String, f64>> {
    let x = q
        .x
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::invalid(format!("`{s}` is not a number"))))
        .collect::<crate::Result<Vec<f64>>>()?;
    Ok(Json(p.experiments.predict_cate(&id, &x)?))
}

#[derive(Deserialize)]
struct PolicySource {
    source: String,
}

async fn policy_check(b: Bytes) -> ApiResult<Value> {
    let req: PolicySource = body(&b)?;
    let program = parse_policy(&req.source).map_err(Error::from)?;
    Ok(Json(json!({
        "kind": program.kind(),
        "canonical": program.to_string(),
        "predictions": program.predictions,
        "features": program.features,
        "parameters": program.parameters,
    })))
}
