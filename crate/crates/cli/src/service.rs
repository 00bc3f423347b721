//! JSON-over-HTTP access to a [`SessionStore`].

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crystalbox::env::Env;
use crystalbox::eval::Method;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::store::{SessionStore, StoreError};

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn unprocessable(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::UnknownState(_) => StatusCode::NOT_FOUND,
            StoreError::InvalidAction(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Unavailable(_) => StatusCode::CONFLICT,
            StoreError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::unprocessable(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::unprocessable(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "status": self.status.as_u16() }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared<E> = State<Arc<SessionStore<E>>>;

fn parse_method(s: Option<&str>) -> Result<Method, ApiError> {
    s.map_or(Ok(Method::Predictor), |m| m.parse().map_err(|_| ApiError::unprocessable(format!("unknown method {m:?}"))))
}

#[derive(Deserialize)]
pub struct ExplainRequest {
    pub state_id: usize,
    pub action: f64,
    pub method: Option<String>,
}

#[derive(Deserialize)]
pub struct CompareRequest {
    pub state_id: usize,
    pub actions: Vec<f64>,
    pub method: Option<String>,
}

#[derive(Deserialize)]
pub struct Page {
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

#[derive(Deserialize)]
pub struct AlertQuery {
    pub method: Option<String>,
}

#[derive(Serialize)]
struct Alert {
    id: usize,
    trace_id: String,
    action: f64,
    flags: Vec<bool>,
    events: Vec<String>,
}

pub fn router<E: Env + 'static>(store: Arc<SessionStore<E>>) -> Router {
    Router::new()
        .route("/api/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/api/components", get(components::<E>))
        .route("/api/states", get(states::<E>))
        .route("/api/states/{id}", get(state::<E>))
        .route("/api/explain", post(explain::<E>))
        .route("/api/compare", post(compare::<E>))
        .route("/api/alerts", get(alerts::<E>))
        .fallback(|| async {
            ApiError {
                status: StatusCode::NOT_FOUND,
                message: "no such endpoint".into(),
            }
        })
        .with_state(store)
}

async fn components<E: Env>(State(store): Shared<E>) -> Json<serde_json::Value> {
    let c = &store.components;
    Json(json!({
        "components": c.names.iter().zip(&c.weights).map(|(n, w)| json!({ "name": n, "weight": w })).collect::<Vec<_>>(),
        "action_space": store.action_space,
        "methods": store.methods(),
        "thresholds": store.thresholds.thresholds,
    }))
}

async fn states<E: Env>(State(store): Shared<E>, page: Result<Query<Page>, QueryRejection>) -> ApiResult<serde_json::Value> {
    let Query(page) = page?;
    let offset = page.offset.unwrap_or(0);
    let limit = page.limit.unwrap_or(50);
    let list: Vec<_> = store.states.iter().skip(offset).take(limit).map(|s| store.summary(s)).collect();
    Ok(Json(json!({ "total": store.states.len(), "offset": offset, "states": list })))
}

async fn state<E: Env>(State(store): Shared<E>, Path(id): Path<String>) -> ApiResult<crate::store::StateDetail> {
    let id = id.parse::<usize>().map_err(|_| StoreError::UnknownState(id.clone()))?;
    Ok(Json(store.detail(id)?))
}

async fn explain<E: Env>(
    State(store): Shared<E>,
    body: Result<Json<ExplainRequest>, JsonRejection>,
) -> ApiResult<crate::store::ExplainResponse> {
    let Json(req) = body?;
    let method = parse_method(req.method.as_deref())?;
    Ok(Json(store.explain(req.state_id, req.action, method)?))
}

async fn compare<E: Env>(
    State(store): Shared<E>,
    body: Result<Json<CompareRequest>, JsonRejection>,
) -> ApiResult<Vec<crate::store::ExplainResponse>> {
    let Json(req) = body?;
    let method = parse_method(req.method.as_deref())?;
    let out = req
        .actions
        .iter()
        .map(|&a| store.explain(req.state_id, a, method))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Json(out))
}

async fn alerts<E: Env>(State(store): Shared<E>, q: Result<Query<AlertQuery>, QueryRejection>) -> ApiResult<serde_json::Value> {
    let Query(q) = q?;
    let method = parse_method(q.method.as_deref())?;
    let mut flagged = Vec::new();
    for s in &store.states {
        let r = store.explain(s.id, s.policy_action, method)?;
        if r.flags.iter().any(|&f| f) {
            flagged.push(Alert {
                id: s.id,
                trace_id: s.trace_id.clone(),
                action: s.policy_action,
                events: r.components.iter().zip(&r.flags).filter(|(_, &f)| f).map(|(c, _)| c.name.clone()).collect(),
                flags: r.flags,
            });
        }
    }
    Ok(Json(json!({ "method": method, "states": flagged })))
}

/// Serves until the process is stopped.
pub async fn serve<E: Env + 'static>(store: SessionStore<E>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(store))).await
}
