//! HTTP routing for the API handlers.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, JsonRejection};
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::{ServeDir, ServeFile};

use crate::api::{self, ApiError, AppState, ErrorBody};

#[derive(Clone, Debug, Default)]
pub struct RouterOptions {
    /// Origin allowed to call the API from a browser.
    pub ui_origin: Option<String>,
    /// Static UI build served outside `/api/`.
    pub ui_dir: Option<PathBuf>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorBody { error: self.message })).into_response()
    }
}

fn json_rejection(r: JsonRejection) -> ApiError {
    ApiError::new(r.status().as_u16(), r.body_text())
}

/// Runs a handler off the async workers; model inference is CPU-bound.
async fn blocking<T, F>(state: Arc<AppState>, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&AppState) -> api::ApiResult<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&state)).await {
        Ok(Ok(body)) => Json(body).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(500, format!("handler panicked: {e}")).into_response(),
    }
}

async fn upload(State(state): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> Response {
    let body = match body {
        Ok(b) => b,
        Err(r) => return ApiError::new(r.status().as_u16(), r.body_text()).into_response(),
    };
    blocking(state, move |s| api::handle_upload(s, &body)).await
}

async fn get_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match api::handle_get_image(&state, &id) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn detect(State(state): State<Arc<AppState>>, req: Result<Json<api::ImageRequest>, JsonRejection>) -> Response {
    match req {
        Ok(Json(req)) => blocking(state, move |s| api::handle_detect(s, &req)).await,
        Err(r) => json_rejection(r).into_response(),
    }
}

async fn classify(
    State(state): State<Arc<AppState>>,
    req: Result<Json<api::ClassifyRequest>, JsonRejection>,
) -> Response {
    match req {
        Ok(Json(req)) => blocking(state, move |s| api::handle_classify(s, &req)).await,
        Err(r) => json_rejection(r).into_response(),
    }
}

async fn grade(State(state): State<Arc<AppState>>, req: Result<Json<api::GradeRequest>, JsonRejection>) -> Response {
    match req {
        Ok(Json(req)) => blocking(state, move |s| api::handle_grade(s, &req)).await,
        Err(r) => json_rejection(r).into_response(),
    }
}

async fn models(State(state): State<Arc<AppState>>) -> Json<api::ModelsResponse> {
    Json(api::handle_models(&state))
}

async fn api_not_found() -> ApiError {
    ApiError::new(404, "no such endpoint")
}

pub fn router(state: Arc<AppState>, options: &RouterOptions) -> anyhow::Result<Router> {
    // one byte over the limit so the handler, not the extractor, answers 413
    let limit = state.max_upload.saturating_add(1);
    let api = Router::new()
        .route("/images", post(upload).layer(DefaultBodyLimit::max(limit)))
        .route("/images/{id}", get(get_image))
        .route("/detect", post(detect))
        .route("/classify", post(classify))
        .route("/grade", post(grade))
        .route("/models", get(models))
        .fallback(api_not_found)
        .with_state(state);
    let mut app = Router::new().nest("/api", api);
    if let Some(dir) = &options.ui_dir {
        let index = dir.join("index.html");
        app = app.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)));
    }
    if let Some(origin) = &options.ui_origin {
        let origin = HeaderValue::from_str(origin).map_err(|e| anyhow::anyhow!("bad --ui-origin {origin:?}: {e}"))?;
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::exact(origin))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        );
    }
    Ok(app)
}

/// Serves until interrupted.
pub async fn serve(state: Arc<AppState>, options: RouterOptions, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let app = router(state, &options)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
