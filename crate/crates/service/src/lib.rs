//! HTTP service: detection, preference annotation, prediction and rating.
//!
//! All state lives under the data directory: the scenario set, the preference journals
//! and content-addressed uploads. Restarting the service replays the journals.

mod error;
mod handlers;
mod scenarios;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Request, State};
use axum::http::{header, HeaderValue, Method};
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{get, post};
use axum::Router;
use commet_core::{Detector, EngineConfig, PreferenceEngine, PreferenceStore, Result};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use error::{ApiError, ErrorCode};
pub use handlers::{
    CaseSubmission, CaseSubmitted, DetectRequest, OptionChoice, PendingScenarios, PredictRequest, RatingRequest, ScenarioView,
};
pub use scenarios::ScenarioSet;

pub const DEFAULT_PORT: u16 = 8080;
const MAX_UPLOAD_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    /// Without an engine config the service runs preference endpoints only, with the
    /// mock summarizer, and `/v1/detect` answers 503.
    pub engine_config: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub auth_token: Option<String>,
    /// Allowed browser origins; `*` allows any.
    pub cors_origins: Vec<String>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            engine_config: None,
            data_dir: data_dir.into(),
            auth_token: None,
            cors_origins: Vec::new(),
        }
    }

    /// Applies `COMMET_PORT` and `COMMET_DATA_DIR` if set.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(port) = std::env::var("COMMET_PORT") {
            let port: u16 = port
                .parse()
                .map_err(|_| commet_core::Error::Config(format!("COMMET_PORT={port:?} is not a port number")))?;
            self.listen.set_port(port);
        }
        if let Ok(dir) = std::env::var("COMMET_DATA_DIR") {
            self.data_dir = dir.into();
        }
        Ok(self)
    }
}

pub(crate) struct AppState {
    pub detector: Option<Detector>,
    pub engine: PreferenceEngine,
    pub scenarios: ScenarioSet,
    pub uploads: PathBuf,
    pub auth_token: Option<String>,
}

/// Shared handle to everything the handlers need.
#[derive(Clone)]
pub struct App(pub(crate) Arc<AppState>);

impl App {
    /// Loads buffers, opens the journals and the scenario set. Blocking; call it
    /// before entering an async runtime.
    pub fn build(config: &ServiceConfig) -> Result<App> {
        let data = &config.data_dir;
        std::fs::create_dir_all(data).map_err(|e| commet_core::Error::Config(format!("data directory {}: {e}", data.display())))?;
        check_writable(data)?;
        let (detector, engine) = match &config.engine_config {
            Some(path) => {
                let engine_config = EngineConfig::load(path)?;
                let providers = engine_config.build_providers()?;
                let detector = engine_config.build_detector(providers)?;
                (Some(detector), engine_config.build_preference_engine(&data.join("journal"))?)
            }
            None => {
                let store = Arc::new(PreferenceStore::open(data.join("journal"))?);
                (None, PreferenceEngine::new(store, Arc::new(commet_core::preference::MockSummarizer)))
            }
        };
        let scenarios = ScenarioSet::load_or_seed(data)?;
        let uploads = data.join("uploads");
        std::fs::create_dir_all(&uploads).map_err(|e| commet_core::Error::Config(format!("{}: {e}", uploads.display())))?;
        Ok(App(Arc::new(AppState {
            detector,
            engine,
            scenarios,
            uploads,
            auth_token: config.auth_token.clone(),
        })))
    }

    pub fn router(&self, cors_origins: &[String]) -> Router {
        let api = Router::new()
            .route(
                "/v1/detect",
                post(handlers::detect).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)),
            )
            .route("/v1/annotation/scenarios", get(handlers::list_scenarios))
            .route("/v1/annotation/scenarios/{id}/image", get(handlers::scenario_image))
            .route("/v1/annotation/cases", get(handlers::list_cases).post(handlers::submit_case))
            .route("/v1/predict", post(handlers::predict))
            .route("/v1/predictions", get(handlers::list_predictions))
            .route("/v1/predictions/{id}/rating", post(handlers::rate))
            .route("/v1/catalog/{conflict_type}", get(handlers::catalog))
            .route_layer(middleware::from_fn_with_state(self.clone(), require_token));
        let router = Router::new()
            .route("/v1/health", get(handlers::health))
            .merge(api)
            .fallback(handlers::no_route)
            .method_not_allowed_fallback(handlers::no_method)
            .with_state(self.clone());
        match cors(cors_origins) {
            Some(layer) => router.layer(layer),
            None => router,
        }
    }
}

fn check_writable(dir: &Path) -> Result<()> {
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"ok")
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| commet_core::Error::Config(format!("data directory {} is not writable: {e}", dir.display())))
}

fn cors(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    Some(
        CorsLayer::new()
            .allow_origin(allow)
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]),
    )
}

async fn require_token(State(app): State<App>, request: Request, next: Next) -> std::result::Result<Response, ApiError> {
    if let Some(token) = &app.0.auth_token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return Err(ApiError::new(
                axum::http::StatusCode::UNAUTHORIZED,
                ErrorCode::Unauthorized,
                "missing or wrong bearer token",
            ));
        }
    }
    Ok(next.run(request).await)
}

/// Builds the app, binds, prints the bound address and serves until ctrl-c.
pub fn run(config: ServiceConfig) -> Result<()> {
    let app = App::build(&config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| commet_core::Error::Config(format!("tokio runtime: {e}")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(config.listen)
            .await
            .map_err(|e| commet_core::Error::Config(format!("bind {}: {e}", config.listen)))?;
        let addr = listener
            .local_addr()
            .map_err(|e| commet_core::Error::Config(format!("local address: {e}")))?;
        println!("listening on http://{addr}");
        log::info!("serving {} from {}", addr, config.data_dir.display());
        axum::serve(listener, app.router(&config.cors_origins))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| commet_core::Error::Config(format!("server: {e}")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_port_and_data_dir() {
        // the only test in this binary that touches these variables
        std::env::set_var("COMMET_PORT", "9431");
        std::env::set_var("COMMET_DATA_DIR", "/srv/commet");
        let config = ServiceConfig::new("data").with_env_overrides().unwrap();
        assert_eq!(config.listen.port(), 9431);
        assert_eq!(config.data_dir, PathBuf::from("/srv/commet"));
        std::env::set_var("COMMET_PORT", "http");
        assert!(ServiceConfig::new("data").with_env_overrides().is_err());
        std::env::remove_var("COMMET_PORT");
        std::env::remove_var("COMMET_DATA_DIR");
    }

    #[test]
    fn unusable_data_dir_fails_startup() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("not-a-dir");
        std::fs::write(&file, b"x").unwrap();
        assert!(App::build(&ServiceConfig::new(&file)).is_err());
    }
}
