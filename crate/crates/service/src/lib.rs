//! HTTP/JSON API over the score store: task submission and monitoring,
//! heatmap, county and trend queries.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/api/tasks` | submit a task, 201 `{task_id, status}` |
//! | GET | `/api/tasks` | every task |
//! | GET | `/api/tasks/{id}` | status and per-stage progress |
//! | GET | `/api/tasks/{id}/events?after=N&wait_ms=T` | events with `seq > N` |
//! | GET | `/api/heatmap?bbox=W,S,E,N&period=P` | cell scores in the box |
//! | GET | `/api/counties` | county polygons |
//! | GET | `/api/counties/{id}?period=P` | one county value |
//! | GET | `/api/counties/{id}/trend?from=A&to=B` | values ascending by period |
//! | GET | `/api/health` | liveness |
//!
//! Tasks run on the blocking pool; the handler returns as soon as the task
//! is recorded.

mod error;
mod handlers;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::http::{header, HeaderName, HeaderValue, Method};
use axum::routing::get;
use axum::Router;
use geoecon::align::PairOptions;
use geoecon::dataio::CorpusLayout;
use geoecon::pipeline::TaskEnv;
use geoecon::store::{Store, StoreError, StoreOptions, TaskStatus, Write};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use error::ApiError;

/// Request header that makes task submission idempotent.
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub store_dir: PathBuf,
    pub corpus_dir: PathBuf,
    /// Checkpoint directories by model name; tasks default to `"default"`.
    pub models: BTreeMap<String, PathBuf>,
    /// Used when a submission names no worker count.
    pub default_workers: usize,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
}

impl ServiceConfig {
    pub fn new(store_dir: PathBuf, corpus_dir: PathBuf, checkpoint: Option<PathBuf>) -> Self {
        ServiceConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            store_dir,
            corpus_dir,
            models: checkpoint.map(|c| ("default".to_string(), c)).into_iter().collect(),
            default_workers: 1,
            cors_origin: None,
        }
    }
}

pub(crate) struct AppState {
    pub store: Arc<Store>,
    pub env: TaskEnv,
    pub default_workers: usize,
    /// Task ids with a run in progress.
    pub in_flight: Mutex<HashSet<String>>,
    /// Idempotency key to task id.
    pub submitted: Mutex<HashMap<String, String>>,
}

/// Shared handle to a running service's state.
#[derive(Clone)]
pub struct Service {
    state: Arc<AppState>,
}

impl Service {
    /// Opens the store and marks tasks left pending or running by an earlier
    /// process as failed, since nothing will finish them.
    pub fn open(config: &ServiceConfig) -> Result<Service, StoreError> {
        let store = Store::open_with(&config.store_dir, StoreOptions::default())?;
        fail_interrupted(&store)?;
        let env = TaskEnv {
            corpus: CorpusLayout::new(&config.corpus_dir),
            models: config.models.clone(),
            pair_options: PairOptions::default(),
        };
        let state = AppState {
            store: Arc::new(store),
            env,
            default_workers: config.default_workers.max(1),
            in_flight: Mutex::new(HashSet::new()),
            submitted: Mutex::new(HashMap::new()),
        };
        Ok(Service { state: Arc::new(state) })
    }

    pub fn store(&self) -> &Store {
        &self.state.store
    }

    pub fn router(&self, cors_origin: Option<&str>) -> Router {
        let origin = match cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
            Some(o) => AllowOrigin::exact(o),
            None => AllowOrigin::any(),
        };
        let cors = CorsLayer::new()
            .allow_origin(origin)
            .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
            .allow_headers([header::CONTENT_TYPE, HeaderName::from_static(IDEMPOTENCY_HEADER)]);
        Router::new()
            .route("/api/health", get(handlers::health))
            .route("/api/tasks", get(handlers::list_tasks).post(handlers::create_task))
            .route("/api/tasks/{id}", get(handlers::get_task))
            .route("/api/tasks/{id}/events", get(handlers::task_events))
            .route("/api/heatmap", get(handlers::heatmap))
            .route("/api/counties", get(handlers::list_counties))
            .route("/api/counties/{id}", get(handlers::county_score))
            .route("/api/counties/{id}/trend", get(handlers::county_trend))
            .fallback(handlers::not_found)
            .method_not_allowed_fallback(handlers::method_not_allowed)
            .layer(cors)
            .with_state(self.state.clone())
    }

    /// True while any task of this process is still running.
    pub fn busy(&self) -> bool {
        !self.state.in_flight.lock().unwrap_or_else(|e| e.into_inner()).is_empty()
    }
}

fn fail_interrupted(store: &Store) -> Result<(), StoreError> {
    for t in store.tasks() {
        if t.status.is_terminal() {
            continue;
        }
        let mut writes = Vec::new();
        if t.status == TaskStatus::Pending {
            writes.push(Write::UpdateTask(t.with_status(TaskStatus::Running, None)));
        }
        writes.push(Write::ClearTask { task_id: t.task_id.clone(), results: true, events: false });
        writes.push(Write::UpdateTask(t.with_status(TaskStatus::Failed, Some("interrupted by a service restart".into()))));
        store.commit(writes)?;
        log::warn!("task {} was left {:?} and is now failed", t.task_id, t.status);
    }
    Ok(())
}

/// Serves on an already bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    router: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}

/// Binds `config.listen` and serves until interrupted.
pub async fn serve(config: ServiceConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let service = Service::open(&config)?;
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let router = service.router(config.cors_origin.as_deref());
    serve_on(listener, router, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
