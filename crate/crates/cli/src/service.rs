//! HTTP backend for the latent explorer.
//!
//! Sessions live in memory. Each one holds the decoded latent table of one
//! compressed file, its cluster tree and cached projections. Mutations of a
//! session are serialized by its lock and bump a version counter that every
//! response carries.

use std::collections::{BTreeMap, HashMap};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use idlat::analysis::{project_2d, ClusterTree, Embedding2D, LatentTable, NodeId, TsneConfig};
use idlat::blocking::{block_entropy, partition, BlockIndex, BlockSpec};
use idlat::codec::{decode_latents, decompress_latents, CompressedVolume};
use idlat::importance::ImportanceMap;
use idlat::network::{hex, Model};
use idlat::volume::{Dims, Dtype, Volume, VolumeSource};
use idlat::Error;

use crate::render::{contour_image, png_bytes, slice_image, Axis};

pub const OPENAPI: &str = include_str!("../openapi.yaml");

const ENTROPY_BINS: usize = 32;

/// Error returned as `{"error": kind, "message": ...}` with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::UnknownNode(_) => Self::not_found(msg),
            Error::HashMismatch { .. } => Self::new(StatusCode::CONFLICT, "hash_mismatch", msg),
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Self::not_found(msg),
            Error::Io(_) | Error::Serde(_) | Error::Diverged { .. } => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg)
            }
            _ => Self::bad_request(msg),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.kind,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

struct Session {
    id: String,
    volume_path: String,
    idlt_path: String,
    spec: BlockSpec,
    dims: Dims,
    model_hash: String,
    table: LatentTable,
    /// Per-row mean value and entropy of the original data.
    summaries: Vec<(f64, f64)>,
    /// Reconstruction of the whole volume and the table row owning each voxel.
    recon: Volume,
    owner: Vec<usize>,
    value_range: (f64, f64),
    tree: ClusterTree,
    version: u64,
    projections: HashMap<(u64, u64), Embedding2D>,
}

pub struct AppState {
    root: PathBuf,
    default_model: Option<PathBuf>,
    sessions: RwLock<BTreeMap<String, Arc<RwLock<Session>>>>,
    counter: AtomicU64,
}

impl AppState {
    /// `root` is the directory request paths are resolved against;
    /// `default_model` is used when a create request names no model.
    pub fn new(root: impl Into<PathBuf>, default_model: Option<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            root: root.into(),
            default_model,
            sessions: RwLock::new(BTreeMap::new()),
            counter: AtomicU64::new(0),
        })
    }

    /// Resolves a request path under the data root, refusing escapes.
    fn resolve(&self, rel: &str) -> ApiResult<PathBuf> {
        let p = Path::new(rel);
        if p.is_absolute()
            || p.components()
                .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
        {
            return Err(ApiError::bad_request(format!(
                "path {rel:?} must be relative to the data directory"
            )));
        }
        let full = self.root.join(p);
        if !full.is_file() {
            return Err(ApiError::not_found(format!("file {rel:?} not found")));
        }
        Ok(full)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<RwLock<Session>>> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("session {id:?} not found")))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    volume: String,
    idlt_file: String,
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    dtype: Option<String>,
    #[serde(default)]
    sentinel: Option<f64>,
}

#[derive(Serialize)]
struct SessionInfo {
    id: String,
    version: u64,
    volume: String,
    idlt_file: String,
    dims: [usize; 3],
    block_grid: [usize; 3],
    block_count: usize,
    content: usize,
    pad: usize,
    latent_len: usize,
    model_hash: String,
    tree: ClusterTree,
}

#[derive(Serialize)]
struct SessionSummary {
    id: String,
    version: u64,
    block_count: usize,
}

#[derive(Serialize)]
struct TreeResponse {
    session: String,
    version: u64,
    tree: ClusterTree,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterRequest {
    node: NodeId,
    k: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MergeRequest {
    node: NodeId,
}

#[derive(Serialize)]
struct ProjectionPoint {
    row: usize,
    block: BlockIndex,
    x: f64,
    y: f64,
    leaf: NodeId,
}

#[derive(Serialize)]
struct ProjectionResponse {
    session: String,
    version: u64,
    perplexity: f64,
    seed: u64,
    points: Vec<ProjectionPoint>,
}

#[derive(Serialize)]
struct BlockSummary {
    row: usize,
    block: BlockIndex,
    mean: f64,
    entropy: f64,
}

#[derive(Serialize)]
struct BlocksResponse {
    session: String,
    version: u64,
    node: NodeId,
    blocks: Vec<BlockSummary>,
}

impl Session {
    fn info(&self) -> SessionInfo {
        SessionInfo {
            id: self.id.clone(),
            version: self.version,
            volume: self.volume_path.clone(),
            idlt_file: self.idlt_path.clone(),
            dims: self.dims.0,
            block_grid: self.spec.grid_dims(self.dims),
            block_count: self.table.len(),
            content: self.spec.content,
            pad: self.spec.pad,
            latent_len: self.table.row_len(),
            model_hash: self.model_hash.clone(),
            tree: self.tree.clone(),
        }
    }

    fn tree_response(&self) -> TreeResponse {
        TreeResponse {
            session: self.id.clone(),
            version: self.version,
            tree: self.tree.clone(),
        }
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

fn query_value<T: std::str::FromStr>(
    q: &HashMap<String, String>,
    key: &str,
) -> ApiResult<Option<T>> {
    q.get(key)
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| ApiError::bad_request(format!("bad value for {key}: {s:?}")))
        })
        .transpose()
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn build_session(state: &AppState, id: String, req: CreateSession) -> ApiResult<Session> {
    let idlt = state.resolve(&req.idlt_file)?;
    let volume_path = state.resolve(&req.volume)?;
    let model_path = match (&req.model, &state.default_model) {
        (Some(m), _) => state.resolve(m)?,
        (None, Some(m)) => m.clone(),
        (None, None) => {
            return Err(ApiError::bad_request(
                "no model given and the server has no default model",
            ))
        }
    };
    let file = CompressedVolume::read(&idlt)?;
    let model = Model::load(&model_path)?;
    let latents = decompress_latents(&file, &model)?;
    let header = &file.header;
    let dtype = req
        .dtype
        .as_deref()
        .map(Dtype::parse)
        .transpose()?
        .unwrap_or_default();
    let original = VolumeSource {
        path: volume_path,
        dims: header.dims.0,
        dtype,
        sentinel: req.sentinel,
    }
    .load()?;
    let recon = decode_latents(&latents, header, &model)?;
    let table = LatentTable::from_latents(
        &latents,
        header.model_hash,
        format!("from {}", req.idlt_file),
    )?;
    let spec = header.spec;
    let blocks = partition(
        &original,
        &ImportanceMap::constant(original.dims, 0.0),
        &spec,
    )?;
    let summaries = blocks
        .iter()
        .map(|b| {
            let c = b.content_values(&spec);
            (
                c.iter().sum::<f64>() / c.len().max(1) as f64,
                block_entropy(b, &spec, ENTROPY_BINS),
            )
        })
        .collect();
    let mut owner = vec![0usize; header.dims.len()];
    for (row, &index) in table.block_indices.iter().enumerate() {
        let (lo, ext) = spec.content_box(header.dims, index);
        for k in lo[2]..lo[2] + ext[2] {
            for j in lo[1]..lo[1] + ext[1] {
                for i in lo[0]..lo[0] + ext[0] {
                    owner[header.dims.index(i, j, k)] = row;
                }
            }
        }
    }
    Ok(Session {
        id,
        volume_path: req.volume,
        idlt_path: req.idlt_file,
        spec,
        dims: header.dims,
        model_hash: hex(&header.model_hash),
        tree: ClusterTree::new(table.len())?,
        table,
        summaries,
        value_range: (header.normalization.vmin, header.normalization.vmax),
        recon,
        owner,
        version: 0,
        projections: HashMap::new(),
    })
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<SessionSummary>>> {
    let map = state.sessions.read().expect("session map lock");
    Ok(Json(
        map.values()
            .map(|s| {
                let s = s.read().expect("session lock");
                SessionSummary {
                    id: s.id.clone(),
                    version: s.version,
                    block_count: s.table.len(),
                }
            })
            .collect(),
    ))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<SessionInfo>)> {
    let req: CreateSession = parse_json(&body)?;
    let id = format!("s{}", state.counter.fetch_add(1, Ordering::SeqCst) + 1);
    let st = state.clone();
    let session = blocking(move || build_session(&st, id, req)).await?;
    let info = session.info();
    state
        .sessions
        .write()
        .expect("session map lock")
        .insert(info.id.clone(), Arc::new(RwLock::new(session)));
    Ok((StatusCode::CREATED, Json(info)))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<SessionInfo>> {
    let s = state.session(&id)?;
    let info = s.read().expect("session lock").info();
    Ok(Json(info))
}

async fn delete_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<StatusCode> {
    match state
        .sessions
        .write()
        .expect("session map lock")
        .remove(&id)
    {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(format!("session {id:?} not found"))),
    }
}

async fn get_tree(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<TreeResponse>> {
    let s = state.session(&id)?;
    let r = s.read().expect("session lock").tree_response();
    Ok(Json(r))
}

async fn cluster(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<TreeResponse>> {
    let req: ClusterRequest = parse_json(&body)?;
    let s = state.session(&id)?;
    blocking(move || {
        let mut guard = s.write().expect("session lock");
        let sess = &mut *guard;
        let members = sess.tree.node(req.node)?.members.len();
        if req.k < 2 || req.k > members {
            return Err(ApiError::bad_request(format!(
                "k must be between 2 and the node's {members} members, got {}",
                req.k
            )));
        }
        sess.tree
            .split_node(&sess.table, req.node, req.k, req.seed)?;
        sess.version += 1;
        Ok(Json(sess.tree_response()))
    })
    .await
}

async fn merge(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<TreeResponse>> {
    let req: MergeRequest = parse_json(&body)?;
    let s = state.session(&id)?;
    let mut sess = s.write().expect("session lock");
    sess.tree.merge_node(req.node)?;
    sess.version += 1;
    Ok(Json(sess.tree_response()))
}

async fn projection(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<ProjectionResponse>> {
    let s = state.session(&id)?;
    let seed: u64 = query_value(&q, "seed")?.unwrap_or(0);
    let perplexity: Option<f64> = query_value(&q, "perplexity")?;
    blocking(move || {
        let mut guard = s.write().expect("session lock");
        let sess = &mut *guard;
        let n = sess.table.len() as f64;
        let perplexity = perplexity.unwrap_or_else(|| (n / 4.0).clamp(1.0, 30.0).min(n - 1.0));
        let key = (perplexity.to_bits(), seed);
        if !sess.projections.contains_key(&key) {
            let e = project_2d(&sess.table, &TsneConfig::new(perplexity, seed))?;
            sess.projections.insert(key, e);
        }
        let e = &sess.projections[&key];
        let leaves = sess.tree.leaf_labels();
        Ok(Json(ProjectionResponse {
            session: sess.id.clone(),
            version: sess.version,
            perplexity,
            seed,
            points: e
                .points
                .iter()
                .enumerate()
                .map(|(row, p)| ProjectionPoint {
                    row,
                    block: sess.table.block_indices[row],
                    x: p[0],
                    y: p[1],
                    leaf: leaves[row],
                })
                .collect(),
        }))
    })
    .await
}

async fn cluster_blocks(
    State(state): State<Arc<AppState>>,
    UrlPath((id, node)): UrlPath<(String, String)>,
) -> ApiResult<Json<BlocksResponse>> {
    let node: NodeId = node
        .parse()
        .map_err(|_| ApiError::not_found(format!("node {node:?} not found")))?;
    let s = state.session(&id)?;
    let sess = s.read().expect("session lock");
    let members = &sess.tree.node(node)?.members;
    Ok(Json(BlocksResponse {
        session: sess.id.clone(),
        version: sess.version,
        node,
        blocks: members
            .iter()
            .map(|&row| BlockSummary {
                row,
                block: sess.table.block_indices[row],
                mean: sess.summaries[row].0,
                entropy: sess.summaries[row].1,
            })
            .collect(),
    }))
}

async fn render(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let s = state.session(&id)?;
    let node: NodeId = query_value(&q, "node")?.unwrap_or(0);
    let mode = q.get("mode").cloned().unwrap_or_else(|| "slice".into());
    let axis = Axis::parse(q.get("axis").map_or("z", String::as_str))?;
    let index: Option<usize> = query_value(&q, "index")?;
    let isovalue: Option<f64> = query_value(&q, "isovalue")?;
    let png = blocking(move || {
        let sess = s.read().expect("session lock");
        let members = &sess.tree.node(node)?.members;
        let mut in_node = vec![false; sess.table.len()];
        members.iter().for_each(|&m| in_node[m] = true);
        let include: Vec<bool> = sess.owner.iter().map(|&r| in_node[r]).collect();
        let depth = sess.dims.0[axis as usize];
        let img = match mode.as_str() {
            "slice" => slice_image(
                &sess.recon,
                Some(&include),
                axis,
                index.unwrap_or(depth / 2),
                sess.value_range,
            )?,
            "iso" => {
                let iso =
                    isovalue.ok_or_else(|| ApiError::bad_request("iso mode needs an isovalue"))?;
                contour_image(&sess.recon, Some(&include), axis, index, iso)?
            }
            other => {
                return Err(ApiError::bad_request(format!(
                    "unknown render mode {other:?}"
                )))
            }
        };
        Ok(png_bytes(&img)?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn openapi() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/yaml")], OPENAPI)
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/openapi.yaml", get(openapi))
        .route("/api/sessions", get(list_sessions).post(create_session))
        .route(
            "/api/sessions/{id}",
            get(get_session).delete(delete_session),
        )
        .route("/api/sessions/{id}/tree", get(get_tree))
        .route("/api/sessions/{id}/cluster", post(cluster))
        .route("/api/sessions/{id}/merge", post(merge))
        .route("/api/sessions/{id}/projection", get(projection))
        .route(
            "/api/sessions/{id}/clusters/{node}/blocks",
            get(cluster_blocks),
        )
        .route("/api/sessions/{id}/render", get(render))
        .fallback(fallback)
        .with_state(state)
}

/// Serves until interrupted.
pub async fn serve(addr: std::net::SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
