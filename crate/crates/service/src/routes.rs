//! HTTP endpoints. Masks travel as base64 run-length JSON envelopes.

use std::io::Cursor;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mois_core::click::{Click, ClickLabel};
use mois_core::io::{volume_from_parts, Sidecar};
use mois_core::rle::RleWire;
use mois_core::volume::{Extents, Mask};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::state::{AppState, ExemplarRow, SessionHandle};

/// Header carrying the JSON sidecar of a volume upload; the body is the raw payload.
pub const SIDECAR_HEADER: &str = "x-mois-sidecar";

type Shared = Arc<AppState>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Shared) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/volumes", post(upload_volume))
        .route("/volumes/{id}", get(volume_info))
        .route("/volumes/{id}/slices/{d}", get(slice_image))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/lesions", post(add_lesion))
        .route("/sessions/{id}/lesions/{lid}/clicks", post(click))
        .route("/sessions/{id}/lesions/{lid}/propagate", post(propagate))
        .route("/sessions/{id}/propagate-exemplars", post(propagate_exemplars))
        .route("/sessions/{id}/exemplars", get(exemplars))
        .route("/sessions/{id}/mask", get(mask))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn health(State(s): State<Shared>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model_id": s.model_id(), "sessions": s.session_count() }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeInfo {
    pub volume_id: String,
    /// `[h, w, d]`
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
}

fn info(id: String, e: Extents, spacing: [f64; 3]) -> VolumeInfo {
    VolumeInfo {
        volume_id: id,
        shape: [e.h, e.w, e.d],
        spacing,
    }
}

async fn upload_volume(State(s): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult<(StatusCode, Json<VolumeInfo>)> {
    let raw = headers
        .get(SIDECAR_HEADER)
        .ok_or_else(|| ApiError::Invalid(format!("missing {SIDECAR_HEADER} header")))?;
    let sidecar: Sidecar = serde_json::from_slice(raw.as_bytes()).map_err(|e| ApiError::Invalid(format!("sidecar: {e}")))?;
    let volume = volume_from_parts(&sidecar, &body)?;
    let (e, sp) = (volume.extents, volume.spacing.0);
    let id = s.add_volume(volume)?;
    Ok((StatusCode::CREATED, Json(info(id, e, sp))))
}

async fn volume_info(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<VolumeInfo>> {
    let v = s.volume(&id)?;
    Ok(Json(info(id, v.volume.extents, v.volume.spacing.0)))
}

async fn slice_image(State(s): State<Shared>, Path((id, d)): Path<(String, usize)>) -> ApiResult<Response> {
    let v = s.volume(&id)?;
    let e = v.volume.extents;
    if d >= e.d {
        return Err(ApiError::Invalid(format!("slice {d} outside depth {}", e.d)));
    }
    let plane = v.display[d * e.slice_len()..(d + 1) * e.slice_len()].to_vec();
    let img = image::GrayImage::from_raw(e.w as u32, e.h as u32, plane).ok_or_else(|| ApiError::Internal("slice buffer".into()))?;
    let mut png = Cursor::new(Vec::new());
    img.write_to(&mut png, image::ImageFormat::Png)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png.into_inner()).into_response())
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSession {
    pub volume_id: String,
    #[serde(default)]
    pub model_id: Option<String>,
}

async fn create_session(State(s): State<Shared>, Json(req): Json<CreateSession>) -> ApiResult<(StatusCode, Json<SessionHandle>)> {
    let model_id = req.model_id.unwrap_or_else(|| s.model_id().to_string());
    let state = Arc::clone(&s);
    let handle = tokio::task::spawn_blocking(move || state.create_session(&req.volume_id, &model_id))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn get_session(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<SessionHandle>> {
    Ok(Json(s.session(&id)?.handle()))
}

async fn delete_session(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    s.delete_session(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

/// Optional `?revision=` echo on mutations.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct RevisionQuery {
    pub revision: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionCreated {
    pub lesion_id: usize,
    pub revision: u64,
}

async fn add_lesion(State(s): State<Shared>, Path(id): Path<String>, Query(q): Query<RevisionQuery>) -> ApiResult<(StatusCode, Json<LesionCreated>)> {
    let out = s
        .mutate(&id, q.revision, |sess| {
            let lesion_id = sess.add_lesion();
            Ok(LesionCreated {
                lesion_id,
                revision: sess.revision(),
            })
        })
        .await?;
    Ok((StatusCode::CREATED, Json(out)))
}

#[derive(Debug, Clone, Deserialize)]
pub struct ClickRequest {
    pub x: usize,
    pub y: usize,
    pub slice: usize,
    /// 1 = positive (foreground), 0 = negative.
    pub label: ClickLabel,
    #[serde(default)]
    pub revision: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickResponse {
    pub lesion_id: usize,
    pub slice: usize,
    /// Single-slice mask with extents `h × w × 1`.
    pub mask: RleWire,
    pub empty_after_positive: bool,
    pub revision: u64,
}

async fn click(State(s): State<Shared>, Path((id, lid)): Path<(String, usize)>, Json(req): Json<ClickRequest>) -> ApiResult<Json<ClickResponse>> {
    let c = Click {
        x: req.x,
        y: req.y,
        slice: req.slice,
        label: req.label,
    };
    let out = s
        .mutate(&id, req.revision, move |sess| {
            let e = sess.volume().extents;
            let r = sess.apply_click(lid, c)?;
            let plane = Mask {
                extents: Extents::new(e.h, e.w, 1),
                data: r.mask,
            };
            Ok(ClickResponse {
                lesion_id: r.lesion,
                slice: r.slice,
                mask: RleWire::from_mask(&plane, r.revision),
                empty_after_positive: r.empty_after_positive,
                revision: r.revision,
            })
        })
        .await?;
    Ok(Json(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResponse {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lesion_id: Option<usize>,
    pub mask: RleWire,
}

async fn propagate(State(s): State<Shared>, Path((id, lid)): Path<(String, usize)>, Query(q): Query<RevisionQuery>) -> ApiResult<Json<MaskResponse>> {
    let out = s
        .mutate(&id, q.revision, move |sess| {
            let mv = sess.propagate_memory(lid)?;
            Ok(MaskResponse {
                kind: "instance".into(),
                lesion_id: Some(lid),
                mask: RleWire::from_mask(&mv.mask, mv.revision),
            })
        })
        .await?;
    Ok(Json(out))
}

async fn propagate_exemplars(State(s): State<Shared>, Path(id): Path<String>, Query(q): Query<RevisionQuery>) -> ApiResult<Json<MaskResponse>> {
    let out = s
        .mutate(&id, q.revision, |sess| {
            let mv = sess.propagate_exemplars()?;
            Ok(MaskResponse {
                kind: "semantic".into(),
                lesion_id: None,
                mask: RleWire::from_mask(&mv.mask, mv.revision),
            })
        })
        .await?;
    Ok(Json(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSummary {
    pub revision: u64,
    pub capacity: usize,
    pub entries: Vec<ExemplarRow>,
}

async fn exemplars(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<ExemplarSummary>> {
    let v = s.session(&id)?.view();
    Ok(Json(ExemplarSummary {
        revision: v.revision,
        capacity: v.exemplar_capacity,
        entries: v.exemplars.clone(),
    }))
}

#[derive(Debug, Clone, Deserialize)]
pub struct MaskQuery {
    pub kind: String,
    /// Restricts `kind=instance` to one lesion.
    #[serde(default)]
    pub lesion: Option<usize>,
}

async fn mask(State(s): State<Shared>, Path(id): Path<String>, Query(q): Query<MaskQuery>) -> ApiResult<Json<MaskResponse>> {
    let v = s.session(&id)?.view();
    let m = match (q.kind.as_str(), q.lesion) {
        ("instance", Some(l)) => v.lesions.get(l).ok_or_else(|| ApiError::NotFound(format!("lesion {l}")))?,
        ("instance", None) => &v.instance,
        ("semantic", None) => &v.semantic,
        ("final", None) => &v.final_mask,
        (k @ ("semantic" | "final"), Some(_)) => {
            return Err(ApiError::Invalid(format!("lesion filter only applies to instance masks, not {k}")))
        }
        (k, _) => return Err(ApiError::Invalid(format!("unknown mask kind {k:?}; use instance, semantic or final"))),
    };
    Ok(Json(MaskResponse {
        kind: q.kind.clone(),
        lesion_id: q.lesion,
        mask: RleWire::from_mask(m, v.revision),
    }))
}
