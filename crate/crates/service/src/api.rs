//! HTTP routes. Every handler is a pure function of the request, the loaded
//! state and a seed derived from the request body, so repeating a request
//! repeats the response byte for byte.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use closet_core::recommendation::{recommend_detailed, RecommendError, Setting};
use closet_core::retrieval::{feedback_tiered, similar_tiered, RetrievalError, Tier, TieredResults, RANKING_DEPTH};
use closet_core::transformer::TransformerError;
use closet_core::{Category, Item};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::state::AppState;
use crate::tryon::{compose, encode_png};

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/items", get(list_items))
        .route("/items/{id}/image", get(item_image))
        .route("/persons", get(list_persons))
        .route("/persons/{id}/image", get(person_image))
        .route("/feedback/keys", get(feedback_keys))
        .route("/search/similar", post(search_similar))
        .route("/search/feedback", post(search_feedback))
        .route("/recommend", post(recommend))
        .route("/tryon", post(tryon))
        .route("/tryon/image", get(tryon_image))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(status = %self.status, error = %self.message, "request failed");
        }
        (self.status, Json(ErrorBody { error: &self.message })).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        let status = match &e {
            RetrievalError::UnknownItem(_) => StatusCode::NOT_FOUND,
            RetrievalError::NTooSmall(_) | RetrievalError::DimensionMismatch { .. } => StatusCode::BAD_REQUEST,
            RetrievalError::Combiner(closet_core::combiner::CombinerError::DimensionMismatch { .. }) => StatusCode::BAD_REQUEST,
            RetrievalError::InsufficientPopulation { .. } | RetrievalError::EmptyRanking => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<RecommendError> for ApiError {
    fn from(e: RecommendError) -> Self {
        match e {
            RecommendError::UnknownItem(_) => Self::not_found(e.to_string()),
            RecommendError::EmptyCategory(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            RecommendError::Transformer(
                TransformerError::RefInTargets(_) | TransformerError::NoTargets | TransformerError::ShapeMismatch(_),
            ) => Self::bad_request(e.to_string()),
            RecommendError::Retrieval(r) => r.into(),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

/// Seed for a request: the service seed mixed with a hash of the route and
/// the canonical (re-serialized) request body.
pub fn request_seed<T: Serialize>(base: u64, route: &str, req: &T) -> u64 {
    let mut h = Sha256::new();
    h.update(route.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(req).expect("request types serialize"));
    h.update(base.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn item_or_404<'a>(state: &'a AppState, id: &str) -> Result<&'a Item, ApiError> {
    state.catalog.get(id).ok_or_else(|| ApiError::not_found(format!("unknown item {id:?}")))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    items: usize,
    index: String,
}

async fn health(State(s): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok",
        items: s.catalog.len(),
        index: s.index.kind().to_string(),
    })
}

#[derive(Debug, Serialize)]
pub struct ItemView {
    pub id: String,
    pub category: Category,
    pub image_ref: String,
}

impl From<&Item> for ItemView {
    fn from(it: &Item) -> Self {
        Self {
            id: it.id.clone(),
            category: it.category,
            image_ref: it.image_ref.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct ItemsQuery {
    pub category: Option<String>,
    /// 0-indexed.
    pub page: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct ItemsPage {
    pub category: Option<Category>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub pages: usize,
    pub items: Vec<ItemView>,
}

async fn list_items(State(s): State<Shared>, q: Result<Query<ItemsQuery>, QueryRejection>) -> Result<Json<ItemsPage>, ApiError> {
    let Query(q) = q?;
    let category = match q.category.as_deref().filter(|c| !c.is_empty()) {
        Some(c) => Some(c.parse::<Category>().map_err(|e| ApiError::bad_request(e.to_string()))?),
        None => None,
    };
    let page = q.page.unwrap_or(0);
    let size = s.page_size;
    // Catalog file order throughout.
    let matching: Vec<&Item> = s
        .catalog
        .items()
        .iter()
        .filter(|it| category.is_none_or(|c| it.category == c))
        .collect();
    let total = matching.len();
    let items = matching
        .into_iter()
        .skip(page.saturating_mul(size))
        .take(size)
        .map(ItemView::from)
        .collect();
    Ok(Json(ItemsPage {
        category,
        page,
        page_size: size,
        total,
        pages: total.div_ceil(size),
        items,
    }))
}

async fn item_image(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let item = item_or_404(&s, &id)?;
    Ok(png(encode_png(&s.images.garment(item))))
}

#[derive(Serialize)]
struct PersonView {
    id: String,
    image_ref: String,
}

#[derive(Serialize)]
struct Persons {
    persons: Vec<PersonView>,
}

async fn list_persons(State(s): State<Shared>) -> Json<Persons> {
    Json(Persons {
        persons: s
            .persons
            .ids()
            .map(|id| PersonView {
                id: id.to_owned(),
                image_ref: format!("/persons/{id}/image"),
            })
            .collect(),
    })
}

async fn person_image(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let img = s.persons.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown person {id:?}")))?;
    Ok(png(encode_png(img)))
}

#[derive(Serialize)]
struct FeedbackKeys {
    keys: Vec<String>,
}

async fn feedback_keys(State(s): State<Shared>) -> Json<FeedbackKeys> {
    Json(FeedbackKeys {
        keys: s.texts.keys().cloned().collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct EntryView {
    pub id: String,
    pub category: Category,
    pub image_ref: String,
    pub tier: Tier,
    /// 1-indexed rank in the exact ranking the entry came from.
    pub rank: usize,
}

#[derive(Debug, Serialize)]
pub struct SearchResponse {
    pub ref_id: String,
    pub n: usize,
    pub seed: u64,
    pub entries: Vec<EntryView>,
}

fn search_response(s: &AppState, ref_id: String, seed: u64, res: TieredResults) -> SearchResponse {
    let entries = res
        .entries
        .into_iter()
        .map(|e| {
            let it = s.catalog.get(&e.id).expect("results come from the catalog");
            EntryView {
                category: it.category,
                image_ref: it.image_ref.clone(),
                id: e.id,
                tier: e.tier,
                rank: e.rank,
            }
        })
        .collect();
    SearchResponse {
        ref_id,
        n: res.n,
        seed,
        entries,
    }
}

fn check_n(s: &AppState, n: Option<usize>) -> Result<usize, ApiError> {
    let n = n.unwrap_or(s.page_size);
    if n > RANKING_DEPTH {
        return Err(ApiError::bad_request(format!("n = {n} exceeds {RANKING_DEPTH}")));
    }
    Ok(n)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarRequest {
    pub ref_id: String,
    pub n: Option<usize>,
}

async fn search_similar(
    State(s): State<Shared>,
    req: Result<Json<SimilarRequest>, JsonRejection>,
) -> Result<Json<SearchResponse>, ApiError> {
    let Json(req) = req?;
    let n = check_n(&s, req.n)?;
    let seed = request_seed(s.seed, "/search/similar", &req);
    let res = similar_tiered(&s.catalog, &s.index, &req.ref_id, n, seed)?;
    Ok(Json(search_response(&s, req.ref_id, seed, res)))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub ref_id: String,
    pub text_embedding: Option<Vec<f32>>,
    pub text_key: Option<String>,
    pub n: Option<usize>,
}

async fn search_feedback(
    State(s): State<Shared>,
    req: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<Json<SearchResponse>, ApiError> {
    let Json(req) = req?;
    let n = check_n(&s, req.n)?;
    let text: &[f32] = match (&req.text_embedding, &req.text_key) {
        (Some(v), None) => v,
        (None, Some(k)) => s
            .texts
            .get(k)
            .ok_or_else(|| ApiError::not_found(format!("unknown text key {k:?}")))?,
        _ => return Err(ApiError::bad_request("give exactly one of text_embedding and text_key")),
    };
    let seed = request_seed(s.seed, "/search/feedback", &req);
    let res = feedback_tiered(&s.catalog, &s.index, &req.ref_id, text, n, &s.combiner, seed)?;
    Ok(Json(search_response(&s, req.ref_id, seed, res)))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendRequest {
    pub ref_id: String,
    pub targets: Vec<Category>,
    #[serde(default)]
    pub setting: Setting,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
pub struct ScoredItem {
    pub id: String,
    pub category: Category,
    pub image_ref: String,
    pub score: f32,
}

#[derive(Debug, Serialize)]
pub struct SlotView {
    pub category: Category,
    pub item: ScoredItem,
    pub alternates: Vec<ScoredItem>,
}

#[derive(Debug, Serialize)]
pub struct RecommendResponse {
    pub ref_id: String,
    pub setting: Setting,
    pub seed: u64,
    pub outfit: BTreeMap<Category, String>,
    pub slots: Vec<SlotView>,
}

async fn recommend(
    State(s): State<Shared>,
    req: Result<Json<RecommendRequest>, JsonRejection>,
) -> Result<Json<RecommendResponse>, ApiError> {
    let Json(req) = req?;
    let seed = req.seed.unwrap_or_else(|| request_seed(s.seed, "/recommend", &req));
    let rec = recommend_detailed(
        &s.catalog,
        &s.index,
        &s.transformer,
        &req.ref_id,
        &req.targets,
        req.setting,
        seed,
        s.alternates,
    )?;
    let scored = |id: String, score: f32| {
        let it = s.catalog.get(&id).expect("recommendations come from the catalog");
        ScoredItem {
            category: it.category,
            image_ref: it.image_ref.clone(),
            id,
            score,
        }
    };
    let outfit = rec.outfit();
    let slots = rec
        .slots
        .into_iter()
        .map(|slot| SlotView {
            category: slot.category,
            item: scored(slot.item.id, slot.item.score),
            alternates: slot.alternates.into_iter().map(|a| scored(a.id, a.score)).collect(),
        })
        .collect();
    Ok(Json(RecommendResponse {
        ref_id: req.ref_id,
        setting: req.setting,
        seed,
        outfit,
        slots,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TryOnRequest {
    pub person_id: String,
    pub garment_id: String,
}

#[derive(Debug, Serialize)]
pub struct TryOnResponse {
    pub stub: bool,
    pub person_id: String,
    pub garment_id: String,
    /// GET this path for the composite PNG.
    pub image_ref: String,
}

fn check_tryon(s: &AppState, req: &TryOnRequest) -> Result<(), ApiError> {
    if s.persons.get(&req.person_id).is_none() {
        return Err(ApiError::not_found(format!("unknown person {:?}", req.person_id)));
    }
    item_or_404(s, &req.garment_id).map(|_| ())
}

async fn tryon(State(s): State<Shared>, req: Result<Json<TryOnRequest>, JsonRejection>) -> Result<Json<TryOnResponse>, ApiError> {
    let Json(req) = req?;
    check_tryon(&s, &req)?;
    let query = serde_urlencoded::to_string(&req).expect("string fields encode");
    Ok(Json(TryOnResponse {
        stub: true,
        image_ref: format!("/tryon/image?{query}"),
        person_id: req.person_id,
        garment_id: req.garment_id,
    }))
}

async fn tryon_image(State(s): State<Shared>, q: Result<Query<TryOnRequest>, QueryRejection>) -> Result<Response, ApiError> {
    let Query(req) = q?;
    check_tryon(&s, &req)?;
    let person = s.persons.get(&req.person_id).expect("checked");
    let garment = s.images.garment(item_or_404(&s, &req.garment_id)?);
    Ok(png(encode_png(&compose(person, &garment))))
}
