//! HTTP binding of [`CentralService`]. Routes come from [`Endpoint::ALL`];
//! the access check runs as a route layer, before any body is parsed.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, Path, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, MethodRouter};
use axum::{Extension, Json, Router};
use rollcall_core::sync::{ErrorBody, SyncBatch, TokenRequest};
use rollcall_core::{CardUid, Endpoint, NewStudent};
use serde::de::DeserializeOwned;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::api::*;
use crate::auth::Principal;
use crate::service::{CentralService, ServiceError};

type Svc = Arc<CentralService>;

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let e = self.0;
        let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = ErrorBody {
            error: e.code().to_string(),
            message: e.to_string(),
            high_water: match e {
                ServiceError::SequenceGap { high_water } => Some(high_water),
                _ => None,
            },
        };
        let mut resp = (status, Json(body)).into_response();
        if status == StatusCode::UNAUTHORIZED {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        resp
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON body whose rejections use the API error shape.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body(v))
            .map_err(|e: JsonRejection| ApiError(ServiceError::BadRequest(e.body_text())))
    }
}

/// Query string whose rejections use the API error shape.
pub struct Params<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for Params<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut axum::http::request::Parts, state: &S) -> Result<Self, ApiError> {
        axum::extract::Query::<T>::from_request_parts(parts, state)
            .await
            .map(|q| Params(q.0))
            .map_err(|e: QueryRejection| ApiError(ServiceError::BadRequest(e.body_text())))
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

async fn guard(State((svc, ep)): State<(Svc, Endpoint)>, mut req: Request, next: Next) -> Response {
    match svc.authorize(ep, bearer(req.headers())) {
        Ok(Some(p)) => {
            req.extensions_mut().insert(p);
            next.run(req).await
        }
        Ok(None) => next.run(req).await,
        Err(e) => ApiError(e).into_response(),
    }
}

/// Runs a synchronous service call off the async workers; some calls hash
/// passwords or wait for the disk.
async fn blocking<T: Send + 'static>(
    svc: &Svc,
    f: impl FnOnce(&CentralService) -> Result<T, ServiceError> + Send + 'static,
) -> ApiResult<T> {
    let svc = svc.clone();
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError(ServiceError::Storage(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn login(State(svc): State<Svc>, Body(req): Body<LoginRequest>) -> ApiResult<Json<LoginResponse>> {
    blocking(&svc, move |s| s.login(&req)).await.map(Json)
}

async fn sync_token(
    State(svc): State<Svc>,
    Body(req): Body<TokenRequest>,
) -> ApiResult<Json<rollcall_core::sync::TokenResponse>> {
    blocking(&svc, move |s| s.issue_sync_token(&req)).await.map(Json)
}

async fn create_user(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Body(req): Body<CreateUserRequest>,
) -> ApiResult<(StatusCode, Json<UserView>)> {
    blocking(&svc, move |s| s.create_user(&p, req))
        .await
        .map(|u| (StatusCode::CREATED, Json(u)))
}

async fn list_students(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Params(q): Params<StudentsQuery>,
) -> ApiResult<Json<Vec<rollcall_core::StudentRecord>>> {
    blocking(&svc, move |s| s.list_students(&p, &q)).await.map(Json)
}

async fn create_student(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Body(req): Body<NewStudent>,
) -> ApiResult<(StatusCode, Json<rollcall_core::StudentRecord>)> {
    blocking(&svc, move |s| s.create_student(&p, req))
        .await
        .map(|r| (StatusCode::CREATED, Json(r)))
}

async fn list_cards(State(svc): State<Svc>, Params(q): Params<CardsQuery>) -> ApiResult<Json<Vec<rollcall_core::RfidCard>>> {
    Ok(Json(svc.list_cards(&q)))
}

async fn enroll_card(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Body(req): Body<EnrollCardRequest>,
) -> ApiResult<Json<CardChangeResponse>> {
    blocking(&svc, move |s| s.enroll_card(&p, &req)).await.map(Json)
}

async fn set_card_state(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Path(uid): Path<String>,
    Body(req): Body<SetCardStateRequest>,
) -> ApiResult<Json<CardChangeResponse>> {
    let uid: CardUid = uid.parse().map_err(|e: rollcall_core::DomainError| ApiError(e.into()))?;
    blocking(&svc, move |s| s.set_card_state(&p, uid, req.state)).await.map(Json)
}

async fn query_attendance(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Params(q): Params<AttendanceQuery>,
) -> ApiResult<Json<AttendancePage>> {
    blocking(&svc, move |s| s.query_attendance(&p, &q)).await.map(Json)
}

async fn manual_mark(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Body(req): Body<ManualMarkRequest>,
) -> ApiResult<(StatusCode, Json<rollcall_core::AttendanceEvent>)> {
    blocking(&svc, move |s| s.manual_mark(&p, &req))
        .await
        .map(|e| (StatusCode::CREATED, Json(e)))
}

async fn justify(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Body(req): Body<JustifyRequest>,
) -> ApiResult<(StatusCode, Json<rollcall_core::AttendanceEvent>)> {
    blocking(&svc, move |s| s.justify(&p, &req))
        .await
        .map(|e| (StatusCode::CREATED, Json(e)))
}

async fn live_feed(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Params(q): Params<LiveQuery>,
) -> ApiResult<Json<LiveFeed>> {
    svc.live_feed(&p, &q).await.map(Json).map_err(ApiError)
}

async fn report_summary(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Params(q): Params<SummaryQuery>,
) -> ApiResult<Json<rollcall_core::reports::AttendanceSummary>> {
    blocking(&svc, move |s| s.summary(&p, &q)).await.map(Json)
}

async fn report_export(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Params(q): Params<AttendanceQuery>,
) -> ApiResult<Response> {
    let csv = blocking(&svc, move |s| s.export_csv(&p, &q)).await?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

async fn report_chronic(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Params(q): Params<ChronicQuery>,
) -> ApiResult<Json<ChronicReport>> {
    blocking(&svc, move |s| s.chronic(&p, &q)).await.map(Json)
}

async fn audit_log(State(svc): State<Svc>, Params(q): Params<AuditQuery>) -> ApiResult<Json<AuditPage>> {
    blocking(&svc, move |s| s.audit_log(&q)).await.map(Json)
}

async fn sync_events(
    State(svc): State<Svc>,
    Extension(p): Extension<Principal>,
    Body(batch): Body<SyncBatch>,
) -> ApiResult<Json<rollcall_core::sync::PushResponse>> {
    blocking(&svc, move |s| s.push_events(&p, batch)).await.map(Json)
}

async fn sync_roster(State(svc): State<Svc>, Params(q): Params<RosterQuery>) -> ApiResult<Json<rollcall_core::sync::RosterDelta>> {
    Ok(Json(svc.pull_roster(q.since)))
}

async fn not_found() -> ApiError {
    ApiError(ServiceError::NotFound("no such endpoint".into()))
}

fn handler(ep: Endpoint) -> MethodRouter<Svc> {
    use Endpoint::*;
    match ep {
        Login => post(login),
        IssueSyncToken => post(sync_token),
        CreateUser => post(create_user),
        ListStudents => get(list_students),
        CreateStudent => post(create_student),
        ListCards => get(list_cards),
        EnrollCard => post(enroll_card),
        SetCardState => post(set_card_state),
        QueryAttendance => get(query_attendance),
        ManualMark => post(manual_mark),
        Justify => post(justify),
        LiveFeed => get(live_feed),
        ReportSummary => get(report_summary),
        ReportExport => get(report_export),
        ReportChronic => get(report_chronic),
        AuditLog => get(audit_log),
        SyncEvents => post(sync_events),
        SyncRoster => get(sync_roster),
    }
}

/// `cors_origin` is an exact origin or `*`.
pub fn router(svc: Svc, cors_origin: Option<&str>) -> Router {
    let mut app = Router::new();
    for ep in Endpoint::ALL {
        let guarded = handler(ep).route_layer(middleware::from_fn_with_state((svc.clone(), ep), guard));
        app = app.route(ep.path(), guarded);
    }
    let mut app = app.fallback(not_found).with_state(svc);
    if let Some(origin) = cors_origin {
        let allow = if origin == "*" {
            AllowOrigin::any()
        } else {
            match HeaderValue::from_str(origin) {
                Ok(v) => AllowOrigin::exact(v),
                Err(_) => {
                    tracing::warn!(origin, "ignoring unusable cors origin");
                    return app;
                }
            }
        };
        app = app.layer(
            CorsLayer::new()
                .allow_origin(allow)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE]),
        );
    }
    app
}
