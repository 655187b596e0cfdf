//! Typed HTTP client for the central API.

use std::time::Duration;

use reqwest::{Method, RequestBuilder, StatusCode};
use rollcall_core::reports::AttendanceSummary;
use rollcall_core::sync::{ErrorBody, PushResponse, RosterDelta, SyncBatch, TokenRequest, TokenResponse};
use rollcall_core::{AttendanceEvent, CardState, CardUid, Endpoint, NewStudent, RfidCard, StudentRecord};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::*;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{status}: {} ({})", body.message, body.error)]
    Api { status: u16, body: ErrorBody },
    #[error("request failed: {0}")]
    Network(#[from] reqwest::Error),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Network(_) => None,
        }
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.error),
            ClientError::Network(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct CentralClient {
    http: reqwest::Client,
    base: String,
    token: Option<String>,
}

impl CentralClient {
    pub fn new(base: impl Into<String>) -> Self {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(90))
            .build()
            .expect("http client");
        CentralClient {
            http,
            base: base.into().trim_end_matches('/').to_string(),
            token: None,
        }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    /// A request to `path` with the bearer token attached.
    pub fn request(&self, method: Method, path: &str) -> RequestBuilder {
        let rb = self.http.request(method, format!("{}{}", self.base, path));
        match &self.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    fn endpoint(&self, ep: Endpoint) -> RequestBuilder {
        let method = Method::from_bytes(ep.method().as_bytes()).expect("method");
        self.request(method, ep.path())
    }

    async fn send(rb: RequestBuilder) -> Result<reqwest::Response> {
        let resp = rb.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            error: "unknown".into(),
            message: text,
            high_water: None,
        });
        Err(ClientError::Api {
            status: status.as_u16(),
            body,
        })
    }

    async fn json<T: DeserializeOwned>(rb: RequestBuilder) -> Result<T> {
        Ok(Self::send(rb).await?.json().await?)
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, ep: Endpoint, body: &B) -> Result<T> {
        Self::json(self.endpoint(ep).json(body)).await
    }

    async fn get<Q: Serialize, T: DeserializeOwned>(&self, ep: Endpoint, query: &Q) -> Result<T> {
        Self::json(self.endpoint(ep).query(query)).await
    }

    /// Logs in and keeps the token for later calls.
    pub async fn login(&mut self, username: &str, password: &str) -> Result<LoginResponse> {
        let r: LoginResponse = self
            .post(
                Endpoint::Login,
                &LoginRequest {
                    username: username.into(),
                    password: password.into(),
                },
            )
            .await?;
        self.token = Some(r.token.clone());
        Ok(r)
    }

    pub async fn sync_token(&mut self, node_id: &str, secret: &str) -> Result<TokenResponse> {
        let r: TokenResponse = self
            .post(
                Endpoint::IssueSyncToken,
                &TokenRequest {
                    node_id: node_id.into(),
                    secret: secret.into(),
                },
            )
            .await?;
        self.token = Some(r.token.clone());
        Ok(r)
    }

    pub async fn create_user(&self, req: &CreateUserRequest) -> Result<UserView> {
        self.post(Endpoint::CreateUser, req).await
    }

    pub async fn create_student(&self, new: &NewStudent) -> Result<StudentRecord> {
        self.post(Endpoint::CreateStudent, new).await
    }

    pub async fn list_students(&self, q: &StudentsQuery) -> Result<Vec<StudentRecord>> {
        self.get(Endpoint::ListStudents, q).await
    }

    pub async fn list_cards(&self, q: &CardsQuery) -> Result<Vec<RfidCard>> {
        self.get(Endpoint::ListCards, q).await
    }

    pub async fn enroll_card(&self, req: &EnrollCardRequest) -> Result<CardChangeResponse> {
        self.post(Endpoint::EnrollCard, req).await
    }

    pub async fn set_card_state(&self, uid: CardUid, state: CardState) -> Result<CardChangeResponse> {
        let path = Endpoint::SetCardState.path().replace("{uid}", &uid.to_string());
        Self::json(self.request(Method::POST, &path).json(&SetCardStateRequest { state })).await
    }

    pub async fn query_attendance(&self, q: &AttendanceQuery) -> Result<AttendancePage> {
        self.get(Endpoint::QueryAttendance, q).await
    }

    /// Follows pages until the filtered set is exhausted.
    pub async fn query_all(&self, q: &AttendanceQuery) -> Result<Vec<AttendanceEvent>> {
        let mut q = q.clone();
        let mut out = Vec::new();
        loop {
            q.offset = Some(out.len());
            let page = self.query_attendance(&q).await?;
            let n = page.items.len();
            out.extend(page.items);
            if n == 0 || out.len() as u64 >= page.total {
                return Ok(out);
            }
        }
    }

    pub async fn manual_mark(&self, req: &ManualMarkRequest) -> Result<AttendanceEvent> {
        self.post(Endpoint::ManualMark, req).await
    }

    pub async fn justify(&self, req: &JustifyRequest) -> Result<AttendanceEvent> {
        self.post(Endpoint::Justify, req).await
    }

    pub async fn live_feed(&self, q: &LiveQuery) -> Result<LiveFeed> {
        self.get(Endpoint::LiveFeed, q).await
    }

    pub async fn summary(&self, q: &SummaryQuery) -> Result<AttendanceSummary> {
        self.get(Endpoint::ReportSummary, q).await
    }

    pub async fn export_csv(&self, q: &AttendanceQuery) -> Result<String> {
        Ok(Self::send(self.endpoint(Endpoint::ReportExport).query(q)).await?.text().await?)
    }

    pub async fn chronic(&self, q: &ChronicQuery) -> Result<ChronicReport> {
        self.get(Endpoint::ReportChronic, q).await
    }

    pub async fn audit_log(&self, q: &AuditQuery) -> Result<AuditPage> {
        self.get(Endpoint::AuditLog, q).await
    }

    pub async fn push_events(&self, batch: &SyncBatch) -> Result<PushResponse> {
        self.post(Endpoint::SyncEvents, batch).await
    }

    pub async fn pull_roster(&self, since: u64) -> Result<RosterDelta> {
        self.get(Endpoint::SyncRoster, &RosterQuery { since }).await
    }
}

/// True for the status a call without a usable token gets.
pub fn is_unauthorized(e: &ClientError) -> bool {
    e.status() == Some(StatusCode::UNAUTHORIZED.as_u16())
}
