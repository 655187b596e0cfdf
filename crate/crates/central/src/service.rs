//! Central operations, independent of the HTTP transport.
//!
//! Writers take the state lock, validate, append the record to the journal
//! and only then apply it, so what is acknowledged is on disk. Readers share
//! the lock and never see a half-applied record.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use parking_lot::{Mutex, RwLock};
use rollcall_core::clock::Clock;
use rollcall_core::journal::{Journal, JournalError, JournalOptions};
use rollcall_core::rbac::Access;
use rollcall_core::reports::{
    flag_chronic_absenteeism, summarize, write_events_csv, AttendanceSummary, EventRow, Period, ReportError,
    ReportScope, StatusCounts,
};
use rollcall_core::sync::{BatchError, PushResponse, RosterDelta, SyncBatch, TokenRequest, TokenResponse};
use rollcall_core::{
    ActorRef, AttendanceEngine, AttendanceEvent, AttendanceLedger, AuditAction, AuditEntry, CardState, CardUid,
    DomainError, Endpoint, EngineError, IdSource, NewStudent, RfidCard, Role, StudentCode, StudentRecord,
    TimeWindowPolicy,
};
use subtle::ConstantTimeEq;
use thiserror::Error;
use tokio::sync::Notify;

use crate::api::*;
use crate::auth::{LoginThrottle, PasswordHash, Principal, Sessions, TokenError, DEFAULT_ITERATIONS, DEFAULT_TOKEN_TTL};
use crate::config::{CentralConfig, DEFAULT_CHRONIC_THRESHOLD};
use crate::state::{Applied, CentralRecord, CentralState, UserRecord};

pub const DEFAULT_PAGE: usize = 100;
pub const MAX_PAGE: usize = 1000;
pub const DEFAULT_WAIT_MS: u64 = 25_000;
pub const MAX_WAIT_MS: u64 = 60_000;
/// Longest span an attendance query or export may cover.
pub const MAX_RANGE_DAYS: i64 = 366;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("missing or unknown bearer token")]
    Unauthorized,
    #[error("bearer token expired")]
    AuthExpired,
    #[error("wrong username or password")]
    InvalidCredentials,
    #[error("too many failed logins, try again later")]
    RateLimited,
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{message}")]
    Conflict { code: &'static str, message: String },
    #[error("{message}")]
    Unprocessable { code: &'static str, message: String },
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    InvalidRange(String),
    #[error("batch starts after sequence {high_water} + 1")]
    SequenceGap { high_water: u64 },
    #[error("{0}")]
    ChecksumMismatch(String),
    #[error("cursor {0} is no longer available, take a new snapshot")]
    CursorExpired(u64),
    #[error("storage unavailable: {0}")]
    Storage(String),
}

impl ServiceError {
    /// Stable machine-readable code used in error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Unauthorized => "unauthorized",
            ServiceError::AuthExpired => "auth_expired",
            ServiceError::InvalidCredentials => "invalid_credentials",
            ServiceError::RateLimited => "rate_limited",
            ServiceError::Forbidden(_) => "forbidden",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict { code, .. } | ServiceError::Unprocessable { code, .. } => code,
            ServiceError::BadRequest(_) => "invalid_request",
            ServiceError::InvalidRange(_) => "invalid_range",
            ServiceError::SequenceGap { .. } => "sequence_gap",
            ServiceError::ChecksumMismatch(_) => "checksum_mismatch",
            ServiceError::CursorExpired(_) => "cursor_expired",
            ServiceError::Storage(_) => "storage_unavailable",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            ServiceError::Unauthorized | ServiceError::AuthExpired | ServiceError::InvalidCredentials => 401,
            ServiceError::RateLimited => 429,
            ServiceError::Forbidden(_) => 403,
            ServiceError::NotFound(_) => 404,
            ServiceError::Conflict { .. } | ServiceError::SequenceGap { .. } => 409,
            ServiceError::Unprocessable { .. } | ServiceError::ChecksumMismatch(_) => 422,
            ServiceError::BadRequest(_) | ServiceError::InvalidRange(_) => 400,
            ServiceError::CursorExpired(_) => 410,
            ServiceError::Storage(_) => 503,
        }
    }

    fn unprocessable(code: &'static str, message: impl ToString) -> Self {
        ServiceError::Unprocessable {
            code,
            message: message.to_string(),
        }
    }
}

impl From<DomainError> for ServiceError {
    fn from(e: DomainError) -> Self {
        let message = e.to_string();
        match e {
            DomainError::DuplicateUid { .. } => ServiceError::Conflict {
                code: "duplicate_uid",
                message,
            },
            DomainError::CapacityExhausted(_) => ServiceError::Conflict {
                code: "capacity_exhausted",
                message,
            },
            DomainError::UnknownStudent(_) | DomainError::UnknownCard(_) => ServiceError::NotFound(message),
            DomainError::InactiveStudent(_) => ServiceError::unprocessable("inactive_student", message),
            DomainError::Forbidden { .. } => ServiceError::Forbidden(message),
            DomainError::InvalidEvent(_) => ServiceError::unprocessable("invalid_batch", message),
            DomainError::InvalidGradeOrSection
            | DomainError::InvalidYear(_)
            | DomainError::InvalidStudentCode(_)
            | DomainError::InvalidUid(_) => ServiceError::BadRequest(message),
        }
    }
}

impl From<EngineError> for ServiceError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::Forbidden(_) => ServiceError::Forbidden(message),
            EngineError::NoRecord { .. } | EngineError::UnknownStudent(_) => ServiceError::NotFound(message),
            EngineError::NotAbsent(_) => ServiceError::Conflict {
                code: "not_absent",
                message,
            },
            EngineError::FutureDate(_) => ServiceError::unprocessable("future_date", message),
            EngineError::NonSchoolDay(_) => ServiceError::unprocessable("non_school_day", message),
            EngineError::InvalidManualStatus => ServiceError::unprocessable("invalid_status", message),
            EngineError::ClosureAlreadyRan(_) | EngineError::ClosureNotDue(_) => ServiceError::BadRequest(message),
        }
    }
}

impl From<ReportError> for ServiceError {
    fn from(e: ReportError) -> Self {
        let message = e.to_string();
        match e {
            ReportError::InvalidPeriod(_) => ServiceError::InvalidRange(message),
            ReportError::WindowTooShort { .. } => ServiceError::unprocessable("window_too_short", message),
            ReportError::InvalidThreshold(_) => ServiceError::BadRequest(message),
        }
    }
}

impl From<JournalError> for ServiceError {
    fn from(e: JournalError) -> Self {
        ServiceError::Storage(e.to_string())
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub policy: TimeWindowPolicy,
    pub token_ttl: Duration,
    pub password_iterations: u32,
    /// Edge node id to shared secret.
    pub edge_nodes: BTreeMap<String, String>,
    pub chronic_threshold: f64,
    pub store_path: Option<PathBuf>,
    pub journal: JournalOptions,
}

impl ServiceOptions {
    pub fn new(policy: TimeWindowPolicy) -> Self {
        ServiceOptions {
            policy,
            token_ttl: DEFAULT_TOKEN_TTL,
            password_iterations: DEFAULT_ITERATIONS,
            edge_nodes: BTreeMap::new(),
            chronic_threshold: DEFAULT_CHRONIC_THRESHOLD,
            store_path: None,
            journal: JournalOptions::default(),
        }
    }

    pub fn from_config(cfg: &CentralConfig) -> Self {
        ServiceOptions {
            policy: cfg.policy.clone(),
            token_ttl: cfg.token_ttl,
            password_iterations: cfg.password_iterations,
            edge_nodes: cfg.edge_nodes.clone(),
            chronic_threshold: cfg.chronic_threshold,
            store_path: cfg.store_path.clone(),
            journal: JournalOptions::default(),
        }
    }
}

struct Inner {
    state: CentralState,
    journal: Option<Journal<CentralRecord>>,
}

#[derive(Default)]
struct AuthState {
    sessions: Sessions,
    throttle: LoginThrottle,
}

/// Students a caller may see.
#[derive(Debug, Clone)]
enum Visibility {
    All,
    Sections(Vec<(u8, char)>),
    Student(Option<StudentCode>),
}

impl Visibility {
    fn of(p: &Principal) -> Self {
        match p {
            Principal::User { role: Role::Teacher, sections, .. } => Visibility::Sections(sections.clone()),
            Principal::User {
                role: Role::Student,
                student,
                ..
            } => Visibility::Student(student.clone()),
            _ => Visibility::All,
        }
    }

    fn allows(&self, code: &StudentCode, grade: u8, section: char) -> bool {
        match self {
            Visibility::All => true,
            Visibility::Sections(s) => s.contains(&(grade, section)),
            Visibility::Student(own) => own.as_ref() == Some(code),
        }
    }
}

/// Attendance filter after defaults and scoping are resolved.
#[derive(Debug, Clone)]
struct Filter {
    from: NaiveDate,
    to: NaiveDate,
    grade: Option<u8>,
    section: Option<char>,
    student: Option<StudentCode>,
    status: Option<rollcall_core::AttendanceStatus>,
    vis: Visibility,
}

fn placement(state: &CentralState, code: &StudentCode) -> (u8, char) {
    state
        .roster
        .get(code)
        .map_or((code.grade(), code.section()), |s| (s.grade, s.section))
}

impl Filter {
    fn matches(&self, state: &CentralState, e: &AttendanceEvent) -> bool {
        if self.student.as_ref().is_some_and(|s| s != &e.student_code) {
            return false;
        }
        if self.status.is_some_and(|s| s != e.status) {
            return false;
        }
        let (g, sec) = placement(state, &e.student_code);
        self.grade.is_none_or(|x| x == g)
            && self.section.is_none_or(|x| x == sec)
            && self.vis.allows(&e.student_code, g, sec)
    }
}

fn actor_of(p: &Principal) -> String {
    match p {
        Principal::User { username, .. } => username.clone(),
        Principal::EdgeNode { node_id } => format!("edge:{node_id}"),
    }
}

fn role_of(p: &Principal) -> Option<Role> {
    match p {
        Principal::User { role, .. } => Some(*role),
        Principal::EdgeNode { .. } => None,
    }
}

fn valid_username(s: &str) -> bool {
    (1..=32).contains(&s.len()) && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"._-".contains(&b))
}

fn page(offset: Option<usize>, limit: Option<usize>) -> Result<(usize, usize)> {
    let limit = limit.unwrap_or(DEFAULT_PAGE);
    if limit == 0 || limit > MAX_PAGE {
        return Err(ServiceError::BadRequest(format!("limit must be 1..={MAX_PAGE}")));
    }
    Ok((offset.unwrap_or(0), limit))
}

pub struct CentralService {
    inner: RwLock<Inner>,
    auth: Mutex<AuthState>,
    clock: Arc<dyn Clock>,
    ids: Mutex<Box<dyn IdSource>>,
    engine: AttendanceEngine,
    opts: ServiceOptions,
    feed: Notify,
}

impl CentralService {
    /// Opens the journal (if configured) and replays it.
    pub fn open(opts: ServiceOptions, clock: Arc<dyn Clock>, ids: Box<dyn IdSource>) -> Result<Self> {
        let mut state = CentralState::new();
        let journal = match &opts.store_path {
            None => None,
            Some(path) => {
                let (journal, records, recovery) = Journal::open(path, opts.journal)?;
                if recovery.truncated_bytes > 0 {
                    tracing::warn!(bytes = recovery.truncated_bytes, "truncated torn journal tail");
                }
                for rec in records {
                    state
                        .apply(rec)
                        .map_err(|e| ServiceError::Storage(format!("journal replay: {e}")))?;
                }
                Some(journal)
            }
        };
        Ok(CentralService {
            inner: RwLock::new(Inner { state, journal }),
            auth: Mutex::new(AuthState::default()),
            clock,
            ids: Mutex::new(ids),
            engine: AttendanceEngine::new(opts.policy.clone()),
            opts,
            feed: Notify::new(),
        })
    }

    pub fn policy(&self) -> &TimeWindowPolicy {
        &self.opts.policy
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn today(&self) -> NaiveDate {
        self.opts.policy.local_day(self.now())
    }

    /// Read access for tests and tooling.
    pub fn read<T>(&self, f: impl FnOnce(&CentralState) -> T) -> T {
        f(&self.inner.read().state)
    }

    fn commit(&self, inner: &mut Inner, rec: CentralRecord) -> Result<Applied> {
        if let Some(j) = &mut inner.journal {
            j.append(std::slice::from_ref(&rec))?;
        }
        let publishes = matches!(rec, CentralRecord::Mark { .. } | CentralRecord::Push { .. });
        let applied = inner
            .state
            .apply(rec)
            .map_err(|e| ServiceError::Storage(format!("apply after journal write: {e}")))?;
        if publishes {
            self.feed.notify_waiters();
        }
        Ok(applied)
    }

    fn audit(&self, entry: AuditEntry) {
        let mut inner = self.inner.write();
        if let Err(e) = self.commit(&mut inner, CentralRecord::Audit { audit: entry }) {
            tracing::error!("audit write failed: {e}");
        }
    }

    /// Records the refusal and returns the error to send.
    fn deny(&self, p: &Principal, what: &str, why: impl Into<String>) -> ServiceError {
        let why = why.into();
        self.audit(AuditEntry::new(self.now(), actor_of(p), AuditAction::Denied, what, why.clone()));
        ServiceError::Forbidden(why)
    }

    /// Creates the administrator if no user exists yet.
    pub fn ensure_admin(&self, username: &str, password: &str) -> Result<bool> {
        if !self.inner.read().state.users.is_empty() {
            return Ok(false);
        }
        let req = CreateUserRequest {
            username: username.into(),
            password: password.into(),
            role: Role::Admin,
            student_code: None,
            sections: Vec::new(),
        };
        self.insert_user("system", req).map(|_| true)
    }

    // ---- authentication ----

    /// Resolves the bearer token and checks the endpoint's access rule.
    /// Public endpoints yield `None`.
    pub fn authorize(&self, endpoint: Endpoint, bearer: Option<&str>) -> Result<Option<Principal>> {
        let access = endpoint.access();
        if access == Access::Public {
            return Ok(None);
        }
        let token = bearer.ok_or(ServiceError::Unauthorized)?;
        let p = self
            .auth
            .lock()
            .sessions
            .check(token, self.now())
            .map_err(|e| match e {
                TokenError::Unknown => ServiceError::Unauthorized,
                TokenError::Expired => ServiceError::AuthExpired,
            })?;
        let allowed = match (access, &p) {
            (Access::EdgeNode, Principal::EdgeNode { .. }) => true,
            (Access::Roles(roles), Principal::User { role, .. }) => roles.contains(role),
            _ => false,
        };
        if !allowed {
            let who = role_of(&p).map_or("edge node", |r| r.as_str());
            return Err(self.deny(
                &p,
                &format!("{} {}", endpoint.method(), endpoint.path()),
                format!("{who} may not call this endpoint"),
            ));
        }
        Ok(Some(p))
    }

    pub fn login(&self, req: &LoginRequest) -> Result<LoginResponse> {
        let now = self.now();
        if self.auth.lock().throttle.is_locked(&req.username, now) {
            return Err(ServiceError::RateLimited);
        }
        let user = self.inner.read().state.users.get(&req.username).cloned();
        let user = match user {
            Some(u) if u.password.verify(&req.password) => u,
            _ => {
                self.auth.lock().throttle.record_failure(&req.username, now);
                self.audit(AuditEntry::new(
                    now,
                    &req.username,
                    AuditAction::LoginFail,
                    &req.username,
                    "wrong username or password",
                ));
                return Err(ServiceError::InvalidCredentials);
            }
        };
        let principal = Principal::User {
            username: user.username.clone(),
            role: user.role,
            student: user.student.clone(),
            sections: user.sections.clone(),
        };
        let mut auth = self.auth.lock();
        auth.throttle.clear(&req.username);
        let (token, expires_at) = auth.sessions.issue(principal, now, self.opts.token_ttl);
        Ok(LoginResponse {
            token,
            username: user.username,
            role: user.role,
            expires_at,
        })
    }

    pub fn issue_sync_token(&self, req: &TokenRequest) -> Result<TokenResponse> {
        let now = self.now();
        let actor = format!("edge:{}", req.node_id);
        if self.auth.lock().throttle.is_locked(&actor, now) {
            return Err(ServiceError::RateLimited);
        }
        let ok = self
            .opts
            .edge_nodes
            .get(&req.node_id)
            .is_some_and(|s| bool::from(s.as_bytes().ct_eq(req.secret.as_bytes())));
        if !ok {
            self.auth.lock().throttle.record_failure(&actor, now);
            self.audit(AuditEntry::new(now, &actor, AuditAction::LoginFail, &req.node_id, "unknown node or wrong secret"));
            return Err(ServiceError::InvalidCredentials);
        }
        let mut auth = self.auth.lock();
        auth.throttle.clear(&actor);
        let (token, expires_at) = auth.sessions.issue(
            Principal::EdgeNode {
                node_id: req.node_id.clone(),
            },
            now,
            self.opts.token_ttl,
        );
        Ok(TokenResponse {
            token,
            node_id: req.node_id.clone(),
            expires_at,
        })
    }

    /// Forgets every issued token, as a restart does.
    pub fn drop_sessions(&self) {
        self.auth.lock().sessions.clear();
    }

    // ---- users and roster ----

    pub fn create_user(&self, p: &Principal, req: CreateUserRequest) -> Result<UserView> {
        self.insert_user(&actor_of(p), req)
    }

    fn insert_user(&self, actor: &str, req: CreateUserRequest) -> Result<UserView> {
        if !valid_username(&req.username) {
            return Err(ServiceError::BadRequest(
                "username must be 1-32 characters of letters, digits, '.', '_' or '-'".into(),
            ));
        }
        if req.password.chars().count() < 8 {
            return Err(ServiceError::BadRequest("password must have at least 8 characters".into()));
        }
        let sections = req
            .sections
            .iter()
            .map(|s| parse_section(s).ok_or_else(|| ServiceError::BadRequest(format!("bad section {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        match req.role {
            Role::Student if req.student_code.is_none() => {
                return Err(ServiceError::BadRequest("student users need student_code".into()))
            }
            Role::Student => {}
            _ if req.student_code.is_some() => {
                return Err(ServiceError::BadRequest("only student users carry student_code".into()))
            }
            _ => {}
        }
        if req.role != Role::Teacher && !sections.is_empty() {
            return Err(ServiceError::BadRequest("only teachers have section assignments".into()));
        }
        let password = PasswordHash::new(&req.password, self.opts.password_iterations);
        let mut inner = self.inner.write();
        if inner.state.users.contains_key(&req.username) {
            return Err(ServiceError::Conflict {
                code: "user_exists",
                message: format!("user {} already exists", req.username),
            });
        }
        if let Some(code) = &req.student_code {
            if inner.state.roster.get(code).is_none() {
                return Err(DomainError::UnknownStudent(code.clone()).into());
            }
        }
        let user = UserRecord {
            username: req.username.clone(),
            role: req.role,
            password,
            student: req.student_code.clone(),
            sections,
        };
        let audit = AuditEntry::new(
            self.now(),
            actor,
            AuditAction::CreateUser,
            &req.username,
            format!("role {}", req.role.as_str()),
        );
        self.commit(&mut inner, CentralRecord::User { user, audit })?;
        Ok(UserView {
            username: req.username,
            role: req.role,
            student_code: req.student_code,
            sections: req.sections,
        })
    }

    pub fn create_student(&self, p: &Principal, new: NewStudent) -> Result<StudentRecord> {
        if new.given_names.trim().is_empty() || new.family_names.trim().is_empty() {
            return Err(ServiceError::BadRequest("names must not be empty".into()));
        }
        let mut inner = self.inner.write();
        let code = inner.state.roster.next_code(new.enrollment_year, new.grade, new.section)?;
        let student = StudentRecord {
            student_code: code.clone(),
            given_names: new.given_names,
            family_names: new.family_names,
            enrollment_year: new.enrollment_year,
            grade: new.grade,
            section: new.section,
            emergency_contact: new.emergency_contact,
            active: true,
        };
        let audit = AuditEntry::new(
            self.now(),
            actor_of(p),
            AuditAction::CreateStudent,
            code.as_str(),
            format!("{}, {} in {}", student.family_names, student.given_names, format_section(student.grade, student.section)),
        );
        self.commit(
            &mut inner,
            CentralRecord::Student {
                student: student.clone(),
                audit,
            },
        )?;
        Ok(student)
    }

    pub fn list_students(&self, p: &Principal, q: &StudentsQuery) -> Result<Vec<StudentRecord>> {
        let vis = Visibility::of(p);
        if let Visibility::Sections(s) = &vis {
            if !s
                .iter()
                .any(|(g, c)| q.grade.is_none_or(|x| x == *g) && q.section.is_none_or(|x| x == *c))
            {
                return Err(self.deny(p, "students", "outside assigned sections"));
            }
        }
        let inner = self.inner.read();
        Ok(inner
            .state
            .roster
            .iter()
            .filter(|s| q.grade.is_none_or(|g| g == s.grade) && q.section.is_none_or(|c| c == s.section))
            .filter(|s| vis.allows(&s.student_code, s.grade, s.section))
            .cloned()
            .collect())
    }

    pub fn list_cards(&self, q: &CardsQuery) -> Vec<RfidCard> {
        let inner = self.inner.read();
        inner
            .state
            .cards
            .iter()
            .filter(|c| q.student.is_none() || c.linked_student == q.student)
            .cloned()
            .collect()
    }

    fn card_record(&self, rec: CentralRecord) -> Result<CardChangeResponse> {
        let mut inner = self.inner.write();
        // Dry run on a copy so that nothing invalid reaches the journal.
        let mut probe = inner.state.cards.clone();
        match &rec {
            CentralRecord::Enroll { uid, student, actor, role, at } => {
                probe.enroll_card(*uid, student, &inner.state.roster, &ActorRef::new(actor.clone(), *role), *at)?;
            }
            CentralRecord::CardState { uid, state, actor, role, at } => {
                probe.set_card_state(*uid, *state, &ActorRef::new(actor.clone(), *role), *at)?;
            }
            _ => unreachable!("card records only"),
        }
        match self.commit(&mut inner, rec)? {
            Applied::Card(c) => Ok(CardChangeResponse {
                card: c.card,
                displaced: c.displaced,
                changed: c.changed,
            }),
            _ => unreachable!("card records apply as card changes"),
        }
    }

    pub fn enroll_card(&self, p: &Principal, req: &EnrollCardRequest) -> Result<CardChangeResponse> {
        let Some(role) = role_of(p) else {
            return Err(ServiceError::Forbidden("users only".into()));
        };
        self.card_record(
            CentralRecord::Enroll {
                uid: req.uid,
                student: req.student_code.clone(),
                actor: actor_of(p),
                role,
                at: self.now(),
            },
        )
    }

    pub fn set_card_state(&self, p: &Principal, uid: CardUid, state: CardState) -> Result<CardChangeResponse> {
        let Some(role) = role_of(p) else {
            return Err(ServiceError::Forbidden("users only".into()));
        };
        self.card_record(
            CentralRecord::CardState {
                uid,
                state,
                actor: actor_of(p),
                role,
                at: self.now(),
            },
        )
    }

    // ---- attendance ----

    fn filter(
        &self,
        p: &Principal,
        from: Option<NaiveDate>,
        to: Option<NaiveDate>,
        grade: Option<u8>,
        section: Option<char>,
        student: Option<StudentCode>,
    ) -> Result<Filter> {
        let today = self.today();
        let from = from.unwrap_or_else(|| to.unwrap_or(today));
        let to = to.unwrap_or(from);
        if from > to {
            return Err(ServiceError::InvalidRange(format!("from {from} is after to {to}")));
        }
        if (to - from).num_days() >= MAX_RANGE_DAYS {
            return Err(ServiceError::InvalidRange(format!("range exceeds {MAX_RANGE_DAYS} days")));
        }
        let vis = Visibility::of(p);
        match &vis {
            Visibility::All => {}
            Visibility::Sections(s) => {
                let placed = student.as_ref().map(|c| self.read(|st| placement(st, c)));
                let ok = match placed {
                    Some(gs) => s.contains(&gs),
                    None => s
                        .iter()
                        .any(|(g, c)| grade.is_none_or(|x| x == *g) && section.is_none_or(|x| x == *c)),
                };
                if !ok {
                    return Err(self.deny(p, "attendance", "outside assigned sections"));
                }
            }
            Visibility::Student(own) => {
                if student.is_some() && student != *own {
                    return Err(self.deny(p, "attendance", "students see only their own records"));
                }
            }
        }
        Ok(Filter {
            from,
            to,
            grade,
            section,
            student,
            status: None,
            vis,
        })
    }

    pub fn query_attendance(&self, p: &Principal, q: &AttendanceQuery) -> Result<AttendancePage> {
        let (offset, limit) = page(q.offset, q.limit)?;
        let mut f = self.filter(p, q.from, q.to, q.grade, q.section, q.student.clone())?;
        f.status = q.status;
        let inner = self.inner.read();
        let st = &inner.state;
        let mut counts = StatusCounts::default();
        let mut total = 0u64;
        let mut items = Vec::new();
        for e in st.effective_range(f.from, f.to).filter(|e| f.matches(st, e)) {
            counts.record(e.status);
            if total as usize >= offset && items.len() < limit {
                items.push(e.clone());
            }
            total += 1;
        }
        Ok(AttendancePage {
            items,
            total,
            counts,
            offset,
            limit,
        })
    }

    /// Attendance CSV for the filter, ignoring pagination.
    pub fn export_csv(&self, p: &Principal, q: &AttendanceQuery) -> Result<String> {
        let mut f = self.filter(p, q.from, q.to, q.grade, q.section, q.student.clone())?;
        f.status = q.status;
        let inner = self.inner.read();
        let st = &inner.state;
        let rows: Vec<EventRow> = st
            .effective_range(f.from, f.to)
            .filter(|e| f.matches(st, e))
            .map(|e| EventRow::new(e, &st.roster))
            .collect();
        let mut out = Vec::new();
        write_events_csv(&mut out, &rows).map_err(|e| ServiceError::Storage(e.to_string()))?;
        Ok(String::from_utf8(out).expect("csv is utf-8"))
    }

    fn actor_ref(p: &Principal) -> Result<ActorRef> {
        match p {
            Principal::User { username, role, .. } => Ok(ActorRef::new(username.clone(), *role)),
            Principal::EdgeNode { .. } => Err(ServiceError::Forbidden("users only".into())),
        }
    }

    pub fn manual_mark(&self, p: &Principal, req: &ManualMarkRequest) -> Result<AttendanceEvent> {
        let actor = Self::actor_ref(p)?;
        let mut inner = self.inner.write();
        let mut ledger = AttendanceLedger::new();
        if let Some(e) = inner.state.effective(req.school_day, &req.student_code) {
            ledger.insert(e.clone()).expect("empty ledger");
        }
        let (event, audit) = self.engine.manual_mark(
            &req.student_code,
            req.school_day,
            req.status,
            &actor,
            &req.note,
            self.now(),
            &inner.state.roster,
            &ledger,
            &mut **self.ids.lock(),
        )?;
        self.commit(&mut inner, CentralRecord::Mark { event: event.clone(), audit })?;
        Ok(event)
    }

    pub fn justify(&self, p: &Principal, req: &JustifyRequest) -> Result<AttendanceEvent> {
        let actor = Self::actor_ref(p)?;
        if req.school_day > self.today() {
            return Err(EngineError::FutureDate(req.school_day).into());
        }
        let mut inner = self.inner.write();
        let mut ledger = AttendanceLedger::new();
        if let Some(e) = inner.state.effective(req.school_day, &req.student_code) {
            ledger.insert(e.clone()).expect("empty ledger");
        }
        let (event, audit) = self.engine.justify(
            &req.student_code,
            req.school_day,
            &actor,
            &req.note,
            self.now(),
            &ledger,
            &mut **self.ids.lock(),
        )?;
        self.commit(&mut inner, CentralRecord::Mark { event: event.clone(), audit })?;
        Ok(event)
    }

    /// Without a cursor: the day's records and the cursor to continue from.
    /// With one: waits up to `wait_ms` for records after it.
    pub async fn live_feed(&self, p: &Principal, q: &LiveQuery) -> Result<LiveFeed> {
        let day = q.day.unwrap_or_else(|| self.today());
        let vis = Visibility::of(p);
        let Some(mut cursor) = q.cursor else {
            let inner = self.inner.read();
            let st = &inner.state;
            let items = st
                .day(day)
                .filter(|e| {
                    let (g, s) = placement(st, &e.student_code);
                    vis.allows(&e.student_code, g, s)
                })
                .cloned()
                .collect();
            return Ok(LiveFeed {
                day,
                cursor: st.feed_head(),
                snapshot: true,
                heartbeat: false,
                items,
            });
        };
        let wait = std::time::Duration::from_millis(q.wait_ms.unwrap_or(DEFAULT_WAIT_MS).min(MAX_WAIT_MS));
        let deadline = tokio::time::Instant::now() + wait;
        loop {
            let notified = self.feed.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            {
                let inner = self.inner.read();
                let st = &inner.state;
                if cursor > st.feed_head() || cursor < st.feed_floor() {
                    return Err(ServiceError::CursorExpired(cursor));
                }
                let items: Vec<AttendanceEvent> = st
                    .feed_after(cursor)
                    .map(|f| &f.event)
                    .filter(|e| {
                        let (g, s) = placement(st, &e.student_code);
                        e.school_day == day && vis.allows(&e.student_code, g, s)
                    })
                    .cloned()
                    .collect();
                cursor = st.feed_head();
                if !items.is_empty() {
                    return Ok(LiveFeed {
                        day,
                        cursor,
                        snapshot: false,
                        heartbeat: false,
                        items,
                    });
                }
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Ok(LiveFeed {
                    day,
                    cursor,
                    snapshot: false,
                    heartbeat: true,
                    items: Vec::new(),
                });
            }
        }
    }

    // ---- reports ----

    fn closed_days(&self, st: &CentralState, from: NaiveDate, to: NaiveDate) -> BTreeSet<NaiveDate> {
        let now = self.now();
        let policy = &self.opts.policy;
        if from > to {
            return BTreeSet::new();
        }
        policy
            .calendar()
            .school_days(from, to)
            .filter(|d| st.is_closed(*d, policy, now))
            .collect()
    }

    fn summary_scope(&self, p: &Principal, q: &SummaryQuery) -> Result<ReportScope> {
        let scope = match q.scope.as_deref() {
            None => match (&q.student, q.grade, q.section) {
                (Some(s), _, _) => ReportScope::Student { student: s.clone() },
                (None, Some(grade), Some(section)) => ReportScope::Section { grade, section },
                (None, Some(grade), None) => ReportScope::Grade { grade },
                (None, None, _) => ReportScope::Institution,
            },
            Some("institution") => ReportScope::Institution,
            Some("grade") => ReportScope::Grade {
                grade: q.grade.ok_or_else(|| ServiceError::BadRequest("grade scope needs grade".into()))?,
            },
            Some("section") => match (q.grade, q.section) {
                (Some(grade), Some(section)) => ReportScope::Section { grade, section },
                _ => return Err(ServiceError::BadRequest("section scope needs grade and section".into())),
            },
            Some("student") => ReportScope::Student {
                student: q
                    .student
                    .clone()
                    .ok_or_else(|| ServiceError::BadRequest("student scope needs student".into()))?,
            },
            Some(other) => return Err(ServiceError::BadRequest(format!("unknown scope {other:?}"))),
        };
        if let Visibility::Sections(s) = Visibility::of(p) {
            let ok = match &scope {
                ReportScope::Section { grade, section } => s.contains(&(*grade, *section)),
                ReportScope::Student { student } => s.contains(&self.read(|st| placement(st, student))),
                _ => false,
            };
            if !ok {
                return Err(self.deny(p, "reports", "outside assigned sections"));
            }
        }
        Ok(scope)
    }

    fn summary_period(&self, q: &SummaryQuery) -> Result<Period> {
        let date = q.date.unwrap_or_else(|| self.today());
        Ok(match q.period.as_deref().unwrap_or("day") {
            "day" => Period::Day { date },
            "week" => Period::week_of(date),
            "month" => Period::month_of(date),
            "range" => match (q.from, q.to) {
                (Some(from), Some(to)) => Period::Range { from, to },
                _ => return Err(ServiceError::BadRequest("range period needs from and to".into())),
            },
            other => return Err(ServiceError::BadRequest(format!("unknown period {other:?}"))),
        })
    }

    pub fn summary(&self, p: &Principal, q: &SummaryQuery) -> Result<AttendanceSummary> {
        let scope = self.summary_scope(p, q)?;
        let period = self.summary_period(q)?;
        let (start, end) = period.bounds()?;
        if (end - start).num_days() >= MAX_RANGE_DAYS {
            return Err(ServiceError::InvalidRange(format!("range exceeds {MAX_RANGE_DAYS} days")));
        }
        let inner = self.inner.read();
        let st = &inner.state;
        let closed = self.closed_days(st, start, end);
        Ok(summarize(
            &scope,
            &period,
            &st.roster,
            st.effective_range(start, end),
            self.opts.policy.calendar(),
            |d| closed.contains(&d),
        )?)
    }

    pub fn chronic(&self, p: &Principal, q: &ChronicQuery) -> Result<ChronicReport> {
        let f = self.filter(p, Some(q.from), Some(q.to), q.grade, q.section, q.student.clone())?;
        let threshold = q.threshold.unwrap_or(self.opts.chronic_threshold);
        let inner = self.inner.read();
        let st = &inner.state;
        let closed = self.closed_days(st, f.from, f.to);
        let mut by_student: BTreeMap<&StudentCode, Vec<&AttendanceEvent>> = BTreeMap::new();
        for s in st.roster.active() {
            let in_filter = f.student.as_ref().is_none_or(|c| c == &s.student_code)
                && f.grade.is_none_or(|g| g == s.grade)
                && f.section.is_none_or(|c| c == s.section)
                && f.vis.allows(&s.student_code, s.grade, s.section);
            if in_filter {
                by_student.insert(&s.student_code, Vec::new());
            }
        }
        for e in st.effective_range(f.from, f.to) {
            if let Some(v) = by_student.get_mut(&e.student_code) {
                v.push(e);
            }
        }
        let students = by_student
            .into_iter()
            .map(|(code, events)| {
                flag_chronic_absenteeism(
                    code,
                    f.from,
                    f.to,
                    threshold,
                    events,
                    self.opts.policy.calendar(),
                    |d| closed.contains(&d),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        if students.is_empty() {
            // Still report a window that could never qualify.
            let n = closed.len();
            if n < rollcall_core::reports::MIN_CHRONIC_WINDOW_DAYS {
                return Err(ReportError::WindowTooShort { closed_days: n }.into());
            }
        }
        Ok(ChronicReport {
            from: f.from,
            to: f.to,
            threshold,
            students,
        })
    }

    pub fn audit_log(&self, q: &AuditQuery) -> Result<AuditPage> {
        let (offset, limit) = page(q.offset, q.limit)?;
        let inner = self.inner.read();
        let matching = inner
            .state
            .audit()
            .iter()
            .filter(|a| q.action.is_none_or(|x| x == a.action));
        let mut total = 0u64;
        let mut items = Vec::new();
        for a in matching {
            if total as usize >= offset && items.len() < limit {
                items.push(a.clone());
            }
            total += 1;
        }
        Ok(AuditPage { items, total })
    }

    // ---- sync ----

    pub fn push_events(&self, p: &Principal, batch: SyncBatch) -> Result<PushResponse> {
        let Principal::EdgeNode { node_id } = p else {
            return Err(ServiceError::Forbidden("edge nodes only".into()));
        };
        if &batch.edge_node_id != node_id {
            return Err(self.deny(p, &batch.edge_node_id, "token belongs to another node"));
        }
        batch.verify().map_err(|e| match e {
            BatchError::ChecksumMismatch { .. } => ServiceError::ChecksumMismatch(e.to_string()),
            _ => ServiceError::unprocessable("invalid_batch", e),
        })?;
        if batch.first_sequence == 0 {
            return Err(ServiceError::unprocessable("invalid_batch", "sequences start at 1"));
        }
        for e in &batch.events {
            e.validate()?;
            if !self.opts.policy.is_school_day(e.school_day) {
                return Err(ServiceError::unprocessable(
                    "invalid_batch",
                    format!("event {} is on non-school day {}", e.event_id, e.school_day),
                ));
            }
        }
        let mut inner = self.inner.write();
        let high_water = inner.state.high_water(node_id);
        if batch.first_sequence > high_water + 1 {
            return Err(ServiceError::SequenceGap { high_water });
        }
        let rec = CentralRecord::Push {
            node: node_id.clone(),
            first: batch.first_sequence,
            last: batch.last_sequence,
            events: batch.events,
            at: self.now(),
        };
        match self.commit(&mut inner, rec)? {
            Applied::Push(o) => Ok(PushResponse {
                accepted_high_water: o.accepted_high_water,
                duplicates: o.duplicates,
                conflicts: o.conflicts,
            }),
            _ => unreachable!("push records apply as pushes"),
        }
    }

    /// Changes after `since`; a `since` from before a central reset returns
    /// everything.
    pub fn pull_roster(&self, since: u64) -> RosterDelta {
        let inner = self.inner.read();
        let st = &inner.state;
        st.roster_delta(if since > st.roster_version() { 0 } else { since })
    }
}
