//! Credentials, bearer tokens and login throttling.

use std::collections::{HashMap, VecDeque};

use chrono::{DateTime, Duration, Utc};
use pbkdf2::pbkdf2_hmac;
use rand::RngCore;
use rollcall_core::{Role, StudentCode};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use subtle::ConstantTimeEq;

pub const DEFAULT_ITERATIONS: u32 = 100_000;
pub const DEFAULT_TOKEN_TTL: Duration = Duration::hours(24);
/// Failed logins per username tolerated within [`FAILURE_WINDOW`].
pub const MAX_FAILURES: usize = 5;
pub const FAILURE_WINDOW: Duration = Duration::minutes(1);

const SALT_LEN: usize = 16;
const HASH_LEN: usize = 32;

/// `pbkdf2-sha256$<iterations>$<salt hex>$<hash hex>`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PasswordHash(String);

impl PasswordHash {
    pub fn new(password: &str, iterations: u32) -> Self {
        let mut salt = [0u8; SALT_LEN];
        rand::rng().fill_bytes(&mut salt);
        let mut out = [0u8; HASH_LEN];
        pbkdf2_hmac::<Sha256>(password.as_bytes(), &salt, iterations, &mut out);
        PasswordHash(format!("pbkdf2-sha256${iterations}${}${}", hex::encode(salt), hex::encode(out)))
    }

    pub fn verify(&self, password: &str) -> bool {
        let parts: Vec<&str> = self.0.split('$').collect();
        let [scheme, iters, salt, hash] = parts.as_slice() else {
            return false;
        };
        let (Ok(iters), Ok(salt), Ok(hash)) = (iters.parse::<u32>(), hex::decode(salt), hex::decode(hash)) else {
            return false;
        };
        if *scheme != "pbkdf2-sha256" || hash.len() != HASH_LEN {
            return false;
        }
        let mut out = [0u8; HASH_LEN];
        pbkdf2_hmac::<Sha256>(password.as_bytes(), &salt, iters, &mut out);
        out.ct_eq(&hash[..]).into()
    }
}

/// 256 random bits, hex encoded.
pub fn new_token() -> String {
    let mut b = [0u8; 32];
    rand::rng().fill_bytes(&mut b);
    hex::encode(b)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Principal {
    User {
        username: String,
        role: Role,
        /// Set for student logins.
        student: Option<StudentCode>,
        /// Teacher assignments as (grade, section).
        sections: Vec<(u8, char)>,
    },
    EdgeNode { node_id: String },
}

#[derive(Debug, Clone)]
pub struct Session {
    pub principal: Principal,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenError {
    Unknown,
    Expired,
}

#[derive(Debug, Default)]
pub struct Sessions {
    by_token: HashMap<String, Session>,
}

impl Sessions {
    pub fn issue(&mut self, principal: Principal, now: DateTime<Utc>, ttl: Duration) -> (String, DateTime<Utc>) {
        let token = new_token();
        let expires_at = now + ttl;
        self.by_token.insert(token.clone(), Session { principal, expires_at });
        (token, expires_at)
    }

    pub fn check(&mut self, token: &str, now: DateTime<Utc>) -> Result<Principal, TokenError> {
        match self.by_token.get(token) {
            None => Err(TokenError::Unknown),
            Some(s) if s.expires_at <= now => {
                self.by_token.remove(token);
                Err(TokenError::Expired)
            }
            Some(s) => Ok(s.principal.clone()),
        }
    }

    /// Drops every token, as a restart would.
    pub fn clear(&mut self) {
        self.by_token.clear();
    }
}

/// Sliding-window count of failed logins per username.
#[derive(Debug, Default)]
pub struct LoginThrottle {
    failures: HashMap<String, VecDeque<DateTime<Utc>>>,
}

impl LoginThrottle {
    fn prune(q: &mut VecDeque<DateTime<Utc>>, now: DateTime<Utc>) {
        while q.front().is_some_and(|t| *t <= now - FAILURE_WINDOW) {
            q.pop_front();
        }
    }

    pub fn is_locked(&mut self, username: &str, now: DateTime<Utc>) -> bool {
        match self.failures.get_mut(username) {
            Some(q) => {
                Self::prune(q, now);
                q.len() >= MAX_FAILURES
            }
            None => false,
        }
    }

    pub fn record_failure(&mut self, username: &str, now: DateTime<Utc>) {
        let q = self.failures.entry(username.to_string()).or_default();
        Self::prune(q, now);
        q.push_back(now);
    }

    pub fn clear(&mut self, username: &str) {
        self.failures.remove(username);
    }
}
