//! Central service configuration.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `listen` | `127.0.0.1:8080` | HTTP bind address |
//! | `store_path` | none | journal file; without it state lives in memory only |
//! | `admin_user` | none | administrator created on first start |
//! | `admin_password` | none | password for `admin_user` |
//! | `edge_nodes` | empty | `node:secret` pairs, comma separated |
//! | `token_ttl_secs` | 86400 | bearer token lifetime |
//! | `password_iterations` | 100000 | PBKDF2 rounds for new password hashes |
//! | `cors_origin` | none | allowed browser origin, `*` for any |
//! | `chronic_threshold` | 0.1 | default absence rate that flags a student |
//! | `clock_start` | none | RFC 3339 instant the service clock starts at |
//! | `clock_speed` | 1 | clock rate relative to wall time when `clock_start` is set |
//!
//! Window policy keys are shared with the edge node. Relative paths are
//! resolved against the config file's directory.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use rollcall_core::config::{ConfigError, KvConfig, Origin};
use rollcall_core::TimeWindowPolicy;

use crate::auth::{DEFAULT_ITERATIONS, DEFAULT_TOKEN_TTL};

pub const ENV_PREFIX: &str = "ROLLCALL_";
pub const DEFAULT_CHRONIC_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClockSpec {
    System,
    Offset { start: DateTime<Utc>, speed: f64 },
}

#[derive(Debug, Clone)]
pub struct CentralConfig {
    pub listen: SocketAddr,
    pub store_path: Option<PathBuf>,
    pub admin: Option<(String, String)>,
    pub edge_nodes: BTreeMap<String, String>,
    pub token_ttl: Duration,
    pub password_iterations: u32,
    pub cors_origin: Option<String>,
    pub chronic_threshold: f64,
    pub clock: ClockSpec,
    pub policy: TimeWindowPolicy,
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        origin: Origin::Default,
        message: message.into(),
    }
}

fn parse_nodes(v: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for pair in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (id, secret) = pair.split_once(':').ok_or_else(|| format!("{pair:?} is not node:secret"))?;
        if id.is_empty() || secret.is_empty() {
            return Err(format!("{pair:?} has an empty node or secret"));
        }
        if out.insert(id.to_string(), secret.to_string()).is_some() {
            return Err(format!("node {id} listed twice"));
        }
    }
    Ok(out)
}

impl CentralConfig {
    /// Reads `path` and applies `ROLLCALL_*` environment overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let kv = KvConfig::load(path)?.override_from_env(ENV_PREFIX);
        Self::from_kv(&kv, path.parent())
    }

    pub fn from_kv(kv: &KvConfig, base: Option<&Path>) -> Result<Self, ConfigError> {
        let resolve = |p: PathBuf| match base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p,
        };
        let admin = match (kv.get::<String>("admin_user")?, kv.get::<String>("admin_password")?) {
            (None, None) => None,
            (Some(u), Some(p)) => Some((u, p)),
            (Some(_), None) => return Err(ConfigError::Missing("admin_password".into())),
            (None, Some(_)) => return Err(ConfigError::Missing("admin_user".into())),
        };
        let chronic_threshold = kv.get::<f64>("chronic_threshold")?.unwrap_or(DEFAULT_CHRONIC_THRESHOLD);
        if !(0.0..=1.0).contains(&chronic_threshold) {
            return Err(invalid("chronic_threshold", "must be within [0, 1]"));
        }
        let password_iterations = kv.get::<u32>("password_iterations")?.unwrap_or(DEFAULT_ITERATIONS);
        if password_iterations == 0 {
            return Err(invalid("password_iterations", "must be positive"));
        }
        let clock = match kv.get_with("clock_start", |v| {
            DateTime::parse_from_rfc3339(v).map(|t| t.with_timezone(&Utc)).map_err(|e| e.to_string())
        })? {
            None => ClockSpec::System,
            Some(start) => {
                let speed: f64 = kv.get("clock_speed")?.unwrap_or(1.0);
                if !(speed.is_finite() && speed > 0.0) {
                    return Err(invalid("clock_speed", "must be a positive number"));
                }
                ClockSpec::Offset { start, speed }
            }
        };
        Ok(CentralConfig {
            listen: kv.get("listen")?.unwrap_or(([127, 0, 0, 1], 8080).into()),
            store_path: kv.get::<PathBuf>("store_path")?.map(resolve),
            admin,
            edge_nodes: kv.get_with("edge_nodes", parse_nodes)?.unwrap_or_default(),
            token_ttl: kv
                .get::<i64>("token_ttl_secs")?
                .map(Duration::seconds)
                .unwrap_or(DEFAULT_TOKEN_TTL),
            password_iterations,
            cors_origin: kv.get::<String>("cors_origin")?.filter(|s| !s.is_empty()),
            chronic_threshold,
            clock,
            policy: TimeWindowPolicy::from_config(kv)?,
        })
    }
}
