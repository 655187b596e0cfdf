//! Edge node configuration.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `node_id` | required | edge node identity, also its sync identity |
//! | `store_path` | required | journal file |
//! | `listen` | `tcp:127.0.0.1:7000` | `tcp:<host:port>` or `serial:<device path>` |
//! | `central_url` | none | central base URL; without it the node runs standalone |
//! | `node_secret` | none | shared secret for sync tokens, required with `central_url` |
//! | `sync_interval_secs` | 30 | pause between sync rounds |
//! | `sync_batch_size` | 500 | events per push, at most 500 |
//! | `idle_timeout_secs` | 60 | reader sessions silent this long are closed |
//! | `store_max_bytes` | none | refuse appends beyond this journal size |
//! | `seed_roster` | none | CSV of students and cards loaded into an empty store |
//! | `clock_start` | none | RFC 3339 instant the node clock starts at |
//! | `clock_speed` | 1 | clock rate relative to wall time when `clock_start` is set |
//! | `closure_check_secs` | 1 | wall seconds between checks for due closures |
//!
//! Window policy keys (`timezone`, `present_start`, `late_start`,
//! `closure`, `school_weekdays`, `holidays`) are read from the same file.
//! Relative paths are resolved against the config file's directory.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use rollcall_core::config::{ConfigError, KvConfig};
use rollcall_core::sync::MAX_BATCH_EVENTS;
use rollcall_core::TimeWindowPolicy;

pub const ENV_PREFIX: &str = "ROLLCALL_";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Listen {
    Tcp(SocketAddr),
    Serial(PathBuf),
}

impl std::str::FromStr for Listen {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(addr) = s.strip_prefix("tcp:") {
            addr.parse().map(Listen::Tcp).map_err(|e| format!("{addr:?}: {e}"))
        } else if let Some(path) = s.strip_prefix("serial:") {
            if path.is_empty() {
                Err("empty device path".into())
            } else {
                Ok(Listen::Serial(PathBuf::from(path)))
            }
        } else {
            Err(format!("expected tcp:<addr> or serial:<path>, got {s:?}"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClockSpec {
    System,
    Offset { start: DateTime<Utc>, speed: f64 },
}

#[derive(Debug, Clone)]
pub struct CentralLink {
    pub url: String,
    pub secret: String,
    pub interval: Duration,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct EdgeConfig {
    pub node_id: String,
    pub store_path: PathBuf,
    pub listen: Listen,
    pub central: Option<CentralLink>,
    pub idle_timeout: Duration,
    pub store_max_bytes: Option<u64>,
    pub seed_roster: Option<PathBuf>,
    pub clock: ClockSpec,
    pub closure_check: Duration,
    pub policy: TimeWindowPolicy,
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        origin: rollcall_core::config::Origin::Default,
        message: message.into(),
    }
}

impl EdgeConfig {
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
        let node_id: String = kv.require("node_id")?;
        if node_id.is_empty() || node_id.len() > 24 || !node_id.bytes().all(|b| b.is_ascii_graphic()) {
            return Err(invalid("node_id", "1 to 24 printable ASCII characters without spaces"));
        }
        let central = match kv.raw("central_url") {
            None | Some("") => None,
            Some(url) => {
                let batch_size = kv.get::<usize>("sync_batch_size")?.unwrap_or(MAX_BATCH_EVENTS);
                if !(1..=MAX_BATCH_EVENTS).contains(&batch_size) {
                    return Err(invalid("sync_batch_size", format!("must be 1..={MAX_BATCH_EVENTS}")));
                }
                Some(CentralLink {
                    url: url.to_string(),
                    secret: kv.require("node_secret")?,
                    interval: Duration::from_secs(kv.get("sync_interval_secs")?.unwrap_or(30)),
                    batch_size,
                })
            }
        };
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
        Ok(EdgeConfig {
            node_id,
            store_path: resolve(kv.require::<PathBuf>("store_path")?),
            listen: kv.get_with("listen", |v| v.parse())?.unwrap_or(Listen::Tcp(([127, 0, 0, 1], 7000).into())),
            central,
            idle_timeout: Duration::from_secs(kv.get("idle_timeout_secs")?.unwrap_or(60)),
            store_max_bytes: kv.get("store_max_bytes")?,
            seed_roster: kv.get::<PathBuf>("seed_roster")?.map(resolve),
            clock,
            closure_check: Duration::from_millis(
                (kv.get::<f64>("closure_check_secs")?.unwrap_or(1.0).max(0.01) * 1000.0) as u64,
            ),
            policy: TimeWindowPolicy::from_config(kv)?,
        })
    }
}
