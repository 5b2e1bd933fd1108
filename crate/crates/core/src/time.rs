//! Simulated time and lease bookkeeping.
//!
//! Time is a count of simulated milliseconds since the start of a run. No
//! wall clock is ever consulted.

use std::fmt;

use serde::{Deserialize, Deserializer};

pub type SimTime = u64;

pub const MILLISECOND: SimTime = 1;
pub const SECOND: SimTime = 1_000;
pub const MINUTE: SimTime = 60 * SECOND;
pub const HOUR: SimTime = 60 * MINUTE;
pub const DAY: SimTime = 24 * HOUR;
pub const WEEK: SimTime = 7 * DAY;

/// Parses `250ms`, `10s`, `5m`, `3h`, `1d`, `1w` or a bare millisecond count.
pub fn parse_duration(text: &str) -> Result<SimTime, String> {
    let t = text.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: SimTime = num.parse().map_err(|_| format!("invalid duration `{text}`"))?;
    let scale = match unit.trim() {
        "" | "ms" => MILLISECOND,
        "s" => SECOND,
        "m" | "min" => MINUTE,
        "h" => HOUR,
        "d" => DAY,
        "w" => WEEK,
        other => return Err(format!("unknown duration unit `{other}` in `{text}`")),
    };
    n.checked_mul(scale).ok_or_else(|| format!("duration `{text}` overflows"))
}

/// Formats a duration with the largest unit that divides it exactly.
pub fn format_duration(d: SimTime) -> String {
    for (unit, scale) in [("w", WEEK), ("d", DAY), ("h", HOUR), ("m", MINUTE), ("s", SECOND)] {
        if d != 0 && d % scale == 0 {
            return format!("{}{unit}", d / scale);
        }
    }
    format!("{d}ms")
}

/// Serde adapter accepting either a duration string or an integer count of
/// milliseconds.
pub fn de_duration<'de, D: Deserializer<'de>>(de: D) -> Result<SimTime, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Ms(u64),
        Text(String),
    }
    match Raw::deserialize(de)? {
        Raw::Ms(ms) => Ok(ms),
        Raw::Text(s) => parse_duration(&s).map_err(serde::de::Error::custom),
    }
}

pub fn de_opt_duration<'de, D: Deserializer<'de>>(de: D) -> Result<Option<SimTime>, D::Error> {
    de_duration(de).map(Some)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LeaseError {
    #[error("lease duration must be positive")]
    ZeroDuration,
    #[error("renew period {renew} exceeds lease duration {duration}")]
    RenewExceedsDuration { renew: SimTime, duration: SimTime },
}

/// Validity window of a piece of transmitted information.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeaseState {
    pub issued_at: SimTime,
    pub duration: SimTime,
    pub renew_period: SimTime,
}

impl LeaseState {
    pub fn new(issued_at: SimTime, duration: SimTime, renew_period: SimTime) -> Result<Self, LeaseError> {
        if duration == 0 || renew_period == 0 {
            return Err(LeaseError::ZeroDuration);
        }
        if renew_period > duration {
            return Err(LeaseError::RenewExceedsDuration {
                renew: renew_period,
                duration,
            });
        }
        Ok(LeaseState {
            issued_at,
            duration,
            renew_period,
        })
    }

    pub fn expires_at(&self) -> SimTime {
        self.issued_at.saturating_add(self.duration)
    }

    pub fn expired(&self, now: SimTime) -> bool {
        now > self.expires_at()
    }

    pub fn next_renewal(&self) -> SimTime {
        self.issued_at + self.renew_period
    }

    pub fn renewed(self, issued_at: SimTime) -> Self {
        LeaseState { issued_at, ..self }
    }
}

impl fmt::Display for LeaseState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "issued {} for {} (renew every {})",
            self.issued_at,
            format_duration(self.duration),
            format_duration(self.renew_period)
        )
    }
}
