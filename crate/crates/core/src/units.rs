//! Physical quantities used throughout the simulator.
//!
//! Every quantity that crosses a file boundary carries an explicit unit
//! suffix (`"2 MiB"`, `"0.5 ms"`, `"100 Gbps"`, `"512 tokens"`). Bare numbers
//! are rejected by the parsers in this module.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

/// Simulated time in integer nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs_f64(s: f64) -> Self {
        assert!(s.is_finite() && s >= 0.0, "negative or non-finite time {s}");
        SimTime((s * 1e9).round() as u64)
    }

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

/// Bandwidth in bytes per second.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Bandwidth(pub f64);

impl Bandwidth {
    pub fn gbps(bits: f64) -> Self {
        Bandwidth(bits * 1e9 / 8.0)
    }

    pub fn gib_per_sec(g: f64) -> Self {
        Bandwidth(g * GIB as f64)
    }

    pub fn bytes_per_sec(self) -> f64 {
        self.0
    }

    /// Time to move `bytes` at this bandwidth, rounded up to the next nanosecond.
    pub fn transfer_time(self, bytes: u64) -> SimTime {
        if bytes == 0 {
            return SimTime::ZERO;
        }
        SimTime((bytes as f64 / self.0 * 1e9).ceil() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot parse {quantity} from {input:?}: {reason}")]
pub struct UnitError {
    pub quantity: &'static str,
    pub input: String,
    pub reason: String,
}

fn split_value(quantity: &'static str, s: &str) -> Result<(f64, String), UnitError> {
    let err = |reason: &str| UnitError {
        quantity,
        input: s.to_string(),
        reason: reason.to_string(),
    };
    let t = s.trim();
    let idx = t
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+' || c == 'e' || c == 'E'))
        .ok_or_else(|| err("missing unit"))?;
    let (num, unit) = t.split_at(idx);
    let value: f64 = num.trim().parse().map_err(|_| err("bad number"))?;
    if !value.is_finite() || value < 0.0 {
        return Err(err("value must be finite and non-negative"));
    }
    let unit = unit.trim();
    if unit.is_empty() {
        return Err(err("missing unit"));
    }
    Ok((value, unit.to_string()))
}

pub fn parse_bytes(s: &str) -> Result<u64, UnitError> {
    let (v, unit) = split_value("bytes", s)?;
    let mult = match unit.as_str() {
        "B" | "bytes" => 1.0,
        "KiB" => KIB as f64,
        "MiB" => MIB as f64,
        "GiB" => GIB as f64,
        "KB" | "kB" => 1e3,
        "MB" => 1e6,
        "GB" => 1e9,
        _ => {
            return Err(UnitError {
                quantity: "bytes",
                input: s.to_string(),
                reason: format!("unknown unit {unit:?}"),
            })
        }
    };
    Ok((v * mult).round() as u64)
}

pub fn parse_time(s: &str) -> Result<SimTime, UnitError> {
    let (v, unit) = split_value("time", s)?;
    let secs = match unit.as_str() {
        "s" => v,
        "ms" => v * 1e-3,
        "us" | "µs" => v * 1e-6,
        "ns" => v * 1e-9,
        _ => {
            return Err(UnitError {
                quantity: "time",
                input: s.to_string(),
                reason: format!("unknown unit {unit:?}"),
            })
        }
    };
    Ok(SimTime::from_secs_f64(secs))
}

/// Seconds as a float with explicit unit, for per-token cost coefficients that
/// are far below a nanosecond granularity concern.
pub fn parse_seconds_f64(s: &str) -> Result<f64, UnitError> {
    let (v, unit) = split_value("time", s)?;
    match unit.as_str() {
        "s" => Ok(v),
        "ms" => Ok(v * 1e-3),
        "us" | "µs" => Ok(v * 1e-6),
        "ns" => Ok(v * 1e-9),
        _ => Err(UnitError {
            quantity: "time",
            input: s.to_string(),
            reason: format!("unknown unit {unit:?}"),
        }),
    }
}

pub fn parse_bandwidth(s: &str) -> Result<Bandwidth, UnitError> {
    let (v, unit) = split_value("bandwidth", s)?;
    let bps = match unit.as_str() {
        "Gbps" => v * 1e9 / 8.0,
        "Mbps" => v * 1e6 / 8.0,
        "GB/s" => v * 1e9,
        "MB/s" => v * 1e6,
        "GiB/s" => v * GIB as f64,
        "MiB/s" => v * MIB as f64,
        "B/s" => v,
        _ => {
            return Err(UnitError {
                quantity: "bandwidth",
                input: s.to_string(),
                reason: format!("unknown unit {unit:?}"),
            })
        }
    };
    if bps <= 0.0 {
        return Err(UnitError {
            quantity: "bandwidth",
            input: s.to_string(),
            reason: "must be positive".into(),
        });
    }
    Ok(Bandwidth(bps))
}

pub fn parse_tokens(s: &str) -> Result<u32, UnitError> {
    let (v, unit) = split_value("tokens", s)?;
    if unit != "tokens" && unit != "token" {
        return Err(UnitError {
            quantity: "tokens",
            input: s.to_string(),
            reason: format!("expected unit \"tokens\", got {unit:?}"),
        });
    }
    if v.fract() != 0.0 {
        return Err(UnitError {
            quantity: "tokens",
            input: s.to_string(),
            reason: "token counts are integral".into(),
        });
    }
    Ok(v as u32)
}

pub fn parse_rate(s: &str) -> Result<f64, UnitError> {
    let (v, unit) = split_value("rate", s)?;
    if unit != "req/s" {
        return Err(UnitError {
            quantity: "rate",
            input: s.to_string(),
            reason: format!("expected unit \"req/s\", got {unit:?}"),
        });
    }
    if v <= 0.0 {
        return Err(UnitError {
            quantity: "rate",
            input: s.to_string(),
            reason: "rate must be positive".into(),
        });
    }
    Ok(v)
}

macro_rules! unit_string_serde {
    ($name:ident, $inner:ty, $parse:expr, $fmt:expr) => {
        /// Serde adapter that reads and writes this quantity as a unit-suffixed string.
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct $name(pub $inner);

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                let f: fn(&$inner) -> String = $fmt;
                s.serialize_str(&f(&self.0))
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(d)?;
                let p: fn(&str) -> Result<$inner, UnitError> = $parse;
                p(&raw).map($name).map_err(de::Error::custom)
            }
        }
    };
}

unit_string_serde!(ByteQty, u64, parse_bytes, |b| format!("{b} B"));
unit_string_serde!(TimeQty, SimTime, parse_time, |t| format!("{} ns", t.0));
unit_string_serde!(SecondsQty, f64, parse_seconds_f64, |v| format!("{v:e} s"));
unit_string_serde!(BandwidthQty, Bandwidth, parse_bandwidth, |b| format!("{} B/s", b.0));
unit_string_serde!(TokenQty, u32, parse_tokens, |t| format!("{t} tokens"));
unit_string_serde!(RateQty, f64, parse_rate, |r| format!("{r} req/s"));

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_common_units() {
        assert_eq!(parse_bytes("2 MiB").unwrap(), 2 * MIB);
        assert_eq!(parse_bytes("80GiB").unwrap(), 80 * GIB);
        assert_eq!(parse_time("0.1 ms").unwrap(), SimTime(100_000));
        assert_eq!(parse_tokens("50 tokens").unwrap(), 50);
        assert!((parse_bandwidth("100 Gbps").unwrap().0 - 12.5e9).abs() < 1.0);
        assert_eq!(parse_rate("3 req/s").unwrap(), 3.0);
    }

    #[test]
    fn rejects_bare_numbers() {
        assert!(parse_bytes("2048").is_err());
        assert!(parse_time("5").is_err());
        assert!(parse_tokens("50").is_err());
        assert!(parse_bandwidth("100").is_err());
    }

    #[test]
    fn transfer_time_arithmetic() {
        // 100 MB over 100 Gbps is 8 ms.
        let t = Bandwidth::gbps(100.0).transfer_time(100_000_000);
        assert_eq!(t, SimTime::from_millis(8));
        assert_eq!(Bandwidth::gbps(1.0).transfer_time(0), SimTime::ZERO);
    }
}
