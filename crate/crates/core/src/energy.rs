//! Battery life of a slave node.
//!
//! A node draws a fixed charge per connection event and a sleep current the
//! rest of the time. The cost of an event does not depend on its payload or
//! on whether its frames got through.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("{0} must be strictly positive")]
    NotPositive(&'static str),
    #[error("connection interval {interval_ms} ms does not exceed the event duration {event_ms} ms")]
    IntervalTooShort { interval_ms: f64, event_ms: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyParams {
    pub event_current_ma: f64,
    pub event_duration_ms: f64,
    pub sleep_current_ua: f64,
    pub battery_mah: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams { event_current_ma: 10.655, event_duration_ms: 2.348, sleep_current_ua: 0.9, battery_mah: 230.0 }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<(), EnergyError> {
        for (v, name) in [
            (self.event_current_ma, "event_current_ma"),
            (self.event_duration_ms, "event_duration_ms"),
            (self.sleep_current_ua, "sleep_current_ua"),
            (self.battery_mah, "battery_mah"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnergyError::NotPositive(name));
            }
        }
        Ok(())
    }

    pub fn sleep_current_ma(&self) -> f64 {
        self.sleep_current_ua / 1000.0
    }
}

/// Mean current in mA for one event per `interval_ms`.
pub fn average_current(params: &EnergyParams, interval_ms: f64) -> Result<f64, EnergyError> {
    params.validate()?;
    if !(interval_ms > params.event_duration_ms) {
        return Err(EnergyError::IntervalTooShort { interval_ms, event_ms: params.event_duration_ms });
    }
    let awake = params.event_current_ma * params.event_duration_ms;
    let asleep = params.sleep_current_ma() * (interval_ms - params.event_duration_ms);
    Ok((awake + asleep) / interval_ms)
}

/// Hours until the battery is empty at a constant `average_ma`.
pub fn battery_life_hours(params: &EnergyParams, average_ma: f64) -> Result<f64, EnergyError> {
    if !(average_ma > 0.0) {
        return Err(EnergyError::NotPositive("average current"));
    }
    Ok(params.battery_mah / average_ma)
}

/// Rounds to `decimals` places, for reproducing figures quoted with rounded
/// intermediate steps.
pub fn round_to(x: f64, decimals: i32) -> f64 {
    let k = 10f64.powi(decimals);
    (x * k).round() / k
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergySummary {
    pub events: u64,
    pub duration_ms: f64,
    pub consumed_mah: f64,
    pub average_current_ma: f64,
    pub projected_life_hours: f64,
}

/// Charge drawn by `events` connection events over `duration_ms`, and the
/// battery life that average current implies.
pub fn measured_energy(params: &EnergyParams, events: u64, duration_ms: f64) -> Result<EnergySummary, EnergyError> {
    params.validate()?;
    if !(duration_ms > 0.0) {
        return Err(EnergyError::NotPositive("duration"));
    }
    let awake_ms = events as f64 * params.event_duration_ms;
    let asleep_ms = (duration_ms - awake_ms).max(0.0);
    let charge_ma_ms = awake_ms * params.event_current_ma + asleep_ms * params.sleep_current_ma();
    let average = charge_ma_ms / duration_ms;
    Ok(EnergySummary {
        events,
        duration_ms,
        consumed_mah: charge_ma_ms / 3_600_000.0,
        average_current_ma: average,
        projected_life_hours: params.battery_mah / average,
    })
}
