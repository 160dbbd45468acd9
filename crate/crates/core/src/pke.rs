//! Passive keyless entry.
//!
//! The vehicle keeps a list of valid keys and a list of active (connected)
//! ones. Each connected key's RSSI is smoothed by a running median and
//! classified:
//!
//! * region A: not connected,
//! * region B: connected, smoothed RSSI at or below the threshold (or too
//!   few samples yet),
//! * region C: connected, smoothed RSSI above the threshold.
//!
//! A key already in C stays there until its median drops to
//! `threshold - hysteresis` or below. A door-handle pull unlocks only while
//! some key is in C. When the last key leaves, a lock fires after the
//! configured timeout unless a key reconnects first.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimTime;

#[derive(Debug, Error, PartialEq)]
pub enum PkeError {
    #[error("rssi threshold {0} dBm outside [-120, 10]")]
    BadThreshold(f64),
    #[error("lock timeout must be positive")]
    BadTimeout,
    #[error("rssi window must hold at least one sample")]
    BadWindow,
    #[error("hysteresis must be non-negative")]
    BadHysteresis,
    #[error("waypoint times must be strictly increasing (at {0})")]
    UnorderedWaypoints(SimTime),
    #[error("mobility trace has no waypoints")]
    EmptyTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PkeConfig {
    pub rssi_threshold_dbm: f64,
    pub hysteresis_db: f64,
    pub lock_timeout_s: f64,
    pub rssi_window: usize,
    pub connection_interval_ms: f64,
    /// Documentation only.
    pub nominal_range_m: f64,
}

impl Default for PkeConfig {
    fn default() -> Self {
        PkeConfig {
            rssi_threshold_dbm: -55.0,
            hysteresis_db: 3.0,
            lock_timeout_s: 30.0,
            rssi_window: 5,
            connection_interval_ms: 100.0,
            nominal_range_m: 25.0,
        }
    }
}

impl PkeConfig {
    pub fn validate(&self) -> Result<(), PkeError> {
        if !(-120.0..=10.0).contains(&self.rssi_threshold_dbm) {
            return Err(PkeError::BadThreshold(self.rssi_threshold_dbm));
        }
        if !(self.lock_timeout_s > 0.0) {
            return Err(PkeError::BadTimeout);
        }
        if self.rssi_window == 0 {
            return Err(PkeError::BadWindow);
        }
        if !(self.hysteresis_db >= 0.0) {
            return Err(PkeError::BadHysteresis);
        }
        Ok(())
    }

    pub fn lock_timeout_us(&self) -> u64 {
        (self.lock_timeout_s * 1e6).round() as u64
    }

    pub fn connection_interval_us(&self) -> u64 {
        (self.connection_interval_ms * 1e3).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyState {
    Undiscovered,
    AdvertisingSeen,
    Connected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Region {
    A,
    B,
    C,
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Region::A => "A",
            Region::B => "B",
            Region::C => "C",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyRecord {
    pub name: String,
    pub address: [u8; 4],
    pub pass_code: Vec<u8>,
    pub state: KeyState,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PkeEvent {
    AdvertisementReceived { address: [u8; 4] },
    Connected { address: [u8; 4], at: SimTime },
    ConnectFailed { address: [u8; 4] },
    Disconnected { address: [u8; 4], at: SimTime },
    ScanTick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PkeAction {
    Connect { key: usize, pass_code: Vec<u8> },
    /// The lock should fire at `at` unless cancelled.
    ArmLockTimer { at: SimTime },
    CancelLockTimer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PullOutcome {
    pub unlocked: bool,
    pub key: Option<usize>,
    /// Age of the newest region-C sample behind the decision.
    pub latency_us: Option<u64>,
}

#[derive(Debug, Clone)]
struct KeyRuntime {
    window: VecDeque<f64>,
    region: Region,
    last_c_sample: Option<SimTime>,
}

#[derive(Debug, Clone)]
pub struct PkeState {
    pub config: PkeConfig,
    keys: Vec<KeyRecord>,
    runtime: Vec<KeyRuntime>,
    locked: bool,
    empty_since: Option<SimTime>,
    /// Advertisements from addresses not on the valid list.
    pub ignored_advertisements: u64,
    /// RSSI samples for keys that were not connected.
    pub ignored_samples: u64,
}

fn median(window: &VecDeque<f64>) -> f64 {
    let mut v: Vec<f64> = window.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl PkeState {
    pub fn new(config: PkeConfig, keys: Vec<(String, [u8; 4], Vec<u8>)>) -> Result<Self, PkeError> {
        config.validate()?;
        let keys: Vec<KeyRecord> = keys
            .into_iter()
            .map(|(name, address, pass_code)| KeyRecord { name, address, pass_code, state: KeyState::Undiscovered })
            .collect();
        let runtime = keys
            .iter()
            .map(|_| KeyRuntime { window: VecDeque::with_capacity(config.rssi_window), region: Region::A, last_c_sample: None })
            .collect();
        Ok(PkeState { config, keys, runtime, locked: true, empty_since: None, ignored_advertisements: 0, ignored_samples: 0 })
    }

    pub fn keys(&self) -> &[KeyRecord] {
        &self.keys
    }

    pub fn key_index(&self, address: [u8; 4]) -> Option<usize> {
        self.keys.iter().position(|k| k.address == address)
    }

    pub fn active_keys(&self) -> impl Iterator<Item = usize> + '_ {
        self.keys.iter().enumerate().filter(|(_, k)| k.state == KeyState::Connected).map(|(i, _)| i)
    }

    pub fn region(&self, key: usize) -> Region {
        self.runtime[key].region
    }

    pub fn smoothed_rssi(&self, key: usize) -> Option<f64> {
        let w = &self.runtime[key].window;
        (!w.is_empty()).then(|| median(w))
    }

    pub fn is_locked(&self) -> bool {
        self.locked
    }

    pub fn connection_manager_step(&mut self, event: PkeEvent) -> Vec<PkeAction> {
        let mut actions = Vec::new();
        match event {
            PkeEvent::ScanTick => {}
            PkeEvent::AdvertisementReceived { address } => match self.key_index(address) {
                None => self.ignored_advertisements += 1,
                Some(i) => {
                    if self.keys[i].state != KeyState::Connected {
                        self.keys[i].state = KeyState::AdvertisingSeen;
                        actions.push(PkeAction::Connect { key: i, pass_code: self.keys[i].pass_code.clone() });
                    }
                }
            },
            PkeEvent::Connected { address, .. } => {
                if let Some(i) = self.key_index(address) {
                    let was_empty = self.active_keys().next().is_none();
                    self.keys[i].state = KeyState::Connected;
                    self.reset_runtime(i, Region::B);
                    if was_empty {
                        self.empty_since = None;
                        actions.push(PkeAction::CancelLockTimer);
                    }
                }
            }
            PkeEvent::ConnectFailed { address } => {
                if let Some(i) = self.key_index(address) {
                    if self.keys[i].state == KeyState::AdvertisingSeen {
                        self.keys[i].state = KeyState::Undiscovered;
                    }
                }
            }
            PkeEvent::Disconnected { address, at } => {
                if let Some(i) = self.key_index(address) {
                    if self.keys[i].state == KeyState::Connected {
                        self.keys[i].state = KeyState::Undiscovered;
                        self.reset_runtime(i, Region::A);
                        if self.active_keys().next().is_none() {
                            self.empty_since = Some(at);
                            actions.push(PkeAction::ArmLockTimer { at: at + self.config.lock_timeout_us() });
                        }
                    }
                }
            }
        }
        actions
    }

    fn reset_runtime(&mut self, key: usize, region: Region) {
        let rt = &mut self.runtime[key];
        rt.window.clear();
        rt.region = region;
        rt.last_c_sample = None;
    }

    /// Adds one RSSI sample taken at a connection event.
    pub fn rssi_update(&mut self, key: usize, rssi_dbm: f64, at: SimTime) -> Region {
        if self.keys.get(key).map(|k| k.state) != Some(KeyState::Connected) {
            self.ignored_samples += 1;
            return Region::A;
        }
        let cfg = &self.config;
        let rt = &mut self.runtime[key];
        if rt.window.len() == cfg.rssi_window {
            rt.window.pop_front();
        }
        rt.window.push_back(rssi_dbm);
        let region = if rt.window.len() < cfg.rssi_window {
            Region::B
        } else {
            let m = median(&rt.window);
            let bar = if rt.region == Region::C { cfg.rssi_threshold_dbm - cfg.hysteresis_db } else { cfg.rssi_threshold_dbm };
            if m > bar {
                Region::C
            } else {
                Region::B
            }
        };
        rt.region = region;
        rt.last_c_sample = (region == Region::C).then_some(at);
        region
    }

    pub fn handle_pull(&mut self, at: SimTime) -> PullOutcome {
        let best = self
            .active_keys()
            .filter(|&i| self.runtime[i].region == Region::C)
            .filter_map(|i| self.runtime[i].last_c_sample.map(|t| (i, t)))
            .max_by_key(|&(i, t)| (t, std::cmp::Reverse(i)));
        match best {
            Some((i, t)) => {
                self.locked = false;
                PullOutcome { unlocked: true, key: Some(i), latency_us: Some(at.saturating_sub(t)) }
            }
            None => PullOutcome { unlocked: false, key: None, latency_us: None },
        }
    }

    /// Locks once no key has been active for the whole timeout.
    pub fn lock_timer(&mut self, at: SimTime) -> bool {
        let due = self.active_keys().next().is_none()
            && self.empty_since.is_some_and(|t0| at.saturating_sub(t0) >= self.config.lock_timeout_us());
        if due {
            self.locked = true;
            self.empty_since = None;
        }
        due
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserAction {
    Pull,
    Release,
}

/// Scripted key movement and user actions.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityTrace {
    pub key: String,
    /// (time, distance to the vehicle in m), strictly increasing in time.
    pub waypoints: Vec<(SimTime, f64)>,
    pub actions: Vec<(SimTime, UserAction)>,
}

impl MobilityTrace {
    pub fn validate(&self) -> Result<(), PkeError> {
        if self.waypoints.is_empty() {
            return Err(PkeError::EmptyTrace);
        }
        for w in self.waypoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(PkeError::UnorderedWaypoints(w[1].0));
            }
        }
        Ok(())
    }

    /// Linear interpolation, held constant outside the waypoints.
    pub fn distance_at(&self, t: SimTime) -> f64 {
        crate::phy::interpolate(&self.waypoints, t)
    }

    /// Parses rows of `time_s,distance_m,action` with an optional header and
    /// an empty action column for plain waypoints.
    pub fn from_csv(key: &str, text: &str) -> Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut trace = MobilityTrace { key: key.to_string(), waypoints: Vec::new(), actions: Vec::new() };
        for (line, row) in reader.records().enumerate() {
            let row = row.map_err(|e| format!("line {}: {e}", line + 1))?;
            let Some(first) = row.get(0) else { continue };
            if first.is_empty() || first.starts_with('#') || (line == 0 && first == "time_s") {
                continue;
            }
            let t: f64 = first.parse().map_err(|_| format!("line {}: bad time_s {first:?}", line + 1))?;
            let t = SimTime::from_secs_f64(t);
            if let Some(d) = row.get(1).filter(|s| !s.is_empty()) {
                let d: f64 = d.parse().map_err(|_| format!("line {}: bad distance_m {d:?}", line + 1))?;
                trace.waypoints.push((t, d));
            }
            match row.get(2).unwrap_or("") {
                "" => {}
                "pull" => trace.actions.push((t, UserAction::Pull)),
                "release" => trace.actions.push((t, UserAction::Release)),
                other => return Err(format!("line {}: unknown action {other:?}", line + 1)),
            }
        }
        trace.validate().map_err(|e| e.to_string())?;
        Ok(trace)
    }
}
