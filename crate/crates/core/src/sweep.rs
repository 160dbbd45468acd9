//! Parameter sweeps.
//!
//! A sweep edits one key of the scenario document per value, runs each
//! edited scenario for every seed in parallel and collects one CSV row per
//! (value, seed). Rows come out sorted by value, then seed, whatever order
//! the runs finish in.
//!
//! Keys are dotted paths into the TOML document. `name[*]` applies to every
//! element of an array of tables and `name[i]` to one. Two aliases exist:
//! `seed` (the run seed) and `connection-interval`, which sets every sensor
//! period, every explicit schedule interval and the keyless-entry interval,
//! and accepts `s`, `ms` or `us` suffixes (bare numbers are ms).

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use toml::{Table, Value};

use crate::runner::{run_scenario, RunError, RunOptions, RunOutput};
use crate::scenario::{Scenario, ScenarioError};

#[derive(Debug, Clone, PartialEq)]
pub enum SweepError {
    UnknownKey(String),
    BadValue { value: String, reason: String },
    Scenario { value: String, error: ScenarioError },
    Run { value: String, seed: u64, error: RunError },
}

impl fmt::Display for SweepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepError::UnknownKey(k) => write!(f, "unknown scenario key `{k}`"),
            SweepError::BadValue { value, reason } => write!(f, "bad sweep value {value:?}: {reason}"),
            SweepError::Scenario { value, error } => write!(f, "value {value:?}: {error}"),
            SweepError::Run { value, seed, error } => write!(f, "value {value:?}, seed {seed}: {error}"),
        }
    }
}

impl std::error::Error for SweepError {}

pub const SWEEP_HEADER: &str = "value,seed,delivery_ratio,mean_delay_us,p95_delay_us,goodput_bps,average_current_ma,battery_life_hours,pulls,unlocks,locks\n";

/// Splits `a,b,c`, or expands an integer range `a..b` (exclusive) or `a..=b`.
pub fn parse_values(list: &str) -> Result<Vec<String>, SweepError> {
    let list = list.trim();
    if list.is_empty() {
        return Ok(Vec::new());
    }
    if let Some((a, b)) = list.split_once("..") {
        let (b, inclusive) = match b.strip_prefix('=') {
            Some(b) => (b, true),
            None => (b, false),
        };
        let bad = |reason: &str| SweepError::BadValue { value: list.to_string(), reason: reason.to_string() };
        let a: i64 = a.trim().parse().map_err(|_| bad("range bounds must be integers"))?;
        let b: i64 = b.trim().parse().map_err(|_| bad("range bounds must be integers"))?;
        let end = if inclusive { b + 1 } else { b };
        return Ok((a..end).map(|v| v.to_string()).collect());
    }
    Ok(list.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect())
}

#[derive(Debug, Clone)]
enum Seg {
    Key(String),
    All,
    Index(usize),
}

fn parse_path(key: &str) -> Result<Vec<Seg>, SweepError> {
    let unknown = || SweepError::UnknownKey(key.to_string());
    let mut segs = Vec::new();
    for part in key.split('.') {
        let (name, rest) = match part.find('[') {
            Some(i) => (&part[..i], &part[i..]),
            None => (part, ""),
        };
        if name.is_empty() {
            return Err(unknown());
        }
        segs.push(Seg::Key(name.to_string()));
        let mut rest = rest;
        while let Some(r) = rest.strip_prefix('[') {
            let close = r.find(']').ok_or_else(unknown)?;
            let idx = &r[..close];
            segs.push(if idx == "*" { Seg::All } else { Seg::Index(idx.parse().map_err(|_| unknown())?) });
            rest = &r[close + 1..];
        }
        if !rest.is_empty() {
            return Err(unknown());
        }
    }
    Ok(segs)
}

/// Sets the leaf of `path` under `table`. Every parent must exist. Returns
/// the number of places written.
fn set_path(table: &mut Table, path: &[Seg], value: &Value) -> usize {
    fn walk(v: &mut Value, path: &[Seg], value: &Value) -> usize {
        match (path.first(), v) {
            (None, _) => 0,
            (Some(Seg::All), Value::Array(items)) => items.iter_mut().map(|i| walk(i, &path[1..], value)).sum(),
            (Some(Seg::Index(i)), Value::Array(items)) => items.get_mut(*i).map_or(0, |i| walk(i, &path[1..], value)),
            (Some(Seg::Key(k)), Value::Table(t)) => {
                if path.len() == 1 {
                    t.insert(k.clone(), value.clone());
                    1
                } else {
                    t.get_mut(k).map_or(0, |child| walk(child, &path[1..], value))
                }
            }
            _ => 0,
        }
    }
    let mut root = Value::Table(std::mem::take(table));
    let n = walk(&mut root, path, value);
    if let Value::Table(t) = root {
        *table = t;
    }
    n
}

fn typed(value: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

/// Interval in ms from `500ms`, `0.5s`, `500000us` or a bare number of ms.
pub fn parse_interval_ms(value: &str) -> Result<f64, SweepError> {
    let v = value.trim();
    let (num, scale) = if let Some(n) = v.strip_suffix("us") {
        (n, 1e-3)
    } else if let Some(n) = v.strip_suffix("ms") {
        (n, 1.0)
    } else if let Some(n) = v.strip_suffix('s') {
        (n, 1e3)
    } else {
        (v, 1.0)
    };
    let n: f64 = num.trim().parse().map_err(|_| SweepError::BadValue { value: value.to_string(), reason: "expected a duration".into() })?;
    if !(n > 0.0) {
        return Err(SweepError::BadValue { value: value.to_string(), reason: "interval must be positive".into() });
    }
    Ok(n * scale)
}

/// The scenario document with `key` set to `value`.
pub fn apply(doc: &Table, key: &str, value: &str) -> Result<Table, SweepError> {
    let mut doc = doc.clone();
    match key {
        "seed" => {
            let seed: i64 = value.parse().map_err(|_| SweepError::BadValue { value: value.to_string(), reason: "seed must be an integer".into() })?;
            if set_path(&mut doc, &parse_path("run.seed")?, &Value::Integer(seed)) == 0 {
                return Err(SweepError::UnknownKey(key.to_string()));
            }
        }
        "connection-interval" => {
            let ms = Value::Float(parse_interval_ms(value)?);
            let n = ["sensors[*].period_ms", "schedule.entries[*].interval_ms", "pke.connection_interval_ms"]
                .iter()
                .map(|p| parse_path(p).map(|p| set_path(&mut doc, &p, &ms)))
                .sum::<Result<usize, _>>()?;
            if n == 0 {
                return Err(SweepError::UnknownKey(key.to_string()));
            }
        }
        _ => {
            if set_path(&mut doc, &parse_path(key)?, &typed(value)) == 0 {
                return Err(SweepError::UnknownKey(key.to_string()));
            }
        }
    }
    Ok(doc)
}

fn sort_key(key: &str, value: &str) -> f64 {
    if key == "connection-interval" {
        return parse_interval_ms(value).unwrap_or(f64::NAN);
    }
    value.parse().unwrap_or(f64::NAN)
}

/// One row of the combined CSV.
pub fn row(value: &str, out: &RunOutput, battery_mah: f64) -> String {
    let r = &out.report;
    let delays: Vec<_> = r.sensors.values().filter(|s| s.delivered > 0).collect();
    let mean_delay = if delays.is_empty() {
        0.0
    } else {
        delays.iter().map(|s| s.mean_delay_us * s.delivered as f64).sum::<f64>() / delays.iter().map(|s| s.delivered as f64).sum::<f64>()
    };
    let p95 = r.sensors.values().map(|s| s.p95_delay_us).max().unwrap_or(0);
    let (current, life) = if r.energy.is_empty() {
        (String::new(), String::new())
    } else {
        let avg = r.energy.values().map(|e| e.average_current_ma).sum::<f64>() / r.energy.len() as f64;
        (format!("{avg:.9}"), format!("{:.2}", battery_mah / avg))
    };
    let (pulls, unlocks, locks) = out.pke.as_ref().map_or((0, 0, 0), |p| (p.pulls.len(), p.unlocks(), p.locks.len()));
    let value = if value.contains([',', '"']) { format!("\"{}\"", value.replace('"', "\"\"")) } else { value.to_string() };
    format!(
        "{value},{},{:.6},{mean_delay:.3},{p95},{:.3},{current},{life},{pulls},{unlocks},{locks}\n",
        out.seed, r.delivery_ratio, r.goodput_bps
    )
}

/// Runs every (value, seed) pair and returns the combined CSV. With
/// `seeds = n` each value runs seeds `s..s+n` where `s` is the scenario's
/// own seed; the `seed` key sweeps the seed directly and ignores `seeds`.
pub fn sweep(text: &str, base_dir: Option<&Path>, key: &str, values: &[String], seeds: u64) -> Result<String, SweepError> {
    let doc: Table = toml::from_str(text).map_err(|e| SweepError::Scenario {
        value: String::new(),
        error: ScenarioError::Parse(e.to_string().trim_end().to_string()),
    })?;
    parse_path(key)?;

    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        sort_key(key, &values[a]).total_cmp(&sort_key(key, &values[b])).then_with(|| values[a].cmp(&values[b]))
    });

    let mut jobs = Vec::new();
    for &i in &order {
        let value = &values[i];
        let edited = apply(&doc, key, value)?;
        let body = toml::to_string(&edited).map_err(|e| SweepError::BadValue { value: value.clone(), reason: e.to_string() })?;
        let scenario = Scenario::from_toml_str(&body, base_dir).map_err(|error| match &error {
            ScenarioError::Parse(m) if m.contains("unknown field") => SweepError::UnknownKey(key.to_string()),
            _ => SweepError::Scenario { value: value.clone(), error },
        })?;
        let seed_list: Vec<u64> = if key == "seed" { vec![scenario.seed] } else { (0..seeds.max(1)).map(|k| scenario.seed + k).collect() };
        let scenario = std::sync::Arc::new(scenario);
        for seed in seed_list {
            jobs.push((value.clone(), seed, scenario.clone()));
        }
    }

    let rows: Vec<Result<String, SweepError>> = jobs
        .par_iter()
        .map(|(value, seed, scenario)| {
            let out = run_scenario(scenario, &RunOptions { seed: Some(*seed), ..Default::default() })
                .map_err(|error| SweepError::Run { value: value.clone(), seed: *seed, error })?;
            Ok(row(value, &out, scenario.energy.battery_mah))
        })
        .collect();

    let mut csv = String::from(SWEEP_HEADER);
    for r in rows {
        csv.push_str(&r?);
    }
    Ok(csv)
}
