//! Delay decomposition and run-level aggregates.
//!
//! A delivered reading's delay splits into queueing (reading until the start
//! of the frame that finally got through, so retransmission waits count
//! here), transmission (that frame's airtime) and propagation. Queueing plus
//! transmission equals delivery minus reading time exactly in µs; the
//! nanosecond propagation term is kept on the side.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::energy::{measured_energy, EnergyParams, EnergySummary};
use crate::link::packet::{MAX_DATA_FRAME, MIN_ADV_FRAME, US_PER_BYTE};
use crate::phy::{CHANNEL_COUNT, SPEED_OF_LIGHT};
use crate::sim::SimTime;
use crate::NodeId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("packet length {0} bytes outside [{MIN_ADV_FRAME}, {MAX_DATA_FRAME}]")]
    LengthOutOfBounds(usize),
}

/// Airtime in µs of a frame of `len_bytes` at 1 Mbps.
pub fn transmission_delay(len_bytes: usize) -> Result<u64, MetricsError> {
    if !(MIN_ADV_FRAME..=MAX_DATA_FRAME).contains(&len_bytes) {
        return Err(MetricsError::LengthOutOfBounds(len_bytes));
    }
    Ok(len_bytes as u64 * US_PER_BYTE)
}

/// Free-space propagation delay in ns.
pub fn propagation_delay(distance_m: f64) -> f64 {
    distance_m.max(0.0) / SPEED_OF_LIGHT * 1e9
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayRecord {
    pub sensor: NodeId,
    pub reading_time: SimTime,
    pub delivery_time: SimTime,
    pub transmission_us: u64,
    pub queueing_us: u64,
    pub propagation_ns: f64,
    pub retransmissions: u32,
}

impl DelayRecord {
    /// `tx_start..tx_end` is the successful frame; `attempts` counts every
    /// time the payload went on air.
    pub fn new(sensor: NodeId, reading: SimTime, tx_start: SimTime, tx_end: SimTime, distance_m: f64, attempts: u32) -> Self {
        debug_assert!(reading <= tx_start && tx_start <= tx_end);
        DelayRecord {
            sensor,
            reading_time: reading,
            delivery_time: tx_end,
            transmission_us: tx_end - tx_start,
            queueing_us: tx_start - reading,
            propagation_ns: propagation_delay(distance_m),
            retransmissions: attempts.saturating_sub(1),
        }
    }

    pub fn total_us(&self) -> u64 {
        self.delivery_time - self.reading_time
    }

    pub fn closes(&self) -> bool {
        self.queueing_us + self.transmission_us == self.total_us()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelCounts {
    pub events: u64,
    pub failures: u64,
}

/// Raw counters filled in by the runner.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub duration: SimTime,
    pub delays: Vec<DelayRecord>,
    /// Readings generated per sensor.
    pub readings: BTreeMap<NodeId, u64>,
    /// Payload bytes offered per sensor.
    pub offered_bytes: BTreeMap<NodeId, u64>,
    /// Payload bytes delivered per sensor.
    pub delivered_bytes: BTreeMap<NodeId, u64>,
    /// Connection events per slave, counted up to `duration`.
    pub events: BTreeMap<NodeId, u64>,
    pub channels: Vec<ChannelCounts>,
}

impl RunLog {
    pub fn new() -> Self {
        RunLog { channels: vec![ChannelCounts::default(); usize::from(CHANNEL_COUNT)], ..Default::default() }
    }

    pub fn record_reading(&mut self, sensor: NodeId, bytes: usize) {
        *self.readings.entry(sensor).or_default() += 1;
        *self.offered_bytes.entry(sensor).or_default() += bytes as u64;
    }

    pub fn record_delivery(&mut self, record: DelayRecord, bytes: usize) {
        *self.delivered_bytes.entry(record.sensor).or_default() += bytes as u64;
        self.delays.push(record);
    }

    pub fn record_event(&mut self, channel: u8, failed: bool) {
        let c = &mut self.channels[usize::from(channel)];
        c.events += 1;
        c.failures += u64::from(failed);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorStats {
    pub readings: u64,
    pub delivered: u64,
    pub mean_delay_us: f64,
    pub p95_delay_us: u64,
    pub max_delay_us: u64,
    pub mean_queueing_us: f64,
    pub mean_transmission_us: f64,
    pub retransmissions: u64,
    pub goodput_bps: f64,
    pub offered_bps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub duration: SimTime,
    pub sensors: BTreeMap<NodeId, SensorStats>,
    pub delivery_ratio: f64,
    pub goodput_bps: f64,
    pub offered_bps: f64,
    pub channels: Vec<ChannelCounts>,
    pub energy: BTreeMap<NodeId, EnergySummary>,
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn finalize_run(log: &RunLog, energy: &EnergyParams) -> RunReport {
    let secs = log.duration.as_secs_f64();
    let rate = |bytes: u64| if secs > 0.0 { bytes as f64 * 8.0 / secs } else { 0.0 };

    let mut by_sensor: BTreeMap<NodeId, Vec<&DelayRecord>> = BTreeMap::new();
    for d in &log.delays {
        by_sensor.entry(d.sensor).or_default().push(d);
    }
    let mut sensors = BTreeMap::new();
    let ids: std::collections::BTreeSet<NodeId> = log.readings.keys().chain(by_sensor.keys()).copied().collect();
    for id in ids {
        let recs = by_sensor.get(&id).map(Vec::as_slice).unwrap_or(&[]);
        let mut totals: Vec<u64> = recs.iter().map(|r| r.total_us()).collect();
        totals.sort_unstable();
        let n = recs.len() as f64;
        let mean = |f: &dyn Fn(&DelayRecord) -> u64| {
            if recs.is_empty() {
                0.0
            } else {
                recs.iter().map(|r| f(r) as f64).sum::<f64>() / n
            }
        };
        sensors.insert(
            id,
            SensorStats {
                readings: log.readings.get(&id).copied().unwrap_or(0),
                delivered: recs.len() as u64,
                mean_delay_us: mean(&|r| r.total_us()),
                p95_delay_us: percentile(&totals, 0.95),
                max_delay_us: totals.last().copied().unwrap_or(0),
                mean_queueing_us: mean(&|r| r.queueing_us),
                mean_transmission_us: mean(&|r| r.transmission_us),
                retransmissions: recs.iter().map(|r| u64::from(r.retransmissions)).sum(),
                goodput_bps: rate(log.delivered_bytes.get(&id).copied().unwrap_or(0)),
                offered_bps: rate(log.offered_bytes.get(&id).copied().unwrap_or(0)),
            },
        );
    }

    let readings: u64 = log.readings.values().sum();
    let delivered = log.delays.len() as u64;
    let delivery_ratio = if readings == 0 { 1.0 } else { (delivered as f64 / readings as f64).min(1.0) };

    let duration_ms = log.duration.as_millis_f64();
    let energy = log
        .events
        .iter()
        .filter_map(|(id, &n)| measured_energy(energy, n, duration_ms).ok().map(|e| (*id, e)))
        .collect();

    RunReport {
        duration: log.duration,
        delivery_ratio,
        goodput_bps: sensors.values().map(|s| s.goodput_bps).sum(),
        offered_bps: sensors.values().map(|s| s.offered_bps).sum(),
        sensors,
        channels: log.channels.clone(),
        energy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transmission_delay_examples() {
        assert_eq!(transmission_delay(20), Ok(160));
        assert_eq!(transmission_delay(47), Ok(376));
        assert_eq!(transmission_delay(10), Ok(80));
        assert!(transmission_delay(48).is_err());
        assert!(transmission_delay(7).is_err());
    }

    #[test]
    fn propagation_examples() {
        // d / 2.998e8 m/s
        assert!((propagation_delay(3.0) - 10.007).abs() < 1e-3);
        assert_eq!(propagation_delay(0.0), 0.0);
        assert!((propagation_delay(30.0) - 100.07).abs() < 1e-2);
    }

    #[test]
    fn delay_closure() {
        let r = DelayRecord::new(NodeId(3), SimTime::from_micros(100), SimTime::from_micros(2_100_330), SimTime::from_micros(2_100_490), 2.0, 2);
        assert!(r.closes());
        assert_eq!(r.transmission_us, 160);
        assert_eq!(r.queueing_us, 2_100_230);
        assert_eq!(r.retransmissions, 1);
    }

    fn log_with(delays: &[u64], readings: u64) -> RunLog {
        let mut log = RunLog::new();
        log.duration = SimTime::from_secs(10);
        for _ in 0..readings {
            log.record_reading(NodeId(1), 10);
        }
        for &d in delays {
            log.record_delivery(DelayRecord::new(NodeId(1), SimTime::ZERO, SimTime::from_micros(d - 160), SimTime::from_micros(d), 1.0, 1), 10);
        }
        log
    }

    #[test]
    fn lossless_and_jammed_runs() {
        let p = EnergyParams::default();
        let ok = finalize_run(&log_with(&[500, 600, 700], 3), &p);
        assert_eq!(ok.delivery_ratio, 1.0);
        assert_eq!(ok.sensors[&NodeId(1)].max_delay_us, 700);
        assert_eq!(ok.goodput_bps, 24.0);
        assert!(ok.goodput_bps <= ok.offered_bps);

        let jammed = finalize_run(&log_with(&[], 5), &p);
        assert_eq!(jammed.delivery_ratio, 0.0);
        assert_eq!(jammed.goodput_bps, 0.0);
    }

    #[test]
    fn percentiles() {
        let delays: Vec<u64> = (1..=100).map(|k| 1000 + k).collect();
        let r = finalize_run(&log_with(&delays, 100), &EnergyParams::default());
        let s = &r.sensors[&NodeId(1)];
        assert_eq!(s.p95_delay_us, 1095);
        assert_eq!(s.mean_delay_us, 1050.5);
    }

    #[test]
    fn bernoulli_delivery_ratio() {
        let p = 0.999f64.powi(376);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut log = RunLog::new();
        log.duration = SimTime::from_secs(1);
        for k in 0..10_000u64 {
            log.record_reading(NodeId(1), 37);
            if rng.random::<f64>() < p {
                let t = SimTime::from_micros(k * 1000);
                log.record_delivery(DelayRecord::new(NodeId(1), t, t, t + 376, 0.0, 1), 37);
            }
        }
        let r = finalize_run(&log, &EnergyParams::default());
        let sigma = (p * (1.0 - p) / 10_000.0).sqrt();
        assert!((r.delivery_ratio - 0.6865).abs() < 3.0 * sigma, "{}", r.delivery_ratio);
    }

    #[test]
    fn energy_from_event_counts() {
        let mut log = RunLog::new();
        log.duration = SimTime::from_secs(2000);
        log.events.insert(NodeId(1), 1000);
        let r = finalize_run(&log, &EnergyParams::default());
        let e = r.energy[&NodeId(1)];
        assert!((e.average_current_ma / 0.013_407_913_4 - 1.0).abs() < 1e-6);
    }
}
