//! Run artifacts: CSV tables and the text summary.
//!
//! Every number is printed with a fixed format so that equal runs give equal
//! bytes.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use crate::energy::{average_current, battery_life_hours, round_to};
use crate::metrics::transmission_delay;
use crate::phy::DATA_CHANNEL_COUNT;
use crate::runner::RunOutput;
use crate::scenario::Scenario;
use crate::NodeId;

fn name(scenario: &Scenario, id: NodeId) -> &str {
    &scenario.node(id).name
}

fn table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn metrics_csv(out: &RunOutput, scenario: &Scenario) -> String {
    let header = [
        "sensor",
        "readings",
        "delivered",
        "delivery_ratio",
        "mean_delay_us",
        "p95_delay_us",
        "max_delay_us",
        "mean_queueing_us",
        "mean_transmission_us",
        "retransmissions",
        "goodput_bps",
        "offered_bps",
    ];
    let rows = out.report.sensors.iter().map(|(id, s)| {
        let ratio = if s.readings == 0 { 1.0 } else { s.delivered as f64 / s.readings as f64 };
        vec![
            name(scenario, *id).to_string(),
            s.readings.to_string(),
            s.delivered.to_string(),
            format!("{ratio:.6}"),
            format!("{:.3}", s.mean_delay_us),
            s.p95_delay_us.to_string(),
            s.max_delay_us.to_string(),
            format!("{:.3}", s.mean_queueing_us),
            format!("{:.3}", s.mean_transmission_us),
            s.retransmissions.to_string(),
            format!("{:.3}", s.goodput_bps),
            format!("{:.3}", s.offered_bps),
        ]
    });
    table(&header, rows)
}

pub fn deliveries_csv(out: &RunOutput, scenario: &Scenario) -> String {
    let header =
        ["sensor", "seq", "reading_us", "delivered_us", "queueing_us", "transmission_us", "propagation_ns", "retransmissions"];
    let rows = out.deliveries.iter().map(|d| {
        vec![
            name(scenario, d.sensor).to_string(),
            d.seq.to_string(),
            d.delay.reading_time.as_micros().to_string(),
            d.delay.delivery_time.as_micros().to_string(),
            d.delay.queueing_us.to_string(),
            d.delay.transmission_us.to_string(),
            format!("{:.3}", d.delay.propagation_ns),
            d.delay.retransmissions.to_string(),
        ]
    });
    table(&header, rows)
}

pub fn channels_csv(out: &RunOutput) -> String {
    let rows = out.report.channels.iter().take(usize::from(DATA_CHANNEL_COUNT)).enumerate().map(|(i, c)| {
        let ratio = if c.events == 0 { 0.0 } else { c.failures as f64 / c.events as f64 };
        vec![i.to_string(), c.events.to_string(), c.failures.to_string(), format!("{ratio:.6}")]
    });
    table(&["channel", "events", "failures", "failure_ratio"], rows)
}

pub fn energy_csv(out: &RunOutput, scenario: &Scenario) -> String {
    let rows = out.report.energy.iter().map(|(id, e)| {
        vec![
            name(scenario, *id).to_string(),
            e.events.to_string(),
            format!("{:.9}", e.consumed_mah),
            format!("{:.9}", e.average_current_ma),
            format!("{:.2}", e.projected_life_hours),
        ]
    });
    table(&["node", "events", "consumed_mah", "average_current_ma", "projected_life_hours"], rows)
}

pub fn schedule_csv(out: &RunOutput) -> String {
    out.schedule.to_csv()
}

pub fn afh_csv(out: &RunOutput, scenario: &Scenario) -> String {
    let rows = out.map_updates.iter().map(|u| {
        let excluded: Vec<String> = u.map.disabled().map(|c| c.to_string()).collect();
        vec![
            u.time.as_micros().to_string(),
            name(scenario, u.slave).to_string(),
            u.map.enabled_count().to_string(),
            excluded.join(" "),
        ]
    });
    table(&["time_us", "sensor", "enabled_channels", "excluded_channels"], rows)
}

pub fn trace_csv(out: &RunOutput, scenario: &Scenario) -> Option<String> {
    let trace = out.trace.as_ref()?;
    let rows = trace.iter().map(|r| {
        vec![
            r.time.as_micros().to_string(),
            name(scenario, r.from).to_string(),
            name(scenario, r.to).to_string(),
            r.kind.to_string(),
            r.channel.to_string(),
            r.len_bytes.to_string(),
            r.fate.as_str().to_string(),
            r.rssi_dbm.map(|v| format!("{v:.2}")).unwrap_or_default(),
        ]
    });
    Some(table(&["time_us", "from", "to", "kind", "channel", "length_bytes", "outcome", "rssi_dbm"], rows))
}

pub fn pke_csv(out: &RunOutput) -> Option<String> {
    let pke = out.pke.as_ref()?;
    let rows = pke.log.iter().map(|e| vec![e.time.as_micros().to_string(), e.event.to_string(), e.key.clone(), e.detail.clone()]);
    Some(table(&["time_us", "event", "key", "detail"], rows))
}

pub fn pulls_csv(out: &RunOutput) -> Option<String> {
    let pke = out.pke.as_ref()?;
    let rows = pke.pulls.iter().map(|p| {
        vec![
            p.time.as_micros().to_string(),
            p.key.clone(),
            p.distance_m.map(|d| format!("{d:.3}")).unwrap_or_default(),
            p.region.to_string(),
            p.unlocked.to_string(),
            p.latency_us.map(|l| l.to_string()).unwrap_or_default(),
        ]
    });
    Some(table(&["time_us", "key", "distance_m", "region", "unlocked", "latency_us"], rows))
}

pub fn summary(out: &RunOutput, scenario: &Scenario) -> String {
    let mut s = String::new();
    let r = &out.report;
    let _ = writeln!(s, "scenario {} (seed {})", out.name, out.seed);
    let _ = writeln!(s, "simulated {:.3} s, {} events dispatched", out.duration.as_secs_f64(), out.dispatched);
    if !scenario.sensors.is_empty() {
        let readings: u64 = r.sensors.values().map(|s| s.readings).sum();
        let _ = writeln!(s, "readings {readings}, delivered {}, delivery ratio {:.6}", out.deliveries.len(), r.delivery_ratio);
        let _ = writeln!(s, "goodput {:.3} bps of {:.3} bps offered", r.goodput_bps, r.offered_bps);
    }
    for def in &scenario.sensors {
        let id = def.spec.id;
        let n = name(scenario, id);
        if let Some(st) = r.sensors.get(&id) {
            let tx = transmission_delay(def.packet_bytes).expect("length validated at load");
            let _ = writeln!(
                s,
                "sensor {n}: transmission delay {tx} us ({}-byte frame, measured mean {:.3} us), mean delay {:.3} us, p95 {} us, mean queueing {:.3} us, retransmissions {}",
                def.packet_bytes, st.mean_transmission_us, st.mean_delay_us, st.p95_delay_us, st.mean_queueing_us, st.retransmissions
            );
        }
        if let Some(slot) = out.schedule.slot(id) {
            let interval_ms = slot.interval_us as f64 / 1000.0;
            if let Ok(ic) = average_current(&scenario.energy, interval_ms) {
                let rounded = round_to(ic, 3);
                let life_rounded = battery_life_hours(&scenario.energy, rounded).unwrap_or(f64::INFINITY);
                let life = battery_life_hours(&scenario.energy, ic).unwrap_or(f64::INFINITY);
                let _ = writeln!(
                    s,
                    "energy {n}: connection interval {interval_ms:.3} ms, I_c {rounded:.3} mA ({ic:.9} mA unrounded), battery life {life_rounded:.0} h ({life:.2} h unrounded)"
                );
            }
        }
        if let Some(e) = r.energy.get(&id) {
            let _ = writeln!(
                s,
                "energy {n}: measured {} events, {:.9} mAh, average {:.9} mA, projected life {:.2} h",
                e.events, e.consumed_mah, e.average_current_ma, e.projected_life_hours
            );
        }
    }
    for u in &out.map_updates {
        let excluded: Vec<String> = u.map.disabled().map(|c| c.to_string()).collect();
        let _ = writeln!(
            s,
            "afh {}: channel map updated at {:.6} s, excluded channels [{}]",
            name(scenario, u.slave),
            u.time.as_secs_f64(),
            excluded.join(" ")
        );
    }
    if let Some(p) = &out.pke {
        let _ = writeln!(s, "pke: pulls {}, unlocks {}, locks {}", p.pulls.len(), p.unlocks(), p.locks.len());
        for pull in &p.pulls {
            let dist = pull.distance_m.map(|d| format!(" at {d:.2} m")).unwrap_or_default();
            let verdict = if pull.unlocked { "unlocked" } else { "refused" };
            let latency = pull.latency_us.map(|l| format!(", latency {l} us")).unwrap_or_default();
            let _ = writeln!(
                s,
                "pke pull at {:.3} s: key {}{dist}, region {}, {verdict}{latency}",
                pull.time.as_secs_f64(),
                pull.key,
                pull.region
            );
        }
        for t in &p.locks {
            let _ = writeln!(s, "pke lock at {:.6} s", t.as_secs_f64());
        }
    }
    s
}

/// File name and contents of every artifact of a run.
pub fn artifacts(out: &RunOutput, scenario: &Scenario) -> Vec<(&'static str, String)> {
    let mut files = vec![
        ("summary.txt", summary(out, scenario)),
        ("metrics.csv", metrics_csv(out, scenario)),
        ("deliveries.csv", deliveries_csv(out, scenario)),
        ("channels.csv", channels_csv(out)),
        ("energy.csv", energy_csv(out, scenario)),
        ("schedule.csv", schedule_csv(out)),
    ];
    if scenario.afh.is_some() {
        files.push(("afh.csv", afh_csv(out, scenario)));
    }
    if let Some(p) = pke_csv(out) {
        files.push(("pke.csv", p));
    }
    if let Some(p) = pulls_csv(out) {
        files.push(("pulls.csv", p));
    }
    if let Some(t) = trace_csv(out, scenario) {
        files.push(("trace.csv", t));
    }
    files
}

pub fn write_artifacts(out: &RunOutput, scenario: &Scenario, dir: &Path) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (file, body) in artifacts(out, scenario) {
        let path = dir.join(file);
        std::fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
