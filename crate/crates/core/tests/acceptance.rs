//! End-to-end acceptance checks. Each criterion prints one line, then the
//! test fails if any of them did.

use std::fmt::Write as _;
use std::io::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ivble_core::energy::{average_current, battery_life_hours, round_to};
use ivble_core::link::afh::classify_interference;
use ivble_core::link::hop::{ChannelMap, HopState, MAX_HOP_INCREMENT, MIN_HOP_INCREMENT};
use ivble_core::metrics::transmission_delay;
use ivble_core::output::{artifacts, summary};
use ivble_core::pke::{PkeAction, PkeConfig, PkeEvent, PkeState};
use ivble_core::runner::{run_scenario, FrameFate, RunOptions, RunOutput};
use ivble_core::scenario::{template, Scenario, TEMPLATES};
use ivble_core::schedule::{aggregate_throughput, verify_collision_free, Schedule, ScheduleError, Slot};
use ivble_core::sim::SimTime;
use ivble_core::NodeId;

type Check = Result<String, String>;

/// (number, name, runtime limit in seconds, check)
type Criterion = (u8, &'static str, u64, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn load(text: &str) -> Scenario {
    Scenario::from_toml_str(text, None).unwrap_or_else(|e| panic!("{e}"))
}

fn run(s: &Scenario, seed: Option<u64>, trace: bool) -> RunOutput {
    run_scenario(s, &RunOptions { seed, until: None, trace }).unwrap_or_else(|e| panic!("{e}"))
}

fn energy() -> Check {
    let s = load(template("paper-energy").unwrap());
    let out = run(&s, None, false);
    let ic = average_current(&s.energy, 2000.0).map_err(|e| e.to_string())?;
    let rounded = round_to(ic, 3);
    ensure(rounded == 0.013, || format!("I_c rounds to {rounded}"))?;
    let life = battery_life_hours(&s.energy, rounded).map_err(|e| e.to_string())?;
    ensure((life - 17692.0).abs() <= 1.0, || format!("battery life {life} h"))?;
    let text = summary(&out, &s);
    ensure(text.contains("I_c 0.013 mA") && text.contains("battery life 17692 h"), || format!("summary: {text}"))?;
    Ok(format!("I_c {rounded:.3} mA, T_b {life:.1} h"))
}

fn delay() -> Check {
    ensure(transmission_delay(20) == Ok(160), || "formula".into())?;
    let s = load(template("paper-delay").unwrap());
    let out = run(&s, None, false);
    ensure(out.deliveries.len() == 1, || format!("{} deliveries", out.deliveries.len()))?;
    let tx = out.deliveries[0].delay.transmission_us;
    ensure(tx == 160, || format!("measured {tx} us"))?;
    Ok(format!("20-byte packet: {tx} us"))
}

fn full_load(k: u8) -> Slot {
    Slot {
        sensor: NodeId(u32::from(k)),
        master: NodeId(100 + u32::from(k)),
        group: 0,
        interval_us: 376,
        anchor_offset_us: 0,
        hop_increment: 7,
        last_unmapped: k,
        channel_map: ChannelMap::ALL,
        event_airtime_us: 376,
        bits_per_event: 376,
        worst_case_queueing_us: 0,
        worst_case_delay_us: 376,
    }
}

fn capacity() -> Check {
    let sched = Schedule { slots: (0..37).map(full_load).collect() };
    let tp = aggregate_throughput(&sched).map_err(|e| format!("37 rejected: {e}"))?;
    ensure(tp.bps == 37e6, || format!("aggregate {} bps", tp.bps))?;
    let hits = verify_collision_free(&sched, 376 * 37 * 4);
    ensure(hits.is_empty(), || format!("{} collisions among 37", hits.len()))?;
    let mut over = sched.clone();
    over.slots.push(Slot { sensor: NodeId(99), master: NodeId(199), ..full_load(0) });
    match aggregate_throughput(&over) {
        Err(ScheduleError::OverCapacity { bps }) => Ok(format!("37 piconets: {:.0} bps accepted; 38th rejected at {bps:.0} bps", tp.bps)),
        other => Err(format!("38th connection not rejected: {other:?}")),
    }
}

fn hop_coverage() -> Check {
    let mut checked = 0;
    for inc in MIN_HOP_INCREMENT..=MAX_HOP_INCREMENT {
        for last in 0..37 {
            let mut h = HopState::new(inc, last, ChannelMap::ALL).map_err(|e| e.to_string())?;
            let mut seen = [false; 37];
            for _ in 0..37 {
                seen[usize::from(h.next_channel().index())] = true;
            }
            ensure(seen.iter().all(|&x| x), || format!("increment {inc}, start {last} misses a channel"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (increment, start) pairs are permutations"))
}

fn adaptive_hopping() -> Check {
    let jammed = |c: u8| (10..=13).contains(&c);
    let mut h = HopState::new(5, 0, ChannelMap::ALL).unwrap();
    let history: Vec<(u8, bool)> = (0..100)
        .map(|_| {
            let c = h.next_channel().index();
            (c, jammed(c))
        })
        .collect();
    let map = classify_interference(ChannelMap::ALL, &history, 100, 0.5);
    ensure(map.disabled().eq(10..=13), || format!("classified map excludes {:?}", map.disabled().collect::<Vec<_>>()))?;

    let s = load(template("paper-afh").unwrap());
    let out = run(&s, None, false);
    let first = out.map_updates.first().ok_or("no channel map update")?;
    ensure(first.map.disabled().eq(10..=13), || format!("runtime map excludes {:?}", first.map.disabled().collect::<Vec<_>>()))?;
    ensure(out.map_updates.len() == 1, || format!("{} map updates", out.map_updates.len()))?;
    let after: Vec<_> = out.events.iter().filter(|e| e.time > first.time).collect();
    ensure(!after.is_empty() && after.iter().all(|e| !e.failed), || "failed events after the update".into())?;
    let readings = out.deliveries.iter().filter(|d| d.delay.reading_time > first.time).count();
    let clean = out.deliveries.iter().filter(|d| d.delay.reading_time > first.time && d.delay.retransmissions == 0).count();
    let readings_after = out.report.sensors.values().next().unwrap().readings as usize
        - out.deliveries.iter().filter(|d| d.delay.reading_time <= first.time).count();
    ensure(readings == readings_after && clean == readings, || format!("{clean}/{readings_after} delivered first time"))?;
    Ok(format!(
        "map excludes 10-13 at {:.3} s; post-update delivery ratio {:.3} over {} events",
        first.time.as_secs_f64(),
        clean as f64 / readings_after as f64,
        after.len()
    ))
}

fn reliability() -> Check {
    let s = load(template("paper-reliability").unwrap());
    let out = run(&s, None, true);
    let n = out.deliveries.len();
    ensure(n == 10_000, || format!("{n} deliveries"))?;
    ensure(out.deliveries.iter().enumerate().all(|(i, d)| d.seq == i as u64), || "out of order or duplicated".into())?;
    let readings: u64 = out.report.sensors.values().map(|s| s.readings).sum();
    ensure(readings == 10_000, || format!("{readings} readings"))?;
    let retx: u64 = out.deliveries.iter().map(|d| u64::from(d.delay.retransmissions)).sum();
    ensure(retx > 0, || "no retransmissions logged".into())?;
    let trace = out.trace.as_ref().unwrap();
    let heard = trace.iter().filter(|r| r.fate != FrameFate::Missed).count();
    let bad = trace.iter().filter(|r| r.fate == FrameFate::Corrupted).count();
    let frac = bad as f64 / heard as f64;
    ensure((frac - 0.3).abs() < 0.01, || format!("corruption rate {frac}"))?;
    Ok(format!("10000 payloads exactly once in order, {retx} retransmissions, frame corruption {frac:.4}"))
}

/// `masters` pieces of `per_master` sensors each, every master in its own
/// radio group, with uniformly random read phases.
fn queueing_scenario(masters: usize, per_master: usize, period_ms: u64, duration_s: f64, align: bool, mut phase_us: impl FnMut(&str) -> u64) -> String {
    let mut t = format!("[run]\nname = \"queueing\"\nduration_s = {duration_s}\nseed = 3\n\n[schedule]\nalign_to_phase = {align}\nmaster_capacity = {per_master}\n\n[schedule.radio_groups]\n");
    for m in 0..masters {
        let _ = writeln!(t, "m{m} = {m}");
    }
    for m in 0..masters {
        let _ = write!(t, "\n[[nodes]]\nid = \"m{m}\"\nrole = \"central\"\n");
    }
    for m in 0..masters {
        for k in 0..per_master {
            let _ = write!(t, "\n[[nodes]]\nid = \"s{m}_{k}\"\nrole = \"peripheral\"\n");
        }
    }
    for m in 0..masters {
        for k in 0..per_master {
            let _ = write!(t, "\n[[links]]\na = \"m{m}\"\nb = \"s{m}_{k}\"\nloss_db = 60\n");
        }
    }
    for m in 0..masters {
        for k in 0..per_master {
            let phase_us = phase_us(&format!("s{m}_{k}"));
            let _ = write!(
                t,
                "\n[[sensors]]\nnode = \"s{m}_{k}\"\nmaster = \"m{m}\"\nperiod_ms = {period_ms}\nphase_ms = {}\npacket_bytes = 20\n",
                phase_us as f64 / 1000.0
            );
        }
    }
    t
}

fn mean_queueing(out: &RunOutput) -> f64 {
    out.deliveries.iter().map(|d| d.delay.queueing_us as f64).sum::<f64>() / out.deliveries.len() as f64
}

fn queueing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let period_us = 100_000;
    // 100 sensors x 100 readings
    let aligned = load(&queueing_scenario(10, 10, 100, 10.0, true, |_| rng.random_range(0..period_us)));
    let out = run(&aligned, None, false);
    ensure(out.deliveries.len() == 10_000, || format!("aligned: {} deliveries", out.deliveries.len()))?;
    let airtime = out.schedule.slots[0].event_airtime_us;
    let a = mean_queueing(&out);
    ensure(a <= 2.0 * airtime as f64, || format!("aligned mean queueing {a} us above guard + airtime {}", 2 * airtime))?;

    // 10^4 sensors x 1 reading. Unaligned anchors do not depend on phase, so
    // a zero-phase pass finds them; a phase landing within one airtime after
    // its anchor gives a delay beyond the period and is redrawn.
    let probe = load(&queueing_scenario(100, 100, 100, 0.1, false, |_| 0));
    let anchors: std::collections::HashMap<String, u64> = run(&probe, None, false)
        .schedule
        .slots
        .iter()
        .map(|s| (probe.node(s.sensor).name.clone(), s.anchor_offset_us % period_us))
        .collect();
    let mut redrawn = 0;
    let unaligned = load(&queueing_scenario(100, 100, 100, 0.1, false, |name| loop {
        let phase = rng.random_range(0..period_us);
        if (phase + period_us - anchors[name]) % period_us > airtime {
            break phase;
        }
        redrawn += 1;
    }));
    let out = run(&unaligned, None, false);
    ensure(out.deliveries.len() == 10_000, || format!("unaligned: {} deliveries", out.deliveries.len()))?;
    let u = mean_queueing(&out);
    let half = period_us as f64 / 2.0;
    ensure((u / half - 1.0).abs() <= 0.02, || format!("unaligned mean queueing {u} us vs {half}"))?;
    Ok(format!(
        "aligned {a:.1} us <= {} us; unaligned {u:.0} us vs interval/2 {half:.0} us ({:+.2}%, {redrawn} phases redrawn)",
        2 * airtime,
        (u / half - 1.0) * 100.0
    ))
}

fn region_c_distance(s: &Scenario) -> f64 {
    let p = s.pke.as_ref().unwrap();
    let fspl_1m = 20.0 * s.loss_rule.frequency_mhz.log10() - 27.55;
    10f64.powf((-p.config.rssi_threshold_dbm - s.loss_rule.excess_db - fspl_1m) / 20.0)
}

fn pke_trials() -> Check {
    let s = load(template("paper-pke").unwrap());
    let d_c = region_c_distance(&s);
    let range = s.pke.as_ref().unwrap().config.nominal_range_m;
    let interval = s.pke.as_ref().unwrap().config.connection_interval_us();
    let (mut inside, mut unlocked, mut control, mut control_unlocked, mut worst) = (0, 0, 0, 0, 0u64);
    for seed in 1..=50 {
        let out = run(&s, Some(seed), false);
        let pke = out.pke.unwrap();
        for p in &pke.pulls {
            let d = p.distance_m.unwrap();
            if d <= d_c {
                inside += 1;
                if p.unlocked {
                    unlocked += 1;
                    let l = p.latency_us.unwrap();
                    worst = worst.max(l);
                    ensure(l <= interval, || format!("seed {seed}: latency {l} us"))?;
                }
            } else if d > range {
                control += 1;
                control_unlocked += usize::from(p.unlocked);
            }
        }
    }
    ensure(inside == 50 && unlocked == 50, || format!("{unlocked}/{inside} unlocks inside {d_c:.2} m"))?;
    ensure(control == 50 && control_unlocked == 0, || format!("{control_unlocked}/{control} control pulls unlocked"))?;
    Ok(format!("{unlocked}/{inside} unlocks within {d_c:.2} m, {control_unlocked}/{control} control unlocks, worst latency {worst} us"))
}

fn pke_variant(waypoints: &str, duration_s: u32) -> Scenario {
    let base = template("paper-pke").unwrap();
    let head = base.split("[[pke.traces]]").next().unwrap().replace("duration_s = 110", &format!("duration_s = {duration_s}"));
    load(&format!("{head}[[pke.traces]]\nkey = \"fob\"\nwaypoints = {waypoints}\n"))
}

fn lock_timeout() -> Check {
    let cfg = PkeConfig::default();
    let k = [1, 2, 3, 4];
    let mut s = PkeState::new(cfg.clone(), vec![("k".into(), k, b"c".to_vec())]).unwrap();
    s.connection_manager_step(PkeEvent::Connected { address: k, at: SimTime::ZERO });
    let t0 = SimTime::from_secs(5);
    let armed = s.connection_manager_step(PkeEvent::Disconnected { address: k, at: t0 });
    ensure(armed == [PkeAction::ArmLockTimer { at: t0 + 30_000_000 }], || format!("{armed:?}"))?;
    let back = s.connection_manager_step(PkeEvent::Connected { address: k, at: t0 + 29_000_000 });
    ensure(back == [PkeAction::CancelLockTimer] && !s.lock_timer(t0 + 30_000_000), || "reconnection at t0+29 s did not suppress".into())?;

    let interval = cfg.connection_interval_us();
    let leave = pke_variant("[[0.0, 1.0], [10.0, 1.0], [10.1, 200.0], [60.0, 200.0]]", 60);
    let out = run(&leave, None, false).pke.unwrap();
    let t0 = out
        .log
        .iter()
        .find(|e| e.event == "disconnected")
        .and_then(|e| e.detail.strip_prefix("last_heard_us="))
        .and_then(|v| v.parse::<u64>().ok())
        .map(SimTime::from_micros)
        .ok_or("no disconnect logged")?;
    ensure(out.locks.len() == 1, || format!("{} locks", out.locks.len()))?;
    let lock = out.locks[0];
    let after = lock.saturating_sub(t0);
    ensure(after.abs_diff(30_000_000) <= interval, || format!("lock {after} us after departure"))?;
    let from_trace = lock.as_micros().abs_diff(40_000_000);
    ensure(from_trace <= 2 * interval, || format!("lock {from_trace} us from scripted departure + 30 s"))?;

    let back = pke_variant("[[0.0, 1.0], [10.0, 1.0], [10.1, 200.0], [38.4, 200.0], [38.5, 1.0], [60.0, 1.0]]", 60);
    let out = run(&back, None, false).pke.unwrap();
    let t0 = SimTime::from_micros(
        out.log.iter().find(|e| e.event == "disconnected").unwrap().detail["last_heard_us=".len()..].parse().unwrap(),
    );
    let re = out.log.iter().filter(|e| e.event == "connected").nth(1).ok_or("no reconnection")?.time;
    ensure(re > t0 && re.saturating_sub(t0) <= 29_000_000, || format!("reconnected {} us after departure", re.saturating_sub(t0)))?;
    ensure(out.locks.is_empty(), || "locked despite reconnection".into())?;
    Ok(format!(
        "lock {:.3} s after departure; reconnection {:.3} s after departure suppresses it",
        after as f64 / 1e6,
        re.saturating_sub(t0) as f64 / 1e6
    ))
}

fn determinism() -> Check {
    for (name, text) in TEMPLATES {
        let s = load(text);
        let a = artifacts(&run(&s, None, true), &s);
        let b = artifacts(&run(&s, None, true), &s);
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} templates byte-identical across reruns", TEMPLATES.len()))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        (1, "energy arithmetic", 1, energy),
        (2, "transmission delay", 1, delay),
        (3, "capacity bound", 10, capacity),
        (4, "hop coverage", 1, hop_coverage),
        (5, "adaptive hopping under interference", 30, adaptive_hopping),
        (6, "reliable delivery", 60, reliability),
        (7, "queueing-delay scheduling", 60, queueing),
        (8, "pke 50-trial scenario", 60, pke_trials),
        (9, "pke lock timeout", 10, lock_timeout),
        (10, "determinism", 60, determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, limit_s, f) in criteria {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let result = match result {
            Ok(m) if took > Duration::from_secs(limit_s) => Err(format!("{m}; took {took:.2?}, limit {limit_s} s")),
            r => r,
        };
        // written past the test harness capture so the report shows in every run
        let line = match &result {
            Ok(m) => format!("criterion {id:>2} PASS  {name}: {m} [{took:.2?}]"),
            Err(m) => {
                failed.push(id);
                format!("criterion {id:>2} FAIL  {name}: {m} [{took:.2?}]")
            }
        };
        let _ = writeln!(std::io::stdout().lock(), "{line}");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
