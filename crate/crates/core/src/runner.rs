//! Executes a validated scenario.
//!
//! One event loop drives sensor readings, connection events, advertising and
//! the keyless-entry user script. All randomness comes from named streams of
//! the run seed, so a run is a pure function of (scenario, seed).

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::link::advertising::{
    initiate_connection, receive_copy, AdvertisingConfig, Advertiser, ConnectRequest, Peripheral, Scanner,
};
use crate::link::afh::AfhMonitor;
use crate::link::connection::EventOutcome;
use crate::link::hop::{ChannelMap, MAX_HOP_INCREMENT, MIN_HOP_INCREMENT};
use crate::link::packet::{MAX_ADV_FRAME, MAX_DATA_FRAME, MIN_ADV_FRAME, MIN_DATA_FRAME};
use crate::link::piconet::Topology;
use crate::link::{Connection, ConnectionParams, LinkError, Medium, Reception, Role};
use crate::metrics::{finalize_run, DelayRecord, RunLog, RunReport};
use crate::phy::{ChannelIndex, ChannelModel, PacketOutcome, TxParams};
use crate::pke::{PkeAction, PkeEvent, PkeState, Region, UserAction};
use crate::scenario::Scenario;
use crate::schedule::{build_schedule, event_airtime_us, event_bits, Infeasibility, PlanError, Schedule, Slot};
use crate::sim::{streams, stable_hash, Engine, EventHandle, RngStreams, SimTime};
use crate::NodeId;

/// Scheduled connections keep running after the end of the run until their
/// queues are empty, for at most this long or 100 intervals, whichever is
/// longer.
pub const MIN_DRAIN_US: u64 = 10_000_000;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub until: Option<SimTime>,
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    Infeasible(Infeasibility),
    /// Scenario wiring the link layer refuses.
    Setup(String),
    /// A runtime check failed; the run's results cannot be trusted.
    Invariant { name: &'static str, detail: String },
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Infeasible(i) => write!(f, "schedule infeasible: {i}"),
            RunError::Setup(m) => write!(f, "setup failed: {m}"),
            RunError::Invariant { name, detail } => write!(f, "invariant violated [{name}]: {detail}"),
        }
    }
}

impl std::error::Error for RunError {}

fn invariant(name: &'static str, detail: impl Into<String>) -> RunError {
    RunError::Invariant { name, detail: detail.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFate {
    Ok,
    Corrupted,
    Missed,
}

impl FrameFate {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameFate::Ok => "ok",
            FrameFate::Corrupted => "corrupted",
            FrameFate::Missed => "missed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub time: SimTime,
    pub from: NodeId,
    pub to: NodeId,
    pub kind: &'static str,
    pub channel: u8,
    pub len_bytes: usize,
    pub fate: FrameFate,
    pub rssi_dbm: Option<f64>,
}

/// One connection event as seen by the analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub time: SimTime,
    pub slave: NodeId,
    pub channel: u8,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapUpdate {
    pub time: SimTime,
    pub slave: NodeId,
    pub map: ChannelMap,
}

/// A payload that reached the master.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRecord {
    pub sensor: NodeId,
    pub seq: u64,
    pub delay: DelayRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PullRecord {
    pub time: SimTime,
    pub key: String,
    pub distance_m: Option<f64>,
    pub region: Region,
    pub unlocked: bool,
    pub latency_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PkeLogEntry {
    pub time: SimTime,
    pub event: &'static str,
    pub key: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PkeReport {
    pub pulls: Vec<PullRecord>,
    pub locks: Vec<SimTime>,
    pub log: Vec<PkeLogEntry>,
    pub connection_interval_us: u64,
}

impl PkeReport {
    pub fn unlocks(&self) -> usize {
        self.pulls.iter().filter(|p| p.unlocked).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub name: String,
    pub seed: u64,
    pub duration: SimTime,
    pub schedule: Schedule,
    pub report: RunReport,
    pub deliveries: Vec<DeliveryRecord>,
    pub events: Vec<EventRecord>,
    pub map_updates: Vec<MapUpdate>,
    pub trace: Option<Vec<TraceRow>>,
    pub pke: Option<PkeReport>,
    pub dispatched: u64,
    /// First instant after every scheduled queue drained.
    pub drained_at: SimTime,
}

/// The simulator's radio: the channel model plus the per-frame coin flips.
struct RadioMedium<'a> {
    model: &'a ChannelModel,
    tx_power: Vec<f64>,
    rng: ChaCha8Rng,
    trace: Option<Vec<TraceRow>>,
    violation: Option<RunError>,
}

impl RadioMedium<'_> {
    fn kind(channel: ChannelIndex, frame: &[u8]) -> &'static str {
        if channel.is_advertising() {
            "adv"
        } else if frame.len() > 5 && frame[5] & 0x03 == 0x01 {
            "empty"
        } else {
            "data"
        }
    }
}

impl Medium for RadioMedium<'_> {
    fn transmit(&mut self, from: NodeId, to: NodeId, channel: ChannelIndex, at: SimTime, frame: &[u8]) -> Reception {
        let bounds = if channel.is_advertising() { MIN_ADV_FRAME..=MAX_ADV_FRAME } else { MIN_DATA_FRAME..=MAX_DATA_FRAME };
        if !bounds.contains(&frame.len()) && self.violation.is_none() {
            self.violation = Some(invariant("frame-length", format!("{} byte frame from {from} at {at}", frame.len())));
        }
        // one draw per frame whatever happens, to keep the stream aligned
        let (fate, rssi, reception) = match self.model.link_between(from, to) {
            Err(_) => {
                let _: f64 = self.rng.random();
                (FrameFate::Missed, None, Reception::Missed)
            }
            Ok(id) => {
                let tx = TxParams::new(self.tx_power[from.0 as usize], channel).expect("validated at load");
                let rssi = self.model.rssi(id, &tx, at);
                if rssi < self.model.sensitivity_dbm {
                    let _: f64 = self.rng.random();
                    (FrameFate::Missed, Some(rssi), Reception::Missed)
                } else {
                    let bits = (frame.len() * 8) as u32;
                    match self.model.packet_outcome(id, &tx, bits, &self.model.interferers, at, &mut self.rng) {
                        PacketOutcome::Delivered => {
                            (FrameFate::Ok, Some(rssi), Reception::Received { rssi_dbm: rssi, bytes: frame.to_vec() })
                        }
                        PacketOutcome::Corrupted => {
                            let mut bytes = frame.to_vec();
                            if let Some(last) = bytes.last_mut() {
                                *last ^= 0x01;
                            }
                            (FrameFate::Corrupted, Some(rssi), Reception::Corrupted { rssi_dbm: rssi, bytes })
                        }
                    }
                }
            }
        };
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRow {
                time: at,
                from,
                to,
                kind: Self::kind(channel, frame),
                channel: channel.index(),
                len_bytes: frame.len(),
                fate,
                rssi_dbm: rssi,
            });
        }
        reception
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    Reading { sensor: usize },
    Anchor { conn: usize },
    Advertise { key: usize },
    Action { trace: usize, idx: usize },
    LockTimer,
}

struct ConnSlot {
    conn: Connection,
    sensor: Option<usize>,
    key: Option<usize>,
    afh: Option<AfhMonitor>,
    alive: bool,
    next_seq: u64,
    delivered: u64,
}

struct KeyRuntime {
    peripheral: Peripheral,
    conn: Option<usize>,
}

fn access_address(k: u64, used: &mut std::collections::BTreeSet<u32>) -> u32 {
    let mut salt = 0u64;
    loop {
        let h = stable_hash(&[k.to_le_bytes(), salt.to_le_bytes()].concat());
        // keep clear of the advertising address and of all-zero/all-one words
        let aa = (h as u32) | 0x0101_0101;
        if aa != crate::link::packet::ADVERTISING_ACCESS_ADDRESS && aa != u32::MAX && used.insert(aa) {
            return aa;
        }
        salt += 1;
    }
}

fn plan(scenario: &Scenario) -> Result<Schedule, RunError> {
    if scenario.schedule.entries.is_empty() {
        let specs: Vec<_> = scenario.sensors.iter().map(|s| s.spec.clone()).collect();
        let masters: BTreeMap<_, _> = scenario.sensors.iter().map(|s| (s.spec.id, s.master)).collect();
        return build_schedule(&specs, &masters, &scenario.schedule.options).map_err(|e| match e {
            PlanError::Infeasible(i) => RunError::Infeasible(i),
            PlanError::Invalid(e) => RunError::Setup(e.to_string()),
        });
    }
    let mut slots = Vec::new();
    for e in &scenario.schedule.entries {
        let s = scenario.sensors.iter().find(|s| s.spec.id == e.sensor).expect("checked at load");
        let airtime = scenario.schedule.options.event_airtime_us.unwrap_or_else(|| event_airtime_us(s.spec.payload_bytes));
        // a reading waits at most one interval for the next event
        let queueing = e.interval_us;
        slots.push(Slot {
            sensor: e.sensor,
            master: s.master,
            group: scenario.schedule.options.group_of(s.master),
            interval_us: e.interval_us,
            anchor_offset_us: e.anchor_offset_us,
            hop_increment: e.hop_increment,
            last_unmapped: e.last_unmapped,
            channel_map: scenario.schedule.options.channel_map,
            event_airtime_us: airtime,
            bits_per_event: event_bits(s.spec.payload_bytes),
            worst_case_queueing_us: queueing,
            worst_case_delay_us: queueing + airtime,
        });
    }
    slots.sort_by_key(|s| s.sensor);
    Ok(Schedule { slots })
}

fn channel_model(scenario: &Scenario, seed: u64) -> Result<ChannelModel, RunError> {
    let mut model = ChannelModel::new(seed);
    let c = &scenario.channel;
    model.noise_floor_dbm = c.noise_floor_dbm;
    model.sensitivity_dbm = c.sensitivity_dbm;
    model.ber = c.ber.clone();
    model.uniform_packet_loss = c.uniform_packet_loss;
    model.channel_correlation = c.channel_correlation;
    for l in &scenario.links {
        model.add_link(l.clone()).map_err(|e| RunError::Setup(e.to_string()))?;
    }
    for i in &scenario.interferers {
        model.add_interferer(i.clone()).map_err(|e| RunError::Setup(e.to_string()))?;
    }
    Ok(model)
}

fn payload_bytes(seq: u64, len: usize) -> Vec<u8> {
    seq.to_le_bytes().iter().copied().cycle().take(len).collect()
}

fn setup(err: LinkError) -> RunError {
    RunError::Setup(err.to_string())
}

pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<RunOutput, RunError> {
    let seed = opts.seed.unwrap_or(scenario.seed);
    let duration = opts.until.unwrap_or(scenario.duration);
    let schedule = plan(scenario)?;
    let model = channel_model(scenario, seed)?;
    let rngs = RngStreams::new(seed);
    let mut medium = RadioMedium {
        model: &model,
        tx_power: scenario.nodes.iter().map(|n| n.tx_power_dbm).collect(),
        rng: rngs.stream(streams::CHANNEL),
        trace: (opts.trace || scenario.trace).then(Vec::new),
        violation: None,
    };
    let mut traffic = rngs.stream(streams::TRAFFIC);

    let mut engine: Engine<Ev> = Engine::new();
    let mut topology = Topology::new();
    let mut used_aa = std::collections::BTreeSet::new();
    for n in &scenario.nodes {
        if n.role == crate::scenario::NodeRole::Central {
            topology.add_master(n.id, scenario.schedule.master_capacity).map_err(setup)?;
        }
    }

    let sensor_index: BTreeMap<NodeId, usize> = scenario.sensors.iter().enumerate().map(|(i, s)| (s.spec.id, i)).collect();
    let mut conns: Vec<ConnSlot> = Vec::new();
    let mut conn_of_sensor = vec![usize::MAX; scenario.sensors.len()];
    let mut hop_pairs_used: BTreeMap<NodeId, u64> = BTreeMap::new();
    for slot in &schedule.slots {
        let si = sensor_index[&slot.sensor];
        let mut params = ConnectionParams::new(
            access_address(conns.len() as u64, &mut used_aa),
            slot.interval_us,
            SimTime::from_micros(slot.anchor_offset_us),
            slot.hop_increment,
        );
        params.last_unmapped = slot.last_unmapped;
        params.channel_map = slot.channel_map;
        let conn = Connection::new(slot.master, slot.sensor, params).map_err(setup)?;
        topology.join(conn.clone()).map_err(setup)?;
        topology.check_data_path(slot.sensor, slot.master).map_err(setup)?;
        *hop_pairs_used.entry(slot.master).or_default() += 1;
        engine.schedule(conn.anchor(), Ev::Anchor { conn: conns.len() }).map_err(|e| RunError::Setup(e.to_string()))?;
        conn_of_sensor[si] = conns.len();
        conns.push(ConnSlot {
            conn,
            sensor: Some(si),
            key: None,
            afh: scenario.afh.map(|a| AfhMonitor::new(a.window, a.threshold)),
            alive: true,
            next_seq: 0,
            delivered: 0,
        });
    }
    for (si, s) in scenario.sensors.iter().enumerate() {
        let first = SimTime::from_micros(s.spec.phase_us);
        if first < duration {
            engine.schedule(first, Ev::Reading { sensor: si }).expect("future");
        }
    }

    // keyless entry
    let mut pke_state = None;
    let mut keys: Vec<KeyRuntime> = Vec::new();
    let mut scanner = None;
    let mut lock_handle: Option<EventHandle> = None;
    let mut pke_report = None;
    let mut pke_connections = 0u64;
    if let Some(p) = &scenario.pke {
        let state = PkeState::new(
            p.config.clone(),
            p.keys.iter().map(|k| (k.name.clone(), k.address, k.pass_code.clone())).collect(),
        )
        .map_err(|e| RunError::Setup(e.to_string()))?;
        pke_state = Some(state);
        scanner = Some(Scanner::new(p.vehicle));
        for (i, k) in p.keys.iter().enumerate() {
            // stagger first advertisements so keys do not start in lockstep
            let first = SimTime::from_micros(traffic.random_range(0..p.advertising_interval_us));
            let adv = Advertiser::new(k.node, AdvertisingConfig::new(p.advertising_interval_us, k.address.to_vec()), first)
                .map_err(setup)?;
            keys.push(KeyRuntime { peripheral: Peripheral::new(adv, Some(k.accepts.clone())), conn: None });
            if first < duration {
                engine.schedule(first, Ev::Advertise { key: i }).expect("future");
            }
        }
        for (ti, t) in p.traces.iter().enumerate() {
            if let Some(&(at, _)) = t.actions.first() {
                if at < duration {
                    engine.schedule(at, Ev::Action { trace: ti, idx: 0 }).expect("future");
                }
            }
        }
        pke_report = Some(PkeReport { connection_interval_us: p.config.connection_interval_us(), ..Default::default() });
    }

    let mut log = RunLog::new();
    log.duration = duration;
    let mut deliveries = Vec::new();
    let mut events = Vec::new();
    let mut map_updates = Vec::new();
    let max_interval = schedule.slots.iter().map(|s| s.interval_us).max().unwrap_or(0);
    let drain_limit = duration + MIN_DRAIN_US.max(100 * max_interval);
    let mut drained_at = duration;
    let mut last_time = SimTime::ZERO;

    while let Some(ev) = engine.pop_until(drain_limit) {
        let now = ev.time;
        if now < last_time {
            return Err(invariant("time-order", format!("event at {now} after {last_time}")));
        }
        last_time = now;
        match ev.kind {
            Ev::Reading { sensor } => {
                let s = &scenario.sensors[sensor];
                let slot = &mut conns[conn_of_sensor[sensor]];
                let seq = slot.conn.enqueue(Role::Slave, payload_bytes(slot.next_seq, s.spec.payload_bytes), s.spec.priority, now);
                seq.map_err(setup)?;
                slot.next_seq += 1;
                log.record_reading(s.spec.id, s.spec.payload_bytes);
                let next = now + s.spec.period_us;
                if next < duration {
                    engine.schedule(next, Ev::Reading { sensor }).expect("future");
                }
            }
            Ev::Anchor { conn } => {
                let slot = &mut conns[conn];
                if !slot.alive {
                    continue;
                }
                let out = slot.conn.connection_event(now, &mut medium).map_err(|e| invariant("anchor", e.to_string()))?;
                if let Some(v) = medium.violation.take() {
                    return Err(v);
                }
                let slave = slot.conn.slave();
                let failed = out.failed();
                let ch = out.channel.index();
                if now < duration {
                    *log.events.entry(slave).or_default() += 1;
                    log.record_event(ch, failed);
                }
                events.push(EventRecord { time: now, slave, channel: ch, failed });
                if let Some(m) = slot.afh.as_mut() {
                    m.record(ch, failed);
                    if let Some(map) = m.suggest(slot.conn.channel_map()) {
                        slot.conn.update_channel_map(map.mask()).map_err(|e| invariant("afh", e.to_string()))?;
                        map_updates.push(MapUpdate { time: out.end(), slave, map });
                    }
                }
                if let Some(si) = slot.sensor {
                    on_sensor_event(scenario, si, slot, &out, &mut log, &mut deliveries)?;
                    // readings only arrive before `duration`, so past it an empty queue stays empty
                    let next = slot.conn.anchor();
                    if now < duration || slot.conn.backlog(Role::Slave) > 0 {
                        engine.schedule(next, Ev::Anchor { conn }).expect("future");
                    } else {
                        drained_at = drained_at.max(out.end());
                    }
                } else if let Some(ki) = slot.key {
                    let p = scenario.pke.as_ref().expect("key implies pke");
                    let state = pke_state.as_mut().expect("key implies pke");
                    let report = pke_report.as_mut().expect("key implies pke");
                    if let Some(f) = out.slave_frame.as_ref().filter(|f| f.clean()) {
                        let rssi = f.rssi_dbm.expect("clean frame has rssi");
                        let before = state.region(ki);
                        let after = state.rssi_update(ki, rssi, f.start);
                        if after != before {
                            report.log.push(PkeLogEntry {
                                time: f.start,
                                event: "region",
                                key: p.keys[ki].name.clone(),
                                detail: format!("{before}->{after}"),
                            });
                        }
                    }
                    if slot.conn.supervision_expired(out.end()) {
                        slot.alive = false;
                        let at = slot.conn.last_slave_rx();
                        keys[ki].conn = None;
                        keys[ki].peripheral.on_disconnect(out.end());
                        report.log.push(PkeLogEntry { time: out.end(), event: "disconnected", key: p.keys[ki].name.clone(), detail: format!("last_heard_us={}", at.as_micros()) });
                        for a in state.connection_manager_step(PkeEvent::Disconnected { address: p.keys[ki].address, at }) {
                            if let PkeAction::ArmLockTimer { at } = a {
                                if let Some(h) = lock_handle.take() {
                                    engine.cancel(h);
                                }
                                lock_handle = Some(engine.schedule(at.max(now), Ev::LockTimer).expect("future"));
                            }
                        }
                        let next = keys[ki].peripheral.advertiser.next_event();
                        if next < duration {
                            engine.schedule(next.max(now), Ev::Advertise { key: ki }).expect("future");
                        }
                    } else if slot.conn.anchor() < duration {
                        engine.schedule(slot.conn.anchor(), Ev::Anchor { conn }).expect("future");
                    }
                }
            }
            Ev::Advertise { key } => {
                let p = scenario.pke.as_ref().expect("advertising implies pke");
                let state = pke_state.as_mut().expect("advertising implies pke");
                let report = pke_report.as_mut().expect("advertising implies pke");
                let kr = &mut keys[key];
                let copies = kr.peripheral.advertiser.advertising_event(&mut traffic);
                let sc = scanner.as_ref().expect("pke has a scanner");
                for copy in &copies {
                    let Some(seen) = receive_copy(sc, p.keys[key].node, copy, &mut medium) else { continue };
                    let Ok(address) = <[u8; 4]>::try_from(seen.payload.as_slice()) else { continue };
                    let actions = state.connection_manager_step(PkeEvent::AdvertisementReceived { address });
                    let Some(PkeAction::Connect { key: ki, pass_code }) = actions.into_iter().next() else { continue };
                    // continue the vehicle's hop-parameter enumeration past its scheduled slots
                    let k = pke_connections + hop_pairs_used.get(&p.vehicle).copied().unwrap_or(0);
                    pke_connections += 1;
                    let span = u64::from(MAX_HOP_INCREMENT - MIN_HOP_INCREMENT + 1);
                    let req = ConnectRequest {
                        access_address: access_address(1 << 32 | k, &mut used_aa),
                        interval_us: p.config.connection_interval_us() as u32,
                        hop_increment: MIN_HOP_INCREMENT + (k % span) as u8,
                        channel_map: ChannelMap::ALL,
                        pass_code,
                    };
                    match initiate_connection(p.vehicle, &mut kr.peripheral, &seen, &req, &mut medium) {
                        Ok(mut conn) => {
                            conn.set_supervision_timeout(Some(p.supervision_timeout_us));
                            let at = conn.anchor();
                            report.log.push(PkeLogEntry { time: at, event: "connected", key: p.keys[ki].name.clone(), detail: String::new() });
                            for a in state.connection_manager_step(PkeEvent::Connected { address, at }) {
                                if a == PkeAction::CancelLockTimer {
                                    if let Some(h) = lock_handle.take() {
                                        engine.cancel(h);
                                    }
                                }
                            }
                            engine.schedule(at, Ev::Anchor { conn: conns.len() }).expect("future");
                            kr.conn = Some(conns.len());
                            conns.push(ConnSlot { conn, sensor: None, key: Some(ki), afh: None, alive: true, next_seq: 0, delivered: 0 });
                            break;
                        }
                        Err(e) => {
                            report.log.push(PkeLogEntry { time: seen.at, event: "connect_failed", key: p.keys[ki].name.clone(), detail: e.to_string() });
                            state.connection_manager_step(PkeEvent::ConnectFailed { address });
                        }
                    }
                }
                if let Some(v) = medium.violation.take() {
                    return Err(v);
                }
                if kr.peripheral.advertiser.is_active() {
                    let next = kr.peripheral.advertiser.next_event();
                    if next < duration {
                        engine.schedule(next, Ev::Advertise { key }).expect("future");
                    }
                }
            }
            Ev::Action { trace, idx } => {
                let p = scenario.pke.as_ref().expect("actions imply pke");
                let state = pke_state.as_mut().expect("actions imply pke");
                let report = pke_report.as_mut().expect("actions imply pke");
                let t = &p.traces[trace];
                let (_, action) = t.actions[idx];
                if action == UserAction::Pull {
                    let outcome = state.handle_pull(now);
                    let ki = p.keys.iter().position(|k| k.name == t.key).expect("trace key validated");
                    report.pulls.push(PullRecord {
                        time: now,
                        key: t.key.clone(),
                        distance_m: (!t.waypoints.is_empty()).then(|| t.distance_at(now)),
                        region: state.region(ki),
                        unlocked: outcome.unlocked,
                        latency_us: outcome.latency_us,
                    });
                    report.log.push(PkeLogEntry {
                        time: now,
                        event: if outcome.unlocked { "unlock" } else { "pull_refused" },
                        key: t.key.clone(),
                        detail: outcome.latency_us.map(|l| format!("latency_us={l}")).unwrap_or_default(),
                    });
                }
                if let Some(&(at, _)) = t.actions.get(idx + 1) {
                    if at < duration {
                        engine.schedule(at.max(now), Ev::Action { trace, idx: idx + 1 }).expect("future");
                    }
                }
            }
            Ev::LockTimer => {
                lock_handle = None;
                let state = pke_state.as_mut().expect("lock timer implies pke");
                if state.lock_timer(now) {
                    let report = pke_report.as_mut().expect("lock timer implies pke");
                    report.locks.push(now);
                    report.log.push(PkeLogEntry { time: now, event: "locked", key: String::new(), detail: String::new() });
                }
            }
        }
    }

    for slot in &conns {
        if slot.sensor.is_some() && slot.conn.backlog(Role::Slave) > 0 {
            drained_at = drain_limit;
        }
    }
    let report = finalize_run(&log, &scenario.energy);
    if report.goodput_bps > report.offered_bps + 1e-9 {
        return Err(invariant("goodput", format!("goodput {} above offered {}", report.goodput_bps, report.offered_bps)));
    }
    Ok(RunOutput {
        name: scenario.name.clone(),
        seed,
        duration,
        schedule,
        report,
        deliveries,
        events,
        map_updates,
        trace: medium.trace.take(),
        pke: pke_report,
        dispatched: engine.dispatched(),
        drained_at,
    })
}

fn on_sensor_event(
    scenario: &Scenario,
    sensor: usize,
    slot: &mut ConnSlot,
    out: &EventOutcome,
    log: &mut RunLog,
    deliveries: &mut Vec<DeliveryRecord>,
) -> Result<(), RunError> {
    let Some(d) = &out.to_master else { return Ok(()) };
    let s = &scenario.sensors[sensor];
    let expected = slot.delivered;
    if d.payload.id != expected {
        return Err(invariant(
            "exactly-once",
            format!("sensor {} delivered payload {} while expecting {expected}", s.spec.id, d.payload.id),
        ));
    }
    if d.payload.bytes != payload_bytes(d.payload.id, s.spec.payload_bytes) {
        return Err(invariant("payload-integrity", format!("payload {} of sensor {} altered", d.payload.id, s.spec.id)));
    }
    slot.delivered += 1;
    let rec = DelayRecord::new(s.spec.id, d.payload.enqueued_at, d.tx_start, d.tx_end, s.distance_m, d.payload.attempts);
    if !rec.closes() {
        return Err(invariant("delay-closure", format!("{rec:?}")));
    }
    log.record_delivery(rec.clone(), s.spec.payload_bytes);
    deliveries.push(DeliveryRecord { sensor: s.spec.id, seq: d.payload.id, delay: rec });
    Ok(())
}
