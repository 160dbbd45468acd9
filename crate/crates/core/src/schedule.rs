//! TDMA planning of connection events.
//!
//! Every sensor gets its own connection with interval equal to its read
//! period. Anchors sit one event airtime after the reading so the reading is
//! picked up by the next event, and are then pushed later until they clear
//! every slot already placed in the same radio group. Sensors are placed in
//! order of priority, then deadline, then id, so a shortage always sheds the
//! least critical sensors first.
//!
//! Two periodic slots `(o1, P1, a1)` and `(o2, P2, a2)` overlap somewhere iff
//! the offset difference, reduced modulo `gcd(P1, P2)`, falls inside
//! `(-a1, a2)`. The planner uses that closed form; [`verify_collision_free`]
//! checks the result by enumerating events.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::link::connection::T_IFS_US;
use crate::link::hop::{ChannelMap, HopState, MAX_HOP_INCREMENT, MIN_HOP_INCREMENT};
use crate::link::packet::{airtime_us, data_frame_len, MAX_DATA_PAYLOAD, MIN_DATA_FRAME};
use crate::phy::DATA_CHANNEL_COUNT;
use crate::NodeId;

/// Aggregate capacity: 37 data channels at 1 Mbps each.
pub const CAPACITY_BPS: f64 = 37.0e6;
pub const DEFAULT_HYPERPERIOD_CAP_US: u64 = 60_000_000;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScheduleError {
    #[error("sensor {id}: deadline {deadline_us} us exceeds read period {period_us} us")]
    DeadlineBeyondPeriod { id: NodeId, deadline_us: u64, period_us: u64 },
    #[error("sensor {id}: payload of {bytes} bytes exceeds {MAX_DATA_PAYLOAD}")]
    PayloadTooLong { id: NodeId, bytes: usize },
    #[error("sensor {0}: read period must be positive")]
    ZeroPeriod(NodeId),
    #[error("sensor {0} has no master")]
    Unassigned(NodeId),
    #[error("sensor {0} listed twice")]
    DuplicateSensor(NodeId),
    #[error("aggregate load {bps} bps exceeds the {CAPACITY_BPS} bps capacity")]
    OverCapacity { bps: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorSpec {
    pub id: NodeId,
    pub period_us: u64,
    pub phase_us: u64,
    pub payload_bytes: usize,
    /// Lower is more critical.
    pub priority: u8,
    pub deadline_us: u64,
}

impl SensorSpec {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.period_us == 0 {
            return Err(ScheduleError::ZeroPeriod(self.id));
        }
        if self.deadline_us > self.period_us {
            return Err(ScheduleError::DeadlineBeyondPeriod {
                id: self.id,
                deadline_us: self.deadline_us,
                period_us: self.period_us,
            });
        }
        if self.payload_bytes > MAX_DATA_PAYLOAD {
            return Err(ScheduleError::PayloadTooLong { id: self.id, bytes: self.payload_bytes });
        }
        Ok(())
    }
}

/// Airtime of one event: empty master poll, inter-frame space, slave frame.
pub fn event_airtime_us(payload_bytes: usize) -> u64 {
    airtime_us(MIN_DATA_FRAME) + T_IFS_US + airtime_us(data_frame_len(payload_bytes))
}

/// On-air bits of one event.
pub fn event_bits(payload_bytes: usize) -> u64 {
    8 * (MIN_DATA_FRAME + data_frame_len(payload_bytes)) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleOptions {
    /// Anchor each sensor after its read phase. When off, anchors are placed
    /// as if every phase were zero.
    pub align_to_phase: bool,
    /// Overrides the per-sensor event airtime.
    pub event_airtime_us: Option<u64>,
    /// Radio group per master. Slots only need to be time-disjoint inside a
    /// group; masters not listed share group 0.
    pub radio_groups: BTreeMap<NodeId, u32>,
    pub channel_map: ChannelMap,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            align_to_phase: true,
            event_airtime_us: None,
            radio_groups: BTreeMap::new(),
            channel_map: ChannelMap::ALL,
        }
    }
}

impl ScheduleOptions {
    pub fn group_of(&self, master: NodeId) -> u32 {
        self.radio_groups.get(&master).copied().unwrap_or(0)
    }
}

/// One scheduled connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub sensor: NodeId,
    pub master: NodeId,
    pub group: u32,
    pub interval_us: u64,
    /// Time of the first connection event.
    pub anchor_offset_us: u64,
    pub hop_increment: u8,
    pub last_unmapped: u8,
    pub channel_map: ChannelMap,
    pub event_airtime_us: u64,
    pub bits_per_event: u64,
    /// Longest wait from a reading to the start of the event that carries it.
    pub worst_case_queueing_us: u64,
    /// Longest wait from a reading to the end of the event that carries it.
    pub worst_case_delay_us: u64,
}

impl Slot {
    pub fn hop_state(&self) -> HopState {
        HopState::new(self.hop_increment, self.last_unmapped, self.channel_map).expect("slot hop parameters are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schedule {
    pub slots: Vec<Slot>,
}

impl Schedule {
    /// Fraction of the aggregate capacity used.
    pub fn utilization(&self) -> f64 {
        total_bps(&self.slots) / CAPACITY_BPS
    }

    pub fn slot(&self, sensor: NodeId) -> Option<&Slot> {
        self.slots.iter().find(|s| s.sensor == sensor)
    }

    /// Time-share of the busiest radio group.
    pub fn max_group_load(&self) -> f64 {
        let mut load: BTreeMap<u32, f64> = BTreeMap::new();
        for s in &self.slots {
            *load.entry(s.group).or_default() += s.event_airtime_us as f64 / s.interval_us as f64;
        }
        load.values().copied().fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sensor_id,master,interval_us,anchor_offset_us,hop_increment,worst_case_delay_us\n");
        for s in &self.slots {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.sensor, s.master, s.interval_us, s.anchor_offset_us, s.hop_increment, s.worst_case_delay_us
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShedReason {
    /// No gap in the period was wide enough.
    NoSlot,
    /// A slot exists but the resulting delay misses the deadline.
    DeadlineMiss { delay_us: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Infeasibility {
    /// Master with the most shed sensors (lowest id on ties).
    pub bottleneck: NodeId,
    pub shed: Vec<(NodeId, ShedReason)>,
    /// Everything that could be placed.
    pub partial: Schedule,
}

impl std::fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "schedule infeasible: bottleneck master {}; shed sensors:", self.bottleneck)?;
        for (id, why) in &self.shed {
            match why {
                ShedReason::NoSlot => write!(f, " {id} (no free slot)")?,
                ShedReason::DeadlineMiss { delay_us } => write!(f, " {id} (delay {delay_us} us misses deadline)")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanError {
    Invalid(ScheduleError),
    Infeasible(Infeasibility),
}

impl From<ScheduleError> for PlanError {
    fn from(e: ScheduleError) -> Self {
        PlanError::Invalid(e)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Forward shift of `(o, p, a)` needed to clear `other`, or 0 if they never
/// overlap.
fn clearance(o: u64, p: u64, a: u64, other: &Slot) -> u64 {
    let g = gcd(p, other.interval_us);
    let d = (o % g + g - other.anchor_offset_us % g) % g;
    let (a2, a1) = (other.event_airtime_us, a);
    // representatives of the difference class nearest zero: d and d - g
    if d < a2 {
        a2 - d
    } else if g - d < a1 {
        a2 + (g - d)
    } else {
        0
    }
}

pub fn build_schedule(
    sensors: &[SensorSpec],
    masters: &BTreeMap<NodeId, NodeId>,
    options: &ScheduleOptions,
) -> Result<Schedule, PlanError> {
    let mut seen = std::collections::BTreeSet::new();
    for s in sensors {
        s.validate()?;
        if !seen.insert(s.id) {
            return Err(ScheduleError::DuplicateSensor(s.id).into());
        }
        if !masters.contains_key(&s.id) {
            return Err(ScheduleError::Unassigned(s.id).into());
        }
    }
    let mut order: Vec<&SensorSpec> = sensors.iter().collect();
    order.sort_by_key(|s| (s.priority, s.deadline_us, s.id));

    let increments = u64::from(MAX_HOP_INCREMENT - MIN_HOP_INCREMENT + 1);
    let mut per_master: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut slots: Vec<Slot> = Vec::new();
    // indexes into `slots`; a slot conflicts through its group or its master
    let mut by_group: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    let mut by_master: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    let mut shed = Vec::new();

    for s in order {
        let master = masters[&s.id];
        let group = options.group_of(master);
        let airtime = options.event_airtime_us.unwrap_or_else(|| event_airtime_us(s.payload_bytes));
        let phase = if options.align_to_phase { s.phase_us } else { 0 };
        let base = phase + airtime;

        let mut offset = base;
        let mut placed = false;
        while offset - base < s.period_us {
            let push = by_group
                .get(&group)
                .into_iter()
                .chain(by_master.get(&master))
                .flatten()
                .map(|&i| clearance(offset, s.period_us, airtime, &slots[i]))
                .max()
                .unwrap_or(0);
            if push == 0 {
                placed = true;
                break;
            }
            offset += push;
        }
        if !placed || airtime > s.period_us {
            shed.push((s.id, master, ShedReason::NoSlot));
            continue;
        }

        let lag = (offset + s.period_us - s.phase_us % s.period_us) % s.period_us;
        let delay = lag + airtime;
        if delay > s.deadline_us {
            shed.push((s.id, master, ShedReason::DeadlineMiss { delay_us: delay }));
            continue;
        }
        let k = per_master.entry(master).or_default();
        let hop_increment = MIN_HOP_INCREMENT + (*k % increments) as u8;
        let last_unmapped = ((*k / increments) % u64::from(DATA_CHANNEL_COUNT)) as u8;
        *k += 1;
        by_group.entry(group).or_default().push(slots.len());
        by_master.entry(master).or_default().push(slots.len());
        slots.push(Slot {
            sensor: s.id,
            master,
            group,
            interval_us: s.period_us,
            anchor_offset_us: offset,
            hop_increment,
            last_unmapped,
            channel_map: options.channel_map,
            event_airtime_us: airtime,
            bits_per_event: event_bits(s.payload_bytes),
            worst_case_queueing_us: lag,
            worst_case_delay_us: delay,
        });
    }

    slots.sort_by_key(|s| s.sensor);
    let schedule = Schedule { slots };
    if shed.is_empty() {
        aggregate_throughput(&schedule)?;
        return Ok(schedule);
    }
    let mut counts: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (_, m, _) in &shed {
        *counts.entry(*m).or_default() += 1;
    }
    let bottleneck = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(m, _)| *m).expect("non-empty");
    Err(PlanError::Infeasible(Infeasibility {
        bottleneck,
        shed: shed.into_iter().map(|(id, _, why)| (id, why)).collect(),
        partial: schedule,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Throughput {
    pub bps: f64,
    /// Busy fraction of each data channel.
    pub per_channel: [f64; DATA_CHANNEL_COUNT as usize],
}

fn total_bps(slots: &[Slot]) -> f64 {
    slots.iter().map(|s| s.bits_per_event as f64 * 1e6 / s.interval_us as f64).sum()
}

/// Scheduled on-air load, rejected above the 37 Mbps capacity.
pub fn aggregate_throughput(schedule: &Schedule) -> Result<Throughput, ScheduleError> {
    let bps = total_bps(&schedule.slots);
    // tolerate float summation noise at exactly full load
    if bps > CAPACITY_BPS * (1.0 + 1e-12) {
        return Err(ScheduleError::OverCapacity { bps });
    }
    let mut per_channel = [0.0; DATA_CHANNEL_COUNT as usize];
    let n = u64::from(DATA_CHANNEL_COUNT);
    for s in &schedule.slots {
        let mut hop = s.hop_state();
        let share = s.event_airtime_us as f64 / (s.interval_us * n) as f64;
        for _ in 0..n {
            per_channel[usize::from(hop.next_channel().index())] += share;
        }
    }
    Ok(Throughput { bps, per_channel })
}

/// Least common multiple of all intervals, capped. The flag is true when
/// the cap was hit.
pub fn hyperperiod(schedule: &Schedule, cap_us: u64) -> (u64, bool) {
    let mut l = 1u64;
    for s in &schedule.slots {
        let g = gcd(l, s.interval_us);
        match (l / g).checked_mul(s.interval_us) {
            Some(v) if v <= cap_us => l = v,
            _ => return (cap_us, true),
        }
    }
    (l, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Collision {
    pub time_us: u64,
    pub channel: u8,
    pub a: NodeId,
    pub b: NodeId,
}

/// Every pair of events that overlap in time on the same data channel
/// within one radio group, for events starting before `horizon_us`.
pub fn verify_collision_free(schedule: &Schedule, horizon_us: u64) -> Vec<Collision> {
    // (start, end, channel, group, sensor)
    let mut events: Vec<(u64, u64, u8, u32, NodeId)> = Vec::new();
    for s in &schedule.slots {
        let mut hop = s.hop_state();
        let mut t = s.anchor_offset_us;
        while t < horizon_us {
            events.push((t, t + s.event_airtime_us, hop.next_channel().index(), s.group, s.sensor));
            t += s.interval_us;
        }
    }
    events.sort_unstable();
    let mut collisions = Vec::new();
    let mut active: Vec<(u64, u64, u8, u32, NodeId)> = Vec::new();
    for e in events {
        active.retain(|a| a.1 > e.0);
        for a in &active {
            if a.2 == e.2 && a.3 == e.3 {
                collisions.push(Collision { time_us: e.0, channel: e.2, a: a.4, b: e.4 });
            }
        }
        active.push(e);
    }
    collisions
}
