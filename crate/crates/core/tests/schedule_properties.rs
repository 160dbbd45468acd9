//! Planner output checked by brute-force event enumeration.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use ivble_core::schedule::{aggregate_throughput, build_schedule, hyperperiod, verify_collision_free, PlanError, ScheduleOptions, SensorSpec, Slot};
use ivble_core::NodeId;

const PERIODS_MS: [u64; 5] = [10, 20, 25, 50, 100];

fn instance() -> impl Strategy<Value = (Vec<SensorSpec>, BTreeMap<NodeId, NodeId>, ScheduleOptions)> {
    let sensor = (0..PERIODS_MS.len(), 0.0f64..1.0, 0usize..=37, 0u8..3, 0.5f64..=1.0, 0u32..4);
    (prop::collection::vec(sensor, 1..30), any::<bool>(), 1u32..=4).prop_map(|(raw, align, groups)| {
        let mut specs = Vec::new();
        let mut masters = BTreeMap::new();
        let mut options = ScheduleOptions { align_to_phase: align, ..ScheduleOptions::default() };
        for m in 0..4 {
            options.radio_groups.insert(NodeId(1000 + m), m % groups);
        }
        for (i, (p, phase, bytes, priority, deadline, master)) in raw.into_iter().enumerate() {
            let period_us = PERIODS_MS[p] * 1000;
            let id = NodeId(i as u32);
            specs.push(SensorSpec {
                id,
                period_us,
                phase_us: (phase * period_us as f64) as u64,
                payload_bytes: bytes,
                priority,
                deadline_us: (deadline * period_us as f64) as u64,
            });
            masters.insert(id, NodeId(1000 + master));
        }
        (specs, masters, options)
    })
}

/// Pairs of slots whose events overlap in time anywhere in one hyperperiod,
/// restricted to pairs that must be disjoint.
fn time_overlaps(slots: &[Slot], horizon: u64) -> usize {
    let starts = |s: &Slot| -> Vec<u64> { (0..horizon / s.interval_us).map(|k| (s.anchor_offset_us + k * s.interval_us) % horizon).collect() };
    let mut n = 0;
    for (i, a) in slots.iter().enumerate() {
        for b in &slots[i + 1..] {
            if a.group != b.group && a.master != b.master {
                continue;
            }
            let (sa, sb) = (starts(a), starts(b));
            // [x, x + la) and [y, y + lb) meet on the circle iff one start lies
            // inside the other's event
            let hit = sa.iter().any(|&x| {
                sb.iter().any(|&y| (y + horizon - x) % horizon < a.event_airtime_us || (x + horizon - y) % horizon < b.event_airtime_us)
            });
            n += usize::from(hit);
        }
    }
    n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn planned_schedules_are_sound((specs, masters, options) in instance()) {
        let schedule = match build_schedule(&specs, &masters, &options) {
            Ok(s) => s,
            Err(PlanError::Infeasible(inf)) => {
                // every sensor is either placed or shed, never both
                let placed: BTreeSet<_> = inf.partial.slots.iter().map(|s| s.sensor).collect();
                let shed: BTreeSet<_> = inf.shed.iter().map(|s| s.0).collect();
                prop_assert!(placed.is_disjoint(&shed));
                prop_assert_eq!(placed.len() + shed.len(), specs.len());
                prop_assert!(inf.shed.iter().any(|(id, _)| masters[id] == inf.bottleneck));
                inf.partial
            }
            Err(e) => return Err(TestCaseError::fail(format!("{e:?}"))),
        };
        let (horizon, capped) = hyperperiod(&schedule, 10_000_000);
        prop_assert!(!capped);
        prop_assert_eq!(time_overlaps(&schedule.slots, horizon), 0);
        prop_assert!(verify_collision_free(&schedule, 2 * horizon).is_empty());
        prop_assert!(aggregate_throughput(&schedule).is_ok());

        let mut per_master: BTreeMap<NodeId, Vec<u8>> = BTreeMap::new();
        for slot in &schedule.slots {
            let spec = specs.iter().find(|s| s.id == slot.sensor).unwrap();
            prop_assert_eq!(slot.interval_us, spec.period_us);
            prop_assert!(slot.worst_case_delay_us <= spec.deadline_us);
            prop_assert_eq!(slot.worst_case_delay_us, slot.worst_case_queueing_us + slot.event_airtime_us);
            let mut hop = slot.hop_state();
            let seen: BTreeSet<u8> = (0..37).map(|_| hop.next_channel().index()).collect();
            prop_assert_eq!(seen.len(), 37);
            per_master.entry(slot.master).or_default().push(slot.hop_increment);
        }
        // increments are pairwise distinct until all twelve are in use
        for incs in per_master.values() {
            let distinct: BTreeSet<_> = incs.iter().collect();
            prop_assert_eq!(distinct.len(), incs.len().min(12));
        }
    }
}

#[test]
fn overlap_oracle_sees_collisions() {
    let mut opts = ScheduleOptions::default();
    opts.radio_groups.insert(NodeId(1000), 0);
    let specs = [
        SensorSpec { id: NodeId(1), period_us: 10_000, phase_us: 0, payload_bytes: 20, priority: 1, deadline_us: 10_000 },
        SensorSpec { id: NodeId(2), period_us: 20_000, phase_us: 0, payload_bytes: 20, priority: 1, deadline_us: 20_000 },
    ];
    let masters = specs.iter().map(|s| (s.id, NodeId(1000))).collect();
    let mut schedule = build_schedule(&specs, &masters, &opts).unwrap();
    assert_eq!(time_overlaps(&schedule.slots, 20_000), 0);
    // wrap the second event around the hyperperiod onto the first
    schedule.slots[1].anchor_offset_us = schedule.slots[0].anchor_offset_us + 10_000 - 100;
    assert_eq!(time_overlaps(&schedule.slots, 20_000), 1);
}
