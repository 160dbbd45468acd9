//! Region classification along monotone approaches and departures.

use proptest::prelude::*;

use ivble_core::pke::{PkeConfig, PkeEvent, PkeState, Region};
use ivble_core::runner::{run_scenario, RunOptions};
use ivble_core::scenario::Scenario;
use ivble_core::sim::SimTime;

const KEY: [u8; 4] = [0xc0, 0xff, 0xee, 0x01];

fn connected(cfg: PkeConfig) -> PkeState {
    let mut s = PkeState::new(cfg, vec![("fob".into(), KEY, b"4711".to_vec())]).unwrap();
    s.connection_manager_step(PkeEvent::Connected { address: KEY, at: SimTime::ZERO });
    s
}

fn config() -> impl Strategy<Value = PkeConfig> {
    (-80.0f64..-40.0, 0.0f64..6.0, 1usize..9).prop_map(|(t, h, w)| PkeConfig {
        rssi_threshold_dbm: t,
        hysteresis_db: h,
        rssi_window: w,
        ..PkeConfig::default()
    })
}

proptest! {
    #[test]
    fn approach_never_steps_back(cfg in config(), mut rssi in prop::collection::vec(-100.0f64..-20.0, 1..80)) {
        rssi.sort_by(f64::total_cmp);
        let mut s = connected(cfg);
        let mut last = Region::B;
        for (i, r) in rssi.into_iter().enumerate() {
            let region = s.rssi_update(0, r, SimTime::from_micros(i as u64 * 100_000));
            prop_assert!(region >= last, "{last:?} -> {region:?}");
            last = region;
        }
    }

    #[test]
    fn departure_never_steps_forward(cfg in config(), mut rssi in prop::collection::vec(-100.0f64..-20.0, 1..80)) {
        rssi.sort_by(|a, b| b.total_cmp(a));
        let w = cfg.rssi_window;
        let mut s = connected(cfg);
        let mut last = Region::C;
        for (i, r) in rssi.into_iter().enumerate() {
            let region = s.rssi_update(0, r, SimTime::from_micros(i as u64 * 100_000));
            // the window is still filling for the first `w - 1` samples
            if i + 1 >= w {
                prop_assert!(region <= last, "{last:?} -> {region:?}");
                last = region;
            }
        }
    }
}

/// A steady walk from 40 m to 1 m without shadowing enters region C once and
/// stays there.
#[test]
fn simulated_approach_is_monotone() {
    let text = r#"
[run]
name = "approach"
duration_s = 40
seed = 9

[channel]
sensitivity_dbm = -69.0

[channel.loss_rule]
frequency_mhz = 2440.0
excess_db = 0.8

[[nodes]]
id = "car"
role = "central"

[[nodes]]
id = "fob"
role = "peripheral"

[pke]
vehicle = "car"

[[pke.keys]]
node = "fob"
address = "c0ffee01"
pass_code = "4711"

[[pke.traces]]
key = "fob"
waypoints = [[0.0, 24.0], [30.0, 1.0], [40.0, 1.0]]
"#;
    let s = Scenario::from_toml_str(text, None).unwrap();
    let pke = run_scenario(&s, &RunOptions::default()).unwrap().pke.unwrap();
    let regions: Vec<&str> = pke.log.iter().filter(|e| e.event == "region").map(|e| e.detail.as_str()).collect();
    assert_eq!(regions, ["B->C"], "{:?}", pke.log);
    assert!(pke.locks.is_empty());
}
