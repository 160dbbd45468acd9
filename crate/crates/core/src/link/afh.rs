//! Interference classification for adaptive hopping.
//!
//! Looks at the most recent `window` connection events and drops every
//! channel whose CRC-failure fraction in that window exceeds the threshold.
//! Channels not visited in the window keep their current state. At least two
//! channels always stay enabled.

use std::collections::VecDeque;

use super::hop::{ChannelMap, MIN_ENABLED_CHANNELS};
use crate::phy::DATA_CHANNEL_COUNT;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub events: u32,
    pub failures: u32,
}

impl ChannelStats {
    pub fn failure_fraction(&self) -> f64 {
        if self.events == 0 {
            0.0
        } else {
            f64::from(self.failures) / f64::from(self.events)
        }
    }
}

/// Per-channel counters over the last `window` entries of `history`.
pub fn window_stats(history: &[(u8, bool)], window: usize) -> [ChannelStats; DATA_CHANNEL_COUNT as usize] {
    let mut stats = [ChannelStats::default(); DATA_CHANNEL_COUNT as usize];
    for &(ch, failed) in &history[history.len().saturating_sub(window)..] {
        let s = &mut stats[usize::from(ch)];
        s.events += 1;
        s.failures += u32::from(failed);
    }
    stats
}

/// Suggested channel map given `(channel, failed)` per past event, oldest
/// first. Returns `current` unchanged until `window` events are available.
pub fn classify_interference(current: ChannelMap, history: &[(u8, bool)], window: usize, threshold: f64) -> ChannelMap {
    if window == 0 || history.len() < window {
        return current;
    }
    let stats = window_stats(history, window);
    let keep: Vec<u8> = current
        .enabled()
        .filter(|&c| stats[usize::from(c)].failure_fraction() <= threshold)
        .collect();
    if keep.len() >= MIN_ENABLED_CHANNELS as usize {
        return ChannelMap::from_channels(keep).expect("at least two channels");
    }
    let mut ranked: Vec<u8> = current.enabled().collect();
    ranked.sort_by(|a, b| {
        let fa = stats[usize::from(*a)].failure_fraction();
        let fb = stats[usize::from(*b)].failure_fraction();
        fa.total_cmp(&fb).then(a.cmp(b))
    });
    ChannelMap::from_channels(ranked.into_iter().take(MIN_ENABLED_CHANNELS as usize)).expect("two channels")
}

/// Rolling event history for one connection.
#[derive(Debug, Clone)]
pub struct AfhMonitor {
    pub window: usize,
    pub threshold: f64,
    history: VecDeque<(u8, bool)>,
    since_update: usize,
}

impl AfhMonitor {
    pub fn new(window: usize, threshold: f64) -> Self {
        AfhMonitor { window, threshold, history: VecDeque::with_capacity(window), since_update: 0 }
    }

    pub fn record(&mut self, channel: u8, failed: bool) {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back((channel, failed));
        self.since_update += 1;
    }

    /// A new suggestion once a full window has been seen since the last one.
    /// The window restarts after each call that returns a map, so stale
    /// failures from before a map change do not count twice.
    pub fn suggest(&mut self, current: ChannelMap) -> Option<ChannelMap> {
        if self.window == 0 || self.since_update < self.window {
            return None;
        }
        let history: Vec<(u8, bool)> = self.history.iter().copied().collect();
        let map = classify_interference(current, &history, self.window, self.threshold);
        self.history.clear();
        self.since_update = 0;
        (map != current).then_some(map)
    }
}
