//! Adaptive frequency hopping over the 37 data channels.
//!
//! Each connection event advances an unmapped channel by the hop increment
//! modulo 37. If that channel is disabled in the channel map it is remapped
//! onto the list of enabled channels by `unmapped % enabled_count`. A remap
//! that would repeat the previous event's channel moves on to the next
//! enabled channel, so consecutive events never share a channel while two or
//! more are enabled.

use std::fmt;

use thiserror::Error;

use crate::phy::{ChannelIndex, DATA_CHANNEL_COUNT};

pub const MIN_HOP_INCREMENT: u8 = 5;
pub const MAX_HOP_INCREMENT: u8 = 16;
pub const MIN_ENABLED_CHANNELS: u32 = 2;
const FULL_MASK: u64 = (1 << DATA_CHANNEL_COUNT) - 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HopError {
    #[error("channel map enables {0} channels, at least 2 are required")]
    TooFewChannels(u32),
    #[error("channel map has bits set above channel 36")]
    OutOfRange,
    #[error("hop increment {0} outside 5-16")]
    BadIncrement(u8),
    #[error("unmapped channel {0} outside 0-36")]
    BadUnmapped(u8),
}

/// 37-bit mask of usable data channels.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelMap(u64);

impl ChannelMap {
    pub const ALL: ChannelMap = ChannelMap(FULL_MASK);

    pub fn new(mask: u64) -> Result<Self, HopError> {
        if mask & !FULL_MASK != 0 {
            return Err(HopError::OutOfRange);
        }
        let n = mask.count_ones();
        if n < MIN_ENABLED_CHANNELS {
            return Err(HopError::TooFewChannels(n));
        }
        Ok(ChannelMap(mask))
    }

    pub fn from_channels<I: IntoIterator<Item = u8>>(channels: I) -> Result<Self, HopError> {
        let mut mask = 0u64;
        for c in channels {
            if c >= DATA_CHANNEL_COUNT {
                return Err(HopError::OutOfRange);
            }
            mask |= 1 << c;
        }
        Self::new(mask)
    }

    /// The full map minus `excluded`.
    pub fn excluding<I: IntoIterator<Item = u8>>(excluded: I) -> Result<Self, HopError> {
        let mut mask = FULL_MASK;
        for c in excluded {
            if c >= DATA_CHANNEL_COUNT {
                return Err(HopError::OutOfRange);
            }
            mask &= !(1 << c);
        }
        Self::new(mask)
    }

    pub fn mask(self) -> u64 {
        self.0
    }

    pub fn is_enabled(self, channel: u8) -> bool {
        channel < DATA_CHANNEL_COUNT && self.0 & (1 << channel) != 0
    }

    pub fn enabled_count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn enabled(self) -> impl Iterator<Item = u8> {
        (0..DATA_CHANNEL_COUNT).filter(move |c| self.is_enabled(*c))
    }

    pub fn disabled(self) -> impl Iterator<Item = u8> {
        (0..DATA_CHANNEL_COUNT).filter(move |c| !self.is_enabled(*c))
    }
}

impl Default for ChannelMap {
    fn default() -> Self {
        ChannelMap::ALL
    }
}

impl fmt::Debug for ChannelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChannelMap({:#011x})", self.0)
    }
}

impl fmt::Display for ChannelMap {
    /// Hex mask, channel 0 in the least significant bit.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:010x}", self.0)
    }
}

/// Per-connection hop state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopState {
    increment: u8,
    last_unmapped: u8,
    last_channel: Option<u8>,
    map: ChannelMap,
    enabled: Vec<u8>,
}

impl HopState {
    pub fn new(increment: u8, last_unmapped: u8, map: ChannelMap) -> Result<Self, HopError> {
        if !(MIN_HOP_INCREMENT..=MAX_HOP_INCREMENT).contains(&increment) {
            return Err(HopError::BadIncrement(increment));
        }
        if last_unmapped >= DATA_CHANNEL_COUNT {
            return Err(HopError::BadUnmapped(last_unmapped));
        }
        Ok(HopState {
            increment,
            last_unmapped,
            last_channel: None,
            map,
            enabled: map.enabled().collect(),
        })
    }

    /// Hop state whose first event lands on `first_channel` under a full map.
    pub fn starting_at(increment: u8, first_channel: u8, map: ChannelMap) -> Result<Self, HopError> {
        if first_channel >= DATA_CHANNEL_COUNT {
            return Err(HopError::BadUnmapped(first_channel));
        }
        let n = DATA_CHANNEL_COUNT;
        let last = (first_channel + n - increment % n) % n;
        Self::new(increment, last, map)
    }

    pub fn increment(&self) -> u8 {
        self.increment
    }

    pub fn last_unmapped(&self) -> u8 {
        self.last_unmapped
    }

    pub fn channel_map(&self) -> ChannelMap {
        self.map
    }

    pub fn set_channel_map(&mut self, map: ChannelMap) {
        self.map = map;
        self.enabled = map.enabled().collect();
    }

    pub fn next_channel(&mut self) -> ChannelIndex {
        let unmapped = (self.last_unmapped + self.increment) % DATA_CHANNEL_COUNT;
        self.last_unmapped = unmapped;
        let channel = if self.map.is_enabled(unmapped) && self.last_channel != Some(unmapped) {
            unmapped
        } else {
            let n = self.enabled.len();
            let mut idx = usize::from(unmapped) % n;
            if self.last_channel == Some(self.enabled[idx]) {
                idx = (idx + 1) % n;
            }
            self.enabled[idx]
        };
        self.last_channel = Some(channel);
        ChannelIndex::data(channel)
    }
}
