//! Advertising, scanning and connection set-up.
//!
//! Advertisements are fire-and-forget: the advertiser's schedule depends only
//! on its configuration and the jitter draws, never on who heard it.

use rand::Rng;

use super::connection::{Connection, ConnectionParams, Medium, Reception, T_IFS_US};
use super::crc;
use super::hop::ChannelMap;
use super::packet::{airtime_us, AdvPduType, LinkPacket, MAX_ADV_PAYLOAD};
use super::LinkError;
use crate::phy::{ChannelIndex, ADVERTISING_CHANNELS};
use crate::sim::SimTime;
use crate::NodeId;

pub const DEFAULT_JITTER_MAX_US: u64 = 10_000;
pub const DEFAULT_SCAN_DWELL_US: u64 = 10_000;
/// Delay from the end of a connect request to the first anchor.
pub const TRANSMIT_WINDOW_OFFSET_US: u64 = 1_250;

#[derive(Debug, Clone, PartialEq)]
pub struct AdvertisingConfig {
    pub interval_us: u64,
    /// Copies per event; consecutive copies rotate over channels 37, 38, 39.
    pub repetitions: u32,
    pub payload: Vec<u8>,
    pub pdu_type: AdvPduType,
    /// Upper bound of the uniform per-event delay.
    pub jitter_max_us: u64,
}

impl AdvertisingConfig {
    pub fn new(interval_us: u64, payload: Vec<u8>) -> Self {
        AdvertisingConfig {
            interval_us,
            repetitions: 3,
            payload,
            pdu_type: AdvPduType::AdvInd,
            jitter_max_us: DEFAULT_JITTER_MAX_US,
        }
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        if self.repetitions == 0 {
            return Err(LinkError::BadAdvertising("repetitions must be at least 1".into()));
        }
        if self.interval_us == 0 {
            return Err(LinkError::BadAdvertising("interval must be positive".into()));
        }
        if self.event_span_us() >= self.interval_us {
            return Err(LinkError::BadAdvertising("copies of one event do not fit in the interval".into()));
        }
        LinkPacket::advertisement(self.pdu_type, &self.payload)?;
        Ok(())
    }

    fn frame_len(&self) -> usize {
        super::packet::ADV_OVERHEAD_BYTES + self.payload.len()
    }

    /// Start-to-start spacing of the copies within one event.
    pub fn copy_spacing_us(&self) -> u64 {
        airtime_us(self.frame_len()) + T_IFS_US
    }

    pub fn event_span_us(&self) -> u64 {
        u64::from(self.repetitions) * self.copy_spacing_us()
    }
}

/// One copy of an advertisement put on air.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvCopy {
    pub channel: ChannelIndex,
    pub start: SimTime,
    pub frame: LinkPacket,
}

#[derive(Debug, Clone)]
pub struct Advertiser {
    pub node: NodeId,
    config: AdvertisingConfig,
    next_event: SimTime,
    active: bool,
}

impl Advertiser {
    pub fn new(node: NodeId, config: AdvertisingConfig, first_event: SimTime) -> Result<Self, LinkError> {
        config.validate()?;
        Ok(Advertiser { node, config, next_event: first_event, active: true })
    }

    pub fn config(&self) -> &AdvertisingConfig {
        &self.config
    }

    pub fn next_event(&self) -> SimTime {
        self.next_event
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn stop(&mut self) {
        self.active = false;
    }

    /// Restarts advertising with the next event at `at`.
    pub fn resume(&mut self, at: SimTime) {
        self.active = true;
        self.next_event = at;
    }

    /// Emits the copies of the event due now and schedules the next one.
    pub fn advertising_event<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<AdvCopy> {
        if !self.active {
            return Vec::new();
        }
        let t = self.next_event;
        let frame = LinkPacket::advertisement(self.config.pdu_type, &self.config.payload)
            .expect("validated at construction");
        let copies = (0..self.config.repetitions)
            .map(|k| AdvCopy {
                channel: ADVERTISING_CHANNELS[k as usize % 3],
                start: t + u64::from(k) * self.config.copy_spacing_us(),
                frame: frame.clone(),
            })
            .collect();
        let jitter = if self.config.jitter_max_us == 0 { 0 } else { rng.random_range(0..=self.config.jitter_max_us) };
        self.next_event = t + self.config.interval_us + jitter;
        copies
    }
}

/// A receiver cycling over the advertising channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scanner {
    pub node: NodeId,
    pub dwell_us: u64,
    pub start: SimTime,
    /// Overrides the rotation with a single channel.
    pub parked_on: Option<ChannelIndex>,
}

impl Scanner {
    pub fn new(node: NodeId) -> Self {
        Scanner { node, dwell_us: DEFAULT_SCAN_DWELL_US, start: SimTime::ZERO, parked_on: None }
    }

    pub fn parked(node: NodeId, channel: ChannelIndex) -> Self {
        Scanner { parked_on: Some(channel), ..Scanner::new(node) }
    }

    pub fn listening_channel(&self, t: SimTime) -> ChannelIndex {
        if let Some(c) = self.parked_on {
            return c;
        }
        let slot = t.saturating_sub(self.start) / self.dwell_us.max(1);
        ADVERTISING_CHANNELS[(slot % 3) as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanReport {
    pub from: NodeId,
    pub at: SimTime,
    pub channel: ChannelIndex,
    pub rssi_dbm: f64,
    pub pdu_type: AdvPduType,
    pub payload: Vec<u8>,
}

/// Receives one advertisement copy at `scanner`. Damaged copies are dropped:
/// with no checksum a real demodulator would lose sync on them.
pub fn receive_copy<M: Medium + ?Sized>(scanner: &Scanner, from: NodeId, copy: &AdvCopy, medium: &mut M) -> Option<ScanReport> {
    if scanner.listening_channel(copy.start) != copy.channel {
        return None;
    }
    match medium.transmit(from, scanner.node, copy.channel, copy.start, &copy.frame.to_bytes()) {
        Reception::Received { rssi_dbm, bytes } => {
            let p = LinkPacket::parse_advertisement(&bytes).ok()?;
            Some(ScanReport {
                from,
                at: copy.start,
                channel: copy.channel,
                rssi_dbm,
                pdu_type: p.adv_type()?,
                payload: p.payload().to_vec(),
            })
        }
        Reception::Missed | Reception::Corrupted { .. } => None,
    }
}

/// Runs every advertiser's events that start in `[from, from + duration)`
/// and returns what `scanner` picked up, in time order.
pub fn scan<M: Medium + ?Sized, R: Rng + ?Sized>(
    scanner: &Scanner,
    advertisers: &mut [Advertiser],
    from: SimTime,
    duration_us: u64,
    medium: &mut M,
    rng: &mut R,
) -> Vec<ScanReport> {
    let end = from + duration_us;
    let mut reports = Vec::new();
    loop {
        let next = advertisers
            .iter_mut()
            .filter(|a| a.is_active() && a.next_event() >= from && a.next_event() < end)
            .min_by_key(|a| (a.next_event(), a.node));
        let Some(adv) = next else { break };
        let node = adv.node;
        for copy in adv.advertising_event(rng) {
            if let Some(r) = receive_copy(scanner, node, &copy, medium) {
                reports.push(r);
            }
        }
    }
    reports.sort_by_key(|r| (r.at, r.from));
    reports
}

/// Parameters a central proposes in a connect request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectRequest {
    pub access_address: u32,
    pub interval_us: u32,
    pub hop_increment: u8,
    pub channel_map: ChannelMap,
    pub pass_code: Vec<u8>,
}

const CONNECT_REQ_FIXED: usize = 4 + 4 + 1 + 5;
pub const MAX_PASS_CODE: usize = MAX_ADV_PAYLOAD - CONNECT_REQ_FIXED;

impl ConnectRequest {
    pub fn encode(&self) -> Result<Vec<u8>, LinkError> {
        if self.pass_code.len() > MAX_PASS_CODE {
            return Err(LinkError::PassCodeTooLong(self.pass_code.len()));
        }
        let mut out = Vec::with_capacity(CONNECT_REQ_FIXED + self.pass_code.len());
        out.extend_from_slice(&self.access_address.to_le_bytes());
        out.extend_from_slice(&self.interval_us.to_le_bytes());
        out.push(self.hop_increment);
        out.extend_from_slice(&self.channel_map.mask().to_le_bytes()[..5]);
        out.extend_from_slice(&self.pass_code);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LinkError> {
        if bytes.len() < CONNECT_REQ_FIXED {
            return Err(LinkError::BadConnectRequest);
        }
        let mut mask = [0u8; 8];
        mask[..5].copy_from_slice(&bytes[9..14]);
        Ok(ConnectRequest {
            access_address: u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")),
            interval_us: u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")),
            hop_increment: bytes[8],
            channel_map: ChannelMap::new(u64::from_le_bytes(mask)).map_err(|_| LinkError::BadConnectRequest)?,
            pass_code: bytes[CONNECT_REQ_FIXED..].to_vec(),
        })
    }
}

/// A connectable device: advertises until a central connects with the right
/// pass code.
#[derive(Debug, Clone)]
pub struct Peripheral {
    pub advertiser: Advertiser,
    pub pass_code: Option<Vec<u8>>,
    connected: bool,
}

impl Peripheral {
    pub fn new(advertiser: Advertiser, pass_code: Option<Vec<u8>>) -> Self {
        Peripheral { advertiser, pass_code, connected: false }
    }

    pub fn node(&self) -> NodeId {
        self.advertiser.node
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    /// Accepts or rejects a connect request. Acceptance stops advertising.
    pub fn on_connect_request(&mut self, req: &ConnectRequest) -> Result<(), LinkError> {
        if self.connected {
            return Err(LinkError::AlreadyConnected(self.node()));
        }
        if let Some(code) = &self.pass_code {
            if *code != req.pass_code {
                return Err(LinkError::WrongPassCode(self.node()));
            }
        }
        self.connected = true;
        self.advertiser.stop();
        Ok(())
    }

    /// Back to advertising after the connection was lost.
    pub fn on_disconnect(&mut self, at: SimTime) {
        self.connected = false;
        self.advertiser.resume(at);
    }
}

/// Answers the advertisement heard in `seen` with a connect request sent
/// one inter-frame space after the copy ended, on the same channel.
pub fn initiate_connection<M: Medium + ?Sized>(
    central: NodeId,
    peripheral: &mut Peripheral,
    seen: &ScanReport,
    req: &ConnectRequest,
    medium: &mut M,
) -> Result<Connection, LinkError> {
    if !peripheral.advertiser.is_active() {
        return Err(LinkError::NotAdvertising(peripheral.node()));
    }
    let frame = LinkPacket::advertisement(AdvPduType::ConnectReq, &req.encode()?)?;
    let adv_len = super::packet::ADV_OVERHEAD_BYTES + seen.payload.len();
    let at = seen.at + airtime_us(adv_len) + T_IFS_US;
    let bytes = match medium.transmit(central, peripheral.node(), seen.channel, at, &frame.to_bytes()) {
        Reception::Received { bytes, .. } => bytes,
        Reception::Missed | Reception::Corrupted { .. } => return Err(LinkError::RequestLost),
    };
    let heard = LinkPacket::parse_advertisement(&bytes).map_err(|_| LinkError::RequestLost)?;
    let heard = ConnectRequest::decode(heard.payload())?;
    peripheral.on_connect_request(&heard)?;

    let first_anchor = at + frame.airtime_us() + TRANSMIT_WINDOW_OFFSET_US;
    let mut params = ConnectionParams::new(heard.access_address, u64::from(heard.interval_us), first_anchor, heard.hop_increment);
    params.channel_map = heard.channel_map;
    params.crc_init = crc::DEFAULT_INIT;
    Connection::new(central, peripheral.node(), params)
}
