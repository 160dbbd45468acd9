//! Master-slave connections and connection events.
//!
//! One connection event is one master frame followed, 150 µs after it ends,
//! by one slave frame. The slave only answers a frame it received with a
//! valid CRC. Acknowledgement uses the one-bit SN/NESN scheme: a frame is
//! retransmitted until the peer's NESN moves past it, and a receiver accepts
//! a frame as new only when its SN equals the receiver's NESN. Together this
//! gives exactly-once, in-order delivery over any loss pattern that still
//! lets a clean exchange through eventually.

use std::collections::BTreeMap;

use super::crc;
use super::hop::{ChannelMap, HopError, HopState};
use super::packet::{DataHeader, FrameError, LinkPacket, Llid, MAX_DATA_PAYLOAD};
use super::LinkError;
use crate::phy::ChannelIndex;
use crate::sim::SimTime;
use crate::NodeId;

/// Inter-frame space in µs.
pub const T_IFS_US: u64 = 150;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Master,
    Slave,
}

/// An upper-layer payload waiting in (or travelling through) a link queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    pub id: u64,
    pub bytes: Vec<u8>,
    /// Lower is more urgent.
    pub priority: u8,
    pub enqueued_at: SimTime,
    /// How many times the payload has been put on air.
    pub attempts: u32,
}

/// What the radio hands back to the link layer for one transmitted frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Reception {
    /// Nothing detected (below sensitivity).
    Missed,
    /// Frame arrived intact.
    Received { rssi_dbm: f64, bytes: Vec<u8> },
    /// Frame detected but damaged in flight. `bytes` carries the damage, so a
    /// data frame fails its CRC on parse.
    Corrupted { rssi_dbm: f64, bytes: Vec<u8> },
}

/// Puts frames on air. Implemented by the simulator's radio and by scripted
/// media in tests.
pub trait Medium {
    fn transmit(&mut self, from: NodeId, to: NodeId, channel: ChannelIndex, at: SimTime, frame: &[u8]) -> Reception;
}

#[derive(Debug, Clone)]
enum Outgoing {
    Empty,
    Data(Payload),
}

#[derive(Debug, Clone, Default)]
struct Endpoint {
    queue: BTreeMap<(u8, u64), Payload>,
    in_flight: Option<Outgoing>,
    tx_seq: bool,
    next_expected: bool,
    order: u64,
}

impl Endpoint {
    fn push(&mut self, payload: Payload) {
        self.queue.insert((payload.priority, self.order), payload);
        self.order += 1;
    }

    fn frame(&mut self, access_address: u32, crc_init: u32) -> Result<(LinkPacket, Option<u64>), FrameError> {
        if self.in_flight.is_none() {
            let next = self.queue.pop_first().map(|(_, p)| p);
            self.in_flight = Some(next.map_or(Outgoing::Empty, Outgoing::Data));
        }
        let more_data = !self.queue.is_empty();
        let (llid, bytes, id) = match self.in_flight.as_mut().expect("set above") {
            Outgoing::Empty => (Llid::Empty, &[][..], None),
            Outgoing::Data(p) => {
                p.attempts += 1;
                (Llid::Start, &p.bytes[..], Some(p.id))
            }
        };
        let header = DataHeader { llid, nesn: self.next_expected, sn: self.tx_seq, more_data };
        Ok((LinkPacket::data(access_address, header, bytes, crc_init)?, id))
    }

    /// Processes a clean frame from the peer. Returns the payload it
    /// acknowledged and whether it carried new data.
    fn receive(&mut self, header: DataHeader) -> (Option<Payload>, bool) {
        let mut acked = None;
        if header.nesn != self.tx_seq {
            if let Some(out) = self.in_flight.take() {
                self.tx_seq = !self.tx_seq;
                if let Outgoing::Data(p) = out {
                    acked = Some(p);
                }
            }
        }
        let fresh = header.sn == self.next_expected;
        if fresh {
            self.next_expected = !self.next_expected;
        }
        (acked, fresh && header.llid == Llid::Start)
    }

    fn in_flight_payload(&self) -> Option<&Payload> {
        match &self.in_flight {
            Some(Outgoing::Data(p)) => Some(p),
            _ => None,
        }
    }

    fn backlog(&self) -> usize {
        self.queue.len() + usize::from(self.in_flight_payload().is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionParams {
    pub access_address: u32,
    pub interval_us: u64,
    pub first_anchor: SimTime,
    pub hop_increment: u8,
    pub last_unmapped: u8,
    pub channel_map: ChannelMap,
    pub crc_init: u32,
    /// Master drops the link when nothing was heard from the slave for this
    /// long. `None` keeps it forever.
    pub supervision_timeout_us: Option<u64>,
}

impl ConnectionParams {
    pub fn new(access_address: u32, interval_us: u64, first_anchor: SimTime, hop_increment: u8) -> Self {
        ConnectionParams {
            access_address,
            interval_us,
            first_anchor,
            hop_increment,
            last_unmapped: 0,
            channel_map: ChannelMap::ALL,
            crc_init: crc::DEFAULT_INIT,
            supervision_timeout_us: None,
        }
    }
}

/// One frame of a connection event, as seen on air.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub from: NodeId,
    pub to: NodeId,
    pub start: SimTime,
    pub len_bytes: usize,
    /// `None` when the receiver did not detect the frame at all.
    pub crc_ok: Option<bool>,
    pub rssi_dbm: Option<f64>,
    pub payload_id: Option<u64>,
}

impl FrameReport {
    pub fn clean(&self) -> bool {
        self.crc_ok == Some(true)
    }

    pub fn end(&self) -> SimTime {
        self.start + super::packet::airtime_us(self.len_bytes)
    }
}

/// A payload handed to the receiving application.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub payload: Payload,
    pub tx_start: SimTime,
    pub tx_end: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventOutcome {
    pub anchor: SimTime,
    pub channel: ChannelIndex,
    pub master_frame: FrameReport,
    pub slave_frame: Option<FrameReport>,
    pub to_slave: Option<Delivery>,
    pub to_master: Option<Delivery>,
    pub acked_master: Option<Payload>,
    pub acked_slave: Option<Payload>,
}

impl EventOutcome {
    /// True when either direction failed to get a clean frame across.
    pub fn failed(&self) -> bool {
        !self.master_frame.clean() || !self.slave_frame.as_ref().is_some_and(FrameReport::clean)
    }

    pub fn end(&self) -> SimTime {
        self.slave_frame.as_ref().unwrap_or(&self.master_frame).end()
    }
}

#[derive(Debug, Clone)]
pub struct Connection {
    master: NodeId,
    slave: NodeId,
    access_address: u32,
    crc_init: u32,
    interval_us: u64,
    anchor: SimTime,
    hop: HopState,
    pending_map: Option<ChannelMap>,
    master_ep: Endpoint,
    slave_ep: Endpoint,
    last_slave_rx: SimTime,
    supervision_timeout_us: Option<u64>,
    events: u64,
    next_payload_id: u64,
}

impl Connection {
    pub fn new(master: NodeId, slave: NodeId, params: ConnectionParams) -> Result<Self, LinkError> {
        if master == slave {
            return Err(LinkError::SelfConnection(master));
        }
        if params.interval_us == 0 {
            return Err(LinkError::BadInterval(0));
        }
        let hop = HopState::new(params.hop_increment, params.last_unmapped, params.channel_map)?;
        Ok(Connection {
            master,
            slave,
            access_address: params.access_address,
            crc_init: params.crc_init,
            interval_us: params.interval_us,
            anchor: params.first_anchor,
            hop,
            pending_map: None,
            master_ep: Endpoint::default(),
            slave_ep: Endpoint::default(),
            last_slave_rx: params.first_anchor,
            supervision_timeout_us: params.supervision_timeout_us,
            events: 0,
            next_payload_id: 0,
        })
    }

    pub fn master(&self) -> NodeId {
        self.master
    }

    pub fn slave(&self) -> NodeId {
        self.slave
    }

    pub fn access_address(&self) -> u32 {
        self.access_address
    }

    pub fn interval_us(&self) -> u64 {
        self.interval_us
    }

    /// Time of the next connection event.
    pub fn anchor(&self) -> SimTime {
        self.anchor
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn hop_state(&self) -> &HopState {
        &self.hop
    }

    pub fn channel_map(&self) -> ChannelMap {
        self.pending_map.unwrap_or(self.hop.channel_map())
    }

    /// Advances the hop sequence and returns the channel for the next event.
    pub fn hop_next(&mut self) -> ChannelIndex {
        self.hop.next_channel()
    }

    /// Queues a new channel map; it takes effect from the next event.
    pub fn update_channel_map(&mut self, mask: u64) -> Result<(), HopError> {
        self.pending_map = Some(ChannelMap::new(mask)?);
        Ok(())
    }

    /// Queues `bytes` for transmission by `from`. Returns the payload id.
    pub fn enqueue(&mut self, from: Role, bytes: Vec<u8>, priority: u8, at: SimTime) -> Result<u64, LinkError> {
        if bytes.len() > MAX_DATA_PAYLOAD {
            return Err(LinkError::Frame(FrameError::DataPayloadTooLong(bytes.len())));
        }
        let id = self.next_payload_id;
        self.next_payload_id += 1;
        let payload = Payload { id, bytes, priority, enqueued_at: at, attempts: 0 };
        match from {
            Role::Master => self.master_ep.push(payload),
            Role::Slave => self.slave_ep.push(payload),
        }
        Ok(id)
    }

    /// Payloads not yet acknowledged, including the one in flight.
    pub fn backlog(&self, of: Role) -> usize {
        match of {
            Role::Master => self.master_ep.backlog(),
            Role::Slave => self.slave_ep.backlog(),
        }
    }

    pub fn supervision_expired(&self, now: SimTime) -> bool {
        self.supervision_timeout_us
            .is_some_and(|limit| now.saturating_sub(self.last_slave_rx) >= limit)
    }

    pub fn set_supervision_timeout(&mut self, timeout_us: Option<u64>) {
        self.supervision_timeout_us = timeout_us;
    }

    pub fn last_slave_rx(&self) -> SimTime {
        self.last_slave_rx
    }

    /// Runs the connection event due at `t` and schedules the next anchor.
    pub fn connection_event<M: Medium + ?Sized>(&mut self, t: SimTime, medium: &mut M) -> Result<EventOutcome, LinkError> {
        if t != self.anchor {
            return Err(LinkError::NotAtAnchor { at: t, anchor: self.anchor });
        }
        if let Some(map) = self.pending_map.take() {
            self.hop.set_channel_map(map);
        }
        let channel = self.hop_next();

        let (frame, master_id) = self.master_ep.frame(self.access_address, self.crc_init)?;
        let (master_frame, received) = self.exchange(self.master, self.slave, channel, t, &frame, master_id, medium);

        let mut outcome = EventOutcome {
            anchor: t,
            channel,
            master_frame,
            slave_frame: None,
            to_slave: None,
            to_master: None,
            acked_master: None,
            acked_slave: None,
        };

        if let Some(header) = received {
            let in_flight = self.master_ep.in_flight_payload().cloned();
            let (acked, fresh) = self.slave_ep.receive(header);
            outcome.acked_slave = acked;
            if fresh {
                outcome.to_slave = in_flight.map(|payload| Delivery {
                    payload,
                    tx_start: t,
                    tx_end: outcome.master_frame.end(),
                });
            }

            let slave_start = outcome.master_frame.end() + T_IFS_US;
            let (frame, slave_id) = self.slave_ep.frame(self.access_address, self.crc_init)?;
            let (slave_frame, received) =
                self.exchange(self.slave, self.master, channel, slave_start, &frame, slave_id, medium);
            if let Some(header) = received {
                self.last_slave_rx = slave_start;
                let in_flight = self.slave_ep.in_flight_payload().cloned();
                let (acked, fresh) = self.master_ep.receive(header);
                outcome.acked_master = acked;
                if fresh {
                    outcome.to_master = in_flight.map(|payload| Delivery {
                        payload,
                        tx_start: slave_start,
                        tx_end: slave_frame.end(),
                    });
                }
            }
            outcome.slave_frame = Some(slave_frame);
        }

        self.anchor += self.interval_us;
        self.events += 1;
        Ok(outcome)
    }

    #[allow(clippy::too_many_arguments)]
    fn exchange<M: Medium + ?Sized>(
        &self,
        from: NodeId,
        to: NodeId,
        channel: ChannelIndex,
        at: SimTime,
        frame: &LinkPacket,
        payload_id: Option<u64>,
        medium: &mut M,
    ) -> (FrameReport, Option<DataHeader>) {
        let bytes = frame.to_bytes();
        let mut report = FrameReport {
            from,
            to,
            start: at,
            len_bytes: bytes.len(),
            crc_ok: None,
            rssi_dbm: None,
            payload_id,
        };
        let mut header = None;
        if let Reception::Received { rssi_dbm, bytes } | Reception::Corrupted { rssi_dbm, bytes } =
            medium.transmit(from, to, channel, at, &bytes)
        {
            report.rssi_dbm = Some(rssi_dbm);
            match LinkPacket::parse_data(&bytes, self.crc_init) {
                Ok(p) if p.access_address() == self.access_address => {
                    report.crc_ok = Some(true);
                    header = p.data_header();
                }
                _ => report.crc_ok = Some(false),
            }
        }
        (report, header)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    /// Delivers or corrupts frames following a fixed script; clean once the
    /// script runs out.
    struct Scripted {
        script: VecDeque<bool>,
        log: Vec<(NodeId, ChannelIndex, SimTime, usize)>,
    }

    impl Scripted {
        fn new(script: &[bool]) -> Self {
            Scripted { script: script.iter().copied().collect(), log: Vec::new() }
        }
    }

    impl Medium for Scripted {
        fn transmit(&mut self, from: NodeId, _to: NodeId, channel: ChannelIndex, at: SimTime, frame: &[u8]) -> Reception {
            self.log.push((from, channel, at, frame.len()));
            let mut bytes = frame.to_vec();
            if self.script.pop_front().unwrap_or(true) {
                Reception::Received { rssi_dbm: -50.0, bytes }
            } else {
                bytes[8] ^= 0x01;
                Reception::Corrupted { rssi_dbm: -50.0, bytes }
            }
        }
    }

    const M: NodeId = NodeId(0);
    const S: NodeId = NodeId(1);

    fn conn(interval: u64) -> Connection {
        Connection::new(M, S, ConnectionParams::new(0x5065_A1B2, interval, SimTime::from_millis(1), 7)).unwrap()
    }

    #[test]
    fn lossless_event_delivers_both_ways() {
        let mut c = conn(2_000_000);
        c.enqueue(Role::Master, b"cfg".to_vec(), 0, SimTime::ZERO).unwrap();
        c.enqueue(Role::Slave, b"reading1".to_vec(), 0, SimTime::ZERO).unwrap();
        let mut air = Scripted::new(&[]);
        let out = c.connection_event(SimTime::from_millis(1), &mut air).unwrap();
        assert!(!out.failed());
        assert_eq!(out.to_slave.unwrap().payload.bytes, b"cfg");
        assert_eq!(out.to_master.as_ref().unwrap().payload.bytes, b"reading1");
        // master's frame acked by the slave's reply; slave's ack arrives next event
        assert_eq!(out.acked_master.unwrap().bytes, b"cfg");
        assert_eq!(c.backlog(Role::Master), 0);
        assert_eq!(c.backlog(Role::Slave), 1);
        let out = c.connection_event(SimTime::from_micros(2_001_000), &mut air).unwrap();
        assert_eq!(out.acked_slave.unwrap().bytes, b"reading1");
        assert!(out.to_master.is_none());
        assert_eq!(c.backlog(Role::Slave), 0);
    }

    #[test]
    fn interval_drives_anchors() {
        let mut c = conn(2_000_000);
        let mut air = Scripted::new(&[]);
        for k in 0..5u64 {
            let t = SimTime::from_micros(1_000 + k * 2_000_000);
            assert_eq!(c.anchor(), t);
            c.connection_event(t, &mut air).unwrap();
        }
        assert_eq!(c.events(), 5);
        assert!(c.connection_event(SimTime::from_micros(5), &mut air).is_err());
    }

    #[test]
    fn corrupt_slave_frame_is_retransmitted_once_delivered() {
        let mut c = conn(1000);
        c.enqueue(Role::Slave, b"x".to_vec(), 0, SimTime::ZERO).unwrap();
        // event 1: master ok, slave corrupted. event 2: clean.
        let mut air = Scripted::new(&[true, false]);
        let e1 = c.connection_event(c.anchor(), &mut air).unwrap();
        assert!(e1.failed());
        assert!(e1.to_master.is_none());
        assert_eq!(e1.slave_frame.as_ref().unwrap().crc_ok, Some(false));
        let e2 = c.connection_event(c.anchor(), &mut air).unwrap();
        let d = e2.to_master.unwrap();
        assert_eq!(d.payload.bytes, b"x");
        assert_eq!(d.payload.attempts, 2);
        let e3 = c.connection_event(c.anchor(), &mut air).unwrap();
        assert!(e3.to_master.is_none());
        assert_eq!(e3.acked_slave.unwrap().bytes, b"x");
    }

    #[test]
    fn lost_ack_does_not_duplicate() {
        let mut c = conn(1000);
        c.enqueue(Role::Slave, b"a".to_vec(), 0, SimTime::ZERO).unwrap();
        c.enqueue(Role::Slave, b"b".to_vec(), 0, SimTime::ZERO).unwrap();
        // e1 clean (a delivered). e2 master frame lost: slave never learns of the ack.
        let mut air = Scripted::new(&[true, true, false]);
        let mut delivered = Vec::new();
        for _ in 0..6 {
            let out = c.connection_event(c.anchor(), &mut air).unwrap();
            if let Some(d) = out.to_master {
                delivered.push(d.payload.bytes);
            }
        }
        assert_eq!(delivered, vec![b"a".to_vec(), b"b".to_vec()]);
    }

    #[test]
    fn slave_silent_after_bad_master_frame() {
        let mut c = conn(1000);
        let mut air = Scripted::new(&[false]);
        let out = c.connection_event(c.anchor(), &mut air).unwrap();
        assert_eq!(out.master_frame.crc_ok, Some(false));
        assert!(out.slave_frame.is_none());
        assert_eq!(air.log.len(), 1);
    }

    #[test]
    fn eight_byte_slave_payload_timing() {
        let mut c = conn(1000);
        c.enqueue(Role::Slave, vec![0; 10], 0, SimTime::ZERO).unwrap();
        let mut air = Scripted::new(&[]);
        let out = c.connection_event(c.anchor(), &mut air).unwrap();
        let sf = out.slave_frame.unwrap();
        assert_eq!(sf.len_bytes, 20);
        assert_eq!(sf.end() - sf.start, 160);
        assert_eq!(sf.start, out.master_frame.end() + T_IFS_US);
    }

    #[test]
    fn consecutive_events_use_different_channels() {
        let mut c = conn(1000);
        let mut air = Scripted::new(&[]);
        let chans: Vec<u8> = (0..100).map(|_| c.connection_event(c.anchor(), &mut air).unwrap().channel.index()).collect();
        assert!(chans.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn channel_map_update_applies_next_event() {
        let mut c = conn(1000);
        let mut air = Scripted::new(&[]);
        c.connection_event(c.anchor(), &mut air).unwrap();
        let map = ChannelMap::excluding(0..10).unwrap();
        c.update_channel_map(map.mask()).unwrap();
        assert!(c.update_channel_map(1).is_err());
        for _ in 0..500 {
            let ch = c.connection_event(c.anchor(), &mut air).unwrap().channel.index();
            assert!(ch >= 10);
        }
    }

    #[test]
    fn priority_orders_queue_but_not_in_flight() {
        let mut c = conn(1000);
        c.enqueue(Role::Slave, b"low".to_vec(), 5, SimTime::ZERO).unwrap();
        let mut air = Scripted::new(&[true, false]);
        c.connection_event(c.anchor(), &mut air).unwrap(); // "low" now in flight, corrupted
        c.enqueue(Role::Slave, b"urgent".to_vec(), 0, SimTime::ZERO).unwrap();
        c.enqueue(Role::Slave, b"mid".to_vec(), 2, SimTime::ZERO).unwrap();
        let mut got = Vec::new();
        for _ in 0..6 {
            if let Some(d) = c.connection_event(c.anchor(), &mut air).unwrap().to_master {
                got.push(String::from_utf8(d.payload.bytes).unwrap());
            }
        }
        assert_eq!(got, ["low", "urgent", "mid"]);
    }

    #[test]
    fn supervision_timeout() {
        let mut params = ConnectionParams::new(1, 100_000, SimTime::ZERO, 9);
        params.supervision_timeout_us = Some(300_000);
        let mut c = Connection::new(M, S, params).unwrap();
        let mut air = Scripted::new(&[false; 10]);
        for _ in 0..3 {
            c.connection_event(c.anchor(), &mut air).unwrap();
        }
        assert!(!c.supervision_expired(SimTime::from_micros(299_999)));
        assert!(c.supervision_expired(SimTime::from_micros(300_000)));
    }
}
