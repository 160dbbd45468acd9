//! Intra-vehicle radio model.
//!
//! Received power is `tx_power - path_loss - shadowing`, where shadowing is a
//! log-normal term that stays constant for one coherence interval per
//! `(link, channel)`. Packet errors come from a per-bit error probability
//! evaluated at the SINR, with interference scaled by how much of each
//! interferer's (flat) spectrum falls inside the 2 MHz BLE channel.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::sim::{streams, RngStreams, SimTime};
use crate::NodeId;

pub const CHANNEL_COUNT: u8 = 40;
pub const DATA_CHANNEL_COUNT: u8 = 37;
pub const BLE_CHANNEL_BANDWIDTH_MHZ: f64 = 2.0;
pub const MIN_TX_POWER_DBM: f64 = -20.0;
pub const MAX_TX_POWER_DBM: f64 = 10.0;
pub const DEFAULT_NOISE_FLOOR_DBM: f64 = -100.0;
/// Loss that separates same-compartment from cross-compartment links.
pub const CROSS_COMPARTMENT_MIN_LOSS_DB: f64 = 80.0;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, PartialEq)]
pub enum PhyError {
    #[error("channel index {0} out of range 0-39")]
    BadChannel(u8),
    #[error("tx power {0} dBm outside [-20, 10] dBm")]
    TxPowerOutOfRange(f64),
    #[error("no radio link between {0} and {1}")]
    UnknownLink(NodeId, NodeId),
    #[error("invalid radio link {a}-{b}: {reason}")]
    BadLink { a: NodeId, b: NodeId, reason: String },
    #[error("invalid interferer: {0}")]
    BadInterferer(String),
    #[error("invalid BER table: {0}")]
    BadBerTable(String),
}

/// One of the 40 BLE RF channels, numbered the way the link layer numbers
/// them: 0-36 data, 37-39 advertising.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelIndex(u8);

pub const ADVERTISING_CHANNELS: [ChannelIndex; 3] =
    [ChannelIndex(37), ChannelIndex(38), ChannelIndex(39)];

impl ChannelIndex {
    pub fn new(index: u8) -> Result<Self, PhyError> {
        if index < CHANNEL_COUNT {
            Ok(ChannelIndex(index))
        } else {
            Err(PhyError::BadChannel(index))
        }
    }

    /// Data channel constructor for indices known to be in 0-36.
    pub(crate) fn data(index: u8) -> Self {
        debug_assert!(index < DATA_CHANNEL_COUNT);
        ChannelIndex(index)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn is_advertising(self) -> bool {
        self.0 >= DATA_CHANNEL_COUNT
    }

    /// Position of the channel in the 2402-2480 MHz raster.
    pub fn rf_position(self) -> u8 {
        match self.0 {
            37 => 0,
            38 => 12,
            39 => 39,
            i @ 0..=10 => i + 1,
            i => i + 2,
        }
    }

    pub fn center_frequency_mhz(self) -> f64 {
        2402.0 + 2.0 * f64::from(self.rf_position())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TxParams {
    tx_power_dbm: f64,
    pub channel: ChannelIndex,
}

impl TxParams {
    pub fn new(tx_power_dbm: f64, channel: ChannelIndex) -> Result<Self, PhyError> {
        if !(MIN_TX_POWER_DBM..=MAX_TX_POWER_DBM).contains(&tx_power_dbm) {
            return Err(PhyError::TxPowerOutOfRange(tx_power_dbm));
        }
        Ok(TxParams { tx_power_dbm, channel })
    }

    pub fn tx_power_dbm(&self) -> f64 {
        self.tx_power_dbm
    }
}

/// Free-space path loss in dB.
pub fn friis_loss_db(distance_m: f64, frequency_mhz: f64) -> f64 {
    let d = distance_m.max(1e-3);
    20.0 * (4.0 * std::f64::consts::PI * d * frequency_mhz * 1e6 / SPEED_OF_LIGHT).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompartmentRelation {
    Same,
    Cross,
}

/// Base path loss of a link, either constant or following a time trace
/// (linearly interpolated, held constant outside the trace).
#[derive(Debug, Clone, PartialEq)]
pub enum PathLoss {
    Fixed(f64),
    Trace(Vec<(SimTime, f64)>),
}

impl PathLoss {
    pub fn at(&self, t: SimTime) -> f64 {
        match self {
            PathLoss::Fixed(db) => *db,
            PathLoss::Trace(points) => interpolate(points, t),
        }
    }

    fn min(&self) -> f64 {
        match self {
            PathLoss::Fixed(db) => *db,
            PathLoss::Trace(points) => points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        }
    }
}

pub(crate) fn interpolate(points: &[(SimTime, f64)], t: SimTime) -> f64 {
    match points {
        [] => 0.0,
        [only] => only.1,
        _ => {
            if t <= points[0].0 {
                return points[0].1;
            }
            for w in points.windows(2) {
                let (t0, v0) = w[0];
                let (t1, v1) = w[1];
                if t <= t1 {
                    let frac = (t - t0) as f64 / (t1 - t0) as f64;
                    return v0 + frac * (v1 - v0);
                }
            }
            points[points.len() - 1].1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadioLink {
    pub a: NodeId,
    pub b: NodeId,
    pub loss: PathLoss,
    pub shadowing_sigma_db: f64,
    pub coherence_time_us: u64,
    pub relation: CompartmentRelation,
}

impl RadioLink {
    pub fn fixed(a: NodeId, b: NodeId, loss_db: f64) -> Self {
        RadioLink {
            a,
            b,
            loss: PathLoss::Fixed(loss_db),
            shadowing_sigma_db: 0.0,
            coherence_time_us: 2_500_000,
            relation: CompartmentRelation::Same,
        }
    }

    pub fn validate(&self) -> Result<(), PhyError> {
        let bad = |reason: &str| PhyError::BadLink { a: self.a, b: self.b, reason: reason.into() };
        if let PathLoss::Trace(points) = &self.loss {
            if points.is_empty() {
                return Err(bad("empty loss trace"));
            }
            if points.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(bad("loss trace times must be strictly increasing"));
            }
        }
        let min = self.loss.min();
        if !(min >= 0.0) {
            return Err(bad("path loss must be non-negative"));
        }
        if self.relation == CompartmentRelation::Cross && min < CROSS_COMPARTMENT_MIN_LOSS_DB {
            return Err(bad("cross-compartment link needs at least 80 dB path loss"));
        }
        if !(self.shadowing_sigma_db >= 0.0) {
            return Err(bad("shadowing sigma must be non-negative"));
        }
        if self.coherence_time_us == 0 {
            return Err(bad("coherence time must be positive"));
        }
        Ok(())
    }

}

/// Periodic on/off activity of an interferer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DutyPattern {
    pub period_us: u64,
    pub on_fraction: f64,
    pub phase_us: u64,
}

impl DutyPattern {
    pub const ALWAYS_ON: DutyPattern = DutyPattern { period_us: 1, on_fraction: 1.0, phase_us: 0 };

    pub fn is_on(&self, t: SimTime) -> bool {
        if self.on_fraction >= 1.0 {
            return true;
        }
        if self.on_fraction <= 0.0 {
            return false;
        }
        let pos = (t.as_micros() + self.period_us - self.phase_us % self.period_us) % self.period_us;
        (pos as f64) < self.on_fraction * self.period_us as f64
    }
}

/// A non-BLE emitter (e.g. WiFi) with a flat power spectral density.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceSource {
    pub center_mhz: f64,
    pub bandwidth_mhz: f64,
    pub tx_power_dbm: f64,
    /// Loss from the interferer to every receiver in the vehicle.
    pub path_loss_db: f64,
    pub duty: DutyPattern,
}

impl InterferenceSource {
    pub fn validate(&self) -> Result<(), PhyError> {
        if !(self.bandwidth_mhz > 0.0) {
            return Err(PhyError::BadInterferer("bandwidth must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.duty.on_fraction) {
            return Err(PhyError::BadInterferer("on-fraction must be within [0, 1]".into()));
        }
        if self.duty.period_us == 0 {
            return Err(PhyError::BadInterferer("duty period must be positive".into()));
        }
        Ok(())
    }

    /// Fraction of the interferer's power inside the BLE channel.
    pub fn overlap_fraction(&self, channel: ChannelIndex) -> f64 {
        let fc = channel.center_frequency_mhz();
        let lo = (fc - BLE_CHANNEL_BANDWIDTH_MHZ / 2.0).max(self.center_mhz - self.bandwidth_mhz / 2.0);
        let hi = (fc + BLE_CHANNEL_BANDWIDTH_MHZ / 2.0).min(self.center_mhz + self.bandwidth_mhz / 2.0);
        ((hi - lo) / self.bandwidth_mhz).clamp(0.0, 1.0)
    }

    /// Interference power in mW seen inside `channel` at time `t`.
    pub fn received_mw(&self, channel: ChannelIndex, t: SimTime) -> f64 {
        if !self.duty.is_on(t) {
            return 0.0;
        }
        let frac = self.overlap_fraction(channel);
        if frac == 0.0 {
            return 0.0;
        }
        dbm_to_mw(self.tx_power_dbm - self.path_loss_db) * frac
    }
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Bit error probability as a function of SINR.
#[derive(Debug, Clone, PartialEq)]
pub enum BerCurve {
    /// Noncoherent binary FSK: `p = 0.5 * exp(-snr / 2)`.
    NoncoherentFsk,
    /// `(sinr_db, ber)` points sorted by SINR, linearly interpolated,
    /// clamped at both ends.
    Table(Vec<(f64, f64)>),
    /// SINR-independent error probability, mostly for tests.
    Fixed(f64),
}

impl BerCurve {
    pub fn table(points: Vec<(f64, f64)>) -> Result<Self, PhyError> {
        if points.is_empty() {
            return Err(PhyError::BadBerTable("no points".into()));
        }
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(PhyError::BadBerTable("SINR values must be strictly increasing".into()));
        }
        if points.iter().any(|p| !(0.0..=1.0).contains(&p.1)) {
            return Err(PhyError::BadBerTable("BER values must be within [0, 1]".into()));
        }
        Ok(BerCurve::Table(points))
    }

    pub fn ber(&self, sinr_db: f64) -> f64 {
        let p = match self {
            BerCurve::NoncoherentFsk => 0.5 * (-0.5 * 10f64.powf(sinr_db / 10.0)).exp(),
            BerCurve::Fixed(p) => *p,
            BerCurve::Table(points) => {
                let first = points[0];
                let last = points[points.len() - 1];
                if sinr_db <= first.0 {
                    first.1
                } else if sinr_db >= last.0 {
                    last.1
                } else {
                    let i = points.partition_point(|p| p.0 <= sinr_db);
                    let (x0, y0) = points[i - 1];
                    let (x1, y1) = points[i];
                    y0 + (sinr_db - x0) / (x1 - x0) * (y1 - y0)
                }
            }
        };
        p.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketOutcome {
    Delivered,
    Corrupted,
}

/// Probability that all `bits` survive a per-bit error probability `ber`.
pub fn frame_success_probability(ber: f64, bits: u32) -> f64 {
    (1.0 - ber).powi(bits as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinkId(pub usize);

/// Scenario-wide radio environment.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    links: Vec<RadioLink>,
    /// (lower id, higher id) -> index into `links`.
    by_pair: BTreeMap<(NodeId, NodeId), usize>,
    pub interferers: Vec<InterferenceSource>,
    pub noise_floor_dbm: f64,
    /// Received power below which a receiver does not detect the packet.
    pub sensitivity_dbm: f64,
    pub ber: BerCurve,
    /// Correlation of shadowing across channels of one link, in [0, 1].
    pub channel_correlation: f64,
    /// Extra per-packet corruption probability, independent of SINR.
    pub uniform_packet_loss: f64,
    streams: RngStreams,
}

impl ChannelModel {
    pub fn new(seed: u64) -> Self {
        ChannelModel {
            links: Vec::new(),
            by_pair: BTreeMap::new(),
            interferers: Vec::new(),
            noise_floor_dbm: DEFAULT_NOISE_FLOOR_DBM,
            sensitivity_dbm: -90.0,
            ber: BerCurve::NoncoherentFsk,
            channel_correlation: 0.0,
            uniform_packet_loss: 0.0,
            streams: RngStreams::new(seed),
        }
    }

    pub fn add_link(&mut self, link: RadioLink) -> Result<LinkId, PhyError> {
        link.validate()?;
        let key = (link.a.min(link.b), link.a.max(link.b));
        if self.by_pair.contains_key(&key) {
            return Err(PhyError::BadLink { a: link.a, b: link.b, reason: "duplicate link".into() });
        }
        self.by_pair.insert(key, self.links.len());
        self.links.push(link);
        Ok(LinkId(self.links.len() - 1))
    }

    pub fn add_interferer(&mut self, source: InterferenceSource) -> Result<(), PhyError> {
        source.validate()?;
        self.interferers.push(source);
        Ok(())
    }

    pub fn link_between(&self, a: NodeId, b: NodeId) -> Result<LinkId, PhyError> {
        self.by_pair.get(&(a.min(b), a.max(b))).map(|&i| LinkId(i)).ok_or(PhyError::UnknownLink(a, b))
    }

    pub fn link(&self, id: LinkId) -> &RadioLink {
        &self.links[id.0]
    }

    pub fn links(&self) -> &[RadioLink] {
        &self.links
    }

    /// Shadowing term in dB for `(link, channel)` in the coherence interval
    /// containing `t`. Draws are keyed, so query order does not matter.
    pub fn shadowing_db(&self, id: LinkId, channel: ChannelIndex, t: SimTime) -> f64 {
        let link = &self.links[id.0];
        if link.shadowing_sigma_db == 0.0 {
            return 0.0;
        }
        let interval = t.as_micros() / link.coherence_time_us;
        let draw = |ch: u64| -> f64 {
            self.streams
                .keyed(streams::SHADOWING, &[id.0 as u64, ch, interval])
                .sample(StandardNormal)
        };
        let rho = self.channel_correlation.clamp(0.0, 1.0);
        let z = if rho == 0.0 {
            draw(u64::from(channel.index()))
        } else {
            rho.sqrt() * draw(u64::MAX) + (1.0 - rho).sqrt() * draw(u64::from(channel.index()))
        };
        link.shadowing_sigma_db * z
    }

    pub fn rssi(&self, id: LinkId, tx: &TxParams, t: SimTime) -> f64 {
        let link = &self.links[id.0];
        tx.tx_power_dbm() - link.loss.at(t) - self.shadowing_db(id, tx.channel, t)
    }

    /// Interference power (mW) from `interferers` inside `channel` at `t`.
    pub fn interference_mw(interferers: &[InterferenceSource], channel: ChannelIndex, t: SimTime) -> f64 {
        interferers.iter().map(|i| i.received_mw(channel, t)).sum()
    }

    pub fn sinr_for_signal(&self, signal_dbm: f64, interferers: &[InterferenceSource], channel: ChannelIndex, t: SimTime) -> f64 {
        let noise = dbm_to_mw(self.noise_floor_dbm) + Self::interference_mw(interferers, channel, t);
        signal_dbm - mw_to_dbm(noise)
    }

    pub fn sinr(&self, id: LinkId, tx: &TxParams, interferers: &[InterferenceSource], t: SimTime) -> f64 {
        self.sinr_for_signal(self.rssi(id, tx, t), interferers, tx.channel, t)
    }

    pub fn delivery_probability(&self, sinr_db: f64, bits: u32) -> f64 {
        frame_success_probability(self.ber.ber(sinr_db), bits) * (1.0 - self.uniform_packet_loss)
    }

    /// Draws one uniform sample from `rng` regardless of the outcome so that
    /// the stream stays aligned between otherwise identical runs.
    pub fn packet_outcome<R: Rng + ?Sized>(
        &self,
        id: LinkId,
        tx: &TxParams,
        bits: u32,
        interferers: &[InterferenceSource],
        t: SimTime,
        rng: &mut R,
    ) -> PacketOutcome {
        let sinr = self.sinr(id, tx, interferers, t);
        decide(self.delivery_probability(sinr, bits), rng)
    }
}

pub(crate) fn decide<R: Rng + ?Sized>(p_delivered: f64, rng: &mut R) -> PacketOutcome {
    let u: f64 = rng.random();
    if u < p_delivered {
        PacketOutcome::Delivered
    } else {
        PacketOutcome::Corrupted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ch(i: u8) -> ChannelIndex {
        ChannelIndex::new(i).unwrap()
    }

    fn model_with(loss: f64) -> (ChannelModel, LinkId) {
        let mut m = ChannelModel::new(7);
        let id = m.add_link(RadioLink::fixed(NodeId(0), NodeId(1), loss)).unwrap();
        (m, id)
    }

    #[test]
    fn channel_frequencies() {
        assert_eq!(ch(37).center_frequency_mhz(), 2402.0);
        assert_eq!(ch(38).center_frequency_mhz(), 2426.0);
        assert_eq!(ch(39).center_frequency_mhz(), 2480.0);
        assert_eq!(ch(0).center_frequency_mhz(), 2404.0);
        assert_eq!(ch(10).center_frequency_mhz(), 2424.0);
        assert_eq!(ch(11).center_frequency_mhz(), 2428.0);
        assert_eq!(ch(36).center_frequency_mhz(), 2478.0);
        let mut freqs: Vec<f64> = (0..40).map(|i| ch(i).center_frequency_mhz()).collect();
        freqs.sort_by(f64::total_cmp);
        let expected: Vec<f64> = (0..40).map(|k| 2402.0 + 2.0 * k as f64).collect();
        assert_eq!(freqs, expected);
        assert!(ChannelIndex::new(40).is_err());
        assert_eq!((0..40).filter(|i| ch(*i).is_advertising()).count(), 3);
    }

    #[test]
    fn tx_power_bounds() {
        assert!(TxParams::new(-20.0, ch(0)).is_ok());
        assert!(TxParams::new(10.0, ch(0)).is_ok());
        assert_eq!(TxParams::new(12.0, ch(0)), Err(PhyError::TxPowerOutOfRange(12.0)));
        assert!(TxParams::new(-21.0, ch(0)).is_err());
    }

    #[test]
    fn friis_at_five_metres() {
        // 20 log10(4 pi d f / c) evaluated by hand: 20 log10(4*pi*5*2.44e9/c) = 54.17
        let expected = 20.0 * (4.0 * std::f64::consts::PI * 5.0 * 2.44e9 / 2.99792458e8f64).log10();
        assert!((friis_loss_db(5.0, 2440.0) - expected).abs() < 1e-12);
        assert!((expected - 54.2).abs() < 0.05);
    }

    #[test]
    fn rssi_examples() {
        let (m, id) = model_with(54.2);
        let tx = TxParams::new(0.0, ch(5)).unwrap();
        assert!((m.rssi(id, &tx, SimTime::ZERO) + 54.2).abs() < 1e-12);

        let mut m = ChannelModel::new(1);
        let mut cross = RadioLink::fixed(NodeId(0), NodeId(1), 80.0);
        cross.relation = CompartmentRelation::Cross;
        let id = m.add_link(cross).unwrap();
        assert_eq!(m.rssi(id, &tx, SimTime::ZERO), -80.0);

        let (m, id) = model_with(0.0);
        let tx = TxParams::new(-20.0, ch(5)).unwrap();
        assert_eq!(m.rssi(id, &tx, SimTime::ZERO), -20.0);
    }

    #[test]
    fn cross_compartment_needs_80_db() {
        let mut l = RadioLink::fixed(NodeId(0), NodeId(1), 79.9);
        l.relation = CompartmentRelation::Cross;
        assert!(l.validate().is_err());
    }

    #[test]
    fn unknown_link_is_error() {
        let (m, _) = model_with(50.0);
        assert_eq!(m.link_between(NodeId(0), NodeId(2)), Err(PhyError::UnknownLink(NodeId(0), NodeId(2))));
        assert!(m.link_between(NodeId(1), NodeId(0)).is_ok());
    }

    #[test]
    fn sinr_examples() {
        let (m, id) = model_with(60.0);
        let tx = TxParams::new(0.0, ch(5)).unwrap();
        assert!((m.sinr(id, &tx, &[], SimTime::ZERO) - 40.0).abs() < 1e-9);

        // co-channel interferer at -60 dBm, noise negligible
        let mut quiet = m.clone();
        quiet.noise_floor_dbm = -300.0;
        let jam = InterferenceSource {
            center_mhz: ch(5).center_frequency_mhz(),
            bandwidth_mhz: 2.0,
            tx_power_dbm: 0.0,
            path_loss_db: 60.0,
            duty: DutyPattern::ALWAYS_ON,
        };
        assert!(quiet.sinr(id, &tx, std::slice::from_ref(&jam), SimTime::ZERO).abs() < 1e-9);

        // 20 MHz wide source centred on the channel: 2/20 of its power lands in it
        let wide = InterferenceSource { bandwidth_mhz: 20.0, ..jam };
        assert!((wide.overlap_fraction(ch(5)) - 0.1).abs() < 1e-12);
        let sinr = quiet.sinr(id, &tx, &[wide], SimTime::ZERO);
        assert!((sinr - 10.0).abs() < 1e-9);
    }

    #[test]
    fn duty_pattern_switches() {
        let d = DutyPattern { period_us: 100, on_fraction: 0.25, phase_us: 0 };
        assert!(d.is_on(SimTime::from_micros(0)));
        assert!(d.is_on(SimTime::from_micros(24)));
        assert!(!d.is_on(SimTime::from_micros(25)));
        assert!(d.is_on(SimTime::from_micros(110)));
        let off = DutyPattern { on_fraction: 0.0, ..d };
        assert!(!off.is_on(SimTime::ZERO));
    }

    #[test]
    fn ber_curves() {
        assert_eq!(BerCurve::NoncoherentFsk.ber(f64::NEG_INFINITY), 0.5);
        assert_eq!(BerCurve::NoncoherentFsk.ber(40.0), 0.0);
        let t = BerCurve::table(vec![(0.0, 0.1), (10.0, 0.0)]).unwrap();
        assert!((t.ber(5.0) - 0.05).abs() < 1e-12);
        assert_eq!(t.ber(-3.0), 0.1);
        assert_eq!(t.ber(30.0), 0.0);
        assert!(BerCurve::table(vec![(1.0, 0.1), (0.0, 0.2)]).is_err());
        assert_eq!(BerCurve::Fixed(2.0).ber(0.0), 1.0);
    }

    #[test]
    fn packet_outcome_extremes() {
        let (mut m, id) = model_with(60.0);
        let tx = TxParams::new(0.0, ch(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        m.ber = BerCurve::Fixed(0.0);
        assert!((0..1000).all(|_| m.packet_outcome(id, &tx, 376, &[], SimTime::ZERO, &mut rng) == PacketOutcome::Delivered));
        m.ber = BerCurve::Fixed(1.0);
        assert!((0..1000).all(|_| m.packet_outcome(id, &tx, 376, &[], SimTime::ZERO, &mut rng) == PacketOutcome::Corrupted));
    }

    #[test]
    fn delivery_probability_monte_carlo() {
        let (mut m, id) = model_with(60.0);
        m.ber = BerCurve::Fixed(1e-3);
        let tx = TxParams::new(0.0, ch(3)).unwrap();
        let exact = (1.0f64 - 1e-3).powi(376);
        assert!((exact - 0.6865).abs() < 5e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000;
        let ok = (0..n)
            .filter(|_| m.packet_outcome(id, &tx, 376, &[], SimTime::ZERO, &mut rng) == PacketOutcome::Delivered)
            .count();
        assert!((ok as f64 / n as f64 - exact).abs() < 0.002);
    }

    #[test]
    fn shadowing_piecewise_constant() {
        let mut m = ChannelModel::new(3);
        let mut l = RadioLink::fixed(NodeId(0), NodeId(1), 60.0);
        l.shadowing_sigma_db = 4.0;
        l.coherence_time_us = 1_000_000;
        let id = m.add_link(l).unwrap();
        let tx = TxParams::new(0.0, ch(8)).unwrap();
        let a = m.rssi(id, &tx, SimTime::from_micros(10));
        let b = m.rssi(id, &tx, SimTime::from_micros(999_999));
        assert_eq!(a, b);
        let c = m.rssi(id, &tx, SimTime::from_micros(1_000_000));
        assert_ne!(a, c);
        // independent draws per channel by default
        let other = TxParams::new(0.0, ch(9)).unwrap();
        assert_ne!(a, m.rssi(id, &other, SimTime::from_micros(10)));
        // fully correlated channels share the draw
        m.channel_correlation = 1.0;
        assert_eq!(m.rssi(id, &tx, SimTime::ZERO), m.rssi(id, &other, SimTime::ZERO));
    }

    #[test]
    fn shadowing_statistics() {
        let mut m = ChannelModel::new(11);
        let mut l = RadioLink::fixed(NodeId(0), NodeId(1), 60.0);
        l.shadowing_sigma_db = 3.0;
        l.coherence_time_us = 1;
        let id = m.add_link(l).unwrap();
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|i| m.shadowing_db(id, ch(1), SimTime::from_micros(i))).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.1);
        assert!((var.sqrt() - 3.0).abs() < 0.1);
    }

    #[test]
    fn trace_loss_interpolates() {
        let loss = PathLoss::Trace(vec![(SimTime::from_secs(0), 40.0), (SimTime::from_secs(10), 60.0)]);
        assert_eq!(loss.at(SimTime::from_secs(5)), 50.0);
        assert_eq!(loss.at(SimTime::from_secs(20)), 60.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rssi_slope_is_one(p1 in -20.0f64..10.0, p2 in -20.0f64..10.0, t in 0u64..10_000_000, c in 0u8..37) {
                let mut m = ChannelModel::new(5);
                let mut l = RadioLink::fixed(NodeId(0), NodeId(1), 65.0);
                l.shadowing_sigma_db = 5.0;
                let id = m.add_link(l).unwrap();
                let at = SimTime::from_micros(t);
                let r1 = m.rssi(id, &TxParams::new(p1, ch(c)).unwrap(), at);
                let r2 = m.rssi(id, &TxParams::new(p2, ch(c)).unwrap(), at);
                prop_assert!(((r2 - r1) - (p2 - p1)).abs() < 1e-9);
                if p2 > p1 { prop_assert!(r2 > r1); }
            }

            #[test]
            fn non_overlapping_interferer_is_inert(seed in any::<u64>(), c in 0u8..37) {
                let (m, id) = model_with(85.0);
                let tx = TxParams::new(0.0, ch(c)).unwrap();
                // far outside the 2.4 GHz band
                let far = InterferenceSource {
                    center_mhz: 5500.0, bandwidth_mhz: 20.0, tx_power_dbm: 20.0,
                    path_loss_db: 30.0, duty: DutyPattern::ALWAYS_ON,
                };
                let mut r1 = ChaCha8Rng::seed_from_u64(seed);
                let mut r2 = ChaCha8Rng::seed_from_u64(seed);
                for i in 0..50 {
                    let t = SimTime::from_micros(i * 1000);
                    let a = m.packet_outcome(id, &tx, 200, &[], t, &mut r1);
                    let b = m.packet_outcome(id, &tx, 200, std::slice::from_ref(&far), t, &mut r2);
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
