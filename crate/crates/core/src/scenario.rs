//! Scenario files.
//!
//! A scenario is one TOML document. Unknown keys are errors. After parsing,
//! every value is checked against the invariants of the type it feeds, and a
//! failure names the offending key path and, when it can be found, the line.
//! See the README for the full format reference.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::energy::EnergyParams;
use crate::link::hop::{ChannelMap, HopState};
use crate::link::packet::{MAX_DATA_FRAME, MIN_DATA_FRAME};
use crate::link::piconet::{GapRole, GapRoles};
use crate::phy::{
    friis_loss_db, BerCurve, CompartmentRelation, DutyPattern, InterferenceSource, PathLoss, RadioLink, TxParams,
    ADVERTISING_CHANNELS, DEFAULT_NOISE_FLOOR_DBM,
};
use crate::pke::{MobilityTrace, PkeConfig, UserAction};
use crate::schedule::{ScheduleOptions, SensorSpec};
use crate::sim::SimTime;
use crate::NodeId;

/// Built-in scenarios, by name.
pub const TEMPLATES: [(&str, &str); 5] = [
    ("paper-energy", include_str!("../templates/paper-energy.toml")),
    ("paper-delay", include_str!("../templates/paper-delay.toml")),
    ("paper-pke", include_str!("../templates/paper-pke.toml")),
    ("paper-afh", include_str!("../templates/paper-afh.toml")),
    ("paper-reliability", include_str!("../templates/paper-reliability.toml")),
];

pub fn template(name: &str) -> Option<&'static str> {
    TEMPLATES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    Io { path: PathBuf, message: String },
    Parse(String),
    Invalid { path: String, line: Option<usize>, message: String },
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Io { path, message } => write!(f, "cannot read {}: {message}", path.display()),
            ScenarioError::Parse(m) => write!(f, "scenario parse error: {m}"),
            ScenarioError::Invalid { path, line: Some(l), message } => write!(f, "invalid `{path}` (line {l}): {message}"),
            ScenarioError::Invalid { path, line: None, message } => write!(f, "invalid `{path}`: {message}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

// ---- raw file layout ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    run: RawRun,
    #[serde(default)]
    channel: RawChannel,
    nodes: Vec<RawNode>,
    #[serde(default)]
    links: Vec<RawLink>,
    #[serde(default)]
    sensors: Vec<RawSensor>,
    #[serde(default)]
    schedule: RawSchedule,
    afh: Option<RawAfh>,
    #[serde(default)]
    interferers: Vec<RawInterferer>,
    #[serde(default)]
    energy: EnergyParams,
    pke: Option<RawPke>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    #[serde(default)]
    name: String,
    duration_s: f64,
    #[serde(default = "one")]
    seed: u64,
    #[serde(default)]
    trace: bool,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "model", rename_all = "lowercase")]
enum RawBer {
    Fsk,
    Table { points: Vec<(f64, f64)> },
    Fixed { p: f64 },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawChannel {
    noise_floor_dbm: f64,
    sensitivity_dbm: f64,
    ber: RawBer,
    uniform_packet_loss: f64,
    channel_correlation: f64,
    shadowing_sigma_db: f64,
    coherence_time_s: f64,
    loss_rule: Option<LossRule>,
}

impl Default for RawChannel {
    fn default() -> Self {
        RawChannel {
            noise_floor_dbm: DEFAULT_NOISE_FLOOR_DBM,
            sensitivity_dbm: -90.0,
            ber: RawBer::Fsk,
            uniform_packet_loss: 0.0,
            channel_correlation: 0.0,
            shadowing_sigma_db: 0.0,
            coherence_time_s: 2.5,
            loss_rule: None,
        }
    }
}

/// Distance-based path loss: free space at `frequency_mhz` plus a fixed
/// excess, plus `cross_penalty_db` between different compartments.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossRule {
    pub frequency_mhz: f64,
    pub excess_db: f64,
    pub cross_penalty_db: f64,
}

impl Default for LossRule {
    fn default() -> Self {
        LossRule { frequency_mhz: 2440.0, excess_db: 0.0, cross_penalty_db: 80.0 }
    }
}

impl LossRule {
    pub fn loss_db(&self, distance_m: f64, relation: CompartmentRelation) -> f64 {
        let base = friis_loss_db(distance_m.max(0.01), self.frequency_mhz) + self.excess_db;
        match relation {
            CompartmentRelation::Same => base,
            CompartmentRelation::Cross => base + self.cross_penalty_db,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Central,
    Peripheral,
    Broadcaster,
    Observer,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    role: NodeRole,
    position: Option<[f64; 3]>,
    compartment: Option<String>,
    #[serde(default)]
    tx_power_dbm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawRelation {
    Same,
    Cross,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    a: String,
    b: String,
    loss_db: Option<f64>,
    shadowing_sigma_db: Option<f64>,
    coherence_time_s: Option<f64>,
    relation: Option<RawRelation>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSensor {
    node: String,
    master: String,
    period_ms: f64,
    #[serde(default)]
    phase_ms: f64,
    #[serde(default = "twenty")]
    packet_bytes: usize,
    #[serde(default = "one_u8")]
    priority: u8,
    deadline_ms: Option<f64>,
    distance_m: Option<f64>,
}

fn twenty() -> usize {
    20
}

fn one_u8() -> u8 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawSchedule {
    align_to_phase: bool,
    event_airtime_us: Option<u64>,
    master_capacity: usize,
    radio_groups: BTreeMap<String, u32>,
    entries: Vec<RawEntry>,
}

impl Default for RawSchedule {
    fn default() -> Self {
        RawSchedule {
            align_to_phase: true,
            event_airtime_us: None,
            master_capacity: 64,
            radio_groups: BTreeMap::new(),
            entries: Vec::new(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    sensor: String,
    interval_ms: f64,
    anchor_offset_us: u64,
    hop_increment: u8,
    #[serde(default)]
    last_unmapped: u8,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawAfh {
    enabled: bool,
    window: usize,
    threshold: f64,
}

impl Default for RawAfh {
    fn default() -> Self {
        RawAfh { enabled: true, window: 100, threshold: 0.5 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInterferer {
    center_mhz: f64,
    bandwidth_mhz: f64,
    tx_power_dbm: f64,
    path_loss_db: f64,
    period_ms: Option<f64>,
    #[serde(default = "one_f64")]
    on_fraction: f64,
    #[serde(default)]
    phase_ms: f64,
}

fn one_f64() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPke {
    vehicle: String,
    #[serde(default = "defaults::threshold")]
    rssi_threshold_dbm: f64,
    #[serde(default = "defaults::hysteresis")]
    hysteresis_db: f64,
    #[serde(default = "defaults::timeout")]
    lock_timeout_s: f64,
    #[serde(default = "defaults::window")]
    rssi_window: usize,
    #[serde(default = "defaults::interval")]
    connection_interval_ms: f64,
    #[serde(default = "defaults::range")]
    nominal_range_m: f64,
    #[serde(default = "defaults::adv_interval")]
    advertising_interval_ms: f64,
    #[serde(default = "defaults::supervision")]
    supervision_timeout_ms: f64,
    keys: Vec<RawKey>,
    #[serde(default)]
    traces: Vec<RawTrace>,
}

mod defaults {
    use crate::pke::PkeConfig;

    pub fn threshold() -> f64 {
        PkeConfig::default().rssi_threshold_dbm
    }
    pub fn hysteresis() -> f64 {
        PkeConfig::default().hysteresis_db
    }
    pub fn timeout() -> f64 {
        PkeConfig::default().lock_timeout_s
    }
    pub fn window() -> usize {
        PkeConfig::default().rssi_window
    }
    pub fn interval() -> f64 {
        PkeConfig::default().connection_interval_ms
    }
    pub fn range() -> f64 {
        PkeConfig::default().nominal_range_m
    }
    pub fn adv_interval() -> f64 {
        100.0
    }
    pub fn supervision() -> f64 {
        500.0
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKey {
    node: String,
    address: String,
    pass_code: String,
    /// Code the key itself accepts; defaults to `pass_code`.
    accepts: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrace {
    key: String,
    #[serde(default)]
    waypoints: Vec<(f64, f64)>,
    #[serde(default)]
    actions: Vec<(f64, UserAction)>,
    file: Option<String>,
}

// ---- validated form ----

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub role: NodeRole,
    pub roles: GapRoles,
    pub position: Option<[f64; 3]>,
    pub compartment: Option<String>,
    pub tx_power_dbm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub noise_floor_dbm: f64,
    pub sensitivity_dbm: f64,
    pub ber: BerCurve,
    pub uniform_packet_loss: f64,
    pub channel_correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorDef {
    pub spec: SensorSpec,
    pub master: NodeId,
    pub packet_bytes: usize,
    pub distance_m: f64,
}

/// Explicitly scheduled connection.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleEntry {
    pub sensor: NodeId,
    pub interval_us: u64,
    pub anchor_offset_us: u64,
    pub hop_increment: u8,
    pub last_unmapped: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub options: ScheduleOptions,
    pub master_capacity: usize,
    pub entries: Vec<ScheduleEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AfhConfig {
    pub window: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PkeKey {
    pub node: NodeId,
    pub name: String,
    pub address: [u8; 4],
    pub pass_code: Vec<u8>,
    pub accepts: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PkeScenario {
    pub vehicle: NodeId,
    pub config: PkeConfig,
    pub advertising_interval_us: u64,
    pub supervision_timeout_us: u64,
    pub keys: Vec<PkeKey>,
    pub traces: Vec<MobilityTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub duration: SimTime,
    pub seed: u64,
    pub trace: bool,
    pub nodes: Vec<Node>,
    pub links: Vec<RadioLink>,
    pub channel: ChannelParams,
    pub loss_rule: LossRule,
    pub sensors: Vec<SensorDef>,
    pub schedule: ScheduleConfig,
    pub afh: Option<AfhConfig>,
    pub interferers: Vec<InterferenceSource>,
    pub energy: EnergyParams,
    pub pke: Option<PkeScenario>,
}

impl Scenario {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0 as usize]
    }

    pub fn node_by_name(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self, ScenarioError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string().trim_end().to_string()))?;
        let mut v = Validator { text, base_dir };
        v.build(raw)
    }

    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_toml_str(&text, path.parent())
    }
}

/// Source text of a scenario given as a file path or a template name.
pub fn scenario_source(arg: &str) -> Result<(String, Option<PathBuf>), ScenarioError> {
    let path = Path::new(arg);
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        return Ok((text, path.parent().map(Path::to_path_buf)));
    }
    match template(arg) {
        Some(t) => Ok((t.to_string(), None)),
        None => Err(ScenarioError::Io { path: path.to_path_buf(), message: "no such file or built-in template".into() }),
    }
}

pub fn load_scenario(arg: &str) -> Result<Scenario, ScenarioError> {
    let (text, dir) = scenario_source(arg)?;
    Scenario::from_toml_str(&text, dir.as_deref())
}

// ---- key paths and line lookup ----

#[derive(Debug, Clone)]
enum Seg {
    Key(&'static str),
    Name(String),
    Index(usize),
}

fn render(path: &[Seg]) -> String {
    let mut s = String::new();
    for seg in path {
        match seg {
            Seg::Key(k) => {
                if !s.is_empty() {
                    s.push('.');
                }
                s.push_str(k);
            }
            Seg::Name(k) => {
                if !s.is_empty() {
                    s.push('.');
                }
                s.push_str(k);
            }
            Seg::Index(i) => s.push_str(&format!("[{i}]")),
        }
    }
    s
}

/// Byte span of the deepest element of `path` present in the document.
fn locate(text: &str, path: &[Seg]) -> Option<Range<usize>> {
    use toml::de::{DeTable, DeValue};
    let doc = DeTable::parse(text).ok()?;
    let mut span = None;
    let mut table: Option<&DeTable> = Some(doc.get_ref());
    let mut array: Option<&[toml::Spanned<DeValue>]> = None;
    for seg in path {
        let next = match seg {
            Seg::Key(k) => table.and_then(|t| t.iter().find(|(key, _)| key.get_ref() == k)),
            Seg::Name(k) => table.and_then(|t| t.iter().find(|(key, _)| key.get_ref() == k)),
            Seg::Index(i) => {
                let v = array.and_then(|a| a.get(*i));
                match v {
                    Some(v) => {
                        span = Some(v.span());
                        table = if let DeValue::Table(t) = v.get_ref() { Some(t) } else { None };
                        array = if let DeValue::Array(a) = v.get_ref() { Some(a) } else { None };
                        continue;
                    }
                    None => break,
                }
            }
        };
        let Some((key, value)) = next else { break };
        span = Some(if key.span().start < key.span().end { key.span() } else { value.span() });
        table = if let DeValue::Table(t) = value.get_ref() { Some(t) } else { None };
        array = if let DeValue::Array(a) = value.get_ref() { Some(a) } else { None };
    }
    span
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

struct Validator<'a> {
    text: &'a str,
    base_dir: Option<&'a Path>,
}

type VResult<T> = Result<T, ScenarioError>;

fn key(k: &'static str) -> Seg {
    Seg::Key(k)
}

impl Validator<'_> {
    fn err(&self, path: &[Seg], message: impl Into<String>) -> ScenarioError {
        let line = locate(self.text, path).map(|s| line_of(self.text, s.start));
        ScenarioError::Invalid { path: render(path), line, message: message.into() }
    }

    fn at(&self, base: &[Seg], more: &[Seg]) -> Vec<Seg> {
        base.iter().cloned().chain(more.iter().cloned()).collect()
    }

    fn positive(&self, path: &[Seg], v: f64) -> VResult<f64> {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(path, format!("must be positive, got {v}")))
        }
    }

    fn non_negative(&self, path: &[Seg], v: f64) -> VResult<f64> {
        if v >= 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(path, format!("must be non-negative, got {v}")))
        }
    }

    fn fraction(&self, path: &[Seg], v: f64) -> VResult<f64> {
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(self.err(path, format!("must be within [0, 1], got {v}")))
        }
    }

    fn ms_to_us(ms: f64) -> u64 {
        (ms * 1000.0).round() as u64
    }

    fn build(&mut self, raw: RawScenario) -> VResult<Scenario> {
        let duration_s = self.positive(&[key("run"), key("duration_s")], raw.run.duration_s)?;

        // nodes
        let mut nodes = Vec::new();
        let mut names: BTreeMap<String, NodeId> = BTreeMap::new();
        for (i, n) in raw.nodes.iter().enumerate() {
            let p = [key("nodes"), Seg::Index(i)];
            if names.insert(n.id.clone(), NodeId(i as u32)).is_some() {
                return Err(self.err(&self.at(&p, &[key("id")]), format!("duplicate node id {:?}", n.id)));
            }
            TxParams::new(n.tx_power_dbm, ADVERTISING_CHANNELS[0])
                .map_err(|e| self.err(&self.at(&p, &[key("tx_power_dbm")]), e.to_string()))?;
            let role = match n.role {
                NodeRole::Central => GapRole::Central,
                NodeRole::Peripheral => GapRole::Peripheral,
                NodeRole::Broadcaster => GapRole::Broadcaster,
                NodeRole::Observer => GapRole::Observer,
            };
            nodes.push(Node {
                id: NodeId(i as u32),
                name: n.id.clone(),
                role: n.role,
                roles: GapRoles::new([role]).expect("single role"),
                position: n.position,
                compartment: n.compartment.clone(),
                tx_power_dbm: n.tx_power_dbm,
            });
        }
        let lookup = |path: &[Seg], name: &str| -> VResult<NodeId> {
            names.get(name).copied().ok_or_else(|| self.err(path, format!("unknown node {name:?}")))
        };

        // channel
        let c = &raw.channel;
        let cp = [key("channel")];
        let ber = match &c.ber {
            RawBer::Fsk => BerCurve::NoncoherentFsk,
            RawBer::Fixed { p } => BerCurve::Fixed(self.fraction(&self.at(&cp, &[key("ber"), key("p")]), *p)?),
            RawBer::Table { points } => {
                BerCurve::table(points.clone()).map_err(|e| self.err(&self.at(&cp, &[key("ber"), key("points")]), e.to_string()))?
            }
        };
        let channel = ChannelParams {
            noise_floor_dbm: c.noise_floor_dbm,
            sensitivity_dbm: c.sensitivity_dbm,
            ber,
            uniform_packet_loss: self.fraction(&self.at(&cp, &[key("uniform_packet_loss")]), c.uniform_packet_loss)?,
            channel_correlation: self.fraction(&self.at(&cp, &[key("channel_correlation")]), c.channel_correlation)?,
        };
        self.non_negative(&self.at(&cp, &[key("shadowing_sigma_db")]), c.shadowing_sigma_db)?;
        self.positive(&self.at(&cp, &[key("coherence_time_s")]), c.coherence_time_s)?;
        let rule = c.loss_rule.unwrap_or_default();
        let coherence_us = (c.coherence_time_s * 1e6).round() as u64;

        let relation_of = |a: &Node, b: &Node| match (&a.compartment, &b.compartment) {
            (Some(x), Some(y)) if x != y => CompartmentRelation::Cross,
            _ => CompartmentRelation::Same,
        };
        let distance = |a: &Node, b: &Node| -> Option<f64> {
            let (p, q) = (a.position?, b.position?);
            Some(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        };

        // links
        let mut links: Vec<RadioLink> = Vec::new();
        let mut pairs = BTreeSet::new();
        for (i, l) in raw.links.iter().enumerate() {
            let p = [key("links"), Seg::Index(i)];
            let a = lookup(&self.at(&p, &[key("a")]), &l.a)?;
            let b = lookup(&self.at(&p, &[key("b")]), &l.b)?;
            if a == b {
                return Err(self.err(&self.at(&p, &[key("b")]), "a link needs two distinct nodes"));
            }
            let (na, nb) = (&nodes[a.0 as usize], &nodes[b.0 as usize]);
            let relation = match l.relation {
                Some(RawRelation::Same) => CompartmentRelation::Same,
                Some(RawRelation::Cross) => CompartmentRelation::Cross,
                None => relation_of(na, nb),
            };
            let loss = match l.loss_db {
                Some(v) => v,
                None => match distance(na, nb) {
                    Some(d) => rule.loss_db(d, relation),
                    None => return Err(self.err(&p, "needs loss_db or positions on both nodes")),
                },
            };
            let sigma = l.shadowing_sigma_db.unwrap_or(c.shadowing_sigma_db);
            let coherence = l.coherence_time_s.map(|s| (s * 1e6).round() as u64).unwrap_or(coherence_us);
            let link = RadioLink {
                a,
                b,
                loss: PathLoss::Fixed(loss),
                shadowing_sigma_db: sigma,
                coherence_time_us: coherence,
                relation,
            };
            link.validate().map_err(|e| {
                let field = if l.loss_db.is_some() { key("loss_db") } else { key("relation") };
                self.err(&self.at(&p, &[field]), e.to_string())
            })?;
            if !pairs.insert((a.min(b), a.max(b))) {
                return Err(self.err(&p, format!("duplicate link {} - {}", l.a, l.b)));
            }
            links.push(link);
        }
        let ensure_link = |links: &mut Vec<RadioLink>, pairs: &mut BTreeSet<(NodeId, NodeId)>, path: &[Seg], a: NodeId, b: NodeId| -> VResult<()> {
            if !pairs.insert((a.min(b), a.max(b))) {
                return Ok(());
            }
            let (na, nb) = (&nodes[a.0 as usize], &nodes[b.0 as usize]);
            let Some(d) = distance(na, nb) else {
                return Err(self.err(path, format!("no link between {} and {} and no positions to derive one", na.name, nb.name)));
            };
            let relation = relation_of(na, nb);
            links.push(RadioLink {
                a,
                b,
                loss: PathLoss::Fixed(rule.loss_db(d, relation)),
                shadowing_sigma_db: c.shadowing_sigma_db,
                coherence_time_us: coherence_us,
                relation,
            });
            Ok(())
        };

        // sensors
        let mut sensors = Vec::new();
        let mut seen_sensor = BTreeMap::new();
        for (i, s) in raw.sensors.iter().enumerate() {
            let p = [key("sensors"), Seg::Index(i)];
            let node = lookup(&self.at(&p, &[key("node")]), &s.node)?;
            let master = lookup(&self.at(&p, &[key("master")]), &s.master)?;
            if nodes[master.0 as usize].role != NodeRole::Central {
                return Err(self.err(
                    &self.at(&p, &[key("master")]),
                    format!("{} is not a central; slave-to-slave data paths are not allowed", s.master),
                ));
            }
            if nodes[node.0 as usize].role != NodeRole::Peripheral {
                return Err(self.err(&self.at(&p, &[key("node")]), format!("{} is not a peripheral", s.node)));
            }
            if seen_sensor.insert(node, i).is_some() {
                return Err(self.err(&self.at(&p, &[key("node")]), format!("{} already carries a sensor", s.node)));
            }
            let period = self.positive(&self.at(&p, &[key("period_ms")]), s.period_ms)?;
            self.non_negative(&self.at(&p, &[key("phase_ms")]), s.phase_ms)?;
            if !(MIN_DATA_FRAME..=MAX_DATA_FRAME).contains(&s.packet_bytes) {
                return Err(self.err(
                    &self.at(&p, &[key("packet_bytes")]),
                    format!("packet length {} outside [{MIN_DATA_FRAME}, {MAX_DATA_FRAME}] bytes", s.packet_bytes),
                ));
            }
            let deadline = s.deadline_ms.unwrap_or(period);
            if deadline > period {
                return Err(self.err(&self.at(&p, &[key("deadline_ms")]), "deadline exceeds the read period"));
            }
            ensure_link(&mut links, &mut pairs, &p, node, master)?;
            let distance_m = s
                .distance_m
                .or_else(|| distance(&nodes[node.0 as usize], &nodes[master.0 as usize]))
                .unwrap_or(0.0);
            sensors.push(SensorDef {
                spec: SensorSpec {
                    id: node,
                    period_us: Self::ms_to_us(period),
                    phase_us: Self::ms_to_us(s.phase_ms),
                    payload_bytes: s.packet_bytes - MIN_DATA_FRAME,
                    priority: s.priority,
                    deadline_us: Self::ms_to_us(deadline),
                },
                master,
                packet_bytes: s.packet_bytes,
                distance_m,
            });
        }

        // schedule
        let rs = &raw.schedule;
        let sp = [key("schedule")];
        let mut groups = BTreeMap::new();
        for (name, g) in &rs.radio_groups {
            let id = lookup(&self.at(&sp, &[key("radio_groups"), Seg::Name(name.clone())]), name)?;
            groups.insert(id, *g);
        }
        if rs.master_capacity == 0 {
            return Err(self.err(&self.at(&sp, &[key("master_capacity")]), "must be at least 1"));
        }
        let mut entries = Vec::new();
        for (i, e) in rs.entries.iter().enumerate() {
            let p = self.at(&sp, &[key("entries"), Seg::Index(i)]);
            let sensor = lookup(&self.at(&p, &[key("sensor")]), &e.sensor)?;
            if !sensors.iter().any(|s: &SensorDef| s.spec.id == sensor) {
                return Err(self.err(&self.at(&p, &[key("sensor")]), format!("{} has no sensor section", e.sensor)));
            }
            let interval = self.positive(&self.at(&p, &[key("interval_ms")]), e.interval_ms)?;
            HopState::new(e.hop_increment, e.last_unmapped, ChannelMap::ALL)
                .map_err(|err| self.err(&self.at(&p, &[key("hop_increment")]), err.to_string()))?;
            entries.push(ScheduleEntry {
                sensor,
                interval_us: Self::ms_to_us(interval),
                anchor_offset_us: e.anchor_offset_us,
                hop_increment: e.hop_increment,
                last_unmapped: e.last_unmapped,
            });
        }
        if !entries.is_empty() {
            if let Some(s) = sensors.iter().find(|s| !entries.iter().any(|e| e.sensor == s.spec.id)) {
                return Err(self.err(&self.at(&sp, &[key("entries")]), format!("no entry for sensor {}", nodes[s.spec.id.0 as usize].name)));
            }
        }
        let schedule = ScheduleConfig {
            options: ScheduleOptions {
                align_to_phase: rs.align_to_phase,
                event_airtime_us: rs.event_airtime_us,
                radio_groups: groups,
                channel_map: ChannelMap::ALL,
            },
            master_capacity: rs.master_capacity,
            entries,
        };

        let afh = match &raw.afh {
            Some(a) if a.enabled => {
                if a.window == 0 {
                    return Err(self.err(&[key("afh"), key("window")], "must be at least 1"));
                }
                Some(AfhConfig { window: a.window, threshold: self.fraction(&[key("afh"), key("threshold")], a.threshold)? })
            }
            _ => None,
        };

        let mut interferers = Vec::new();
        for (i, r) in raw.interferers.iter().enumerate() {
            let p = [key("interferers"), Seg::Index(i)];
            let duty = match r.period_ms {
                None => DutyPattern::ALWAYS_ON,
                Some(ms) => DutyPattern {
                    period_us: Self::ms_to_us(self.positive(&self.at(&p, &[key("period_ms")]), ms)?).max(1),
                    on_fraction: r.on_fraction,
                    phase_us: Self::ms_to_us(r.phase_ms),
                },
            };
            let source = InterferenceSource {
                center_mhz: r.center_mhz,
                bandwidth_mhz: r.bandwidth_mhz,
                tx_power_dbm: r.tx_power_dbm,
                path_loss_db: r.path_loss_db,
                duty,
            };
            source.validate().map_err(|e| {
                let field = if !(r.bandwidth_mhz > 0.0) { key("bandwidth_mhz") } else { key("on_fraction") };
                self.err(&self.at(&p, &[field]), e.to_string())
            })?;
            interferers.push(source);
        }

        raw.energy.validate().map_err(|e| {
            let field = match e {
                crate::energy::EnergyError::NotPositive(f) => f,
                _ => "energy",
            };
            self.err(&[key("energy"), key(field)], e.to_string())
        })?;

        let pke = match &raw.pke {
            None => None,
            Some(rp) => Some(self.build_pke(rp, &nodes, &lookup, &rule, &channel_defaults(c), &mut links)?),
        };

        if sensors.is_empty() && pke.is_none() {
            return Err(self.err(&[key("sensors")], "scenario has neither sensors nor a pke section; nothing to simulate"));
        }

        Ok(Scenario {
            name: raw.run.name.clone(),
            duration: SimTime::from_secs_f64(duration_s),
            seed: raw.run.seed,
            trace: raw.run.trace,
            nodes,
            links,
            channel,
            loss_rule: rule,
            sensors,
            schedule,
            afh,
            interferers,
            energy: raw.energy,
            pke,
        })
    }

    fn build_pke(
        &self,
        rp: &RawPke,
        nodes: &[Node],
        lookup: &dyn Fn(&[Seg], &str) -> VResult<NodeId>,
        rule: &LossRule,
        link_defaults: &(f64, u64),
        links: &mut Vec<RadioLink>,
    ) -> VResult<PkeScenario> {
        let pp = [key("pke")];
        let vehicle = lookup(&self.at(&pp, &[key("vehicle")]), &rp.vehicle)?;
        if nodes[vehicle.0 as usize].role != NodeRole::Central {
            return Err(self.err(&self.at(&pp, &[key("vehicle")]), "vehicle must be a central node"));
        }
        let config = PkeConfig {
            rssi_threshold_dbm: rp.rssi_threshold_dbm,
            hysteresis_db: rp.hysteresis_db,
            lock_timeout_s: rp.lock_timeout_s,
            rssi_window: rp.rssi_window,
            connection_interval_ms: rp.connection_interval_ms,
            nominal_range_m: rp.nominal_range_m,
        };
        config.validate().map_err(|e| {
            let field = match e {
                crate::pke::PkeError::BadThreshold(_) => "rssi_threshold_dbm",
                crate::pke::PkeError::BadTimeout => "lock_timeout_s",
                crate::pke::PkeError::BadWindow => "rssi_window",
                _ => "hysteresis_db",
            };
            self.err(&self.at(&pp, &[key(field)]), e.to_string())
        })?;
        self.positive(&self.at(&pp, &[key("connection_interval_ms")]), rp.connection_interval_ms)?;
        let adv = self.positive(&self.at(&pp, &[key("advertising_interval_ms")]), rp.advertising_interval_ms)?;
        let sup = self.positive(&self.at(&pp, &[key("supervision_timeout_ms")]), rp.supervision_timeout_ms)?;

        let mut keys = Vec::new();
        for (i, k) in rp.keys.iter().enumerate() {
            let p = self.at(&pp, &[key("keys"), Seg::Index(i)]);
            let node = lookup(&self.at(&p, &[key("node")]), &k.node)?;
            if nodes[node.0 as usize].role != NodeRole::Peripheral {
                return Err(self.err(&self.at(&p, &[key("node")]), "a key must be a peripheral node"));
            }
            let address = parse_address(&k.address).ok_or_else(|| self.err(&self.at(&p, &[key("address")]), "expected 8 hex digits"))?;
            if keys.iter().any(|x: &PkeKey| x.address == address || x.node == node) {
                return Err(self.err(&self.at(&p, &[key("address")]), "duplicate key"));
            }
            let code = k.pass_code.as_bytes().to_vec();
            if code.len() > crate::link::advertising::MAX_PASS_CODE {
                return Err(self.err(&self.at(&p, &[key("pass_code")]), "pass code too long"));
            }
            keys.push(PkeKey {
                node,
                name: k.node.clone(),
                address,
                accepts: k.accepts.as_ref().map(|s| s.as_bytes().to_vec()).unwrap_or_else(|| code.clone()),
                pass_code: code,
            });
        }

        let mut traces = Vec::new();
        for (i, t) in rp.traces.iter().enumerate() {
            let p = self.at(&pp, &[key("traces"), Seg::Index(i)]);
            let key_node = lookup(&self.at(&p, &[key("key")]), &t.key)?;
            if !keys.iter().any(|k| k.node == key_node) {
                return Err(self.err(&self.at(&p, &[key("key")]), format!("{} is not listed under pke.keys", t.key)));
            }
            let mut trace = match &t.file {
                Some(f) => {
                    let path = self.base_dir.map(|d| d.join(f)).unwrap_or_else(|| PathBuf::from(f));
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| self.err(&self.at(&p, &[key("file")]), format!("{}: {e}", path.display())))?;
                    MobilityTrace::from_csv(&t.key, &text).map_err(|e| self.err(&self.at(&p, &[key("file")]), e))?
                }
                None => MobilityTrace { key: t.key.clone(), waypoints: Vec::new(), actions: Vec::new() },
            };
            for &(s, d) in &t.waypoints {
                if !(s >= 0.0 && d >= 0.0) {
                    return Err(self.err(&self.at(&p, &[key("waypoints")]), "times and distances must be non-negative"));
                }
                trace.waypoints.push((SimTime::from_secs_f64(s), d));
            }
            for &(s, a) in &t.actions {
                if !(s >= 0.0) {
                    return Err(self.err(&self.at(&p, &[key("actions")]), "action times must be non-negative"));
                }
                trace.actions.push((SimTime::from_secs_f64(s), a));
            }
            trace.actions.sort_by_key(|a| a.0);
            trace.validate().map_err(|e| self.err(&self.at(&p, &[key("waypoints")]), e.to_string()))?;

            if links.iter().any(|l| (l.a, l.b) == (key_node, vehicle) || (l.a, l.b) == (vehicle, key_node)) {
                return Err(self.err(&self.at(&p, &[key("key")]), "key already has a static link to the vehicle"));
            }
            let relation = CompartmentRelation::Same;
            links.push(RadioLink {
                a: vehicle,
                b: key_node,
                loss: PathLoss::Trace(sample_loss_trace(&trace, rule)),
                shadowing_sigma_db: link_defaults.0,
                coherence_time_us: link_defaults.1,
                relation,
            });
            traces.push(trace);
        }

        Ok(PkeScenario {
            vehicle,
            config,
            advertising_interval_us: Self::ms_to_us(adv),
            supervision_timeout_us: Self::ms_to_us(sup),
            keys,
            traces,
        })
    }
}

fn channel_defaults(c: &RawChannel) -> (f64, u64) {
    (c.shadowing_sigma_db, (c.coherence_time_s * 1e6).round() as u64)
}

/// Path loss along a mobility trace, sampled every 100 ms so that linear
/// interpolation in dB stays close to the distance-based rule.
pub fn sample_loss_trace(trace: &MobilityTrace, rule: &LossRule) -> Vec<(SimTime, f64)> {
    const STEP_US: u64 = 100_000;
    let mut out = Vec::new();
    let (Some(first), Some(last)) = (trace.waypoints.first(), trace.waypoints.last()) else {
        return out;
    };
    let mut t = first.0.as_micros();
    while t < last.0.as_micros() {
        let st = SimTime::from_micros(t);
        out.push((st, rule.loss_db(trace.distance_at(st), CompartmentRelation::Same)));
        t += STEP_US;
    }
    out.push((last.0, rule.loss_db(last.1, CompartmentRelation::Same)));
    out
}

fn parse_address(s: &str) -> Option<[u8; 4]> {
    let s = s.trim_start_matches("0x");
    if s.len() != 8 {
        return None;
    }
    let v = u32::from_str_radix(s, 16).ok()?;
    Some(v.to_be_bytes())
}
