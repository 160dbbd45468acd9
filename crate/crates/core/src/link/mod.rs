//! Link layer: frames, checksums, hopping, connections, advertising.

pub mod advertising;
pub mod afh;
pub mod connection;
pub mod crc;
pub mod hop;
pub mod packet;
pub mod piconet;

use thiserror::Error;

use crate::sim::SimTime;
use crate::NodeId;

pub use connection::{Connection, ConnectionParams, Medium, Reception, Role};
pub use hop::{ChannelMap, HopError, HopState};
pub use packet::{FrameError, LinkPacket};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinkError {
    #[error(transparent)]
    Hop(#[from] HopError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("node {0} cannot connect to itself")]
    SelfConnection(NodeId),
    #[error("connection interval {0} us is invalid")]
    BadInterval(u64),
    #[error("connection event requested at {at}, anchor is {anchor}")]
    NotAtAnchor { at: SimTime, anchor: SimTime },
    #[error("advertising config: {0}")]
    BadAdvertising(String),
    #[error("pass code of {0} bytes does not fit a connect request")]
    PassCodeTooLong(usize),
    #[error("malformed connect request")]
    BadConnectRequest,
    #[error("connect request lost on air")]
    RequestLost,
    #[error("node {0} rejected the pass code")]
    WrongPassCode(NodeId),
    #[error("node {0} is not advertising")]
    NotAdvertising(NodeId),
    #[error("node {0} is already connected")]
    AlreadyConnected(NodeId),
    #[error("a device cannot be central and peripheral at once")]
    ConflictingRoles,
    #[error("node {0} has the wrong role for this operation")]
    RoleMismatch(NodeId),
    #[error("slave {slave} already belongs to the piconet of {master}")]
    AlreadyInPiconet { slave: NodeId, master: NodeId },
    #[error("access address {0:#010x} already in use")]
    DuplicateAccessAddress(u32),
    #[error("slave {0} would share a hop sequence with another slave of its master")]
    SharedHopSequence(NodeId),
    #[error("master {master} is at its capacity of {capacity} slaves")]
    CapacityExceeded { master: NodeId, capacity: usize },
    #[error("no master-slave connection between {from} and {to}")]
    NotStar { from: NodeId, to: NodeId },
}
