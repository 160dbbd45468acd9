//! Discrete-event simulator of a BLE-based intra-vehicular sensor network.
//!
//! The crate is layered bottom-up: [`sim`] (clock, events, random streams),
//! [`phy`] (radio channel), [`link`] (frames, hopping, connections),
//! [`schedule`] (TDMA planner), [`energy`], [`metrics`] and [`pke`]
//! (keyless-entry application). [`scenario`], [`runner`], [`output`] and
//! [`sweep`] tie them into runnable experiments.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod energy;
pub mod link;
pub mod metrics;
pub mod output;
pub mod phy;
pub mod pke;
pub mod runner;
pub mod scenario;
pub mod schedule;
pub mod sim;
pub mod sweep;

/// Identifier of a radio node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
