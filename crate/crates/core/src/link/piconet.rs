//! GAP roles and piconet membership.

use std::collections::{BTreeMap, BTreeSet};

use super::connection::Connection;
use super::LinkError;
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GapRole {
    Broadcaster,
    Observer,
    Peripheral,
    Central,
}

/// The set of roles one device plays. A device is central or peripheral,
/// not both, and may add broadcaster or observer on top.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GapRoles(BTreeSet<GapRole>);

impl GapRoles {
    pub fn new<I: IntoIterator<Item = GapRole>>(roles: I) -> Result<Self, LinkError> {
        let set: BTreeSet<GapRole> = roles.into_iter().collect();
        if set.contains(&GapRole::Central) && set.contains(&GapRole::Peripheral) {
            return Err(LinkError::ConflictingRoles);
        }
        Ok(GapRoles(set))
    }

    pub fn has(&self, role: GapRole) -> bool {
        self.0.contains(&role)
    }

    pub fn can_advertise(&self) -> bool {
        self.has(GapRole::Broadcaster) || self.has(GapRole::Peripheral)
    }

    pub fn can_scan(&self) -> bool {
        self.has(GapRole::Observer) || self.has(GapRole::Central)
    }
}

/// One master and its slaves.
#[derive(Debug, Clone)]
pub struct Piconet {
    pub master: NodeId,
    pub capacity: usize,
    connections: Vec<Connection>,
}

impl Piconet {
    pub fn new(master: NodeId, capacity: usize) -> Self {
        Piconet { master, capacity, connections: Vec::new() }
    }

    pub fn slaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.connections.iter().map(Connection::slave)
    }

    pub fn connections(&self) -> &[Connection] {
        &self.connections
    }

    pub fn connections_mut(&mut self) -> &mut [Connection] {
        &mut self.connections
    }

    pub fn into_connections(self) -> Vec<Connection> {
        self.connections
    }
}

/// All piconets of a run. Every slave belongs to at most one piconet and
/// no two connections share an access address or hop sequence on one master.
#[derive(Debug, Clone, Default)]
pub struct Topology {
    piconets: BTreeMap<NodeId, Piconet>,
    membership: BTreeMap<NodeId, NodeId>,
    access_addresses: BTreeSet<u32>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_master(&mut self, master: NodeId, capacity: usize) -> Result<(), LinkError> {
        if self.membership.contains_key(&master) {
            return Err(LinkError::RoleMismatch(master));
        }
        self.piconets.entry(master).or_insert_with(|| Piconet::new(master, capacity)).capacity = capacity;
        Ok(())
    }

    pub fn join(&mut self, conn: Connection) -> Result<(), LinkError> {
        let (master, slave) = (conn.master(), conn.slave());
        if self.piconets.contains_key(&slave) {
            return Err(LinkError::RoleMismatch(slave));
        }
        if let Some(&other) = self.membership.get(&slave) {
            return Err(LinkError::AlreadyInPiconet { slave, master: other });
        }
        if self.access_addresses.contains(&conn.access_address()) {
            return Err(LinkError::DuplicateAccessAddress(conn.access_address()));
        }
        let piconet = self.piconets.get_mut(&master).ok_or(LinkError::RoleMismatch(master))?;
        if piconet.connections.len() >= piconet.capacity {
            return Err(LinkError::CapacityExceeded { master, capacity: piconet.capacity });
        }
        let hop = conn.hop_state();
        if piconet.connections.iter().any(|c| {
            c.hop_state().increment() == hop.increment() && c.hop_state().last_unmapped() == hop.last_unmapped()
        }) {
            return Err(LinkError::SharedHopSequence(slave));
        }
        self.access_addresses.insert(conn.access_address());
        self.membership.insert(slave, master);
        piconet.connections.push(conn);
        Ok(())
    }

    /// Drops the slave's connection, freeing it to join again.
    pub fn leave(&mut self, slave: NodeId) -> Option<Connection> {
        let master = self.membership.remove(&slave)?;
        let piconet = self.piconets.get_mut(&master)?;
        let idx = piconet.connections.iter().position(|c| c.slave() == slave)?;
        let conn = piconet.connections.remove(idx);
        self.access_addresses.remove(&conn.access_address());
        Some(conn)
    }

    pub fn master_of(&self, slave: NodeId) -> Option<NodeId> {
        self.membership.get(&slave).copied()
    }

    pub fn piconet(&self, master: NodeId) -> Option<&Piconet> {
        self.piconets.get(&master)
    }

    pub fn piconets(&self) -> impl Iterator<Item = &Piconet> {
        self.piconets.values()
    }

    /// Data may only flow between a master and one of its own slaves.
    pub fn check_data_path(&self, from: NodeId, to: NodeId) -> Result<(), LinkError> {
        let ok = self.master_of(from) == Some(to) || self.master_of(to) == Some(from);
        if ok {
            Ok(())
        } else {
            Err(LinkError::NotStar { from, to })
        }
    }
}
