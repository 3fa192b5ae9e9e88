//! Swarm control plane: discovery list, placement ranking and failover.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ContainerSpec;
use crate::node::NodeId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlacementError {
    #[error("no member has room for the container")]
    NoCapacity,
    #[error("no member is reachable from the primary manager")]
    ManagerUnreachable,
    #[error("swarm has no primary manager")]
    Headless,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ElectionError {
    #[error("no replica manager is alive")]
    NoReplicaAlive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Manager,
    Replica,
    #[default]
    Agent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Spread,
    #[serde(rename = "binpack")]
    BinPack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwarmConfig {
    #[serde(default = "d_heartbeat")]
    pub heartbeat_interval_s: f64,
    /// Members silent for this many intervals are pruned.
    #[serde(default = "d_missed")]
    pub missed_heartbeats: u32,
    #[serde(default = "d_failover")]
    pub failover_timeout_s: f64,
    #[serde(default)]
    pub strict_cpu_admission: bool,
}

fn d_heartbeat() -> f64 {
    2.0
}
fn d_missed() -> u32 {
    3
}
fn d_failover() -> f64 {
    10.0
}

impl Default for SwarmConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval_s: d_heartbeat(),
            missed_heartbeats: d_missed(),
            failover_timeout_s: d_failover(),
            strict_cpu_admission: false,
        }
    }
}

impl SwarmConfig {
    pub fn prune_timeout_s(&self) -> f64 {
        self.heartbeat_interval_s * f64::from(self.missed_heartbeats)
    }
}

/// What a member last reported to the discovery backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: NodeId,
    pub available_memory_kb: f64,
    /// CPU fraction not used by flight control or current work.
    pub available_cpu_fraction: f64,
    pub running_containers: usize,
    pub battery_mah: f64,
    pub last_heartbeat: f64,
    /// Whether the primary can reach this member over the mesh.
    pub reachable: bool,
}

impl NodeDescriptor {
    pub fn new(node_id: NodeId, available_memory_kb: f64) -> Self {
        Self {
            node_id,
            available_memory_kb,
            available_cpu_fraction: 1.0,
            running_containers: 0,
            battery_mah: 0.0,
            last_heartbeat: 0.0,
            reachable: true,
        }
    }

    fn fits(&self, spec: &ContainerSpec, strict_cpu: bool) -> bool {
        let need_kb = spec.footprint_bytes() as f64 / 1024.0;
        self.available_memory_kb >= need_kb
            && (!strict_cpu || self.available_cpu_fraction >= spec.cpu_idle_fraction)
    }

    pub fn power_score(&self) -> PowerScore {
        PowerScore {
            available_memory_kb: self.available_memory_kb,
            available_cpu_fraction: self.available_cpu_fraction,
            battery_mah: self.battery_mah,
            node_id: self.node_id,
        }
    }
}

/// Ranks managers for election: more free memory, then more free CPU,
/// then more battery; the lower node id wins a full tie. `Greater` means
/// more powerful.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerScore {
    pub available_memory_kb: f64,
    pub available_cpu_fraction: f64,
    pub battery_mah: f64,
    pub node_id: NodeId,
}

impl Eq for PowerScore {}

impl PartialOrd for PowerScore {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PowerScore {
    fn cmp(&self, other: &Self) -> Ordering {
        self.available_memory_kb
            .total_cmp(&other.available_memory_kb)
            .then(
                self.available_cpu_fraction
                    .total_cmp(&other.available_cpu_fraction),
            )
            .then(self.battery_mah.total_cmp(&other.battery_mah))
            .then(other.node_id.cmp(&self.node_id))
    }
}

/// Spread: fewest containers, then most free memory, then lowest id.
pub fn rank_spread<'a>(
    members: impl IntoIterator<Item = &'a NodeDescriptor>,
    spec: &ContainerSpec,
    strict_cpu: bool,
) -> Vec<NodeId> {
    let mut fit: Vec<&NodeDescriptor> = members
        .into_iter()
        .filter(|d| d.fits(spec, strict_cpu))
        .collect();
    fit.sort_by(|a, b| {
        a.running_containers
            .cmp(&b.running_containers)
            .then(b.available_memory_kb.total_cmp(&a.available_memory_kb))
            .then(a.node_id.cmp(&b.node_id))
    });
    fit.into_iter().map(|d| d.node_id).collect()
}

/// Best-fit bin packing: nonempty nodes before empty ones, then least
/// memory left after placement, then lowest id.
pub fn rank_binpack<'a>(
    members: impl IntoIterator<Item = &'a NodeDescriptor>,
    spec: &ContainerSpec,
    strict_cpu: bool,
) -> Vec<NodeId> {
    let need_kb = spec.footprint_bytes() as f64 / 1024.0;
    let mut fit: Vec<&NodeDescriptor> = members
        .into_iter()
        .filter(|d| d.fits(spec, strict_cpu))
        .collect();
    fit.sort_by(|a, b| {
        (a.running_containers == 0)
            .cmp(&(b.running_containers == 0))
            .then((a.available_memory_kb - need_kb).total_cmp(&(b.available_memory_kb - need_kb)))
            .then(a.node_id.cmp(&b.node_id))
    });
    fit.into_iter().map(|d| d.node_id).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneOutcome {
    pub removed: Vec<NodeId>,
    /// Set when the primary was among the removed members.
    pub lost_primary: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SwarmState {
    pub members: BTreeMap<NodeId, NodeDescriptor>,
    pub primary: Option<NodeId>,
    pub replicas: Vec<NodeId>,
    pub strategy: Strategy,
    pub discovery_list_version: u64,
    pub epoch: u64,
}

impl SwarmState {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    /// Adds or refreshes a member. Re-registration replaces the descriptor.
    pub fn register_agent(&mut self, desc: NodeDescriptor) {
        self.members.insert(desc.node_id, desc);
        self.discovery_list_version += 1;
    }

    /// Refreshes a member's descriptor; unknown nodes are registered.
    pub fn heartbeat(&mut self, desc: NodeDescriptor) {
        match self.members.get_mut(&desc.node_id) {
            Some(slot) => *slot = desc,
            None => self.register_agent(desc),
        }
    }

    pub fn is_member(&self, id: NodeId) -> bool {
        self.members.contains_key(&id)
    }

    pub fn prune_members(&mut self, now: f64, timeout: f64) -> PruneOutcome {
        debug_assert!(timeout > 0.0);
        let removed: Vec<NodeId> = self
            .members
            .values()
            .filter(|d| now - d.last_heartbeat > timeout)
            .map(|d| d.node_id)
            .collect();
        let mut lost_primary = None;
        for id in &removed {
            self.members.remove(id);
            self.discovery_list_version += 1;
            self.replicas.retain(|r| r != id);
            if self.primary == Some(*id) {
                self.primary = None;
                lost_primary = Some(*id);
            }
        }
        PruneOutcome {
            removed,
            lost_primary,
        }
    }

    pub fn rank(&self, spec: &ContainerSpec, strict_cpu: bool) -> Vec<NodeId> {
        let reachable = self.members.values().filter(|d| d.reachable);
        match self.strategy {
            Strategy::Spread => rank_spread(reachable, spec, strict_cpu),
            Strategy::BinPack => rank_binpack(reachable, spec, strict_cpu),
        }
    }

    /// Picks the node for a new container. `pinned` restricts the choice to
    /// one member.
    pub fn schedule_container(
        &self,
        spec: &ContainerSpec,
        strict_cpu: bool,
        pinned: Option<NodeId>,
    ) -> Result<NodeId, PlacementError> {
        if self.primary.is_none() {
            return Err(PlacementError::Headless);
        }
        if !self.members.values().any(|d| d.reachable) {
            return Err(PlacementError::ManagerUnreachable);
        }
        self.rank(spec, strict_cpu)
            .into_iter()
            .find(|id| pinned.is_none_or(|p| p == *id))
            .ok_or(PlacementError::NoCapacity)
    }

    /// Updates the manager's view right after a placement so that the next
    /// decision sees the reservation.
    pub fn record_placement(&mut self, node: NodeId, spec: &ContainerSpec) {
        if let Some(d) = self.members.get_mut(&node) {
            d.available_memory_kb -= spec.footprint_bytes() as f64 / 1024.0;
            d.running_containers += 1;
        }
    }

    /// Promotes the most powerful live replica. A previous primary that is
    /// still a member becomes a replica.
    pub fn elect_primary(&mut self, live: &BTreeSet<NodeId>) -> Result<NodeId, ElectionError> {
        let winner = self
            .replicas
            .iter()
            .filter(|r| live.contains(r))
            .filter_map(|r| self.members.get(r))
            .map(NodeDescriptor::power_score)
            .max()
            .map(|s| s.node_id)
            .ok_or(ElectionError::NoReplicaAlive)?;
        if let Some(old) = self.primary.take() {
            if old != winner && self.is_member(old) {
                self.replicas.push(old);
            }
        }
        self.replicas.retain(|r| *r != winner);
        self.primary = Some(winner);
        self.epoch += 1;
        Ok(winner)
    }
}
