//! Resource and energy model of one Raspberry-Pi-class drone node.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ContainerInstance;

pub const DEFAULT_CORES: u32 = 4;
pub const DEFAULT_RAM_KB: u64 = 1_048_576;
pub const DEFAULT_BASELINE_MEM_FRACTION: f64 = 0.0989;
pub const DEFAULT_FLIGHT_CPU_FRACTION: f64 = 0.30;
pub const DEFAULT_LAND_THRESHOLD: f64 = 0.20;

/// Current drawn by the board alone, without motors.
pub const LANDED_DRAIN_MA: f64 = 800.0;

/// Seconds between battery ticks.
pub const BATTERY_TICK_S: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("node {0} is depleted")]
    NodeDepleted(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlightMode {
    Flying,
    Landed,
    Depleted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub capacity_mah: f64,
    pub level_mah: f64,
    pub drain_flying_ma: f64,
    pub drain_landed_ma: f64,
}

impl BatteryState {
    /// 4200 mAh pack on the lighter frame. The flying drain is fitted so a
    /// full pack lasts exactly 8 minutes in the air.
    pub fn light_4200() -> Self {
        Self::fitted(4200.0, 480.0)
    }

    /// 2200 mAh pack on the heavier frame, fitted to 150 s of flight
    /// (middle of the observed 2-3 minutes).
    pub fn heavy_2200() -> Self {
        Self::fitted(2200.0, 150.0)
    }

    /// Full battery whose flying drain yields `flight_s` seconds of endurance.
    pub fn fitted(capacity_mah: f64, flight_s: f64) -> Self {
        Self {
            capacity_mah,
            level_mah: capacity_mah,
            drain_flying_ma: capacity_mah * 3600.0 / flight_s,
            drain_landed_ma: LANDED_DRAIN_MA,
        }
    }

    pub fn drain_ma(&self, mode: FlightMode) -> f64 {
        match mode {
            FlightMode::Flying => self.drain_flying_ma,
            FlightMode::Landed => self.drain_landed_ma,
            FlightMode::Depleted => 0.0,
        }
    }

    pub fn fraction(&self) -> f64 {
        if self.capacity_mah > 0.0 {
            self.level_mah / self.capacity_mah
        } else {
            0.0
        }
    }
}

impl Default for BatteryState {
    fn default() -> Self {
        Self::light_4200()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandingPolicy {
    /// Battery fraction below which a flying node lands.
    #[serde(default = "default_land_threshold")]
    pub land_threshold: f64,
}

fn default_land_threshold() -> f64 {
    DEFAULT_LAND_THRESHOLD
}

impl Default for LandingPolicy {
    fn default() -> Self {
        Self {
            land_threshold: DEFAULT_LAND_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiNodeModel {
    pub node_id: NodeId,
    pub cores: u32,
    pub ram_kb: u64,
    pub baseline_mem_fraction: f64,
    pub flight_cpu_fraction: f64,
    /// East, north, up in meters.
    pub position: [f64; 3],
    /// Azimuth of the WiFi dongle, degrees clockwise from north.
    pub orientation_deg: f64,
    pub battery: BatteryState,
    pub flight_mode: FlightMode,
}

impl PiNodeModel {
    pub fn new(node_id: NodeId) -> Self {
        Self {
            node_id,
            cores: DEFAULT_CORES,
            ram_kb: DEFAULT_RAM_KB,
            baseline_mem_fraction: DEFAULT_BASELINE_MEM_FRACTION,
            flight_cpu_fraction: DEFAULT_FLIGHT_CPU_FRACTION,
            position: [0.0; 3],
            orientation_deg: 0.0,
            battery: BatteryState::default(),
            flight_mode: FlightMode::Flying,
        }
    }

    pub fn with_mode(mut self, mode: FlightMode) -> Self {
        self.flight_mode = mode;
        self
    }

    pub fn is_depleted(&self) -> bool {
        self.flight_mode == FlightMode::Depleted
    }

    pub fn ram_bytes(&self) -> u64 {
        self.ram_kb * 1024
    }

    pub fn baseline_bytes(&self) -> u64 {
        (self.ram_bytes() as f64 * self.baseline_mem_fraction).round() as u64
    }

    /// Memory available to containers on an empty node.
    pub fn usable_bytes(&self) -> u64 {
        self.ram_bytes().saturating_sub(self.baseline_bytes())
    }

    /// Fraction of total CPU left for services.
    pub fn available_cpu(&self) -> Result<f64, NodeError> {
        match self.flight_mode {
            FlightMode::Flying => Ok(1.0 - self.flight_cpu_fraction),
            FlightMode::Landed => Ok(1.0),
            FlightMode::Depleted => Err(NodeError::NodeDepleted(self.node_id)),
        }
    }

    /// CPU held by flight control in the current mode.
    pub fn flight_tax(&self) -> f64 {
        if self.flight_mode == FlightMode::Flying {
            self.flight_cpu_fraction
        } else {
            0.0
        }
    }

    pub fn effective_cores(&self) -> f64 {
        self.available_cpu()
            .map(|f| f * f64::from(self.cores))
            .unwrap_or(0.0)
    }

    /// Free memory in KB given the containers charged to this node.
    pub fn available_memory(&self, containers: &[ContainerInstance]) -> f64 {
        let charged: u64 = containers
            .iter()
            .filter(|c| c.node_id == self.node_id && c.is_charged())
            .map(|c| c.footprint_bytes())
            .sum();
        self.usable_bytes().saturating_sub(charged) as f64 / 1024.0
    }

    /// Drains the battery for `dt` seconds in the current mode. Returns true
    /// when this tick empties the battery.
    pub fn battery_tick(&mut self, dt: f64) -> bool {
        debug_assert!(dt > 0.0);
        if self.is_depleted() {
            return false;
        }
        let drain = self.battery.drain_ma(self.flight_mode) * dt / 3600.0;
        self.battery.level_mah -= drain;
        // Absorb float residue from repeated subtraction.
        if self.battery.level_mah <= 1e-9 * self.battery.capacity_mah.max(1.0) {
            self.battery.level_mah = 0.0;
            self.flight_mode = FlightMode::Depleted;
            return true;
        }
        false
    }

    pub fn decide_flight_mode(&self, policy: &LandingPolicy) -> Result<FlightMode, NodeError> {
        if self.is_depleted() {
            return Err(NodeError::NodeDepleted(self.node_id));
        }
        if self.flight_mode == FlightMode::Flying && self.battery.fraction() < policy.land_threshold
        {
            Ok(FlightMode::Landed)
        } else {
            Ok(self.flight_mode)
        }
    }
}

/// Seconds left at the current level when drained in `mode`.
pub fn endurance_estimate(battery: &BatteryState, mode: FlightMode) -> f64 {
    let drain = battery.drain_ma(mode);
    if drain <= 0.0 {
        return 0.0;
    }
    battery.level_mah / drain * 3600.0
}
