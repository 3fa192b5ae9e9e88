//! Scenario documents: cluster layout, model overrides and a timed script.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ContainerSpec, CreationTimeModel};
use crate::node::{
    BatteryState, FlightMode, LandingPolicy, NodeId, PiNodeModel, DEFAULT_BASELINE_MEM_FRACTION,
    DEFAULT_CORES, DEFAULT_FLIGHT_CPU_FRACTION, DEFAULT_RAM_KB, LANDED_DRAIN_MA,
};
use crate::radio::RadioModel;
use crate::swarm::{Role, Strategy, SwarmConfig};
use crate::workload::WorkloadDefaults;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {field}: {message}")]
    Validation { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "d_sample_interval")]
    pub sample_interval_s: f64,
}

fn d_sample_interval() -> f64 {
    1.0
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            sample_interval_s: d_sample_interval(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryConfig {
    #[serde(default = "d_capacity")]
    pub capacity_mah: f64,
    /// Hover time on a full pack; fixes the flying current draw.
    #[serde(default = "d_endurance")]
    pub flight_endurance_s: f64,
    #[serde(default = "d_landed_drain")]
    pub drain_landed_ma: f64,
    /// Starting charge; a full pack when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level_mah: Option<f64>,
}

fn d_capacity() -> f64 {
    4200.0
}
fn d_endurance() -> f64 {
    480.0
}
fn d_landed_drain() -> f64 {
    LANDED_DRAIN_MA
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            capacity_mah: d_capacity(),
            flight_endurance_s: d_endurance(),
            drain_landed_ma: d_landed_drain(),
            level_mah: None,
        }
    }
}

impl BatteryConfig {
    pub fn to_state(&self) -> BatteryState {
        let mut b = BatteryState::fitted(self.capacity_mah, self.flight_endurance_s);
        b.drain_landed_ma = self.drain_landed_ma;
        b.level_mah = self.level_mah.unwrap_or(self.capacity_mah);
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: NodeId,
    #[serde(default)]
    pub role: Role,
    #[serde(default)]
    pub position: [f64; 3],
    #[serde(default)]
    pub orientation_deg: f64,
    #[serde(default = "d_flight_mode")]
    pub flight_mode: FlightMode,
    #[serde(default = "d_cores")]
    pub cores: u32,
    #[serde(default = "d_ram_kb")]
    pub ram_kb: u64,
    #[serde(default = "d_baseline")]
    pub baseline_mem_fraction: f64,
    #[serde(default = "d_flight_cpu")]
    pub flight_cpu_fraction: f64,
    #[serde(default)]
    pub battery: BatteryConfig,
}

fn d_flight_mode() -> FlightMode {
    FlightMode::Flying
}
fn d_cores() -> u32 {
    DEFAULT_CORES
}
fn d_ram_kb() -> u64 {
    DEFAULT_RAM_KB
}
fn d_baseline() -> f64 {
    DEFAULT_BASELINE_MEM_FRACTION
}
fn d_flight_cpu() -> f64 {
    DEFAULT_FLIGHT_CPU_FRACTION
}

impl NodeConfig {
    pub fn new(id: u32, role: Role) -> Self {
        Self {
            id: NodeId(id),
            role,
            position: [0.0; 3],
            orientation_deg: 0.0,
            flight_mode: d_flight_mode(),
            cores: d_cores(),
            ram_kb: d_ram_kb(),
            baseline_mem_fraction: d_baseline(),
            flight_cpu_fraction: d_flight_cpu(),
            battery: BatteryConfig::default(),
        }
    }

    pub fn to_model(&self) -> PiNodeModel {
        PiNodeModel {
            node_id: self.id,
            cores: self.cores,
            ram_kb: self.ram_kb,
            baseline_mem_fraction: self.baseline_mem_fraction,
            flight_cpu_fraction: self.flight_cpu_fraction,
            position: self.position,
            orientation_deg: self.orientation_deg,
            battery: self.battery.to_state(),
            flight_mode: self.flight_mode,
        }
    }
}

/// One timed script entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Directive {
    /// Place `count` containers through the scheduler, or on `node` only.
    Deploy {
        at: f64,
        count: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node: Option<NodeId>,
    },
    /// Create containers one after another until placement fails.
    Fill {
        at: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node: Option<NodeId>,
    },
    /// Closed-loop test against a running container on `node` (the lowest
    /// id hosting one when absent).
    Stress {
        at: f64,
        users: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        total_requests: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node: Option<NodeId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        think_time_s: Option<f64>,
    },
    Kill {
        at: f64,
        node: NodeId,
    },
    Takeoff {
        at: f64,
        node: NodeId,
    },
    Land {
        at: f64,
        node: NodeId,
    },
    Move {
        at: f64,
        node: NodeId,
        position: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        orientation_deg: Option<f64>,
    },
}

impl Directive {
    pub fn at(&self) -> f64 {
        match self {
            Directive::Deploy { at, .. }
            | Directive::Fill { at, .. }
            | Directive::Stress { at, .. }
            | Directive::Kill { at, .. }
            | Directive::Takeoff { at, .. }
            | Directive::Land { at, .. }
            | Directive::Move { at, .. } => *at,
        }
    }

    fn node(&self) -> Option<NodeId> {
        match self {
            Directive::Deploy { node, .. }
            | Directive::Fill { node, .. }
            | Directive::Stress { node, .. } => *node,
            Directive::Kill { node, .. }
            | Directive::Takeoff { node, .. }
            | Directive::Land { node, .. }
            | Directive::Move { node, .. } => Some(*node),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_duration")]
    pub duration_s: f64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub radio: RadioModel,
    #[serde(default)]
    pub swarm: SwarmConfig,
    #[serde(default)]
    pub landing: LandingPolicy,
    #[serde(default)]
    pub container: ContainerSpec,
    #[serde(default)]
    pub creation: CreationTimeModel,
    #[serde(default)]
    pub workload: WorkloadDefaults,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub script: Vec<Directive>,
}

fn d_duration() -> f64 {
    3600.0
}

impl Scenario {
    /// Scenario with default models around the given nodes and script.
    pub fn new(nodes: Vec<NodeConfig>, script: Vec<Directive>) -> Self {
        Self {
            seed: 0,
            duration_s: d_duration(),
            strategy: Strategy::default(),
            radio: RadioModel::default(),
            swarm: SwarmConfig::default(),
            landing: LandingPolicy::default(),
            container: ContainerSpec::default(),
            creation: CreationTimeModel::default(),
            workload: WorkloadDefaults::default(),
            metrics: MetricsConfig::default(),
            nodes,
            script,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        check_positive("duration_s", self.duration_s)?;
        check_positive("metrics.sample_interval_s", self.metrics.sample_interval_s)?;

        let managers = self
            .nodes
            .iter()
            .filter(|n| n.role == Role::Manager)
            .count();
        if managers != 1 {
            return Err(invalid(
                "nodes",
                format!("expected exactly one manager, found {managers}"),
            ));
        }
        let mut ids = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !ids.insert(n.id) {
                return Err(invalid(
                    format!("nodes[{i}].id"),
                    format!("duplicate node id {}", n.id),
                ));
            }
            validate_node(i, n)?;
        }

        let r = &self.radio;
        for (name, s) in [("radio.front", r.front), ("radio.rear", r.rear)] {
            check_finite(&format!("{name}.rssi_at_d0_dbm"), s.rssi_at_d0_dbm)?;
            check_positive(&format!("{name}.path_loss_exponent"), s.path_loss_exponent)?;
        }
        check_finite("radio.connect_threshold_dbm", r.connect_threshold_dbm)?;

        check_positive(
            "swarm.heartbeat_interval_s",
            self.swarm.heartbeat_interval_s,
        )?;
        check_positive("swarm.failover_timeout_s", self.swarm.failover_timeout_s)?;
        if self.swarm.missed_heartbeats == 0 {
            return Err(invalid("swarm.missed_heartbeats", "must be at least 1"));
        }
        check_unit("landing.land_threshold", self.landing.land_threshold)?;

        check_positive(
            "container.mem_footprint_kb",
            self.container.mem_footprint_kb,
        )?;
        check_non_negative("container.image_size_kb", self.container.image_size_kb)?;
        check_unit(
            "container.cpu_idle_fraction",
            self.container.cpu_idle_fraction,
        )?;

        let c = &self.creation;
        check_positive("creation.t_min_s", c.t_min_s)?;
        if !(c.t_min_s <= c.t_knee_s && c.t_knee_s <= c.t_max_s && c.t_max_s.is_finite()) {
            return Err(invalid(
                "creation",
                "requires t_min_s <= t_knee_s <= t_max_s",
            ));
        }
        if !(c.knee_load > 0.0 && c.knee_load < 1.0) {
            return Err(invalid("creation.knee_load", "must lie in (0, 1)"));
        }
        check_positive("creation.ramp_exponent", c.ramp_exponent)?;
        check_non_negative("creation.noise_sigma", c.noise_sigma)?;

        let w = &self.workload;
        if w.total_requests == 0 {
            return Err(invalid("workload.total_requests", "must be at least 1"));
        }
        check_positive("workload.service_demand_s", w.service_demand_s)?;
        let [lo, hi] = w.rtt_range_ms;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(invalid("workload.rtt_range_ms", "requires 0 <= lo <= hi"));
        }
        check_non_negative("workload.think_time_s", w.think_time_s)?;
        if w.server_concurrency == 0 {
            return Err(invalid("workload.server_concurrency", "must be at least 1"));
        }

        let mut last = 0.0;
        for (i, d) in self.script.iter().enumerate() {
            let field = format!("script[{i}]");
            let at = d.at();
            if !(at.is_finite() && at >= 0.0) {
                return Err(invalid(
                    format!("{field}.at"),
                    "must be a non-negative time",
                ));
            }
            if at < last {
                return Err(invalid(
                    format!("{field}.at"),
                    "script must be in time order",
                ));
            }
            if at > self.duration_s {
                return Err(invalid(
                    format!("{field}.at"),
                    "directive falls after duration_s",
                ));
            }
            last = at;
            if let Some(node) = d.node() {
                if !ids.contains(&node) {
                    return Err(invalid(
                        format!("{field}.node"),
                        format!("unknown node {node}"),
                    ));
                }
            }
            match d {
                Directive::Deploy { count: 0, .. } => {
                    return Err(invalid(format!("{field}.count"), "must be at least 1"))
                }
                Directive::Stress {
                    users,
                    total_requests,
                    think_time_s,
                    ..
                } => {
                    if *users == 0 {
                        return Err(invalid(format!("{field}.users"), "must be at least 1"));
                    }
                    if *total_requests == Some(0) {
                        return Err(invalid(
                            format!("{field}.total_requests"),
                            "must be at least 1",
                        ));
                    }
                    if let Some(t) = think_time_s {
                        check_non_negative(&format!("{field}.think_time_s"), *t)?;
                    }
                }
                Directive::Move {
                    position,
                    orientation_deg,
                    ..
                } => {
                    for v in position.iter().chain(orientation_deg.iter()) {
                        check_finite(&format!("{field}.position"), *v)?;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn validate_node(i: usize, n: &NodeConfig) -> Result<(), ScenarioError> {
    let f = |name: &str| format!("nodes[{i}].{name}");
    for v in n.position {
        check_finite(&f("position"), v)?;
    }
    check_finite(&f("orientation_deg"), n.orientation_deg)?;
    if n.flight_mode == FlightMode::Depleted {
        return Err(invalid(f("flight_mode"), "a node cannot start depleted"));
    }
    if n.cores == 0 {
        return Err(invalid(f("cores"), "must be at least 1"));
    }
    if n.ram_kb == 0 {
        return Err(invalid(f("ram_kb"), "must be positive"));
    }
    if !(0.0..1.0).contains(&n.baseline_mem_fraction) {
        return Err(invalid(f("baseline_mem_fraction"), "must lie in [0, 1)"));
    }
    if !(0.0..1.0).contains(&n.flight_cpu_fraction) {
        return Err(invalid(f("flight_cpu_fraction"), "must lie in [0, 1)"));
    }
    let b = &n.battery;
    check_positive(&f("battery.capacity_mah"), b.capacity_mah)?;
    check_positive(&f("battery.flight_endurance_s"), b.flight_endurance_s)?;
    check_non_negative(&f("battery.drain_landed_ma"), b.drain_landed_ma)?;
    if let Some(level) = b.level_mah {
        if !(level > 0.0 && level <= b.capacity_mah) {
            return Err(invalid(
                f("battery.level_mah"),
                "must lie in (0, capacity_mah]",
            ));
        }
    }
    Ok(())
}

fn check_finite(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, "must be finite"))
    }
}

fn check_positive(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, "must be positive"))
    }
}

fn check_non_negative(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, "must be non-negative"))
    }
}

fn check_unit(field: &str, v: f64) -> Result<(), ScenarioError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(field, "must lie in [0, 1]"))
    }
}

/// Parses and validates a JSON scenario, filling every default.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}

/// Pretty JSON with every field written out.
pub fn serialize_scenario(scenario: &Scenario) -> String {
    serde_json::to_string_pretty(scenario).expect("scenario serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swarm::Strategy as Placement;
    use proptest::prelude::*;
    use proptest::strategy::Strategy;

    const MINIMAL: &str = r#"{ "nodes": [ { "id": 1, "role": "manager" } ] }"#;

    #[test]
    fn minimal_document_gets_defaults() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(
            s,
            Scenario::new(vec![NodeConfig::new(1, Role::Manager)], vec![])
        );
        assert_eq!(s.nodes[0].to_model().battery.level_mah, 4200.0);
        assert_eq!(s.container.mem_footprint_kb, 392.38);
        assert_eq!(s.swarm.heartbeat_interval_s, 2.0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let doc = r#"{ "nodes": [ { "id": 1, "role": "manager" }, { "id": 1 } ] }"#;
        let err = parse_scenario(doc).unwrap_err();
        assert!(
            matches!(err, ScenarioError::Validation { ref field, .. } if field == "nodes[1].id"),
            "{err}"
        );
    }

    #[test]
    fn manager_count_enforced() {
        let none = r#"{ "nodes": [ { "id": 1 } ] }"#;
        assert!(matches!(
            parse_scenario(none),
            Err(ScenarioError::Validation { .. })
        ));
        let two =
            r#"{ "nodes": [ { "id": 1, "role": "manager" }, { "id": 2, "role": "manager" } ] }"#;
        assert!(matches!(
            parse_scenario(two),
            Err(ScenarioError::Validation { .. })
        ));
    }

    #[test]
    fn unordered_script_rejected() {
        let doc = r#"{ "nodes": [ { "id": 1, "role": "manager" } ],
            "script": [ { "action": "fill", "at": 5 }, { "action": "deploy", "at": 1, "count": 2 } ] }"#;
        let err = parse_scenario(doc).unwrap_err();
        assert!(err.to_string().contains("time order"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected_with_position() {
        let doc = "{\n  \"nodes\": [ { \"id\": 1, \"role\": \"manager\", \"colour\": 3 } ]\n}";
        match parse_scenario(doc).unwrap_err() {
            ScenarioError::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("colour"));
            }
            e => panic!("unexpected {e}"),
        }
        let bad_action = r#"{ "nodes": [ { "id": 1, "role": "manager" } ], "script": [ { "action": "fill", "at": 0, "count": 3 } ] }"#;
        assert!(matches!(
            parse_scenario(bad_action),
            Err(ScenarioError::Parse { .. })
        ));
    }

    #[test]
    fn unknown_node_in_script_rejected() {
        let doc = r#"{ "nodes": [ { "id": 1, "role": "manager" } ], "script": [ { "action": "kill", "at": 0, "node": 9 } ] }"#;
        assert!(parse_scenario(doc)
            .unwrap_err()
            .to_string()
            .contains("unknown node 9"));
    }

    #[test]
    fn fill_scenario_document() {
        let doc = r#"{
            "seed": 7,
            "duration_s": 8000,
            "nodes": [ { "id": 1, "role": "manager", "flight_mode": "landed" } ],
            "script": [ { "action": "fill", "at": 0 } ]
        }"#;
        let s = parse_scenario(doc).unwrap();
        assert_eq!(s.nodes.len(), 1);
        assert_eq!(s.nodes[0].flight_mode, FlightMode::Landed);
        assert_eq!(
            s.script,
            vec![Directive::Fill {
                at: 0.0,
                node: None
            }]
        );
        assert_eq!(parse_scenario(&serialize_scenario(&s)).unwrap(), s);
    }

    fn arb_directive() -> impl Strategy<Value = Directive> {
        let node = prop::option::of((1u32..4).prop_map(NodeId));
        prop_oneof![
            (1u32..50, node.clone()).prop_map(|(count, node)| Directive::Deploy {
                at: 0.0,
                count,
                node
            }),
            node.clone()
                .prop_map(|node| Directive::Fill { at: 0.0, node }),
            (
                1u32..300,
                prop::option::of(1u64..100_000),
                node,
                prop::option::of(0.0f64..5.0)
            )
                .prop_map(|(users, total_requests, node, think_time_s)| {
                    Directive::Stress {
                        at: 0.0,
                        users,
                        total_requests,
                        node,
                        think_time_s,
                    }
                }),
            (1u32..4).prop_map(|n| Directive::Kill {
                at: 0.0,
                node: NodeId(n)
            }),
            (1u32..4).prop_map(|n| Directive::Land {
                at: 0.0,
                node: NodeId(n)
            }),
            (1u32..4, -1e3f64..1e3, prop::option::of(-360.0f64..360.0)).prop_map(|(n, x, o)| {
                Directive::Move {
                    at: 0.0,
                    node: NodeId(n),
                    position: [x, -x / 3.0, 12.5],
                    orientation_deg: o,
                }
            }),
        ]
    }

    fn arb_node(id: u32, role: Role) -> impl Strategy<Value = NodeConfig> {
        (
            -500.0f64..500.0,
            0.0f64..360.0,
            prop::bool::ANY,
            1u32..16,
            1u64..8_000_000,
            0.0f64..0.5,
            100.0f64..10_000.0,
            prop::option::of(0.5f64..1.0),
        )
            .prop_map(move |(x, o, landed, cores, ram_kb, base, cap, lvl)| {
                let mut n = NodeConfig::new(id, role);
                n.position = [x, x * 0.7, 20.0];
                n.orientation_deg = o;
                n.flight_mode = if landed {
                    FlightMode::Landed
                } else {
                    FlightMode::Flying
                };
                n.cores = cores;
                n.ram_kb = ram_kb;
                n.baseline_mem_fraction = base;
                n.battery.capacity_mah = cap;
                n.battery.level_mah = lvl.map(|f| f * cap);
                n
            })
    }

    fn arb_scenario() -> impl Strategy<Value = Scenario> {
        (
            any::<u64>(),
            arb_node(1, Role::Manager),
            arb_node(2, Role::Replica),
            arb_node(3, Role::Agent),
            prop::collection::vec((0.0f64..100.0, arb_directive()), 0..8),
            0.0f64..1.0,
            prop::bool::ANY,
        )
            .prop_map(|(seed, a, b, c, mut steps, thr, binpack)| {
                steps.sort_by(|x, y| x.0.total_cmp(&y.0));
                let script = steps
                    .into_iter()
                    .map(|(t, mut d)| {
                        match &mut d {
                            Directive::Deploy { at, .. }
                            | Directive::Fill { at, .. }
                            | Directive::Stress { at, .. }
                            | Directive::Kill { at, .. }
                            | Directive::Takeoff { at, .. }
                            | Directive::Land { at, .. }
                            | Directive::Move { at, .. } => *at = t,
                        }
                        d
                    })
                    .collect();
                let mut s = Scenario::new(vec![a, b, c], script);
                s.seed = seed;
                s.duration_s = 100.0;
                s.landing.land_threshold = thr;
                s.strategy = if binpack {
                    Placement::BinPack
                } else {
                    Placement::Spread
                };
                s
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn serialize_then_parse_is_identity(s in arb_scenario()) {
            prop_assert!(s.validate().is_ok());
            let text = serialize_scenario(&s);
            prop_assert_eq!(parse_scenario(&text).unwrap(), s);
        }
    }
}
