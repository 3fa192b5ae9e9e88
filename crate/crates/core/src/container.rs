//! Container lifecycle: memory footprint, load-dependent creation time and
//! per-node accounting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::node::{NodeId, PiNodeModel};
use crate::rng::RngStream;

pub type InstanceId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContainerError {
    #[error("node {node} out of memory: need {needed_kb} KB, {available_kb} KB free")]
    OutOfMemory {
        node: NodeId,
        needed_kb: f64,
        available_kb: f64,
    },
    #[error("node {0} is depleted")]
    NodeDepleted(NodeId),
    #[error("container {0} already destroyed")]
    AlreadyDestroyed(InstanceId),
    #[error("no container {0} on this node")]
    UnknownInstance(InstanceId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerSpec {
    #[serde(default = "default_image_size_kb")]
    pub image_size_kb: f64,
    /// Resident memory per running instance.
    #[serde(default = "default_footprint_kb")]
    pub mem_footprint_kb: f64,
    /// Share of one node's CPU used by an idle instance.
    #[serde(default = "default_idle_fraction")]
    pub cpu_idle_fraction: f64,
}

fn default_image_size_kb() -> f64 {
    90.0
}

// 944,871.8 KB usable / 2408 containers, rounded so that exactly 2408 fit.
fn default_footprint_kb() -> f64 {
    392.38
}

fn default_idle_fraction() -> f64 {
    0.00008
}

impl Default for ContainerSpec {
    fn default() -> Self {
        Self {
            image_size_kb: default_image_size_kb(),
            mem_footprint_kb: default_footprint_kb(),
            cpu_idle_fraction: default_idle_fraction(),
        }
    }
}

impl ContainerSpec {
    pub fn footprint_bytes(&self) -> u64 {
        (self.mem_footprint_kb * 1024.0).round() as u64
    }
}

pub fn memory_footprint(spec: &ContainerSpec) -> f64 {
    spec.mem_footprint_kb
}

/// Creation time as a function of node load: linear from `t_min` to
/// `t_knee` over `[0, knee_load]`, then a power ramp to `t_max` at full
/// load, times a mean-one lognormal factor. Samples are clamped to
/// `[t_min, t_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreationTimeModel {
    #[serde(default = "d_t_min")]
    pub t_min_s: f64,
    #[serde(default = "d_t_knee")]
    pub t_knee_s: f64,
    #[serde(default = "d_t_max")]
    pub t_max_s: f64,
    #[serde(default = "d_knee_load")]
    pub knee_load: f64,
    #[serde(default = "d_ramp_exponent")]
    pub ramp_exponent: f64,
    #[serde(default = "d_noise_sigma")]
    pub noise_sigma: f64,
}

fn d_t_min() -> f64 {
    0.62
}
fn d_t_knee() -> f64 {
    1.5
}
fn d_t_max() -> f64 {
    38.37
}
fn d_knee_load() -> f64 {
    0.83
}
fn d_ramp_exponent() -> f64 {
    2.73
}
fn d_noise_sigma() -> f64 {
    0.2
}

impl Default for CreationTimeModel {
    fn default() -> Self {
        Self {
            t_min_s: d_t_min(),
            t_knee_s: d_t_knee(),
            t_max_s: d_t_max(),
            knee_load: d_knee_load(),
            ramp_exponent: d_ramp_exponent(),
            noise_sigma: d_noise_sigma(),
        }
    }
}

impl CreationTimeModel {
    pub fn without_noise(mut self) -> Self {
        self.noise_sigma = 0.0;
        self
    }

    pub fn base_time(&self, load: f64) -> f64 {
        let load = load.clamp(0.0, 1.0);
        if load <= self.knee_load {
            let frac = if self.knee_load > 0.0 {
                load / self.knee_load
            } else {
                0.0
            };
            self.t_min_s + (self.t_knee_s - self.t_min_s) * frac
        } else {
            let frac = (load - self.knee_load) / (1.0 - self.knee_load);
            self.t_knee_s + (self.t_max_s - self.t_knee_s) * frac.powf(self.ramp_exponent)
        }
    }

    /// One creation-time sample. Always consumes exactly one normal draw so
    /// the stream position does not depend on the noise setting.
    pub fn creation_time(&self, load: f64, rng: &mut RngStream) -> f64 {
        let z = rng.standard_normal();
        let sigma = self.noise_sigma;
        let factor = (sigma * z - 0.5 * sigma * sigma).exp();
        (self.base_time(load) * factor).clamp(self.t_min_s, self.t_max_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerState {
    Creating,
    Running,
    Destroyed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerInstance {
    pub instance_id: InstanceId,
    pub node_id: NodeId,
    pub spec: ContainerSpec,
    pub state: ContainerState,
    pub created_at: f64,
    pub creation_duration: f64,
}

impl ContainerInstance {
    /// An instance that is already up, for tests and standalone workloads.
    pub fn running(instance_id: InstanceId, node_id: NodeId, spec: ContainerSpec) -> Self {
        Self {
            instance_id,
            node_id,
            spec,
            state: ContainerState::Running,
            created_at: 0.0,
            creation_duration: 0.0,
        }
    }

    pub fn is_charged(&self) -> bool {
        self.state != ContainerState::Destroyed
    }

    pub fn footprint_bytes(&self) -> u64 {
        self.spec.footprint_bytes()
    }
}

/// A node together with the containers charged to it.
#[derive(Debug, Clone)]
pub struct NodeHost {
    pub node: PiNodeModel,
    containers: Vec<ContainerInstance>,
    charged_bytes: u64,
    running_bytes: u64,
    running_count: usize,
}

impl NodeHost {
    pub fn new(node: PiNodeModel) -> Self {
        Self {
            node,
            containers: Vec::new(),
            charged_bytes: 0,
            running_bytes: 0,
            running_count: 0,
        }
    }

    pub fn containers(&self) -> &[ContainerInstance] {
        &self.containers
    }

    pub fn container(&self, id: InstanceId) -> Option<&ContainerInstance> {
        self.containers.get(id as usize)
    }

    pub fn available_bytes(&self) -> u64 {
        self.node.usable_bytes().saturating_sub(self.charged_bytes)
    }

    pub fn available_memory_kb(&self) -> f64 {
        self.available_bytes() as f64 / 1024.0
    }

    pub fn used_bytes(&self) -> u64 {
        self.node.baseline_bytes() + self.charged_bytes
    }

    pub fn memory_fraction(&self) -> f64 {
        self.used_bytes() as f64 / self.node.ram_bytes() as f64
    }

    /// Instances not destroyed (creating or running).
    pub fn live_count(&self) -> usize {
        self.containers.iter().filter(|c| c.is_charged()).count()
    }

    pub fn running_count(&self) -> usize {
        self.running_count
    }

    pub fn first_running(&self) -> Option<InstanceId> {
        self.containers
            .iter()
            .find(|c| c.state == ContainerState::Running)
            .map(|c| c.instance_id)
    }

    /// Load seen by the container runtime: memory held by running containers
    /// over usable memory, or CPU run-queue pressure if that is higher.
    pub fn node_load(&self, run_queue_pressure: f64) -> f64 {
        let usable = self.node.usable_bytes();
        let mem = if usable == 0 {
            1.0
        } else {
            self.running_bytes as f64 / usable as f64
        };
        mem.max(run_queue_pressure).clamp(0.0, 1.0)
    }

    /// Charges the footprint and adds a `Creating` instance. The creation
    /// clock is not started; see [`NodeHost::start_creation`].
    pub fn reserve(
        &mut self,
        spec: &ContainerSpec,
        now: f64,
    ) -> Result<InstanceId, ContainerError> {
        if self.node.is_depleted() {
            return Err(ContainerError::NodeDepleted(self.node.node_id));
        }
        let need = spec.footprint_bytes();
        if self.available_bytes() < need {
            return Err(ContainerError::OutOfMemory {
                node: self.node.node_id,
                needed_kb: spec.mem_footprint_kb,
                available_kb: self.available_memory_kb(),
            });
        }
        let id = self.containers.len() as InstanceId;
        self.containers.push(ContainerInstance {
            instance_id: id,
            node_id: self.node.node_id,
            spec: spec.clone(),
            state: ContainerState::Creating,
            created_at: now,
            creation_duration: 0.0,
        });
        self.charged_bytes += need;
        Ok(id)
    }

    pub fn start_creation(
        &mut self,
        id: InstanceId,
        now: f64,
        duration: f64,
    ) -> Result<(), ContainerError> {
        let c = self
            .containers
            .get_mut(id as usize)
            .ok_or(ContainerError::UnknownInstance(id))?;
        c.created_at = now;
        c.creation_duration = duration;
        Ok(())
    }

    pub fn mark_running(&mut self, id: InstanceId) -> Result<(), ContainerError> {
        let c = self
            .containers
            .get_mut(id as usize)
            .ok_or(ContainerError::UnknownInstance(id))?;
        match c.state {
            ContainerState::Creating => {
                c.state = ContainerState::Running;
                self.running_bytes += c.spec.footprint_bytes();
                self.running_count += 1;
                Ok(())
            }
            ContainerState::Running => Ok(()),
            ContainerState::Destroyed => Err(ContainerError::AlreadyDestroyed(id)),
        }
    }

    /// Reserves memory and draws the creation time from the current load.
    /// The instance stays `Creating` until [`NodeHost::mark_running`] is
    /// called at `created_at + creation_duration`.
    pub fn create_container(
        &mut self,
        spec: &ContainerSpec,
        now: f64,
        model: &CreationTimeModel,
        rng: &mut RngStream,
    ) -> Result<ContainerInstance, ContainerError> {
        let load = self.node_load(0.0);
        let id = self.reserve(spec, now)?;
        let duration = model.creation_time(load, rng);
        self.start_creation(id, now, duration)?;
        Ok(self.containers[id as usize].clone())
    }

    /// Releases the footprint. Returns the instance lifetime up to `now`.
    pub fn destroy_container(&mut self, id: InstanceId, now: f64) -> Result<f64, ContainerError> {
        let c = self
            .containers
            .get_mut(id as usize)
            .ok_or(ContainerError::UnknownInstance(id))?;
        let bytes = c.spec.footprint_bytes();
        match c.state {
            ContainerState::Destroyed => return Err(ContainerError::AlreadyDestroyed(id)),
            ContainerState::Running => {
                self.running_bytes -= bytes;
                self.running_count -= 1;
            }
            ContainerState::Creating => {}
        }
        c.state = ContainerState::Destroyed;
        self.charged_bytes -= bytes;
        Ok(now - c.created_at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::FlightMode;
    use crate::rng::CREATION_STREAM;

    fn host() -> NodeHost {
        NodeHost::new(PiNodeModel::new(NodeId(1)).with_mode(FlightMode::Landed))
    }

    #[test]
    fn footprint_passthrough() {
        assert_eq!(memory_footprint(&ContainerSpec::default()).round(), 392.0);
        let half_mb = ContainerSpec {
            mem_footprint_kb: 512.0,
            ..ContainerSpec::default()
        };
        assert_eq!(memory_footprint(&half_mb), 512.0);
    }

    #[test]
    fn default_node_holds_exactly_2408() {
        let mut h = host();
        let spec = ContainerSpec::default();
        let mut n = 0;
        while h.reserve(&spec, 0.0).is_ok() {
            n += 1;
        }
        assert_eq!(n, 2408);
        assert!(matches!(
            h.reserve(&spec, 0.0),
            Err(ContainerError::OutOfMemory { .. })
        ));
        assert!(h.available_memory_kb() < spec.mem_footprint_kb);
    }

    #[test]
    fn noise_free_time_at_zero_load() {
        let m = CreationTimeModel::default().without_noise();
        let mut rng = RngStream::new(0, CREATION_STREAM);
        assert!((m.creation_time(0.0, &mut rng) - 0.62).abs() < 1e-12);
        assert!((m.base_time(0.83) - 1.5).abs() < 1e-12);
        assert!((m.base_time(1.0) - 38.37).abs() < 1e-12);
    }

    #[test]
    fn create_then_destroy_restores_memory() {
        let mut h = host();
        let before = h.available_bytes();
        let model = CreationTimeModel::default();
        let mut rng = RngStream::new(1, CREATION_STREAM);
        let c = h
            .create_container(&ContainerSpec::default(), 0.0, &model, &mut rng)
            .unwrap();
        assert_eq!(c.state, ContainerState::Creating);
        assert!(c.creation_duration >= 0.62);
        h.mark_running(c.instance_id).unwrap();
        assert_eq!(h.first_running(), Some(c.instance_id));
        h.destroy_container(c.instance_id, 5.0).unwrap();
        assert_eq!(h.available_bytes(), before);
        assert_eq!(
            h.destroy_container(c.instance_id, 6.0),
            Err(ContainerError::AlreadyDestroyed(c.instance_id))
        );
    }

    #[test]
    fn refill_after_partial_destroy() {
        let mut h = host();
        let spec = ContainerSpec::default();
        let ids: Vec<_> = std::iter::from_fn(|| h.reserve(&spec, 0.0).ok()).collect();
        assert_eq!(ids.len(), 2408);
        for id in &ids[..100] {
            h.destroy_container(*id, 1.0).unwrap();
        }
        for _ in 0..100 {
            h.reserve(&spec, 2.0).unwrap();
        }
        assert!(h.reserve(&spec, 2.0).is_err());
    }

    #[test]
    fn depleted_node_refuses() {
        let mut h = host();
        h.node.flight_mode = FlightMode::Depleted;
        assert_eq!(
            h.reserve(&ContainerSpec::default(), 0.0),
            Err(ContainerError::NodeDepleted(NodeId(1)))
        );
    }

    #[test]
    fn idle_draw_at_full_fill_below_quarter_node() {
        let spec = ContainerSpec::default();
        assert!(2408.0 * spec.cpu_idle_fraction < 0.25);
    }

    proptest::proptest! {
        #[test]
        fn creation_time_within_bounds(load in 0.0f64..=1.0, seed in 0u64..1000) {
            let m = CreationTimeModel::default();
            let mut rng = RngStream::new(seed, CREATION_STREAM);
            for _ in 0..8 {
                let t = m.creation_time(load, &mut rng);
                proptest::prop_assert!((0.62..=38.37).contains(&t));
            }
        }

        #[test]
        fn accounting_depends_only_on_live_set(ops in proptest::collection::vec(proptest::bool::ANY, 1..200)) {
            let mut h = host();
            let spec = ContainerSpec { mem_footprint_kb: 50_000.0, ..ContainerSpec::default() };
            let mut live: Vec<InstanceId> = Vec::new();
            for create in ops {
                if create {
                    if let Ok(id) = h.reserve(&spec, 0.0) {
                        live.push(id);
                    }
                } else if let Some(id) = live.pop() {
                    h.destroy_container(id, 0.0).unwrap();
                }
                let expected = h.node.usable_bytes() - live.len() as u64 * spec.footprint_bytes();
                proptest::prop_assert_eq!(h.available_bytes(), expected);
                let recomputed = h.node.available_memory(h.containers());
                proptest::prop_assert_eq!(recomputed, expected as f64 / 1024.0);
            }
        }
    }
}
