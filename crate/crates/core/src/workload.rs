//! Closed-loop stress test against a web container.
//!
//! Users send a request, wait for the response (half an RTT each way plus
//! the time in service) and send the next one. The node's CPU is a
//! processor-sharing server: with `k` requests in service and effective
//! capacity `c` cores, every request progresses at `min(1, c/k)`
//! CPU-seconds per second.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ContainerState, InstanceId, NodeHost};
use crate::engine::{EventQueue, Model, SimEngine};
use crate::node::{FlightMode, NodeId, PiNodeModel};
use crate::rng::{RngStream, RTT_STREAM, THINK_STREAM};

/// Time constant of the 1-minute load average.
pub const LOAD_AVERAGE_WINDOW_S: f64 = 60.0;

/// Remaining work below this is treated as done.
const WORK_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("target container {container} on node {node} is not running")]
    TargetNotRunning { node: NodeId, container: InstanceId },
    #[error("no samples")]
    EmptySamples,
    #[error("invalid workload: {0}")]
    Invalid(String),
}

/// Scenario-level defaults for stress directives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadDefaults {
    #[serde(default = "d_total_requests")]
    pub total_requests: u64,
    #[serde(default = "d_service_demand")]
    pub service_demand_s: f64,
    #[serde(default = "d_rtt_range")]
    pub rtt_range_ms: [f64; 2],
    #[serde(default)]
    pub think_time_s: f64,
    /// Worker processes of the web server; caps the cores one test can use.
    #[serde(default = "d_server_concurrency")]
    pub server_concurrency: u32,
}

fn d_total_requests() -> u64 {
    10_000
}
fn d_service_demand() -> f64 {
    0.0002
}
fn d_rtt_range() -> [f64; 2] {
    [8.0, 10.0]
}
fn d_server_concurrency() -> u32 {
    1
}

impl Default for WorkloadDefaults {
    fn default() -> Self {
        Self {
            total_requests: d_total_requests(),
            service_demand_s: d_service_demand(),
            rtt_range_ms: d_rtt_range(),
            think_time_s: 0.0,
            server_concurrency: d_server_concurrency(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub concurrent_users: u32,
    pub total_requests: u64,
    pub target_node: NodeId,
    pub target_container: InstanceId,
    pub service_demand_s: f64,
    pub rtt_range_ms: [f64; 2],
    pub think_time_s: f64,
    pub server_concurrency: u32,
}

impl WorkloadSpec {
    pub fn from_defaults(
        d: &WorkloadDefaults,
        users: u32,
        node: NodeId,
        container: InstanceId,
    ) -> Self {
        Self {
            concurrent_users: users,
            total_requests: d.total_requests,
            target_node: node,
            target_container: container,
            service_demand_s: d.service_demand_s,
            rtt_range_ms: d.rtt_range_ms,
            think_time_s: d.think_time_s,
            server_concurrency: d.server_concurrency,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Invalid(m.to_string()));
        if self.concurrent_users == 0 {
            return bad("concurrent_users must be at least 1");
        }
        if !(self.service_demand_s > 0.0 && self.service_demand_s.is_finite()) {
            return bad("service_demand_s must be positive");
        }
        let [lo, hi] = self.rtt_range_ms;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad("rtt_range_ms must satisfy 0 <= lo <= hi");
        }
        if !(self.think_time_s >= 0.0 && self.think_time_s.is_finite()) {
            return bad("think_time_s must be non-negative");
        }
        if self.server_concurrency == 0 {
            return bad("server_concurrency must be at least 1");
        }
        Ok(())
    }

    /// Requests issued by `user`: an even share, the first `total % users`
    /// users taking one extra.
    pub fn quota(&self, user: u32) -> u64 {
        let n = u64::from(self.concurrent_users);
        self.total_requests / n + u64::from(u64::from(user) < self.total_requests % n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub request_id: u64,
    pub user_id: u32,
    /// Client send time.
    pub arrival: f64,
    /// Time the request reached the server.
    pub service_start: f64,
    /// Time the response reached the client.
    pub completion: f64,
    pub rtt_ms: f64,
}

impl RequestRecord {
    pub fn response_time_ms(&self) -> f64 {
        (self.completion - self.arrival) * 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub time_s: f64,
    pub node_id: NodeId,
    pub metric: String,
    pub value: f64,
}

/// Time series keyed by (node, metric). Timestamps within one series are
/// strictly increasing; a second point at the same time replaces the first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsSeries {
    points: Vec<SeriesPoint>,
    last_index: HashMap<(NodeId, String), usize>,
}

impl MetricsSeries {
    pub fn push(&mut self, time_s: f64, node_id: NodeId, metric: &str, value: f64) {
        let key = (node_id, metric.to_string());
        if let Some(&i) = self.last_index.get(&key) {
            let last = &mut self.points[i];
            if time_s <= last.time_s {
                debug_assert!(time_s == last.time_s, "series {metric} went back in time");
                last.value = value;
                return;
            }
        }
        self.last_index.insert(key, self.points.len());
        self.points.push(SeriesPoint {
            time_s,
            node_id,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn points(&self) -> &[SeriesPoint] {
        &self.points
    }

    pub fn series(&self, node_id: NodeId, metric: &str) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .filter(|p| p.node_id == node_id && p.metric == metric)
            .map(|p| (p.time_s, p.value))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Exponentially weighted run-queue average, integrated exactly over
/// piecewise-constant queue lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadAverage {
    pub value: f64,
    pub window_s: f64,
}

impl Default for LoadAverage {
    fn default() -> Self {
        Self {
            value: 0.0,
            window_s: LOAD_AVERAGE_WINDOW_S,
        }
    }
}

impl LoadAverage {
    /// Advances by `dt` seconds during which the run queue held `k` tasks.
    pub fn advance(&mut self, dt: f64, k: f64) {
        if dt > 0.0 {
            self.value = k + (self.value - k) * (-dt / self.window_s).exp();
        }
    }
}

/// Load average of a run-queue trace, sampled every `window_s` seconds up to
/// `until`. `changes` lists `(time, queue length)` steps in time order; the
/// queue is empty before the first one.
pub fn load_average(changes: &[(f64, f64)], window_s: f64, until: f64) -> Vec<(f64, f64)> {
    let mut avg = LoadAverage {
        value: 0.0,
        window_s,
    };
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut k = 0.0;
    let mut steps = changes.iter().peekable();
    let mut next_sample = window_s;
    while next_sample <= until {
        while let Some(&&(ts, kn)) = steps.peek() {
            if ts > next_sample {
                break;
            }
            avg.advance(ts - t, k);
            t = ts;
            k = kn;
            steps.next();
        }
        avg.advance(next_sample - t, k);
        t = next_sample;
        out.push((next_sample, avg.value));
        next_sample += window_s;
    }
    out
}

/// Empirical CDF as a step function over distinct values.
pub fn compute_cdf(samples: &[f64]) -> Result<Vec<(f64, f64)>, WorkloadError> {
    if samples.is_empty() {
        return Err(WorkloadError::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => out.push((*v, frac)),
        }
    }
    if let Some(last) = out.last_mut() {
        last.1 = 1.0;
    }
    Ok(out)
}

/// Nearest-rank percentile of an ascending slice, `p` in (0, 1].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (p * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Whole-node CPU utilisation: request work over all cores, plus idle
/// containers, plus flight control when airborne; capped at 1.
pub fn cpu_utilization(
    node: &PiNodeModel,
    active_requests: usize,
    effective_capacity: f64,
    running_containers: usize,
    idle_fraction: f64,
) -> f64 {
    if node.flight_mode == FlightMode::Depleted {
        return 0.0;
    }
    let busy = (active_requests as f64).min(effective_capacity.max(0.0));
    let u = busy / f64::from(node.cores.max(1))
        + running_containers as f64 * idle_fraction
        + node.flight_tax();
    u.min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
struct PsJob {
    key: u64,
    remaining: f64,
}

/// Egalitarian processor sharing over `capacity` cores.
#[derive(Debug, Clone, PartialEq)]
pub struct PsQueue {
    jobs: Vec<PsJob>,
    capacity: f64,
    last_update: f64,
    busy_core_seconds: f64,
}

impl PsQueue {
    pub fn new(capacity: f64) -> Self {
        Self {
            jobs: Vec::new(),
            capacity,
            last_update: 0.0,
            busy_core_seconds: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn busy_core_seconds(&self) -> f64 {
        self.busy_core_seconds
    }

    /// Service rate of each job in CPU-seconds per second.
    pub fn rate(&self) -> f64 {
        if self.jobs.is_empty() {
            0.0
        } else {
            (self.capacity / self.jobs.len() as f64).min(1.0)
        }
    }

    pub fn advance(&mut self, now: f64) {
        let dt = now - self.last_update;
        if dt > 0.0 {
            let rate = self.rate();
            for j in &mut self.jobs {
                j.remaining -= rate * dt;
            }
            self.busy_core_seconds += rate * self.jobs.len() as f64 * dt;
        }
        self.last_update = self.last_update.max(now);
    }

    pub fn add(&mut self, now: f64, key: u64, work: f64) {
        self.advance(now);
        self.jobs.push(PsJob {
            key,
            remaining: work,
        });
    }

    pub fn set_capacity(&mut self, now: f64, capacity: f64) {
        self.advance(now);
        self.capacity = capacity.max(0.0);
    }

    /// Time at which the next job finishes if nothing else changes.
    pub fn next_completion(&self) -> Option<f64> {
        let rate = self.rate();
        if rate <= 0.0 {
            return None;
        }
        let min = self
            .jobs
            .iter()
            .map(|j| j.remaining)
            .fold(f64::INFINITY, f64::min);
        Some(self.last_update + min.max(0.0) / rate)
    }

    /// Advances to `now` and removes every finished job, in arrival order.
    pub fn take_finished(&mut self, now: f64) -> Vec<u64> {
        self.advance(now);
        let mut done = Vec::new();
        self.jobs.retain(|j| {
            if j.remaining <= WORK_EPSILON {
                done.push(j.key);
                false
            } else {
                true
            }
        });
        done
    }

    pub fn clear(&mut self, now: f64) -> Vec<u64> {
        self.advance(now);
        self.jobs.drain(..).map(|j| j.key).collect()
    }
}

/// CPU side of one node: the PS server plus integrals needed for
/// utilisation and load-average reporting.
#[derive(Debug, Clone)]
pub struct NodeCpu {
    pub ps: PsQueue,
    pub load: LoadAverage,
    util_integral: f64,
    last_update: f64,
    /// Sum of worker counts of the stress tests targeting this node.
    server_slots: u32,
    /// Bumped whenever the PS schedule changes; stale completion events
    /// carry an older value.
    pub generation: u64,
}

impl Default for NodeCpu {
    fn default() -> Self {
        Self {
            ps: PsQueue::new(0.0),
            load: LoadAverage::default(),
            util_integral: 0.0,
            last_update: 0.0,
            server_slots: 0,
            generation: 0,
        }
    }
}

impl NodeCpu {
    /// Integrates up to `now` with the state that held since the last call.
    /// Must run before any change to the node, its containers or the queue.
    pub fn sync(&mut self, now: f64, node: &PiNodeModel, running: usize, idle_fraction: f64) {
        let dt = now - self.last_update;
        if dt > 0.0 {
            let util = cpu_utilization(
                node,
                self.ps.len(),
                self.ps.capacity(),
                running,
                idle_fraction,
            );
            self.util_integral += util * dt;
            self.load.advance(dt, self.ps.len() as f64);
            self.last_update = now;
        }
        self.ps.advance(now);
    }

    pub fn util_integral(&self) -> f64 {
        self.util_integral
    }

    pub fn add_server(&mut self, now: f64, node: &PiNodeModel, workers: u32) {
        self.server_slots += workers;
        self.refresh_capacity(now, node);
    }

    pub fn remove_server(&mut self, now: f64, node: &PiNodeModel, workers: u32) {
        self.server_slots = self.server_slots.saturating_sub(workers);
        self.refresh_capacity(now, node);
    }

    /// Recomputes `min(worker slots, cores × available CPU)`.
    pub fn refresh_capacity(&mut self, now: f64, node: &PiNodeModel) {
        let c = node.effective_cores().min(f64::from(self.server_slots));
        self.ps.set_capacity(now, c);
    }

    /// Run queue over effective cores, clamped to 1.
    pub fn pressure(&self, node: &PiNodeModel) -> f64 {
        let cores = node.effective_cores();
        if cores <= 0.0 {
            return 1.0;
        }
        (self.ps.len() as f64 / cores).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    user: u32,
    arrival: f64,
    service_start: f64,
    rtt_ms: f64,
}

/// Client-side bookkeeping of one closed-loop test.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub spec: WorkloadSpec,
    remaining: Vec<u64>,
    next_request_id: u64,
    pending: BTreeMap<u64, Pending>,
    pub records: Vec<RequestRecord>,
    pub started_at: f64,
    pub finished_at: Option<f64>,
    pub aborted: bool,
}

impl ClosedLoop {
    pub fn new(spec: WorkloadSpec, now: f64) -> Self {
        let remaining = (0..spec.concurrent_users).map(|u| spec.quota(u)).collect();
        Self {
            spec,
            remaining,
            next_request_id: 1,
            pending: BTreeMap::new(),
            records: Vec::new(),
            started_at: now,
            finished_at: None,
            aborted: false,
        }
    }

    pub fn users(&self) -> u32 {
        self.spec.concurrent_users
    }

    /// Issues `user`'s next request. Returns its id and the time it reaches
    /// the server, or `None` when the user's share is used up.
    pub fn send(&mut self, user: u32, now: f64, rtt: &mut RngStream) -> Option<(u64, f64)> {
        let left = self.remaining.get_mut(user as usize)?;
        if *left == 0 || self.aborted {
            return None;
        }
        *left -= 1;
        let [lo, hi] = self.spec.rtt_range_ms;
        let rtt_ms = rtt.uniform(lo, hi);
        let id = self.next_request_id;
        self.next_request_id += 1;
        let at_server = now + rtt_ms / 2000.0;
        self.pending.insert(
            id,
            Pending {
                user,
                arrival: now,
                service_start: at_server,
                rtt_ms,
            },
        );
        Some((id, at_server))
    }

    /// Server finished `request`; returns when the response reaches the client.
    pub fn served(&self, request: u64, now: f64) -> Option<f64> {
        self.pending.get(&request).map(|p| now + p.rtt_ms / 2000.0)
    }

    /// Response reached the client. Returns the user and the time of their
    /// next send, if they have requests left.
    pub fn delivered(
        &mut self,
        request: u64,
        now: f64,
        think: &mut RngStream,
    ) -> Option<(u32, f64)> {
        let p = self.pending.remove(&request)?;
        self.records.push(RequestRecord {
            request_id: request,
            user_id: p.user,
            arrival: p.arrival,
            service_start: p.service_start,
            completion: now,
            rtt_ms: p.rtt_ms,
        });
        if self.is_complete() {
            self.finished_at = Some(now);
        }
        if self.remaining[p.user as usize] > 0 {
            Some((p.user, now + think.exponential(self.spec.think_time_s)))
        } else {
            None
        }
    }

    pub fn is_complete(&self) -> bool {
        self.records.len() as u64 == self.spec.total_requests
    }

    /// Stops the test; in-flight requests are lost.
    pub fn abort(&mut self, now: f64) {
        self.aborted = true;
        self.pending.clear();
        self.finished_at.get_or_insert(now);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressSummary {
    pub node: NodeId,
    pub users: u32,
    pub total_requests: u64,
    pub completed: u64,
    pub aborted: bool,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub mean_ms: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub min_ms: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub p50_ms: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub p90_ms: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub p99_ms: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub max_ms: f64,
    /// Time-averaged node CPU utilisation over [start_s, end_s].
    pub mean_cpu_utilization: f64,
    /// 1-minute load average at end_s.
    pub load_average_end: f64,
}

// Serde writes NaN as null; read it back as NaN.
fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl StressSummary {
    pub fn from_run(
        run: &ClosedLoop,
        end: f64,
        mean_cpu_utilization: f64,
        load_average_end: f64,
    ) -> Self {
        let mut resp: Vec<f64> = run
            .records
            .iter()
            .map(RequestRecord::response_time_ms)
            .collect();
        resp.sort_by(f64::total_cmp);
        let mean = if resp.is_empty() {
            f64::NAN
        } else {
            resp.iter().sum::<f64>() / resp.len() as f64
        };
        Self {
            node: run.spec.target_node,
            users: run.spec.concurrent_users,
            total_requests: run.spec.total_requests,
            completed: run.records.len() as u64,
            aborted: run.aborted,
            start_s: run.started_at,
            end_s: end,
            mean_ms: mean,
            min_ms: resp.first().copied().unwrap_or(f64::NAN),
            p50_ms: percentile(&resp, 0.5),
            p90_ms: percentile(&resp, 0.9),
            p99_ms: percentile(&resp, 0.99),
            max_ms: resp.last().copied().unwrap_or(f64::NAN),
            mean_cpu_utilization,
            load_average_end,
        }
    }
}

/// Random streams used by a stress test.
#[derive(Debug, Clone)]
pub struct WorkloadRngs {
    pub rtt: RngStream,
    pub think: RngStream,
}

impl WorkloadRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            rtt: RngStream::new(seed, RTT_STREAM),
            think: RngStream::new(seed, THINK_STREAM),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StressOutcome {
    pub records: Vec<RequestRecord>,
    pub series: MetricsSeries,
    pub summary: StressSummary,
}

#[derive(Debug, Clone, Copy)]
enum StressEvent {
    Send(u32),
    Arrive(u64),
    PsDone(u64),
    Deliver(u64),
    Sample,
}

struct StressModel {
    node: PiNodeModel,
    running: usize,
    idle_fraction: f64,
    cpu: NodeCpu,
    run: ClosedLoop,
    rngs: WorkloadRngs,
    series: MetricsSeries,
    sample_interval: f64,
    last_sample: (f64, f64),
}

impl StressModel {
    fn sync(&mut self, now: f64) {
        self.cpu
            .sync(now, &self.node, self.running, self.idle_fraction);
    }

    fn reschedule(&mut self, q: &mut EventQueue<StressEvent>) {
        self.cpu.generation += 1;
        if let Some(t) = self.cpu.ps.next_completion() {
            q.schedule(t.max(q.now()), StressEvent::PsDone(self.cpu.generation))
                .expect("completion is not in the past");
        }
    }
}

impl Model for StressModel {
    type Event = StressEvent;

    fn handle(&mut self, event: StressEvent, q: &mut EventQueue<StressEvent>) {
        let now = q.now();
        self.sync(now);
        match event {
            StressEvent::Send(user) => {
                if let Some((id, at)) = self.run.send(user, now, &mut self.rngs.rtt) {
                    q.schedule(at, StressEvent::Arrive(id)).expect("future");
                }
            }
            StressEvent::Arrive(id) => {
                self.cpu.ps.add(now, id, self.run.spec.service_demand_s);
                self.reschedule(q);
            }
            StressEvent::PsDone(generation) => {
                if generation != self.cpu.generation {
                    return;
                }
                for id in self.cpu.ps.take_finished(now) {
                    if let Some(at) = self.run.served(id, now) {
                        q.schedule(at, StressEvent::Deliver(id)).expect("future");
                    }
                }
                self.reschedule(q);
            }
            StressEvent::Deliver(id) => {
                if let Some((user, at)) = self.run.delivered(id, now, &mut self.rngs.think) {
                    q.schedule(at, StressEvent::Send(user)).expect("future");
                }
            }
            StressEvent::Sample => {
                let (t0, i0) = self.last_sample;
                let i1 = self.cpu.util_integral();
                if now > t0 {
                    self.series.push(
                        now,
                        self.node.node_id,
                        "cpu_utilization",
                        (i1 - i0) / (now - t0),
                    );
                }
                self.series.push(
                    now,
                    self.node.node_id,
                    "run_queue",
                    self.cpu.ps.len() as f64,
                );
                self.series.push(
                    now,
                    self.node.node_id,
                    "load_average_1min",
                    self.cpu.load.value,
                );
                self.last_sample = (now, i1);
                if !self.run.is_complete() {
                    q.schedule_in(self.sample_interval, StressEvent::Sample)
                        .expect("future");
                }
            }
        }
    }
}

/// Runs one closed-loop test against a running container on `host`, in
/// isolation from any other activity on the node.
pub fn run_stress_test(
    spec: &WorkloadSpec,
    host: &NodeHost,
    rngs: WorkloadRngs,
    sample_interval_s: f64,
) -> Result<StressOutcome, WorkloadError> {
    spec.validate()?;
    let running = host
        .container(spec.target_container)
        .is_some_and(|c| c.state == ContainerState::Running && c.node_id == spec.target_node)
        && host.node.node_id == spec.target_node
        && !host.node.is_depleted();
    if !running {
        return Err(WorkloadError::TargetNotRunning {
            node: spec.target_node,
            container: spec.target_container,
        });
    }
    let mut cpu = NodeCpu::default();
    cpu.add_server(0.0, &host.node, spec.server_concurrency);
    let model = StressModel {
        node: host.node.clone(),
        running: host.running_count(),
        idle_fraction: host
            .container(spec.target_container)
            .map(|c| c.spec.cpu_idle_fraction)
            .unwrap_or(0.0),
        cpu,
        run: ClosedLoop::new(spec.clone(), 0.0),
        rngs,
        series: MetricsSeries::default(),
        sample_interval: sample_interval_s,
        last_sample: (0.0, 0.0),
    };
    let mut engine = SimEngine::new(model);
    for user in 0..spec.concurrent_users {
        engine
            .queue
            .schedule(0.0, StressEvent::Send(user))
            .expect("t=0");
    }
    if sample_interval_s > 0.0 {
        engine
            .queue
            .schedule(sample_interval_s, StressEvent::Sample)
            .expect("future");
    }
    while !engine.model.run.is_complete() {
        let Some(t) = engine.queue.peek_time() else {
            break;
        };
        engine.run_until(t);
    }
    let end = engine.model.run.finished_at.unwrap_or(engine.queue.now());
    engine.model.sync(end);
    let m = &engine.model;
    let mean_util = if end > 0.0 {
        m.cpu.util_integral() / end
    } else {
        0.0
    };
    let summary = StressSummary::from_run(&m.run, end, mean_util, m.cpu.load.value);
    let StressModel { run, series, .. } = engine.model;
    Ok(StressOutcome {
        records: run.records,
        series,
        summary,
    })
}
