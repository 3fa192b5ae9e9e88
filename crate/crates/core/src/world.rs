//! Full-swarm simulation driven by a scenario script.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::container::{InstanceId, NodeHost};
use crate::engine::{EventQueue, Model, SimEngine};
use crate::node::{FlightMode, NodeId, BATTERY_TICK_S};
use crate::radio::{all_mprs, blind_relays, derive_links, flood, LinkTable};
use crate::report::{
    Candidate, CreationRecord, CreationSummary, ElectionRecord, FloodSummary, LogEvent,
    NodeSummary, RequestRow, SimReport, Summary, SwarmSummary, TopologySnapshot,
};
use crate::rng::{RngStream, CREATION_STREAM};
use crate::scenario::{Directive, Scenario};
use crate::swarm::{NodeDescriptor, Role, SwarmState};
use crate::workload::{
    cpu_utilization, ClosedLoop, MetricsSeries, NodeCpu, StressSummary, WorkloadRngs, WorkloadSpec,
};

const REQUEST_BITS: u32 = 32;

#[derive(Debug, Clone, Copy)]
enum Event {
    Directive(usize),
    Tick,
    Sample,
    Heartbeat,
    ElectionTimeout(u64),
    LinkRecompute,
    CreationComplete { node: usize, container: InstanceId },
    Send { run: usize, user: u32 },
    Arrive { run: usize, request: u64 },
    PsDone { node: usize, generation: u64 },
    Deliver { run: usize, request: u64 },
}

struct NodeRuntime {
    host: NodeHost,
    cpu: NodeCpu,
    role: Role,
    alive: bool,
    /// Reserved containers waiting for the runtime; creations run one at a time.
    backlog: VecDeque<InstanceId>,
    creating: Option<InstanceId>,
    sample_mark: (f64, f64),
    initial_mem_fraction: f64,
}

impl NodeRuntime {
    fn id(&self) -> NodeId {
        self.host.node.node_id
    }

    fn utilization(&self, s: &Scenario) -> f64 {
        if !self.alive {
            return 0.0;
        }
        cpu_utilization(
            &self.host.node,
            self.cpu.ps.len(),
            self.cpu.ps.capacity(),
            self.host.running_count(),
            s.container.cpu_idle_fraction,
        )
    }
}

struct Run {
    lp: ClosedLoop,
    node: usize,
    util_mark: f64,
    done: bool,
}

struct Fill {
    pinned: Option<NodeId>,
    count: u64,
}

struct World {
    scenario: Scenario,
    nodes: Vec<NodeRuntime>,
    index: BTreeMap<NodeId, usize>,
    swarm: SwarmState,
    links: LinkTable,
    creation_rng: RngStream,
    wl: WorkloadRngs,
    runs: Vec<Run>,
    fills: Vec<Fill>,
    fill_of: BTreeMap<(usize, InstanceId), usize>,
    link_pending: bool,
    election_token: u64,

    series: MetricsSeries,
    creations: Vec<CreationRecord>,
    events: Vec<LogEvent>,
    stress: Vec<StressSummary>,
    fill_count: u64,
    placements: u64,
    rejections: u64,
    elections: Vec<ElectionRecord>,
    last_flood: Option<FloodSummary>,
}

impl World {
    fn new(scenario: &Scenario) -> Self {
        let mut nodes = Vec::new();
        let mut index = BTreeMap::new();
        let mut swarm = SwarmState::new(scenario.strategy);
        let mut events = Vec::new();
        for cfg in &scenario.nodes {
            let host = NodeHost::new(cfg.to_model());
            let mem = host.memory_fraction();
            index.insert(cfg.id, nodes.len());
            nodes.push(NodeRuntime {
                host,
                cpu: NodeCpu::default(),
                role: cfg.role,
                alive: true,
                backlog: VecDeque::new(),
                creating: None,
                sample_mark: (0.0, 0.0),
                initial_mem_fraction: mem,
            });
        }
        let mut w = Self {
            scenario: scenario.clone(),
            nodes,
            index,
            swarm: SwarmState::default(),
            links: LinkTable::default(),
            creation_rng: RngStream::new(scenario.seed, CREATION_STREAM),
            wl: WorkloadRngs::new(scenario.seed),
            runs: Vec::new(),
            fills: Vec::new(),
            fill_of: BTreeMap::new(),
            link_pending: false,
            election_token: 0,
            series: MetricsSeries::default(),
            creations: Vec::new(),
            events: Vec::new(),
            stress: Vec::new(),
            fill_count: 0,
            placements: 0,
            rejections: 0,
            elections: Vec::new(),
            last_flood: None,
        };
        let mut order: Vec<usize> = (0..w.nodes.len()).collect();
        order.sort_by_key(|&i| w.nodes[i].id());
        for i in order {
            let n = &w.nodes[i];
            swarm.register_agent(w.descriptor(i, 0.0));
            match n.role {
                Role::Manager => swarm.primary = Some(n.id()),
                Role::Replica => swarm.replicas.push(n.id()),
                Role::Agent => {}
            }
            events.push(LogEvent::Registered {
                time_s: 0.0,
                node: n.id(),
                role: n.role,
            });
        }
        w.swarm = swarm;
        w.events = events;
        w
    }

    fn descriptor(&self, i: usize, now: f64) -> NodeDescriptor {
        let n = &self.nodes[i];
        let mut d = NodeDescriptor::new(n.id(), n.host.available_memory_kb());
        d.available_cpu_fraction = 1.0 - n.utilization(&self.scenario);
        d.running_containers = n.host.live_count();
        d.battery_mah = n.host.node.battery.level_mah;
        d.last_heartbeat = now;
        d.reachable = self.reachable_from_primary(n.id());
        d
    }

    fn reachable_from_primary(&self, id: NodeId) -> bool {
        match self.swarm.primary {
            Some(p) if self.is_alive(p) => self.links.component(p).contains(&id),
            _ => false,
        }
    }

    fn is_alive(&self, id: NodeId) -> bool {
        self.index.get(&id).is_some_and(|&i| self.nodes[i].alive)
    }

    fn sync_all(&mut self, now: f64) {
        for n in &mut self.nodes {
            if n.alive {
                let running = n.host.running_count();
                n.cpu.sync(
                    now,
                    &n.host.node,
                    running,
                    self.scenario.container.cpu_idle_fraction,
                );
            }
        }
    }

    fn reschedule_ps(&mut self, i: usize, q: &mut EventQueue<Event>) {
        let cpu = &mut self.nodes[i].cpu;
        cpu.generation += 1;
        if let Some(t) = cpu.ps.next_completion() {
            let at = t.max(q.now());
            q.schedule(
                at,
                Event::PsDone {
                    node: i,
                    generation: cpu.generation,
                },
            )
            .expect("not in the past");
        }
    }

    fn request_links(&mut self, q: &mut EventQueue<Event>) {
        if !self.link_pending {
            self.link_pending = true;
            q.schedule(q.now(), Event::LinkRecompute).expect("now");
        }
    }

    fn reject(&mut self, now: f64, reason: String) {
        self.rejections += 1;
        self.events.push(LogEvent::PlacementRejected {
            time_s: now,
            reason,
        });
    }

    /// Places one container and queues its creation on the chosen node.
    fn place(
        &mut self,
        now: f64,
        pinned: Option<NodeId>,
        q: &mut EventQueue<Event>,
    ) -> Option<(usize, InstanceId)> {
        let spec = self.scenario.container.clone();
        let strict = self.scenario.swarm.strict_cpu_admission;
        let node_id = match self.swarm.schedule_container(&spec, strict, pinned) {
            Ok(id) => id,
            Err(e) => {
                self.reject(now, e.to_string());
                return None;
            }
        };
        let i = self.index[&node_id];
        if !self.nodes[i].alive {
            self.reject(now, format!("node {node_id} is down"));
            return None;
        }
        match self.nodes[i].host.reserve(&spec, now) {
            Ok(id) => {
                self.swarm.record_placement(node_id, &spec);
                self.placements += 1;
                self.events.push(LogEvent::Placed {
                    time_s: now,
                    node: node_id,
                    container: id,
                });
                self.nodes[i].backlog.push_back(id);
                self.start_next_creation(i, now, q);
                Some((i, id))
            }
            Err(e) => {
                self.reject(now, e.to_string());
                None
            }
        }
    }

    fn start_next_creation(&mut self, i: usize, now: f64, q: &mut EventQueue<Event>) {
        let n = &mut self.nodes[i];
        if n.creating.is_some() || !n.alive {
            return;
        }
        let Some(id) = n.backlog.pop_front() else {
            return;
        };
        let load = n.host.node_load(n.cpu.pressure(&n.host.node));
        let duration = self
            .scenario
            .creation
            .creation_time(load, &mut self.creation_rng);
        n.host
            .start_creation(id, now, duration)
            .expect("reserved instance");
        n.creating = Some(id);
        q.schedule(
            now + duration,
            Event::CreationComplete {
                node: i,
                container: id,
            },
        )
        .expect("future");
    }

    fn advance_fill(&mut self, f: usize, now: f64, q: &mut EventQueue<Event>) {
        match self.place(now, self.fills[f].pinned, q) {
            Some(key) => {
                self.fill_of.insert(key, f);
            }
            None => self.end_fill(f, now),
        }
    }

    fn end_fill(&mut self, f: usize, now: f64) {
        let count = self.fills[f].count;
        self.fill_count += count;
        self.events
            .push(LogEvent::FillComplete { time_s: now, count });
    }

    fn start_stress(
        &mut self,
        now: f64,
        users: u32,
        total: Option<u64>,
        node: Option<NodeId>,
        think: Option<f64>,
        q: &mut EventQueue<Event>,
    ) {
        let target = match node {
            Some(id) => Some(self.index[&id]),
            None => self
                .index
                .values()
                .copied()
                .find(|&i| self.nodes[i].alive && self.nodes[i].host.first_running().is_some()),
        };
        let found = target.and_then(|i| {
            let n = &self.nodes[i];
            n.host.first_running().filter(|_| n.alive).map(|c| (i, c))
        });
        let Some((i, container)) = found else {
            let reason = match node {
                Some(id) => format!("no running container on node {id}"),
                None => "no running container".to_string(),
            };
            self.events.push(LogEvent::StressRejected {
                time_s: now,
                reason,
            });
            return;
        };
        let node_id = self.nodes[i].id();
        let mut spec =
            WorkloadSpec::from_defaults(&self.scenario.workload, users, node_id, container);
        if let Some(t) = total {
            spec.total_requests = t;
        }
        if let Some(t) = think {
            spec.think_time_s = t;
        }
        let workers = spec.server_concurrency;
        let n = &mut self.nodes[i];
        n.cpu.add_server(now, &n.host.node, workers);
        let run = self.runs.len();
        self.runs.push(Run {
            lp: ClosedLoop::new(spec, now),
            node: i,
            util_mark: n.cpu.util_integral(),
            done: false,
        });
        self.reschedule_ps(i, q);
        for user in 0..users {
            q.schedule(now, Event::Send { run, user }).expect("now");
        }
        self.events.push(LogEvent::StressStarted {
            time_s: now,
            node: node_id,
            users,
        });
    }

    fn close_run(&mut self, r: usize, now: f64, aborted: bool, q: &mut EventQueue<Event>) {
        let run = &mut self.runs[r];
        if run.done {
            return;
        }
        run.done = true;
        if aborted {
            run.lp.abort(now);
        }
        let i = run.node;
        let n = &mut self.nodes[i];
        let elapsed = now - run.lp.started_at;
        let mean_util = if elapsed > 0.0 {
            (n.cpu.util_integral() - run.util_mark) / elapsed
        } else {
            0.0
        };
        let summary = StressSummary::from_run(&run.lp, now, mean_util, n.cpu.load.value);
        n.cpu
            .remove_server(now, &n.host.node, run.lp.spec.server_concurrency);
        let (node, users, completed) = (summary.node, summary.users, summary.completed);
        self.stress.push(summary);
        self.events.push(if aborted {
            LogEvent::StressAborted {
                time_s: now,
                node,
                users,
                completed,
            }
        } else {
            LogEvent::StressCompleted {
                time_s: now,
                node,
                users,
                completed,
            }
        });
        if self.nodes[i].alive {
            self.reschedule_ps(i, q);
        }
    }

    /// Takes a node out: killed by the script or out of battery.
    fn node_down(&mut self, i: usize, now: f64, depleted: bool, q: &mut EventQueue<Event>) {
        if !self.nodes[i].alive {
            return;
        }
        let id = self.nodes[i].id();
        for r in 0..self.runs.len() {
            if self.runs[r].node == i && !self.runs[r].done {
                self.close_run(r, now, true, q);
            }
        }
        let n = &mut self.nodes[i];
        n.alive = false;
        n.cpu.ps.clear(now);
        n.cpu.generation += 1;
        n.backlog.clear();
        n.creating = None;
        let stranded: Vec<usize> = self
            .fill_of
            .iter()
            .filter(|((node, _), _)| *node == i)
            .map(|(_, f)| *f)
            .collect();
        self.fill_of.retain(|(node, _), _| *node != i);
        for f in stranded {
            self.end_fill(f, now);
        }
        self.events.push(if depleted {
            LogEvent::NodeDepleted {
                time_s: now,
                node: id,
            }
        } else {
            LogEvent::NodeKilled {
                time_s: now,
                node: id,
            }
        });
        self.request_links(q);
    }

    fn set_mode(
        &mut self,
        i: usize,
        mode: FlightMode,
        now: f64,
        commanded: bool,
        q: &mut EventQueue<Event>,
    ) {
        let n = &mut self.nodes[i];
        if !n.alive || n.host.node.flight_mode == mode {
            return;
        }
        n.host.node.flight_mode = mode;
        n.cpu.refresh_capacity(now, &n.host.node);
        let id = n.id();
        let battery_fraction = n.host.node.battery.fraction();
        self.events.push(match mode {
            FlightMode::Landed => LogEvent::Landed {
                time_s: now,
                node: id,
                battery_fraction,
                commanded,
            },
            _ => LogEvent::TookOff {
                time_s: now,
                node: id,
            },
        });
        self.reschedule_ps(i, q);
        self.request_links(q);
    }

    fn directive(&mut self, d: Directive, now: f64, q: &mut EventQueue<Event>) {
        match d {
            Directive::Deploy { count, node, .. } => {
                for _ in 0..count {
                    self.place(now, node, q);
                }
            }
            Directive::Fill { node, .. } => {
                self.fills.push(Fill {
                    pinned: node,
                    count: 0,
                });
                self.advance_fill(self.fills.len() - 1, now, q);
            }
            Directive::Stress {
                users,
                total_requests,
                node,
                think_time_s,
                ..
            } => self.start_stress(now, users, total_requests, node, think_time_s, q),
            Directive::Kill { node, .. } => {
                let i = self.index[&node];
                self.node_down(i, now, false, q);
            }
            Directive::Takeoff { node, .. } => {
                let i = self.index[&node];
                if self.nodes[i].host.node.flight_mode == FlightMode::Landed {
                    self.set_mode(i, FlightMode::Flying, now, true, q);
                }
            }
            Directive::Land { node, .. } => {
                let i = self.index[&node];
                if self.nodes[i].host.node.flight_mode == FlightMode::Flying {
                    self.set_mode(i, FlightMode::Landed, now, true, q);
                }
            }
            Directive::Move {
                node,
                position,
                orientation_deg,
                ..
            } => {
                let i = self.index[&node];
                let n = &mut self.nodes[i].host.node;
                n.position = position;
                if let Some(o) = orientation_deg {
                    n.orientation_deg = o;
                }
                self.events.push(LogEvent::Moved {
                    time_s: now,
                    node,
                    position,
                });
                self.request_links(q);
            }
        }
    }

    fn battery_tick(&mut self, now: f64, q: &mut EventQueue<Event>) {
        for i in 0..self.nodes.len() {
            if !self.nodes[i].alive {
                continue;
            }
            if self.nodes[i].host.node.battery_tick(BATTERY_TICK_S) {
                self.node_down(i, now, true, q);
                continue;
            }
            let policy = self.scenario.landing;
            if let Ok(mode) = self.nodes[i].host.node.decide_flight_mode(&policy) {
                self.set_mode(i, mode, now, false, q);
            }
        }
    }

    fn sample(&mut self, now: f64) {
        for n in &mut self.nodes {
            if !n.alive {
                continue;
            }
            let id = n.id();
            let (t0, i0) = n.sample_mark;
            let i1 = n.cpu.util_integral();
            if now > t0 {
                self.series
                    .push(now, id, "cpu_utilization", (i1 - i0) / (now - t0));
            }
            n.sample_mark = (now, i1);
            self.series
                .push(now, id, "memory_fraction", n.host.memory_fraction());
            self.series
                .push(now, id, "running_containers", n.host.running_count() as f64);
            self.series
                .push(now, id, "run_queue", n.cpu.ps.len() as f64);
            self.series
                .push(now, id, "load_average_1min", n.cpu.load.value);
            self.series
                .push(now, id, "battery_fraction", n.host.node.battery.fraction());
        }
    }

    fn heartbeat(&mut self, now: f64, q: &mut EventQueue<Event>) {
        // The discovery list lives on the manager nodes; a heartbeat lands if
        // the sender can reach any live one over the mesh.
        let managers: Vec<NodeId> = self
            .swarm
            .primary
            .iter()
            .chain(self.swarm.replicas.iter())
            .copied()
            .filter(|m| self.is_alive(*m))
            .collect();
        let mut backend: BTreeSet<NodeId> = BTreeSet::new();
        for m in managers {
            if !backend.contains(&m) {
                backend.extend(self.links.component(m));
            }
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].alive && backend.contains(&self.nodes[i].id()) {
                let d = self.descriptor(i, now);
                self.swarm.heartbeat(d);
            }
        }
        let primary_seen = self
            .swarm
            .primary
            .and_then(|p| self.swarm.members.get(&p))
            .map(|d| d.last_heartbeat);
        let out = self
            .swarm
            .prune_members(now, self.scenario.swarm.prune_timeout_s());
        for node in out.removed {
            self.events.push(LogEvent::Pruned { time_s: now, node });
        }
        if let Some(node) = out.lost_primary {
            self.election_token += 1;
            let at =
                (primary_seen.unwrap_or(now) + self.scenario.swarm.failover_timeout_s).max(now);
            q.schedule(at, Event::ElectionTimeout(self.election_token))
                .expect("future");
            self.events.push(LogEvent::PrimaryLost {
                time_s: now,
                node,
                election_at: at,
            });
        }
    }

    fn election(&mut self, token: u64, now: f64, q: &mut EventQueue<Event>) {
        if token != self.election_token || self.swarm.primary.is_some() {
            return;
        }
        let live: BTreeSet<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.alive)
            .map(|n| n.id())
            .collect();
        let candidates: Vec<Candidate> = self
            .swarm
            .replicas
            .iter()
            .filter(|r| live.contains(r))
            .filter_map(|r| self.swarm.members.get(r))
            .map(|d| Candidate {
                node: d.node_id,
                available_memory_kb: d.available_memory_kb,
                available_cpu_fraction: d.available_cpu_fraction,
                battery_mah: d.battery_mah,
            })
            .collect();
        match self.swarm.elect_primary(&live) {
            Ok(node) => {
                self.elections.push(ElectionRecord { time_s: now, node });
                self.events.push(LogEvent::Elected {
                    time_s: now,
                    node,
                    epoch: self.swarm.epoch,
                    candidates,
                });
                self.request_links(q);
            }
            Err(_) => self.events.push(LogEvent::ElectionFailed { time_s: now }),
        }
    }

    fn recompute_links(&mut self, now: f64) {
        self.link_pending = false;
        let live: Vec<_> = self
            .nodes
            .iter()
            .filter(|n| n.alive)
            .map(|n| n.host.node.clone())
            .collect();
        self.links = derive_links(&live, &self.scenario.radio);
        let ids: Vec<NodeId> = self.swarm.members.keys().copied().collect();
        for id in ids {
            let r = self.reachable_from_primary(id);
            if let Some(d) = self.swarm.members.get_mut(&id) {
                d.reachable = r;
            }
        }
        let mprs = all_mprs(&self.links);
        let origin = self
            .swarm
            .primary
            .filter(|p| self.is_alive(*p))
            .or_else(|| self.links.nodes().next());
        let (mpr_tx, blind_tx, reached) = match origin {
            Some(o) => {
                let m = flood(o, &self.links, &mprs);
                let b = flood(o, &self.links, &blind_relays(&self.links));
                (m.transmissions, b.transmissions, m.reached.len())
            }
            None => (0, 0, 0),
        };
        self.last_flood = origin.map(|origin| FloodSummary {
            origin,
            mpr_transmissions: mpr_tx,
            blind_transmissions: blind_tx,
            reached,
        });
        self.events.push(LogEvent::Topology(TopologySnapshot {
            time_s: now,
            primary: self.swarm.primary,
            links: self.links.dump(),
            mpr: mprs
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
            flood_origin: origin,
            mpr_transmissions: mpr_tx,
            blind_transmissions: blind_tx,
            reached,
        }));
    }

    fn creation_complete(&mut self, i: usize, id: InstanceId, now: f64, q: &mut EventQueue<Event>) {
        if !self.nodes[i].alive || self.nodes[i].creating != Some(id) {
            return;
        }
        let n = &mut self.nodes[i];
        n.creating = None;
        n.host.mark_running(id).expect("instance is creating");
        let c = n.host.container(id).expect("known instance");
        let record = CreationRecord {
            n: self.creations.len() as u64 + 1,
            start_s: c.created_at,
            duration_s: c.creation_duration,
            mem_fraction: n.host.memory_fraction(),
            cpu_fraction: n.utilization(&self.scenario),
        };
        self.creations.push(record);
        self.start_next_creation(i, now, q);
        if let Some(f) = self.fill_of.remove(&(i, id)) {
            self.fills[f].count += 1;
            self.advance_fill(f, now, q);
        }
    }

    fn finish(mut self, now: f64, events_processed: u64) -> SimReport {
        self.sync_all(now);
        let open: Vec<usize> = (0..self.runs.len())
            .filter(|&r| !self.runs[r].done)
            .collect();
        for r in open {
            let run = &self.runs[r];
            let n = &self.nodes[run.node];
            let elapsed = now - run.lp.started_at;
            let mean_util = if elapsed > 0.0 {
                (n.cpu.util_integral() - run.util_mark) / elapsed
            } else {
                0.0
            };
            self.stress.push(StressSummary::from_run(
                &run.lp,
                now,
                mean_util,
                n.cpu.load.value,
            ));
        }
        let requests = self
            .runs
            .iter()
            .flat_map(|r| {
                let users = r.lp.users();
                r.lp.records.iter().map(move |rec| RequestRow {
                    users,
                    request_id: rec.request_id,
                    arrival_s: rec.arrival,
                    response_ms: rec.response_time_ms(),
                })
            })
            .collect();
        let mut nodes: Vec<NodeSummary> = self
            .nodes
            .iter()
            .map(|n| {
                let id = n.id();
                let role = if self.swarm.primary == Some(id) {
                    Role::Manager
                } else if self.swarm.replicas.contains(&id) {
                    Role::Replica
                } else if n.role == Role::Agent {
                    Role::Agent
                } else {
                    n.role
                };
                NodeSummary {
                    node: id,
                    role,
                    alive: n.alive,
                    flight_mode: n.host.node.flight_mode,
                    initial_mem_fraction: n.initial_mem_fraction,
                    final_mem_fraction: n.host.memory_fraction(),
                    final_free_kb: n.host.available_memory_kb(),
                    live_containers: n.host.live_count(),
                    battery_fraction: n.host.node.battery.fraction(),
                }
            })
            .collect();
        nodes.sort_by_key(|n| n.node);
        let summary = Summary {
            seed: self.scenario.seed,
            events_processed,
            clock_s: now,
            creations: CreationSummary::from_records(&self.creations, self.fill_count),
            nodes,
            stress: self.stress,
            swarm: SwarmSummary {
                primary: self.swarm.primary,
                epoch: self.swarm.epoch,
                discovery_list_version: self.swarm.discovery_list_version,
                placements: self.placements,
                rejections: self.rejections,
                elections: self.elections,
            },
            flooding: self.last_flood,
        };
        SimReport {
            summary,
            series: self.series,
            requests,
            creations: self.creations,
            events: self.events,
        }
    }
}

impl Model for World {
    type Event = Event;

    fn handle(&mut self, event: Event, q: &mut EventQueue<Event>) {
        let now = q.now();
        self.sync_all(now);
        match event {
            Event::Directive(k) => {
                let d = self.scenario.script[k].clone();
                self.directive(d, now, q);
            }
            Event::Tick => {
                self.battery_tick(now, q);
                q.schedule_in(BATTERY_TICK_S, Event::Tick).expect("future");
            }
            Event::Sample => {
                self.sample(now);
                q.schedule_in(self.scenario.metrics.sample_interval_s, Event::Sample)
                    .expect("future");
            }
            Event::Heartbeat => {
                self.heartbeat(now, q);
                q.schedule_in(self.scenario.swarm.heartbeat_interval_s, Event::Heartbeat)
                    .expect("future");
            }
            Event::ElectionTimeout(token) => self.election(token, now, q),
            Event::LinkRecompute => self.recompute_links(now),
            Event::CreationComplete { node, container } => {
                self.creation_complete(node, container, now, q)
            }
            Event::Send { run, user } => {
                let r = &mut self.runs[run];
                if r.done {
                    return;
                }
                if let Some((request, at)) = r.lp.send(user, now, &mut self.wl.rtt) {
                    q.schedule(at, Event::Arrive { run, request })
                        .expect("future");
                }
            }
            Event::Arrive { run, request } => {
                let r = &self.runs[run];
                if r.done || !self.nodes[r.node].alive {
                    return;
                }
                let (i, work) = (r.node, r.lp.spec.service_demand_s);
                self.nodes[i]
                    .cpu
                    .ps
                    .add(now, ((run as u64) << REQUEST_BITS) | request, work);
                self.reschedule_ps(i, q);
            }
            Event::PsDone { node, generation } => {
                if !self.nodes[node].alive || self.nodes[node].cpu.generation != generation {
                    return;
                }
                for key in self.nodes[node].cpu.ps.take_finished(now) {
                    let run = (key >> REQUEST_BITS) as usize;
                    let request = key & ((1 << REQUEST_BITS) - 1);
                    if let Some(at) = self.runs[run].lp.served(request, now) {
                        q.schedule(at, Event::Deliver { run, request })
                            .expect("future");
                    }
                }
                self.reschedule_ps(node, q);
            }
            Event::Deliver { run, request } => {
                if self.runs[run].done {
                    return;
                }
                if let Some((user, at)) =
                    self.runs[run]
                        .lp
                        .delivered(request, now, &mut self.wl.think)
                {
                    q.schedule(at, Event::Send { run, user }).expect("future");
                }
                if self.runs[run].lp.is_complete() {
                    self.close_run(run, now, false, q);
                }
            }
        }
    }
}

/// Runs a scenario to `duration_s` and collects every output.
pub fn simulate(scenario: &Scenario) -> SimReport {
    let world = World::new(scenario);
    let mut engine = SimEngine::new(world);
    let q = &mut engine.queue;
    q.schedule(0.0, Event::LinkRecompute).expect("t=0");
    engine.model.link_pending = true;
    for (k, d) in scenario.script.iter().enumerate() {
        q.schedule(d.at(), Event::Directive(k))
            .expect("validated script");
    }
    q.schedule(BATTERY_TICK_S, Event::Tick).expect("future");
    q.schedule(scenario.metrics.sample_interval_s, Event::Sample)
        .expect("future");
    q.schedule(scenario.swarm.heartbeat_interval_s, Event::Heartbeat)
        .expect("future");
    let stats = engine.run_until(scenario.duration_s);
    engine.model.finish(stats.clock, stats.events_processed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::NodeConfig;

    fn landed(id: u32, role: Role) -> NodeConfig {
        let mut n = NodeConfig::new(id, role);
        n.flight_mode = FlightMode::Landed;
        n
    }

    #[test]
    fn idle_swarm_only_ticks() {
        let mut s = Scenario::new(vec![landed(1, Role::Manager)], vec![]);
        s.duration_s = 10.0;
        let r = simulate(&s);
        assert_eq!(r.summary.clock_s, 10.0);
        assert!(r.creations.is_empty() && r.requests.is_empty());
        assert_eq!(r.summary.swarm.primary, Some(NodeId(1)));
        assert!((r.summary.nodes[0].initial_mem_fraction - 0.0989).abs() < 1e-6);
    }

    #[test]
    fn deploy_then_stress_completes() {
        let script = vec![
            Directive::Deploy {
                at: 0.0,
                count: 3,
                node: None,
            },
            Directive::Stress {
                at: 20.0,
                users: 5,
                total_requests: Some(500),
                node: None,
                think_time_s: None,
            },
        ];
        let mut s = Scenario::new(
            vec![landed(1, Role::Manager), landed(2, Role::Agent)],
            script,
        );
        s.duration_s = 60.0;
        let r = simulate(&s);
        assert_eq!(r.creations.len(), 3);
        assert_eq!(r.summary.swarm.placements, 3);
        let counts: Vec<usize> = r.summary.nodes.iter().map(|n| n.live_containers).collect();
        assert_eq!(counts, vec![2, 1]);
        assert_eq!(r.requests.len(), 500);
        assert_eq!(r.summary.stress[0].completed, 500);
        assert!(r.requests.iter().all(|q| q.response_ms >= 8.0));
    }

    #[test]
    fn killed_manager_is_replaced_by_replica() {
        let mut r1 = landed(2, Role::Replica);
        r1.ram_kb = 2 * 1_048_576;
        let script = vec![Directive::Kill {
            at: 30.0,
            node: NodeId(1),
        }];
        let mut s = Scenario::new(
            vec![landed(1, Role::Manager), r1, landed(3, Role::Replica)],
            script,
        );
        s.duration_s = 60.0;
        let r = simulate(&s);
        assert_eq!(r.summary.swarm.primary, Some(NodeId(2)));
        assert_eq!(r.summary.swarm.elections.len(), 1);
        let t = r.summary.swarm.elections[0].time_s;
        assert!(t > 30.0 && t <= 40.0, "{t}");
    }

    #[test]
    fn no_stress_target_is_logged() {
        let script = vec![Directive::Stress {
            at: 1.0,
            users: 1,
            total_requests: None,
            node: None,
            think_time_s: None,
        }];
        let mut s = Scenario::new(vec![landed(1, Role::Manager)], script);
        s.duration_s = 5.0;
        let r = simulate(&s);
        assert!(r
            .events
            .iter()
            .any(|e| matches!(e, LogEvent::StressRejected { .. })));
        assert!(r.summary.stress.is_empty());
    }
}
