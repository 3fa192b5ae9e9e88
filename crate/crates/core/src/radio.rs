//! Radio mesh between drones.
//!
//! Signal strength follows a two-lobe log-distance model: the lobe facing
//! the WiFi dongle and the rear lobe (within 45 degrees of the direction
//! away from it) each have their own reference RSSI at 10 m and path-loss
//! exponent. A link exists when both directions clear the connect
//! threshold. On top of the link table this module computes OLSR-style
//! one- and two-hop neighbourhoods, greedy multipoint-relay sets and the
//! number of transmissions a flood costs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::node::{NodeId, PiNodeModel};

/// Reference distance for `rssi_at_d0_dbm`.
pub const REFERENCE_DISTANCE_M: f64 = 10.0;

/// Distance floor used when deriving links between co-located nodes.
const MIN_LINK_DISTANCE_M: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadioError {
    #[error("transmitter and receiver are at the same position")]
    ZeroDistance,
    #[error("node {0} is not in the link table")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorParams {
    pub rssi_at_d0_dbm: f64,
    pub path_loss_exponent: f64,
}

impl SectorParams {
    /// Log-distance fit through two (distance, rssi) points, the first at
    /// the reference distance.
    pub fn through(rssi_at_d0_dbm: f64, far_distance_m: f64, far_rssi_dbm: f64) -> Self {
        let decades = (far_distance_m / REFERENCE_DISTANCE_M).log10();
        Self {
            rssi_at_d0_dbm,
            path_loss_exponent: (rssi_at_d0_dbm - far_rssi_dbm) / (10.0 * decades),
        }
    }

    pub fn rssi_at(&self, distance_m: f64) -> f64 {
        self.rssi_at_d0_dbm
            - 10.0 * self.path_loss_exponent * (distance_m / REFERENCE_DISTANCE_M).log10()
    }

    /// Largest distance at which the RSSI still reaches `threshold_dbm`.
    pub fn range_m(&self, threshold_dbm: f64) -> f64 {
        REFERENCE_DISTANCE_M
            * 10f64.powf((self.rssi_at_d0_dbm - threshold_dbm) / (10.0 * self.path_loss_exponent))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sector {
    Front,
    Rear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioModel {
    #[serde(default = "default_front")]
    pub front: SectorParams,
    #[serde(default = "default_rear")]
    pub rear: SectorParams,
    #[serde(default = "default_threshold")]
    pub connect_threshold_dbm: f64,
}

// -65 dBm at 10 m to -78 dBm at 50 m towards the dongle.
fn default_front() -> SectorParams {
    SectorParams::through(-65.0, 50.0, -78.0)
}

// -75 dBm at 10 m to -89 dBm at 50 m away from it.
fn default_rear() -> SectorParams {
    SectorParams::through(-75.0, 50.0, -89.0)
}

fn default_threshold() -> f64 {
    -85.0
}

impl Default for RadioModel {
    fn default() -> Self {
        Self {
            front: default_front(),
            rear: default_rear(),
            connect_threshold_dbm: default_threshold(),
        }
    }
}

fn wrap_degrees(angle: f64) -> f64 {
    let a = angle.rem_euclid(360.0);
    if a > 180.0 {
        a - 360.0
    } else {
        a
    }
}

impl RadioModel {
    pub fn sector(&self, tx: &PiNodeModel, rx_pos: [f64; 3]) -> Sector {
        let east = rx_pos[0] - tx.position[0];
        let north = rx_pos[1] - tx.position[1];
        if east == 0.0 && north == 0.0 {
            return Sector::Front;
        }
        let bearing = east.atan2(north).to_degrees();
        let off_rear = wrap_degrees(bearing - tx.orientation_deg - 180.0);
        if off_rear.abs() <= 45.0 {
            Sector::Rear
        } else {
            Sector::Front
        }
    }

    fn params(&self, sector: Sector) -> &SectorParams {
        match sector {
            Sector::Front => &self.front,
            Sector::Rear => &self.rear,
        }
    }

    pub fn rssi(&self, tx: &PiNodeModel, rx_pos: [f64; 3]) -> Result<f64, RadioError> {
        let d = distance(tx.position, rx_pos);
        if d <= 0.0 {
            return Err(RadioError::ZeroDistance);
        }
        Ok(self.params(self.sector(tx, rx_pos)).rssi_at(d))
    }

    fn link_rssi(&self, tx: &PiNodeModel, rx_pos: [f64; 3]) -> f64 {
        let d = distance(tx.position, rx_pos).max(MIN_LINK_DISTANCE_M);
        self.params(self.sector(tx, rx_pos)).rssi_at(d)
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Symmetric adjacency. Each edge carries the weaker of its two directional RSSIs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkTable {
    adjacency: BTreeMap<NodeId, BTreeMap<NodeId, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub id: NodeId,
    pub rssi_dbm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyEntry {
    pub node: NodeId,
    pub neighbors: Vec<NeighborEntry>,
}

impl LinkTable {
    /// Builds a table from explicit edges; every listed node is present even
    /// when isolated. Self-edges are ignored.
    pub fn from_edges(nodes: impl IntoIterator<Item = NodeId>, edges: &[(NodeId, NodeId)]) -> Self {
        let mut table = LinkTable::default();
        for n in nodes {
            table.adjacency.entry(n).or_default();
        }
        for &(a, b) in edges {
            table.insert(a, b, 0.0);
        }
        table
    }

    fn insert(&mut self, a: NodeId, b: NodeId, rssi: f64) {
        if a == b {
            return;
        }
        self.adjacency.entry(a).or_default().insert(b, rssi);
        self.adjacency.entry(b).or_default().insert(a, rssi);
    }

    pub fn contains(&self, v: NodeId) -> bool {
        self.adjacency.contains_key(&v)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeMap::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, v: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.adjacency
            .get(&v)
            .into_iter()
            .flat_map(|m| m.keys().copied())
    }

    pub fn rssi(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.adjacency.get(&a)?.get(&b).copied()
    }

    pub fn is_linked(&self, a: NodeId, b: NodeId) -> bool {
        self.rssi(a, b).is_some()
    }

    /// Nodes reachable from `from` (inclusive) over the mesh.
    pub fn component(&self, from: NodeId) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::new();
        if !self.contains(from) {
            return seen;
        }
        let mut queue = VecDeque::from([from]);
        seen.insert(from);
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    pub fn dump(&self) -> Vec<AdjacencyEntry> {
        self.adjacency
            .iter()
            .map(|(node, nbrs)| AdjacencyEntry {
                node: *node,
                neighbors: nbrs
                    .iter()
                    .map(|(id, rssi)| NeighborEntry {
                        id: *id,
                        rssi_dbm: *rssi,
                    })
                    .collect(),
            })
            .collect()
    }
}

/// Links between every pair of non-depleted nodes whose RSSI clears the
/// threshold in both directions. Callers exclude failed nodes beforehand.
pub fn derive_links(nodes: &[PiNodeModel], radio: &RadioModel) -> LinkTable {
    let live: Vec<&PiNodeModel> = nodes.iter().filter(|n| !n.is_depleted()).collect();
    let mut table = LinkTable::default();
    for n in &live {
        table.adjacency.entry(n.node_id).or_default();
    }
    for (i, a) in live.iter().enumerate() {
        for b in &live[i + 1..] {
            if a.node_id == b.node_id {
                continue;
            }
            let ab = radio.link_rssi(a, b.position);
            let ba = radio.link_rssi(b, a.position);
            if ab >= radio.connect_threshold_dbm && ba >= radio.connect_threshold_dbm {
                table.insert(a.node_id, b.node_id, ab.min(ba));
            }
        }
    }
    table
}

/// One-hop neighbours and strict two-hop neighbours of `v`.
pub fn neighbor_sets(
    links: &LinkTable,
    v: NodeId,
) -> Result<(BTreeSet<NodeId>, BTreeSet<NodeId>), RadioError> {
    if !links.contains(v) {
        return Err(RadioError::UnknownNode(v));
    }
    let n1: BTreeSet<NodeId> = links.neighbors(v).collect();
    let n2: BTreeSet<NodeId> = n1
        .iter()
        .flat_map(|&u| links.neighbors(u))
        .filter(|w| *w != v && !n1.contains(w))
        .collect();
    Ok((n1, n2))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MprSet {
    pub selector: NodeId,
    pub relays: BTreeSet<NodeId>,
}

/// Greedy relay selection: first every one-hop neighbour that is the only
/// cover of some two-hop node, then repeatedly the neighbour covering the
/// most still-uncovered two-hop nodes (lowest id on ties).
pub fn select_mpr(
    selector: NodeId,
    n1: &BTreeSet<NodeId>,
    n2: &BTreeSet<NodeId>,
    cover: &BTreeMap<NodeId, BTreeSet<NodeId>>,
) -> MprSet {
    let covers = |u: &NodeId| -> BTreeSet<NodeId> {
        cover
            .get(u)
            .map(|s| s.intersection(n2).copied().collect())
            .unwrap_or_default()
    };
    let mut relays = BTreeSet::new();
    let mut uncovered: BTreeSet<NodeId> = n2.clone();

    for w in n2 {
        let mut coverers = n1
            .iter()
            .filter(|u| cover.get(u).is_some_and(|s| s.contains(w)));
        if let (Some(only), None) = (coverers.next(), coverers.next()) {
            relays.insert(*only);
        }
    }
    for r in &relays {
        for w in covers(r) {
            uncovered.remove(&w);
        }
    }

    while !uncovered.is_empty() {
        let best = n1
            .iter()
            .filter(|u| !relays.contains(*u))
            .map(|u| (covers(u).intersection(&uncovered).count(), *u))
            .filter(|(gain, _)| *gain > 0)
            // max gain, then lowest id
            .min_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let Some((_, u)) = best else {
            // Remaining two-hop nodes have no cover; cannot happen when n2
            // was derived from the same table.
            break;
        };
        for w in covers(&u) {
            uncovered.remove(&w);
        }
        relays.insert(u);
    }
    MprSet { selector, relays }
}

/// Two-hop coverage of every one-hop neighbour of `v`.
pub fn coverage(
    links: &LinkTable,
    v: NodeId,
) -> Result<BTreeMap<NodeId, BTreeSet<NodeId>>, RadioError> {
    let (n1, n2) = neighbor_sets(links, v)?;
    Ok(n1
        .iter()
        .map(|&u| (u, links.neighbors(u).filter(|w| n2.contains(w)).collect()))
        .collect())
}

pub fn mpr_for(links: &LinkTable, v: NodeId) -> Result<MprSet, RadioError> {
    let (n1, n2) = neighbor_sets(links, v)?;
    let cover = coverage(links, v)?;
    Ok(select_mpr(v, &n1, &n2, &cover))
}

/// Relay sets for every node in the table.
pub fn all_mprs(links: &LinkTable) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
    links
        .nodes()
        .map(|v| (v, mpr_for(links, v).expect("node from table").relays))
        .collect()
}

/// Relay sets under which every neighbour retransmits (blind flooding).
pub fn blind_relays(links: &LinkTable) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
    links
        .nodes()
        .map(|v| (v, links.neighbors(v).collect()))
        .collect()
}

/// True when every strict two-hop neighbour of the selector is adjacent to a relay.
pub fn is_valid_cover(links: &LinkTable, mpr: &MprSet) -> bool {
    let Ok((n1, n2)) = neighbor_sets(links, mpr.selector) else {
        return false;
    };
    mpr.relays.is_subset(&n1)
        && n2
            .iter()
            .all(|w| mpr.relays.iter().any(|r| links.is_linked(*r, *w)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FloodOutcome {
    pub transmissions: usize,
    pub reached: BTreeSet<NodeId>,
}

/// Floods one message from `origin`. The origin transmits once; any other
/// node retransmits once iff it is a relay of the node it first heard the
/// message from. Receptions are resolved breadth-first, neighbours in id
/// order.
pub fn flood(
    origin: NodeId,
    links: &LinkTable,
    relays: &BTreeMap<NodeId, BTreeSet<NodeId>>,
) -> FloodOutcome {
    let mut reached = BTreeSet::new();
    if !links.contains(origin) {
        return FloodOutcome {
            transmissions: 0,
            reached,
        };
    }
    reached.insert(origin);
    let mut transmitters = VecDeque::from([origin]);
    let mut transmissions = 0;
    while let Some(u) = transmitters.pop_front() {
        transmissions += 1;
        let relays_of_u = relays.get(&u);
        for v in links.neighbors(u) {
            if reached.insert(v) && relays_of_u.is_some_and(|r| r.contains(&v)) {
                transmitters.push_back(v);
            }
        }
    }
    FloodOutcome {
        transmissions,
        reached,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(xs: &[u32]) -> BTreeSet<NodeId> {
        xs.iter().map(|x| NodeId(*x)).collect()
    }

    fn graph(n: u32, edges: &[(u32, u32)]) -> LinkTable {
        let e: Vec<_> = edges
            .iter()
            .map(|(a, b)| (NodeId(*a), NodeId(*b)))
            .collect();
        LinkTable::from_edges((0..n).map(NodeId), &e)
    }

    fn at(id: u32, pos: [f64; 3]) -> PiNodeModel {
        let mut n = PiNodeModel::new(NodeId(id));
        n.position = pos;
        n
    }

    #[test]
    fn front_sector_endpoints() {
        let r = RadioModel::default();
        let tx = at(0, [0.0; 3]);
        assert!((r.rssi(&tx, [0.0, 10.0, 0.0]).unwrap() + 65.0).abs() < 1e-9);
        assert!((r.rssi(&tx, [0.0, 50.0, 0.0]).unwrap() + 78.0).abs() < 1e-9);
        // east and west are in the front lobe too
        assert!((r.rssi(&tx, [50.0, 0.0, 0.0]).unwrap() + 78.0).abs() < 1e-9);
        assert!((r.rssi(&tx, [-10.0, 0.0, 0.0]).unwrap() + 65.0).abs() < 1e-9);
        assert!((r.front.path_loss_exponent - 1.8598).abs() < 1e-4);
    }

    #[test]
    fn rear_sector_endpoints() {
        let r = RadioModel::default();
        let tx = at(0, [0.0; 3]);
        assert!((r.rssi(&tx, [0.0, -10.0, 0.0]).unwrap() + 75.0).abs() < 1e-9);
        assert!((r.rssi(&tx, [0.0, -50.0, 0.0]).unwrap() + 89.0).abs() < 1e-9);
        assert!((r.rear.path_loss_exponent - 2.0029).abs() < 1e-4);
    }

    #[test]
    fn sector_follows_orientation() {
        let r = RadioModel::default();
        let mut tx = at(0, [0.0; 3]);
        tx.orientation_deg = 90.0; // dongle faces east, rear lobe is west
        assert_eq!(r.sector(&tx, [-20.0, 0.0, 0.0]), Sector::Rear);
        assert_eq!(r.sector(&tx, [0.0, -20.0, 0.0]), Sector::Front);
        // exactly 45 degrees off the rear axis is still rear
        tx.orientation_deg = 0.0;
        assert_eq!(r.sector(&tx, [10.0, -10.0, 0.0]), Sector::Rear);
        assert_eq!(r.sector(&tx, [0.0, 0.0, 30.0]), Sector::Front);
    }

    #[test]
    fn zero_distance_is_an_error() {
        let r = RadioModel::default();
        assert_eq!(
            r.rssi(&at(0, [1.0; 3]), [1.0; 3]),
            Err(RadioError::ZeroDistance)
        );
    }

    #[test]
    fn links_by_distance() {
        let r = RadioModel::default();
        // facing each other: both see the other in the front lobe
        let mut a = at(0, [0.0, 0.0, 0.0]);
        let mut b = at(1, [0.0, 10.0, 0.0]);
        b.orientation_deg = 180.0;
        let t = derive_links(&[a.clone(), b.clone()], &r);
        assert!(t.is_linked(NodeId(0), NodeId(1)));
        assert!((t.rssi(NodeId(0), NodeId(1)).unwrap() + 65.0).abs() < 1e-9);
        b.position = [0.0, 200.0, 0.0];
        assert!(!derive_links(&[a.clone(), b.clone()], &r).is_linked(NodeId(0), NodeId(1)));
        // 40 m behind a: its rear lobe reads below -85
        a.orientation_deg = 180.0;
        b.position = [0.0, 40.0, 0.0];
        assert!(!derive_links(&[a, b], &r).is_linked(NodeId(0), NodeId(1)));
    }

    #[test]
    fn single_node_has_no_links() {
        let t = derive_links(&[at(0, [0.0; 3])], &RadioModel::default());
        assert_eq!(t.edge_count(), 0);
        assert_eq!(t.node_count(), 1);
    }

    #[test]
    fn depleted_nodes_are_excluded() {
        let mut b = at(1, [0.0, 10.0, 0.0]);
        b.flight_mode = crate::node::FlightMode::Depleted;
        let t = derive_links(&[at(0, [0.0; 3]), b], &RadioModel::default());
        assert!(!t.contains(NodeId(1)));
    }

    #[test]
    fn neighbor_sets_examples() {
        let path = graph(3, &[(0, 1), (1, 2)]);
        assert_eq!(
            neighbor_sets(&path, NodeId(0)).unwrap(),
            (ids(&[1]), ids(&[2]))
        );

        let k4 = graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        for v in 0..4 {
            assert!(neighbor_sets(&k4, NodeId(v)).unwrap().1.is_empty());
        }

        let star = graph(6, &[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)]);
        assert!(neighbor_sets(&star, NodeId(0)).unwrap().1.is_empty());
        assert_eq!(
            neighbor_sets(&star, NodeId(3)).unwrap().1,
            ids(&[1, 2, 4, 5])
        );

        assert_eq!(
            neighbor_sets(&path, NodeId(9)),
            Err(RadioError::UnknownNode(NodeId(9)))
        );
    }

    #[test]
    fn mpr_examples() {
        let path = graph(3, &[(0, 1), (1, 2)]);
        assert_eq!(mpr_for(&path, NodeId(0)).unwrap().relays, ids(&[1]));
        assert!(mpr_for(&path, NodeId(1)).unwrap().relays.is_empty());
    }

    #[test]
    fn greedy_prefers_max_coverage_then_low_id() {
        // v=0 with neighbours 1,2,3; two-hop 4,5,6.
        // 1 covers {4,5}, 2 covers {5,6}, 3 covers {4,5,6}: 3 alone suffices.
        let g = graph(
            7,
            &[
                (0, 1),
                (0, 2),
                (0, 3),
                (1, 4),
                (1, 5),
                (2, 5),
                (2, 6),
                (3, 4),
                (3, 5),
                (3, 6),
            ],
        );
        assert_eq!(mpr_for(&g, NodeId(0)).unwrap().relays, ids(&[3]));
        // tie between 1 and 2 covering one node each
        let tie = graph(4, &[(0, 1), (0, 2), (1, 3), (2, 3)]);
        assert_eq!(mpr_for(&tie, NodeId(0)).unwrap().relays, ids(&[1]));
    }

    #[test]
    fn flood_counts() {
        let pair = graph(2, &[(0, 1)]);
        let mpr = flood(NodeId(0), &pair, &all_mprs(&pair));
        assert_eq!(mpr.transmissions, 1);
        assert_eq!(
            flood(NodeId(0), &pair, &blind_relays(&pair)).transmissions,
            2
        );

        let star = graph(6, &[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)]);
        let mpr = flood(NodeId(1), &star, &all_mprs(&star));
        let blind = flood(NodeId(1), &star, &blind_relays(&star));
        assert_eq!(mpr.transmissions, 2);
        assert_eq!(blind.transmissions, 6);
        assert_eq!(mpr.reached, blind.reached);
    }

    #[test]
    fn flood_from_unknown_origin_is_empty() {
        let g = graph(2, &[(0, 1)]);
        assert_eq!(flood(NodeId(7), &g, &all_mprs(&g)).transmissions, 0);
    }

    #[test]
    fn flood_on_random_geometric_graph() {
        use crate::rng::RngStream;
        let mut rng = RngStream::new(11, "rgg");
        let nodes: Vec<PiNodeModel> = (0..50)
            .map(|i| {
                let mut n = at(i, [rng.uniform(0.0, 300.0), rng.uniform(0.0, 300.0), 30.0]);
                n.orientation_deg = rng.uniform(0.0, 360.0);
                n
            })
            .collect();
        let links = derive_links(&nodes, &RadioModel::default());
        assert!(links.edge_count() > 0);
        let mprs = all_mprs(&links);
        for v in links.nodes() {
            assert!(is_valid_cover(
                &links,
                &MprSet {
                    selector: v,
                    relays: mprs[&v].clone()
                }
            ));
            let m = flood(v, &links, &mprs);
            let b = flood(v, &links, &blind_relays(&links));
            assert_eq!(m.reached, b.reached);
            assert!(m.transmissions <= b.transmissions);
        }
    }

    proptest::proptest! {
        #[test]
        fn rssi_decreases_with_distance(d1 in 0.5f64..500.0, gap in 0.01f64..500.0, rear in proptest::bool::ANY) {
            let r = RadioModel::default();
            let tx = at(0, [0.0; 3]);
            let dir = if rear { -1.0 } else { 1.0 };
            let near = r.rssi(&tx, [0.0, dir * d1, 0.0]).unwrap();
            let far = r.rssi(&tx, [0.0, dir * (d1 + gap), 0.0]).unwrap();
            proptest::prop_assert!(near > far);
        }

        #[test]
        fn derived_links_are_symmetric(points in proptest::collection::vec((0.0f64..150.0, 0.0f64..150.0, 0.0f64..360.0), 1..12)) {
            let nodes: Vec<PiNodeModel> = points.iter().enumerate().map(|(i, (x, y, o))| {
                let mut n = at(i as u32, [*x, *y, 20.0]);
                n.orientation_deg = *o;
                n
            }).collect();
            let t = derive_links(&nodes, &RadioModel::default());
            for a in t.nodes() {
                proptest::prop_assert!(!t.is_linked(a, a));
                for b in t.neighbors(a) {
                    proptest::prop_assert!(t.is_linked(b, a));
                    proptest::prop_assert_eq!(t.rssi(a, b), t.rssi(b, a));
                }
            }
        }
    }
}
