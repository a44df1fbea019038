//! Table-based routing: up*/down* computation, table diffs, and
//! channel-dependency-graph deadlock analysis.
//!
//! Tables map (node, destination) to an ordered list of output ports; the
//! simulator follows the first entry. Up*/down* orients every link toward the
//! spanning-tree root and only permits routes of up-hops followed by
//! down-hops. Entries are chosen so that the per-node first choices compose
//! into one legal route: a node with an all-down route to the destination
//! always continues down, everyone else climbs. Without that closure rule,
//! locally-shortest choices can splice a down hop before an up hop.

use crate::topology::{NodeId, PortId, Topology};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RoutingError {
    #[error("no route: {0}")]
    NoRoute(String),
    #[error("root {0} is faulted")]
    InvalidRoot(NodeId),
    #[error("incompatible tables: {0}")]
    IncompatibleTables(String),
    #[error("corrupt delta: {0}")]
    CorruptDelta(String),
}

/// Per-node destination -> ordered legal output ports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTable {
    n_nodes: usize,
    pub root: NodeId,
    /// Tree level per node (used by the up*/down* legality predicate);
    /// empty for tables not built from a spanning tree.
    pub levels: Vec<u32>,
    /// entries[node][dst] -> ports; empty means self or unreachable.
    entries: Vec<Vec<Vec<PortId>>>,
}

impl RoutingTable {
    /// Table from explicit per-(node, destination) port lists; used for
    /// hand-built routing functions in experiments and tests.
    pub fn from_entries(entries: Vec<Vec<Vec<PortId>>>) -> RoutingTable {
        let n = entries.len();
        RoutingTable { n_nodes: n, root: 0, levels: Vec::new(), entries }
    }

    pub fn node_count(&self) -> usize {
        self.n_nodes
    }

    pub fn ports(&self, node: NodeId, dst: NodeId) -> &[PortId] {
        &self.entries[node][dst]
    }

    /// Deterministic projection: the first listed port.
    pub fn first_port(&self, node: NodeId, dst: NodeId) -> Option<PortId> {
        self.entries[node][dst].first().copied()
    }

    /// Channel walk the deterministic projection takes from src to dst.
    pub fn route(&self, src: NodeId, dst: NodeId, topo: &Topology) -> Result<Vec<(NodeId, PortId)>, RoutingError> {
        let mut hops = Vec::new();
        let mut at = src;
        while at != dst {
            let port = self
                .first_port(at, dst)
                .ok_or_else(|| RoutingError::NoRoute(format!("{src}->{dst}: no entry at {at}")))?;
            hops.push((at, port));
            at = topo.peer(at, port);
            if hops.len() > self.n_nodes {
                return Err(RoutingError::NoRoute(format!("{src}->{dst}: routing loop")));
            }
        }
        Ok(hops)
    }

    /// Number of channel traversals on the route the table selects.
    pub fn hop_distance(&self, src: NodeId, dst: NodeId, topo: &Topology) -> Result<u32, RoutingError> {
        Ok(self.route(src, dst, topo)?.len() as u32)
    }

    /// Text export, one line per (node, destination, port list).
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        for n in 0..self.n_nodes {
            for d in 0..self.n_nodes {
                if !self.entries[n][d].is_empty() {
                    let ports: Vec<String> =
                        self.entries[n][d].iter().map(|p| p.to_string()).collect();
                    out.push_str(&format!("{n} {d} {}\n", ports.join(",")));
                }
            }
        }
        out
    }
}

/// Channel orientation under a spanning tree: a hop is "up" when it moves
/// toward the root, i.e. to a strictly smaller (level, id) key.
pub fn is_up_hop(table: &RoutingTable, from: NodeId, to: NodeId) -> bool {
    (table.levels[to], to) < (table.levels[from], from)
}

/// Breadth-first up*/down* tables rooted at `root`, over the topology as
/// usable at `at_cycle`. Neighbor expansion is in ascending node-id order;
/// links orient "up" toward the lower tree level, ties broken by lower id.
pub fn compute_up_down(
    topo: &Topology,
    root: NodeId,
    at_cycle: u64,
) -> Result<RoutingTable, RoutingError> {
    let n = topo.node_count();
    if !topo.node_usable(root, at_cycle) {
        return Err(RoutingError::InvalidRoot(root));
    }
    // BFS levels.
    let mut levels = vec![u32::MAX; n];
    levels[root] = 0;
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(x) = queue.pop_front() {
        for (_, peer) in topo.usable_neighbors(x, at_cycle) {
            if levels[peer] == u32::MAX {
                levels[peer] = levels[x] + 1;
                queue.push_back(peer);
            }
        }
    }
    let unreachable: Vec<NodeId> = (0..n)
        .filter(|&x| topo.node_usable(x, at_cycle) && levels[x] == u32::MAX)
        .collect();
    if !unreachable.is_empty() {
        return Err(RoutingError::NoRoute(format!("unreachable nodes: {unreachable:?}")));
    }

    let key = |x: NodeId| (levels[x], x);
    let mut entries = vec![vec![Vec::new(); n]; n];
    let mut usable: Vec<NodeId> = (0..n).filter(|&x| topo.node_usable(x, at_cycle)).collect();
    usable.sort_by_key(|&x| key(x));

    let inf = u32::MAX;
    for &dst in &usable {
        // Down-closure: nodes with an all-down route to dst, found by a
        // reverse BFS over down channels (a hop x->y is down iff key grows).
        let mut down_dist = vec![inf; n];
        down_dist[dst] = 0;
        let mut q = std::collections::VecDeque::from([dst]);
        while let Some(y) = q.pop_front() {
            for (_, x) in topo.usable_neighbors(y, at_cycle) {
                // x -> y must be a down hop.
                if key(y) > key(x) && down_dist[x] == inf {
                    down_dist[x] = down_dist[y] + 1;
                    q.push_back(x);
                }
            }
        }
        // Everyone else either climbs or steps down directly into the
        // closure; nobody routes down into a non-closure node, so the
        // composed first choices stay legal. Up-neighbors have strictly
        // smaller keys, so ascending key order resolves costs in one pass.
        let mut cost = vec![inf; n];
        for &x in &usable {
            cost[x] = down_dist[x];
        }
        for &x in &usable {
            if x == dst || down_dist[x] != inf {
                continue;
            }
            let mut best = inf;
            for (_, p) in topo.usable_neighbors(x, at_cycle) {
                if key(p) < key(x) && cost[p] != inf {
                    best = best.min(cost[p] + 1);
                } else if key(p) > key(x) && down_dist[p] != inf {
                    best = best.min(down_dist[p] + 1);
                }
            }
            cost[x] = best;
            debug_assert!(best != inf, "climb from {x} must reach the root's closure");
        }
        for &x in &usable {
            if x == dst {
                continue;
            }
            let mut candidates: Vec<(u32, NodeId, PortId)> = Vec::new();
            if down_dist[x] != inf {
                // Closure members stay on down hops.
                for (port, p) in topo.usable_neighbors(x, at_cycle) {
                    if key(p) > key(x) && down_dist[p] != inf && down_dist[p] < down_dist[x] {
                        candidates.push((down_dist[p], p, port));
                    }
                }
            } else {
                for (port, p) in topo.usable_neighbors(x, at_cycle) {
                    if key(p) < key(x) && cost[p] != inf {
                        candidates.push((cost[p], p, port));
                    } else if key(p) > key(x) && down_dist[p] != inf {
                        candidates.push((down_dist[p], p, port));
                    }
                }
            }
            candidates.sort();
            entries[x][dst] = candidates.into_iter().map(|(_, _, port)| port).collect();
            debug_assert!(!entries[x][dst].is_empty(), "no entry {x}->{dst}");
        }
    }

    Ok(RoutingTable { n_nodes: n, root, levels, entries })
}

/// Dimension-order routing on a torus, always taking the shorter wrap
/// direction (ties go positive). Destination-consistent and loop-free, but
/// its ring dependencies make the channel-dependency graph cyclic: the
/// canonical deadlock-prone table used to exercise recovery.
pub fn dimension_order_torus(topo: &Topology) -> RoutingTable {
    assert!(topo.kind() == crate::topology::TopologyKind::Torus);
    let (rows, cols) = (topo.rows(), topo.cols());
    let n = topo.node_count();
    let port_toward = |node: NodeId, peer: NodeId| -> PortId {
        topo.ports(node)
            .iter()
            .position(|p| p.peer == peer)
            .expect("torus neighbor")
    };
    let mut entries = vec![vec![Vec::new(); n]; n];
    for src in 0..n {
        let (r0, c0) = (src / cols, src % cols);
        for dst in 0..n {
            if src == dst {
                continue;
            }
            let (r1, c1) = (dst / cols, dst % cols);
            let next = if c0 != c1 {
                // X first: pick shorter wrap direction along the row.
                let fwd = (c1 + cols - c0) % cols;
                let bwd = (c0 + cols - c1) % cols;
                let c = if fwd <= bwd { (c0 + 1) % cols } else { (c0 + cols - 1) % cols };
                r0 * cols + c
            } else {
                let fwd = (r1 + rows - r0) % rows;
                let bwd = (r0 + rows - r1) % rows;
                let r = if fwd <= bwd { (r0 + 1) % rows } else { (r0 + rows - 1) % rows };
                r * cols + c1
            };
            entries[src][dst] = vec![port_toward(src, next)];
        }
    }
    RoutingTable { n_nodes: n, root: 0, levels: Vec::new(), entries }
}

/// Per-entry difference between two tables over the same node set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDelta {
    pub entries: Vec<(NodeId, NodeId, Vec<PortId>)>,
}

impl TableDelta {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries touching one node (what gets shipped to it).
    pub fn for_node(&self, node: NodeId) -> usize {
        self.entries.iter().filter(|(n, _, _)| *n == node).count()
    }
}

pub fn diff_tables(old: &RoutingTable, new: &RoutingTable) -> Result<TableDelta, RoutingError> {
    if old.n_nodes != new.n_nodes {
        return Err(RoutingError::IncompatibleTables(format!(
            "{} vs {} nodes",
            old.n_nodes, new.n_nodes
        )));
    }
    let mut entries = Vec::new();
    for n in 0..old.n_nodes {
        for d in 0..old.n_nodes {
            if old.entries[n][d] != new.entries[n][d] {
                entries.push((n, d, new.entries[n][d].clone()));
            }
        }
    }
    Ok(TableDelta { entries })
}

pub fn apply_delta(old: &RoutingTable, delta: &TableDelta) -> Result<RoutingTable, RoutingError> {
    let mut new = old.clone();
    for (n, d, ports) in &delta.entries {
        if *n >= old.n_nodes || *d >= old.n_nodes {
            return Err(RoutingError::CorruptDelta(format!("entry ({n},{d}) outside table")));
        }
        new.entries[*n][*d] = ports.clone();
    }
    Ok(new)
}

/// Directed channel: output port `port` at `node`.
pub type ChannelId = (NodeId, PortId);

/// Channel-dependency graph over physical channels. Vertices are directed
/// channels; an edge (c1, c2) exists iff some deterministic route holds c1
/// while requesting c2. For a union check the edge sets of all tables merge
/// on the shared channel vertices, which is exactly the old/new coexistence
/// hazard: messages of either epoch hold and request the same physical
/// channels.
#[derive(Debug)]
pub struct DependencyGraph {
    pub channels: Vec<ChannelId>,
    index: std::collections::BTreeMap<ChannelId, usize>,
    pub edges: Vec<Vec<usize>>,
}

impl DependencyGraph {
    pub fn build(tables: &[&RoutingTable], topo: &Topology, at_cycle: u64) -> DependencyGraph {
        let mut channels = Vec::new();
        let mut index = std::collections::BTreeMap::new();
        for n in 0..topo.node_count() {
            for port in 0..topo.port_count(n) {
                if topo.node_usable(n, at_cycle) && topo.port_usable(n, port, at_cycle) {
                    index.insert((n, port), channels.len());
                    channels.push((n, port));
                }
            }
        }
        let mut edge_set = vec![std::collections::BTreeSet::new(); channels.len()];
        for table in tables {
            for src in 0..table.node_count() {
                for dst in 0..table.node_count() {
                    let Ok(route) = table.route(src, dst, topo) else { continue };
                    for w in route.windows(2) {
                        let (a, b) = (index.get(&w[0]), index.get(&w[1]));
                        if let (Some(&a), Some(&b)) = (a, b) {
                            edge_set[a].insert(b);
                        }
                    }
                }
            }
        }
        let edges = edge_set.into_iter().map(|s| s.into_iter().collect()).collect();
        DependencyGraph { channels, index, edges }
    }

    pub fn edge_exists(&self, from: ChannelId, to: ChannelId) -> bool {
        match (self.index.get(&from), self.index.get(&to)) {
            (Some(&a), Some(&b)) => self.edges[a].binary_search(&b).is_ok(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadlockCheck {
    pub deadlock_free: bool,
    /// One dependency cycle as a channel sequence (first == last) when the
    /// graph is cyclic.
    pub witness: Option<Vec<ChannelId>>,
}

/// Deadlock-freedom check by Kahn peeling: repeatedly remove channels with
/// no remaining inbound dependencies; what survives contains a cycle, and a
/// walk through the survivors extracts one as witness.
pub fn check_deadlock_free(tables: &[&RoutingTable], topo: &Topology, at_cycle: u64) -> DeadlockCheck {
    let g = DependencyGraph::build(tables, topo, at_cycle);
    let n = g.channels.len();
    let mut indeg = vec![0usize; n];
    for outs in &g.edges {
        for &b in outs {
            indeg[b] += 1;
        }
    }
    let mut queue: std::collections::VecDeque<usize> =
        (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut removed = vec![false; n];
    let mut removed_count = 0;
    while let Some(v) = queue.pop_front() {
        removed[v] = true;
        removed_count += 1;
        for &b in &g.edges[v] {
            indeg[b] -= 1;
            if indeg[b] == 0 {
                queue.push_back(b);
            }
        }
    }
    if removed_count == n {
        return DeadlockCheck { deadlock_free: true, witness: None };
    }
    // Survivors are the vertices reachable from a cycle; each keeps at least
    // one surviving predecessor, so a backward walk must revisit a vertex.
    let mut preds = vec![Vec::new(); n];
    for v in 0..n {
        if removed[v] {
            continue;
        }
        for &b in &g.edges[v] {
            if !removed[b] {
                preds[b].push(v);
            }
        }
    }
    let start = (0..n).find(|&v| !removed[v]).unwrap();
    let mut seen_at = std::collections::BTreeMap::new();
    let mut path = vec![start];
    seen_at.insert(start, 0usize);
    loop {
        let v = *path.last().unwrap();
        let prev = *preds[v].first().expect("surviving vertex keeps a surviving predecessor");
        if let Some(&i) = seen_at.get(&prev) {
            // path[i..] walked backward from prev; reverse into edge order.
            let mut cycle: Vec<ChannelId> =
                path[i..].iter().rev().map(|&v| g.channels[v]).collect();
            cycle.insert(0, g.channels[prev]);
            return DeadlockCheck { deadlock_free: false, witness: Some(cycle) };
        }
        seen_at.insert(prev, path.len());
        path.push(prev);
    }
}

/// Up*/down* legality: replay a route against link orientations and confirm
/// no down hop is followed by an up hop.
pub fn route_is_up_down_legal(table: &RoutingTable, route: &[(NodeId, PortId)], topo: &Topology) -> bool {
    let mut gone_down = false;
    for &(node, port) in route {
        let next = topo.peer(node, port);
        let up = is_up_hop(table, node, next);
        if up && gone_down {
            return false;
        }
        if !up {
            gone_down = true;
        }
    }
    true
}
