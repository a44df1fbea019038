//! Reconfiguration control plane: heartbeat-based fault detection by a
//! manager node, distance-ordered table distribution, and the per-mechanism
//! transition state (DBR, DS, SR).
//!
//! Control messages are source-routed by their sender over its current view
//! of the topology and travel on a dedicated control channel with strict
//! priority over data. Table distribution is ack-clocked: the manager sends
//! the next update only after the previous target acknowledged, so the
//! distribution dominates reconfiguration time and is independent of the
//! data traffic rate.

use crate::routing::TableDelta;
use crate::topology::{NodeId, PortId, Topology};

/// Delta entries that fit one 128-bit control flit.
pub const DELTA_ENTRIES_PER_FLIT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum ControlKind {
    Heartbeat { round: u64, probe: bool },
    /// Solicited status: per-port link usability as locally observed, plus
    /// an optional acknowledgment of a received table update.
    StatusReply { round: u64, link_status: Vec<(PortId, bool)>, ack_epoch: Option<u32> },
    TableUpdate { epoch: u32 },
    /// DS phase control: confine allocation to the outgoing layer so the
    /// fresh layer drains before the new tables arrive.
    DsPrepare { epoch: u32 },
    DsDrainDone { epoch: u32 },
    /// DS phase control: the old layer has emptied; resume normal operation.
    DsRestore { epoch: u32 },
    SrToken { epoch: u32 },
}

impl ControlKind {
    pub fn label(&self) -> &'static str {
        match self {
            ControlKind::Heartbeat { .. } => "heartbeat",
            ControlKind::StatusReply { .. } => "status_reply",
            ControlKind::TableUpdate { .. } => "table_update",
            ControlKind::DsPrepare { .. } => "ds_prepare",
            ControlKind::DsDrainDone { .. } => "ds_drain_done",
            ControlKind::DsRestore { .. } => "ds_restore",
            ControlKind::SrToken { .. } => "sr_token",
        }
    }
}

/// A control message in flight along a fixed source route. It occupies its
/// current link for `size_flits` cycles, then hops.
#[derive(Debug, Clone)]
pub struct ControlMsg {
    pub kind: ControlKind,
    pub src: NodeId,
    pub dst: NodeId,
    pub path: Vec<NodeId>,
    /// Index into `path` of the node currently holding the message.
    pub hop: usize,
    pub size_flits: u32,
    pub flits_left: u32,
    pub arrived_at: u64,
}

/// The manager's view of the topology: what it believes usable. Updated
/// only by detection, never by peeking at ground truth.
#[derive(Debug, Clone)]
pub struct TopoView {
    pub node_ok: Vec<bool>,
    /// link_ok[node][port]
    pub link_ok: Vec<Vec<bool>>,
}

impl TopoView {
    pub fn full(topo: &Topology) -> TopoView {
        TopoView {
            node_ok: vec![true; topo.node_count()],
            link_ok: (0..topo.node_count()).map(|n| vec![true; topo.port_count(n)]).collect(),
        }
    }

    pub fn mark_node_dead(&mut self, node: NodeId) {
        self.node_ok[node] = false;
    }

    pub fn mark_link_dead(&mut self, topo: &Topology, node: NodeId, port: PortId) {
        self.link_ok[node][port] = false;
        let peer = topo.peer(node, port);
        let rp = topo.reverse_port(node, port);
        self.link_ok[peer][rp] = false;
    }

    pub fn usable(&self, node: NodeId) -> bool {
        self.node_ok[node]
    }

    /// Shortest path under this view avoiding `avoid` nodes; BFS with
    /// ascending-id tie-break. Returns the node sequence src..=dst.
    pub fn route(
        &self,
        topo: &Topology,
        src: NodeId,
        dst: NodeId,
        avoid: &[NodeId],
    ) -> Option<Vec<NodeId>> {
        if src == dst {
            return Some(vec![src]);
        }
        let n = topo.node_count();
        let blocked = |x: NodeId| !self.node_ok[x] || avoid.contains(&x);
        if blocked(src) || blocked(dst) {
            return None;
        }
        let mut prev = vec![usize::MAX; n];
        prev[src] = src;
        let mut q = std::collections::VecDeque::from([src]);
        while let Some(x) = q.pop_front() {
            if x == dst {
                break;
            }
            for (p, peer) in topo.ports(x).iter().enumerate().map(|(p, q)| (p, q.peer)) {
                if !self.link_ok[x][p] || blocked(peer) || prev[peer] != usize::MAX {
                    continue;
                }
                prev[peer] = x;
                q.push_back(peer);
            }
        }
        if prev[dst] == usize::MAX {
            return None;
        }
        let mut path = vec![dst];
        let mut at = dst;
        while at != src {
            at = prev[at];
            path.push(at);
        }
        path.reverse();
        Some(path)
    }

    /// BFS hop distances from a set of start nodes over this view,
    /// including the starts' own former neighbors (used for the
    /// distance-from-fault update ordering).
    pub fn distances_from(&self, topo: &Topology, starts: &[NodeId]) -> Vec<u64> {
        let n = topo.node_count();
        let mut dist = vec![u64::MAX; n];
        let mut q = std::collections::VecDeque::new();
        for &s in starts {
            dist[s] = 0;
            q.push_back(s);
        }
        while let Some(x) = q.pop_front() {
            for port in 0..topo.port_count(x) {
                let peer = topo.peer(x, port);
                if dist[peer] == u64::MAX {
                    dist[peer] = dist[x] + 1;
                    q.push_back(peer);
                }
            }
        }
        dist
    }
}

/// Size of a table-update control message: delta entries packed into flits,
/// capped at the full-table size.
pub fn update_size_flits(delta: &TableDelta, target: NodeId, n_nodes: usize) -> u32 {
    let entries = delta.for_node(target).min(n_nodes - 1);
    (entries.div_ceil(DELTA_ENTRIES_PER_FLIT)).max(1) as u32
}

/// Heartbeat round bookkeeping at the manager.
#[derive(Debug, Clone)]
pub struct PollRound {
    pub round: u64,
    pub issued_at: u64,
    pub deadline: u64,
    pub pending: std::collections::BTreeSet<NodeId>,
    pub probe: bool,
    /// Suspects probed in this round; when a probe round ends with no
    /// fewer pending than probed, the remainder is declared dead.
    pub probe_population: usize,
}

#[derive(Debug)]
pub struct ManagerState {
    pub node: NodeId,
    pub view: TopoView,
    pub round_counter: u64,
    pub current_round: Option<PollRound>,
    /// Per-node cycle of last heartbeat delivery (for failover).
    pub last_heartbeat_seen: Vec<u64>,
}

impl ManagerState {
    pub fn new(topo: &Topology, manager: NodeId) -> ManagerState {
        ManagerState {
            node: manager,
            view: TopoView::full(topo),
            round_counter: 0,
            current_round: None,
            last_heartbeat_seen: vec![0; topo.node_count()],
        }
    }
}

/// Ack-clocked sequential distribution of one new table epoch.
#[derive(Debug)]
pub struct Distribution {
    pub epoch: u32,
    /// Targets sorted by (hop distance from the failed element, node id).
    pub order: Vec<NodeId>,
    pub next: usize,
    pub awaiting_ack: Option<NodeId>,
    pub awaiting_since: u64,
    pub resend_count: u32,
    pub delta: TableDelta,
    pub started_at: u64,
    pub finished_at: Option<u64>,
}

/// SR transition: per-port tokens separate old-epoch from new-epoch traffic.
#[derive(Debug)]
pub struct SrTransition {
    pub epoch: u32,
    /// out_passed[node][port]: the token has advanced through this output.
    pub out_passed: Vec<Vec<bool>>,
    /// in_token[node][port]: the upstream token flit arrived over this input.
    pub in_token: Vec<Vec<bool>>,
    /// feeds[node][out_port]: bitmask of input ports that can feed this
    /// output under the old routing function.
    pub feeds: Vec<Vec<u64>>,
    pub tokens_sent: u64,
    pub complete: bool,
}

impl SrTransition {
    /// Input->output dependencies of the old routing function, plus
    /// injection (which is gated by the node's own swap).
    pub fn feeds_of(table: &crate::routing::RoutingTable, topo: &Topology) -> Vec<Vec<u64>> {
        let n = topo.node_count();
        let mut feeds = (0..n).map(|x| vec![0u64; topo.port_count(x)]).collect::<Vec<_>>();
        for src in 0..n {
            for dst in 0..n {
                let Ok(route) = table.route(src, dst, topo) else { continue };
                for w in route.windows(2) {
                    let (_, p0) = w[0];
                    let (n1, p1) = w[1];
                    let in_port = topo.reverse_port(w[0].0, p0);
                    feeds[n1][p1] |= 1 << in_port;
                }
            }
        }
        feeds
    }
}

/// DS transition. Both VC layers serve traffic in normal operation; a
/// reconfiguration first confines everything to the outgoing layer so the
/// fresh layer drains, then distributes tables (new-epoch traffic takes the
/// fresh layer), and restores both layers once the old one has emptied.
#[derive(Debug)]
pub struct DsTransition {
    pub epoch: u32,
    /// Prepare deliveries still outstanding.
    pub prepare_pending: std::collections::BTreeSet<NodeId>,
    /// Cycle the fresh layer became empty (table distribution may begin).
    pub fresh_drained_at: Option<u64>,
    /// Cycle all old-epoch injection finished (old-layer drain
    /// monotonicity is asserted from here).
    pub drain_start: Option<u64>,
    pub last_occupancy: u64,
    pub drained_at: Option<u64>,
    pub drain_done_sent: Vec<bool>,
    pub drain_done_seen: u64,
    pub restore_pending: Option<std::collections::BTreeSet<NodeId>>,
    pub last_restore_at: u64,
}

/// Which half of the data VCs an epoch's messages use during a DS
/// transition: layers alternate with the epoch parity.
pub fn ds_layer(epoch: u32) -> u32 {
    epoch % 2
}

/// Per-node DS allocation mode, switched by the phase control messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsMode {
    /// Both layers usable.
    Unrestricted,
    /// Everything allocates on the outgoing epoch's layer (fresh layer
    /// draining); value is the incoming epoch.
    Restricted(u32),
    /// Old-epoch traffic on the old layer, new-epoch on the fresh layer.
    Split(u32),
}

/// VC indices of a layer within one port's lanes. With the collapsed-copy
/// layout the split applies per copy.
pub fn vc_in_layer(vc: usize, vcs_per_channel: usize, layer: u32) -> bool {
    let half = vcs_per_channel / 2;
    let local = vc % vcs_per_channel;
    if layer == 0 {
        local < half
    } else {
        local >= half
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::compute_up_down;

    #[test]
    fn view_routes_avoid_marked_nodes() {
        let topo = Topology::build_torus(4, 4, 1, 1).unwrap();
        let mut view = TopoView::full(&topo);
        let direct = view.route(&topo, 0, 2, &[]).unwrap();
        assert_eq!(direct.len(), 3);
        view.mark_node_dead(1);
        let around = view.route(&topo, 0, 2, &[]).unwrap();
        assert!(!around.contains(&1));
        assert_eq!(around.first(), Some(&0));
        assert_eq!(around.last(), Some(&2));
    }

    #[test]
    fn view_route_respects_avoid_list() {
        let topo = Topology::build_mesh(1, 4, 1, 1).unwrap();
        let view = TopoView::full(&topo);
        assert!(view.route(&topo, 0, 3, &[2]).is_none());
    }

    #[test]
    fn update_size_uses_deltas_when_smaller() {
        let d = TableDelta { entries: (0..10).map(|i| (3, i, vec![0])).collect() };
        assert_eq!(update_size_flits(&d, 3, 64), 2);
        assert_eq!(update_size_flits(&d, 5, 64), 1);
        // A delta touching everything is capped at the full table size.
        let full = TableDelta { entries: (0..63).map(|i| (3, i, vec![0])).collect() };
        assert_eq!(update_size_flits(&full, 3, 64), 8);
    }

    #[test]
    fn ds_layers_partition_vcs() {
        for vc in 0..4 {
            assert_ne!(vc_in_layer(vc, 4, 0), vc_in_layer(vc, 4, 1));
        }
        assert!(vc_in_layer(0, 2, 0));
        assert!(vc_in_layer(1, 2, 1));
        // Collapsed ports repeat the split per copy.
        assert!(vc_in_layer(2, 2, 0));
        assert!(vc_in_layer(3, 2, 1));
    }

    #[test]
    fn feeds_follow_old_function_dependencies() {
        let topo = Topology::build_mesh(1, 3, 1, 1).unwrap();
        let table = compute_up_down(&topo, 0, 0).unwrap();
        let feeds = SrTransition::feeds_of(&table, &topo);
        // Traffic 0->2 enters node 1 from node 0 and leaves toward node 2.
        let in_from_0 = topo.reverse_port(0, table.first_port(0, 2).unwrap());
        let out_to_2 = table.first_port(1, 2).unwrap();
        assert!(feeds[1][out_to_2] & (1 << in_from_0) != 0);
    }
}
