//! Wormhole datapath state: flits, per-VC input FIFOs, output-VC ownership
//! and credits.
//!
//! A message is pipelined as flits over per-hop input buffers. The header
//! allocates one virtual channel per hop; body flits follow that allocation;
//! the tail releases it. A flit advances only against a downstream credit,
//! and at most one flit crosses a physical channel per cycle. Messages
//! shorter than the path's buffering are padded with pad-signal flits so the
//! source can infer header delivery from its own injection count.

use crate::topology::{NodeId, PortId, Topology};
use serde::{Deserialize, Serialize};

/// One transmission attempt of a logical message; the retry count keeps
/// stale flits of torn-down attempts distinguishable from the retransmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttemptId {
    pub src: u16,
    pub seq: u32,
    pub retry: u16,
}

impl AttemptId {
    pub fn logical(&self) -> (u16, u32) {
        (self.src, self.seq)
    }
}

impl std::fmt::Display for AttemptId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}r{}", self.src, self.seq, self.retry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlitKind {
    Header,
    Body,
}

#[derive(Debug, Clone, Copy)]
pub struct Flit {
    pub attempt: AttemptId,
    pub dst: NodeId,
    /// Routing epoch the message was injected under; lookups use this
    /// epoch's tables at every hop.
    pub epoch: u32,
    pub kind: FlitKind,
    /// True on pad flits only; exhibits a single rising edge per message.
    pub pad: bool,
    /// Synthetic end-of-stream marker draining a severed worm (fail-stop
    /// cleanup); acts as a tail, never counts as data.
    pub stream_end: bool,
    pub pos: u32,
    pub data_len: u32,
    pub total_len: u32,
    /// Cycle of the flit's last movement; a flit moves at most once per cycle.
    pub moved_at: u64,
    /// Links traversed so far.
    pub hops: u32,
}

impl Flit {
    pub fn is_tail(&self) -> bool {
        self.stream_end || self.pos + 1 == self.total_len
    }
}

/// Minimum flit injection for the delivery guarantee: the in-network
/// buffering along the path, buffer depth x hop distance.
pub fn compute_fpath(buffer_depth: u32, distance_hops: u32) -> u32 {
    buffer_depth * distance_hops
}

/// Transmitted length of a message under the padding rule.
pub fn padded_len(size_data: u32, fpath: u32) -> u32 {
    size_data.max(fpath)
}

/// Build the i-th flit of a message instance: header first, then data, then
/// pads. `size_data` >= 1 and `i < padded_len(size_data, fpath)`.
pub fn make_flit(
    attempt: AttemptId,
    dst: NodeId,
    epoch: u32,
    size_data: u32,
    total_len: u32,
    i: u32,
    now: u64,
) -> Flit {
    debug_assert!(i < total_len && size_data >= 1);
    Flit {
        attempt,
        dst,
        epoch,
        kind: if i == 0 { FlitKind::Header } else { FlitKind::Body },
        pad: i >= size_data,
        stream_end: false,
        pos: i,
        data_len: size_data,
        total_len,
        moved_at: now,
        hops: 0,
    }
}

/// Input virtual channel: FIFO plus the ownership and route its header
/// established.
#[derive(Debug, Clone, Default)]
pub struct InVc {
    pub fifo: std::collections::VecDeque<Flit>,
    pub owner: Option<AttemptId>,
    /// (output port, output vc) the owning message was allocated.
    pub route: Option<(PortId, usize)>,
    /// Condemned by a teardown in progress; nothing here moves.
    pub frozen: bool,
    /// Synthetic end-of-stream flit waiting for buffer space (the upstream
    /// channel died under the resident worm).
    pub kill_pending: Option<Flit>,
}

/// Output virtual channel: downstream buffer ownership and credit state.
/// Credits freed downstream become visible one cycle later.
#[derive(Debug, Clone, Default)]
pub struct OutVc {
    pub owner: Option<AttemptId>,
    pub credits: u32,
    pub pending_credits: u32,
    pub dead: bool,
}

/// Per-node wormhole state. Data VCs are indexed per (port, vc); ports with
/// collapsed parallel links carry `copies * vcs_per_channel` VCs.
#[derive(Debug, Clone)]
pub struct RouterNode {
    /// in_vcs[port][vc]
    pub in_vcs: Vec<Vec<InVc>>,
    /// out_vcs[port][vc]
    pub out_vcs: Vec<Vec<OutVc>>,
    /// Round-robin arbitration pointer per output port.
    pub rr: Vec<usize>,
    /// Flattened (in_port, in_vc) requester slots, fixed at construction.
    pub slots: Vec<(usize, usize)>,
    /// Flits buffered at this node (plus pending stream-end markers); lets
    /// the router loop skip idle nodes.
    pub buffered: u32,
}

#[derive(Debug)]
pub struct NetState {
    pub nodes: Vec<RouterNode>,
    pub vcs_per_channel: usize,
    pub buffer_depth: u32,
}

impl NetState {
    pub fn new(topo: &Topology) -> NetState {
        let v = topo.vcs_per_channel();
        let nodes = (0..topo.node_count())
            .map(|n| {
                let ports = topo.port_count(n);
                let mut in_vcs = Vec::with_capacity(ports);
                let mut out_vcs = Vec::with_capacity(ports);
                let mut slots = Vec::new();
                for p in 0..ports {
                    let lanes = v * topo.port_copies(n, p);
                    for iv in 0..lanes {
                        slots.push((p, iv));
                    }
                    in_vcs.push(vec![InVc::default(); lanes]);
                    out_vcs.push(
                        (0..lanes)
                            .map(|_| OutVc {
                                owner: None,
                                credits: topo.buffer_depth() as u32,
                                pending_credits: 0,
                                dead: false,
                            })
                            .collect(),
                    );
                }
                RouterNode { in_vcs, out_vcs, rr: vec![0; ports], slots, buffered: 0 }
            })
            .collect();
        NetState { nodes, vcs_per_channel: v, buffer_depth: topo.buffer_depth() as u32 }
    }

    /// Apply pending credit returns; call once at end of cycle.
    pub fn settle_credits(&mut self) {
        for node in &mut self.nodes {
            for port in &mut node.out_vcs {
                for vc in port {
                    vc.credits += vc.pending_credits;
                    vc.pending_credits = 0;
                }
            }
        }
    }

    /// Every buffered flit or VC ownership belonging to `attempt`; the
    /// teardown leak scan expects this to come back empty.
    pub fn scan_attempt(&self, attempt: AttemptId) -> Vec<String> {
        let mut found = Vec::new();
        for (n, node) in self.nodes.iter().enumerate() {
            for (p, vcs) in node.in_vcs.iter().enumerate() {
                for (v, ivc) in vcs.iter().enumerate() {
                    if ivc.owner == Some(attempt) {
                        found.push(format!("in-vc {n}/{p}/{v} owned"));
                    }
                    if ivc.fifo.iter().any(|f| f.attempt == attempt) {
                        found.push(format!("in-vc {n}/{p}/{v} holds flits"));
                    }
                }
            }
            for (p, vcs) in node.out_vcs.iter().enumerate() {
                for (v, ovc) in vcs.iter().enumerate() {
                    if ovc.owner == Some(attempt) {
                        found.push(format!("out-vc {n}/{p}/{v} owned"));
                    }
                }
            }
        }
        found
    }

    /// Credit-conservation audit against a topology snapshot: for every
    /// channel, upstream credits plus downstream occupancy equals depth.
    pub fn audit_credits(&self, topo: &Topology) -> Result<(), String> {
        for n in 0..topo.node_count() {
            for p in 0..topo.port_count(n) {
                let peer = topo.peer(n, p);
                let rp = topo.reverse_port(n, p);
                for v in 0..self.nodes[n].out_vcs[p].len() {
                    let out = &self.nodes[n].out_vcs[p][v];
                    if out.dead {
                        continue;
                    }
                    let occ = self.nodes[peer].in_vcs[rp][v].fifo.len() as u32;
                    let total = out.credits + out.pending_credits + occ;
                    if total != self.buffer_depth {
                        return Err(format!(
                            "channel {n}/{p}/{v}: credits {} + pending {} + occupancy {occ} != depth {}",
                            out.credits, out.pending_credits, self.buffer_depth
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attempt() -> AttemptId {
        AttemptId { src: 3, seq: 7, retry: 0 }
    }

    #[test]
    fn fpath_is_depth_times_distance() {
        assert_eq!(compute_fpath(4, 7), 28);
        assert_eq!(compute_fpath(2, 3), 6);
        // Self-delivery degenerates to zero padding.
        assert_eq!(compute_fpath(4, 0), 0);
    }

    #[test]
    fn padding_rule_examples() {
        assert_eq!(padded_len(16, 8), 16);
        assert_eq!(padded_len(16, 28), 28);
        assert_eq!(padded_len(1, 6), 6);
    }

    #[test]
    fn flit_sequence_has_single_pad_rising_edge() {
        for (size, fpath) in [(16, 8), (16, 28), (1, 6), (4, 12)] {
            let total = padded_len(size, fpath);
            let flits: Vec<Flit> =
                (0..total).map(|i| make_flit(attempt(), 9, 0, size, total, i, 0)).collect();
            assert_eq!(flits.iter().filter(|f| f.kind == FlitKind::Header).count(), 1);
            assert_eq!(flits[0].kind, FlitKind::Header);
            assert!(!flits[0].pad);
            let mut edges = 0;
            for w in flits.windows(2) {
                if !w[0].pad && w[1].pad {
                    edges += 1;
                }
                assert!(!(w[0].pad && !w[1].pad), "pad signal fell mid-message");
            }
            assert_eq!(edges, if total > size { 1 } else { 0 });
            assert_eq!(flits.iter().filter(|f| f.pad).count() as u32, total - size);
            assert!(flits.last().unwrap().is_tail());
        }
    }

    #[test]
    fn fresh_net_passes_credit_audit() {
        let topo = Topology::build_torus(4, 4, 2, 4).unwrap();
        let net = NetState::new(&topo);
        net.audit_credits(&topo).unwrap();
        assert!(net.scan_attempt(attempt()).is_empty());
    }

    #[test]
    fn collapsed_ports_get_doubled_lanes() {
        let topo = Topology::build_torus(2, 2, 2, 4).unwrap();
        let net = NetState::new(&topo);
        assert_eq!(net.nodes[0].in_vcs[0].len(), 4);
        assert_eq!(net.nodes[0].out_vcs[1].len(), 4);
    }
}
