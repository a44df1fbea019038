//! Mesh/torus graph construction, scheduled fail-stop faults, and
//! connectivity queries.
//!
//! Node identifiers are row-major integers. Links are undirected and carry a
//! copy count: a 2-wide torus dimension produces two parallel links between
//! the same node pair, which are collapsed into one port with doubled channel
//! multiplicity so routing tables stay port-indexed. Each copy remains
//! individually faultable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;
pub type PortId = usize;

pub const MAX_LINK_COPIES: usize = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("invalid dimension: {0}x{1} (both sides must be at least 2 for a torus)")]
    InvalidDimension(usize, usize),
    #[error("element not found: {0}")]
    NotFound(String),
    #[error("element already faulted: {0}")]
    AlreadyFaulted(String),
}

/// A network element that can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Element {
    Node(NodeId),
    /// Undirected link between two nodes; `copy` selects one parallel copy
    /// (always 0 except on collapsed 2-wide torus dimensions).
    Link {
        a: NodeId,
        b: NodeId,
        #[serde(default)]
        copy: usize,
    },
}

impl std::fmt::Display for Element {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Element::Node(n) => write!(f, "node {n}"),
            Element::Link { a, b, copy } => write!(f, "link {a}-{b}/{copy}"),
        }
    }
}

/// Fail-stop fault scheduled at a simulation cycle. The element carries no
/// flit at any cycle >= `cycle`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub element: Element,
    pub cycle: u64,
}

#[derive(Debug, Clone)]
struct Link {
    a: NodeId,
    b: NodeId,
    copies: usize,
    fault_cycle: [Option<u64>; MAX_LINK_COPIES],
}

/// Output port of a node: one entry per distinct neighbor.
#[derive(Debug, Clone, Copy)]
pub struct Port {
    pub peer: NodeId,
    link: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopologyKind {
    Torus,
    Mesh,
    Custom,
}

#[derive(Debug, Clone)]
pub struct Topology {
    kind: TopologyKind,
    rows: usize,
    cols: usize,
    n_nodes: usize,
    links: Vec<Link>,
    /// Per node, sorted by peer id.
    ports: Vec<Vec<Port>>,
    node_fault: Vec<Option<u64>>,
    vcs_per_channel: usize,
    buffer_depth: usize,
}

impl Topology {
    /// Torus with wraparound links. A side of exactly 2 collapses the two
    /// parallel wrap links into one port of multiplicity 2.
    pub fn build_torus(
        rows: usize,
        cols: usize,
        vcs: usize,
        depth: usize,
    ) -> Result<Topology, TopologyError> {
        if rows < 2 || cols < 2 {
            return Err(TopologyError::InvalidDimension(rows, cols));
        }
        assert!(vcs >= 1 && depth >= 1);
        let n = rows * cols;
        let mut pairs: Vec<(NodeId, NodeId)> = Vec::with_capacity(2 * n);
        for r in 0..rows {
            for c in 0..cols {
                let id = r * cols + c;
                pairs.push((id, r * cols + (c + 1) % cols));
                pairs.push((id, ((r + 1) % rows) * cols + c));
            }
        }
        Ok(Self::from_pairs(TopologyKind::Torus, rows, cols, n, &pairs, vcs, depth))
    }

    /// Mesh without wraparound; border nodes have reduced degree. A 1-wide
    /// mesh is a path, handy for small routing tests.
    pub fn build_mesh(
        rows: usize,
        cols: usize,
        vcs: usize,
        depth: usize,
    ) -> Result<Topology, TopologyError> {
        if rows < 1 || cols < 1 || rows * cols < 2 {
            return Err(TopologyError::InvalidDimension(rows, cols));
        }
        assert!(vcs >= 1 && depth >= 1);
        let n = rows * cols;
        let mut pairs = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let id = r * cols + c;
                if c + 1 < cols {
                    pairs.push((id, id + 1));
                }
                if r + 1 < rows {
                    pairs.push((id, id + cols));
                }
            }
        }
        Ok(Self::from_pairs(TopologyKind::Mesh, rows, cols, n, &pairs, vcs, depth))
    }

    /// Arbitrary undirected link list; used by tests for rings and
    /// hand-built graphs. Duplicate pairs collapse into link copies.
    pub fn from_links(
        n_nodes: usize,
        pairs: &[(NodeId, NodeId)],
        vcs: usize,
        depth: usize,
    ) -> Topology {
        Self::from_pairs(TopologyKind::Custom, 1, n_nodes, n_nodes, pairs, vcs, depth)
    }

    fn from_pairs(
        kind: TopologyKind,
        rows: usize,
        cols: usize,
        n_nodes: usize,
        pairs: &[(NodeId, NodeId)],
        vcs: usize,
        depth: usize,
    ) -> Topology {
        let mut links: Vec<Link> = Vec::new();
        for &(x, y) in pairs {
            assert!(x < n_nodes && y < n_nodes && x != y, "bad link {x}-{y}");
            let (a, b) = (x.min(y), x.max(y));
            match links.iter_mut().find(|l| l.a == a && l.b == b) {
                Some(l) => {
                    assert!(l.copies < MAX_LINK_COPIES, "more than {MAX_LINK_COPIES} parallel links");
                    l.copies += 1;
                }
                None => links.push(Link { a, b, copies: 1, fault_cycle: [None; MAX_LINK_COPIES] }),
            }
        }
        let mut ports: Vec<Vec<Port>> = vec![Vec::new(); n_nodes];
        for (i, l) in links.iter().enumerate() {
            ports[l.a].push(Port { peer: l.b, link: i });
            ports[l.b].push(Port { peer: l.a, link: i });
        }
        for p in &mut ports {
            p.sort_by_key(|q| q.peer);
        }
        Topology {
            kind,
            rows,
            cols,
            n_nodes,
            links,
            ports,
            node_fault: vec![None; n_nodes],
            vcs_per_channel: vcs,
            buffer_depth: depth,
        }
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn node_count(&self) -> usize {
        self.n_nodes
    }

    /// Total link units, counting parallel copies individually.
    pub fn link_units(&self) -> usize {
        self.links.iter().map(|l| l.copies).sum()
    }

    pub fn vcs_per_channel(&self) -> usize {
        self.vcs_per_channel
    }

    pub fn buffer_depth(&self) -> usize {
        self.buffer_depth
    }

    pub fn ports(&self, node: NodeId) -> &[Port] {
        &self.ports[node]
    }

    pub fn port_count(&self, node: NodeId) -> usize {
        self.ports[node].len()
    }

    pub fn peer(&self, node: NodeId, port: PortId) -> NodeId {
        self.ports[node][port].peer
    }

    /// Copy count of the link behind a port (1 or 2).
    pub fn port_copies(&self, node: NodeId, port: PortId) -> usize {
        self.links[self.ports[node][port].link].copies
    }

    /// Port index at the peer that points back over the same link.
    pub fn reverse_port(&self, node: NodeId, port: PortId) -> PortId {
        let p = self.ports[node][port];
        self.ports[p.peer]
            .iter()
            .position(|q| q.link == p.link)
            .expect("link is bidirectional")
    }

    pub fn node_usable(&self, node: NodeId, at_cycle: u64) -> bool {
        match self.node_fault[node] {
            Some(f) => at_cycle < f,
            None => true,
        }
    }

    /// A link copy is usable only if the copy itself and both endpoints are.
    pub fn link_copy_usable(&self, node: NodeId, port: PortId, copy: usize, at_cycle: u64) -> bool {
        let l = &self.links[self.ports[node][port].link];
        copy < l.copies
            && match l.fault_cycle[copy] {
                Some(f) => at_cycle < f,
                None => true,
            }
            && self.node_usable(l.a, at_cycle)
            && self.node_usable(l.b, at_cycle)
    }

    /// Number of usable copies behind a port.
    pub fn port_usable_copies(&self, node: NodeId, port: PortId, at_cycle: u64) -> usize {
        (0..MAX_LINK_COPIES)
            .filter(|&c| self.link_copy_usable(node, port, c, at_cycle))
            .count()
    }

    pub fn port_usable(&self, node: NodeId, port: PortId, at_cycle: u64) -> bool {
        self.port_usable_copies(node, port, at_cycle) > 0
    }

    pub fn usable_nodes(&self, at_cycle: u64) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.n_nodes).filter(move |&n| self.node_usable(n, at_cycle))
    }

    pub fn usable_node_count(&self, at_cycle: u64) -> usize {
        self.usable_nodes(at_cycle).count()
    }

    pub fn usable_link_units(&self, at_cycle: u64) -> usize {
        self.links
            .iter()
            .map(|l| {
                if !self.node_usable(l.a, at_cycle) || !self.node_usable(l.b, at_cycle) {
                    return 0;
                }
                (0..l.copies)
                    .filter(|&c| match l.fault_cycle[c] {
                        Some(f) => at_cycle < f,
                        None => true,
                    })
                    .count()
            })
            .sum()
    }

    /// Usable neighbor nodes in ascending id order (the port list is sorted).
    pub fn usable_neighbors<'a>(
        &'a self,
        node: NodeId,
        at_cycle: u64,
    ) -> impl Iterator<Item = (PortId, NodeId)> + 'a {
        self.ports[node]
            .iter()
            .enumerate()
            .filter(move |(p, _)| self.port_usable(node, *p, at_cycle))
            .map(|(p, q)| (p, q.peer))
    }

    pub fn apply_fault(&mut self, f: FaultEvent) -> Result<(), TopologyError> {
        match f.element {
            Element::Node(n) => {
                if n >= self.n_nodes {
                    return Err(TopologyError::NotFound(f.element.to_string()));
                }
                if self.node_fault[n].is_some() {
                    return Err(TopologyError::AlreadyFaulted(f.element.to_string()));
                }
                self.node_fault[n] = Some(f.cycle);
                Ok(())
            }
            Element::Link { a, b, copy } => {
                let (a, b) = (a.min(b), a.max(b));
                let link = self
                    .links
                    .iter_mut()
                    .find(|l| l.a == a && l.b == b && copy < l.copies)
                    .ok_or_else(|| TopologyError::NotFound(f.element.to_string()))?;
                if link.fault_cycle[copy].is_some() {
                    return Err(TopologyError::AlreadyFaulted(f.element.to_string()));
                }
                link.fault_cycle[copy] = Some(f.cycle);
                Ok(())
            }
        }
    }

    /// True iff all non-faulted nodes are mutually reachable over usable
    /// links at the given cycle.
    pub fn is_connected(&self, at_cycle: u64) -> bool {
        let mut start = None;
        for n in 0..self.n_nodes {
            if self.node_usable(n, at_cycle) {
                start = Some(n);
                break;
            }
        }
        let Some(start) = start else { return true };
        let mut seen = vec![false; self.n_nodes];
        let mut queue = std::collections::VecDeque::new();
        seen[start] = true;
        queue.push_back(start);
        let mut reached = 1;
        while let Some(n) = queue.pop_front() {
            for (_, peer) in self.usable_neighbors(n, at_cycle) {
                if !seen[peer] {
                    seen[peer] = true;
                    reached += 1;
                    queue.push_back(peer);
                }
            }
        }
        reached == self.usable_node_count(at_cycle)
    }

    /// Structural copy with all fault state cleared; the reconfiguration
    /// manager paints its own view of the failures onto it.
    pub fn pristine(&self) -> Topology {
        let mut t = self.clone();
        for l in &mut t.links {
            l.fault_cycle = [None; MAX_LINK_COPIES];
        }
        for f in &mut t.node_fault {
            *f = None;
        }
        t
    }

    /// Edge-list text export: one `nodeA nodeB` pair per line (copies emit
    /// one line each), `#`-prefixed comments.
    pub fn export_edge_list(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# {:?} {}x{}: {} nodes, {} link units\n",
            self.kind,
            self.rows,
            self.cols,
            self.n_nodes,
            self.link_units()
        ));
        for l in &self.links {
            for _ in 0..l.copies {
                out.push_str(&format!("{} {}\n", l.a, l.b));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torus_8x8_counts() {
        let t = Topology::build_torus(8, 8, 2, 4).unwrap();
        assert_eq!(t.node_count(), 64);
        assert_eq!(t.link_units(), 128);
        for n in 0..64 {
            assert_eq!(t.port_count(n), 4);
        }
    }

    #[test]
    fn torus_7x7_counts() {
        let t = Topology::build_torus(7, 7, 2, 4).unwrap();
        assert_eq!(t.node_count(), 49);
        assert_eq!(t.link_units(), 98);
    }

    #[test]
    fn torus_2x2_collapses_parallel_links() {
        let t = Topology::build_torus(2, 2, 1, 1).unwrap();
        assert_eq!(t.node_count(), 4);
        assert_eq!(t.link_units(), 8);
        // Two distinct neighbors, each behind a port of multiplicity 2.
        for n in 0..4 {
            assert_eq!(t.port_count(n), 2);
            for p in 0..2 {
                assert_eq!(t.port_copies(n, p), 2);
            }
        }
    }

    #[test]
    fn torus_rejects_small_dimensions() {
        assert_eq!(
            Topology::build_torus(1, 8, 2, 4).unwrap_err(),
            TopologyError::InvalidDimension(1, 8)
        );
    }

    #[test]
    fn degree_is_4_for_square_tori() {
        for k in 3..=6 {
            let t = Topology::build_torus(k, k, 1, 1).unwrap();
            for n in 0..t.node_count() {
                let mut peers: Vec<_> = t.ports(n).iter().map(|p| p.peer).collect();
                peers.dedup();
                assert_eq!(peers.len(), 4, "node {n} of {k}x{k}");
            }
        }
    }

    #[test]
    fn node_fault_removes_incident_links() {
        let mut t = Topology::build_torus(8, 8, 2, 4).unwrap();
        t.apply_fault(FaultEvent { element: Element::Node(27), cycle: 5000 }).unwrap();
        // Before the fault cycle nothing changes.
        assert_eq!(t.usable_node_count(4999), 64);
        assert_eq!(t.usable_link_units(4999), 128);
        assert_eq!(t.usable_node_count(5000), 63);
        // The node's 4 incident links go down with it, each counted once.
        assert_eq!(t.usable_link_units(5000), 124);
        assert!(t.is_connected(5000));
    }

    #[test]
    fn link_fault_in_2x2_keeps_connectivity() {
        let mut t = Topology::build_torus(2, 2, 1, 1).unwrap();
        t.apply_fault(FaultEvent { element: Element::Link { a: 0, b: 1, copy: 0 }, cycle: 0 })
            .unwrap();
        assert!(t.is_connected(0));
    }

    #[test]
    fn isolating_a_node_disconnects() {
        let mut t = Topology::build_torus(2, 2, 1, 1).unwrap();
        for (a, b, copy) in [(0, 1, 0), (0, 1, 1), (0, 2, 0)] {
            t.apply_fault(FaultEvent { element: Element::Link { a, b, copy }, cycle: 0 }).unwrap();
            assert!(t.is_connected(0), "still connected after {a}-{b}/{copy}");
        }
        t.apply_fault(FaultEvent { element: Element::Link { a: 0, b: 2, copy: 1 }, cycle: 0 })
            .unwrap();
        assert!(!t.is_connected(0));
    }

    #[test]
    fn fault_errors() {
        let mut t = Topology::build_torus(4, 4, 1, 1).unwrap();
        assert!(matches!(
            t.apply_fault(FaultEvent { element: Element::Node(99), cycle: 0 }),
            Err(TopologyError::NotFound(_))
        ));
        assert!(matches!(
            t.apply_fault(FaultEvent { element: Element::Link { a: 0, b: 5, copy: 0 }, cycle: 0 }),
            Err(TopologyError::NotFound(_))
        ));
        t.apply_fault(FaultEvent { element: Element::Node(3), cycle: 10 }).unwrap();
        assert!(matches!(
            t.apply_fault(FaultEvent { element: Element::Node(3), cycle: 20 }),
            Err(TopologyError::AlreadyFaulted(_))
        ));
    }

    #[test]
    fn fault_is_monotone() {
        let mut t = Topology::build_torus(4, 4, 1, 1).unwrap();
        t.apply_fault(FaultEvent { element: Element::Node(5), cycle: 100 }).unwrap();
        t.apply_fault(FaultEvent { element: Element::Link { a: 0, b: 1, copy: 0 }, cycle: 300 })
            .unwrap();
        let mut prev = t.usable_link_units(0);
        for c in [0, 99, 100, 299, 300, 1000] {
            let now = t.usable_link_units(c);
            assert!(now <= prev, "usable links grew at cycle {c}");
            prev = now;
        }
    }

    /// Independent union-find connectivity recomputation.
    fn union_find_connected(t: &Topology, at_cycle: u64) -> bool {
        let n = t.node_count();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, x: usize) -> usize {
            if parent[x] != x {
                let r = find(parent, parent[x]);
                parent[x] = r;
            }
            parent[x]
        }
        for a in 0..n {
            for (p, b) in t.usable_neighbors(a, at_cycle) {
                let _ = p;
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
        let usable: Vec<_> = t.usable_nodes(at_cycle).collect();
        match usable.split_first() {
            None => true,
            Some((&first, rest)) => {
                let root = find(&mut parent, first);
                rest.iter().all(|&x| find(&mut parent, x) == root)
            }
        }
    }

    #[test]
    fn is_connected_matches_union_find_exhaustively() {
        // Every mesh/torus up to 5x5, every single-element fault.
        for rows in 2..=5 {
            for cols in 2..=5 {
                for torus in [true, false] {
                    let base = if torus {
                        Topology::build_torus(rows, cols, 1, 1).unwrap()
                    } else {
                        Topology::build_mesh(rows, cols, 1, 1).unwrap()
                    };
                    let mut elements: Vec<Element> =
                        (0..base.node_count()).map(Element::Node).collect();
                    for n in 0..base.node_count() {
                        for (p, peer) in base.usable_neighbors(n, 0) {
                            if peer > n {
                                for copy in 0..base.port_copies(n, p) {
                                    elements.push(Element::Link { a: n, b: peer, copy });
                                }
                            }
                        }
                    }
                    for e in elements {
                        let mut t = base.clone();
                        t.apply_fault(FaultEvent { element: e, cycle: 0 }).unwrap();
                        assert_eq!(
                            t.is_connected(0),
                            union_find_connected(&t, 0),
                            "{rows}x{cols} torus={torus} fault={e}"
                        );
                    }
                }
            }
        }
    }
}
