//! Deterministic cycle-driven simulation engine.
//!
//! Update order within a cycle is fixed: scheduled faults, traffic
//! injection, sender state machines (teardown frontiers, attempt starts),
//! routers in ascending node id (control flits preempt data per port,
//! round-robin data arbitration, credit-gated movement), control-plane
//! logic (manager polling, table distribution, mechanism transitions), then
//! metric sampling and sender counter updates. Identical config and seed
//! reproduce identical outputs byte for byte.
//!
//! A message is routed by the tables of the epoch it was injected under at
//! every hop, so old-function and new-function messages coexist on shared
//! physical channels during a transition; that coexistence is exactly the
//! hazard the recovery mechanism tolerates, while keeping the injection-time
//! padding bound sound for each message.

use crate::config::{Mechanism, RoutingAlgorithm, SimConfig};
use crate::dbr::{schedule_retry, sender_step, SenderState, SenderStatus};
use crate::metrics::{
    tally_energy, window_series, ActivityCounts, MessageRecord, MetricsRecord, ReconfigReport,
    ViolationCounts,
};
use crate::reconfig::{
    ds_layer, update_size_flits, vc_in_layer, ControlKind, ControlMsg, Distribution, DsMode,
    DsTransition, ManagerState, PollRound, SrTransition,
};
use crate::routing::{compute_up_down, diff_tables, dimension_order_torus, RoutingTable};
use crate::topology::{Element, FaultEvent, NodeId, PortId, Topology};
use crate::traffic::{plan_hotspot, HotspotPlan, NodeGen, Pattern, TraceRecord};
use crate::wormhole::{compute_fpath, make_flit, padded_len, AttemptId, Flit, FlitKind, NetState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn derive_seed(base: u64, tag: u64, idx: u64) -> u64 {
    // splitmix64 over the combined words.
    let mut z =
        base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ idx.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
struct PendingMsg {
    seq: u32,
    dst: NodeId,
    size: u32,
    created: u64,
    retries: u16,
}

#[derive(Debug)]
struct SenderCtl {
    state: SenderState,
    queue: std::collections::VecDeque<PendingMsg>,
    seq_next: u32,
    cur: Option<AttemptId>,
    cur_dst: NodeId,
    cur_size: u32,
    cur_epoch: u32,
    inj_route: Option<(PortId, usize)>,
    injected_this_cycle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChainPos {
    SourceQueue,
    InVc { node: NodeId, port: PortId, vc: usize },
}

#[derive(Debug)]
struct AttemptCtl {
    src: NodeId,
    dst: NodeId,
    size_data: u32,
    total_len: u32,
    epoch: u32,
    created: u64,
    retries: u16,
    condemned: bool,
    /// Fully injected; the sender no longer tracks it.
    detached: bool,
    /// The attempt's reserved path crossed a faulted element.
    crossed_fault: bool,
    header_consumed_at: Option<u64>,
    next_expected_pos: u32,
    delivered_at: Option<u64>,
    tail_at: ChainPos,
    sever_accounted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TeardownOutcome {
    Retry,
    Drop,
    Sever,
}

#[derive(Debug, Clone, Copy)]
enum FrontierPos {
    Out { node: NodeId, port: PortId, vc: usize },
    In { node: NodeId, port: PortId, vc: usize },
}

#[derive(Debug)]
struct ReleaseFrontier {
    attempt: AttemptId,
    pos: Option<FrontierPos>,
    outcome: TeardownOutcome,
}

/// Dead nodes and dead (node, port) link ends reported together.
type DetectionBatch = (Vec<NodeId>, Vec<(NodeId, PortId)>);

#[derive(Debug)]
enum Transition {
    Idle,
    Dbr,
    Ds(DsTransition),
    Sr(SrTransition),
}

pub struct Engine {
    cfg: SimConfig,
    topo: Topology,
    tables: Vec<RoutingTable>,
    node_epoch: Vec<u32>,
    net: NetState,
    now: u64,
    usable_cache: Vec<NodeId>,

    senders: Vec<SenderCtl>,
    registry: std::collections::BTreeMap<AttemptId, AttemptCtl>,
    frontiers: Vec<ReleaseFrontier>,
    pending_severs: Vec<AttemptId>,
    delivered_logical: std::collections::BTreeSet<(u16, u32)>,

    // control plane
    mgr: ManagerState,
    ctrl_q: Vec<Vec<std::collections::VecDeque<ControlMsg>>>,
    ctrl_delivered: Vec<ControlMsg>,
    dist: Option<Distribution>,
    transition: Transition,
    current_report: Option<ReconfigReport>,
    reports: Vec<ReconfigReport>,
    pending_detections: Vec<DetectionBatch>,
    detected_elements: Vec<Element>,
    last_trigger_cycle: u64,
    ds_mode: Vec<DsMode>,

    // traffic
    gens: Vec<NodeGen>,
    hotspot: Option<HotspotPlan>,
    trace: Vec<TraceRecord>,
    trace_next: usize,
    backoff_rngs: Vec<ChaCha8Rng>,
    faults: Vec<FaultEvent>,
    fault_next: usize,

    // accounting
    generated: u64,
    delivered: u64,
    undeliverable: u64,
    retry_cap_hits: u64,
    dropped: u64,
    skipped: u64,
    severed: u64,
    teardowns: u64,
    retries_total: u64,
    self_deliveries: u64,
    live: u64,
    data_flits_injected: u64,
    pad_flits_injected: u64,
    activity: ActivityCounts,
    violations: ViolationCounts,
    messages: Vec<MessageRecord>,
    moved_this_cycle: bool,
    quiet_run: u64,
    stall_detected: bool,
    first_stall: Option<u64>,
    queue_sum_q3: u64,
    queue_cycles_q3: u64,
    queue_sum_q4: u64,
    queue_cycles_q4: u64,
    flit_log: Option<String>,
    protocol_log: Option<String>,
}

impl Engine {
    pub fn new(cfg: SimConfig) -> Result<Engine, Vec<String>> {
        cfg.validate()?;
        let trace = if cfg.traffic.pattern == Pattern::Trace {
            let path = cfg.traffic.trace_path.clone().unwrap();
            crate::traffic::load_trace(std::path::Path::new(&path))
                .map_err(|e| vec![format!("trace: {e}")])?
        } else {
            Vec::new()
        };
        Self::with_trace(cfg, trace)
    }

    /// Build with trace records supplied directly (must be non-decreasing in
    /// injection cycle, as `load_trace` guarantees).
    pub fn with_trace(cfg: SimConfig, trace: Vec<TraceRecord>) -> Result<Engine, Vec<String>> {
        cfg.validate()?;
        let t = &cfg.topology;
        let topo = match t.kind {
            crate::config::TopologyKindCfg::Torus => {
                Topology::build_torus(t.rows, t.cols, t.vcs_per_channel, t.buffer_depth)
            }
            crate::config::TopologyKindCfg::Mesh => {
                Topology::build_mesh(t.rows, t.cols, t.vcs_per_channel, t.buffer_depth)
            }
        }
        .map_err(|e| vec![format!("topology: {e}")])?;
        let table0 = match cfg.routing {
            RoutingAlgorithm::UpDown => {
                compute_up_down(&topo, 0, 0).map_err(|e| vec![format!("routing: {e}")])?
            }
            RoutingAlgorithm::DimensionOrder => dimension_order_torus(&topo),
        };
        Self::with_parts(cfg, topo, table0, trace)
    }

    /// Build over an explicit topology and initial routing table; the
    /// config's own topology/routing fields are ignored. Used for
    /// experiments on hand-built graphs and deliberately cyclic tables.
    pub fn with_parts(
        cfg: SimConfig,
        topo: Topology,
        table0: RoutingTable,
        trace: Vec<TraceRecord>,
    ) -> Result<Engine, Vec<String>> {
        let n = topo.node_count();
        let net = NetState::new(&topo);
        if table0.node_count() != n {
            return Err(vec!["routing table does not cover the topology".into()]);
        }
        let senders = (0..n)
            .map(|_| SenderCtl {
                state: SenderState::idle(cfg.dbr.timeout),
                queue: std::collections::VecDeque::new(),
                seq_next: 0,
                cur: None,
                cur_dst: 0,
                cur_size: 0,
                cur_epoch: 0,
                inj_route: None,
                injected_this_cycle: false,
            })
            .collect();
        let gens = (0..n).map(|node| NodeGen::new(derive_seed(cfg.seed, 1, 0), node)).collect();
        let backoff_rngs = (0..n)
            .map(|node| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, node as u64)))
            .collect();
        let hotspot = if cfg.traffic.pattern == Pattern::Hotspot {
            Some(plan_hotspot(n, cfg.traffic.hotspot_fraction, cfg.seed))
        } else {
            None
        };
        let mut faults = cfg.faults.clone();
        faults.sort_by_key(|f| f.cycle);
        let ctrl_q =
            (0..n).map(|x| vec![std::collections::VecDeque::new(); topo.port_count(x)]).collect();
        Ok(Engine {
            mgr: ManagerState::new(&topo, 0),
            usable_cache: (0..n).collect(),
            net,
            tables: vec![table0],
            node_epoch: vec![0; n],
            now: 0,
            senders,
            registry: std::collections::BTreeMap::new(),
            frontiers: Vec::new(),
            pending_severs: Vec::new(),
            delivered_logical: std::collections::BTreeSet::new(),
            ctrl_q,
            ctrl_delivered: Vec::new(),
            dist: None,
            transition: Transition::Idle,
            current_report: None,
            reports: Vec::new(),
            pending_detections: Vec::new(),
            detected_elements: Vec::new(),
            last_trigger_cycle: 0,
            ds_mode: vec![DsMode::Unrestricted; n],
            gens,
            hotspot,
            trace,
            trace_next: 0,
            backoff_rngs,
            faults,
            fault_next: 0,
            generated: 0,
            delivered: 0,
            undeliverable: 0,
            retry_cap_hits: 0,
            dropped: 0,
            skipped: 0,
            severed: 0,
            teardowns: 0,
            retries_total: 0,
            self_deliveries: 0,
            live: 0,
            data_flits_injected: 0,
            pad_flits_injected: 0,
            activity: ActivityCounts::default(),
            violations: ViolationCounts::default(),
            messages: Vec::new(),
            moved_this_cycle: false,
            quiet_run: 0,
            stall_detected: false,
            first_stall: None,
            queue_sum_q3: 0,
            queue_cycles_q3: 0,
            queue_sum_q4: 0,
            queue_cycles_q4: 0,
            flit_log: if cfg.flit_trace { Some(String::new()) } else { None },
            protocol_log: None,
            topo,
            cfg,
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn enable_protocol_log(&mut self) {
        self.protocol_log = Some(String::new());
    }

    pub fn take_flit_log(&mut self) -> Option<String> {
        self.flit_log.take()
    }

    pub fn take_protocol_log(&mut self) -> Option<String> {
        self.protocol_log.take()
    }

    fn lanes(&self, node: NodeId, port: PortId) -> usize {
        self.net.nodes[node].in_vcs[port].len()
    }

    fn mech(&self) -> Mechanism {
        self.cfg.mechanism
    }

    fn log_flit(&mut self, node: NodeId, port: PortId, vc: usize, flit: &Flit, transit: bool) {
        if let Some(log) = &mut self.flit_log {
            let kind = if flit.stream_end {
                "end"
            } else if flit.pad {
                "pad"
            } else if flit.kind == FlitKind::Header {
                "header"
            } else {
                "data"
            };
            let origin = if transit { "t" } else { "i" };
            let into = if self.topo.peer(node, port) == flit.dst { "s" } else { "b" };
            log.push_str(&format!(
                "{} {} {} {} {} {} {origin} {into}\n",
                self.now, node, port, vc, flit.attempt, kind
            ));
        }
    }

    fn log_event(&mut self, line: String) {
        if let Some(log) = &mut self.protocol_log {
            log.push_str(&format!("{} {}\n", self.now, line));
        }
    }

    // ---- phase 1: faults ----

    fn phase_faults(&mut self) {
        while self.fault_next < self.faults.len() && self.faults[self.fault_next].cycle == self.now
        {
            let f = self.faults[self.fault_next];
            self.fault_next += 1;
            self.topo.apply_fault(f).expect("validated fault schedule");
            self.usable_cache = self.topo.usable_nodes(self.now).collect();
            self.last_trigger_cycle = f.cycle;
            self.apply_fault_consequences(f.element);
        }
    }

    /// Dead-element cleanup: mark dead output VCs, terminate severed worm
    /// segments, halt a dead node's local traffic.
    fn apply_fault_consequences(&mut self, element: Element) {
        // Directed channels killed by this element: (from, port, vc range).
        let mut killed: Vec<(NodeId, PortId, usize, usize)> = Vec::new();
        match element {
            Element::Node(x) => {
                for p in 0..self.topo.port_count(x) {
                    let peer = self.topo.peer(x, p);
                    let rp = self.topo.reverse_port(x, p);
                    killed.push((x, p, 0, self.lanes(x, p)));
                    killed.push((peer, rp, 0, self.lanes(peer, rp)));
                }
            }
            Element::Link { a, b, copy } => {
                let p_ab = self.topo.ports(a).iter().position(|q| q.peer == b).unwrap();
                let p_ba = self.topo.reverse_port(a, p_ab);
                let v = self.net.vcs_per_channel;
                killed.push((a, p_ab, copy * v, (copy + 1) * v));
                killed.push((b, p_ba, copy * v, (copy + 1) * v));
            }
        }

        let mut affected: Vec<AttemptId> = Vec::new();
        for &(node, port, lo, hi) in &killed {
            let peer = self.topo.peer(node, port);
            let rp = self.topo.reverse_port(node, port);
            for vc in lo..hi {
                let ovc = &mut self.net.nodes[node].out_vcs[port][vc];
                ovc.dead = true;
                if let Some(owner) = ovc.owner {
                    affected.push(owner);
                }
                // The buffer this channel feeds loses its upstream: the
                // resident stream terminates with a synthetic end flit.
                if self.topo.node_usable(peer, self.now) {
                    let owner = self.net.nodes[peer].in_vcs[rp][vc].owner;
                    if let Some(owner) = owner {
                        if let Some(ctl) = self.registry.get_mut(&owner) {
                            if !ctl.condemned {
                                ctl.crossed_fault = true;
                                let kill = Flit {
                                    attempt: owner,
                                    dst: ctl.dst,
                                    epoch: ctl.epoch,
                                    kind: FlitKind::Body,
                                    pad: false,
                                    stream_end: true,
                                    pos: u32::MAX,
                                    data_len: ctl.size_data,
                                    total_len: ctl.total_len,
                                    moved_at: self.now,
                                    hops: 0,
                                };
                                let detached = ctl.detached;
                                self.net.nodes[peer].in_vcs[rp][vc].kill_pending = Some(kill);
                                self.net.nodes[peer].buffered += 1;
                                if detached {
                                    self.account_sever(owner);
                                }
                            }
                        }
                    }
                }
            }
        }

        if let Element::Node(x) = element {
            // Flits buffered at the dead node vanish with it.
            for p in 0..self.topo.port_count(x) {
                for vc in 0..self.lanes(x, p) {
                    let ivc = &mut self.net.nodes[x].in_vcs[p][vc];
                    ivc.fifo.clear();
                    ivc.owner = None;
                    ivc.route = None;
                    ivc.frozen = false;
                    ivc.kill_pending = None;
                }
                self.ctrl_q[x][p].clear();
            }
            self.net.nodes[x].buffered = 0;
            // Locally generated traffic halts.
            let orphaned: Vec<PendingMsg> = self.senders[x].queue.drain(..).collect();
            for m in orphaned {
                if !self.delivered_logical.contains(&(x as u16, m.seq)) {
                    self.undeliverable += 1;
                    self.live -= 1;
                }
            }
            if let Some(cur) = self.senders[x].cur.take() {
                if let Some(ctl) = self.registry.get_mut(&cur) {
                    ctl.condemned = true;
                    ctl.sever_accounted = true; // counted with the queue purge
                }
            }
            self.senders[x].state = SenderState::idle(self.cfg.dbr.timeout);
            self.senders[x].inj_route = None;
        }

        affected.sort_unstable();
        affected.dedup();
        for id in affected {
            self.flag_dead_path(id);
        }
    }

    // ---- phase 2: traffic ----

    fn phase_traffic(&mut self) {
        if self.now >= self.cfg.horizon {
            return;
        }
        match self.cfg.traffic.pattern {
            Pattern::Uniform | Pattern::Hotspot => {
                for node in 0..self.topo.node_count() {
                    if !self.topo.node_usable(node, self.now) {
                        continue;
                    }
                    let made = match self.cfg.traffic.pattern {
                        Pattern::Uniform => self.gens[node].gen_uniform(
                            &self.cfg.traffic,
                            node,
                            &self.usable_cache,
                        ),
                        Pattern::Hotspot => self.gens[node].gen_hotspot(
                            &self.cfg.traffic,
                            node,
                            &self.usable_cache,
                            self.hotspot.as_ref().unwrap(),
                        ),
                        Pattern::Trace => unreachable!(),
                    };
                    if let Some((dst, size)) = made {
                        self.enqueue_message(node, dst, size);
                    }
                }
            }
            Pattern::Trace => {
                while self.trace_next < self.trace.len()
                    && self.trace[self.trace_next].injection_cycle == self.now
                {
                    let r = self.trace[self.trace_next];
                    self.trace_next += 1;
                    if !self.topo.node_usable(r.src, self.now)
                        || (r.src == r.dst && !self.cfg.allow_self_traffic)
                    {
                        self.generated += 1;
                        self.skipped += 1;
                        continue;
                    }
                    self.enqueue_message(r.src, r.dst, r.size);
                }
            }
        }
    }

    fn enqueue_message(&mut self, src: NodeId, dst: NodeId, size: u32) {
        let seq = self.senders[src].seq_next;
        self.senders[src].seq_next += 1;
        self.senders[src].queue.push_back(PendingMsg {
            seq,
            dst,
            size,
            created: self.now,
            retries: 0,
        });
        self.generated += 1;
        self.live += 1;
    }

    // ---- phase 3: senders ----

    fn phase_senders(&mut self) {
        // Teardown frontiers advance one hop per cycle.
        let mut done: Vec<usize> = Vec::new();
        for i in 0..self.frontiers.len() {
            if self.step_frontier(i) {
                done.push(i);
            }
            self.moved_this_cycle = true;
        }
        for &i in done.iter().rev() {
            let f = self.frontiers.remove(i);
            self.finish_teardown(f.attempt, f.outcome);
        }

        let severs: Vec<AttemptId> = {
            let mut s = std::mem::take(&mut self.pending_severs);
            s.sort_unstable();
            s.dedup();
            s
        };
        for id in severs {
            if self.registry.get(&id).map(|c| !c.condemned).unwrap_or(false) {
                self.begin_teardown(id, TeardownOutcome::Sever);
            }
        }

        for node in 0..self.topo.node_count() {
            self.senders[node].injected_this_cycle = false;
            if !self.topo.node_usable(node, self.now) {
                continue;
            }
            match self.senders[node].state.status {
                SenderStatus::Deadlocked => {
                    let id = self.senders[node].cur.expect("deadlocked sender has an attempt");
                    let outcome = if self.mech() == Mechanism::Dbr {
                        TeardownOutcome::Retry
                    } else {
                        TeardownOutcome::Drop
                    };
                    self.begin_teardown(id, outcome);
                    self.senders[node].state.status = SenderStatus::Releasing;
                    self.log_event(format!("teardown node {node} attempt {id}"));
                }
                SenderStatus::BackingOff => {
                    if self.now >= self.senders[node].state.backoff_until {
                        self.senders[node].state.status = SenderStatus::Idle;
                        self.try_start(node);
                    }
                }
                SenderStatus::Idle => self.try_start(node),
                _ => {}
            }
        }
    }

    fn try_start(&mut self, node: NodeId) {
        let Some(&front) = self.senders[node].queue.front() else { return };
        if front.created >= self.now {
            return;
        }
        if front.dst == node {
            // Self-addressed: delivered locally without entering the network.
            self.senders[node].queue.pop_front();
            self.self_deliveries += 1;
            self.delivered += 1;
            self.live -= 1;
            self.moved_this_cycle = true;
            self.messages.push(MessageRecord {
                src: node,
                dst: node,
                seq: front.seq,
                size: front.size,
                created_at: front.created,
                delivered_at: self.now,
                hops: 0,
                retries: front.retries,
                warmup: front.created < self.cfg.warmup,
            });
            return;
        }
        let epoch = self.node_epoch[node];
        let Ok(route) = self.tables[epoch as usize].route(node, front.dst, &self.topo) else {
            self.senders[node].queue.pop_front();
            self.undeliverable += 1;
            self.live -= 1;
            return;
        };
        // Padding to the path's buffering is the cost of the compressionless
        // delivery guarantee; the baseline mechanisms run plain wormhole
        // switching and never pad or time out (they only discard worms whose
        // reserved channel died).
        let (fpath, total) = if self.mech() == Mechanism::Dbr {
            let fpath = compute_fpath(self.net.buffer_depth, route.len() as u32);
            (fpath, padded_len(front.size, fpath))
        } else {
            (0, front.size)
        };
        let id = AttemptId { src: node as u16, seq: front.seq, retry: front.retries };
        self.registry.insert(
            id,
            AttemptCtl {
                src: node,
                dst: front.dst,
                size_data: front.size,
                total_len: total,
                epoch,
                created: front.created,
                retries: front.retries,
                condemned: false,
                detached: false,
                crossed_fault: false,
                header_consumed_at: None,
                next_expected_pos: 0,
                delivered_at: None,
                tail_at: ChainPos::SourceQueue,
                sever_accounted: false,
            },
        );
        let s = &mut self.senders[node];
        s.cur = Some(id);
        s.cur_dst = front.dst;
        s.cur_size = front.size;
        s.cur_epoch = epoch;
        s.state.start_attempt(fpath, total);
        s.inj_route = None;
    }

    // ---- teardown machinery ----

    /// Condemn an attempt and start its release: freeze the reserved chain
    /// so nothing moves, then free one hop per cycle from the source side.
    fn begin_teardown(&mut self, id: AttemptId, outcome: TeardownOutcome) {
        let (src, dst) = {
            let ctl = self.registry.get_mut(&id).expect("teardown of live attempt");
            debug_assert!(!ctl.condemned);
            ctl.condemned = true;
            (ctl.src, ctl.dst)
        };
        let tail_at = self.registry[&id].tail_at;
        let start = match tail_at {
            ChainPos::SourceQueue => self.senders[src]
                .inj_route
                .map(|(p, v)| FrontierPos::Out { node: src, port: p, vc: v }),
            ChainPos::InVc { node, port, vc } => Some(FrontierPos::In { node, port, vc }),
        };
        // Freeze the chain so the release walk stays consistent.
        let mut pos = start;
        while let Some(p) = pos {
            pos = match p {
                FrontierPos::Out { node, port, vc } => {
                    let peer = self.topo.peer(node, port);
                    if peer == dst || !self.topo.node_usable(peer, self.now) {
                        None
                    } else {
                        let rp = self.topo.reverse_port(node, port);
                        Some(FrontierPos::In { node: peer, port: rp, vc })
                    }
                }
                FrontierPos::In { node, port, vc } => {
                    let ivc = &mut self.net.nodes[node].in_vcs[port][vc];
                    if ivc.owner != Some(id) {
                        None
                    } else {
                        ivc.frozen = true;
                        ivc.route.map(|(p2, v2)| FrontierPos::Out { node, port: p2, vc: v2 })
                    }
                }
            };
        }
        self.teardowns += 1;
        if let Some(r) = &mut self.current_report {
            r.teardowns_during += 1;
        }
        self.frontiers.push(ReleaseFrontier { attempt: id, pos: start, outcome });
    }

    /// Free one hop; returns true when the frontier is done.
    fn step_frontier(&mut self, i: usize) -> bool {
        let id = self.frontiers[i].attempt;
        let Some(pos) = self.frontiers[i].pos else { return true };
        match pos {
            FrontierPos::Out { node, port, vc } => {
                let dst = self.registry[&id].dst;
                let ovc = &mut self.net.nodes[node].out_vcs[port][vc];
                if ovc.owner == Some(id) {
                    ovc.owner = None;
                }
                let peer = self.topo.peer(node, port);
                if peer == dst || !self.topo.node_usable(peer, self.now) {
                    // Final link, or the chain is cut by a dead element; a
                    // far segment (if any) drains via its end-of-stream flit.
                    self.frontiers[i].pos = None;
                    return true;
                }
                let ovc = &mut self.net.nodes[node].out_vcs[port][vc];
                if !ovc.dead {
                    ovc.credits = self.net.buffer_depth;
                    ovc.pending_credits = 0;
                }
                let rp = self.topo.reverse_port(node, port);
                let next = self.free_in_vc(peer, rp, vc, id);
                self.frontiers[i].pos =
                    next.map(|(p2, v2)| FrontierPos::Out { node: peer, port: p2, vc: v2 });
                self.frontiers[i].pos.is_none()
            }
            FrontierPos::In { node, port, vc } => {
                // Restore the (unowned) upstream channel's credits, then
                // free this buffer.
                let up = self.topo.peer(node, port);
                let up_port = self.topo.reverse_port(node, port);
                if self.topo.node_usable(up, self.now) {
                    let ovc = &mut self.net.nodes[up].out_vcs[up_port][vc];
                    if !ovc.dead {
                        ovc.credits = self.net.buffer_depth;
                        ovc.pending_credits = 0;
                    }
                }
                let next = self.free_in_vc(node, port, vc, id);
                self.frontiers[i].pos =
                    next.map(|(p2, v2)| FrontierPos::Out { node, port: p2, vc: v2 });
                self.frontiers[i].pos.is_none()
            }
        }
    }

    fn free_in_vc(
        &mut self,
        node: NodeId,
        port: PortId,
        vc: usize,
        id: AttemptId,
    ) -> Option<(PortId, usize)> {
        let cleared = {
            let ivc = &self.net.nodes[node].in_vcs[port][vc];
            if ivc.owner != Some(id) {
                return None;
            }
            ivc.fifo.len() as u32 + ivc.kill_pending.is_some() as u32
        };
        self.net.nodes[node].buffered -= cleared;
        let ivc = &mut self.net.nodes[node].in_vcs[port][vc];
        debug_assert!(ivc.fifo.iter().all(|f| f.attempt == id));
        let next = ivc.route;
        ivc.fifo.clear();
        ivc.owner = None;
        ivc.route = None;
        ivc.frozen = false;
        ivc.kill_pending = None;
        next
    }

    fn finish_teardown(&mut self, id: AttemptId, outcome: TeardownOutcome) {
        let crossed_fault = self.registry.get(&id).map(|c| c.crossed_fault).unwrap_or(false);
        if self.cfg.checks && !crossed_fault {
            // Leak scan: nothing in the network may still belong to the
            // torn-down attempt. (Fault-severed worms keep a draining far
            // segment that terminates via its end-of-stream flit.)
            if !self.net.scan_attempt(id).is_empty() {
                self.violations.leak += 1;
            }
        }
        match outcome {
            TeardownOutcome::Retry => {
                let Some(ctl) = self.registry.remove(&id) else { return };
                let src = ctl.src;
                if !self.topo.node_usable(src, self.now) {
                    return;
                }
                let s = &mut self.senders[src];
                s.cur = None;
                s.inj_route = None;
                let Some(front) = s.queue.front_mut() else { return };
                front.retries += 1;
                self.retries_total += 1;
                let logical = (src as u16, front.seq);
                if self.delivered_logical.contains(&logical) {
                    // The previous attempt actually completed; nothing to
                    // retransmit.
                    s.queue.pop_front();
                    s.state.status = SenderStatus::Idle;
                } else if front.retries > self.cfg.dbr.retry_cap {
                    s.queue.pop_front();
                    s.state.status = SenderStatus::Idle;
                    self.retry_cap_hits += 1;
                    self.undeliverable += 1;
                    self.live -= 1;
                } else {
                    let until = schedule_retry(
                        &mut self.backoff_rngs[src],
                        (self.cfg.dbr.backoff_min, self.cfg.dbr.backoff_max),
                        self.now,
                    );
                    s.state.status = SenderStatus::BackingOff;
                    s.state.backoff_until = until;
                    self.log_event(format!("retry node {src} attempt {id} backoff_until {until}"));
                }
            }
            TeardownOutcome::Drop => {
                // Baselines remove the worm from the network and the source
                // re-injects it later, exactly like a recovery retry; the
                // removal itself is what the drop statistic counts.
                self.dropped += 1;
                self.log_event(format!("drop node {} attempt {id}", id.src));
                self.finish_teardown(id, TeardownOutcome::Retry);
            }
            TeardownOutcome::Sever => {
                self.account_sever(id);
                self.registry.remove(&id);
            }
        }
    }

    /// A fault cut this detached attempt off from completion; account the
    /// logical message once unless it already delivered.
    fn account_sever(&mut self, id: AttemptId) {
        let Some(ctl) = self.registry.get_mut(&id) else { return };
        if ctl.sever_accounted {
            return;
        }
        ctl.sever_accounted = true;
        let logical = (ctl.src as u16, id.seq);
        if ctl.detached && !self.delivered_logical.contains(&logical) {
            self.severed += 1;
            self.undeliverable += 1;
            self.live -= 1;
        }
    }

    // ---- phase 4: routers ----

    fn phase_routers(&mut self) {
        for node in 0..self.topo.node_count() {
            if !self.topo.node_usable(node, self.now) {
                continue;
            }
            // Idle routers have nothing to arbitrate.
            let injecting = self.senders[node].cur.is_some()
                && matches!(
                    self.senders[node].state.status,
                    SenderStatus::Injecting | SenderStatus::Blocked
                );
            let busy = self.net.nodes[node].buffered > 0
                || injecting
                || self.ctrl_q[node].iter().any(|q| !q.is_empty());
            if !busy {
                continue;
            }
            for port in 0..self.topo.port_count(node) {
                // Materialize a pending stream-end marker once there is room.
                for vc in 0..self.lanes(node, port) {
                    let depth = self.net.buffer_depth as usize;
                    let ivc = &mut self.net.nodes[node].in_vcs[port][vc];
                    let Some(kill) = ivc.kill_pending else { continue };
                    if ivc.owner != Some(kill.attempt) {
                        // The stream ended on its own (real tail was already
                        // buffered here when the upstream died).
                        ivc.kill_pending = None;
                        self.net.nodes[node].buffered -= 1;
                    } else if ivc.fifo.len() <= depth && !ivc.frozen {
                        ivc.kill_pending = None;
                        ivc.fifo.push_back(kill);
                    }
                }
                if self.step_control(node, port) {
                    continue; // control flit took the link this cycle
                }
                self.arbitrate_data(node, port);
            }
        }
    }

    /// Move the head control flit on this port, if any. Control preempts
    /// data: the port carries nothing else this cycle.
    fn step_control(&mut self, node: NodeId, port: PortId) -> bool {
        let Some(head) = self.ctrl_q[node][port].front() else { return false };
        if head.arrived_at >= self.now {
            return false;
        }
        if !self.topo.port_usable(node, port, self.now)
            || !self.topo.node_usable(self.topo.peer(node, port), self.now)
        {
            // Fail-stop: the message is lost with the link.
            self.ctrl_q[node][port].pop_front();
            return false;
        }
        let mut msg = self.ctrl_q[node][port].pop_front().unwrap();
        self.activity.link_traversals += 1;
        self.activity.crossbar_traversals += 1;
        msg.flits_left -= 1;
        if msg.flits_left > 0 {
            self.ctrl_q[node][port].push_front(msg);
            return true;
        }
        msg.hop += 1;
        msg.flits_left = msg.size_flits;
        msg.arrived_at = self.now;
        if msg.hop + 1 == msg.path.len() {
            self.ctrl_delivered.push(msg);
        } else {
            let at = msg.path[msg.hop];
            let next = msg.path[msg.hop + 1];
            match self.topo.ports(at).iter().position(|p| p.peer == next) {
                Some(next_port) if self.topo.node_usable(at, self.now) => {
                    self.ctrl_q[at][next_port].push_back(msg);
                }
                _ => {} // route broken underfoot; message lost
            }
        }
        true
    }

    fn arbitrate_data(&mut self, node: NodeId, port: PortId) {
        let inj_slot = self.net.nodes[node].slots.len();
        let n_slots = inj_slot + 1;
        let mut winner: Option<usize> = None;
        let rr = self.net.nodes[node].rr[port];
        for k in 0..n_slots {
            let slot = (rr + k) % n_slots;
            let ok = if slot == inj_slot {
                self.injection_ready(node, port)
            } else {
                let (ip, iv) = self.net.nodes[node].slots[slot];
                self.transit_ready(node, ip, iv, port)
            };
            if ok {
                winner = Some(slot);
                break;
            }
        }
        let Some(slot) = winner else { return };
        self.net.nodes[node].rr[port] = (slot + 1) % n_slots;
        if slot == inj_slot {
            self.execute_injection(node, port);
        } else {
            let (ip, iv) = self.net.nodes[node].slots[slot];
            self.execute_transit(node, ip, iv, port);
        }
    }

    /// Output VC a header would allocate on this port: free, in the right
    /// DS layer, alive. Reallocation waits for full credits so the previous
    /// message has completely drained from the downstream buffer and a VC
    /// never mixes two messages (the final hop sinks flits on arrival, so
    /// ownership alone suffices there).
    fn alloc_vc(&self, node: NodeId, port: PortId, epoch: u32, dst: NodeId) -> Option<usize> {
        let final_hop = self.topo.peer(node, port) == dst;
        for v in 0..self.net.nodes[node].out_vcs[port].len() {
            let ovc = &self.net.nodes[node].out_vcs[port][v];
            if ovc.dead {
                continue;
            }
            if !self.ds_vc_allowed(node, v, epoch) {
                continue;
            }
            if ovc.owner.is_none() && (final_hop || ovc.credits == self.net.buffer_depth) {
                return Some(v);
            }
        }
        None
    }

    /// DS layer discipline per the node's current phase: normally both
    /// layers allocate freely; once a node has heard about a transition, the
    /// layer follows the message's epoch, so old-epoch and new-epoch
    /// messages never share a layer. New-epoch flits only exist after the
    /// fresh layer drained globally, which keeps that layer clean for them.
    fn ds_vc_allowed(&self, node: NodeId, vc: usize, msg_epoch: u32) -> bool {
        if self.mech() != Mechanism::Ds {
            return true;
        }
        match self.ds_mode[node] {
            DsMode::Unrestricted => true,
            DsMode::Restricted(e) | DsMode::Split(e) => {
                let layer =
                    if msg_epoch >= e { ds_layer(e) } else { ds_layer(e.wrapping_sub(1)) };
                vc_in_layer(vc, self.net.vcs_per_channel, layer)
            }
        }
    }

    fn port_fully_dead(&self, node: NodeId, port: PortId) -> bool {
        self.net.nodes[node].out_vcs[port].iter().all(|o| o.dead)
    }

    /// Header gate under SR: a new-epoch header may not take an output port
    /// whose token has not yet passed.
    fn sr_gate(&self, node: NodeId, port: PortId, epoch: u32) -> bool {
        if let Transition::Sr(sr) = &self.transition {
            if epoch >= sr.epoch && !sr.out_passed[node][port] {
                return false;
            }
        }
        true
    }

    fn transit_ready(&mut self, node: NodeId, ip: PortId, iv: usize, out_port: PortId) -> bool {
        let (head, route) = {
            let ivc = &self.net.nodes[node].in_vcs[ip][iv];
            if ivc.frozen {
                return false;
            }
            let Some(head) = ivc.fifo.front() else { return false };
            if head.moved_at >= self.now {
                return false;
            }
            (*head, ivc.route)
        };
        match route {
            Some((p, v)) => {
                if p != out_port {
                    return false;
                }
                let ovc = &self.net.nodes[node].out_vcs[p][v];
                if ovc.dead {
                    self.flag_dead_path(head.attempt);
                    return false;
                }
                let final_hop = self.topo.peer(node, p) == head.dst;
                final_hop || ovc.credits > 0
            }
            None => {
                debug_assert_eq!(head.kind, FlitKind::Header);
                let Some(p) = self.tables[head.epoch as usize].first_port(node, head.dst) else {
                    self.flag_dead_path(head.attempt);
                    return false;
                };
                if p != out_port {
                    return false;
                }
                if !self.sr_gate(node, p, head.epoch) {
                    return false;
                }
                if self.alloc_vc(node, p, head.epoch, head.dst).is_some() {
                    true
                } else {
                    if self.port_fully_dead(node, p) {
                        self.flag_dead_path(head.attempt);
                    }
                    false
                }
            }
        }
    }

    fn injection_ready(&mut self, node: NodeId, out_port: PortId) -> bool {
        let (id, idx, dst, epoch, inj_route) = {
            let s = &self.senders[node];
            if !matches!(s.state.status, SenderStatus::Injecting | SenderStatus::Blocked) {
                return false;
            }
            let Some(id) = s.cur else { return false };
            (id, s.state.injected, s.cur_dst, s.cur_epoch, s.inj_route)
        };
        if idx == 0 {
            let Some(p) = self.tables[epoch as usize].first_port(node, dst) else {
                return false;
            };
            if p != out_port {
                return false;
            }
            if !self.sr_gate(node, p, epoch) {
                return false;
            }
            if self.alloc_vc(node, p, epoch, dst).is_some() {
                true
            } else {
                if self.port_fully_dead(node, p) {
                    self.flag_dead_path(id);
                }
                false
            }
        } else {
            let Some((p, v)) = inj_route else { return false };
            if p != out_port {
                return false;
            }
            let ovc = &self.net.nodes[node].out_vcs[p][v];
            if ovc.dead {
                self.flag_dead_path(id);
                return false;
            }
            let final_hop = self.topo.peer(node, p) == dst;
            final_hop || ovc.credits > 0
        }
    }

    /// The attempt's next hop is faulted. An active sender learns via the
    /// timeout override (baselines discard outright); detached worms are
    /// severed by the engine.
    fn flag_dead_path(&mut self, id: AttemptId) {
        let Some(ctl) = self.registry.get_mut(&id) else { return };
        if ctl.condemned {
            return;
        }
        ctl.crossed_fault = true;
        let src = ctl.src;
        let detached = ctl.detached;
        if !detached && self.senders[src].cur == Some(id) {
            if !self.senders[src].state.path_dead {
                self.senders[src].state.path_dead = true;
                if self.mech() != Mechanism::Dbr
                    && matches!(
                        self.senders[src].state.status,
                        SenderStatus::Injecting | SenderStatus::Blocked
                    )
                {
                    self.senders[src].state.status = SenderStatus::Deadlocked;
                }
            }
        } else if !self.pending_severs.contains(&id) {
            self.pending_severs.push(id);
        }
    }

    fn execute_transit(&mut self, node: NodeId, ip: PortId, iv: usize, out_port: PortId) {
        let head = *self.net.nodes[node].in_vcs[ip][iv].fifo.front().unwrap();
        let (p, v) = match self.net.nodes[node].in_vcs[ip][iv].route {
            Some(r) => r,
            None => {
                let v = self
                    .alloc_vc(node, out_port, head.epoch, head.dst)
                    .expect("checked in transit_ready");
                self.net.nodes[node].in_vcs[ip][iv].route = Some((out_port, v));
                self.net.nodes[node].out_vcs[out_port][v].owner = Some(head.attempt);
                (out_port, v)
            }
        };
        debug_assert_eq!(p, out_port);
        let mut flit = self.net.nodes[node].in_vcs[ip][iv].fifo.pop_front().unwrap();
        self.net.nodes[node].buffered -= 1;
        // Credit back to the upstream channel that fed this buffer (a dead
        // channel's credits are frozen; the seeded end marker entered there).
        let up = self.topo.peer(node, ip);
        let up_port = self.topo.reverse_port(node, ip);
        if self.topo.node_usable(up, self.now) {
            let fovc = &mut self.net.nodes[up].out_vcs[up_port][iv];
            if !fovc.dead {
                fovc.pending_credits += 1;
            }
        }
        self.activity.buffer_reads += 1;
        if flit.is_tail() {
            let ivc = &mut self.net.nodes[node].in_vcs[ip][iv];
            ivc.owner = None;
            ivc.route = None;
            // A stream-end marker behind the real tail is superfluous.
            let mut dropped = 0;
            if ivc.kill_pending.take().is_some() {
                dropped += 1;
            }
            while ivc.fifo.front().map(|f| f.stream_end) == Some(true) {
                ivc.fifo.pop_front();
                dropped += 1;
            }
            self.net.nodes[node].buffered -= dropped;
        }
        self.forward(node, p, v, &mut flit, true);
    }

    fn execute_injection(&mut self, node: NodeId, out_port: PortId) {
        let (id, idx, dst, epoch, size, total, inj_route) = {
            let s = &self.senders[node];
            (
                s.cur.unwrap(),
                s.state.injected,
                s.cur_dst,
                s.cur_epoch,
                s.cur_size,
                s.state.total_len,
                s.inj_route,
            )
        };
        let (p, v) = match inj_route {
            Some(r) => r,
            None => {
                let v =
                    self.alloc_vc(node, out_port, epoch, dst).expect("checked in injection_ready");
                self.net.nodes[node].out_vcs[out_port][v].owner = Some(id);
                (out_port, v)
            }
        };
        self.senders[node].inj_route = Some((p, v));
        let mut flit = make_flit(id, dst, epoch, size, total, idx, self.now);
        if flit.pad {
            self.pad_flits_injected += 1;
        } else {
            self.data_flits_injected += 1;
        }
        self.senders[node].injected_this_cycle = true;
        if flit.is_tail() {
            self.senders[node].inj_route = None;
        }
        self.forward(node, p, v, &mut flit, false);
    }

    /// Carry a flit across a link: into the peer's buffer, or straight into
    /// the sink when this is its final hop.
    fn forward(&mut self, node: NodeId, p: PortId, v: usize, flit: &mut Flit, transit: bool) {
        let peer = self.topo.peer(node, p);
        flit.moved_at = self.now;
        flit.hops += 1;
        self.activity.link_traversals += 1;
        self.activity.crossbar_traversals += 1;
        self.moved_this_cycle = true;
        self.log_flit(node, p, v, flit, transit);

        if self.cfg.checks {
            if let Transition::Sr(sr) = &self.transition {
                if flit.epoch < sr.epoch && sr.out_passed[node][p] {
                    self.violations.sr_epoch += 1;
                }
            }
            if let Transition::Ds(ds) = &self.transition {
                // Layer separation holds until the restore wave readmits
                // both layers (the old layer is empty by then).
                if !flit.stream_end && ds.restore_pending.is_none() {
                    let fresh = vc_in_layer(v, self.net.vcs_per_channel, ds_layer(ds.epoch));
                    if flit.epoch >= ds.epoch && !fresh {
                        self.violations.ds_layer += 1;
                    }
                    if flit.epoch < ds.epoch && fresh && ds.fresh_drained_at.is_some() {
                        self.violations.ds_layer += 1;
                    }
                }
            }
        }

        let is_tail = flit.is_tail();
        let real_tail = is_tail && !flit.stream_end;
        if is_tail {
            self.net.nodes[node].out_vcs[p][v].owner = None;
        }
        if peer == flit.dst {
            self.sink_consume(*flit);
        } else {
            let ovc = &mut self.net.nodes[node].out_vcs[p][v];
            debug_assert!(ovc.credits > 0 || ovc.dead);
            ovc.credits = ovc.credits.saturating_sub(1);
            let rp = self.topo.reverse_port(node, p);
            let ivc = &mut self.net.nodes[peer].in_vcs[rp][v];
            if flit.kind == FlitKind::Header && !flit.stream_end {
                if self.cfg.checks && ivc.owner.is_some() {
                    self.violations.vc_order += 1;
                    if std::env::var_os("NETSIM_AUDIT_DEBUG").is_some() {
                        eprintln!(
                            "cycle {}: vc_order: header {} into {peer}/{rp}/{v} owned by {:?}",
                            self.now, flit.attempt, ivc.owner
                        );
                    }
                }
                ivc.owner = Some(flit.attempt);
            } else if self.cfg.checks && ivc.owner != Some(flit.attempt) {
                self.violations.vc_order += 1;
                if std::env::var_os("NETSIM_AUDIT_DEBUG").is_some() {
                    eprintln!(
                        "cycle {}: vc_order: flit {} pos {} (end {}) into {peer}/{rp}/{v} owned by {:?}",
                        self.now, flit.attempt, flit.pos, flit.stream_end, ivc.owner
                    );
                }
            }
            debug_assert!(
                (ivc.fifo.len() as u32) < self.net.buffer_depth || flit.stream_end,
                "buffer overrun"
            );
            ivc.fifo.push_back(*flit);
            self.net.nodes[peer].buffered += 1;
            self.activity.buffer_writes += 1;
            if real_tail {
                if let Some(ctl) = self.registry.get_mut(&flit.attempt) {
                    ctl.tail_at = ChainPos::InVc { node: peer, port: rp, vc: v };
                }
            }
        }
    }

    /// Flit arrives at its destination. Pads are discarded; the rising edge
    /// of the pad signal (or the last data flit) timestamps delivery; the
    /// end of the stream releases the final channel and closes the attempt.
    fn sink_consume(&mut self, flit: Flit) {
        let Some(ctl) = self.registry.get_mut(&flit.attempt) else {
            return; // stale flit of a closed attempt
        };
        if ctl.condemned {
            return; // stale flit of a torn-down attempt
        }
        if flit.stream_end {
            // Severed stream terminator: the far segment has drained. A
            // detached attempt closes here; one still owned by its sender is
            // closed by the sender's own teardown.
            let id = flit.attempt;
            if ctl.detached {
                self.account_sever(id);
                self.registry.remove(&id);
            }
            return;
        }
        if self.cfg.checks {
            if flit.pos != ctl.next_expected_pos {
                self.violations.vc_order += 1;
            }
            ctl.next_expected_pos = flit.pos + 1;
        }
        if flit.kind == FlitKind::Header {
            ctl.header_consumed_at = Some(self.now);
        }
        let padded = flit.total_len > flit.data_len;
        let delivered_now = if padded {
            flit.pad && flit.pos == flit.data_len // rising edge
        } else {
            flit.pos + 1 == flit.data_len
        };
        if delivered_now && ctl.delivered_at.is_none() {
            ctl.delivered_at = Some(self.now);
            // Exactly-once accounting: a retransmission of a message whose
            // earlier attempt was consumed in full (possible when pads block
            // past the timeout with F still short of F_path) is discarded by
            // the receiver.
            if self.delivered_logical.insert(flit.attempt.logical()) {
                self.messages.push(MessageRecord {
                    src: ctl.src,
                    dst: ctl.dst,
                    seq: flit.attempt.seq,
                    size: ctl.size_data,
                    created_at: ctl.created,
                    delivered_at: self.now,
                    hops: flit.hops,
                    retries: ctl.retries,
                    warmup: ctl.created < self.cfg.warmup,
                });
                self.delivered += 1;
                if ctl.sever_accounted {
                    // Written off when the fault cut its worm, but the far
                    // segment carried the whole payload after all.
                    self.undeliverable -= 1;
                    self.severed -= 1;
                } else {
                    self.live -= 1;
                }
            }
        }
        if flit.is_tail() {
            debug_assert!(self.registry[&flit.attempt].delivered_at.is_some());
            self.registry.remove(&flit.attempt);
        }
    }

    // ---- phase 5: control plane ----

    fn send_control(
        &mut self,
        from: NodeId,
        to: NodeId,
        kind: ControlKind,
        size: u32,
        avoid: &[NodeId],
    ) {
        if from == to {
            self.ctrl_delivered.push(ControlMsg {
                kind,
                src: from,
                dst: to,
                path: vec![from],
                hop: 0,
                size_flits: size,
                flits_left: size,
                arrived_at: self.now,
            });
            return;
        }
        let Some(path) = self.mgr.view.route(&self.topo, from, to, avoid) else { return };
        self.send_control_path(path, kind, size);
    }

    /// Send along an explicit path (replies reverse a request's route;
    /// token flits cross a single link).
    fn send_control_path(&mut self, path: Vec<NodeId>, kind: ControlKind, size: u32) {
        if path.len() < 2 {
            let at = path[0];
            self.ctrl_delivered.push(ControlMsg {
                kind,
                src: at,
                dst: at,
                path,
                hop: 0,
                size_flits: size,
                flits_left: size,
                arrived_at: self.now,
            });
            return;
        }
        let from = path[0];
        let Some(first_port) = self.topo.ports(from).iter().position(|p| p.peer == path[1]) else {
            return;
        };
        let msg = ControlMsg {
            kind,
            src: from,
            dst: *path.last().unwrap(),
            path,
            hop: 0,
            size_flits: size,
            flits_left: size,
            arrived_at: self.now,
        };
        self.ctrl_q[from][first_port].push_back(msg);
    }

    fn phase_control(&mut self) {
        let delivered = std::mem::take(&mut self.ctrl_delivered);
        for msg in delivered {
            self.handle_control(msg);
        }
        if self.cfg.control.heartbeat_period > 0 {
            self.manager_poll();
            self.check_failover();
        }
        self.pump_distribution();
        self.advance_transition();
    }

    fn handle_control(&mut self, msg: ControlMsg) {
        let at = *msg.path.last().unwrap();
        if !self.topo.node_usable(at, self.now) {
            return;
        }
        match msg.kind {
            ControlKind::Heartbeat { round, probe: _ } => {
                self.mgr.last_heartbeat_seen[at] = self.now;
                let status: Vec<(PortId, bool)> = (0..self.topo.port_count(at))
                    .map(|p| {
                        (
                            p,
                            self.topo.port_usable(at, p, self.now)
                                && self.topo.node_usable(self.topo.peer(at, p), self.now),
                        )
                    })
                    .collect();
                let mut back = msg.path.clone();
                back.reverse();
                self.send_control_path(
                    back,
                    ControlKind::StatusReply { round, link_status: status, ack_epoch: None },
                    1,
                );
            }
            ControlKind::StatusReply { round, link_status, ack_epoch } => {
                if at != self.mgr.node {
                    return;
                }
                let replier = msg.src;
                if let Some(r) = &mut self.mgr.current_round {
                    if r.round == round {
                        r.pending.remove(&replier);
                        if r.pending.is_empty() {
                            self.mgr.current_round = None;
                        }
                    }
                }
                let mut dead_links = Vec::new();
                for (p, ok) in link_status {
                    if !ok
                        && self.mgr.view.link_ok[replier][p]
                        && self.mgr.view.usable(self.topo.peer(replier, p))
                    {
                        dead_links.push((replier, p));
                    }
                }
                if !dead_links.is_empty() {
                    self.note_detection(Vec::new(), dead_links);
                }
                if let Some(epoch) = ack_epoch {
                    if let Some(d) = &mut self.dist {
                        if d.epoch == epoch && d.awaiting_ack == Some(replier) {
                            d.awaiting_ack = None;
                            if d.next == d.order.len() {
                                d.finished_at = Some(self.now);
                            }
                        }
                    }
                }
            }
            ControlKind::TableUpdate { epoch } => {
                self.apply_update(at, epoch);
                if let Transition::Ds(ds) = &self.transition {
                    if ds.epoch == epoch {
                        self.ds_mode[at] = DsMode::Split(epoch);
                    }
                }
                let mut back = msg.path.clone();
                back.reverse();
                self.send_control_path(
                    back,
                    ControlKind::StatusReply {
                        round: 0,
                        link_status: Vec::new(),
                        ack_epoch: Some(epoch),
                    },
                    1,
                );
            }
            ControlKind::DsPrepare { epoch } => {
                if let Transition::Ds(ds) = &mut self.transition {
                    if ds.epoch == epoch {
                        ds.prepare_pending.remove(&at);
                        self.ds_mode[at] = DsMode::Restricted(epoch);
                    }
                }
            }
            ControlKind::DsDrainDone { epoch } => {
                if at == self.mgr.node {
                    if let Transition::Ds(ds) = &mut self.transition {
                        if ds.epoch == epoch {
                            ds.drain_done_seen += 1;
                        }
                    }
                }
            }
            ControlKind::DsRestore { epoch } => {
                if let Transition::Ds(ds) = &mut self.transition {
                    if ds.epoch == epoch {
                        if let Some(pending) = &mut ds.restore_pending {
                            pending.remove(&at);
                            ds.last_restore_at = self.now;
                        }
                    }
                }
                self.ds_mode[at] = DsMode::Unrestricted;
            }
            ControlKind::SrToken { epoch } => {
                if msg.path.len() == 2 {
                    let from = msg.path[0];
                    if let Some(port) = self.topo.ports(from).iter().position(|p| p.peer == at) {
                        let in_port = self.topo.reverse_port(from, port);
                        if let Transition::Sr(sr) = &mut self.transition {
                            if sr.epoch == epoch {
                                sr.in_token[at][in_port] = true;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Atomic table swap at a node: from here on it injects (and is
    /// expected to route new-epoch traffic) under the new function.
    fn apply_update(&mut self, node: NodeId, epoch: u32) {
        if self.node_epoch[node] >= epoch {
            return;
        }
        self.node_epoch[node] = epoch;
        if let Some(r) = &mut self.current_report {
            r.update_cycles.push((node, self.now));
        }
    }

    fn manager_poll(&mut self) {
        if !self.topo.node_usable(self.mgr.node, self.now) {
            return;
        }
        let h = self.cfg.control.heartbeat_period;
        let deadline = self.cfg.control.reply_deadline;
        if let Some(round) = &self.mgr.current_round {
            if self.now >= round.deadline {
                let round = self.mgr.current_round.take().unwrap();
                let missing: Vec<NodeId> = round.pending.into_iter().collect();
                if std::env::var_os("NETSIM_MGR_DEBUG").is_some() {
                    eprintln!(
                        "cycle {}: round {} (probe={}) deadline, missing {:?}",
                        self.now, round.round, round.probe, missing
                    );
                }
                if missing.is_empty() {
                    // Round fully answered.
                } else if round.probe && missing.len() >= round.probe_population {
                    // No suspect cleared: the rest are genuinely dead.
                    self.note_detection(missing, Vec::new());
                } else {
                    // (Re-)probe the remaining suspects, avoiding only each
                    // other: a live node whose earlier reply crossed the
                    // fault gets a clean path, and every cleared suspect
                    // opens paths for the next wave.
                    let r = PollRound {
                        round: self.mgr.round_counter,
                        issued_at: self.now,
                        deadline: self.now + deadline,
                        pending: missing.iter().copied().collect(),
                        probe: true,
                        probe_population: missing.len(),
                    };
                    self.mgr.round_counter += 1;
                    for &target in &missing {
                        let avoid: Vec<NodeId> =
                            missing.iter().copied().filter(|&x| x != target).collect();
                        self.send_control(
                            self.mgr.node,
                            target,
                            ControlKind::Heartbeat { round: r.round, probe: true },
                            1,
                            &avoid,
                        );
                    }
                    self.mgr.current_round = Some(r);
                }
            }
        }
        if self.now % h == 0 && self.mgr.current_round.is_none() {
            let manager = self.mgr.node;
            // The manager is a node too: fold in its own link observations.
            let own_dead: Vec<(NodeId, PortId)> = (0..self.topo.port_count(manager))
                .filter(|&p| {
                    self.mgr.view.link_ok[manager][p]
                        && !(self.topo.port_usable(manager, p, self.now)
                            && self.topo.node_usable(self.topo.peer(manager, p), self.now))
                })
                .map(|p| (manager, p))
                .collect();
            if !own_dead.is_empty() {
                self.note_detection(Vec::new(), own_dead);
            }
            let targets: Vec<NodeId> = (0..self.topo.node_count())
                .filter(|&x| x != manager && self.mgr.view.usable(x))
                .collect();
            if targets.is_empty() {
                return;
            }
            let r = PollRound {
                round: self.mgr.round_counter,
                issued_at: self.now,
                deadline: self.now + deadline,
                pending: targets.iter().copied().collect(),
                probe: false,
                probe_population: 0,
            };
            self.mgr.round_counter += 1;
            for &t in &targets {
                self.send_control(
                    manager,
                    t,
                    ControlKind::Heartbeat { round: r.round, probe: false },
                    1,
                    &[],
                );
            }
            self.mgr.current_round = Some(r);
        }
    }

    fn note_detection(&mut self, dead_nodes: Vec<NodeId>, dead_links: Vec<(NodeId, PortId)>) {
        let mut dead_nodes: Vec<NodeId> =
            dead_nodes.into_iter().filter(|&x| self.mgr.view.usable(x)).collect();
        let dead_links: Vec<(NodeId, PortId)> =
            dead_links.into_iter().filter(|&(n, p)| self.mgr.view.link_ok[n][p]).collect();
        if dead_nodes.is_empty() && dead_links.is_empty() {
            return;
        }
        for &(n, p) in &dead_links {
            self.mgr.view.mark_link_dead(&self.topo, n, p);
            let peer = self.topo.peer(n, p);
            self.detected_elements.push(Element::Link { a: n.min(peer), b: n.max(peer), copy: 0 });
        }
        // A node whose every incident link is down is gone; fold the link
        // reports around a failed node into a node fault.
        for &(n, p) in &dead_links {
            for x in [n, self.topo.peer(n, p)] {
                if self.mgr.view.usable(x)
                    && !dead_nodes.contains(&x)
                    && (0..self.topo.port_count(x)).all(|q| !self.mgr.view.link_ok[x][q])
                {
                    dead_nodes.push(x);
                }
            }
        }
        for &x in &dead_nodes {
            self.mgr.view.mark_node_dead(x);
            self.detected_elements.push(Element::Node(x));
        }
        if std::env::var_os("NETSIM_MGR_DEBUG").is_some() {
            eprintln!("cycle {}: detection nodes {dead_nodes:?} links {dead_links:?}", self.now);
        }
        self.pending_detections.push((dead_nodes, dead_links));
        self.log_event("fault detected".into());
    }

    /// Start a reconfiguration covering all pending detections once the
    /// poll round that produced them has closed (so the fault picture is
    /// complete) and no transition is active.
    fn maybe_start_reconfig(&mut self) {
        if self.pending_detections.is_empty()
            || !matches!(self.transition, Transition::Idle)
            || self.mgr.current_round.is_some()
            || !self.topo.node_usable(self.mgr.node, self.now)
        {
            return;
        }
        if std::env::var_os("NETSIM_MGR_DEBUG").is_some() {
            eprintln!("cycle {}: starting reconfig for {} detections", self.now, self.pending_detections.len());
        }
        let batch = std::mem::take(&mut self.pending_detections);
        let mut dead_nodes: Vec<NodeId> = Vec::new();
        for (nodes, _) in &batch {
            dead_nodes.extend(nodes.iter().copied());
        }
        // Distance is measured to the failed component itself: a dead node,
        // or both endpoints of a dead link that isn't just collateral of a
        // dead node.
        let mut starts: Vec<NodeId> = dead_nodes.clone();
        for (_, links) in &batch {
            for &(n, p) in links {
                let peer = self.topo.peer(n, p);
                if !dead_nodes.contains(&n) && !dead_nodes.contains(&peer) {
                    starts.push(n);
                    starts.push(peer);
                }
            }
        }
        starts.sort_unstable();
        starts.dedup();

        // New tables on the manager's view of the surviving topology (the
        // manager knows only what detection told it, not the live faults).
        let mut view_topo = self.topo.pristine();
        for x in 0..view_topo.node_count() {
            if !self.mgr.view.node_ok[x] {
                let _ = view_topo.apply_fault(FaultEvent { element: Element::Node(x), cycle: 0 });
            }
        }
        for n in 0..view_topo.node_count() {
            for p in 0..view_topo.port_count(n) {
                if !self.mgr.view.link_ok[n][p] {
                    let peer = view_topo.peer(n, p);
                    for copy in 0..view_topo.port_copies(n, p) {
                        let _ = view_topo.apply_fault(FaultEvent {
                            element: Element::Link { a: n.min(peer), b: n.max(peer), copy },
                            cycle: 0,
                        });
                    }
                }
            }
        }
        let root = (0..view_topo.node_count()).find(|&x| self.mgr.view.usable(x)).unwrap();
        let new_table = match compute_up_down(&view_topo, root, 1) {
            Ok(t) => t,
            Err(e) => {
                if std::env::var_os("NETSIM_MGR_DEBUG").is_some() {
                    eprintln!("cycle {}: reconfig aborted: {e}", self.now);
                }
                self.log_event("reconfiguration aborted: surviving network is partitioned".into());
                return;
            }
        };
        let old = self.tables.last().unwrap();
        let delta = diff_tables(old, &new_table).expect("same node set");
        let epoch = self.tables.len() as u32;
        self.tables.push(new_table);

        let dist_from_fault = self.mgr.view.distances_from(&self.topo, &starts);
        let mut order: Vec<NodeId> =
            (0..self.topo.node_count()).filter(|&x| self.mgr.view.usable(x)).collect();
        order.sort_by_key(|&x| (dist_from_fault[x], x));

        let n = self.topo.node_count();
        self.current_report = Some(ReconfigReport {
            mechanism: self.mech().name().to_string(),
            epoch,
            trigger_cycle: self.last_trigger_cycle,
            detection_cycle: self.now,
            distribution_start: self.now,
            distribution_end: 0,
            completion_cycle: 0,
            update_cycles: Vec::new(),
            delta_entries: delta.len(),
            full_entries: n * (n - 1),
            teardowns_during: 0,
            tokens_sent: 0,
            drain_done_count: 0,
        });
        self.transition = match self.mech() {
            Mechanism::Dbr => Transition::Dbr,
            Mechanism::Ds => {
                let targets: Vec<NodeId> =
                    (0..n).filter(|&x| self.mgr.view.usable(x)).collect();
                for &t in &targets {
                    let manager = self.mgr.node;
                    self.send_control(manager, t, ControlKind::DsPrepare { epoch }, 1, &[]);
                }
                Transition::Ds(DsTransition {
                    epoch,
                    prepare_pending: targets.into_iter().collect(),
                    fresh_drained_at: None,
                    drain_start: None,
                    last_occupancy: u64::MAX,
                    drained_at: None,
                    drain_done_sent: vec![false; n],
                    drain_done_seen: 0,
                    restore_pending: None,
                    last_restore_at: 0,
                })
            }
            Mechanism::Sr => {
                let feeds = SrTransition::feeds_of(&self.tables[epoch as usize - 1], &self.topo);
                Transition::Sr(SrTransition {
                    epoch,
                    out_passed: (0..n).map(|x| vec![false; self.topo.port_count(x)]).collect(),
                    in_token: (0..n).map(|x| vec![false; self.topo.port_count(x)]).collect(),
                    feeds,
                    tokens_sent: 0,
                    complete: false,
                })
            }
        };
        self.dist = Some(Distribution {
            epoch,
            order,
            next: 0,
            awaiting_ack: None,
            awaiting_since: self.now,
            resend_count: 0,
            delta,
            started_at: self.now,
            finished_at: None,
        });
        self.log_event(format!("reconfiguration epoch {epoch} started"));
    }

    fn pump_distribution(&mut self) {
        self.maybe_start_reconfig();
        // Decide the next action without holding the borrow.
        enum Action {
            None,
            Abort,
            ApplyLocal(NodeId, u32),
            Send(NodeId, u32, u32),
            Resend(NodeId, u32, u32),
        }
        // DS distributes only after the fresh layer has drained.
        if let Transition::Ds(ds) = &self.transition {
            if ds.fresh_drained_at.is_none() {
                return;
            }
        }
        let action = match &mut self.dist {
            None => Action::None,
            Some(d) => {
                if d.finished_at.is_some() {
                    Action::None
                } else if let Some(waiting) = d.awaiting_ack {
                    // Lost update or ack (a fault mid-distribution): resend,
                    // give up once the target is clearly unreachable.
                    if self.now >= d.awaiting_since + 4 * self.cfg.control.reply_deadline {
                        d.awaiting_since = self.now;
                        d.resend_count += 1;
                        if d.resend_count > 8 {
                            Action::Abort
                        } else {
                            Action::Resend(
                                waiting,
                                d.epoch,
                                update_size_flits(&d.delta, waiting, self.topo.node_count()),
                            )
                        }
                    } else {
                        Action::None
                    }
                } else if d.next < d.order.len() {
                    let target = d.order[d.next];
                    d.next += 1;
                    if target == self.mgr.node {
                        if d.next == d.order.len() {
                            d.finished_at = Some(self.now);
                        }
                        Action::ApplyLocal(target, d.epoch)
                    } else {
                        d.awaiting_ack = Some(target);
                        d.awaiting_since = self.now;
                        Action::Send(
                            target,
                            d.epoch,
                            update_size_flits(&d.delta, target, self.topo.node_count()),
                        )
                    }
                } else {
                    Action::None
                }
            }
        };
        match action {
            Action::None => {}
            Action::Abort => {
                self.log_event(
                    "reconfiguration aborted: update target unreachable (network partitioned)"
                        .into(),
                );
                if let Some(d) = &mut self.dist {
                    d.finished_at = Some(self.now);
                }
            }
            Action::ApplyLocal(node, epoch) => self.apply_update(node, epoch),
            Action::Send(target, epoch, size) | Action::Resend(target, epoch, size) => {
                let manager = self.mgr.node;
                self.send_control(manager, target, ControlKind::TableUpdate { epoch }, size, &[]);
            }
        }
    }

    /// True when no VC of the given DS layer holds a flit or an owner.
    fn layer_empty(&self, layer: u32) -> bool {
        let v_per = self.net.vcs_per_channel;
        for node in &self.net.nodes {
            for vcs in &node.in_vcs {
                for (v, ivc) in vcs.iter().enumerate() {
                    if vc_in_layer(v, v_per, layer)
                        && (!ivc.fifo.is_empty() || ivc.kill_pending.is_some())
                    {
                        return false;
                    }
                }
            }
            for vcs in &node.out_vcs {
                for (v, ovc) in vcs.iter().enumerate() {
                    if vc_in_layer(v, v_per, layer) && ovc.owner.is_some() {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn advance_transition(&mut self) {
        let dist_done = self.dist.as_ref().and_then(|d| d.finished_at);
        let mut transition = std::mem::replace(&mut self.transition, Transition::Idle);
        let mut completed: Option<(u64, u64)> = None;
        match &mut transition {
            Transition::Idle => {}
            Transition::Dbr => {
                if let Some(end) = dist_done {
                    completed = Some((end, end));
                }
            }
            Transition::Ds(ds) => {
                let epoch = ds.epoch;
                let fresh = ds_layer(epoch);
                if ds.fresh_drained_at.is_none() {
                    // Phase 1: everything confined to the outgoing layer;
                    // wait for the fresh layer to empty completely.
                    if ds.prepare_pending.is_empty() && self.layer_empty(fresh) {
                        ds.fresh_drained_at = Some(self.now);
                    }
                } else {
                    // Old-epoch occupancy across the network.
                    let mut occupancy = 0u64;
                    for node in &self.net.nodes {
                        for vcs in &node.in_vcs {
                            for ivc in vcs {
                                occupancy += ivc
                                    .fifo
                                    .iter()
                                    .filter(|f| f.epoch < epoch && !f.stream_end)
                                    .count() as u64;
                            }
                        }
                    }
                    let old_injection_live = (0..self.topo.node_count()).any(|x| {
                        let s = &self.senders[x];
                        self.topo.node_usable(x, self.now)
                            && ((s.cur.is_some() && s.cur_epoch < epoch)
                                || (self.node_epoch[x] < epoch && !s.queue.is_empty()))
                    });
                    if ds.drain_start.is_none() && dist_done.is_some() && !old_injection_live {
                        ds.drain_start = Some(self.now);
                        ds.last_occupancy = occupancy;
                    }
                    if ds.drain_start.is_some() {
                        if occupancy > ds.last_occupancy && self.cfg.checks {
                            self.violations.ds_drain += 1;
                        }
                        ds.last_occupancy = occupancy;
                        if occupancy == 0 && !old_injection_live && ds.drained_at.is_none() {
                            ds.drained_at = Some(self.now);
                        }
                    }
                    // Per-node drain-done notifications once locally clear.
                    let mut to_send: Vec<NodeId> = Vec::new();
                    for x in 0..self.topo.node_count() {
                        if ds.drain_done_sent[x]
                            || !self.topo.node_usable(x, self.now)
                            || self.node_epoch[x] < epoch
                        {
                            continue;
                        }
                        let local_old = self.net.nodes[x]
                            .in_vcs
                            .iter()
                            .flatten()
                            .any(|ivc| ivc.fifo.iter().any(|f| f.epoch < epoch && !f.stream_end));
                        if !local_old {
                            ds.drain_done_sent[x] = true;
                            to_send.push(x);
                        }
                    }
                    let manager = self.mgr.node;
                    for x in to_send {
                        self.send_control(x, manager, ControlKind::DsDrainDone { epoch }, 1, &[]);
                    }
                    // Phase 3: old layer empty; restore normal operation.
                    if ds.drained_at.is_some() && ds.restore_pending.is_none() && dist_done.is_some()
                    {
                        let targets: Vec<NodeId> = (0..self.topo.node_count())
                            .filter(|&x| self.mgr.view.usable(x))
                            .collect();
                        ds.restore_pending = Some(targets.iter().copied().collect());
                        ds.last_restore_at = self.now;
                        for &t in &targets {
                            self.send_control(manager, t, ControlKind::DsRestore { epoch }, 1, &[]);
                        }
                    }
                    if let (Some(end), Some(pending)) = (dist_done, &ds.restore_pending) {
                        if pending.is_empty() {
                            if let Some(r) = &mut self.current_report {
                                r.drain_done_count = ds.drain_done_seen;
                            }
                            completed = Some((end, ds.last_restore_at));
                        }
                    }
                }
            }
            Transition::Sr(sr) => {
                let epoch = sr.epoch;
                // One evaluation per cycle: tokens advance at most one hop.
                let mut newly_passed: Vec<(NodeId, PortId)> = Vec::new();
                for n in 0..self.topo.node_count() {
                    if !self.topo.node_usable(n, self.now) || self.node_epoch[n] < epoch {
                        continue;
                    }
                    for p in 0..self.topo.port_count(n) {
                        if sr.out_passed[n][p]
                            || !self.topo.port_usable(n, p, self.now)
                            || !self.topo.node_usable(self.topo.peer(n, p), self.now)
                        {
                            continue;
                        }
                        if !self.sr_port_clear(sr, n, p, epoch) {
                            continue;
                        }
                        newly_passed.push((n, p));
                    }
                }
                for &(n, p) in &newly_passed {
                    sr.out_passed[n][p] = true;
                    sr.tokens_sent += 1;
                }
                let token_sends: Vec<(NodeId, NodeId)> = newly_passed
                    .iter()
                    .map(|&(n, p)| (n, self.topo.peer(n, p)))
                    .collect();
                for (n, peer) in token_sends {
                    self.send_control_path(vec![n, peer], ControlKind::SrToken { epoch }, 1);
                }
                // Completion: every live port has passed its token.
                let mut all_passed = true;
                'outer: for n in 0..self.topo.node_count() {
                    if !self.topo.node_usable(n, self.now) {
                        continue;
                    }
                    for p in 0..self.topo.port_count(n) {
                        if !self.topo.port_usable(n, p, self.now)
                            || !self.topo.node_usable(self.topo.peer(n, p), self.now)
                        {
                            continue;
                        }
                        if !sr.out_passed[n][p] {
                            all_passed = false;
                            break 'outer;
                        }
                    }
                }
                if all_passed {
                    if let Some(end) = dist_done {
                        if let Some(r) = &mut self.current_report {
                            r.tokens_sent = sr.tokens_sent;
                        }
                        completed = Some((end, end.max(self.now)));
                    }
                }
            }
        }
        if let Some((dist_end, completion)) = completed {
            if let Some(mut r) = self.current_report.take() {
                r.distribution_end = dist_end;
                r.completion_cycle = completion;
                self.log_event(format!("reconfiguration epoch {} complete at {completion}", r.epoch));
                self.reports.push(r);
            }
            self.dist = None;
            self.transition = Transition::Idle;
        } else {
            self.transition = transition;
        }
    }

    /// SR token-advance rule: all upstream inputs that can feed this output
    /// under the old function have passed their tokens, and no old-epoch
    /// message still holds or targets the port.
    fn sr_port_clear(&self, sr: &SrTransition, n: NodeId, p: PortId, epoch: u32) -> bool {
        let feeds = sr.feeds[n][p];
        for ip in 0..self.topo.port_count(n) {
            if feeds & (1 << ip) == 0 {
                continue;
            }
            let up_alive = self.topo.port_usable(n, ip, self.now)
                && self.topo.node_usable(self.topo.peer(n, ip), self.now);
            if up_alive && !sr.in_token[n][ip] {
                return false;
            }
        }
        for v in 0..self.net.nodes[n].out_vcs[p].len() {
            if let Some(owner) = self.net.nodes[n].out_vcs[p][v].owner {
                if let Some(ctl) = self.registry.get(&owner) {
                    if ctl.epoch < epoch {
                        return false;
                    }
                }
            }
        }
        for ip in 0..self.topo.port_count(n) {
            for iv in 0..self.lanes(n, ip) {
                let ivc = &self.net.nodes[n].in_vcs[ip][iv];
                for f in &ivc.fifo {
                    if f.epoch >= epoch || f.stream_end {
                        continue;
                    }
                    let heads_to = match ivc.route {
                        Some((rp, _)) => Some(rp),
                        None => self.tables[f.epoch as usize].first_port(n, f.dst),
                    };
                    if heads_to == Some(p) {
                        return false;
                    }
                }
            }
        }
        // Old injection still pending at this node toward p.
        let s = &self.senders[n];
        if s.cur.is_some()
            && s.cur_epoch < epoch
            && !matches!(s.state.status, SenderStatus::Idle)
        {
            let heads_to = s
                .inj_route
                .map(|(rp, _)| rp)
                .or_else(|| self.tables[s.cur_epoch as usize].first_port(n, s.cur_dst));
            if heads_to == Some(p) {
                return false;
            }
        }
        true
    }

    fn check_failover(&mut self) {
        if self.topo.node_usable(self.mgr.node, self.now) {
            return;
        }
        let threshold =
            2 * self.cfg.control.heartbeat_period + 2 * self.cfg.control.reply_deadline;
        let Some(lowest) =
            (0..self.topo.node_count()).find(|&x| self.topo.node_usable(x, self.now))
        else {
            return;
        };
        if self.now.saturating_sub(self.mgr.last_heartbeat_seen[lowest]) <= threshold {
            return;
        }
        let old = self.mgr.node;
        let mut mgr = ManagerState::new(&self.topo, lowest);
        // The new manager inherits the faults already reconfigured for and
        // starts a fresh poll history.
        for e in &self.detected_elements {
            match *e {
                Element::Node(x) => mgr.view.mark_node_dead(x),
                Element::Link { a, b, .. } => {
                    if let Some(p) = self.topo.ports(a).iter().position(|q| q.peer == b) {
                        mgr.view.mark_link_dead(&self.topo, a, p);
                    }
                }
            }
        }
        for x in 0..self.topo.node_count() {
            mgr.last_heartbeat_seen[x] = self.now;
        }
        self.mgr = mgr;
        self.log_event(format!("manager failover {old} -> {lowest}"));
    }

    // ---- phase 6: metrics ----

    fn phase_metrics(&mut self) {
        for node in 0..self.topo.node_count() {
            let injected = self.senders[node].injected_this_cycle;
            let status = self.senders[node].state.status;
            if !matches!(status, SenderStatus::Injecting | SenderStatus::Blocked) {
                continue;
            }
            let id = self.senders[node].cur;
            let new_state = sender_step(self.senders[node].state, injected, self.now);
            let went_idle = new_state.status == SenderStatus::Idle;
            self.senders[node].state = new_state;
            if went_idle {
                // Fully injected: the message leaves the injection queue and
                // finishes in flight.
                self.senders[node].cur = None;
                self.senders[node].queue.pop_front();
                if let Some(ctl) = id.and_then(|id| self.registry.get_mut(&id)) {
                    ctl.detached = true;
                }
            }
            if self.cfg.checks {
                let s = &self.senders[node].state;
                if s.guarantee > 0 && s.injected >= s.guarantee {
                    if let Some(ctl) = id.and_then(|id| self.registry.get(&id)) {
                        if ctl.header_consumed_at.is_none() && !ctl.condemned {
                            self.violations.fpath += 1;
                        }
                    }
                }
            }
        }

        // Global-stall oracle: quiet cycles while undelivered messages exist.
        if !self.moved_this_cycle && self.live > 0 {
            self.quiet_run += 1;
            if self.quiet_run >= self.cfg.stall_window && !self.stall_detected {
                self.stall_detected = true;
                self.first_stall = Some(self.now);
            }
        } else {
            self.quiet_run = 0;
        }
        self.moved_this_cycle = false;

        if self.cfg.checks && self.now % 1024 == 1023 {
            self.audit();
        }
        // Saturation evidence: mean source-queue length over the third vs
        // fourth quarter of the run.
        if self.now >= self.cfg.horizon / 2 && self.now < self.cfg.horizon {
            let total: u64 = self.senders.iter().map(|s| s.queue.len() as u64).sum();
            if self.now < 3 * self.cfg.horizon / 4 {
                self.queue_sum_q3 += total;
                self.queue_cycles_q3 += 1;
            } else {
                self.queue_sum_q4 += total;
                self.queue_cycles_q4 += 1;
            }
        }

        self.net.settle_credits();
        self.now += 1;
    }

    fn audit(&mut self) {
        if let Err(e) = self.audit_credits_live() {
            self.violations.credit += 1;
            if std::env::var_os("NETSIM_AUDIT_DEBUG").is_some() {
                eprintln!("cycle {}: credit audit: {e}", self.now);
            }
        }
        // Dropped counts removal events, not message outcomes; removed
        // messages stay queued for re-injection.
        let accounted = self.delivered + self.undeliverable + self.skipped;
        // A padded message can be delivered while its sender still injects
        // the pad remainder; it counts as delivered, not queued.
        let queued: u64 = self
            .senders
            .iter()
            .enumerate()
            .map(|(node, s)| {
                let mut q = s.queue.len() as u64;
                if let Some(front) = s.queue.front() {
                    if self.delivered_logical.contains(&(node as u16, front.seq)) {
                        q -= 1;
                    }
                }
                q
            })
            .sum();
        // In-flight messages: fully injected, not yet delivered or severed.
        let detached = self
            .registry
            .values()
            .filter(|c| c.detached && !c.sever_accounted && c.delivered_at.is_none())
            .count() as u64;
        if accounted + queued + detached != self.generated {
            self.violations.conservation += 1;
            if std::env::var_os("NETSIM_AUDIT_DEBUG").is_some() {
                eprintln!(
                    "cycle {}: conservation: gen {} = del {} + undeliv {} + drop {} + skip {} + queued {queued} + detached {detached}",
                    self.now, self.generated, self.delivered, self.undeliverable, self.dropped, self.skipped
                );
            }
        }
    }

    fn audit_credits_live(&self) -> Result<(), String> {
        for n in 0..self.topo.node_count() {
            if !self.topo.node_usable(n, self.now) {
                continue;
            }
            for p in 0..self.topo.port_count(n) {
                let peer = self.topo.peer(n, p);
                if !self.topo.node_usable(peer, self.now) {
                    continue;
                }
                let rp = self.topo.reverse_port(n, p);
                for v in 0..self.net.nodes[n].out_vcs[p].len() {
                    let out = &self.net.nodes[n].out_vcs[p][v];
                    if out.dead {
                        continue;
                    }
                    let ivc = &self.net.nodes[peer].in_vcs[rp][v];
                    let occ = ivc.fifo.len() as u32;
                    if out.credits + out.pending_credits + occ != self.net.buffer_depth {
                        return Err(format!(
                            "channel {n}/{p}/{v}: credits {} pending {} occ {occ} owner {:?} in-owner {:?}",
                            out.credits, out.pending_credits, out.owner, ivc.owner
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    // ---- run loop ----

    pub fn step(&mut self) {
        self.phase_faults();
        self.phase_traffic();
        self.phase_senders();
        self.phase_routers();
        self.phase_control();
        self.phase_metrics();
    }

    pub fn run(mut self) -> MetricsRecord {
        while self.now < self.cfg.horizon {
            self.step();
        }
        let drain_deadline = self.cfg.horizon + self.cfg.drain_limit;
        while self.cfg.drain_limit > 0 && self.live > 0 && self.now < drain_deadline {
            self.step();
        }
        self.finish()
    }

    pub fn finish(mut self) -> MetricsRecord {
        if self.cfg.checks {
            self.audit();
        }
        let measured_cycles = self.cfg.horizon.saturating_sub(self.cfg.warmup).max(1);
        let accepted: u64 =
            self.messages.iter().filter(|m| !m.warmup).map(|m| m.size as u64).sum();
        let series = window_series(&self.messages, self.cfg.series_window, self.now);
        let mut rec = MetricsRecord {
            seed: self.cfg.seed,
            cycles_run: self.now,
            generated: self.generated,
            delivered: self.delivered,
            delivered_measured: 0,
            undeliverable: self.undeliverable,
            retry_cap_hits: self.retry_cap_hits,
            dropped: self.dropped,
            skipped: self.skipped,
            teardowns: self.teardowns,
            retries: self.retries_total,
            self_deliveries: self.self_deliveries,
            residual: self.live,
            mean_latency: 0.0,
            p50_latency: 0,
            p95_latency: 0,
            p99_latency: 0,
            max_latency: 0,
            accepted_flits_per_node_cycle: accepted as f64
                / self.topo.node_count() as f64
                / measured_cycles as f64,
            pad_flits_injected: self.pad_flits_injected,
            data_flits_injected: self.data_flits_injected,
            saturated: {
                let q3 = self.queue_sum_q3 as f64 / self.queue_cycles_q3.max(1) as f64;
                let q4 = self.queue_sum_q4 as f64 / self.queue_cycles_q4.max(1) as f64;
                q4 > q3 + self.topo.node_count() as f64 * 0.05 + 1.0
            },
            stall_detected: self.stall_detected,
            first_stall_cycle: self.first_stall,
            activity: self.activity,
            energy: tally_energy(&self.activity, &self.cfg.energy),
            violations: self.violations,
            reconfigs: {
                let mut rs = self.reports;
                if let Some(r) = self.current_report {
                    rs.push(r);
                }
                rs
            },
            series_window: self.cfg.series_window,
            series,
            messages: self.messages,
            config: self.cfg,
        };
        rec.finalize_aggregates();
        rec
    }
}

/// One-shot convenience: build and run.
pub fn run_config(cfg: SimConfig) -> Result<MetricsRecord, Vec<String>> {
    Ok(Engine::new(cfg)?.run())
}

/// Independent run per rate with derived seeds; rates execute in parallel.
pub fn sweep_load(base: &SimConfig, rates: &[f64]) -> Result<Vec<MetricsRecord>, Vec<String>> {
    use rayon::prelude::*;
    base.validate()?;
    let cfgs: Vec<SimConfig> = rates
        .iter()
        .map(|&r| {
            let mut c = base.clone();
            c.traffic.rate = r;
            c
        })
        .collect();
    let results: Vec<Result<MetricsRecord, Vec<String>>> =
        cfgs.into_par_iter().map(run_config).collect();
    results.into_iter().collect()
}

/// Derive a replication seed deterministically from a base seed.
pub fn replication_seed(base: u64, replication: u64) -> u64 {
    derive_seed(base, 4, replication)
}

/// Smallest rate of a geometric scan that saturates the network, refined by
/// bisection; deterministic for a given config.
pub fn find_saturation(base: &SimConfig, probe_cycles: u64) -> f64 {
    let probe = |rate: f64| -> bool {
        let mut c = base.clone();
        c.traffic.rate = rate;
        c.horizon = probe_cycles;
        c.warmup = probe_cycles / 10;
        c.flit_trace = false;
        c.drain_limit = 0;
        run_config(c).map(|m| m.saturated).unwrap_or(true)
    };
    let mut hi = 0.002;
    while hi < 1.0 && !probe(hi) {
        hi *= 2.0;
    }
    hi = hi.min(1.0);
    let mut lo = hi / 2.0;
    for _ in 0..6 {
        let mid = (lo + hi) / 2.0;
        if probe(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_cfg() -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.topology.rows = 4;
        cfg.topology.cols = 4;
        cfg.horizon = 2000;
        cfg.warmup = 0;
        cfg.traffic.rate = 0.0;
        cfg.control.heartbeat_period = 0;
        cfg
    }

    #[test]
    fn zero_traffic_runs_to_horizon() {
        let rec = run_config(quiet_cfg()).unwrap();
        assert_eq!(rec.generated, 0);
        assert_eq!(rec.delivered, 0);
        assert_eq!(rec.cycles_run, 2000);
        assert_eq!(rec.activity.link_traversals, 0);
        assert_eq!(rec.energy.total, 0.0);
        assert!(!rec.stall_detected);
    }

    #[test]
    fn heartbeats_are_the_only_energy_in_an_idle_net() {
        let mut cfg = quiet_cfg();
        cfg.control.heartbeat_period = 256;
        let rec = run_config(cfg).unwrap();
        assert_eq!(rec.generated, 0);
        assert!(rec.activity.link_traversals > 0);
        assert_eq!(rec.activity.buffer_writes, 0);
    }

    #[test]
    fn single_message_zero_load_latency() {
        // h*P + (L-1) on an otherwise empty 8x8 torus.
        let mut cfg = SimConfig::default();
        cfg.horizon = 500;
        cfg.warmup = 0;
        cfg.traffic.pattern = crate::traffic::Pattern::Trace;
        cfg.traffic.trace_path = Some("unused".into());
        cfg.control.heartbeat_period = 0;
        let rec = Engine::with_trace(
            cfg,
            vec![TraceRecord { injection_cycle: 10, src: 0, dst: 5, size: 16 }],
        )
        .unwrap()
        .run();
        assert_eq!(rec.delivered, 1);
        let m = &rec.messages[0];
        let topo = Topology::build_torus(8, 8, 2, 4).unwrap();
        let table = compute_up_down(&topo, 0, 0).unwrap();
        let h = table.hop_distance(0, 5, &topo).unwrap() as u64;
        assert_eq!(m.latency(), h + 15, "h={h}");
        assert_eq!(m.hops as u64, h);
    }

    #[test]
    fn deterministic_metrics_bytes() {
        let mut cfg = SimConfig::default();
        cfg.topology.rows = 4;
        cfg.topology.cols = 4;
        cfg.horizon = 5000;
        cfg.warmup = 500;
        cfg.traffic.rate = 0.02;
        cfg.seed = 77;
        let a = run_config(cfg.clone()).unwrap().to_json();
        let b = run_config(cfg).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn conservation_and_safety_counters_clean() {
        let mut cfg = SimConfig::default();
        cfg.topology.rows = 4;
        cfg.topology.cols = 4;
        cfg.horizon = 8000;
        cfg.warmup = 500;
        cfg.traffic.rate = 0.03;
        cfg.drain_limit = 20_000;
        let rec = run_config(cfg).unwrap();
        assert!(rec.delivered > 0);
        assert_eq!(rec.residual, 0, "drained");
        assert_eq!(rec.delivered + rec.undeliverable, rec.generated);
        assert_eq!(rec.violations.total(), 0, "{:?}", rec.violations);
    }

    #[test]
    fn self_messages_deliver_locally_in_one_cycle() {
        let mut cfg = quiet_cfg();
        cfg.traffic.pattern = crate::traffic::Pattern::Trace;
        cfg.traffic.trace_path = Some("unused".into());
        cfg.allow_self_traffic = true;
        let rec = Engine::with_trace(
            cfg,
            vec![TraceRecord { injection_cycle: 5, src: 3, dst: 3, size: 16 }],
        )
        .unwrap()
        .run();
        assert_eq!(rec.self_deliveries, 1);
        assert_eq!(rec.messages[0].latency(), 1);
        assert_eq!(rec.messages[0].hops, 0);
    }
}
