//! Simulation configuration and validation.
//!
//! Every parameter of an experiment lives here and is echoed into every
//! output file, so a result is reproducible from its own header.

use crate::topology::{Element, FaultEvent};
use crate::traffic::{Pattern, TrafficSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Dbr,
    Ds,
    Sr,
}

impl Mechanism {
    pub fn parse(s: &str) -> Option<Mechanism> {
        match s.to_ascii_lowercase().as_str() {
            "dbr" => Some(Mechanism::Dbr),
            "ds" => Some(Mechanism::Ds),
            "sr" => Some(Mechanism::Sr),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::Dbr => "dbr",
            Mechanism::Ds => "ds",
            Mechanism::Sr => "sr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKindCfg {
    Torus,
    Mesh,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyCfg {
    pub kind: TopologyKindCfg,
    pub rows: usize,
    pub cols: usize,
    pub vcs_per_channel: usize,
    pub buffer_depth: usize,
}

impl Default for TopologyCfg {
    fn default() -> Self {
        TopologyCfg {
            kind: TopologyKindCfg::Torus,
            rows: 8,
            cols: 8,
            vcs_per_channel: 2,
            buffer_depth: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingAlgorithm {
    /// Up*/down* from the lowest-id usable node.
    UpDown,
    /// Dimension-order with wraparound; deadlock-prone on a torus, used to
    /// exercise recovery.
    DimensionOrder,
}

/// Sender-side recovery parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DbrParams {
    /// Timeout threshold T in cycles.
    pub timeout: u32,
    pub backoff_min: u32,
    pub backoff_max: u32,
    pub retry_cap: u16,
}

impl Default for DbrParams {
    fn default() -> Self {
        DbrParams { timeout: 64, backoff_min: 16, backoff_max: 128, retry_cap: 50 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlParams {
    /// Heartbeat period in cycles; 0 disables the manager entirely.
    pub heartbeat_period: u64,
    /// Cycles the manager waits for status replies before suspecting nodes.
    pub reply_deadline: u64,
}

impl Default for ControlParams {
    fn default() -> Self {
        ControlParams { heartbeat_period: 256, reply_deadline: 96 }
    }
}

/// Activity-count energy coefficients, arbitrary units.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyCoefficients {
    /// Per flit per link traversal (1 mm link equivalent).
    pub link: f64,
    pub buffer_write: f64,
    pub buffer_read: f64,
    pub crossbar: f64,
}

impl Default for EnergyCoefficients {
    fn default() -> Self {
        EnergyCoefficients { link: 1.0, buffer_write: 0.5, buffer_read: 0.5, crossbar: 0.3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub topology: TopologyCfg,
    pub routing: RoutingAlgorithm,
    pub mechanism: Mechanism,
    pub traffic: TrafficSpec,
    pub dbr: DbrParams,
    pub control: ControlParams,
    pub energy: EnergyCoefficients,
    pub faults: Vec<FaultEvent>,
    pub horizon: u64,
    /// Cycles excluded from latency aggregates (by creation time).
    pub warmup: u64,
    pub seed: u64,
    /// Metadata only; reported in outputs.
    pub clock_frequency_hz: f64,
    /// Consecutive quiet cycles before the global-stall oracle fires.
    pub stall_window: u64,
    /// Keep simulating up to this many extra cycles after the horizon to
    /// drain in-flight traffic (injection stops at the horizon).
    pub drain_limit: u64,
    /// Time-series window in cycles.
    pub series_window: u64,
    /// Per-cycle safety counters (epoch ordering, layer disjointness,
    /// guarantee checks). Cheap; on by default.
    pub checks: bool,
    /// Per-movement flit trace log.
    pub flit_trace: bool,
    pub allow_self_traffic: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            topology: TopologyCfg::default(),
            routing: RoutingAlgorithm::UpDown,
            mechanism: Mechanism::Dbr,
            traffic: TrafficSpec::default(),
            dbr: DbrParams::default(),
            control: ControlParams::default(),
            energy: EnergyCoefficients::default(),
            faults: Vec::new(),
            horizon: 30_000,
            warmup: 3_000,
            seed: 1,
            clock_frequency_hz: 250.0e6,
            stall_window: 512,
            drain_limit: 0,
            series_window: 500,
            checks: true,
            flit_trace: false,
            allow_self_traffic: false,
        }
    }
}

impl SimConfig {
    /// Validate the whole config, collecting every violation.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errors = Vec::new();
        let t = &self.topology;
        let min_side = match t.kind {
            TopologyKindCfg::Torus => 2,
            TopologyKindCfg::Mesh => 1,
        };
        if t.rows < min_side || t.cols < min_side || t.rows * t.cols < 2 {
            errors.push(format!("topology: invalid dimensions {}x{}", t.rows, t.cols));
        }
        if t.vcs_per_channel < 1 {
            errors.push("topology: vcs_per_channel must be >= 1".into());
        }
        if t.buffer_depth < 1 {
            errors.push("topology: buffer_depth must be >= 1".into());
        }
        if self.mechanism == Mechanism::Ds && t.vcs_per_channel < 2 {
            errors.push(
                "mechanism: ds requires two sets of virtual channels (vcs_per_channel >= 2)"
                    .into(),
            );
        }
        if self.routing == RoutingAlgorithm::DimensionOrder && t.kind != TopologyKindCfg::Torus {
            errors.push("routing: dimension_order requires a torus".into());
        }
        let n = t.rows * t.cols;
        match self.traffic.pattern {
            Pattern::Uniform | Pattern::Hotspot => {
                if !(0.0..=1.0).contains(&self.traffic.rate) {
                    errors.push(format!("traffic: rate {} outside [0, 1]", self.traffic.rate));
                }
                if self.traffic.pattern == Pattern::Hotspot
                    && !(0.0..1.0).contains(&self.traffic.hotspot_fraction)
                    || self.traffic.hotspot_fraction <= 0.0
                {
                    errors.push(format!(
                        "traffic: hotspot_fraction {} outside (0, 1)",
                        self.traffic.hotspot_fraction
                    ));
                }
            }
            Pattern::Trace => {
                if self.traffic.trace_path.is_none() {
                    errors.push("traffic: pattern trace needs trace_path".into());
                }
            }
        }
        if self.traffic.message_size < 1 {
            errors.push("traffic: message_size must be >= 1".into());
        }
        if self.horizon <= self.warmup {
            errors.push(format!("run: horizon {} must exceed warmup {}", self.horizon, self.warmup));
        }
        if self.dbr.backoff_min > self.dbr.backoff_max {
            errors.push("dbr: backoff_min exceeds backoff_max".into());
        }
        if self.dbr.backoff_min == 0 {
            errors.push("dbr: backoff_min must be >= 1".into());
        }
        for f in &self.faults {
            match f.element {
                Element::Node(x) if x >= n => {
                    errors.push(format!("faults: node {x} outside 0..{n}"));
                }
                Element::Link { a, b, .. } if a >= n || b >= n => {
                    errors.push(format!("faults: link {a}-{b} outside 0..{n}"));
                }
                _ => {}
            }
        }
        if self.series_window == 0 {
            errors.push("run: series_window must be >= 1".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}
