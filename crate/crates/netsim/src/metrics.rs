//! Measurement: per-message records, latency aggregates, windowed time
//! series, activity-based energy tallies, and reconfiguration reports.
//!
//! Aggregates recompute exactly from the per-message records, and energy is
//! an integer-weighted sum of activity counts, so re-tallying from a flit
//! trace reproduces the totals bit-exactly.

use crate::config::{EnergyCoefficients, SimConfig};
use crate::topology::NodeId;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MessageRecord {
    pub src: NodeId,
    pub dst: NodeId,
    pub seq: u32,
    pub size: u32,
    pub created_at: u64,
    pub delivered_at: u64,
    pub hops: u32,
    pub retries: u16,
    /// Created during warmup; excluded from aggregates.
    pub warmup: bool,
}

impl MessageRecord {
    pub fn latency(&self) -> u64 {
        self.delivered_at - self.created_at
    }
}

/// Exact activity counts collected during a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityCounts {
    pub link_traversals: u64,
    pub buffer_writes: u64,
    pub buffer_reads: u64,
    pub crossbar_traversals: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct EnergyTotals {
    pub link: f64,
    pub buffer_write: f64,
    pub buffer_read: f64,
    pub crossbar: f64,
    pub total: f64,
}

/// Weighted sum per component; pad flits, control flits and torn-down flits
/// all count, since they consume real activity.
pub fn tally_energy(counts: &ActivityCounts, coeff: &EnergyCoefficients) -> EnergyTotals {
    let link = counts.link_traversals as f64 * coeff.link;
    let buffer_write = counts.buffer_writes as f64 * coeff.buffer_write;
    let buffer_read = counts.buffer_reads as f64 * coeff.buffer_read;
    let crossbar = counts.crossbar_traversals as f64 * coeff.crossbar;
    EnergyTotals { link, buffer_write, buffer_read, crossbar, total: link + buffer_write + buffer_read + crossbar }
}

/// Mean latency of messages delivered in each window; `None` marks windows
/// with no deliveries.
pub fn window_series(records: &[MessageRecord], window: u64, horizon: u64) -> Vec<Option<f64>> {
    assert!(window >= 1);
    let n_windows = horizon.div_ceil(window) as usize;
    let mut sums = vec![0u64; n_windows];
    let mut counts = vec![0u64; n_windows];
    for r in records {
        let w = (r.delivered_at / window) as usize;
        if w < n_windows {
            sums[w] += r.latency();
            counts[w] += 1;
        }
    }
    (0..n_windows)
        .map(|w| if counts[w] > 0 { Some(sums[w] as f64 / counts[w] as f64) } else { None })
        .collect()
}

/// One reconfiguration: trigger, detection, distribution and completion
/// timing plus mechanism-specific statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconfigReport {
    pub mechanism: String,
    pub epoch: u32,
    pub trigger_cycle: u64,
    pub detection_cycle: u64,
    pub distribution_start: u64,
    pub distribution_end: u64,
    pub completion_cycle: u64,
    /// (node, cycle the node swapped tables), in apply order.
    pub update_cycles: Vec<(NodeId, u64)>,
    pub delta_entries: usize,
    pub full_entries: usize,
    pub teardowns_during: u64,
    pub tokens_sent: u64,
    pub drain_done_count: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ViolationCounts {
    /// Delivery-guarantee check: injected >= F_path with header unconsumed.
    pub fpath: u64,
    /// Resources still owned by an attempt after its teardown finished.
    pub leak: u64,
    /// Old-epoch flit crossed a token-passed port.
    pub sr_epoch: u64,
    /// Flit allocated outside its epoch's VC layer.
    pub ds_layer: u64,
    /// Draining-layer occupancy grew after old injection ceased.
    pub ds_drain: u64,
    /// Credit-conservation audit failures (sampled).
    pub credit: u64,
    /// Foreign flit observed inside an owned VC.
    pub vc_order: u64,
    /// Message accounting stopped adding up.
    pub conservation: u64,
}

impl ViolationCounts {
    pub fn total(&self) -> u64 {
        self.fpath
            + self.leak
            + self.sr_epoch
            + self.ds_layer
            + self.ds_drain
            + self.credit
            + self.vc_order
            + self.conservation
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config: SimConfig,
    pub seed: u64,
    pub cycles_run: u64,
    pub generated: u64,
    pub delivered: u64,
    pub delivered_measured: u64,
    /// No route at injection, retry cap reached, or severed by a fault.
    pub undeliverable: u64,
    pub retry_cap_hits: u64,
    /// Worm-removal events under the baseline mechanisms: a worm blocked on
    /// a faulted channel is pulled from the network and its source
    /// re-injects it later.
    pub dropped: u64,
    /// Trace records skipped because their source was faulted.
    pub skipped: u64,
    pub teardowns: u64,
    pub retries: u64,
    pub self_deliveries: u64,
    /// Messages still queued or in flight when the run stopped.
    pub residual: u64,
    pub mean_latency: f64,
    pub p50_latency: u64,
    pub p95_latency: u64,
    pub p99_latency: u64,
    pub max_latency: u64,
    /// Delivered data flits (pads excluded) per node per measured cycle.
    pub accepted_flits_per_node_cycle: f64,
    pub pad_flits_injected: u64,
    pub data_flits_injected: u64,
    pub saturated: bool,
    pub stall_detected: bool,
    pub first_stall_cycle: Option<u64>,
    pub activity: ActivityCounts,
    pub energy: EnergyTotals,
    pub violations: ViolationCounts,
    pub reconfigs: Vec<ReconfigReport>,
    pub series_window: u64,
    pub series: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub messages: Vec<MessageRecord>,
}

impl MetricsRecord {
    /// Recompute latency aggregates from the per-message records.
    pub fn finalize_aggregates(&mut self) {
        let mut lat: Vec<u64> =
            self.messages.iter().filter(|m| !m.warmup).map(|m| m.latency()).collect();
        lat.sort_unstable();
        self.delivered_measured = lat.len() as u64;
        if lat.is_empty() {
            self.mean_latency = 0.0;
            self.p50_latency = 0;
            self.p95_latency = 0;
            self.p99_latency = 0;
            self.max_latency = 0;
            return;
        }
        self.mean_latency = lat.iter().sum::<u64>() as f64 / lat.len() as f64;
        let pct = |q: f64| lat[((lat.len() - 1) as f64 * q) as usize];
        self.p50_latency = pct(0.50);
        self.p95_latency = pct(0.95);
        self.p99_latency = pct(0.99);
        self.max_latency = *lat.last().unwrap();
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// Per-message CSV with a config-echo header.
    pub fn messages_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push_str("src,dst,seq,size,created_at,delivered_at,latency,hops,retries,warmup\n");
        for m in &self.messages {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                m.src,
                m.dst,
                m.seq,
                m.size,
                m.created_at,
                m.delivered_at,
                m.latency(),
                m.hops,
                m.retries,
                m.warmup as u8
            ));
        }
        out
    }

    /// Windowed mean-latency CSV; empty cell marks a window without
    /// deliveries.
    pub fn series_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push_str("window_start,mean_latency\n");
        for (i, v) in self.series.iter().enumerate() {
            match v {
                Some(x) => out.push_str(&format!("{},{x}\n", i as u64 * self.series_window)),
                None => out.push_str(&format!("{},\n", i as u64 * self.series_window)),
            }
        }
        out
    }

    fn csv_header(&self) -> String {
        let cfg = serde_json::to_string(&self.config).expect("config serialize");
        format!("# seed={} config={}\n", self.seed, cfg)
    }

    pub fn report_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "mechanism {}  seed {}  cycles {}\n",
            self.config.mechanism.name(),
            self.seed,
            self.cycles_run
        ));
        s.push_str(&format!(
            "generated {}  delivered {}  undeliverable {}  dropped {}  skipped {}  residual {}\n",
            self.generated, self.delivered, self.undeliverable, self.dropped, self.skipped, self.residual
        ));
        s.push_str(&format!(
            "teardowns {}  retries {}  retry-cap hits {}\n",
            self.teardowns, self.retries, self.retry_cap_hits
        ));
        s.push_str(&format!(
            "latency mean {:.2}  p50 {}  p95 {}  p99 {}  max {}\n",
            self.mean_latency, self.p50_latency, self.p95_latency, self.p99_latency, self.max_latency
        ));
        s.push_str(&format!(
            "accepted {:.6} flits/node/cycle  saturated {}  stall {}\n",
            self.accepted_flits_per_node_cycle, self.saturated, self.stall_detected
        ));
        s.push_str(&format!(
            "energy total {:.1} (link {:.1} write {:.1} read {:.1} xbar {:.1})\n",
            self.energy.total,
            self.energy.link,
            self.energy.buffer_write,
            self.energy.buffer_read,
            self.energy.crossbar
        ));
        s.push_str(&format!("violations total {}\n", self.violations.total()));
        for r in &self.reconfigs {
            s.push_str(&format!(
                "reconfig epoch {} ({}): trigger {} detection {} distribution {}..{} completion {} ({} updates, {} delta entries)\n",
                r.epoch,
                r.mechanism,
                r.trigger_cycle,
                r.detection_cycle,
                r.distribution_start,
                r.distribution_end,
                r.completion_cycle,
                r.update_cycles.len(),
                r.delta_entries
            ));
        }
        s
    }
}
