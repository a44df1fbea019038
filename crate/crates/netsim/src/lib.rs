//! Deterministic flit-level interconnection-network simulator.
//!
//! Models wormhole switching with virtual channels and credit-based flow
//! control, table-based up*/down* routing, and three dynamic-reconfiguration
//! mechanisms: deadlock-recovery-based reconfiguration (DBR), the Double
//! Scheme (DS), and Simple Reconfiguration (SR).

pub mod config;
pub mod dbr;
pub mod engine;
pub mod metrics;
pub mod reconfig;
pub mod routing;
pub mod topology;
pub mod traffic;
pub mod wormhole;

pub use topology::{Element, FaultEvent, NodeId, PortId, Topology};
