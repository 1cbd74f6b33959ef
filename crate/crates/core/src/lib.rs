//! Multi-Paxos replication hardened against non-malicious arbitrary faults.
//!
//! Messages and log records carry checksums, every replica keeps a shadow
//! copy of the application state and checks each transition, and rolling
//! state digests are compared across replicas. A replica that detects
//! corruption it cannot mask stops for good, turning arbitrary faults into
//! crash-stop faults that Paxos already tolerates.

pub mod explore;
pub mod faultinject;
pub mod harness;
pub mod messages;
pub mod paxos;
pub mod replica;
pub mod storage;
pub mod sweep;
pub mod transport;
