pub mod netsim;
pub mod store;
pub mod workload;
pub mod verify;
pub mod txncore;
pub mod protocols;
pub mod harness;
