//! Concurrency control protocols on top of the transaction core.

pub mod calvin;
mod common;
pub mod mvcc;
pub mod occ;
pub mod sundial;
pub mod twopl;


pub use calvin::Calvin;

use crate::txncore::{AttemptFn, Env, ProtocolKind};

/// Registers every owner-side tuple handler. Handler ids are disjoint across
/// protocols, so all of them can coexist.
pub fn register_handlers(env: &Env) {
    env.register_tuple_handler(common::H_READ, common::op_read);
    env.register_tuple_handler(common::H_LOCK_READ, common::op_lock_read);
    env.register_tuple_handler(common::H_WRITE_UNLOCK, common::op_write_unlock);
    env.register_tuple_handler(common::H_UNLOCK, common::op_unlock);
    env.register_tuple_handler(mvcc::H_MVCC_READ, mvcc::op_read);
    env.register_tuple_handler(mvcc::H_MVCC_LOCK, mvcc::op_lock);
    env.register_tuple_handler(sundial::H_SUNDIAL_RENEW, sundial::op_renew);
    env.register_tuple_handler(sundial::H_SUNDIAL_COMMIT, sundial::op_commit);
    env.register_tuple_handler(sundial::H_SUNDIAL_LOCK, sundial::op_lock);
    twopl::register(env);
}

/// Per-attempt logic of the coordinator-driven protocols. CALVIN has its own
/// engine and returns `None`.
pub fn attempt_fn(protocol: ProtocolKind) -> Option<AttemptFn> {
    match protocol {
        ProtocolKind::NoWait | ProtocolKind::WaitDie => Some(twopl::attempt),
        ProtocolKind::Occ => Some(occ::attempt),
        ProtocolKind::Mvcc => Some(mvcc::attempt),
        ProtocolKind::Sundial => Some(sundial::attempt),
        ProtocolKind::Calvin => None,
    }
}
