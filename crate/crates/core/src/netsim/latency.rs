use serde::{Deserialize, Serialize};

use super::SimTime;

/// Costs charged by the simulator, in integer sim-time units (one unit is
/// read as one simulated microsecond by the harness).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    /// Round trip of one doorbell batch of one-sided verbs.
    pub one_sided_rt: SimTime,
    /// Round trip of a two-sided RPC, excluding queueing at the remote CPU.
    pub rpc_rt: SimTime,
    /// CPU cost of one local operation (local tuple access, RPC handler).
    pub local_op: SimTime,
    /// Extra delay between consecutive verbs of one batch.
    pub per_verb_overhead: SimTime,
    /// Upper bound of a seeded uniform delay added to every network message.
    /// Zero disables jitter.
    pub jitter: SimTime,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            one_sided_rt: 2,
            rpc_rt: 4,
            local_op: 1,
            per_verb_overhead: 0,
            jitter: 0,
        }
    }
}

impl LatencyModel {
    /// Time from posting until the first verb of a batch reaches remote memory.
    pub(crate) fn one_sided_outbound(&self) -> SimTime {
        self.one_sided_rt / 2
    }

    pub(crate) fn one_sided_inbound(&self) -> SimTime {
        self.one_sided_rt - self.one_sided_outbound()
    }

    pub(crate) fn rpc_outbound(&self) -> SimTime {
        self.rpc_rt / 2
    }

    pub(crate) fn rpc_inbound(&self) -> SimTime {
        self.rpc_rt - self.rpc_outbound()
    }
}
