use serde::{Deserialize, Serialize};

use crate::netsim::Endpoint;

/// Packed 64-bit timestamp: `clock(40) | machine(8) | thread(8) | coro(8)`.
/// Integer order is timestamp order; 0 means "none" / "unlocked".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Timestamp(pub u64);

pub const CLOCK_BITS: u32 = 40;
pub const ID_BITS: u32 = 24;
pub const ID_MASK: u64 = (1 << ID_BITS) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("timestamp field {field} = {value} does not fit")]
pub struct TimestampError {
    pub field: &'static str,
    pub value: u64,
}

impl Timestamp {
    pub const NONE: Timestamp = Timestamp(0);

    pub fn pack(clock: u64, machine: u64, thread: u64, coro: u64) -> Result<Timestamp, TimestampError> {
        for (field, value, bits) in [("clock", clock, CLOCK_BITS), ("machine", machine, 8), ("thread", thread, 8), ("coro", coro, 8)] {
            if value >> bits != 0 {
                return Err(TimestampError { field, value });
            }
        }
        Ok(Timestamp((clock << ID_BITS) | (machine << 16) | (thread << 8) | coro))
    }

    pub fn clock(self) -> u64 {
        self.0 >> ID_BITS
    }

    pub fn machine(self) -> u64 {
        (self.0 >> 16) & 0xff
    }

    pub fn thread(self) -> u64 {
        (self.0 >> 8) & 0xff
    }

    pub fn coro(self) -> u64 {
        self.0 & 0xff
    }

    /// The machine/thread/coroutine suffix.
    pub fn ids(self) -> u64 {
        self.0 & ID_MASK
    }

    pub fn is_none(self) -> bool {
        self.0 == 0
    }
}

impl std::fmt::Display for Timestamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}.{}.{}", self.clock(), self.machine(), self.thread(), self.coro())
    }
}

/// Per-coroutine logical clock. Starts at 0 and is incremented before each
/// use, so generated timestamps are never 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clock {
    counter: u64,
    ids: Timestamp,
}

impl Clock {
    pub fn new(ep: Endpoint) -> Result<Clock, TimestampError> {
        Ok(Clock {
            counter: 0,
            ids: Timestamp::pack(0, ep.node as u64, ep.thread as u64, ep.coro as u64)?,
        })
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next(&mut self) -> Timestamp {
        self.counter += 1;
        assert!(self.counter < 1 << CLOCK_BITS, "logical clock overflow");
        Timestamp((self.counter << ID_BITS) | self.ids.0)
    }

    /// Raises the clock to the clock part of `observed`; never lowers it.
    pub fn adjust(&mut self, observed: Timestamp) {
        self.counter = self.counter.max(observed.clock());
    }

    /// Smallest timestamp `>= floor` carrying this clock's id suffix.
    pub fn at_least(&self, floor: u64) -> Timestamp {
        let ids = self.ids.0;
        let base = floor & !ID_MASK;
        let candidate = base | ids;
        Timestamp(if candidate >= floor { candidate } else { candidate + (1 << ID_BITS) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn packing_matches_declared_layout() {
        assert_eq!(Timestamp::pack(1, 2, 3, 4).unwrap().0, (1 << 24) | (2 << 16) | (3 << 8) | 4);
        assert_eq!(Timestamp::pack(0, 0, 0, 0).unwrap(), Timestamp::NONE);
        assert!(Timestamp::pack(1 << 40, 0, 0, 0).is_err());
        assert!(Timestamp::pack(0, 256, 0, 0).is_err());
    }

    #[test]
    fn clock_never_hands_out_zero_and_never_decreases() {
        let mut c = Clock::new(Endpoint::new(0, 0, 0)).unwrap();
        assert_ne!(c.next(), Timestamp::NONE);
        c.adjust(Timestamp::pack(9, 1, 1, 1).unwrap());
        assert_eq!(c.counter(), 9);
        c.adjust(Timestamp::pack(5, 1, 1, 1).unwrap());
        assert_eq!(c.counter(), 9);
        assert_eq!(c.next().clock(), 10);
    }

    #[test]
    fn at_least_keeps_the_suffix() {
        let c = Clock::new(Endpoint::new(1, 2, 3)).unwrap();
        let floor = Timestamp::pack(7, 9, 9, 9).unwrap().0;
        let t = c.at_least(floor);
        assert!(t.0 >= floor);
        assert_eq!((t.machine(), t.thread(), t.coro()), (1, 2, 3));
        assert_eq!(t.clock(), 8);
        assert_eq!(c.at_least(Timestamp::pack(7, 0, 0, 0).unwrap().0).clock(), 7);
    }

    proptest! {
        #[test]
        fn unpack_inverts_pack(clock in 0u64..1 << 40, m in 0u64..256, t in 0u64..256, c in 0u64..256) {
            let ts = Timestamp::pack(clock, m, t, c).unwrap();
            prop_assert_eq!((ts.clock(), ts.machine(), ts.thread(), ts.coro()), (clock, m, t, c));
        }

        #[test]
        fn higher_clock_dominates(a in 1u64..1 << 39, ids1 in 0u64..1 << 24, ids2 in 0u64..1 << 24) {
            let x = Timestamp::pack(a, ids1 >> 16, (ids1 >> 8) & 0xff, ids1 & 0xff).unwrap();
            let y = Timestamp::pack(a + 1, ids2 >> 16, (ids2 >> 8) & 0xff, ids2 & 0xff).unwrap();
            prop_assert!(x < y);
        }

        #[test]
        fn adjust_is_a_running_max(obs in prop::collection::vec(0u64..1000, 0..50)) {
            let mut c = Clock::new(Endpoint::new(0, 0, 0)).unwrap();
            for &o in &obs {
                c.adjust(Timestamp::pack(o, 0, 0, 0).unwrap());
            }
            prop_assert_eq!(c.counter(), obs.iter().copied().max().unwrap_or(0));
        }
    }
}
