use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    NoWait,
    WaitDie,
    Occ,
    Mvcc,
    Sundial,
    Calvin,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 6] = [
        ProtocolKind::NoWait,
        ProtocolKind::WaitDie,
        ProtocolKind::Occ,
        ProtocolKind::Mvcc,
        ProtocolKind::Sundial,
        ProtocolKind::Calvin,
    ];

    /// Communication stages selectable by a hybrid code, earliest first.
    pub fn stages(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            ProtocolKind::NoWait | ProtocolKind::WaitDie => &[Fetch, Log, Commit],
            ProtocolKind::Occ => &[Read, Lock, Validate, Log, Commit, Release],
            ProtocolKind::Mvcc => &[Read, Lock, Log, Commit],
            ProtocolKind::Sundial => &[Read, Lock, Renew, Log, Commit],
            ProtocolKind::Calvin => &[Broadcast, Forward],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::NoWait => "nowait",
            ProtocolKind::WaitDie => "waitdie",
            ProtocolKind::Occ => "occ",
            ProtocolKind::Mvcc => "mvcc",
            ProtocolKind::Sundial => "sundial",
            ProtocolKind::Calvin => "calvin",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ProtocolKind::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown protocol {s:?}"))
    }
}

/// Phases of a transaction. The communication stages appear in hybrid
/// codes; `Execute` and `Backoff` only exist in the latency ledger.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Fetch,
    Read,
    Lock,
    Validate,
    Renew,
    Log,
    Commit,
    Release,
    Broadcast,
    Forward,
    Execute,
    Backoff,
}

impl Stage {
    pub const COUNT: usize = 12;
    pub const ALL: [Stage; Stage::COUNT] = [
        Stage::Fetch,
        Stage::Read,
        Stage::Lock,
        Stage::Validate,
        Stage::Renew,
        Stage::Log,
        Stage::Commit,
        Stage::Release,
        Stage::Broadcast,
        Stage::Forward,
        Stage::Execute,
        Stage::Backoff,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Primitive {
    Rpc,
    OneSided,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum HybridError {
    #[error("{protocol} has {width} stages ({stages}); hybrid code {code:?} has {got} digits")]
    Width {
        protocol: ProtocolKind,
        width: usize,
        stages: String,
        code: String,
        got: usize,
    },
    #[error("hybrid code {0:?} must contain only 0 and 1")]
    Digit(String),
}

/// One digit per protocol stage: 0 selects two-sided RPC, 1 one-sided
/// verbs. The most significant (leftmost) digit is the earliest stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HybridCode {
    pub protocol: ProtocolKind,
    pub bits: u32,
}

impl HybridCode {
    pub fn width(&self) -> usize {
        self.protocol.stages().len()
    }

    pub fn rpc(protocol: ProtocolKind) -> Self {
        HybridCode { protocol, bits: 0 }
    }

    pub fn one_sided(protocol: ProtocolKind) -> Self {
        HybridCode {
            protocol,
            bits: (1 << protocol.stages().len()) - 1,
        }
    }

    pub fn parse(protocol: ProtocolKind, code: &str) -> Result<Self, HybridError> {
        let width = protocol.stages().len();
        if code.len() != width {
            let stages: Vec<String> = protocol.stages().iter().map(|s| format!("{s:?}")).collect();
            return Err(HybridError::Width {
                protocol,
                width,
                stages: stages.join(", "),
                code: code.into(),
                got: code.chars().count(),
            });
        }
        let bits = code.chars().try_fold(0u32, |acc, c| match c {
            '0' => Ok(acc << 1),
            '1' => Ok((acc << 1) | 1),
            _ => Err(HybridError::Digit(code.into())),
        })?;
        Ok(HybridCode { protocol, bits })
    }

    /// Primitive for `stage`. Aborting lock releases of protocols without a
    /// Release digit follow their Commit digit; stages a protocol does not
    /// have map to RPC.
    pub fn primitive(&self, stage: Stage) -> Primitive {
        let stages = self.protocol.stages();
        let stage = if stage == Stage::Release && !stages.contains(&Stage::Release) {
            Stage::Commit
        } else {
            stage
        };
        match stages.iter().position(|&s| s == stage) {
            Some(i) if self.bits >> (stages.len() - 1 - i) & 1 == 1 => Primitive::OneSided,
            _ => Primitive::Rpc,
        }
    }

    pub fn is_pure_rpc(&self) -> bool {
        self.bits == 0
    }

    pub fn is_pure_one_sided(&self) -> bool {
        *self == Self::one_sided(self.protocol)
    }
}

impl fmt::Display for HybridCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:0width$b}", self.bits, width = self.width())
    }
}

/// Every hybrid code of the protocol, from all-RPC (0) to all-one-sided.
pub fn enumerate_hybrids(protocol: ProtocolKind) -> Vec<HybridCode> {
    (0..1u32 << protocol.stages().len())
        .map(|bits| HybridCode { protocol, bits })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_sizes() {
        assert_eq!(enumerate_hybrids(ProtocolKind::NoWait).len(), 8);
        assert_eq!(enumerate_hybrids(ProtocolKind::Occ).len(), 64);
        assert_eq!(enumerate_hybrids(ProtocolKind::Mvcc).len(), 16);
        assert_eq!(enumerate_hybrids(ProtocolKind::Sundial).len(), 32);
        let all = enumerate_hybrids(ProtocolKind::Mvcc);
        assert!(all[0].is_pure_rpc());
        assert!(all.last().unwrap().is_pure_one_sided());
    }

    #[test]
    fn leftmost_digit_is_earliest_stage() {
        let c = HybridCode::parse(ProtocolKind::Occ, "101100").unwrap();
        assert_eq!(c.to_string(), "101100");
        assert_eq!(c.primitive(Stage::Read), Primitive::OneSided);
        assert_eq!(c.primitive(Stage::Lock), Primitive::Rpc);
        assert_eq!(c.primitive(Stage::Validate), Primitive::OneSided);
        assert_eq!(c.primitive(Stage::Log), Primitive::OneSided);
        assert_eq!(c.primitive(Stage::Commit), Primitive::Rpc);
        assert_eq!(c.primitive(Stage::Release), Primitive::Rpc);
    }

    #[test]
    fn release_follows_commit_without_its_own_digit() {
        let c = HybridCode::parse(ProtocolKind::NoWait, "001").unwrap();
        assert_eq!(c.primitive(Stage::Release), Primitive::OneSided);
        assert_eq!(c.primitive(Stage::Fetch), Primitive::Rpc);
    }

    #[test]
    fn wrong_width_names_the_stage_count() {
        let err = HybridCode::parse(ProtocolKind::Mvcc, "101").unwrap_err();
        assert!(err.to_string().contains("mvcc has 4 stages"));
        assert!(HybridCode::parse(ProtocolKind::Mvcc, "10a1").is_err());
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in ProtocolKind::ALL {
            assert_eq!(p.name().parse::<ProtocolKind>().unwrap(), p);
        }
    }
}
