//! Record of every transmitted payload.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::federation::payload::PayloadKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::ClientToServer => "C2S",
            Direction::ServerToClient => "S2C",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "C2S" => Some(Direction::ClientToServer),
            "S2C" => Some(Direction::ServerToClient),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Party {
    Server,
    Client(u32),
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Server => f.write_str("server"),
            Party::Client(c) => write!(f, "{c}"),
        }
    }
}

impl Party {
    pub fn parse(s: &str) -> Option<Self> {
        if s == "server" {
            Some(Party::Server)
        } else {
            s.parse().ok().map(Party::Client)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerRecord {
    /// Global round counter, starting at 1.
    pub round: u64,
    pub task: u32,
    pub direction: Direction,
    pub sender: Party,
    pub receiver: Party,
    pub kind: PayloadKind,
    pub nonzeros: u64,
    pub value_bytes: u64,
    pub wire_bytes: u64,
}

/// Byte and value sums for one direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Totals {
    pub messages: u64,
    pub nonzeros: u64,
    pub value_bytes: u64,
    pub wire_bytes: u64,
}

impl Totals {
    fn add(&mut self, r: &LedgerRecord) {
        self.messages += 1;
        self.nonzeros += r.nonzeros;
        self.value_bytes += r.value_bytes;
        self.wire_bytes += r.wire_bytes;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommLedger {
    records: Vec<LedgerRecord>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record. Rounds never go backwards and the server is on
    /// exactly one side of every message.
    pub fn record(&mut self, rec: LedgerRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.round < last.round {
                return Err(Error::Protocol(format!(
                    "record for round {} after round {}",
                    rec.round, last.round
                )));
            }
        }
        let consistent = match rec.direction {
            Direction::ClientToServer => {
                matches!(rec.sender, Party::Client(_)) && rec.receiver == Party::Server
            }
            Direction::ServerToClient => {
                rec.sender == Party::Server && matches!(rec.receiver, Party::Client(_))
            }
        };
        if !consistent {
            return Err(Error::Protocol(format!(
                "{} record from {} to {}",
                rec.direction.name(),
                rec.sender,
                rec.receiver
            )));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sums over records matching `filter`.
    pub fn totals_where(&self, mut filter: impl FnMut(&LedgerRecord) -> bool) -> Totals {
        let mut t = Totals::default();
        for r in self.records.iter().filter(|r| filter(r)) {
            t.add(r);
        }
        t
    }

    pub fn totals(&self, direction: Direction) -> Totals {
        self.totals_where(|r| r.direction == direction)
    }
}
