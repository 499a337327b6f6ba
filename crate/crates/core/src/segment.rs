use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::automaton::FlagSet;

/// An abstract TCP segment. Addresses come from the IP pseudo-header; the
/// checksum is carried but never verified.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segment {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dest_port: u16,
    pub seq_num: u32,
    pub ack_num: u32,
    pub flags: FlagSet,
    pub window: u16,
    pub checksum: u16,
    pub payload: Vec<u8>,
}

pub const DEFAULT_WINDOW: u16 = 26883;

impl Segment {
    /// Payload byte count.
    pub fn length(&self) -> usize {
        self.payload.len()
    }

    /// Sequence space consumed: payload bytes plus one each for SYN and FIN.
    pub fn seq_len(&self) -> u32 {
        let mut n = self.payload.len() as u32;
        if self.flags.contains(FlagSet::SYN) {
            n += 1;
        }
        if self.flags.contains(FlagSet::FIN) {
            n += 1;
        }
        n
    }

    pub fn summary(&self) -> SegmentSummary {
        SegmentSummary {
            flags: self.flags,
            seq_num: self.seq_num,
            ack_num: self.ack_num,
            length: self.payload.len(),
        }
    }
}

/// The fields of a segment a conformance report cares about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub flags: FlagSet,
    pub seq_num: u32,
    pub ack_num: u32,
    pub length: usize,
}

impl fmt::Display for SegmentSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "flags={} seq={} ack={} len={}",
            self.flags, self.seq_num, self.ack_num, self.length
        )
    }
}

/// Sequence-space comparison modulo 2^32.
pub(crate) fn seq_lt(a: u32, b: u32) -> bool {
    (a.wrapping_sub(b) as i32) < 0
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seq_comparison_wraps() {
        assert!(seq_lt(1, 2));
        assert!(seq_lt(u32::MAX, 0));
        assert!(!seq_lt(0, u32::MAX));
        assert!(!seq_lt(7, 7));
    }

    #[test]
    fn seq_len_counts_control_flags() {
        let mut seg = Segment {
            src_ip: Ipv4Addr::LOCALHOST,
            dst_ip: Ipv4Addr::LOCALHOST,
            src_port: 1,
            dest_port: 2,
            seq_num: 0,
            ack_num: 0,
            flags: FlagSet::SYN | FlagSet::FIN,
            window: DEFAULT_WINDOW,
            checksum: 0,
            payload: vec![1, 2, 3],
        };
        assert_eq!(seg.seq_len(), 5);
        seg.flags = FlagSet::ACK;
        assert_eq!(seg.seq_len(), 3);
        assert_eq!(seg.summary().to_string(), "flags=ACK seq=0 ack=0 len=3");
    }
}
