//! The socket record shared by the user, receiver and timer activities.

use std::collections::VecDeque;
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::automaton::{FlagSet, TcpState};
use crate::segment::{Segment, DEFAULT_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SocketId(pub u32);

impl fmt::Display for SocketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SocketType {
    Stream,
    Dgram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Protocol {
    Tcp,
    Udp,
}

/// Socket events raised for waiting user calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct EventMask(u8);

impl EventMask {
    pub const EMPTY: EventMask = EventMask(0);
    pub const CONNECTED: EventMask = EventMask(0x01);
    pub const CLOSED: EventMask = EventMask(0x02);
    pub const TX_READY: EventMask = EventMask(0x04);
    pub const TX_DONE: EventMask = EventMask(0x08);
    pub const RX_READY: EventMask = EventMask(0x10);
    pub const LINK_RESET: EventMask = EventMask(0x20);

    const NAMED: [(EventMask, &'static str); 6] = [
        (EventMask::CONNECTED, "CONNECTED"),
        (EventMask::CLOSED, "CLOSED"),
        (EventMask::TX_READY, "TX_READY"),
        (EventMask::TX_DONE, "TX_DONE"),
        (EventMask::RX_READY, "RX_READY"),
        (EventMask::LINK_RESET, "LINK_RESET"),
    ];

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Option<EventMask> {
        (bits & !0x3f == 0).then_some(EventMask(bits))
    }

    pub fn contains(self, other: EventMask) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn intersects(self, other: EventMask) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn difference(self, other: EventMask) -> EventMask {
        EventMask(self.0 & !other.0)
    }

    pub fn intersection(self, other: EventMask) -> EventMask {
        EventMask(self.0 & other.0)
    }
}

impl std::ops::BitOr for EventMask {
    type Output = EventMask;

    fn bitor(self, rhs: EventMask) -> EventMask {
        EventMask(self.0 | rhs.0)
    }
}

impl std::ops::BitOrAssign for EventMask {
    fn bitor_assign(&mut self, rhs: EventMask) {
        self.0 |= rhs.0;
    }
}

impl fmt::Display for EventMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("NONE");
        }
        let names: Vec<&str> = Self::NAMED
            .iter()
            .filter(|(e, _)| self.contains(*e))
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&names.join("|"))
    }
}

pub const DEFAULT_TX_CAPACITY: usize = 64 * 1024;

/// A connection endpoint record.
///
/// `state` is private: the only way to move it is
/// [`change_state`](crate::automaton::change_state).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Socket {
    pub descriptor: SocketId,
    pub sock_type: SocketType,
    pub protocol: Protocol,
    pub local_ip: Option<Ipv4Addr>,
    pub local_port: u16,
    pub remote_ip: Option<Ipv4Addr>,
    pub remote_port: u16,
    /// User-call timeout in virtual time units.
    pub timeout: u64,
    state: TcpState,
    pub reset_flag: bool,
    /// Initial send sequence number used for the next SYN.
    pub iss: u32,
    pub snd_una: u32,
    pub snd_nxt: u32,
    pub rcv_nxt: u32,
    pub fin_received: bool,
    pub event_flags: EventMask,
    /// Bytes sent but not yet acknowledged.
    pub tx_buffer: VecDeque<u8>,
    pub tx_capacity: usize,
    pub rx_buffer: VecDeque<u8>,
    /// Segments queued for transmission; drained by the owning endpoint.
    pub outbound: VecDeque<Segment>,
}

impl Socket {
    pub fn new(descriptor: SocketId, sock_type: SocketType, protocol: Protocol) -> Socket {
        Socket {
            descriptor,
            sock_type,
            protocol,
            local_ip: None,
            local_port: 0,
            remote_ip: None,
            remote_port: 0,
            timeout: 0,
            state: TcpState::Closed,
            reset_flag: false,
            iss: 0,
            snd_una: 0,
            snd_nxt: 0,
            rcv_nxt: 0,
            fin_received: false,
            event_flags: EventMask::EMPTY,
            tx_buffer: VecDeque::new(),
            tx_capacity: DEFAULT_TX_CAPACITY,
            rx_buffer: VecDeque::new(),
            outbound: VecDeque::new(),
        }
    }

    pub fn state(&self) -> TcpState {
        self.state
    }

    pub(crate) fn set_state_unguarded(&mut self, state: TcpState) {
        self.state = state;
    }

    /// A stream socket parked in `state` with canonical addresses and
    /// sequence numbers, as a verification harness would set one up:
    /// local 10.0.0.1:49152, remote 10.0.0.2:80, ISS 5000, IRS 9000.
    /// States past our FIN carry one unacknowledged sequence number for it
    /// (until acknowledged); states past the peer's FIN have consumed it.
    pub fn fixture(state: TcpState) -> Socket {
        use TcpState::*;
        let mut s = Socket::new(SocketId(1), SocketType::Stream, Protocol::Tcp);
        s.timeout = 100;
        s.iss = FIXTURE_ISS;
        s.local_ip = Some(FIXTURE_LOCAL_IP);
        s.local_port = FIXTURE_LOCAL_PORT;
        s.state = state;
        if matches!(state, Closed | Listen) {
            return s;
        }
        s.remote_ip = Some(FIXTURE_REMOTE_IP);
        s.remote_port = FIXTURE_REMOTE_PORT;
        let iss = FIXTURE_ISS;
        let irs = FIXTURE_IRS;
        match state {
            SynSent => {
                s.snd_una = iss;
                s.snd_nxt = iss + 1;
            }
            SynReceived => {
                s.snd_una = iss;
                s.snd_nxt = iss + 1;
                s.rcv_nxt = irs + 1;
            }
            Established | CloseWait => {
                s.snd_una = iss + 1;
                s.snd_nxt = iss + 1;
                s.rcv_nxt = irs + 1;
            }
            FinWait1 | Closing | LastAck => {
                s.snd_una = iss + 1;
                s.snd_nxt = iss + 2;
                s.rcv_nxt = irs + 1;
            }
            FinWait2 | TimeWait => {
                s.snd_una = iss + 2;
                s.snd_nxt = iss + 2;
                s.rcv_nxt = irs + 1;
            }
            Closed | Listen => unreachable!(),
        }
        if matches!(state, CloseWait | Closing | LastAck | TimeWait) {
            s.rcv_nxt += 1;
            s.fin_received = true;
        }
        s
    }

    pub fn model(&self) -> SocketModel {
        SocketModel {
            sock_type: self.sock_type,
            protocol: self.protocol,
            local_ip: self.local_ip,
            local_port: self.local_port,
            remote_ip: self.remote_ip,
            remote_port: self.remote_port,
            state: self.state,
            reset_flag: self.reset_flag,
            snd_nxt: self.snd_nxt,
            rcv_nxt: self.rcv_nxt,
        }
    }

    /// A segment from this socket to its peer carrying the current
    /// `snd_nxt`/`rcv_nxt`.
    pub fn make_segment(&self, flags: FlagSet, payload: Vec<u8>) -> Segment {
        Segment {
            src_ip: self.local_ip.unwrap_or(Ipv4Addr::UNSPECIFIED),
            dst_ip: self.remote_ip.unwrap_or(Ipv4Addr::UNSPECIFIED),
            src_port: self.local_port,
            dest_port: self.remote_port,
            seq_num: self.snd_nxt,
            ack_num: self.rcv_nxt,
            flags,
            window: DEFAULT_WINDOW,
            checksum: 0,
            payload,
        }
    }

    /// The mirror of `make_segment`: what the peer would send to us.
    pub fn incoming_segment(&self, flags: FlagSet, seq_num: u32, ack_num: u32, len: usize) -> Segment {
        Segment {
            src_ip: self.remote_ip.unwrap_or(FIXTURE_REMOTE_IP),
            dst_ip: self.local_ip.unwrap_or(FIXTURE_LOCAL_IP),
            src_port: if self.remote_port == 0 { FIXTURE_REMOTE_PORT } else { self.remote_port },
            dest_port: self.local_port,
            seq_num,
            ack_num,
            flags,
            window: DEFAULT_WINDOW,
            checksum: 0,
            payload: vec![0; len],
        }
    }
}

pub const FIXTURE_LOCAL_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
pub const FIXTURE_REMOTE_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);
pub const FIXTURE_LOCAL_PORT: u16 = 49152;
pub const FIXTURE_REMOTE_PORT: u16 = 80;
pub const FIXTURE_ISS: u32 = 5000;
pub const FIXTURE_IRS: u32 = 9000;

/// Projection of a socket onto the fields a segment handler may legitimately
/// change. Two sockets are model-equal iff every projected field is equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SocketModel {
    pub sock_type: SocketType,
    pub protocol: Protocol,
    pub local_ip: Option<Ipv4Addr>,
    pub local_port: u16,
    pub remote_ip: Option<Ipv4Addr>,
    pub remote_port: u16,
    pub state: TcpState,
    pub reset_flag: bool,
    pub snd_nxt: u32,
    pub rcv_nxt: u32,
}

impl SocketModel {
    /// Model equality ignoring `state` and `reset_flag`.
    pub fn same_connection(&self, other: &SocketModel) -> bool {
        SocketModel {
            state: other.state,
            reset_flag: other.reset_flag,
            ..*self
        } == *other
    }
}
