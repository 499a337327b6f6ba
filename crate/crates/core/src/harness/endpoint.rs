use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::TimerConfig;
use crate::automaton::{change_state, FlagSet, TcpState, TransitionViolation};
use crate::engine::{update_events, Engine};
use crate::segment::Segment;
use crate::socket::{EventMask, Protocol, Socket, SocketId, SocketModel, SocketType};

pub const EPHEMERAL_BASE: u16 = 49152;

/// The three kinds of activity that may touch a socket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activity {
    User,
    Receiver,
    Timer,
}

#[derive(Debug, Clone)]
pub struct Retransmit {
    pub segment: Segment,
    pub deadline: u64,
    pub retries: u32,
}

#[derive(Debug, Clone)]
pub struct SocketSlot {
    pub sock: Socket,
    /// State as of the last settle; differences become trace records.
    pub last_state: TcpState,
    pub entered_at: u64,
    pub last_events: EventMask,
    pub rtx: Option<Retransmit>,
    /// Closed by the user but still finishing its close handshake.
    pub orphaned: bool,
    /// State when the user task last let go of the guard.
    pub released_state: Option<TcpState>,
    owner: Option<Activity>,
}

impl SocketSlot {
    fn new(sock: Socket, now: u64) -> SocketSlot {
        SocketSlot {
            last_state: sock.state(),
            last_events: update_events(&sock),
            sock,
            entered_at: now,
            rtx: None,
            orphaned: false,
            released_state: None,
            owner: None,
        }
    }

    /// Runs `f` holding the socket's exclusion guard on behalf of `who`.
    pub fn guarded<R>(&mut self, who: Activity, f: impl FnOnce(&mut Socket) -> R) -> R {
        assert!(
            self.owner.is_none(),
            "socket {} mutated by {:?} while held by {:?}",
            self.sock.descriptor,
            who,
            self.owner
        );
        self.owner = Some(who);
        let r = f(&mut self.sock);
        self.owner = None;
        r
    }

    /// Earliest pending timer deadline of this socket.
    pub fn next_deadline(&self, timers: &TimerConfig) -> Option<u64> {
        let state_timer = match self.sock.state() {
            TcpState::TimeWait => Some(timers.quantize(self.entered_at + timers.time_wait())),
            TcpState::SynReceived => {
                Some(timers.quantize(self.entered_at + timers.syn_received_timeout))
            }
            _ => None,
        };
        let rtx = self.rtx.as_ref().map(|r| r.deadline);
        match (state_timer, rtx) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FiredKind {
    TimeWait,
    SynReceived,
    Retransmit,
    /// Retransmission limit reached; the timer is disarmed.
    GaveUp,
}

impl FiredKind {
    pub fn name(self) -> &'static str {
        match self {
            FiredKind::TimeWait => "2msl",
            FiredKind::SynReceived => "syn-received",
            FiredKind::Retransmit => "retransmit",
            FiredKind::GaveUp => "retransmit-give-up",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiredTimer {
    pub sock: SocketId,
    pub kind: FiredKind,
    pub violation: Option<TransitionViolation>,
}

/// Outcome of handing one inbound segment to an endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delivery {
    NoSocket,
    Handled(SocketId, Result<(), TransitionViolation>),
}

#[derive(Debug, Clone)]
pub struct Endpoint {
    pub name: &'static str,
    pub ip: Ipv4Addr,
    pub sockets: BTreeMap<SocketId, SocketSlot>,
    pub capacity: usize,
    pub link_down: bool,
    /// Last model of every socket this endpoint ever had.
    pub final_models: BTreeMap<SocketId, SocketModel>,
    pub last_opened: Option<SocketId>,
    next_descriptor: u32,
    next_port: u16,
}

impl Endpoint {
    pub fn new(name: &'static str, ip: Ipv4Addr, capacity: usize) -> Endpoint {
        Endpoint {
            name,
            ip,
            sockets: BTreeMap::new(),
            capacity,
            link_down: false,
            final_models: BTreeMap::new(),
            last_opened: None,
            next_descriptor: 1,
            next_port: EPHEMERAL_BASE,
        }
    }

    /// Allocates a fresh CLOSED socket bound to an ephemeral port.
    pub fn open(
        &mut self,
        now: u64,
        index: usize,
        sock_type: SocketType,
        protocol: Protocol,
        timeout: u64,
        tx_capacity: usize,
    ) -> Option<SocketId> {
        if self.sockets.len() >= self.capacity {
            return None;
        }
        let id = SocketId(self.next_descriptor);
        self.next_descriptor += 1;
        let mut s = Socket::new(id, sock_type, protocol);
        s.local_ip = Some(self.ip);
        s.local_port = self.next_port;
        self.next_port = self.next_port.wrapping_add(1).max(EPHEMERAL_BASE);
        s.timeout = timeout;
        s.tx_capacity = tx_capacity;
        s.iss = (index as u32 + 1) * 100_000 + id.0 * 1000;
        s.event_flags = update_events(&s);
        self.final_models.insert(id, s.model());
        self.sockets.insert(id, SocketSlot::new(s, now));
        self.last_opened = Some(id);
        Some(id)
    }

    pub fn port_in_use(&self, port: u16, except: SocketId) -> bool {
        self.sockets
            .iter()
            .any(|(id, s)| *id != except && s.sock.local_port == port && s.sock.state() != TcpState::Closed)
    }

    pub fn next_deadline(&self, timers: &TimerConfig) -> Option<u64> {
        self.sockets.values().filter_map(|s| s.next_deadline(timers)).min()
    }

    /// Fires every timer due at `now`.
    pub fn timer_tick(&mut self, now: u64, timers: &TimerConfig, max_retries: u32) -> Vec<FiredTimer> {
        let mut fired = Vec::new();
        for (&id, slot) in self.sockets.iter_mut() {
            match slot.sock.state() {
                TcpState::TimeWait
                    if now >= timers.quantize(slot.entered_at + timers.time_wait()) =>
                {
                    let r = slot.guarded(Activity::Timer, |s| change_state(s, TcpState::Closed));
                    fired.push(FiredTimer { sock: id, kind: FiredKind::TimeWait, violation: r.err() });
                    continue;
                }
                TcpState::SynReceived
                    if now >= timers.quantize(slot.entered_at + timers.syn_received_timeout) =>
                {
                    let r = slot.guarded(Activity::Timer, |s| {
                        change_state(s, TcpState::Closed)?;
                        let rst = s.make_segment(FlagSet::RST, Vec::new());
                        s.outbound.push_back(rst);
                        Ok(())
                    });
                    slot.rtx = None;
                    fired.push(FiredTimer { sock: id, kind: FiredKind::SynReceived, violation: r.err() });
                    continue;
                }
                _ => {}
            }
            if let Some(rtx) = slot.rtx.as_mut() {
                if now >= rtx.deadline {
                    if rtx.retries >= max_retries {
                        slot.rtx = None;
                        fired.push(FiredTimer { sock: id, kind: FiredKind::GaveUp, violation: None });
                    } else {
                        rtx.retries += 1;
                        rtx.deadline = now + timers.retransmission_timeout;
                        let mut seg = rtx.segment.clone();
                        slot.guarded(Activity::Timer, |s| {
                            seg.ack_num = s.rcv_nxt;
                            s.outbound.push_back(seg);
                        });
                        fired.push(FiredTimer { sock: id, kind: FiredKind::Retransmit, violation: None });
                    }
                }
            }
        }
        fired
    }

    /// Hands one inbound segment to the socket bound to its destination
    /// port, preferring a live socket over a CLOSED leftover.
    pub fn deliver(&mut self, engine: &Engine, seg: &Segment) -> Delivery {
        let target = self
            .sockets
            .iter()
            .filter(|(_, s)| s.sock.local_port == seg.dest_port)
            .min_by_key(|(_, s)| s.sock.state() == TcpState::Closed)
            .map(|(id, _)| *id);
        let Some(id) = target else {
            return Delivery::NoSocket;
        };
        let slot = self.sockets.get_mut(&id).expect("target exists");
        let r = slot.guarded(Activity::Receiver, |s| engine.process_one_segment(s, seg));
        Delivery::Handled(id, r.map(|_| ()))
    }

    pub fn slot(&self, id: SocketId) -> Option<&SocketSlot> {
        self.sockets.get(&id)
    }

    pub fn slot_mut(&mut self, id: SocketId) -> Option<&mut SocketSlot> {
        self.sockets.get_mut(&id)
    }
}
