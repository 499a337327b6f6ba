//! The user-task socket API.
//!
//! Call order is carried by the types: only [`Stack::socket_open`] makes an
//! [`UnconnectedSession`], only a successful connect or accept makes a
//! [`ConnectedSession`], and every fallible call consumes its session and
//! hands it back inside the result, so the caller has to look at the result
//! before it can make the next call.
//!
//! Sending needs a connection:
//!
//! ```compile_fail
//! use tcpconform::api::UnconnectedSession;
//! fn f(u: UnconnectedSession) {
//!     let _ = u.send(b"x");
//! }
//! ```
//!
//! A session is gone once a call has taken it:
//!
//! ```compile_fail
//! use tcpconform::api::ConnectedSession;
//! fn f(c: ConnectedSession) {
//!     let _ = c.shutdown();
//!     let _ = c.send(b"x");
//! }
//! ```
//!
//! and the result of a call has to be looked at:
//!
//! ```compile_fail
//! #![deny(unused_must_use)]
//! use tcpconform::api::ConnectedSession;
//! fn f(c: ConnectedSession) {
//!     c.shutdown();
//! }
//! ```

use std::fmt;
use std::net::Ipv4Addr;
use std::panic;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::MutexGuard;
use serde::{Deserialize, Serialize};

use crate::automaton::{change_state, FlagSet, TcpState, TransitionViolation};
use crate::harness::endpoint::Activity;
use crate::harness::{Shared, TaskFault, TaskStatus, TraceKind, World};
use crate::socket::{EventMask, Protocol, Socket, SocketId, SocketModel, SocketType};

use TcpState::*;

const MSS: usize = 1460;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(i32)]
pub enum ErrorCode {
    NoError = 0,
    Timeout = 1,
    PortUnreachable = 2,
    ConnectionReset = 3,
    NotConnected = 4,
    InvalidSocket = 5,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 6] = [
        ErrorCode::NoError,
        ErrorCode::Timeout,
        ErrorCode::PortUnreachable,
        ErrorCode::ConnectionReset,
        ErrorCode::NotConnected,
        ErrorCode::InvalidSocket,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorCode::NoError => "NO_ERROR",
            ErrorCode::Timeout => "ERROR_TIMEOUT",
            ErrorCode::PortUnreachable => "ERROR_PORT_UNREACHABLE",
            ErrorCode::ConnectionReset => "ERROR_CONNECTION_RESET",
            ErrorCode::NotConnected => "ERROR_NOT_CONNECTED",
            ErrorCode::InvalidSocket => "ERROR_INVALID_SOCKET",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::error::Error for ErrorCode {}

impl FromStr for ErrorCode {
    type Err = String;

    fn from_str(s: &str) -> Result<ErrorCode, String> {
        ErrorCode::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown error code {s:?}"))
    }
}

/// An initialized (non-zero) IPv4 address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RemoteAddr(Ipv4Addr);

impl RemoteAddr {
    pub fn new(ip: Ipv4Addr) -> Option<RemoteAddr> {
        (!ip.is_unspecified()).then_some(RemoteAddr(ip))
    }

    pub fn ip(self) -> Ipv4Addr {
        self.0
    }
}

/// One endpoint's view of the harness, handed to its user task.
#[derive(Clone)]
pub struct Stack {
    shared: Arc<Shared>,
    ep: usize,
}

impl fmt::Debug for Stack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stack").field("ep", &self.ep).finish()
    }
}

impl Stack {
    pub(crate) fn new(shared: Arc<Shared>, ep: usize) -> Stack {
        Stack { shared, ep }
    }

    pub fn endpoint(&self) -> &'static str {
        crate::harness::ENDPOINT_NAMES[self.ep]
    }

    pub fn local_ip(&self) -> Ipv4Addr {
        crate::harness::ENDPOINT_IPS[self.ep]
    }

    /// Current virtual time.
    pub fn now(&self) -> u64 {
        self.shared.world.lock().now
    }

    /// A scheduling point: other activities may run before the guard is
    /// taken again.
    fn enter(&self) -> MutexGuard<'_, World> {
        let w = self.shared.world.lock();
        self.shared.block(w, self.ep, TaskStatus::Ready)
    }

    fn finish(&self, mut w: MutexGuard<'_, World>, op: &str, sock: Option<SocketId>, code: ErrorCode, extra: &str) {
        w.settle(self.ep);
        let sock = sock.map_or_else(|| "-".to_string(), |s| s.to_string());
        let mut detail = format!("{op} sock={sock} result={code}");
        if !extra.is_empty() {
            detail.push(' ');
            detail.push_str(extra);
        }
        w.record(self.ep, TraceKind::UserCall, None, None, None, detail);
    }

    /// Records a refused transition and stops the calling task.
    fn fault(&self, mut w: MutexGuard<'_, World>, op: &str, sock: SocketId, v: TransitionViolation) -> ! {
        w.record_violation(self.ep, sock, v, op);
        w.settle(self.ep);
        drop(w);
        panic::resume_unwind(Box::new(TaskFault));
    }

    fn with_socket<'a, R>(
        &self,
        w: &mut MutexGuard<'a, World>,
        id: SocketId,
        f: impl FnOnce(&mut Socket) -> R,
    ) -> R {
        let slot = w.endpoints[self.ep]
            .slot_mut(id)
            .expect("a live session always has a socket");
        slot.guarded(Activity::User, f)
    }

    fn state(&self, w: &MutexGuard<'_, World>, id: SocketId) -> TcpState {
        w.endpoints[self.ep].slot(id).expect("live session").sock.state()
    }

    /// Releases the guard until `mask` holds or `timeout` elapses, and
    /// checks the state found on return against the predicted set.
    fn wait<'a>(
        &'a self,
        mut w: MutexGuard<'a, World>,
        id: SocketId,
        mask: EventMask,
        timeout: u64,
    ) -> (MutexGuard<'a, World>, Result<EventMask, ErrorCode>) {
        w.settle(self.ep);
        let entry = self.state(&w, id);
        let events = w.endpoints[self.ep].slot(id).expect("live").sock.event_flags;
        if !events.intersects(mask) {
            let deadline = w.now + timeout;
            w = self.shared.block(
                w,
                self.ep,
                TaskStatus::Blocked {
                    sock: id,
                    mask,
                    deadline,
                },
            );
        }
        let events = w.endpoints[self.ep].slot(id).expect("live").sock.event_flags;
        if events.intersects(mask) {
            w.check_wait(self.ep, id, entry, mask);
            (w, Ok(events.intersection(mask)))
        } else {
            (w, Err(ErrorCode::Timeout))
        }
    }

    pub fn socket_open(&self, sock_type: SocketType, protocol: Protocol) -> Result<UnconnectedSession, ErrorCode> {
        let mut w = self.enter();
        let (now, timeout, txcap) = (w.now, w.cfg.socket_timeout, w.cfg.tx_capacity);
        let id = if sock_type == SocketType::Stream && protocol == Protocol::Tcp {
            w.endpoints[self.ep].open(now, self.ep, sock_type, protocol, timeout, txcap)
        } else {
            None
        };
        match id {
            Some(id) => {
                self.finish(w, "open", Some(id), ErrorCode::NoError, "");
                Ok(UnconnectedSession {
                    stack: self.clone(),
                    id,
                })
            }
            None => {
                self.finish(w, "open", None, ErrorCode::InvalidSocket, "");
                Err(ErrorCode::InvalidSocket)
            }
        }
    }

    /// Lets `ticks` of virtual time pass.
    pub fn sleep(&self, ticks: u64) {
        let w = self.shared.world.lock();
        let until = w.now + ticks;
        let w = self.shared.block(w, self.ep, TaskStatus::Sleeping { until });
        drop(w);
    }

    /// Forges a reset towards the peer of `session`, as if injected by the
    /// network. The local socket is not touched.
    pub fn inject_rst(&self, session: &ConnectedSession) {
        let mut w = self.enter();
        let seg = {
            let s = &w.endpoints[self.ep].slot(session.id).expect("live").sock;
            s.make_segment(FlagSet::RST, Vec::new())
        };
        w.send_segment(self.ep, Some(session.id), seg, "forged");
    }

    /// Drops (or stops dropping) everything this endpoint sends.
    pub fn set_link_down(&self, down: bool) {
        let mut w = self.enter();
        w.endpoints[self.ep].link_down = down;
    }

    fn snapshot(&self, id: SocketId) -> Socket {
        let w = self.shared.world.lock();
        w.endpoints[self.ep].slot(id).expect("live").sock.clone()
    }

    fn set_timeout(&self, id: SocketId, timeout: u64) {
        let mut w = self.shared.world.lock();
        self.with_socket(&mut w, id, |s| s.timeout = timeout);
    }

    fn wait_for_events(&self, id: SocketId, mask: EventMask, timeout: u64) -> Result<EventMask, ErrorCode> {
        let w = self.enter();
        let (_w, r) = self.wait(w, id, mask, timeout);
        r
    }

    fn close(&self, id: SocketId) {
        let mut w = self.enter();
        let r = self.with_socket(&mut w, id, |s| -> Result<(), TransitionViolation> {
            match s.state() {
                Listen | SynSent => change_state(s, Closed),
                SynReceived | Established => {
                    change_state(s, FinWait1)?;
                    queue_fin(s);
                    Ok(())
                }
                CloseWait => {
                    change_state(s, LastAck)?;
                    queue_fin(s);
                    Ok(())
                }
                Closed | FinWait1 | FinWait2 | Closing | LastAck | TimeWait => Ok(()),
            }
        });
        match r {
            // settle frees an orphan once it is CLOSED
            Ok(()) => {
                let slot = w.endpoints[self.ep].slot_mut(id).expect("live");
                slot.orphaned = true;
                slot.released_state = None;
                self.finish(w, "close", Some(id), ErrorCode::NoError, "");
            }
            Err(v) => self.fault(w, "close", id, v),
        }
    }
}

fn queue_fin(s: &mut Socket) {
    let seg = s.make_segment(FlagSet::FIN | FlagSet::ACK, Vec::new());
    s.snd_nxt = s.snd_nxt.wrapping_add(1);
    s.outbound.push_back(seg);
}

/// An open socket with no peer.
#[must_use = "a session must be used or closed"]
#[derive(Debug)]
pub struct UnconnectedSession {
    stack: Stack,
    id: SocketId,
}

/// A socket with an initialized remote address.
#[must_use = "a session must be used or closed"]
#[derive(Debug)]
pub struct ConnectedSession {
    stack: Stack,
    id: SocketId,
}

/// Result of a fallible call: the next session on success, or the session
/// handed back with the reason.
pub type Outcome<T, S> = Result<T, (S, ErrorCode)>;

impl UnconnectedSession {
    pub fn id(&self) -> SocketId {
        self.id
    }

    pub fn snapshot(&self) -> Socket {
        self.stack.snapshot(self.id)
    }

    pub fn model(&self) -> SocketModel {
        self.snapshot().model()
    }

    pub fn set_timeout(&mut self, timeout: u64) {
        self.stack.set_timeout(self.id, timeout);
    }

    /// Active open. On failure the socket is back in CLOSED with no remote
    /// address.
    pub fn connect(self, remote: RemoteAddr, port: u16) -> Outcome<ConnectedSession, UnconnectedSession> {
        let st = self.stack.clone();
        let id = self.id;
        let mut w = st.enter();
        let r = st.with_socket(&mut w, id, |s| {
            change_state(s, SynSent)?;
            s.remote_ip = Some(remote.ip());
            s.remote_port = port;
            s.reset_flag = false;
            s.fin_received = false;
            s.snd_una = s.iss;
            s.snd_nxt = s.iss;
            s.rcv_nxt = 0;
            let syn = s.make_segment(FlagSet::SYN, Vec::new());
            s.snd_nxt = s.iss.wrapping_add(1);
            s.outbound.push_back(syn);
            Ok(())
        });
        if let Err(v) = r {
            st.fault(w, "connect", id, v);
        }
        let timeout = w.endpoints[st.ep].slot(id).expect("live").sock.timeout;
        let (mut w, r) = st.wait(w, id, EventMask::CONNECTED | EventMask::CLOSED, timeout);
        let state = st.state(&w, id);
        if r.is_ok() && matches!(state, Established | CloseWait) {
            st.finish(w, "connect", Some(id), ErrorCode::NoError, "");
            return Ok(ConnectedSession { stack: self.stack, id });
        }
        let code = abort_to_closed(&st, &mut w, id, "connect");
        st.finish(w, "connect", Some(id), code, "");
        Err((self, code))
    }

    /// Passive open on `local_port`, waiting for one peer.
    pub fn listen_accept(self, local_port: u16) -> Outcome<ConnectedSession, UnconnectedSession> {
        let st = self.stack.clone();
        let id = self.id;
        let mut w = st.enter();
        if w.endpoints[st.ep].port_in_use(local_port, id) {
            st.finish(w, "accept", Some(id), ErrorCode::InvalidSocket, "");
            return Err((self, ErrorCode::InvalidSocket));
        }
        let r = st.with_socket(&mut w, id, |s| {
            change_state(s, Listen)?;
            s.local_port = local_port;
            s.reset_flag = false;
            s.fin_received = false;
            Ok(())
        });
        if let Err(v) = r {
            st.fault(w, "accept", id, v);
        }
        let timeout = w.endpoints[st.ep].slot(id).expect("live").sock.timeout;
        let (mut w, r) = st.wait(w, id, EventMask::CONNECTED | EventMask::CLOSED, timeout);
        let state = st.state(&w, id);
        if r.is_ok() && matches!(state, Established | CloseWait) {
            st.finish(w, "accept", Some(id), ErrorCode::NoError, "");
            return Ok(ConnectedSession { stack: self.stack, id });
        }
        let code = abort_to_closed(&st, &mut w, id, "accept");
        st.finish(w, "accept", Some(id), code, "");
        Err((self, code))
    }

    /// Frees the socket. No segments are sent.
    pub fn close(self) {
        self.stack.close(self.id);
    }
}

/// Abandons a handshake that did not complete: back to CLOSED, remote
/// cleared. Returns the error to report.
fn abort_to_closed(st: &Stack, w: &mut MutexGuard<'_, World>, id: SocketId, op: &str) -> ErrorCode {
    let r = st.with_socket(w, id, |s| -> Result<ErrorCode, TransitionViolation> {
        let code = if s.reset_flag {
            ErrorCode::ConnectionReset
        } else {
            ErrorCode::Timeout
        };
        if s.state() == SynReceived {
            let rst = s.make_segment(FlagSet::RST, Vec::new());
            s.outbound.push_back(rst);
        }
        if s.state() != Closed {
            change_state(s, Closed)?;
        }
        s.remote_ip = None;
        s.remote_port = 0;
        s.tx_buffer.clear();
        s.rx_buffer.clear();
        Ok(code)
    });
    match r {
        Ok(code) => code,
        Err(v) => {
            // CLOSED is reachable from every state a handshake can be in.
            w.record_violation(st.ep, id, v, op);
            ErrorCode::InvalidSocket
        }
    }
}

impl ConnectedSession {
    pub fn id(&self) -> SocketId {
        self.id
    }

    pub fn snapshot(&self) -> Socket {
        self.stack.snapshot(self.id)
    }

    pub fn model(&self) -> SocketModel {
        self.snapshot().model()
    }

    pub fn set_timeout(&mut self, timeout: u64) {
        self.stack.set_timeout(self.id, timeout);
    }

    /// Waits for any event in `mask`, up to `timeout`.
    pub fn wait_for_events(&self, mask: EventMask, timeout: u64) -> Result<EventMask, ErrorCode> {
        self.stack.wait_for_events(self.id, mask, timeout)
    }

    fn error_for(s: &Socket) -> ErrorCode {
        if s.reset_flag {
            ErrorCode::ConnectionReset
        } else {
            ErrorCode::NotConnected
        }
    }

    /// Queues `data` for transmission. Returns the number of bytes written.
    pub fn send(self, data: &[u8]) -> Outcome<(ConnectedSession, usize), ConnectedSession> {
        let st = self.stack.clone();
        let id = self.id;
        let mut w = st.enter();
        let sock = &w.endpoints[st.ep].slot(id).expect("live").sock;
        if !matches!(sock.state(), Established | CloseWait) {
            let code = Self::error_for(sock);
            st.finish(w, "send", Some(id), code, "");
            return Err((self, code));
        }
        if data.is_empty() {
            st.finish(w, "send", Some(id), ErrorCode::NoError, "len=0");
            return Ok((self, 0));
        }
        let room = sock.tx_capacity.saturating_sub(sock.tx_buffer.len());
        if room < data.len() {
            let timeout = sock.timeout;
            let (w2, r) = st.wait(w, id, EventMask::TX_DONE | EventMask::CLOSED, timeout);
            w = w2;
            let sock = &w.endpoints[st.ep].slot(id).expect("live").sock;
            let code = match r {
                Err(c) => Some(c),
                Ok(_) if !matches!(sock.state(), Established | CloseWait) => Some(Self::error_for(sock)),
                Ok(_) if sock.tx_capacity < data.len() => Some(ErrorCode::Timeout),
                Ok(_) => None,
            };
            if let Some(code) = code {
                st.finish(w, "send", Some(id), code, "");
                return Err((self, code));
            }
        }
        st.with_socket(&mut w, id, |s| {
            for chunk in data.chunks(MSS) {
                let seg = s.make_segment(FlagSet::PSH | FlagSet::ACK, chunk.to_vec());
                s.snd_nxt = s.snd_nxt.wrapping_add(chunk.len() as u32);
                s.tx_buffer.extend(chunk.iter().copied());
                s.outbound.push_back(seg);
            }
        });
        st.finish(w, "send", Some(id), ErrorCode::NoError, &format!("len={}", data.len()));
        Ok((self, data.len()))
    }

    /// Takes all received bytes. Empty data means the peer has finished
    /// sending.
    pub fn receive(self) -> Outcome<(ConnectedSession, Vec<u8>), ConnectedSession> {
        let st = self.stack.clone();
        let id = self.id;
        let mut w = st.enter();
        let ready = |w: &MutexGuard<'_, World>| {
            let s = &w.endpoints[st.ep].slot(id).expect("live").sock;
            !s.rx_buffer.is_empty() || s.fin_received
        };
        if !ready(&w) {
            let sock = &w.endpoints[st.ep].slot(id).expect("live").sock;
            if !matches!(sock.state(), Established | FinWait1 | FinWait2) {
                let code = Self::error_for(sock);
                st.finish(w, "receive", Some(id), code, "");
                return Err((self, code));
            }
            let timeout = sock.timeout;
            let (w2, r) = st.wait(w, id, EventMask::RX_READY | EventMask::CLOSED, timeout);
            w = w2;
            if let Err(code) = r {
                st.finish(w, "receive", Some(id), code, "");
                return Err((self, code));
            }
            if !ready(&w) {
                let code = Self::error_for(&w.endpoints[st.ep].slot(id).expect("live").sock);
                st.finish(w, "receive", Some(id), code, "");
                return Err((self, code));
            }
        }
        let data: Vec<u8> = st.with_socket(&mut w, id, |s| s.rx_buffer.drain(..).collect());
        st.finish(w, "receive", Some(id), ErrorCode::NoError, &format!("len={}", data.len()));
        Ok((self, data))
    }

    /// Full-duplex shutdown: flush, then send FIN.
    pub fn shutdown(self) -> Outcome<ConnectedSession, ConnectedSession> {
        let st = self.stack.clone();
        let id = self.id;
        let w = st.enter();
        let buggy = w.cfg.buggy_shutdown;
        let sock = &w.endpoints[st.ep].slot(id).expect("live").sock;
        let entry = sock.state();
        let entry_target = match entry {
            SynReceived | Established => FinWait1,
            CloseWait => LastAck,
            _ => {
                let code = Self::error_for(sock);
                st.finish(w, "shutdown", Some(id), code, "");
                return Err((self, code));
            }
        };
        let timeout = sock.timeout;
        // Make sure all the data has been sent out
        let (mut w, r) = st.wait(w, id, EventMask::TX_DONE, timeout);
        if let Err(code) = r {
            st.finish(w, "shutdown", Some(id), code, "");
            return Err((self, code));
        }
        let target = if buggy {
            entry_target
        } else {
            // The wait released the guard; the peer may have closed or reset.
            let sock = &w.endpoints[st.ep].slot(id).expect("live").sock;
            match sock.state() {
                SynReceived | Established => FinWait1,
                CloseWait => LastAck,
                _ => {
                    let code = Self::error_for(sock);
                    st.finish(w, "shutdown", Some(id), code, "");
                    return Err((self, code));
                }
            }
        };
        let r = st.with_socket(&mut w, id, |s| {
            change_state(s, target)?;
            queue_fin(s);
            Ok(())
        });
        if let Err(v) = r {
            st.fault(w, "shutdown", id, v);
        }
        st.finish(w, "shutdown", Some(id), ErrorCode::NoError, "");
        Ok(self)
    }

    /// Closes the connection (FIN path where one is still possible) and
    /// releases the socket once it reaches CLOSED.
    pub fn close(self) {
        self.stack.close(self.id);
    }
}
