//! Per-state segment handlers and the event mapping.
//!
//! Every state mutation made here goes through [`change_state`], so a handler
//! that tries a transition the automaton does not permit fails loudly instead
//! of corrupting the socket.

mod closure;

pub use closure::{
    default_graph, depth_profile, reachable_states, reachable_states_within,
    wait_for_events_states, ClosureGraph, StateSet,
};

use crate::automaton::{change_state, FlagSet, TcpState, TransitionViolation};
use crate::segment::{seq_lt, Segment};
use crate::socket::{EventMask, Socket};

use TcpState::*;

/// A deliberately wrong handler edge, used to check that the conformance
/// checks notice it. When a segment carrying every flag in `on` reaches a
/// socket in `state`, the handler moves straight to `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Defect {
    pub state: TcpState,
    pub on: FlagSet,
    pub to: TcpState,
}

impl std::fmt::Display for Defect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} rcv({}) -> {}", self.state, self.on, self.to)
    }
}

/// One wrong target per handler.
pub fn curated_defects() -> Vec<Defect> {
    let d = |state, on, to| Defect { state, on, to };
    vec![
        d(Closed, FlagSet::SYN, Listen),
        d(Listen, FlagSet::SYN, Established),
        d(SynSent, FlagSet::SYN | FlagSet::ACK, CloseWait),
        d(SynReceived, FlagSet::ACK, FinWait1),
        d(Established, FlagSet::FIN, LastAck),
        d(FinWait1, FlagSet::ACK, Closed),
        d(FinWait2, FlagSet::FIN, Closing),
        d(CloseWait, FlagSet::FIN, FinWait1),
        d(Closing, FlagSet::ACK, Closed),
        d(LastAck, FlagSet::ACK, TimeWait),
        d(TimeWait, FlagSet::FIN, FinWait2),
    ]
}

/// The segment-processing engine. The default value is the conforming one.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Engine {
    defects: Vec<Defect>,
}

impl Engine {
    pub fn new() -> Engine {
        Engine::default()
    }

    pub fn with_defects(defects: Vec<Defect>) -> Engine {
        Engine { defects }
    }

    pub fn defects(&self) -> &[Defect] {
        &self.defects
    }

    /// Runs the handler for the socket's current state.
    pub fn handle_in_state(&self, s: &mut Socket, g: &Segment) -> Result<(), TransitionViolation> {
        let state = s.state();
        if let Some(d) = self
            .defects
            .iter()
            .find(|d| d.state == state && g.flags.contains(d.on))
        {
            return change_state(s, d.to);
        }
        match state {
            Closed => Ok(()),
            Listen => listen(s, g),
            SynSent => syn_sent(s, g),
            SynReceived => syn_received(s, g),
            Established => established(s, g),
            FinWait1 => fin_wait_1(s, g),
            FinWait2 => fin_wait_2(s, g),
            CloseWait => close_wait(s, g),
            Closing => closing(s, g),
            LastAck => last_ack(s, g),
            TimeWait => time_wait(s, g),
        }
    }

    /// Like [`Engine::handle_in_state`], but dispatches on a raw state code
    /// as found in foreign memory. An unrecognized code puts the socket back
    /// in CLOSED and discards the segment.
    pub fn handle_state_code(
        &self,
        s: &mut Socket,
        code: u8,
        g: &Segment,
    ) -> Result<(), TransitionViolation> {
        match TcpState::from_code(code) {
            Some(state) if state == s.state() => self.handle_in_state(s, g),
            Some(state) => {
                s.set_state_unguarded(state);
                self.handle_in_state(s, g)
            }
            None => {
                // Back to the CLOSED state
                s.set_state_unguarded(Closed);
                Ok(())
            }
        }
    }

    /// Delivers `g` if it is addressed to this socket's port, then refreshes
    /// the socket's events. Returns whether the segment matched.
    pub fn process_one_segment(
        &self,
        s: &mut Socket,
        g: &Segment,
    ) -> Result<bool, TransitionViolation> {
        if g.dest_port != s.local_port {
            return Ok(false);
        }
        let r = self.handle_in_state(s, g);
        s.event_flags = update_events(s);
        r.map(|()| true)
    }
}

pub fn handle_in_state(s: &mut Socket, g: &Segment) -> Result<(), TransitionViolation> {
    Engine::default().handle_in_state(s, g)
}

pub fn process_one_segment(s: &mut Socket, g: &Segment) -> Result<bool, TransitionViolation> {
    Engine::default().process_one_segment(s, g)
}

/// Events that currently hold for `s`. Pure.
pub fn update_events(s: &Socket) -> EventMask {
    let state = s.state();
    let mut m = EventMask::EMPTY;
    if matches!(state, Established | CloseWait) {
        m |= EventMask::CONNECTED;
        if s.tx_buffer.len() < s.tx_capacity {
            m |= EventMask::TX_READY;
        }
    }
    if state == Closed {
        m |= EventMask::CLOSED;
    }
    if s.tx_buffer.is_empty() && !matches!(state, SynSent | SynReceived) {
        m |= EventMask::TX_DONE;
    }
    if !s.rx_buffer.is_empty() || s.fin_received {
        m |= EventMask::RX_READY;
    }
    if s.reset_flag {
        m |= EventMask::LINK_RESET;
    }
    m
}

/// States a single segment may move a socket in `state` to.
pub fn allowed_segment_targets(state: TcpState) -> StateSet {
    let list: &[TcpState] = match state {
        Closed => &[Closed],
        Listen => &[Listen, SynReceived],
        SynSent => &[SynSent, SynReceived, Established, Closed],
        SynReceived => &[SynReceived, Established, Closed],
        Established => &[Established, CloseWait, Closed],
        FinWait1 => &[FinWait1, FinWait2, Closing, TimeWait, Closed],
        FinWait2 => &[FinWait2, TimeWait, Closed],
        CloseWait => &[CloseWait, Closed],
        Closing => &[Closing, TimeWait, Closed],
        LastAck => &[LastAck, Closed],
        TimeWait => &[TimeWait, Closed],
    };
    list.iter().copied().collect()
}

pub const SEQ_OFFSETS: [i64; 3] = [-1, 0, 1];
pub const ACK_OFFSETS: [i64; 3] = [-1, 0, 1];
pub const LENGTH_CLASSES: [usize; 3] = [0, 1, 1460];

/// Size of the per-state input grid: flags x seq x ack x length classes.
pub const GRID_PER_STATE: usize = 32 * 3 * 3 * 3;

/// Every representative segment for `s`: all 32 flag sets, sequence numbers
/// around `rcv_nxt`, acknowledgments around `snd_nxt`, and three payload sizes.
pub fn segment_grid(s: &Socket) -> impl Iterator<Item = Segment> + '_ {
    FlagSet::all().flat_map(move |flags| {
        SEQ_OFFSETS.into_iter().flat_map(move |ds| {
            ACK_OFFSETS.into_iter().flat_map(move |da| {
                LENGTH_CLASSES.into_iter().map(move |len| {
                    s.incoming_segment(
                        flags,
                        s.rcv_nxt.wrapping_add(ds as u32),
                        s.snd_nxt.wrapping_add(da as u32),
                        len,
                    )
                })
            })
        })
    })
}

fn reset(s: &mut Socket) -> Result<(), TransitionViolation> {
    change_state(s, Closed)?;
    s.reset_flag = true;
    s.fin_received = false;
    s.tx_buffer.clear();
    s.rx_buffer.clear();
    Ok(())
}

fn queue_ack(s: &mut Socket) {
    let seg = s.make_segment(FlagSet::ACK, Vec::new());
    s.outbound.push_back(seg);
}

fn queue_syn_ack(s: &mut Socket) {
    let mut seg = s.make_segment(FlagSet::SYN | FlagSet::ACK, Vec::new());
    seg.seq_num = s.iss;
    s.outbound.push_back(seg);
}

/// Exact-sequence acceptance. Unacceptable segments that occupy sequence
/// space are answered with a duplicate ACK.
fn seq_acceptable(s: &mut Socket, g: &Segment) -> bool {
    if g.seq_num == s.rcv_nxt {
        return true;
    }
    if g.seq_len() > 0 {
        queue_ack(s);
    }
    false
}

/// Applies the acknowledgment field. Returns false if the segment
/// acknowledges something never sent; such segments are dropped.
fn process_ack(s: &mut Socket, g: &Segment) -> bool {
    if !g.flags.contains(FlagSet::ACK) {
        return true;
    }
    if seq_lt(s.snd_nxt, g.ack_num) {
        queue_ack(s);
        return false;
    }
    if seq_lt(s.snd_una, g.ack_num) {
        let acked = g.ack_num.wrapping_sub(s.snd_una) as usize;
        let n = acked.min(s.tx_buffer.len());
        s.tx_buffer.drain(..n);
        s.snd_una = g.ack_num;
    }
    true
}

fn take_payload(s: &mut Socket, g: &Segment) -> bool {
    if g.payload.is_empty() {
        return false;
    }
    s.rx_buffer.extend(g.payload.iter().copied());
    s.rcv_nxt = s.rcv_nxt.wrapping_add(g.payload.len() as u32);
    true
}

fn take_fin(s: &mut Socket) {
    s.rcv_nxt = s.rcv_nxt.wrapping_add(1);
    s.fin_received = true;
}

fn listen(s: &mut Socket, g: &Segment) -> Result<(), TransitionViolation> {
    // A listener discards resets and anything that is not a connection request.
    if g.flags.contains(FlagSet::RST) || !g.flags.contains(FlagSet::SYN) {
        return Ok(());
    }
    change_state(s, SynReceived)?;
    if s.local_ip.is_none() {
        s.local_ip = Some(g.dst_ip);
    }
    s.remote_ip = Some(g.src_ip);
    s.remote_port = g.src_port;
    s.rcv_nxt = g.seq_num.wrapping_add(1);
    s.snd_una = s.iss;
    s.snd_nxt = s.iss.wrapping_add(1);
    queue_syn_ack(s);
    Ok(())
}

fn syn_sent(s: &mut Socket, g: &Segment) -> Result<(), TransitionViolation> {
    let f = g.flags;
    if f.contains(FlagSet::RST) {
        return reset(s);
    }
    if !f.contains(FlagSet::SYN) {
        return Ok(());
    }
    if f.contains(FlagSet::ACK) {
        if g.ack_num != s.snd_nxt {
            return Ok(());
        }
        change_state(s, Established)?;
        s.snd_una = g.ack_num;
    } else {
        // simultaneous open
        change_state(s, SynReceived)?;
    }
    s.rcv_nxt = g.seq_num.wrapping_add(1);
    queue_ack(s);
    Ok(())
}

fn syn_received(s: &mut Socket, g: &Segment) -> Result<(), TransitionViolation> {
    let f = g.flags;
    if f.contains(FlagSet::RST) {
        return reset(s);
    }
    if f.contains(FlagSet::SYN) {
        if g.seq_num.wrapping_add(1) == s.rcv_nxt && s.snd_una == s.iss {
            queue_syn_ack(s);
        }
        return Ok(());
    }
    if !seq_acceptable(s, g) || !f.contains(FlagSet::ACK) {
        return Ok(());
    }
    if g.ack_num != s.snd_nxt {
        if seq_lt(s.snd_nxt, g.ack_num) {
            queue_ack(s);
        }
        return Ok(());
    }
    change_state(s, Established)?;
    s.snd_una = g.ack_num;
    // A FIN riding on the handshake ACK is left for the retransmission.
    if take_payload(s, g) {
        queue_ack(s);
    }
    Ok(())
}

fn established(s: &mut Socket, g: &Segment) -> Result<(), TransitionViolation> {
    let f = g.flags;
    if f.contains(FlagSet::RST) {
        return reset(s);
    }
    if f.contains(FlagSet::SYN) {
        queue_ack(s);
        return Ok(());
    }
    if !seq_acceptable(s, g) || !process_ack(s, g) {
        return Ok(());
    }
    let mut ack = take_payload(s, g);
    if f.contains(FlagSet::FIN) {
        change_state(s, CloseWait)?;
        take_fin(s);
        ack = true;
    }
    if ack {
        queue_ack(s);
    }
    Ok(())
}

fn fin_wait_1(s: &mut Socket, g: &Segment) -> Result<(), TransitionViolation> {
    let f = g.flags;
    if f.contains(FlagSet::RST) {
        return reset(s);
    }
    if f.contains(FlagSet::SYN) {
        queue_ack(s);
        return Ok(());
    }
    if !seq_acceptable(s, g) || !process_ack(s, g) {
        return Ok(());
    }
    let fin_acked = s.snd_una == s.snd_nxt;
    let mut ack = take_payload(s, g);
    if f.contains(FlagSet::FIN) {
        change_state(s, if fin_acked { TimeWait } else { Closing })?;
        take_fin(s);
        ack = true;
    } else if fin_acked {
        change_state(s, FinWait2)?;
    }
    if ack {
        queue_ack(s);
    }
    Ok(())
}

fn fin_wait_2(s: &mut Socket, g: &Segment) -> Result<(), TransitionViolation> {
    let f = g.flags;
    if f.contains(FlagSet::RST) {
        return reset(s);
    }
    if f.contains(FlagSet::SYN) {
        queue_ack(s);
        return Ok(());
    }
    if !seq_acceptable(s, g) || !process_ack(s, g) {
        return Ok(());
    }
    let mut ack = take_payload(s, g);
    if f.contains(FlagSet::FIN) {
        change_state(s, TimeWait)?;
        take_fin(s);
        ack = true;
    }
    if ack {
        queue_ack(s);
    }
    Ok(())
}

// Only acknowledgments of our own data matter here; the peer has finished
// sending, so nothing it sends may change the connection.
fn close_wait(s: &mut Socket, g: &Segment) -> Result<(), TransitionViolation> {
    let f = g.flags;
    if f.contains(FlagSet::RST) {
        return reset(s);
    }
    if f.contains(FlagSet::SYN) {
        queue_ack(s);
        return Ok(());
    }
    if !seq_acceptable(s, g) || !process_ack(s, g) {
        return Ok(());
    }
    if g.seq_len() > 0 {
        queue_ack(s);
    }
    Ok(())
}

fn closing(s: &mut Socket, g: &Segment) -> Result<(), TransitionViolation> {
    let f = g.flags;
    if f.contains(FlagSet::RST) {
        return reset(s);
    }
    if f.contains(FlagSet::SYN) {
        queue_ack(s);
        return Ok(());
    }
    if !seq_acceptable(s, g) || !process_ack(s, g) {
        return Ok(());
    }
    if s.snd_una == s.snd_nxt {
        change_state(s, TimeWait)?;
    }
    if g.seq_len() > 0 {
        queue_ack(s);
    }
    Ok(())
}

fn last_ack(s: &mut Socket, g: &Segment) -> Result<(), TransitionViolation> {
    let f = g.flags;
    if f.contains(FlagSet::RST) {
        return reset(s);
    }
    if f.contains(FlagSet::SYN) {
        queue_ack(s);
        return Ok(());
    }
    if !seq_acceptable(s, g) || !process_ack(s, g) {
        return Ok(());
    }
    if s.snd_una == s.snd_nxt {
        return change_state(s, Closed);
    }
    if g.seq_len() > 0 {
        queue_ack(s);
    }
    Ok(())
}

fn time_wait(s: &mut Socket, g: &Segment) -> Result<(), TransitionViolation> {
    if g.flags.contains(FlagSet::RST) {
        return reset(s);
    }
    // retransmitted FIN: our ACK was lost
    if g.seq_len() > 0 {
        queue_ack(s);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::socket::FIXTURE_IRS;

    fn seg(s: &Socket, flags: FlagSet) -> Segment {
        s.incoming_segment(flags, s.rcv_nxt, s.snd_nxt, 0)
    }

    #[test]
    fn close_wait_rst_closes_with_reset_flag() {
        let mut s = Socket::fixture(CloseWait);
        let before = s.model();
        let g = seg(&s, FlagSet::RST);
        handle_in_state(&mut s, &g).unwrap();
        assert_eq!(s.state(), Closed);
        assert!(s.reset_flag);
        let after = s.model();
        assert!(before.same_connection(&after));
    }

    #[test]
    fn close_wait_ack_changes_nothing() {
        let mut s = Socket::fixture(CloseWait);
        let before = s.model();
        let g = seg(&s, FlagSet::ACK);
        handle_in_state(&mut s, &g).unwrap();
        assert_eq!(s.model(), before);
    }

    #[test]
    fn listen_syn_answers_syn_ack() {
        let mut s = Socket::fixture(Listen);
        let g = s.incoming_segment(FlagSet::SYN, FIXTURE_IRS, 0, 0);
        handle_in_state(&mut s, &g).unwrap();
        assert_eq!(s.state(), SynReceived);
        let out = s.outbound.pop_front().unwrap();
        assert_eq!(out.flags, FlagSet::SYN | FlagSet::ACK);
        assert_eq!(out.seq_num, s.iss);
        assert_eq!(out.ack_num, FIXTURE_IRS + 1);
        assert_eq!(s.remote_port, 80);
    }

    #[test]
    fn unknown_state_code_resets_to_closed() {
        let mut s = Socket::fixture(Established);
        let g = seg(&s, FlagSet::FIN);
        Engine::new().handle_state_code(&mut s, 42, &g).unwrap();
        assert_eq!(s.state(), Closed);
        assert!(s.outbound.is_empty());
        assert_eq!(s.rcv_nxt, Socket::fixture(Established).rcv_nxt);
    }

    #[test]
    fn established_fin_goes_to_close_wait() {
        let mut s = Socket::fixture(Established);
        let g = seg(&s, FlagSet::FIN);
        assert!(process_one_segment(&mut s, &g).unwrap());
        assert_eq!(s.state(), CloseWait);
        assert_eq!(s.outbound.back().unwrap().flags, FlagSet::ACK);
        assert!(s.event_flags.contains(EventMask::RX_READY));
    }

    #[test]
    fn wrong_port_is_ignored() {
        let mut s = Socket::fixture(Established);
        let mut g = seg(&s, FlagSet::FIN);
        g.dest_port = 1;
        let before = s.clone();
        assert!(!process_one_segment(&mut s, &g).unwrap());
        assert_eq!(s, before);
    }

    #[test]
    fn syn_sent_syn_ack_connects() {
        let mut s = Socket::fixture(SynSent);
        let g = s.incoming_segment(FlagSet::SYN | FlagSet::ACK, FIXTURE_IRS, s.snd_nxt, 0);
        process_one_segment(&mut s, &g).unwrap();
        assert_eq!(s.state(), Established);
        assert!(s.event_flags.contains(EventMask::CONNECTED));
        assert_eq!(s.rcv_nxt, FIXTURE_IRS + 1);
    }

    #[test]
    fn fin_wait_1_paths() {
        let mut s = Socket::fixture(FinWait1);
        let g = seg(&s, FlagSet::FIN | FlagSet::ACK);
        handle_in_state(&mut s, &g).unwrap();
        assert_eq!(s.state(), TimeWait);

        let mut s = Socket::fixture(FinWait1);
        let g = s.incoming_segment(FlagSet::FIN | FlagSet::ACK, s.rcv_nxt, s.snd_una, 0);
        handle_in_state(&mut s, &g).unwrap();
        assert_eq!(s.state(), Closing);

        let mut s = Socket::fixture(FinWait1);
        let g = seg(&s, FlagSet::ACK);
        handle_in_state(&mut s, &g).unwrap();
        assert_eq!(s.state(), FinWait2);
    }

    #[test]
    fn events_follow_the_mapping() {
        let s = Socket::fixture(Established);
        assert!(update_events(&s).contains(EventMask::CONNECTED | EventMask::TX_DONE));
        let mut c = Socket::fixture(Closed);
        c.reset_flag = true;
        assert!(update_events(&c).contains(EventMask::CLOSED | EventMask::LINK_RESET));
        assert!(!update_events(&Socket::fixture(SynSent)).contains(EventMask::CONNECTED));
    }

    #[test]
    fn grid_has_the_documented_size() {
        let s = Socket::fixture(Established);
        assert_eq!(segment_grid(&s).count(), GRID_PER_STATE);
        assert_eq!(GRID_PER_STATE * 11, 9504);
    }

    #[test]
    fn defect_overrides_handler() {
        let e = Engine::with_defects(vec![Defect {
            state: CloseWait,
            on: FlagSet::FIN,
            to: FinWait1,
        }]);
        let mut s = Socket::fixture(CloseWait);
        let g = seg(&s, FlagSet::FIN | FlagSet::ACK);
        let v = e.handle_in_state(&mut s, &g).unwrap_err();
        assert_eq!((v.from, v.to), (CloseWait, FinWait1));
        assert_eq!(s.state(), CloseWait);
    }
}
