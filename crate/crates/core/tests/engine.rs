use proptest::prelude::*;
use tcpconform::checker::{check_handlers, judge_case, sweep_state, CaseOutcome};
use tcpconform::engine::{
    allowed_segment_targets, curated_defects, depth_profile, handle_in_state, process_one_segment,
    reachable_states, update_events, wait_for_events_states, Defect, Engine, StateSet, GRID_PER_STATE,
};
use tcpconform::socket::{EventMask, Socket};
use tcpconform::{FlagSet, TcpState};

use TcpState::*;

fn set(states: &[TcpState]) -> StateSet {
    states.iter().copied().collect()
}

#[test]
fn reachable_sets_are_frozen() {
    let want = [
        (Closed, set(&[Closed])),
        (Listen, set(&[Closed, Listen, SynReceived, Established, CloseWait])),
        (SynSent, set(&[Closed, SynSent, SynReceived, Established, CloseWait])),
        (SynReceived, set(&[Closed, SynReceived, Established, CloseWait])),
        (Established, set(&[Closed, Established, CloseWait])),
        (FinWait1, set(&[Closed, FinWait1, FinWait2, Closing, TimeWait])),
        (FinWait2, set(&[Closed, FinWait2, TimeWait])),
        (CloseWait, set(&[Closed, CloseWait])),
        (Closing, set(&[Closed, Closing, TimeWait])),
        (LastAck, set(&[Closed, LastAck])),
        (TimeWait, set(&[Closed, TimeWait])),
    ];
    for (s, w) in want {
        assert_eq!(reachable_states(s), w, "{s}");
    }
}

#[test]
fn syn_sent_depth_profile() {
    assert_eq!(
        depth_profile(SynSent, 4),
        vec![
            set(&[SynSent]),
            set(&[Closed, SynReceived, Established]),
            set(&[CloseWait]),
            StateSet::EMPTY,
            StateSet::EMPTY,
        ]
    );
}

#[test]
fn wait_sets_are_frozen() {
    assert_eq!(wait_for_events_states(Established, EventMask::TX_DONE), set(&[Closed, Established, CloseWait]));
    assert_eq!(wait_for_events_states(Listen, EventMask::TX_DONE), set(&[Listen]));
    assert_eq!(
        wait_for_events_states(Listen, EventMask::CONNECTED | EventMask::CLOSED),
        set(&[Closed, Listen, SynReceived, Established])
    );
    assert_eq!(
        wait_for_events_states(SynSent, EventMask::CONNECTED | EventMask::CLOSED),
        set(&[Closed, SynSent, SynReceived, Established])
    );
}

#[test]
fn active_open_handshake_on_fixtures() {
    let mut a = Socket::fixture(SynSent);
    let g = a.incoming_segment(FlagSet::SYN | FlagSet::ACK, 9000, a.snd_nxt, 0);
    handle_in_state(&mut a, &g).unwrap();
    assert_eq!(a.state(), Established);
    assert_eq!(a.rcv_nxt, 9001);
    let ack = a.outbound.pop_front().unwrap();
    assert_eq!((ack.flags, ack.seq_num, ack.ack_num), (FlagSet::ACK, 5001, 9001));
}

#[test]
fn close_wait_rules() {
    for c in sweep_state(&Engine::default(), CloseWait) {
        if c.segment.flags.contains(FlagSet::RST) {
            assert_eq!(c.after.state, Closed);
            assert!(c.after.reset_flag);
        } else {
            assert_eq!(c.after, c.before, "{}", c.segment);
        }
    }
}

#[test]
fn close_wait_fin_defect_flags_sixteen_flag_sets() {
    let e = Engine::with_defects(vec![Defect {
        state: CloseWait,
        on: FlagSet::FIN,
        to: FinWait1,
    }]);
    let r = check_handlers(&e);
    assert_eq!(r.cases, 9504);
    let flagged = r.violating_flag_sets(CloseWait);
    assert_eq!(flagged.len(), 16);
    assert!(flagged.iter().all(|b| b & FlagSet::FIN.bits() != 0));
    assert!(r.violations.iter().all(|v| v.state == Some(CloseWait)));
}

#[test]
fn every_curated_defect_is_detected() {
    for d in curated_defects() {
        let r = check_handlers(&Engine::with_defects(vec![d]));
        assert!(!r.passed, "{d} slipped through");
    }
}

#[test]
fn grid_size() {
    assert_eq!(GRID_PER_STATE, 864);
    assert_eq!(sweep_state(&Engine::default(), Listen).len(), GRID_PER_STATE);
}

#[test]
fn unknown_state_code_resets_to_closed() {
    let mut s = Socket::fixture(Established);
    let g = s.incoming_segment(FlagSet::ACK, s.rcv_nxt, s.snd_nxt, 1);
    Engine::default().handle_state_code(&mut s, 200, &g).unwrap();
    assert_eq!(s.state(), Closed);
    assert!(s.rx_buffer.is_empty());
}

#[test]
fn segment_for_other_port_is_ignored() {
    let mut s = Socket::fixture(Established);
    let mut g = s.incoming_segment(FlagSet::RST, s.rcv_nxt, s.snd_nxt, 0);
    g.dest_port = s.local_port.wrapping_add(1);
    assert!(!process_one_segment(&mut s, &g).unwrap());
    assert_eq!(s.state(), Established);
}

fn any_state() -> impl Strategy<Value = TcpState> {
    (0u8..11).prop_map(|c| TcpState::from_code(c).unwrap())
}

proptest! {
    #[test]
    fn any_segment_stays_within_the_allowed_set(
        state in any_state(),
        flags in 0u8..32,
        dseq in -3i64..3,
        dack in -3i64..3,
        len in 0usize..40,
    ) {
        let mut s = Socket::fixture(state);
        let before = s.model();
        let g = s.incoming_segment(
            FlagSet::from_bits(flags).unwrap(),
            s.rcv_nxt.wrapping_add(dseq as u32),
            s.snd_nxt.wrapping_add(dack as u32),
            len,
        );
        let result = handle_in_state(&mut s, &g);
        prop_assert!(result.is_ok());
        prop_assert!(allowed_segment_targets(state).contains(s.state()));
        let c = CaseOutcome { state, segment: g.summary(), before, after: s.model(), result };
        prop_assert!(judge_case(&c).is_empty(), "{:?}", judge_case(&c));
    }

    #[test]
    fn update_events_is_a_function_of_the_socket(state in any_state(), rx in any::<bool>(), tx in any::<bool>()) {
        let mut s = Socket::fixture(state);
        if rx { s.rx_buffer.push_back(1); }
        if tx { s.tx_buffer.push_back(1); }
        let e = update_events(&s);
        prop_assert_eq!(e, update_events(&s.clone()));
        prop_assert_eq!(e.contains(EventMask::CLOSED), state == Closed);
        prop_assert_eq!(e.contains(EventMask::CONNECTED), matches!(state, Established | CloseWait));
        prop_assert_eq!(e.contains(EventMask::RX_READY), rx || s.fin_received);
    }

    #[test]
    fn closure_only_grows_with_depth(state in any_state(), d in 0usize..5) {
        let a = tcpconform::engine::reachable_states_within(state, d);
        let b = tcpconform::engine::reachable_states_within(state, d + 1);
        prop_assert!(a.is_subset(b));
        prop_assert!(a.contains(state));
    }
}
