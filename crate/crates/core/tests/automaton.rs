use std::collections::BTreeSet;

use proptest::prelude::*;
use tcpconform::automaton::{TriggerPattern, UserCallKind};
use tcpconform::socket::Socket;
use tcpconform::{change_state, is_allowed, transition_table, FlagSet, TcpState};

use TcpState::*;

fn fixture_edges() -> BTreeSet<String> {
    include_str!("fixtures/automaton_edges.txt")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(str::to_string)
        .collect()
}

#[test]
fn labelled_edges_match_the_drawing() {
    let got: BTreeSet<String> = transition_table().labelled_edges().map(|t| t.to_string()).collect();
    assert_eq!(got, fixture_edges());
    assert_eq!(got.len(), 21);
}

#[test]
fn table_has_41_entries() {
    let t = transition_table();
    assert_eq!(t.entries().len(), 41);
    assert_eq!(t.entries().iter().filter(|e| e.trigger == TriggerPattern::Any).count(), 11);
    let resets = t
        .entries()
        .iter()
        .filter(|e| e.trigger == TriggerPattern::Segment(FlagSet::RST))
        .count();
    assert_eq!(resets, 9);
}

#[test]
fn close_wait_never_reaches_fin_wait_1() {
    assert!(!is_allowed(CloseWait, FinWait1));
    assert!(!is_allowed(Closed, FinWait1));
    assert!(is_allowed(CloseWait, LastAck));
    let listing = transition_table().listing();
    assert!(!listing.iter().any(|l| l.starts_with("CLOSE_WAIT ") && l.ends_with(" FIN_WAIT_1")));
}

#[test]
fn listing_is_sorted_and_stable() {
    let a = transition_table().listing();
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(a, sorted);
    assert_eq!(a, transition_table().listing());
    assert!(a.contains(&"FIN_WAIT_1 rcv(FIN+ACK) TIME_WAIT".to_string()));
}

#[test]
fn jsonl_listing_has_one_object_per_entry() {
    let text = transition_table().listing_jsonl();
    assert_eq!(text.lines().count(), 41);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["from"], "CLOSED");
}

#[test]
fn match_segment_prefers_reset_then_most_specific() {
    let t = transition_table();
    assert_eq!(t.match_segment(FinWait1, FlagSet::FIN | FlagSet::ACK), Some(TimeWait));
    assert_eq!(t.match_segment(FinWait1, FlagSet::FIN), Some(Closing));
    assert_eq!(t.match_segment(FinWait1, FlagSet::FIN | FlagSet::RST), Some(Closed));
    assert_eq!(t.match_segment(Listen, FlagSet::ACK), None);
    assert!(t.contains(Closed, TriggerPattern::UserCall(UserCallKind::PassiveOpen), Listen));
}

#[test]
fn flag_and_state_text_round_trips() {
    for bits in 0..32u8 {
        let f = FlagSet::from_bits(bits).unwrap();
        assert_eq!(f.to_string().parse::<FlagSet>().unwrap(), f);
    }
    assert_eq!(FlagSet::EMPTY.to_string(), "NONE");
    assert_eq!((FlagSet::ACK | FlagSet::SYN).to_string(), "SYN+ACK");
    for s in TcpState::ALL {
        assert_eq!(s.name().parse::<TcpState>().unwrap(), s);
        assert_eq!(TcpState::from_code(s.code()), Some(s));
    }
    assert_eq!(TcpState::from_code(11), None);
}

fn any_state() -> impl Strategy<Value = TcpState> {
    (0u8..11).prop_map(|c| TcpState::from_code(c).unwrap())
}

proptest! {
    #[test]
    fn guard_changes_only_the_state(from in any_state(), to in any_state()) {
        let mut s = Socket::fixture(from);
        let before = s.clone();
        let r = change_state(&mut s, to);
        prop_assert_eq!(r.is_ok(), is_allowed(from, to));
        if r.is_ok() {
            prop_assert_eq!(s.state(), to);
            let mut b = before.model();
            b.state = to;
            prop_assert_eq!(s.model(), b);
        } else {
            prop_assert_eq!(s, before);
        }
    }

    #[test]
    fn self_transitions_are_always_allowed(s in any_state()) {
        prop_assert!(is_allowed(s, s));
    }

    #[test]
    fn every_allowed_pair_has_an_entry(from in any_state(), to in any_state()) {
        let listed = transition_table().entries().iter().any(|t| t.from == from && t.to == to);
        prop_assert_eq!(is_allowed(from, to), listed || from == to);
    }
}
