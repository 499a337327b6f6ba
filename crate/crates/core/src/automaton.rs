//! The TCP connection automaton: states, triggers, the allowed-transition
//! relation and the guarded state change every state mutation goes through.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::socket::Socket;

/// Connection state of a TCP socket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TcpState {
    Closed = 0,
    Listen = 1,
    SynSent = 2,
    SynReceived = 3,
    Established = 4,
    FinWait1 = 5,
    FinWait2 = 6,
    CloseWait = 7,
    Closing = 8,
    LastAck = 9,
    TimeWait = 10,
}

impl TcpState {
    pub const ALL: [TcpState; 11] = [
        TcpState::Closed,
        TcpState::Listen,
        TcpState::SynSent,
        TcpState::SynReceived,
        TcpState::Established,
        TcpState::FinWait1,
        TcpState::FinWait2,
        TcpState::CloseWait,
        TcpState::Closing,
        TcpState::LastAck,
        TcpState::TimeWait,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<TcpState> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TcpState::Closed => "CLOSED",
            TcpState::Listen => "LISTEN",
            TcpState::SynSent => "SYN_SENT",
            TcpState::SynReceived => "SYN_RECEIVED",
            TcpState::Established => "ESTABLISHED",
            TcpState::FinWait1 => "FIN_WAIT_1",
            TcpState::FinWait2 => "FIN_WAIT_2",
            TcpState::CloseWait => "CLOSE_WAIT",
            TcpState::Closing => "CLOSING",
            TcpState::LastAck => "LAST_ACK",
            TcpState::TimeWait => "TIME_WAIT",
        }
    }
}

impl fmt::Display for TcpState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown TCP state `{0}`")]
pub struct UnknownState(pub String);

impl FromStr for TcpState {
    type Err = UnknownState;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TcpState::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| UnknownState(s.to_string()))
    }
}

impl Serialize for TcpState {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TcpState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The five TCP control flags this model tracks, packed in header order
/// (FIN is bit 0, ACK is bit 4). The encoded value never exceeds 31.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct FlagSet(u8);

impl FlagSet {
    pub const EMPTY: FlagSet = FlagSet(0);
    pub const FIN: FlagSet = FlagSet(0x01);
    pub const SYN: FlagSet = FlagSet(0x02);
    pub const RST: FlagSet = FlagSet(0x04);
    pub const PSH: FlagSet = FlagSet(0x08);
    pub const ACK: FlagSet = FlagSet(0x10);
    pub const MAX_BITS: u8 = 31;

    const NAMED: [(FlagSet, &'static str); 5] = [
        (FlagSet::FIN, "FIN"),
        (FlagSet::SYN, "SYN"),
        (FlagSet::RST, "RST"),
        (FlagSet::PSH, "PSH"),
        (FlagSet::ACK, "ACK"),
    ];

    pub fn from_bits(bits: u8) -> Option<FlagSet> {
        (bits <= Self::MAX_BITS).then_some(FlagSet(bits))
    }

    /// Masks off anything above the five tracked flags.
    pub fn from_bits_truncate(bits: u8) -> FlagSet {
        FlagSet(bits & Self::MAX_BITS)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// Every encodable flag set, in encoded order `0..=31`.
    pub fn all() -> impl Iterator<Item = FlagSet> {
        (0..=Self::MAX_BITS).map(FlagSet)
    }

    pub fn contains(self, other: FlagSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }
}

impl std::ops::BitOr for FlagSet {
    type Output = FlagSet;

    fn bitor(self, rhs: FlagSet) -> FlagSet {
        FlagSet(self.0 | rhs.0)
    }
}

impl fmt::Display for FlagSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("NONE");
        }
        let mut first = true;
        for (flag, name) in Self::NAMED {
            if self.contains(flag) {
                if !first {
                    f.write_str("+")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid flag set `{0}`")]
pub struct InvalidFlags(pub String);

impl FromStr for FlagSet {
    type Err = InvalidFlags;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "NONE" {
            return Ok(FlagSet::EMPTY);
        }
        s.split('+').try_fold(FlagSet::EMPTY, |acc, part| {
            FlagSet::NAMED
                .iter()
                .find(|(_, name)| *name == part)
                .map(|(flag, _)| acc | *flag)
                .ok_or_else(|| InvalidFlags(s.to_string()))
        })
    }
}

impl Serialize for FlagSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FlagSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UserCallKind {
    PassiveOpen,
    ActiveOpen,
    Close,
    Send,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TimerKind {
    SynReceivedTimeout,
    TimeWaitTimeout,
}

/// A concrete event that may move a connection between states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Trigger {
    UserCall(UserCallKind),
    SegmentArrival(FlagSet),
    TimerExpiry(TimerKind),
}

/// The trigger class an automaton edge fires on. Segment classes match on
/// flag subsets: an arrival matches when it carries every required flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TriggerPattern {
    /// Self-loop wildcard: any trigger may leave the state unchanged.
    Any,
    UserCall(UserCallKind),
    Segment(FlagSet),
    Timer(TimerKind),
}

impl TriggerPattern {
    pub fn matches(&self, trigger: &Trigger) -> bool {
        match (self, trigger) {
            (TriggerPattern::Any, _) => true,
            (TriggerPattern::UserCall(a), Trigger::UserCall(b)) => a == b,
            (TriggerPattern::Segment(required), Trigger::SegmentArrival(flags)) => {
                flags.contains(*required)
            }
            (TriggerPattern::Timer(a), Trigger::TimerExpiry(b)) => a == b,
            _ => false,
        }
    }

    pub fn is_segment(&self) -> bool {
        matches!(self, TriggerPattern::Segment(_))
    }
}

impl fmt::Display for TriggerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TriggerPattern::Any => f.write_str("*"),
            TriggerPattern::UserCall(UserCallKind::PassiveOpen) => f.write_str("open(passive)"),
            TriggerPattern::UserCall(UserCallKind::ActiveOpen) => f.write_str("open(active)"),
            TriggerPattern::UserCall(UserCallKind::Close) => f.write_str("close"),
            TriggerPattern::UserCall(UserCallKind::Send) => f.write_str("send"),
            TriggerPattern::Segment(flags) => write!(f, "rcv({flags})"),
            TriggerPattern::Timer(TimerKind::SynReceivedTimeout) => {
                f.write_str("timeout(syn-received)")
            }
            TriggerPattern::Timer(TimerKind::TimeWaitTimeout) => f.write_str("timeout(2msl)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Transition {
    pub from: TcpState,
    pub trigger: TriggerPattern,
    pub to: TcpState,
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.from, self.trigger, self.to)
    }
}

/// The allowed relation between states, in machine-readable form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionTable {
    entries: Vec<Transition>,
}

use TcpState::*;

// Labelled edges of the connection automaton, in drawing order.
const AUTOMATON_EDGES: [(TcpState, TriggerPattern, TcpState); 21] = {
    use TriggerPattern::{Segment, Timer, UserCall};
    use UserCallKind::*;
    const SYN_ACK: FlagSet = FlagSet(0x12);
    const FIN_ACK: FlagSet = FlagSet(0x11);
    [
        (Closed, UserCall(PassiveOpen), Listen),
        (Listen, UserCall(Close), Closed),
        (Listen, Segment(FlagSet::SYN), SynReceived),
        (Listen, UserCall(Send), SynSent),
        (SynReceived, Timer(TimerKind::SynReceivedTimeout), Closed),
        (SynSent, UserCall(Close), Closed),
        (Closed, UserCall(ActiveOpen), SynSent),
        (SynSent, Segment(FlagSet::SYN), SynReceived),
        (SynReceived, UserCall(Close), FinWait1),
        (SynReceived, Segment(FlagSet::ACK), Established),
        (SynSent, Segment(SYN_ACK), Established),
        (Established, UserCall(Close), FinWait1),
        (Established, Segment(FlagSet::FIN), CloseWait),
        (FinWait1, Segment(FlagSet::ACK), FinWait2),
        (FinWait1, Segment(FlagSet::FIN), Closing),
        (FinWait1, Segment(FIN_ACK), TimeWait),
        (FinWait2, Segment(FlagSet::FIN), TimeWait),
        (Closing, Segment(FlagSet::ACK), TimeWait),
        (CloseWait, UserCall(Close), LastAck),
        (LastAck, Segment(FlagSet::ACK), Closed),
        (TimeWait, Timer(TimerKind::TimeWaitTimeout), Closed),
    ]
};

impl TransitionTable {
    fn build() -> TransitionTable {
        let mut entries: Vec<Transition> = AUTOMATON_EDGES
            .iter()
            .map(|&(from, trigger, to)| Transition { from, trigger, to })
            .collect();
        for state in TcpState::ALL {
            if state != Closed && state != Listen {
                entries.push(Transition {
                    from: state,
                    trigger: TriggerPattern::Segment(FlagSet::RST),
                    to: Closed,
                });
            }
        }
        for state in TcpState::ALL {
            entries.push(Transition {
                from: state,
                trigger: TriggerPattern::Any,
                to: state,
            });
        }
        TransitionTable { entries }
    }

    pub fn entries(&self) -> &[Transition] {
        &self.entries
    }

    pub fn contains(&self, from: TcpState, trigger: TriggerPattern, to: TcpState) -> bool {
        self.entries.contains(&Transition { from, trigger, to })
    }

    /// Labelled edges only: no self-loop wildcards, no generalized reset entries.
    pub fn labelled_edges(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter().filter(|t| {
            t.trigger != TriggerPattern::Any
                && !(t.trigger == TriggerPattern::Segment(FlagSet::RST) && t.to == Closed)
        })
    }

    pub fn segment_edges(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter().filter(|t| t.trigger.is_segment())
    }

    /// The target of the most specific segment edge an arrival with `flags`
    /// matches in `from`. A reset entry outranks every other edge.
    pub fn match_segment(&self, from: TcpState, flags: FlagSet) -> Option<TcpState> {
        let trigger = Trigger::SegmentArrival(flags);
        let mut best: Option<(u32, TcpState)> = None;
        for t in self.segment_edges().filter(|t| t.from == from) {
            if !t.trigger.matches(&trigger) {
                continue;
            }
            let TriggerPattern::Segment(required) = t.trigger else {
                continue;
            };
            if required == FlagSet::RST && t.to == Closed {
                return Some(Closed);
            }
            if best.is_none_or(|(n, _)| required.count() > n) {
                best = Some((required.count(), t.to));
            }
        }
        best.map(|(_, to)| to)
    }

    /// One `FROM TRIGGER TO` line per entry, sorted lexicographically.
    pub fn listing(&self) -> Vec<String> {
        let mut lines: Vec<(String, String, String)> = self
            .entries
            .iter()
            .map(|t| {
                (
                    t.from.name().to_string(),
                    t.trigger.to_string(),
                    t.to.name().to_string(),
                )
            })
            .collect();
        lines.sort();
        lines
            .into_iter()
            .map(|(from, trig, to)| format!("{from} {trig} {to}"))
            .collect()
    }

    pub fn listing_text(&self) -> String {
        let mut out = self.listing().join("\n");
        out.push('\n');
        out
    }

    pub fn listing_jsonl(&self) -> String {
        let mut lines: Vec<(String, String, String)> = self
            .entries
            .iter()
            .map(|t| (t.from.name().into(), t.trigger.to_string(), t.to.name().into()))
            .collect();
        lines.sort();
        let mut out = String::new();
        for (from, trigger, to) in lines {
            let obj = serde_json::json!({ "from": from, "trigger": trigger, "to": to });
            out.push_str(&obj.to_string());
            out.push('\n');
        }
        out
    }
}

/// The canonical table. Repeated calls return the same value.
pub fn transition_table() -> &'static TransitionTable {
    static TABLE: OnceLock<TransitionTable> = OnceLock::new();
    TABLE.get_or_init(TransitionTable::build)
}

fn allowed_matrix() -> &'static [[bool; 11]; 11] {
    static MATRIX: OnceLock<[[bool; 11]; 11]> = OnceLock::new();
    MATRIX.get_or_init(|| {
        let mut m = [[false; 11]; 11];
        for t in transition_table().entries() {
            m[t.from as usize][t.to as usize] = true;
        }
        for s in TcpState::ALL {
            m[s as usize][s as usize] = true;
        }
        m
    })
}

/// True iff some table entry moves `from` to `to`, or `from == to`.
pub fn is_allowed(from: TcpState, to: TcpState) -> bool {
    allowed_matrix()[from as usize][to as usize]
}

/// A state change the automaton does not permit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error, Serialize, Deserialize)]
#[error("transition {from} -> {to} is not permitted by the connection automaton")]
pub struct TransitionViolation {
    pub from: TcpState,
    pub to: TcpState,
}

/// Guarded state change. On success only `state` is modified; on a violation
/// the socket is left untouched.
pub fn change_state(socket: &mut Socket, new_state: TcpState) -> Result<(), TransitionViolation> {
    let from = socket.state();
    if !is_allowed(from, new_state) {
        return Err(TransitionViolation {
            from,
            to: new_state,
        });
    }
    socket.set_state_unguarded(new_state);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_codes_round_trip() {
        for (i, s) in TcpState::ALL.iter().enumerate() {
            assert_eq!(s.code() as usize, i);
            assert_eq!(TcpState::from_code(i as u8), Some(*s));
            assert_eq!(s.name().parse::<TcpState>().unwrap(), *s);
        }
        assert_eq!(TcpState::from_code(11), None);
        assert_eq!(TcpState::from_code(255), None);
    }

    #[test]
    fn flag_layout_is_header_order() {
        assert_eq!(FlagSet::FIN.bits(), 1);
        assert_eq!(FlagSet::SYN.bits(), 2);
        assert_eq!(FlagSet::RST.bits(), 4);
        assert_eq!(FlagSet::PSH.bits(), 8);
        assert_eq!(FlagSet::ACK.bits(), 16);
        assert_eq!(FlagSet::from_bits(32), None);
        assert_eq!(FlagSet::from_bits_truncate(0xff).bits(), 31);
        assert_eq!(FlagSet::all().count(), 32);
    }

    #[test]
    fn flag_display_parses_back() {
        for f in FlagSet::all() {
            assert_eq!(f.to_string().parse::<FlagSet>().unwrap(), f);
        }
        assert_eq!((FlagSet::SYN | FlagSet::ACK).to_string(), "SYN+ACK");
        assert_eq!((FlagSet::FIN | FlagSet::ACK).to_string(), "FIN+ACK");
        assert!("SYN+BOGUS".parse::<FlagSet>().is_err());
    }

    #[test]
    fn is_allowed_examples() {
        assert!(is_allowed(Listen, SynReceived));
        assert!(!is_allowed(CloseWait, FinWait1));
        assert!(is_allowed(Established, Established));
    }

    #[test]
    fn self_loops_are_allowed_everywhere() {
        for s in TcpState::ALL {
            assert!(is_allowed(s, s));
        }
    }

    #[test]
    fn is_allowed_is_table_membership() {
        let table = transition_table();
        for from in TcpState::ALL {
            for to in TcpState::ALL {
                let in_table = table.entries().iter().any(|t| t.from == from && t.to == to);
                assert_eq!(is_allowed(from, to), in_table || from == to, "{from}->{to}");
            }
        }
    }

    #[test]
    fn table_has_no_entry_into_fin_wait_1_from_close_wait_or_closed() {
        let table = transition_table();
        for t in table.entries() {
            if t.to == FinWait1 {
                assert_ne!(t.from, CloseWait);
                assert_ne!(t.from, Closed);
            }
        }
    }

    #[test]
    fn table_examples() {
        let table = transition_table();
        assert!(table.contains(
            SynSent,
            TriggerPattern::Segment(FlagSet::SYN | FlagSet::ACK),
            Established
        ));
        assert!(table.contains(
            FinWait1,
            TriggerPattern::Segment(FlagSet::FIN | FlagSet::ACK),
            TimeWait
        ));
        assert!(std::ptr::eq(transition_table(), transition_table()));
        assert_eq!(transition_table().clone(), TransitionTable::build());
    }

    #[test]
    fn reset_entries_cover_all_but_closed_and_listen() {
        let table = transition_table();
        for s in TcpState::ALL {
            let has = table.contains(s, TriggerPattern::Segment(FlagSet::RST), Closed);
            assert_eq!(has, s != Closed && s != Listen, "{s}");
        }
    }

    #[test]
    fn most_specific_segment_edge_wins() {
        let table = transition_table();
        let syn_ack = FlagSet::SYN | FlagSet::ACK;
        assert_eq!(table.match_segment(SynSent, syn_ack), Some(Established));
        assert_eq!(table.match_segment(SynSent, FlagSet::SYN), Some(SynReceived));
        assert_eq!(
            table.match_segment(FinWait1, FlagSet::FIN | FlagSet::ACK),
            Some(TimeWait)
        );
        assert_eq!(table.match_segment(FinWait1, FlagSet::FIN), Some(Closing));
        assert_eq!(table.match_segment(FinWait1, FlagSet::ACK | FlagSet::PSH), Some(FinWait2));
        assert_eq!(table.match_segment(Established, FlagSet::RST | FlagSet::FIN), Some(Closed));
        assert_eq!(table.match_segment(Listen, FlagSet::RST), None);
        assert_eq!(table.match_segment(Closed, FlagSet::SYN), None);
    }

    #[test]
    fn change_state_examples() {
        let mut s = Socket::fixture(Closed);
        change_state(&mut s, SynSent).unwrap();
        assert_eq!(s.state(), SynSent);

        let mut s = Socket::fixture(Closed);
        let before = s.clone();
        let err = change_state(&mut s, FinWait1).unwrap_err();
        assert_eq!(err, TransitionViolation { from: Closed, to: FinWait1 });
        assert_eq!(s, before);

        let mut s = Socket::fixture(TimeWait);
        let before = s.clone();
        change_state(&mut s, TimeWait).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn change_state_touches_only_state() {
        for from in TcpState::ALL {
            for to in TcpState::ALL {
                let mut s = Socket::fixture(from);
                let before = s.clone();
                match change_state(&mut s, to) {
                    Ok(()) => {
                        let mut expected = before;
                        expected.set_state_unguarded(to);
                        assert_eq!(s, expected);
                    }
                    Err(v) => {
                        assert_eq!((v.from, v.to), (from, to));
                        assert_eq!(s, before);
                    }
                }
            }
        }
    }

    #[test]
    fn listing_is_sorted_and_contains_examples() {
        let listing = transition_table().listing();
        let mut sorted = listing.clone();
        sorted.sort();
        assert_eq!(listing, sorted);
        assert!(listing.contains(&"FIN_WAIT_1 rcv(FIN+ACK) TIME_WAIT".to_string()));
        assert!(!listing
            .iter()
            .any(|l| l.starts_with("CLOSE_WAIT ") && l.ends_with(" FIN_WAIT_1")));
        assert_eq!(listing.len(), 21 + 9 + 11);
    }
}
