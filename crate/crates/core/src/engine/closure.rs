//! Reachability over the one-segment relation, computed by brute force.
//!
//! Concrete sockets are abstracted to a key made of the state and the
//! buffer/flag facts the event mapping depends on. The first concrete socket
//! seen for a key stands in for all of them.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{segment_grid, update_events, Engine};
use crate::automaton::TcpState;
use crate::socket::{EventMask, Socket};

/// A subset of the eleven states.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct StateSet(u16);

impl StateSet {
    pub const EMPTY: StateSet = StateSet(0);

    pub fn single(s: TcpState) -> StateSet {
        StateSet(1 << s.code())
    }

    pub fn all() -> StateSet {
        StateSet((1 << 11) - 1)
    }

    pub fn from_bits(bits: u16) -> Option<StateSet> {
        (bits < (1 << 11)).then_some(StateSet(bits))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn insert(&mut self, s: TcpState) {
        self.0 |= 1 << s.code();
    }

    pub fn contains(self, s: TcpState) -> bool {
        self.0 & (1 << s.code()) != 0
    }

    pub fn union(self, other: StateSet) -> StateSet {
        StateSet(self.0 | other.0)
    }

    pub fn is_subset(self, other: StateSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn difference(self, other: StateSet) -> StateSet {
        StateSet(self.0 & !other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = TcpState> {
        TcpState::ALL.into_iter().filter(move |s| self.contains(*s))
    }
}

impl FromIterator<TcpState> for StateSet {
    fn from_iter<I: IntoIterator<Item = TcpState>>(iter: I) -> StateSet {
        let mut set = StateSet::EMPTY;
        for s in iter {
            set.insert(s);
        }
        set
    }
}

impl fmt::Display for StateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(TcpState::name).collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

impl fmt::Debug for StateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for StateSet {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for StateSet {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<StateSet, D::Error> {
        let v: Vec<TcpState> = Vec::deserialize(de)?;
        Ok(v.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Key {
    state: TcpState,
    tx_pending: bool,
    rx_pending: bool,
    fin_received: bool,
    reset_flag: bool,
}

impl Key {
    fn of(s: &Socket) -> Key {
        Key {
            state: s.state(),
            tx_pending: !s.tx_buffer.is_empty(),
            rx_pending: !s.rx_buffer.is_empty(),
            fin_received: s.fin_received,
            reset_flag: s.reset_flag,
        }
    }
}

struct Node {
    state: TcpState,
    events: EventMask,
    succ: Vec<usize>,
}

/// The abstract one-segment successor graph for one engine.
pub struct ClosureGraph {
    nodes: Vec<Node>,
    starts: [Vec<usize>; 11],
}

/// Concrete sockets a user call can find in `state`: the canonical fixture
/// plus variants with unacknowledged data, unread data, a consumed FIN or a
/// reset, wherever the state admits them.
fn start_variants(state: TcpState) -> Vec<Socket> {
    use TcpState::*;
    let mut out = Vec::new();
    for bits in 0u8..16 {
        let tx = bits & 1 != 0;
        let rx = bits & 2 != 0;
        let fin = bits & 4 != 0;
        let rst = bits & 8 != 0;
        if tx && !matches!(state, Established | CloseWait) {
            continue;
        }
        if rx && matches!(state, Listen | SynSent | SynReceived) {
            continue;
        }
        if state == Closed {
            if rst && (rx || fin) {
                continue;
            }
        } else {
            if rst {
                continue;
            }
            if fin != matches!(state, CloseWait | Closing | LastAck | TimeWait) {
                continue;
            }
        }
        let mut s = Socket::fixture(state);
        if tx {
            s.tx_buffer.push_back(b'x');
            s.snd_nxt = s.snd_nxt.wrapping_add(1);
        }
        if rx {
            s.rx_buffer.push_back(b'y');
        }
        s.fin_received = fin;
        s.reset_flag = rst;
        s.event_flags = update_events(&s);
        out.push(s);
    }
    out
}

impl ClosureGraph {
    /// Explores every abstract socket reachable from the start variants of
    /// every state.
    pub fn build(engine: &Engine) -> ClosureGraph {
        let mut index: HashMap<Key, usize> = HashMap::new();
        let mut reps: Vec<Socket> = Vec::new();
        let intern = |s: Socket, index: &mut HashMap<Key, usize>, reps: &mut Vec<Socket>| {
            *index.entry(Key::of(&s)).or_insert_with(|| {
                reps.push(s);
                reps.len() - 1
            })
        };
        let mut starts: [Vec<usize>; 11] = Default::default();
        for st in TcpState::ALL {
            for v in start_variants(st) {
                let i = intern(v, &mut index, &mut reps);
                if !starts[st as usize].contains(&i) {
                    starts[st as usize].push(i);
                }
            }
        }
        let mut succ: Vec<Vec<usize>> = Vec::new();
        let mut next = 0;
        while next < reps.len() {
            let rep = reps[next].clone();
            let mut out = Vec::new();
            for g in segment_grid(&rep) {
                let mut s = rep.clone();
                if engine.handle_in_state(&mut s, &g).is_err() {
                    continue;
                }
                s.outbound.clear();
                s.event_flags = update_events(&s);
                let j = intern(s, &mut index, &mut reps);
                if !out.contains(&j) {
                    out.push(j);
                }
            }
            succ.push(out);
            next += 1;
        }
        let nodes = reps
            .iter()
            .zip(succ)
            .map(|(s, succ)| Node {
                state: s.state(),
                events: update_events(s),
                succ,
            })
            .collect();
        ClosureGraph { nodes, starts }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// States reachable from `start` in at most `depth` segments.
    pub fn reachable_within(&self, start: TcpState, depth: usize) -> StateSet {
        self.depth_profile(start, depth)
            .into_iter()
            .fold(StateSet::EMPTY, StateSet::union)
    }

    /// Element `n` holds the states first reached after exactly `n` segments.
    pub fn depth_profile(&self, start: TcpState, depth: usize) -> Vec<StateSet> {
        let mut seen = vec![false; self.nodes.len()];
        let mut frontier: Vec<usize> = self.starts[start as usize].clone();
        for &i in &frontier {
            seen[i] = true;
        }
        let mut reached = StateSet::single(start);
        let mut profile = vec![reached];
        for _ in 0..depth {
            let mut next = Vec::new();
            for &i in &frontier {
                for &j in &self.nodes[i].succ {
                    if !seen[j] {
                        seen[j] = true;
                        next.push(j);
                    }
                }
            }
            let layer: StateSet = next.iter().map(|&j| self.nodes[j].state).collect();
            profile.push(layer.difference(reached));
            reached = reached.union(layer);
            frontier = next;
        }
        profile
    }

    /// The event-completion closure. Along every path of at most three
    /// segments, the states visited up to and including the first socket
    /// whose events meet `mask` are collected; paths that never meet the
    /// mask contribute nothing. Empty means the event cannot complete.
    pub fn wait_for_events(&self, start: TcpState, mask: EventMask) -> StateSet {
        let mut result = StateSet::EMPTY;
        let mut frontier: Vec<(usize, StateSet)> = Vec::new();
        for &i in &self.starts[start as usize] {
            let visited = StateSet::single(start);
            if self.nodes[i].events.intersects(mask) {
                result = result.union(visited);
            } else {
                frontier.push((i, visited));
            }
        }
        for _ in 0..3 {
            let mut next: Vec<(usize, StateSet)> = Vec::new();
            for &(i, visited) in &frontier {
                for &j in &self.nodes[i].succ {
                    let mut v = visited;
                    v.insert(self.nodes[j].state);
                    if self.nodes[j].events.intersects(mask) {
                        result = result.union(v);
                    } else if !next.contains(&(j, v)) {
                        next.push((j, v));
                    }
                }
            }
            frontier = next;
        }
        result
    }
}

/// The graph of the conforming engine, built once.
pub fn default_graph() -> &'static ClosureGraph {
    static GRAPH: OnceLock<ClosureGraph> = OnceLock::new();
    GRAPH.get_or_init(|| ClosureGraph::build(&Engine::default()))
}

/// Reflexive-transitive closure of the one-segment relation, bounded at
/// three segments.
pub fn reachable_states(start: TcpState) -> StateSet {
    default_graph().reachable_within(start, 3)
}

pub fn reachable_states_within(start: TcpState, depth: usize) -> StateSet {
    default_graph().reachable_within(start, depth)
}

pub fn depth_profile(start: TcpState, depth: usize) -> Vec<StateSet> {
    default_graph().depth_profile(start, depth)
}

/// States a socket may be in when a wait for `mask` entered in `start`
/// completes.
pub fn wait_for_events_states(start: TcpState, mask: EventMask) -> StateSet {
    default_graph().wait_for_events(start, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use TcpState::*;

    fn set(states: &[TcpState]) -> StateSet {
        states.iter().copied().collect()
    }

    #[test]
    fn closed_is_absorbing() {
        assert_eq!(reachable_states(Closed), set(&[Closed]));
    }

    #[test]
    fn syn_sent_reaches_close_wait() {
        let r = reachable_states(SynSent);
        assert!(set(&[SynSent, SynReceived, Established, CloseWait, Closed]).is_subset(r));
    }

    #[test]
    fn established_connected_is_immediate() {
        assert_eq!(
            wait_for_events_states(Established, EventMask::CONNECTED),
            set(&[Established])
        );
    }

    #[test]
    fn established_tx_done() {
        let r = wait_for_events_states(Established, EventMask::TX_DONE);
        assert!(r.is_subset(set(&[Established, CloseWait, Closed])));
        assert!(r.contains(CloseWait) && r.contains(Closed));
    }

    #[test]
    fn listen_tx_done_holds_on_entry() {
        assert_eq!(wait_for_events_states(Listen, EventMask::TX_DONE), set(&[Listen]));
    }

    #[test]
    fn unreachable_event_is_empty() {
        assert_eq!(wait_for_events_states(Closed, EventMask::CONNECTED), StateSet::EMPTY);
    }

    #[test]
    fn state_set_display() {
        assert_eq!(set(&[Listen, Closed]).to_string(), "{CLOSED, LISTEN}");
        assert_eq!(StateSet::EMPTY.to_string(), "{}");
    }
}
