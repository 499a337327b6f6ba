//! Conformance checks: the exhaustive handler sweep, the closure fixpoint,
//! API call-order validation over traces, the shutdown race regression and
//! wait-for-events soundness.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::api::ErrorCode;
use crate::automaton::{transition_table, FlagSet, TcpState, TransitionViolation, TriggerPattern};
use crate::engine::{segment_grid, ClosureGraph, Engine, StateSet};
use crate::harness::{HarnessConfig, ScenarioTrace, TraceKind, TraceRecord};
use crate::scenarios::{builtin, run_scenario, BUILTIN_NAMES};
use crate::segment::SegmentSummary;
use crate::socket::{Socket, SocketModel};

use TcpState::*;

/// One failed case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseViolation {
    pub state: Option<TcpState>,
    pub segment: Option<SegmentSummary>,
    /// The transition seen, as `FROM -> TO`, or a short label.
    pub observed: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: u64,
    pub violations: Vec<CaseViolation>,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str, cases: u64, violations: Vec<CaseViolation>) -> CheckReport {
        CheckReport {
            name: name.to_string(),
            cases,
            passed: violations.is_empty(),
            violations,
        }
    }

    /// Distinct flag sets among the violating cases of `state`.
    pub fn violating_flag_sets(&self, state: TcpState) -> BTreeSet<u8> {
        self.violations
            .iter()
            .filter(|v| v.state == Some(state))
            .filter_map(|v| v.segment.map(|s| s.flags.bits()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub checks: Vec<CheckReport>,
    pub passed: bool,
}

impl ConformanceReport {
    pub fn from_checks(checks: Vec<CheckReport>) -> ConformanceReport {
        ConformanceReport {
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    pub fn single(check: CheckReport) -> ConformanceReport {
        ConformanceReport::from_checks(vec![check])
    }

    pub fn check(&self, name: &str) -> Option<&CheckReport> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Summary line per check, then up to `max_listed` violations each.
    pub fn to_table(&self, max_listed: usize) -> String {
        let mut out = format!("{:<20} {:>7} {:>10}  {}\n", "check", "cases", "violations", "result");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<20} {:>7} {:>10}  {}\n",
                c.name,
                c.cases,
                c.violations.len(),
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        for c in &self.checks {
            for v in c.violations.iter().take(max_listed) {
                out.push_str(&format!("  {}: {v}\n", c.name));
            }
            if c.violations.len() > max_listed {
                out.push_str(&format!("  {}: ... {} more\n", c.name, c.violations.len() - max_listed));
            }
        }
        out.push_str(if self.passed { "overall: PASS\n" } else { "overall: FAIL\n" });
        out
    }
}

impl fmt::Display for CaseViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(s) = self.state {
            write!(f, "[{s}] ")?;
        }
        if let Some(g) = self.segment {
            write!(f, "{g}: ")?;
        }
        write!(f, "{} ({})", self.observed, self.detail)
    }
}

// ---- handler sweep ----

/// What a single handler invocation did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseOutcome {
    pub state: TcpState,
    pub segment: SegmentSummary,
    pub before: SocketModel,
    pub after: SocketModel,
    pub result: Result<(), TransitionViolation>,
}

impl CaseOutcome {
    pub fn transition(&self) -> String {
        match &self.result {
            Ok(()) => format!("{} -> {}", self.state, self.after.state),
            Err(v) => format!("{} -> {} refused", v.from, v.to),
        }
    }
}

/// Runs `engine` over the whole input grid of `state`.
pub fn sweep_state(engine: &Engine, state: TcpState) -> Vec<CaseOutcome> {
    let fixture = Socket::fixture(state);
    segment_grid(&fixture)
        .map(|g| {
            let mut s = fixture.clone();
            // We make a hard copy of the struct
            let before = s.model();
            let result = engine.handle_in_state(&mut s, &g);
            CaseOutcome {
                state,
                segment: g.summary(),
                before,
                after: s.model(),
                result,
            }
        })
        .collect()
}

/// True iff a segment with `flags` may move `from` to `to` by some table
/// entry.
fn segment_justifies(from: TcpState, flags: FlagSet, to: TcpState) -> bool {
    from == to
        || transition_table().segment_edges().any(|t| {
            t.from == from
                && t.to == to
                && matches!(t.trigger, TriggerPattern::Segment(req) if flags.contains(req))
        })
}

/// Every way a handler outcome breaks the rules; empty when it conforms.
pub fn judge_case(c: &CaseOutcome) -> Vec<String> {
    let mut bad = Vec::new();
    let (b, a) = (&c.before, &c.after);
    let flags = c.segment.flags;
    if let Err(v) = &c.result {
        bad.push(format!("guard refused {} -> {}", v.from, v.to));
        return bad;
    }
    if !segment_justifies(c.state, flags, a.state) {
        bad.push(format!("no rcv({flags}) edge {} -> {}", c.state, a.state));
    }
    if (a.sock_type, a.protocol, a.local_ip, a.local_port) != (b.sock_type, b.protocol, b.local_ip, b.local_port) {
        bad.push("local identity changed".into());
    }
    let rst = flags.contains(FlagSet::RST);
    match c.state {
        Closed if a != b => bad.push("CLOSED socket modified".into()),
        Closed | Listen => {}
        _ if rst => {
            // the TCP connection state becomes CLOSED
            if a.state != Closed || !a.reset_flag {
                bad.push("reset not honoured".into());
            }
            if !a.same_connection(b) {
                bad.push("reset changed connection fields".into());
            }
        }
        // No other transition can be done
        CloseWait if a != b => bad.push("CLOSE_WAIT model changed without reset".into()),
        _ => {}
    }
    if !rst && a.reset_flag && !b.reset_flag {
        bad.push("reset flag set without RST".into());
    }
    bad
}

/// The exhaustive handler sweep: 11 states x 864 grid segments.
pub fn check_handlers(engine: &Engine) -> CheckReport {
    let mut cases = 0;
    let mut violations = Vec::new();
    for state in TcpState::ALL {
        for c in sweep_state(engine, state) {
            cases += 1;
            for detail in judge_case(&c) {
                violations.push(CaseViolation {
                    state: Some(state),
                    segment: Some(c.segment),
                    observed: c.transition(),
                    detail,
                });
            }
        }
    }
    CheckReport::new("handlers", cases, violations)
}

// ---- closure ----

/// Independent reachability over the declarative table: breadth-first over
/// every segment-triggered entry, to the fixpoint.
pub fn table_closure(start: TcpState) -> StateSet {
    let mut seen = StateSet::single(start);
    let mut queue = VecDeque::from([start]);
    while let Some(s) = queue.pop_front() {
        for t in transition_table().segment_edges().filter(|t| t.from == s) {
            if !seen.contains(t.to) {
                seen.insert(t.to);
                queue.push_back(t.to);
            }
        }
    }
    seen
}

pub fn check_closure_fixpoint(engine: &Engine) -> CheckReport {
    let graph = ClosureGraph::build(engine);
    let mut violations = Vec::new();
    for state in TcpState::ALL {
        let d3 = graph.reachable_within(state, 3);
        let d4 = graph.reachable_within(state, 4);
        let oracle = table_closure(state);
        if d3 != d4 {
            violations.push(CaseViolation {
                state: Some(state),
                segment: None,
                observed: format!("depth 3 {d3}, depth 4 {d4}"),
                detail: "closure not a fixpoint at depth 3".into(),
            });
        }
        if d3 != oracle {
            violations.push(CaseViolation {
                state: Some(state),
                segment: None,
                observed: format!("engine {d3}, table {oracle}"),
                detail: "engine closure differs from table closure".into(),
            });
        }
    }
    CheckReport::new("closure", TcpState::ALL.len() as u64, violations)
}

// ---- API ordering ----

/// A user call as recorded in a trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiCall {
    pub ep: String,
    pub sock: Option<u32>,
    pub op: String,
    pub result: ErrorCode,
}

impl ApiCall {
    pub fn parse(r: &TraceRecord) -> Option<ApiCall> {
        if r.kind != TraceKind::UserCall {
            return None;
        }
        let mut words = r.detail.split_whitespace();
        let op = words.next()?.to_string();
        let mut sock = None;
        let mut result = None;
        for w in words {
            if let Some(v) = w.strip_prefix("sock=") {
                sock = v.parse().ok();
            } else if let Some(v) = w.strip_prefix("result=") {
                result = v.parse().ok();
            }
        }
        Some(ApiCall {
            ep: r.ep.clone(),
            sock,
            op,
            result: result?,
        })
    }
}

/// Dependency number for "open precedes `op`".
fn open_dep(op: &str) -> Option<u8> {
    match op {
        "connect" | "accept" => Some(1),
        "send" => Some(2),
        "receive" => Some(3),
        "shutdown" => Some(4),
        "close" => Some(5),
        _ => None,
    }
}

/// Dependency number for "connect precedes `op`".
fn connect_dep(op: &str) -> Option<u8> {
    match op {
        "send" => Some(6),
        "receive" => Some(7),
        "shutdown" => Some(8),
        _ => None,
    }
}

#[derive(Default)]
struct SockCalls {
    opened: bool,
    connected: bool,
    closed: bool,
}

/// Violations of the call order in one trace.
pub fn api_order_violations(trace: &ScenarioTrace) -> Vec<CaseViolation> {
    let mut socks: BTreeMap<(String, Option<u32>), SockCalls> = BTreeMap::new();
    let mut out = Vec::new();
    for call in trace.records.iter().filter_map(ApiCall::parse) {
        let who = format!(
            "{} sock={}",
            call.ep,
            call.sock.map_or("-".to_string(), |s| s.to_string())
        );
        let st = socks.entry((call.ep.clone(), call.sock)).or_default();
        let mut bad = |detail: String| {
            out.push(CaseViolation {
                state: None,
                segment: None,
                observed: format!("{who}: {}", call.op),
                detail,
            })
        };
        if call.op == "open" {
            if st.opened && call.result == ErrorCode::NoError {
                bad("descriptor opened twice".into());
            }
            st.opened |= call.result == ErrorCode::NoError;
            continue;
        }
        if st.closed {
            bad("used after close".into());
            continue;
        }
        if !st.opened {
            let dep = open_dep(&call.op).map_or(String::new(), |d| format!(" (dependency {d})"));
            bad(format!("{} without open{dep}", call.op));
            continue;
        }
        match call.op.as_str() {
            "connect" | "accept" => {
                if st.connected {
                    bad(format!("{} on a connected socket", call.op));
                }
                st.connected |= call.result == ErrorCode::NoError;
            }
            "close" => st.closed = true,
            op => {
                if let Some(dep) = connect_dep(op) {
                    if !st.connected {
                        bad(format!("{op} without a successful connect (dependency {dep})"));
                    }
                }
            }
        }
    }
    out
}

pub fn check_api_ordering(traces: &[ScenarioTrace]) -> CheckReport {
    let cases = traces
        .iter()
        .map(|t| t.records.iter().filter_map(ApiCall::parse).count() as u64)
        .sum();
    let violations = traces.iter().flat_map(api_order_violations).collect();
    CheckReport::new("api-ordering", cases, violations)
}

/// A trace of user calls on endpoint A, socket 1, at t = 0, 1, 2, ...
pub fn synthetic_trace(calls: &[(&str, ErrorCode)]) -> ScenarioTrace {
    let mut trace = ScenarioTrace::default();
    for (t, (op, result)) in calls.iter().enumerate() {
        trace.push(TraceRecord {
            t: t as u64,
            ep: "A".into(),
            kind: TraceKind::UserCall,
            from: None,
            to: None,
            flags: None,
            detail: format!("{op} sock=1 result={result}"),
        });
    }
    trace
}

/// For each of the eight dependencies, call sequences that break it.
pub fn dependency_breaking_traces() -> Vec<(u8, ScenarioTrace)> {
    use ErrorCode::*;
    let mut out = Vec::new();
    for op in ["connect", "send", "receive", "shutdown", "close"] {
        let dep = open_dep(op).expect("known op");
        out.push((dep, synthetic_trace(&[(op, NoError)])));
        out.push((dep, synthetic_trace(&[("open", InvalidSocket), (op, NoError)])));
    }
    for op in ["send", "receive", "shutdown"] {
        let dep = connect_dep(op).expect("known op");
        out.push((dep, synthetic_trace(&[("open", NoError), (op, NoError)])));
        for failed in [Timeout, ConnectionReset, PortUnreachable] {
            out.push((
                dep,
                synthetic_trace(&[("open", NoError), ("connect", failed), (op, NoError)]),
            ));
        }
        out.push((dep, synthetic_trace(&[("open", NoError), ("accept", Timeout), (op, NoError)])));
    }
    out
}

// ---- shutdown race ----

const RACE_VARIANTS: [&str; 3] = ["shutdown-race", "shutdown-race-rst", "shutdown-race-random"];

/// Runs the shutdown race over `seeds` seeds, cycling through the peer-FIN,
/// peer-RST and free-interleaving variants. Passes iff no transition is
/// refused.
pub fn check_shutdown_regression_with(buggy: bool, seeds: u64, base: &HarnessConfig) -> CheckReport {
    let mut violations = Vec::new();
    for seed in 0..seeds {
        let name = RACE_VARIANTS[(seed % 3) as usize];
        let sc = builtin(name).expect("built-in");
        let cfg = HarnessConfig {
            seed,
            buggy_shutdown: buggy,
            ..base.clone()
        };
        match run_scenario(&sc, cfg) {
            Ok(r) => {
                for v in &r.outcome.violations {
                    violations.push(CaseViolation {
                        state: Some(v.from),
                        segment: None,
                        observed: format!("{} -> {}", v.from, v.to),
                        detail: format!("{name} seed={seed} t={} {} during {}", v.t, v.ep, v.during),
                    });
                }
            }
            Err(e) => violations.push(CaseViolation {
                state: None,
                segment: None,
                observed: "harness error".into(),
                detail: format!("{name} seed={seed}: {e}"),
            }),
        }
    }
    CheckReport::new("shutdown", seeds, violations)
}

pub fn check_shutdown_regression(buggy: bool) -> CheckReport {
    check_shutdown_regression_with(buggy, 1000, &HarnessConfig::default())
}

/// True iff the report names one of the two refused shutdown transitions.
pub fn names_shutdown_bug(report: &CheckReport) -> bool {
    report
        .violations
        .iter()
        .any(|v| v.observed == "CLOSE_WAIT -> FIN_WAIT_1" || v.observed == "CLOSED -> FIN_WAIT_1")
}

// ---- wait soundness ----

/// Runs the built-in scenarios over `runs` seeds and checks that every
/// completed wait ended in a predicted state.
pub fn check_wait_soundness(runs: u64, base: &HarnessConfig) -> CheckReport {
    let mut violations = Vec::new();
    let mut waits = 0;
    for seed in 0..runs {
        let name = BUILTIN_NAMES[(seed % BUILTIN_NAMES.len() as u64) as usize];
        let sc = builtin(name).expect("built-in");
        let cfg = HarnessConfig {
            seed,
            ..base.clone()
        };
        match run_scenario(&sc, cfg) {
            Ok(r) => {
                waits += r.outcome.wait_checks.len() as u64;
                for w in r.outcome.wait_failures() {
                    violations.push(CaseViolation {
                        state: Some(w.entry),
                        segment: None,
                        observed: format!("{} -> {}", w.entry, w.observed),
                        detail: format!("{name} seed={seed} wait {} predicted {}", w.mask, w.predicted),
                    });
                }
            }
            Err(e) => violations.push(CaseViolation {
                state: None,
                segment: None,
                observed: "harness error".into(),
                detail: format!("{name} seed={seed}: {e}"),
            }),
        }
    }
    let mut r = CheckReport::new("wait-soundness", waits, violations);
    if waits == 0 {
        r.passed = false;
    }
    r
}

// ---- everything ----

pub const CHECK_NAMES: [&str; 5] = ["handlers", "closure", "api-ordering", "shutdown", "wait-soundness"];

/// Traces of every built-in scenario at `seed`.
pub fn scenario_traces(base: &HarnessConfig) -> Vec<ScenarioTrace> {
    BUILTIN_NAMES
        .iter()
        .filter_map(|name| {
            let sc = builtin(name)?;
            run_scenario(&sc, base.clone()).ok().map(|r| r.outcome.trace)
        })
        .collect()
}

/// Runs the named check, or every check when `only` is None.
pub fn run_checks(only: Option<&str>, base: &HarnessConfig) -> Option<ConformanceReport> {
    let names: Vec<&str> = match only {
        Some(n) if CHECK_NAMES.contains(&n) => vec![n],
        Some(_) => return None,
        None => CHECK_NAMES.to_vec(),
    };
    let checks = names
        .into_iter()
        .map(|n| match n {
            "handlers" => check_handlers(&base.engine),
            "closure" => check_closure_fixpoint(&base.engine),
            "api-ordering" => check_api_ordering(&scenario_traces(base)),
            "shutdown" => check_shutdown_regression_with(base.buggy_shutdown, 1000, base),
            _ => check_wait_soundness(1000, &HarnessConfig { buggy_shutdown: false, ..base.clone() }),
        })
        .collect();
    Some(ConformanceReport::from_checks(checks))
}
