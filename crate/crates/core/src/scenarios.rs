//! Built-in two-endpoint scenarios and the runner that checks their
//! expectations.

use serde::Serialize;

use crate::harness::{run_pair, HarnessConfig, HarnessError, RunOutcome, Scenario, ScriptError};

pub const BUILTIN_NAMES: [&str; 6] = [
    "handshake",
    "transfer",
    "orderly-close",
    "shutdown-race",
    "shutdown-race-rst",
    "shutdown-race-random",
];

const HANDSHAKE: &str = "
[a]
open
connect 10.0.0.2 80
[b]
open
accept 80
expect a ESTABLISHED
expect b ESTABLISHED
expect segments SYN SYN+ACK ACK
";

const TRANSFER: &str = "
[a]
open
connect 10.0.0.2 80
send 68656c6c6f
shutdown
close
[b]
open
accept 80
receive
receive
close
expect a CLOSED
expect b CLOSED
";

const ORDERLY_CLOSE: &str = "
[a]
open
connect 10.0.0.2 80
shutdown
close
[b]
open
accept 80
receive
close
expect a CLOSED
expect b CLOSED
";

// B's FIN lands while A is still flushing its byte, so A's shutdown finds
// CLOSE_WAIT after the flush.
const SHUTDOWN_RACE: &str = "
[a]
open
connect 10.0.0.2 80
sleep 1
send 78
shutdown
close
[b]
open
accept 80
shutdown
close
expect a CLOSED
expect b CLOSED
";

// The peer's reset lands while A is flushing.
const SHUTDOWN_RACE_RST: &str = "
[a]
open
connect 10.0.0.2 80
sleep 1
send 78
shutdown
close
[b]
open
accept 80
inject-rst
expect a CLOSED
expect b ESTABLISHED
";

// As shutdown-race, with the interleaving left to the seed.
const SHUTDOWN_RACE_RANDOM: &str = "
[a]
open
connect 10.0.0.2 80
send 78
shutdown
close
[b]
open
accept 80
shutdown
close
expect a CLOSED
expect b CLOSED
";

pub fn builtin(name: &str) -> Option<Scenario> {
    let text = match name {
        "handshake" => HANDSHAKE,
        "transfer" => TRANSFER,
        "orderly-close" => ORDERLY_CLOSE,
        "shutdown-race" => SHUTDOWN_RACE,
        "shutdown-race-rst" => SHUTDOWN_RACE_RST,
        "shutdown-race-random" => SHUTDOWN_RACE_RANDOM,
        _ => return None,
    };
    Some(Scenario::parse(name, text).expect("built-in scenarios parse"))
}

/// A built-in name, or else a path to a scenario file.
pub fn resolve(name_or_path: &str) -> Result<Scenario, ScriptError> {
    match builtin(name_or_path) {
        Some(s) => Ok(s),
        None => Scenario::load(std::path::Path::new(name_or_path)),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub failures: Vec<String>,
    #[serde(skip)]
    pub outcome: RunOutcome,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs a scenario and lists every way it fell short: unmet expectations,
/// refused transitions, unpredicted waits and closure escapes.
pub fn run_scenario(sc: &Scenario, cfg: HarnessConfig) -> Result<ScenarioReport, HarnessError> {
    let seed = cfg.seed;
    let outcome = run_pair(&sc.scripts[0], &sc.scripts[1], cfg)?;
    let mut failures = Vec::new();
    for (ep, name) in ["a", "b"].into_iter().enumerate() {
        if let Some(want) = sc.expect[ep] {
            match outcome.final_state(ep) {
                Some(got) if got == want => {}
                got => failures.push(format!(
                    "endpoint {name}: expected {want}, ended in {}",
                    got.map_or("no socket".to_string(), |s| s.to_string())
                )),
            }
        }
    }
    if let Some(want) = &sc.expect_segments {
        let got = outcome.trace.segments_sent();
        if &got != want {
            let show = |v: &[crate::FlagSet]| v.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(" ");
            failures.push(format!("segments: expected [{}], sent [{}]", show(want), show(&got)));
        }
    }
    for v in &outcome.violations {
        failures.push(format!(
            "t={} {}: refused {} -> {} during {}",
            v.t, v.ep, v.from, v.to, v.during
        ));
    }
    for w in outcome.wait_failures() {
        failures.push(format!(
            "t={} {}: wait for {} from {} ended in {}, predicted {}",
            w.t, w.ep, w.mask, w.entry, w.observed, w.predicted
        ));
    }
    for c in &outcome.closure_failures {
        failures.push(format!(
            "t={} {}: released in {}, found {}",
            c.t, c.ep, c.released, c.observed
        ));
    }
    for (ep, t) in outcome.tasks.iter().enumerate() {
        if let crate::harness::TaskEnd::Panicked(msg) = t {
            failures.push(format!("task {} panicked: {msg}", ["a", "b"][ep]));
        }
    }
    Ok(ScenarioReport {
        name: sc.name.clone(),
        seed,
        failures,
        outcome,
    })
}
