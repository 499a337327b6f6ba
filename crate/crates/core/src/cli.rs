//! Command-line front end. Exit codes: 0 success, 1 scenario or
//! conformance failure, 2 usage or configuration error.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::automaton::transition_table;
use crate::checker::{names_shutdown_bug, run_checks};
use crate::harness::HarnessConfig;
use crate::scenarios::{resolve, run_scenario};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Jsonl,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckName {
    Handlers,
    Closure,
    ApiOrdering,
    Shutdown,
    WaitSoundness,
}

impl CheckName {
    fn name(self) -> &'static str {
        match self {
            CheckName::Handlers => "handlers",
            CheckName::Closure => "closure",
            CheckName::ApiOrdering => "api-ordering",
            CheckName::Shutdown => "shutdown",
            CheckName::WaitSoundness => "wait-soundness",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tcpconform", version, about = "TCP state machine conformance harness")]
pub struct CliConfig {
    #[command(subcommand)]
    pub command: Cmd,
    /// Scheduler seed.
    #[arg(long, global = true, env = "TCPCONFORM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Skip the state re-check in shutdown (reproduces the race).
    #[arg(long, global = true)]
    pub buggy: bool,
    /// Maximum segment lifetime in virtual ticks.
    #[arg(long, global = true)]
    pub msl: Option<u64>,
    /// Default user-call wait timeout in virtual ticks.
    #[arg(long, global = true)]
    pub timeout: Option<u64>,
    /// Write the trace, report or listing here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run a built-in scenario or a scenario file.
    Scenario { name: String },
    /// Run the conformance checks.
    Conformance {
        #[arg(long, value_enum)]
        check: Option<CheckName>,
    },
    /// Print the transition table.
    DumpAutomaton,
}

impl CliConfig {
    pub fn harness_config(&self) -> HarnessConfig {
        let mut cfg = HarnessConfig::with_seed(self.seed);
        cfg.buggy_shutdown = self.buggy;
        if let Some(msl) = self.msl {
            cfg.timers.msl = msl;
        }
        if let Some(t) = self.timeout {
            cfg.socket_timeout = t;
        }
        cfg
    }
}

fn emit(cfg: &CliConfig, text: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match &cfg.out {
        Some(path) => match std::fs::write(path, text) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                let _ = writeln!(err, "error: cannot write {}: {e}", path.display());
                EXIT_USAGE
            }
        },
        None => {
            let _ = out.write_all(text.as_bytes());
            EXIT_OK
        }
    }
}

fn cmd_scenario(cfg: &CliConfig, name: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let sc = match resolve(name) {
        Ok(sc) => sc,
        Err(e) => {
            let _ = writeln!(err, "error: scenario {name:?}: {e}");
            return EXIT_USAGE;
        }
    };
    let hc = cfg.harness_config();
    if let Err(e) = hc.validate() {
        let _ = writeln!(err, "error: {e}");
        return EXIT_USAGE;
    }
    let report = match run_scenario(&sc, hc) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "{}: {e}", sc.name);
            return EXIT_FAIL;
        }
    };
    let text = match cfg.format.unwrap_or(Format::Jsonl) {
        Format::Table => report.outcome.trace.to_table(),
        Format::Jsonl | Format::Json => report.outcome.trace.to_jsonl(),
    };
    let code = emit(cfg, &text, out, err);
    if code != EXIT_OK {
        return code;
    }
    for f in &report.failures {
        let _ = writeln!(err, "{}: {f}", sc.name);
    }
    if report.passed() {
        let _ = writeln!(err, "{}: PASS (seed {})", sc.name, cfg.seed);
        EXIT_OK
    } else {
        let _ = writeln!(err, "{}: FAIL (seed {})", sc.name, cfg.seed);
        EXIT_FAIL
    }
}

fn cmd_conformance(cfg: &CliConfig, check: Option<CheckName>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let hc = cfg.harness_config();
    if let Err(e) = hc.validate() {
        let _ = writeln!(err, "error: {e}");
        return EXIT_USAGE;
    }
    let report = run_checks(check.map(CheckName::name), &hc).expect("known check name");
    let text = match cfg.format.unwrap_or(Format::Table) {
        Format::Table => report.to_table(10),
        Format::Json | Format::Jsonl => {
            let mut s = report.to_json();
            s.push('\n');
            s
        }
    };
    let code = emit(cfg, &text, out, err);
    if code != EXIT_OK {
        return code;
    }
    if let Some(shutdown) = report.check("shutdown") {
        if names_shutdown_bug(shutdown) {
            let _ = writeln!(err, "shutdown race: refused transition into FIN_WAIT_1");
        }
    }
    if report.passed {
        EXIT_OK
    } else {
        EXIT_FAIL
    }
}

fn cmd_dump(cfg: &CliConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let table = transition_table();
    let text = match cfg.format.unwrap_or(Format::Table) {
        Format::Table => table.listing_text(),
        Format::Jsonl | Format::Json => table.listing_jsonl(),
    };
    emit(cfg, &text, out, err)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cfg = match CliConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match &cfg.command {
        Cmd::Scenario { name } => cmd_scenario(&cfg, name, out, err),
        Cmd::Conformance { check } => cmd_conformance(&cfg, *check, out, err),
        Cmd::DumpAutomaton => cmd_dump(&cfg, out, err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("tcpconform").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn dump_includes_fin_ack_edge() {
        let (code, out, _) = run_str(&["dump-automaton"]);
        assert_eq!(code, 0);
        assert!(out.lines().any(|l| l == "FIN_WAIT_1 rcv(FIN+ACK) TIME_WAIT"));
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run_str(&["frobnicate"]).0, EXIT_USAGE);
    }

    #[test]
    fn zero_msl_is_config_error() {
        assert_eq!(run_str(&["scenario", "handshake", "--msl", "0"]).0, EXIT_USAGE);
    }
}
