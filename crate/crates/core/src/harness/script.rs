//! A small line-oriented language for user tasks.
//!
//! ```text
//! # endpoint A
//! [a]
//! open
//! connect 10.0.0.2 80
//! send 68656c6c6f
//! shutdown
//! close
//! [b]
//! open
//! accept 80
//! receive
//! close
//! expect a CLOSED
//! ```

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::api::{ConnectedSession, RemoteAddr, Stack, UnconnectedSession};
use crate::automaton::{FlagSet, TcpState};
use crate::socket::{Protocol, SocketType};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Open,
    Connect(Ipv4Addr, u16),
    Accept(u16),
    Send(Vec<u8>),
    Receive,
    Shutdown,
    Close,
    Sleep(u64),
    InjectRst,
    LinkDown,
    LinkUp,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Open => f.write_str("open"),
            Command::Connect(ip, port) => write!(f, "connect {ip} {port}"),
            Command::Accept(port) => write!(f, "accept {port}"),
            Command::Send(data) => {
                f.write_str("send ")?;
                data.iter().try_for_each(|b| write!(f, "{b:02x}"))
            }
            Command::Receive => f.write_str("receive"),
            Command::Shutdown => f.write_str("shutdown"),
            Command::Close => f.write_str("close"),
            Command::Sleep(n) => write!(f, "sleep {n}"),
            Command::InjectRst => f.write_str("inject-rst"),
            Command::LinkDown => f.write_str("link-down"),
            Command::LinkUp => f.write_str("link-up"),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ScriptError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: `{cmd}` is not allowed {what}")]
    Order { line: usize, cmd: String, what: &'static str },
    #[error("{0}")]
    Io(String),
}

fn syntax(line: usize, msg: impl Into<String>) -> ScriptError {
    ScriptError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn parse_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

fn parse_command(line: usize, text: &str) -> Result<Command, ScriptError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let arg = |i: usize| words.get(i).copied().ok_or_else(|| syntax(line, format!("`{}` needs an argument", words[0])));
    let num = |i: usize| -> Result<u64, ScriptError> {
        arg(i)?.parse().map_err(|_| syntax(line, format!("bad number {:?}", words[i])))
    };
    let port = |i: usize| -> Result<u16, ScriptError> {
        arg(i)?.parse().map_err(|_| syntax(line, format!("bad port {:?}", words[i])))
    };
    let expected_len = match words[0] {
        "connect" => 3,
        "accept" | "send" | "sleep" => 2,
        _ => 1,
    };
    if words.len() > expected_len {
        return Err(syntax(line, format!("too many arguments to `{}`", words[0])));
    }
    Ok(match words[0] {
        "open" => Command::Open,
        "connect" => {
            let ip: Ipv4Addr = arg(1)?
                .parse()
                .map_err(|_| syntax(line, format!("bad address {:?}", words[1])))?;
            Command::Connect(ip, port(2)?)
        }
        "accept" => Command::Accept(port(1)?),
        "send" => Command::Send(parse_hex(arg(1)?).ok_or_else(|| syntax(line, "send takes hex bytes"))?),
        "receive" => Command::Receive,
        "shutdown" => Command::Shutdown,
        "close" => Command::Close,
        "sleep" => Command::Sleep(num(1)?),
        "inject-rst" => Command::InjectRst,
        "link-down" => Command::LinkDown,
        "link-up" => Command::LinkUp,
        other => return Err(syntax(line, format!("unknown command {other:?}"))),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Held {
    Nothing,
    Unconnected,
    Connected,
}

/// A validated command sequence for one user task.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Script {
    commands: Vec<(usize, Command)>,
}

impl Script {
    /// Checks call order statically, with every connect and accept assumed
    /// to succeed. At run time the task stops at the first failing call.
    pub fn new(commands: Vec<(usize, Command)>) -> Result<Script, ScriptError> {
        let mut held = Held::Nothing;
        for (line, cmd) in &commands {
            let order = |what| ScriptError::Order {
                line: *line,
                cmd: cmd.to_string(),
                what,
            };
            held = match (cmd, held) {
                (Command::Open, Held::Nothing) => Held::Unconnected,
                (Command::Open, _) => return Err(order("while a socket is open")),
                (Command::Connect(ip, _), Held::Unconnected) => {
                    if ip.is_unspecified() {
                        return Err(syntax(*line, "connect needs a specified address"));
                    }
                    Held::Connected
                }
                (Command::Accept(_), Held::Unconnected) => Held::Connected,
                (Command::Connect(..) | Command::Accept(_), Held::Nothing) => return Err(order("before open")),
                (Command::Connect(..) | Command::Accept(_), Held::Connected) => {
                    return Err(order("on a connected socket"))
                }
                (Command::Send(_) | Command::Receive | Command::Shutdown | Command::InjectRst, Held::Connected) => {
                    Held::Connected
                }
                (Command::Send(_) | Command::Receive | Command::Shutdown | Command::InjectRst, _) => {
                    return Err(order("without a connection"))
                }
                (Command::Close, Held::Nothing) => return Err(order("without an open socket")),
                (Command::Close, _) => Held::Nothing,
                (Command::Sleep(_) | Command::LinkDown | Command::LinkUp, h) => h,
            };
        }
        Ok(Script { commands })
    }

    pub fn parse(text: &str) -> Result<Script, ScriptError> {
        let mut commands = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                commands.push((i + 1, parse_command(i + 1, line)?));
            }
        }
        Script::new(commands)
    }

    pub fn commands(&self) -> impl Iterator<Item = &Command> {
        self.commands.iter().map(|(_, c)| c)
    }

    /// Runs the script as the user task of `stack`'s endpoint.
    pub fn execute(self, stack: Stack) {
        enum Session {
            None,
            Open(UnconnectedSession),
            Conn(ConnectedSession),
        }
        let mut session = Session::None;
        for (_, cmd) in self.commands {
            session = match (cmd, session) {
                (Command::Open, s) => {
                    drop_session(s);
                    match stack.socket_open(SocketType::Stream, Protocol::Tcp) {
                        Ok(u) => Session::Open(u),
                        Err(_) => return,
                    }
                }
                (Command::Connect(ip, port), Session::Open(u)) => {
                    let remote = RemoteAddr::new(ip).expect("validated");
                    match u.connect(remote, port) {
                        Ok(c) => Session::Conn(c),
                        Err((u, _)) => return u.close(),
                    }
                }
                (Command::Accept(port), Session::Open(u)) => match u.listen_accept(port) {
                    Ok(c) => Session::Conn(c),
                    Err((u, _)) => return u.close(),
                },
                (Command::Send(data), Session::Conn(c)) => match c.send(&data) {
                    Ok((c, _)) => Session::Conn(c),
                    Err((c, _)) => return c.close(),
                },
                (Command::Receive, Session::Conn(c)) => match c.receive() {
                    Ok((c, _)) => Session::Conn(c),
                    Err((c, _)) => return c.close(),
                },
                (Command::Shutdown, Session::Conn(c)) => match c.shutdown() {
                    Ok(c) => Session::Conn(c),
                    Err((c, _)) => return c.close(),
                },
                (Command::InjectRst, Session::Conn(c)) => {
                    stack.inject_rst(&c);
                    Session::Conn(c)
                }
                (Command::Close, s) => {
                    drop_session(s);
                    Session::None
                }
                (Command::Sleep(n), s) => {
                    stack.sleep(n);
                    s
                }
                (Command::LinkDown, s) => {
                    stack.set_link_down(true);
                    s
                }
                (Command::LinkUp, s) => {
                    stack.set_link_down(false);
                    s
                }
                (cmd, _) => unreachable!("validated script issued {cmd}"),
            };
        }

        fn drop_session(s: Session) {
            match s {
                Session::None => {}
                Session::Open(u) => u.close(),
                Session::Conn(c) => c.close(),
            }
        }
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in self.commands() {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for Script {
    type Err = ScriptError;

    fn from_str(s: &str) -> Result<Script, ScriptError> {
        Script::parse(s)
    }
}

/// Two scripts plus the final states they are expected to leave behind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub scripts: [Script; 2],
    pub expect: [Option<TcpState>; 2],
    /// Exact flags of every segment put on the wire, if given.
    pub expect_segments: Option<Vec<FlagSet>>,
}

impl Scenario {
    pub fn parse(name: &str, text: &str) -> Result<Scenario, ScriptError> {
        let mut sections: [Vec<(usize, Command)>; 2] = Default::default();
        let mut expect = [None, None];
        let mut expect_segments = None;
        let mut current: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "[a]" | "[A]" => current = Some(0),
                "[b]" | "[B]" => current = Some(1),
                _ if line.starts_with("expect segments") => {
                    let flags = line["expect segments".len()..]
                        .split_whitespace()
                        .map(|w| w.parse::<FlagSet>().map_err(|_| syntax(line_no, format!("bad flags {w:?}"))))
                        .collect::<Result<Vec<_>, _>>()?;
                    expect_segments = Some(flags);
                }
                _ if line.starts_with("expect ") => {
                    let words: Vec<&str> = line.split_whitespace().collect();
                    let [_, ep, state] = words[..] else {
                        return Err(syntax(line_no, "expect takes an endpoint and a state"));
                    };
                    let ep = match ep {
                        "a" | "A" => 0,
                        "b" | "B" => 1,
                        _ => return Err(syntax(line_no, format!("unknown endpoint {ep:?}"))),
                    };
                    expect[ep] = Some(state.parse().map_err(|e: crate::automaton::UnknownState| syntax(line_no, e.to_string()))?);
                }
                _ => {
                    let ep = current.ok_or_else(|| syntax(line_no, "command outside an [a] or [b] section"))?;
                    sections[ep].push((line_no, parse_command(line_no, line)?));
                }
            }
        }
        let [a, b] = sections;
        Ok(Scenario {
            name: name.to_string(),
            scripts: [Script::new(a)?, Script::new(b)?],
            expect,
            expect_segments,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Scenario, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScriptError::Io(format!("{}: {e}", path.display())))?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
        Scenario::parse(name, &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let s = Script::parse("open\nconnect 10.0.0.2 80 # go\nsend 7879\nshutdown\nclose\n").unwrap();
        assert_eq!(s.to_string(), "open\nconnect 10.0.0.2 80\nsend 7879\nshutdown\nclose\n");
    }

    #[test]
    fn send_before_connect_is_rejected() {
        let e = Script::parse("open\nsend 00\n").unwrap_err();
        assert_eq!(e.to_string(), "line 2: `send 00` is not allowed without a connection");
    }

    #[test]
    fn use_after_close_is_rejected() {
        assert!(matches!(
            Script::parse("open\naccept 80\nclose\nreceive\n"),
            Err(ScriptError::Order { line: 4, .. })
        ));
    }

    #[test]
    fn connect_when_connected_is_rejected() {
        assert!(Script::parse("open\naccept 80\nconnect 10.0.0.1 80\n").is_err());
    }

    #[test]
    fn bad_hex_is_a_syntax_error() {
        assert!(matches!(Script::parse("open\nsend 7\n"), Err(ScriptError::Syntax { line: 2, .. })));
        assert!(matches!(Script::parse("frobnicate\n"), Err(ScriptError::Syntax { line: 1, .. })));
    }

    #[test]
    fn scenario_sections_and_expectations() {
        let sc = Scenario::parse("t", "[a]\nopen\nclose\n[b]\nopen\nexpect b CLOSED\nexpect segments SYN SYN+ACK\n").unwrap();
        assert_eq!(sc.expect_segments, Some(vec![FlagSet::SYN, FlagSet::SYN | FlagSet::ACK]));
        assert_eq!(sc.scripts[0].commands().count(), 2);
        assert_eq!(sc.expect, [None, Some(TcpState::Closed)]);
        assert!(Scenario::parse("t", "open\n").is_err());
    }
}
