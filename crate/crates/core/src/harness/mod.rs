//! Two endpoints, each with a user task, a receiver and a timer, joined by
//! an in-memory duplex link and driven by a seeded scheduler on a virtual
//! clock.
//!
//! User tasks run on their own threads but only ever one activity runs at a
//! time: the scheduler hands a baton to a task and waits until the task
//! blocks again. Receiver and timer activities run on the scheduler thread.

pub mod endpoint;
pub mod script;
pub mod trace;

use std::collections::{BTreeMap, VecDeque};
use std::net::Ipv4Addr;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex, MutexGuard};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api::Stack;
use crate::automaton::{FlagSet, TcpState, TransitionViolation};
use crate::engine::{reachable_states, update_events, wait_for_events_states, Engine, StateSet};
use crate::segment::Segment;
use crate::socket::{EventMask, SocketId, SocketModel, DEFAULT_TX_CAPACITY};

pub use endpoint::{Activity, Delivery, Endpoint, FiredKind, FiredTimer, SocketSlot};
pub use script::{Command, Scenario, Script, ScriptError};
pub use trace::{ScenarioTrace, TraceKind, TraceRecord};

pub const ENDPOINT_NAMES: [&str; 2] = ["A", "B"];
pub const ENDPOINT_IPS: [Ipv4Addr; 2] = [Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(10, 0, 0, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimerConfig {
    pub msl: u64,
    pub syn_received_timeout: u64,
    pub retransmission_timeout: u64,
    pub tick: u64,
}

impl Default for TimerConfig {
    fn default() -> TimerConfig {
        TimerConfig {
            msl: 30,
            syn_received_timeout: 75,
            retransmission_timeout: 20,
            tick: 1,
        }
    }
}

impl TimerConfig {
    pub fn time_wait(&self) -> u64 {
        2 * self.msl
    }

    /// Rounds a deadline up to the next tick boundary.
    pub fn quantize(&self, t: u64) -> u64 {
        t.div_ceil(self.tick) * self.tick
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarnessConfig {
    pub seed: u64,
    pub timers: TimerConfig,
    /// Skip the state re-check after the flush in shutdown.
    pub buggy_shutdown: bool,
    pub socket_capacity: usize,
    /// Default per-socket user-call timeout.
    pub socket_timeout: u64,
    pub link_latency: u64,
    pub tx_capacity: usize,
    pub max_retransmissions: u32,
    pub max_virtual_time: u64,
    pub max_steps: u64,
    /// Real time a single activity may take before the run is declared stuck.
    pub wall_bound: Duration,
    pub engine: Engine,
}

impl Default for HarnessConfig {
    fn default() -> HarnessConfig {
        HarnessConfig {
            seed: 0,
            timers: TimerConfig::default(),
            buggy_shutdown: false,
            socket_capacity: 8,
            socket_timeout: 200,
            link_latency: 1,
            tx_capacity: DEFAULT_TX_CAPACITY,
            max_retransmissions: 3,
            max_virtual_time: 1_000_000,
            max_steps: 1_000_000,
            wall_bound: Duration::from_secs(10),
            engine: Engine::default(),
        }
    }
}

impl HarnessConfig {
    pub fn with_seed(seed: u64) -> HarnessConfig {
        HarnessConfig {
            seed,
            ..HarnessConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let t = &self.timers;
        let bad = if t.msl == 0 {
            "msl must be positive"
        } else if t.tick == 0 {
            "tick must be positive"
        } else if t.retransmission_timeout == 0 {
            "retransmission timeout must be positive"
        } else if t.syn_received_timeout == 0 {
            "syn-received timeout must be positive"
        } else if self.socket_capacity == 0 {
            "socket capacity must be positive"
        } else if self.link_latency == 0 {
            "link latency must be positive"
        } else if self.tx_capacity == 0 {
            "tx capacity must be positive"
        } else {
            return Ok(());
        };
        Err(HarnessError::Config(bad.into()))
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum HarnessError {
    #[error("deadlock: {0}")]
    Deadlock(String),
    #[error("virtual time horizon {0} exceeded")]
    Horizon(u64),
    #[error("no quiescence after {0} scheduling steps")]
    Livelock(u64),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// A refused state change observed during a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub t: u64,
    pub ep: String,
    pub sock: SocketId,
    pub from: TcpState,
    pub to: TcpState,
    pub during: String,
}

impl ViolationRecord {
    pub fn transition(&self) -> (TcpState, TcpState) {
        (self.from, self.to)
    }
}

/// One completed event wait and whether its outcome was predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaitCheck {
    pub t: u64,
    pub ep: String,
    pub sock: SocketId,
    pub entry: TcpState,
    pub mask: String,
    pub observed: TcpState,
    pub predicted: StateSet,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosureFailure {
    pub t: u64,
    pub ep: String,
    pub sock: SocketId,
    pub released: TcpState,
    pub observed: TcpState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskEnd {
    Completed,
    /// Stopped by a refused state change.
    Faulted,
    Panicked(String),
    Aborted,
}

#[derive(Debug, Clone)]
pub(crate) enum TaskStatus {
    Ready,
    Running,
    Blocked {
        sock: SocketId,
        mask: EventMask,
        deadline: u64,
    },
    Sleeping {
        until: u64,
    },
    Ended(TaskEnd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Turn {
    Scheduler,
    Task(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pick {
    User(usize),
    Receive(usize),
    Timer(usize),
}

// Unwind payloads used to stop a task thread.
pub(crate) struct TaskFault;
pub(crate) struct TaskAbort;

pub(crate) struct World {
    pub now: u64,
    pub cfg: HarnessConfig,
    pub endpoints: [Endpoint; 2],
    /// `links[i]` holds segments in flight towards endpoint `i`.
    pub links: [VecDeque<(u64, Segment)>; 2],
    pub trace: ScenarioTrace,
    pub tasks: [TaskStatus; 2],
    pub turn: Turn,
    pub aborted: bool,
    rng: ChaCha8Rng,
    pub violations: Vec<ViolationRecord>,
    pub wait_checks: Vec<WaitCheck>,
    pub closure_checks: u64,
    pub closure_failures: Vec<ClosureFailure>,
    pub steps: u64,
}

impl World {
    fn new(cfg: HarnessConfig) -> World {
        let cap = cfg.socket_capacity;
        World {
            now: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            endpoints: [
                Endpoint::new(ENDPOINT_NAMES[0], ENDPOINT_IPS[0], cap),
                Endpoint::new(ENDPOINT_NAMES[1], ENDPOINT_IPS[1], cap),
            ],
            cfg,
            links: Default::default(),
            trace: ScenarioTrace::default(),
            tasks: [TaskStatus::Ready, TaskStatus::Ready],
            turn: Turn::Scheduler,
            aborted: false,
            violations: Vec::new(),
            wait_checks: Vec::new(),
            closure_checks: 0,
            closure_failures: Vec::new(),
            steps: 0,
        }
    }

    pub fn record(
        &mut self,
        ep: usize,
        kind: TraceKind,
        from: Option<TcpState>,
        to: Option<TcpState>,
        flags: Option<FlagSet>,
        detail: String,
    ) {
        self.trace.push(TraceRecord {
            t: self.now,
            ep: ENDPOINT_NAMES[ep].to_string(),
            kind,
            from,
            to,
            flags,
            detail,
        });
    }

    pub fn record_violation(&mut self, ep: usize, sock: SocketId, v: TransitionViolation, during: &str) {
        self.record(
            ep,
            TraceKind::Violation,
            Some(v.from),
            Some(v.to),
            None,
            format!("sock={sock} during={during}"),
        );
        self.violations.push(ViolationRecord {
            t: self.now,
            ep: ENDPOINT_NAMES[ep].to_string(),
            sock,
            from: v.from,
            to: v.to,
            during: during.to_string(),
        });
    }

    pub fn send_segment(&mut self, ep: usize, sock: Option<SocketId>, seg: Segment, note: &str) {
        let down = self.endpoints[ep].link_down;
        let sock = sock.map_or_else(|| "-".to_string(), |s| s.to_string());
        let mut detail = format!(
            "sock={sock} seq={} ack={} len={}",
            seg.seq_num,
            seg.ack_num,
            seg.length()
        );
        if !note.is_empty() {
            detail.push(' ');
            detail.push_str(note);
        }
        if down {
            detail.push_str(" dropped");
        }
        self.record(ep, TraceKind::SegmentSent, None, None, Some(seg.flags), detail);
        if !down {
            let at = self.now + self.cfg.link_latency;
            self.links[1 - ep].push_back((at, seg));
        }
    }

    /// Publishes everything that changed on endpoint `ep`: state changes,
    /// queued segments, raised events, retransmission bookkeeping, and
    /// freeing of orphans that reached CLOSED.
    pub fn settle(&mut self, ep: usize) {
        let rto = self.cfg.timers.retransmission_timeout;
        let ids: Vec<SocketId> = self.endpoints[ep].sockets.keys().copied().collect();
        for id in ids {
            let slot = self.endpoints[ep].slot_mut(id).expect("listed");
            let state = slot.sock.state();
            let moved = (state != slot.last_state).then_some(slot.last_state);
            if moved.is_some() {
                slot.last_state = state;
                slot.entered_at = self.now;
            }
            slot.sock.event_flags = update_events(&slot.sock);
            let out: Vec<Segment> = slot.sock.outbound.drain(..).collect();
            for seg in &out {
                let control = seg.flags.contains(FlagSet::SYN) || seg.flags.contains(FlagSet::FIN);
                // a retransmission keeps its retry count
                let resent = slot
                    .rtx
                    .as_ref()
                    .is_some_and(|r| r.segment.seq_num == seg.seq_num && r.segment.flags == seg.flags);
                if control && !resent {
                    slot.rtx = Some(endpoint::Retransmit {
                        segment: seg.clone(),
                        deadline: self.now + rto,
                        retries: 0,
                    });
                }
            }
            let done = slot.sock.snd_una == slot.sock.snd_nxt
                || matches!(state, TcpState::Closed | TcpState::Listen | TcpState::TimeWait);
            if done {
                slot.rtx = None;
            }
            let events = slot.sock.event_flags;
            let raised = events.difference(slot.last_events);
            slot.last_events = events;
            let free = slot.orphaned && state == TcpState::Closed;
            let model = slot.sock.model();

            if let Some(from) = moved {
                self.record(ep, TraceKind::StateChange, Some(from), Some(state), None, format!("sock={id}"));
            }
            for seg in out {
                self.send_segment(ep, Some(id), seg, "");
            }
            if !raised.is_empty() {
                self.record(ep, TraceKind::EventRaised, None, None, None, format!("sock={id} {raised}"));
            }
            self.endpoints[ep].final_models.insert(id, model);
            if free {
                self.endpoints[ep].sockets.remove(&id);
            }
        }
    }

    fn receive(&mut self, ep: usize) {
        let (_, seg) = self.links[ep].pop_front().expect("receiver scheduled with input");
        let engine = self.cfg.engine.clone();
        let delivery = self.endpoints[ep].deliver(&engine, &seg);
        let sock = match &delivery {
            Delivery::NoSocket => "-".to_string(),
            Delivery::Handled(id, _) => id.to_string(),
        };
        let mut detail = format!(
            "sock={sock} seq={} ack={} len={}",
            seg.seq_num,
            seg.ack_num,
            seg.length()
        );
        if delivery == Delivery::NoSocket {
            detail.push_str(" dropped");
        }
        self.record(ep, TraceKind::SegmentReceived, None, None, Some(seg.flags), detail);
        if let Delivery::Handled(id, Err(v)) = delivery {
            self.record_violation(ep, id, v, "receiver");
        }
        self.settle(ep);
    }

    fn fire_timers(&mut self, ep: usize) {
        let timers = self.cfg.timers;
        let fired = self.endpoints[ep].timer_tick(self.now, &timers, self.cfg.max_retransmissions);
        for f in fired {
            self.record(
                ep,
                TraceKind::TimerFired,
                None,
                None,
                None,
                format!("{} sock={}", f.kind.name(), f.sock),
            );
            if let Some(v) = f.violation {
                self.record_violation(ep, f.sock, v, "timer");
            }
        }
        self.settle(ep);
    }

    fn task_runnable(&self, i: usize) -> Option<bool> {
        match &self.tasks[i] {
            TaskStatus::Ready => Some(false),
            TaskStatus::Sleeping { until } => (*until <= self.now).then_some(false),
            TaskStatus::Blocked { sock, mask, deadline } => {
                let signaled = self.endpoints[i]
                    .slot(*sock)
                    .is_some_and(|s| s.sock.event_flags.intersects(*mask));
                if signaled {
                    Some(true)
                } else {
                    (*deadline <= self.now).then_some(false)
                }
            }
            TaskStatus::Running | TaskStatus::Ended(_) => None,
        }
    }

    fn runnable(&self) -> Vec<Pick> {
        let mut signaled = Vec::new();
        let mut picks = Vec::new();
        for i in 0..2 {
            match self.task_runnable(i) {
                Some(true) => signaled.push(Pick::User(i)),
                Some(false) => picks.push(Pick::User(i)),
                None => {}
            }
            if self.links[i].front().is_some_and(|(at, _)| *at <= self.now) {
                picks.push(Pick::Receive(i));
            }
            if self.endpoints[i]
                .next_deadline(&self.cfg.timers)
                .is_some_and(|t| t <= self.now)
            {
                picks.push(Pick::Timer(i));
            }
        }
        // A signaled waiter resumes before anything else may touch its socket.
        if signaled.is_empty() {
            picks
        } else {
            signaled
        }
    }

    fn next_deadline(&self) -> Option<u64> {
        let mut ts = Vec::new();
        for i in 0..2 {
            ts.extend(self.links[i].front().map(|(at, _)| *at));
            ts.extend(self.endpoints[i].next_deadline(&self.cfg.timers));
            match &self.tasks[i] {
                TaskStatus::Sleeping { until } => ts.push(*until),
                TaskStatus::Blocked { deadline, .. } => ts.push(*deadline),
                _ => {}
            }
        }
        ts.into_iter().min()
    }

    fn tasks_done(&self) -> bool {
        self.tasks.iter().all(|t| matches!(t, TaskStatus::Ended(_)))
    }

    /// Records the user task's view of its sockets as it lets go of the guard.
    pub fn release_guard(&mut self, ep: usize) {
        for slot in self.endpoints[ep].sockets.values_mut() {
            if !slot.orphaned {
                slot.released_state = Some(slot.sock.state());
            }
        }
    }

    /// Checks, on re-acquiring the guard, that every socket the task holds
    /// is in a state reachable by segment arrivals from where it was left.
    pub fn reacquire_guard(&mut self, ep: usize) {
        let now = self.now;
        let mut failures = Vec::new();
        let mut checks = 0;
        for (id, slot) in self.endpoints[ep].sockets.iter_mut() {
            if let Some(released) = slot.released_state.take() {
                checks += 1;
                let observed = slot.sock.state();
                if !reachable_states(released).contains(observed) {
                    failures.push(ClosureFailure {
                        t: now,
                        ep: ENDPOINT_NAMES[ep].to_string(),
                        sock: *id,
                        released,
                        observed,
                    });
                }
            }
        }
        self.closure_checks += checks;
        self.closure_failures.extend(failures);
    }

    pub fn check_wait(&mut self, ep: usize, sock: SocketId, entry: TcpState, mask: EventMask) {
        let Some(slot) = self.endpoints[ep].slot(sock) else {
            return;
        };
        let observed = slot.sock.state();
        let predicted = wait_for_events_states(entry, mask);
        self.wait_checks.push(WaitCheck {
            t: self.now,
            ep: ENDPOINT_NAMES[ep].to_string(),
            sock,
            entry,
            mask: mask.to_string(),
            observed,
            predicted,
            ok: predicted.contains(observed),
        });
    }

    fn outcome(&mut self, ends: [TaskEnd; 2]) -> RunOutcome {
        for ep in 0..2 {
            let models: Vec<(SocketId, SocketModel)> = self.endpoints[ep]
                .sockets
                .iter()
                .map(|(id, s)| (*id, s.sock.model()))
                .collect();
            self.endpoints[ep].final_models.extend(models);
        }
        RunOutcome {
            trace: std::mem::take(&mut self.trace),
            final_models: [
                self.endpoints[0].final_models.clone(),
                self.endpoints[1].final_models.clone(),
            ],
            last_opened: [self.endpoints[0].last_opened, self.endpoints[1].last_opened],
            violations: std::mem::take(&mut self.violations),
            wait_checks: std::mem::take(&mut self.wait_checks),
            closure_checks: self.closure_checks,
            closure_failures: std::mem::take(&mut self.closure_failures),
            tasks: ends,
            end_time: self.now,
            steps: self.steps,
        }
    }
}

pub(crate) struct Shared {
    pub world: Mutex<World>,
    pub cv: Condvar,
}

impl Shared {
    /// Hands the baton back to the scheduler with the task in `status`, and
    /// waits until the scheduler hands it back.
    pub fn block<'a>(
        &'a self,
        mut w: MutexGuard<'a, World>,
        ep: usize,
        status: TaskStatus,
    ) -> MutexGuard<'a, World> {
        w.release_guard(ep);
        w.tasks[ep] = status;
        w.turn = Turn::Scheduler;
        self.cv.notify_all();
        while w.turn != Turn::Task(ep) && !w.aborted {
            self.cv.wait(&mut w);
        }
        if w.aborted {
            drop(w);
            panic::resume_unwind(Box::new(TaskAbort));
        }
        w.reacquire_guard(ep);
        w
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: ScenarioTrace,
    pub final_models: [BTreeMap<SocketId, SocketModel>; 2],
    pub last_opened: [Option<SocketId>; 2],
    pub violations: Vec<ViolationRecord>,
    pub wait_checks: Vec<WaitCheck>,
    pub closure_checks: u64,
    pub closure_failures: Vec<ClosureFailure>,
    pub tasks: [TaskEnd; 2],
    pub end_time: u64,
    pub steps: u64,
}

impl RunOutcome {
    /// Final state of the socket endpoint `ep` opened last.
    pub fn final_state(&self, ep: usize) -> Option<TcpState> {
        let id = self.last_opened[ep]?;
        self.final_models[ep].get(&id).map(|m| m.state)
    }

    pub fn final_model(&self, ep: usize) -> Option<SocketModel> {
        let id = self.last_opened[ep]?;
        self.final_models[ep].get(&id).copied()
    }

    pub fn wait_failures(&self) -> impl Iterator<Item = &WaitCheck> {
        self.wait_checks.iter().filter(|c| !c.ok)
    }

    /// No refused transitions, no unpredicted waits, no closure escapes, no
    /// panicking task.
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
            && self.wait_failures().next().is_none()
            && self.closure_failures.is_empty()
            && !self.tasks.iter().any(|t| matches!(t, TaskEnd::Panicked(_)))
    }
}

fn task_main<F>(shared: Arc<Shared>, ep: usize, f: F)
where
    F: FnOnce(Stack) + Send + 'static,
{
    {
        let mut w = shared.world.lock();
        while w.turn != Turn::Task(ep) && !w.aborted {
            shared.cv.wait(&mut w);
        }
        if w.aborted {
            return;
        }
    }
    let stack = Stack::new(shared.clone(), ep);
    let r = panic::catch_unwind(AssertUnwindSafe(move || f(stack)));
    let end = match r {
        Ok(()) => TaskEnd::Completed,
        Err(p) if p.is::<TaskFault>() => TaskEnd::Faulted,
        Err(p) if p.is::<TaskAbort>() => return,
        Err(p) => TaskEnd::Panicked(panic_message(&*p)),
    };
    let mut w = shared.world.lock();
    w.tasks[ep] = TaskStatus::Ended(end);
    w.turn = Turn::Scheduler;
    shared.cv.notify_all();
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

fn schedule(shared: &Shared) -> Result<(), HarnessError> {
    let mut w = shared.world.lock();
    loop {
        while w.turn != Turn::Scheduler {
            let bound = w.cfg.wall_bound;
            if shared.cv.wait_for(&mut w, bound).timed_out() && w.turn != Turn::Scheduler {
                return Err(HarnessError::Deadlock(format!(
                    "user task {:?} made no progress within {bound:?}",
                    w.turn
                )));
            }
        }
        if w.steps >= w.cfg.max_steps {
            return Err(HarnessError::Livelock(w.steps));
        }
        let picks = w.runnable();
        if picks.is_empty() {
            if w.tasks_done() && w.next_deadline().is_none() {
                return Ok(());
            }
            match w.next_deadline() {
                Some(t) if t > w.cfg.max_virtual_time => return Err(HarnessError::Horizon(t)),
                Some(t) => {
                    w.now = w.now.max(t);
                    continue;
                }
                None => {
                    return Err(HarnessError::Deadlock(format!(
                        "nothing can run at t={} and no deadline is pending",
                        w.now
                    )))
                }
            }
        }
        let pick = if picks.len() == 1 {
            picks[0]
        } else {
            let k = w.rng.random_range(0..picks.len());
            picks[k]
        };
        w.steps += 1;
        match pick {
            Pick::Receive(i) => w.receive(i),
            Pick::Timer(i) => w.fire_timers(i),
            Pick::User(i) => {
                w.tasks[i] = TaskStatus::Running;
                w.turn = Turn::Task(i);
                shared.cv.notify_all();
            }
        }
    }
}

/// Runs two user tasks, one per endpoint, to quiescence.
pub fn run_tasks<FA, FB>(cfg: HarnessConfig, fa: FA, fb: FB) -> Result<RunOutcome, HarnessError>
where
    FA: FnOnce(Stack) + Send + 'static,
    FB: FnOnce(Stack) + Send + 'static,
{
    cfg.validate()?;
    let shared = Arc::new(Shared {
        world: Mutex::new(World::new(cfg)),
        cv: Condvar::new(),
    });
    let ha = {
        let s = shared.clone();
        std::thread::spawn(move || task_main(s, 0, fa))
    };
    let hb = {
        let s = shared.clone();
        std::thread::spawn(move || task_main(s, 1, fb))
    };
    let result = schedule(&shared);
    let stuck = matches!(result, Err(HarnessError::Deadlock(_)))
        && shared.world.lock().turn != Turn::Scheduler;
    {
        let mut w = shared.world.lock();
        if result.is_err() {
            w.aborted = true;
            shared.cv.notify_all();
        }
    }
    if !stuck {
        let _ = ha.join();
        let _ = hb.join();
    }
    result?;
    let mut w = shared.world.lock();
    let ends = [0, 1].map(|i| match &w.tasks[i] {
        TaskStatus::Ended(e) => e.clone(),
        _ => TaskEnd::Aborted,
    });
    Ok(w.outcome(ends))
}

/// Runs two scripts against each other.
pub fn run_pair(a: &Script, b: &Script, cfg: HarnessConfig) -> Result<RunOutcome, HarnessError> {
    let (a, b) = (a.clone(), b.clone());
    run_tasks(cfg, move |s| a.execute(s), move |s| b.execute(s))
}
