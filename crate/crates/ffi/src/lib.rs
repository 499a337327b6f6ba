//! C ABI over the tcpconform core.
//!
//! Sockets are opaque heap handles created by `tcpc_socket_new_in_state`
//! and released by `tcpc_socket_free`. Strings returned by the library are
//! NUL-terminated, owned by the caller and released by `tcpc_string_free`.
//! No call unwinds across the boundary; a panic is reported as
//! `TCPC_INTERNAL`.

use std::ffi::{c_char, CStr, CString};
use std::net::Ipv4Addr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tcpconform::checker::run_checks;
use tcpconform::engine::{process_one_segment, reachable_states, update_events, wait_for_events_states};
use tcpconform::harness::HarnessConfig;
use tcpconform::scenarios::{resolve, run_scenario};
use tcpconform::socket::{EventMask, Socket};
use tcpconform::{change_state, is_allowed, transition_table, FlagSet, TcpState};

/// Status codes. Non-negative values are successes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcpcStatus {
    TcpcOk = 0,
    /// Call succeeded but the answer is negative (check failed, queue empty).
    TcpcNo = 1,
    TcpcNullPointer = -1,
    TcpcInvalidState = -2,
    TcpcInvalidArgument = -3,
    /// The transition guard refused a state change.
    TcpcTransitionRefused = -4,
    TcpcInternal = -5,
}

/// Opaque socket handle.
pub struct TcpcSocket {
    inner: Socket,
}

/// Field projection a handler may change. Addresses are host-order IPv4,
/// 0 when unset.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TcpcModel {
    pub state: u8,
    pub reset_flag: u8,
    pub local_ip: u32,
    pub local_port: u16,
    pub remote_ip: u32,
    pub remote_port: u16,
    pub snd_nxt: u32,
    pub rcv_nxt: u32,
}

/// Header of a segment queued by a handler.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TcpcSegmentInfo {
    pub flags: u8,
    pub seq_num: u32,
    pub ack_num: u32,
    pub length: u32,
}

fn shield(f: impl FnOnce() -> TcpcStatus) -> TcpcStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(TcpcStatus::TcpcInternal)
}

fn shield_i32(f: impl FnOnce() -> i32) -> i32 {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(TcpcStatus::TcpcInternal as i32)
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

fn ip_bits(ip: Option<Ipv4Addr>) -> u32 {
    ip.map_or(0, u32::from)
}

/// 1 if the automaton allows `from -> to`, 0 if not, `TCPC_INVALID_STATE`
/// for an unknown state code.
#[no_mangle]
pub extern "C" fn tcpc_is_allowed(from: u8, to: u8) -> i32 {
    match (TcpState::from_code(from), TcpState::from_code(to)) {
        (Some(a), Some(b)) => is_allowed(a, b) as i32,
        _ => TcpcStatus::TcpcInvalidState as i32,
    }
}

/// The transition listing, one line per entry (`jsonl` != 0 for JSON lines).
#[no_mangle]
pub extern "C" fn tcpc_listing(jsonl: i32) -> *mut c_char {
    let t = transition_table();
    into_c_string(if jsonl != 0 { t.listing_jsonl() } else { t.listing_text() })
}

/// A socket in the canonical fixture for `state`, or NULL for an unknown code.
#[no_mangle]
pub extern "C" fn tcpc_socket_new_in_state(state: u8) -> *mut TcpcSocket {
    match TcpState::from_code(state) {
        Some(s) => Box::into_raw(Box::new(TcpcSocket {
            inner: Socket::fixture(s),
        })),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `sock` must be NULL or a handle from `tcpc_socket_new_in_state` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tcpc_socket_free(sock: *mut TcpcSocket) {
    if !sock.is_null() {
        drop(Box::from_raw(sock));
    }
}

/// State code, or `TCPC_NULL_POINTER`.
///
/// # Safety
/// `sock` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcpc_socket_state(sock: *const TcpcSocket) -> i32 {
    match sock.as_ref() {
        Some(s) => s.inner.state().code() as i32,
        None => TcpcStatus::TcpcNullPointer as i32,
    }
}

/// # Safety
/// `sock` must be NULL or a live handle; `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn tcpc_socket_model(sock: *const TcpcSocket, out: *mut TcpcModel) -> TcpcStatus {
    let (Some(s), Some(out)) = (sock.as_ref(), out.as_mut()) else {
        return TcpcStatus::TcpcNullPointer;
    };
    let m = s.inner.model();
    *out = TcpcModel {
        state: m.state.code(),
        reset_flag: m.reset_flag as u8,
        local_ip: ip_bits(m.local_ip),
        local_port: m.local_port,
        remote_ip: ip_bits(m.remote_ip),
        remote_port: m.remote_port,
        snd_nxt: m.snd_nxt,
        rcv_nxt: m.rcv_nxt,
    };
    TcpcStatus::TcpcOk
}

/// Delivers a segment from the socket's peer carrying `flags`, `seq_num`,
/// `ack_num` and `len` bytes of `payload` (which may be NULL when `len` is 0).
///
/// # Safety
/// `sock` must be NULL or a live handle; `payload` must point at `len`
/// readable bytes when `len` is non-zero.
#[no_mangle]
pub unsafe extern "C" fn tcpc_handle_segment(
    sock: *mut TcpcSocket,
    flags: u8,
    seq_num: u32,
    ack_num: u32,
    payload: *const u8,
    len: usize,
) -> TcpcStatus {
    let Some(s) = sock.as_mut() else {
        return TcpcStatus::TcpcNullPointer;
    };
    let Some(flags) = FlagSet::from_bits(flags) else {
        return TcpcStatus::TcpcInvalidArgument;
    };
    if len > 0 && payload.is_null() {
        return TcpcStatus::TcpcNullPointer;
    }
    let data = if len == 0 {
        Vec::new()
    } else {
        std::slice::from_raw_parts(payload, len).to_vec()
    };
    shield(|| {
        let mut g = s.inner.incoming_segment(flags, seq_num, ack_num, 0);
        g.payload = data;
        match process_one_segment(&mut s.inner, &g) {
            Ok(_) => TcpcStatus::TcpcOk,
            Err(_) => TcpcStatus::TcpcTransitionRefused,
        }
    })
}

/// Event mask bits currently holding, or a negative status.
///
/// # Safety
/// `sock` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcpc_update_events(sock: *const TcpcSocket) -> i32 {
    match sock.as_ref() {
        Some(s) => update_events(&s.inner).bits() as i32,
        None => TcpcStatus::TcpcNullPointer as i32,
    }
}

/// Guarded state change.
///
/// # Safety
/// `sock` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcpc_change_state(sock: *mut TcpcSocket, to: u8) -> TcpcStatus {
    let Some(s) = sock.as_mut() else {
        return TcpcStatus::TcpcNullPointer;
    };
    let Some(to) = TcpState::from_code(to) else {
        return TcpcStatus::TcpcInvalidState;
    };
    match change_state(&mut s.inner, to) {
        Ok(()) => TcpcStatus::TcpcOk,
        Err(_) => TcpcStatus::TcpcTransitionRefused,
    }
}

/// Takes the oldest segment the socket queued for sending. `TCPC_NO` when
/// nothing is queued.
///
/// # Safety
/// `sock` must be NULL or a live handle; `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn tcpc_pop_response(sock: *mut TcpcSocket, out: *mut TcpcSegmentInfo) -> TcpcStatus {
    let (Some(s), Some(out)) = (sock.as_mut(), out.as_mut()) else {
        return TcpcStatus::TcpcNullPointer;
    };
    match s.inner.outbound.pop_front() {
        Some(g) => {
            *out = TcpcSegmentInfo {
                flags: g.flags.bits(),
                seq_num: g.seq_num,
                ack_num: g.ack_num,
                length: g.length() as u32,
            };
            TcpcStatus::TcpcOk
        }
        None => TcpcStatus::TcpcNo,
    }
}

/// Bit set (bit n = state code n) reachable within three segments.
#[no_mangle]
pub extern "C" fn tcpc_reachable_states(state: u8) -> i32 {
    shield_i32(|| match TcpState::from_code(state) {
        Some(s) => reachable_states(s).bits() as i32,
        None => TcpcStatus::TcpcInvalidState as i32,
    })
}

/// Bit set of states a wait for `mask` entered in `state` can end in.
#[no_mangle]
pub extern "C" fn tcpc_wait_for_events_states(state: u8, mask: u8) -> i32 {
    shield_i32(|| match (TcpState::from_code(state), EventMask::from_bits(mask)) {
        (Some(s), Some(m)) => wait_for_events_states(s, m).bits() as i32,
        (None, _) => TcpcStatus::TcpcInvalidState as i32,
        _ => TcpcStatus::TcpcInvalidArgument as i32,
    })
}

unsafe fn opt_str<'a>(p: *const c_char) -> Result<Option<&'a str>, TcpcStatus> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| TcpcStatus::TcpcInvalidArgument)
}

/// Runs one check (by name) or all of them (`check` NULL). `TCPC_OK` when
/// every check passed, `TCPC_NO` otherwise. The JSON report is stored in
/// `*report_json` when that is non-NULL.
///
/// # Safety
/// `check` must be NULL or a NUL-terminated string; `report_json` must be
/// NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn tcpc_run_conformance(
    check: *const c_char,
    buggy: i32,
    report_json: *mut *mut c_char,
) -> TcpcStatus {
    let check = match opt_str(check) {
        Ok(c) => c,
        Err(e) => return e,
    };
    shield(|| {
        let cfg = HarnessConfig {
            buggy_shutdown: buggy != 0,
            ..HarnessConfig::default()
        };
        let Some(report) = run_checks(check, &cfg) else {
            return TcpcStatus::TcpcInvalidArgument;
        };
        if let Some(out) = report_json.as_mut() {
            *out = into_c_string(report.to_json());
        }
        if report.passed {
            TcpcStatus::TcpcOk
        } else {
            TcpcStatus::TcpcNo
        }
    })
}

/// Runs a built-in scenario (or scenario file path). `TCPC_OK` when it met
/// its expectations, `TCPC_NO` otherwise. The JSONL trace is stored in
/// `*trace_jsonl` when that is non-NULL.
///
/// # Safety
/// `name` must be a NUL-terminated string; `trace_jsonl` must be NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tcpc_run_scenario(
    name: *const c_char,
    seed: u64,
    buggy: i32,
    trace_jsonl: *mut *mut c_char,
) -> TcpcStatus {
    let name = match opt_str(name) {
        Ok(Some(n)) => n,
        Ok(None) => return TcpcStatus::TcpcNullPointer,
        Err(e) => return e,
    };
    shield(|| {
        let Ok(sc) = resolve(name) else {
            return TcpcStatus::TcpcInvalidArgument;
        };
        let cfg = HarnessConfig {
            seed,
            buggy_shutdown: buggy != 0,
            ..HarnessConfig::default()
        };
        let Ok(report) = run_scenario(&sc, cfg) else {
            return TcpcStatus::TcpcNo;
        };
        if let Some(out) = trace_jsonl.as_mut() {
            *out = into_c_string(report.outcome.trace.to_jsonl());
        }
        if report.passed() {
            TcpcStatus::TcpcOk
        } else {
            TcpcStatus::TcpcNo
        }
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tcpc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
