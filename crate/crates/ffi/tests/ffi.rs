use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use tcpconform_ffi::*;

const CLOSED: u8 = 0;
const LISTEN: u8 = 1;
const SYN_RECEIVED: u8 = 3;
const ESTABLISHED: u8 = 4;
const FIN_WAIT_1: u8 = 5;
const CLOSE_WAIT: u8 = 7;
const SYN: u8 = 2;
const RST: u8 = 4;

fn take_string(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { tcpc_string_free(p) };
    s
}

#[test]
fn allowed_matrix_matches_core() {
    assert_eq!(tcpc_is_allowed(CLOSE_WAIT, FIN_WAIT_1), 0);
    assert_eq!(tcpc_is_allowed(ESTABLISHED, FIN_WAIT_1), 1);
    assert_eq!(tcpc_is_allowed(11, 0), TcpcStatus::TcpcInvalidState as i32);
}

#[test]
fn listen_answers_syn_with_syn_ack() {
    let s = tcpc_socket_new_in_state(LISTEN);
    assert!(!s.is_null());
    unsafe {
        assert_eq!(tcpc_handle_segment(s, SYN, 9000, 0, ptr::null(), 0), TcpcStatus::TcpcOk);
        assert_eq!(tcpc_socket_state(s), SYN_RECEIVED as i32);
        let mut seg = TcpcSegmentInfo::default();
        assert_eq!(tcpc_pop_response(s, &mut seg), TcpcStatus::TcpcOk);
        assert_eq!(seg.flags, 0x12);
        assert_eq!(seg.ack_num, 9001);
        assert_eq!(tcpc_pop_response(s, &mut seg), TcpcStatus::TcpcNo);
        tcpc_socket_free(s);
    }
}

#[test]
fn guard_refuses_close_wait_to_fin_wait_1() {
    let s = tcpc_socket_new_in_state(CLOSE_WAIT);
    unsafe {
        assert_eq!(tcpc_change_state(s, FIN_WAIT_1), TcpcStatus::TcpcTransitionRefused);
        assert_eq!(tcpc_socket_state(s), CLOSE_WAIT as i32);
        let mut m = TcpcModel::default();
        assert_eq!(tcpc_socket_model(s, &mut m), TcpcStatus::TcpcOk);
        assert_eq!(tcpc_handle_segment(s, RST, m.rcv_nxt, m.snd_nxt, ptr::null(), 0), TcpcStatus::TcpcOk);
        assert_eq!(tcpc_socket_state(s), CLOSED as i32);
        tcpc_socket_model(s, &mut m);
        assert_eq!(m.reset_flag, 1);
        // CLOSED | TX_DONE | LINK_RESET
        assert_eq!(tcpc_update_events(s), 2 | 8 | 32);
        tcpc_socket_free(s);
    }
}

#[test]
fn null_and_bad_arguments_are_reported() {
    unsafe {
        assert_eq!(tcpc_socket_state(ptr::null()), TcpcStatus::TcpcNullPointer as i32);
        assert_eq!(tcpc_change_state(ptr::null_mut(), 0), TcpcStatus::TcpcNullPointer);
        tcpc_socket_free(ptr::null_mut());
        tcpc_string_free(ptr::null_mut());
        let s = tcpc_socket_new_in_state(ESTABLISHED);
        assert_eq!(tcpc_handle_segment(s, 0xff, 0, 0, ptr::null(), 0), TcpcStatus::TcpcInvalidArgument);
        assert_eq!(tcpc_handle_segment(s, 16, 0, 0, ptr::null(), 4), TcpcStatus::TcpcNullPointer);
        tcpc_socket_free(s);
    }
    assert!(tcpc_socket_new_in_state(42).is_null());
    assert_eq!(tcpc_reachable_states(42), TcpcStatus::TcpcInvalidState as i32);
}

#[test]
fn closure_queries() {
    assert_eq!(tcpc_reachable_states(CLOSED), 1);
    // ESTABLISHED, TX_DONE -> {CLOSED, ESTABLISHED, CLOSE_WAIT}
    let want = (1 << CLOSED) | (1 << ESTABLISHED) | (1 << CLOSE_WAIT);
    assert_eq!(tcpc_wait_for_events_states(ESTABLISHED, 8), want);
    assert_eq!(tcpc_wait_for_events_states(ESTABLISHED, 0xff), TcpcStatus::TcpcInvalidArgument as i32);
}

#[test]
fn listing_and_scenario_strings() {
    let text = take_string(tcpc_listing(0));
    assert_eq!(text.lines().count(), 41);
    assert!(text.contains("FIN_WAIT_1 rcv(FIN+ACK) TIME_WAIT"));
    let jsonl = take_string(tcpc_listing(1));
    assert!(jsonl.lines().all(|l| l.starts_with("{\"from\":")));

    let name = CString::new("handshake").unwrap();
    let mut trace = ptr::null_mut();
    assert_eq!(unsafe { tcpc_run_scenario(name.as_ptr(), 7, 0, &mut trace) }, TcpcStatus::TcpcOk);
    let trace = take_string(trace);
    assert_eq!(trace.matches("\"SegmentSent\"").count(), 3);

    let bad = CString::new("no-such-scenario").unwrap();
    assert_eq!(unsafe { tcpc_run_scenario(bad.as_ptr(), 0, 0, ptr::null_mut()) }, TcpcStatus::TcpcInvalidArgument);
}

#[test]
fn conformance_closure_check() {
    let check = CString::new("closure").unwrap();
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { tcpc_run_conformance(check.as_ptr(), 0, &mut json) }, TcpcStatus::TcpcOk);
    let json = take_string(json);
    assert!(json.contains("\"cases\": 11"));
    let bad = CString::new("bogus").unwrap();
    assert_eq!(unsafe { tcpc_run_conformance(bad.as_ptr(), 0, ptr::null_mut()) }, TcpcStatus::TcpcInvalidArgument);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/tcpconform.h")).unwrap();
    for f in [
        "tcpc_is_allowed",
        "tcpc_listing",
        "tcpc_socket_new_in_state",
        "tcpc_socket_free",
        "tcpc_socket_state",
        "tcpc_socket_model",
        "tcpc_handle_segment",
        "tcpc_update_events",
        "tcpc_change_state",
        "tcpc_pop_response",
        "tcpc_reachable_states",
        "tcpc_wait_for_events_states",
        "tcpc_run_conformance",
        "tcpc_run_scenario",
        "tcpc_string_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct TcpcSocket TcpcSocket;"));
}

fn static_lib() -> Option<PathBuf> {
    // target/<profile>/deps/ffi-<hash> -> target/<profile>
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libtcpconform_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_against_static_library() {
    let lib = static_lib().expect("static library built alongside the tests");
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out = std::env::temp_dir().join(format!("tcpc_smoke_{}", std::process::id()));
    let status = Command::new("cc")
        .arg(dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&out)
        .status()
        .expect("C compiler available");
    assert!(status.success(), "C smoke program failed to build");
    let run = Command::new(&out).output().unwrap();
    let _ = std::fs::remove_file(&out);
    assert!(run.status.success(), "smoke exited with {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
