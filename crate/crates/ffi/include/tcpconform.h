#ifndef TCPCONFORM_H
#define TCPCONFORM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Non-negative values are successes.
 */
typedef enum tcpc_status {
  TCPC_OK = 0,
  /**
   * Call succeeded but the answer is negative (check failed, queue empty).
   */
  TCPC_NO = 1,
  TCPC_NULL_POINTER = -1,
  TCPC_INVALID_STATE = -2,
  TCPC_INVALID_ARGUMENT = -3,
  /**
   * The transition guard refused a state change.
   */
  TCPC_TRANSITION_REFUSED = -4,
  TCPC_INTERNAL = -5,
} tcpc_status;

/**
 * Opaque socket handle.
 */
typedef struct TcpcSocket TcpcSocket;

/**
 * Field projection a handler may change. Addresses are host-order IPv4,
 * 0 when unset.
 */
typedef struct TcpcModel {
  uint8_t state;
  uint8_t reset_flag;
  uint32_t local_ip;
  uint16_t local_port;
  uint32_t remote_ip;
  uint16_t remote_port;
  uint32_t snd_nxt;
  uint32_t rcv_nxt;
} TcpcModel;

/**
 * Header of a segment queued by a handler.
 */
typedef struct TcpcSegmentInfo {
  uint8_t flags;
  uint32_t seq_num;
  uint32_t ack_num;
  uint32_t length;
} TcpcSegmentInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * 1 if the automaton allows `from -> to`, 0 if not, `TCPC_INVALID_STATE`
 * for an unknown state code.
 */
int32_t tcpc_is_allowed(uint8_t from, uint8_t to);

/**
 * The transition listing, one line per entry (`jsonl` != 0 for JSON lines).
 */
char *tcpc_listing(int32_t jsonl);

/**
 * A socket in the canonical fixture for `state`, or NULL for an unknown code.
 */
struct TcpcSocket *tcpc_socket_new_in_state(uint8_t state);

/**
 * # Safety
 * `sock` must be NULL or a handle from `tcpc_socket_new_in_state` not yet freed.
 */
void tcpc_socket_free(struct TcpcSocket *sock);

/**
 * State code, or `TCPC_NULL_POINTER`.
 *
 * # Safety
 * `sock` must be NULL or a live handle.
 */
int32_t tcpc_socket_state(const struct TcpcSocket *sock);

/**
 * # Safety
 * `sock` must be NULL or a live handle; `out` must be NULL or writable.
 */
enum tcpc_status tcpc_socket_model(const struct TcpcSocket *sock, struct TcpcModel *out);

/**
 * Delivers a segment from the socket's peer carrying `flags`, `seq_num`,
 * `ack_num` and `len` bytes of `payload` (which may be NULL when `len` is 0).
 *
 * # Safety
 * `sock` must be NULL or a live handle; `payload` must point at `len`
 * readable bytes when `len` is non-zero.
 */
enum tcpc_status tcpc_handle_segment(struct TcpcSocket *sock,
                                     uint8_t flags,
                                     uint32_t seq_num,
                                     uint32_t ack_num,
                                     const uint8_t *payload,
                                     size_t len);

/**
 * Event mask bits currently holding, or a negative status.
 *
 * # Safety
 * `sock` must be NULL or a live handle.
 */
int32_t tcpc_update_events(const struct TcpcSocket *sock);

/**
 * Guarded state change.
 *
 * # Safety
 * `sock` must be NULL or a live handle.
 */
enum tcpc_status tcpc_change_state(struct TcpcSocket *sock, uint8_t to);

/**
 * Takes the oldest segment the socket queued for sending. `TCPC_NO` when
 * nothing is queued.
 *
 * # Safety
 * `sock` must be NULL or a live handle; `out` must be NULL or writable.
 */
enum tcpc_status tcpc_pop_response(struct TcpcSocket *sock, struct TcpcSegmentInfo *out);

/**
 * Bit set (bit n = state code n) reachable within three segments.
 */
int32_t tcpc_reachable_states(uint8_t state);

/**
 * Bit set of states a wait for `mask` entered in `state` can end in.
 */
int32_t tcpc_wait_for_events_states(uint8_t state, uint8_t mask);

/**
 * Runs one check (by name) or all of them (`check` NULL). `TCPC_OK` when
 * every check passed, `TCPC_NO` otherwise. The JSON report is stored in
 * `*report_json` when that is non-NULL.
 *
 * # Safety
 * `check` must be NULL or a NUL-terminated string; `report_json` must be
 * NULL or writable.
 */
enum tcpc_status tcpc_run_conformance(const char *check, int32_t buggy, char **report_json);

/**
 * Runs a built-in scenario (or scenario file path). `TCPC_OK` when it met
 * its expectations, `TCPC_NO` otherwise. The JSONL trace is stored in
 * `*trace_jsonl` when that is non-NULL.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `trace_jsonl` must be NULL or
 * writable.
 */
enum tcpc_status tcpc_run_scenario(const char *name,
                                   uint64_t seed,
                                   int32_t buggy,
                                   char **trace_jsonl);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void tcpc_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TCPCONFORM_H */
