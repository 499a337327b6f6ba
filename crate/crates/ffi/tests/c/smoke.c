#include <stdio.h>
#include <string.h>
#include "tcpconform.h"

#define CLOSE_WAIT 7
#define CLOSED 0
#define FIN_WAIT_1 5
#define RST 4

int main(void) {
    if (tcpc_is_allowed(CLOSE_WAIT, FIN_WAIT_1) != 0) return 1;
    TcpcSocket *s = tcpc_socket_new_in_state(CLOSE_WAIT);
    if (!s) return 2;
    if (tcpc_change_state(s, FIN_WAIT_1) != TCPC_TRANSITION_REFUSED) return 3;
    TcpcModel m;
    tcpc_socket_model(s, &m);
    if (tcpc_handle_segment(s, RST, m.rcv_nxt, m.snd_nxt, NULL, 0) != TCPC_OK) return 4;
    if (tcpc_socket_state(s) != CLOSED) return 5;
    tcpc_socket_free(s);
    char *listing = tcpc_listing(0);
    int ok = strstr(listing, "FIN_WAIT_1 rcv(FIN+ACK) TIME_WAIT") != NULL;
    tcpc_string_free(listing);
    if (!ok) return 6;
    char *trace = NULL;
    if (tcpc_run_scenario("handshake", 0, 0, &trace) != TCPC_OK) return 7;
    tcpc_string_free(trace);
    puts("ok");
    return 0;
}
