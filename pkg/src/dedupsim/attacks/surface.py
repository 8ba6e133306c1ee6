"""The attacker's view of the victim host.

Attack code drives everything through this facade: it can issue requests,
observe round-trip times and HTTP/2 response orders, and let simulated time
pass.  Victim-internal state (pool, services, ground truth) is reachable
only through the request API, which is what keeps the attacks honest.
"""

from ..clock import NS_PER_S
from ..netsim import Action


class AttackSurface:
    def __init__(self, connection, rng=None):
        self._conn = connection
        self._rng = rng if rng is not None else connection.rng
        self._start_ns = connection.clock.now_ns

    # -- requests ---------------------------------------------------------------

    def http1(self, service, op, params=()):
        return self._conn.send_http1(Action(service, op, params)).observed_rtt_ns

    def h2_pair(self, a, b):
        outcome = self._conn.send_h2_pair(Action(*a), Action(*b))
        return 0 if outcome.first_responder == "a" else 1

    def sweep_rewrite(self, service, keys):
        return self._conn.sweep_rewrite(service, keys)

    def sweep_h2_rewrite(self, service, key_pairs):
        return self._conn.sweep_h2_rewrite(service, key_pairs)

    # -- time -------------------------------------------------------------------

    def wait(self, seconds):
        self._conn.wait(seconds)

    @property
    def elapsed_ns(self):
        return self._conn.clock.now_ns - self._start_ns

    @property
    def elapsed_s(self):
        return self.elapsed_ns / NS_PER_S

    @property
    def n_requests(self):
        return self._conn.n_requests

    def rng(self):
        """Attacker-side randomness (pairings, key padding)."""
        return self._rng

    def public_api(self):
        return sorted(name for name in dir(self) if not name.startswith("_"))
