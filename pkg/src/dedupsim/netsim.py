"""Network timing layer.

Requests against the victim's services are timed end to end: the observed
round-trip is base RTT plus two jitter draws (uplink and downlink) plus the
server-side cost of the writes the request performed.  HTTP/2 pairs are
submitted in one packet and expose only the response ORDER, decided by
server-side cost plus a small service jitter.  Attack code sees observed
round-trips and orderings, never server-side state.
"""

import numpy as np

from .clock import NS_PER_S
from .dedup_memory import DedupSimError


class PresetError(DedupSimError):
    pass


class JitterSpec:
    """Non-negative jitter: family 'none' or shifted log-normal.

    For 'lognormal', draws are shift_ns + LogNormal(ln(scale_ns), shape).
    """

    def __init__(self, family="none", shift_ns=0.0, scale_ns=0.0, shape=0.0):
        if family not in ("none", "lognormal"):
            raise PresetError(f"unknown jitter family {family!r}")
        self.family = family
        self.shift_ns = float(shift_ns)
        self.scale_ns = float(scale_ns)
        self.shape = float(shape)

    def draw(self, rng, n):
        if self.family == "none":
            return np.zeros(n)
        return self.shift_ns + rng.lognormal(np.log(self.scale_ns), self.shape, n)

    @property
    def mean_ns(self):
        if self.family == "none":
            return 0.0
        return self.shift_ns + self.scale_ns * np.exp(0.5 * self.shape ** 2)

    @property
    def std_ns(self):
        if self.family == "none":
            return 0.0
        s2 = self.shape ** 2
        return self.scale_ns * np.exp(0.5 * s2) * np.sqrt(np.expm1(s2))

    def as_dict(self):
        return {"family": self.family, "shift_ns": self.shift_ns,
                "scale_ns": self.scale_ns, "shape": self.shape}


class LatencyModel:
    """Network and client timing: pacing_ns is the sequential client
    turnaround per request (round trip included), async_pacing_ns the
    per-request spacing inside an asynchronous burst."""

    def __init__(self, base_rtt_ns, jitter=None, hops=0,
                 service_jitter_ns=0.0, pacing_ns=1_000_000,
                 async_pacing_ns=None, name="custom"):
        if base_rtt_ns < 0:
            raise PresetError("base_rtt_ns must be >= 0")
        self.base_rtt_ns = float(base_rtt_ns)
        self.jitter = jitter or JitterSpec()
        self.hops = int(hops)
        self.service_jitter_ns = float(service_jitter_ns)
        self.pacing_ns = int(pacing_ns)
        self.async_pacing_ns = int(async_pacing_ns if async_pacing_ns is not None
                                   else pacing_ns)
        self.name = name


class TimingSample:
    __slots__ = ("request_id", "action", "server_cost_ns", "observed_rtt_ns", "label")

    def __init__(self, request_id, action, server_cost_ns, observed_rtt_ns, label):
        self.request_id = request_id
        self.action = action
        self.server_cost_ns = server_cost_ns
        self.observed_rtt_ns = observed_rtt_ns
        self.label = label


class ObservedSample:
    """Attacker-visible view of one request: id and round-trip only."""

    __slots__ = ("request_id", "observed_rtt_ns")

    def __init__(self, request_id, observed_rtt_ns):
        self.request_id = request_id
        self.observed_rtt_ns = observed_rtt_ns


class H2Outcome:
    __slots__ = ("pair", "first_responder")

    def __init__(self, pair, first_responder):
        self.pair = pair
        self.first_responder = first_responder  # "a" or "b"


class Action:
    """A scripted victim action: service name, operation, parameters."""

    __slots__ = ("service", "op", "params")

    def __init__(self, service, op, params=()):
        self.service = service
        self.op = op
        self.params = params

    def describe(self):
        return f"{self.service}.{self.op}"


class Connection:
    """One simulated client connection to the victim host.

    Every request advances the clock by the model's pacing (client turnaround
    including the round trip); the observed RTT is the measurement, not the
    elapsed time.  Set evaluation_mode to attach ground-truth labels to the
    internal sample log.
    """

    _JBUF = 4096

    def __init__(self, services, model, pool, clock, rng,
                 evaluation_mode=False, record_samples=False):
        self.services = services
        self.model = model
        self.pool = pool
        self.clock = clock
        self.rng = rng
        self.evaluation_mode = evaluation_mode
        self.record_samples = record_samples
        self.samples = []
        self.n_requests = 0
        self._next_id = 0
        self._jit = np.empty(0)
        self._jit_i = 0
        self._svc = np.empty(0)
        self._svc_i = 0

    # -- draw buffers ---------------------------------------------------------

    def _jitter(self):
        if self._jit_i >= len(self._jit):
            self._jit = self.model.jitter.draw(self.rng, self._JBUF)
            self._jit_i = 0
        v = self._jit[self._jit_i]
        self._jit_i += 1
        return v

    def _jitter_vec(self, n):
        return self.model.jitter.draw(self.rng, n)

    def _service_jitter(self):
        if self.model.service_jitter_ns == 0.0:
            return 0.0
        if self._svc_i >= len(self._svc):
            self._svc = self.rng.normal(0.0, self.model.service_jitter_ns, self._JBUF)
            self._svc_i = 0
        v = self._svc[self._svc_i]
        self._svc_i += 1
        return v

    # -- request execution ----------------------------------------------------

    def _execute(self, action):
        self.pool.begin_request()
        self.services[action.service].execute(action.op, action.params, self.clock)
        return self.pool.end_request()

    def _elapse(self, duration_ns):
        # client turnaround elapses on the simulation clock with the
        # victim's scanner ticking at its cadence throughout
        self.pool.advance_time(self.clock, duration_ns / NS_PER_S)

    def _observe(self, action, cost, faults):
        rid = self._next_id
        self._next_id += 1
        self.n_requests += 1
        observed = self.model.base_rtt_ns + self._jitter() + self._jitter() + cost
        if self.record_samples or self.evaluation_mode:
            label = ("cow" if faults else "no-cow") if self.evaluation_mode else None
            self.samples.append(TimingSample(rid, action.describe(), cost, observed, label))
        self._elapse(self.model.pacing_ns)
        return ObservedSample(rid, observed)

    def send_http1(self, action):
        cost, faults = self._execute(action)
        return self._observe(action, cost, faults)

    def send_h2_pair(self, action_a, action_b):
        cost_a, _ = self._execute(action_a)
        cost_b, _ = self._execute(action_b)
        done_a = cost_a + self._service_jitter()
        done_b = cost_b + self._service_jitter()
        rid = self._next_id
        self._next_id += 2
        self.n_requests += 2
        self._elapse(self.model.pacing_ns)
        first = "a" if done_a <= done_b else "b"
        return H2Outcome((rid, rid + 1), first)

    # -- batched probe paths (asynchronous request bursts) ---------------------

    def sweep_rewrite(self, service, keys):
        """Burst of HTTP/1 probe requests, one same-content rewrite per key.

        Returns observed RTTs as an array; semantically identical to a loop
        of send_http1 over the per-key rewrite actions.
        """
        svc = self.services[service]
        costs, _faults = svc.rewrite_probe_batch(keys, self.clock)
        n = len(keys)
        observed = (self.model.base_rtt_ns + self._jitter_vec(n)
                    + self._jitter_vec(n) + costs)
        self.n_requests += n
        self._next_id += n
        self._elapse(n * self.model.async_pacing_ns)
        return observed

    def sweep_h2_rewrite(self, service, key_pairs):
        """Burst of multiplexed pairs of same-content rewrites.

        Returns an int8 array: 0 where the first member responded first.
        """
        svc = self.services[service]
        flat = []
        for a, b in key_pairs:
            flat.append(a)
            flat.append(b)
        costs, _ = svc.rewrite_probe_batch(flat, self.clock)
        n = len(key_pairs)
        if self.model.service_jitter_ns > 0.0:
            costs = costs + self.rng.normal(0.0, self.model.service_jitter_ns, 2 * n)
        done_a = costs[0::2]
        done_b = costs[1::2]
        self.n_requests += 2 * n
        self._next_id += 2 * n
        self._elapse(n * self.model.async_pacing_ns)
        return (done_a > done_b).astype(np.int8)

    # -- bookkeeping ------------------------------------------------------------

    def wait(self, seconds):
        self.pool.advance_time(self.clock, seconds)

    def sample_log_csv(self, include_hidden=False):
        lines = []
        for s in self.samples:
            row = f"{s.request_id},{s.action},{s.observed_rtt_ns:.1f}"
            if include_hidden and s.label is not None:
                row += f",{s.label}"
            lines.append(row)
        return "\n".join(lines) + ("\n" if lines else "")
