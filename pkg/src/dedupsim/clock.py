"""Simulation clock: a single monotonically advancing nanosecond counter.

Every stateful operation in the simulator takes the clock explicitly, so a
scenario is fully determined by its seed and its sequence of operations.
"""

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


class SimClock:
    __slots__ = ("now_ns",)

    def __init__(self, start_ns=0):
        self.now_ns = int(start_ns)

    def advance(self, delta_ns):
        if delta_ns < 0:
            raise ValueError("clock cannot run backwards")
        self.now_ns += int(delta_ns)

    def jump_to(self, target_ns):
        if target_ns < self.now_ns:
            raise ValueError("clock cannot run backwards")
        self.now_ns = int(target_ns)

    @property
    def now_s(self):
        return self.now_ns / NS_PER_S

    def __repr__(self):
        return f"SimClock({self.now_ns} ns)"
