"""Single 16 KiB index page with logical vs. physical record order.

Records are placed first-fit into free gaps or trailing space; updates are
in place only when the record does not grow; a grow that no single free
span can hold rebuilds the page, packing all records in logical key order
with the pending record appended last.  That rebuild is the alignment
primitive the record-leak attack drives, so every byte of the page image is
materialized and written through mergeable 4 KiB pool mappings.
"""

import bisect
import hashlib

from .dedup_memory import PAGE_SIZE, DedupSimError

PAGE_BYTES = 16384
DATA_START = 120              # fixed header plus system records
MAX_FREE_SPACE = 16252
DATA_END = DATA_START + MAX_FREE_SPACE
MAX_RECORD = 8125
DEFAULT_RECORD_HEADER = 27
SUPREMUM = 0xFFFF

IN_PLACE = "in_place"
RELOCATED = "relocated"
REORGANIZED = "reorganized"


class EngineError(DedupSimError):
    pass


class RecordSizeError(EngineError):
    pass


class PageFullError(EngineError):
    pass


class RecordNotFound(EngineError):
    pass


class UserRecord:
    __slots__ = ("id", "key", "payload", "offset", "header_size")

    def __init__(self, rec_id, key, payload, offset, header_size):
        self.id = rec_id
        self.key = key
        self.payload = payload
        self.offset = offset
        self.header_size = header_size

    @property
    def size(self):
        return self.header_size + len(self.payload)


def record_header_bytes(key, next_offset, header_size=DEFAULT_RECORD_HEADER):
    """Deterministic record header: 2-byte next-record offset, then static
    bytes derived from the key.  Public format, so an attacker can predict
    the header bytes that land on a leak page."""
    tag = hashlib.sha1(b"rec-header:%d" % key).digest()
    body = (tag * ((header_size // len(tag)) + 1))[:header_size - 2]
    return next_offset.to_bytes(2, "big") + body


class IndexPage:
    def __init__(self, pool, clock, owner="innodb", header_size=DEFAULT_RECORD_HEADER,
                 salt="index-page"):
        self.pool = pool
        self.owner = owner
        self.header_size = header_size
        self.salt = salt
        self.records = {}
        self.by_key = {}
        self._keys = []              # sorted record keys
        self._gaps = []              # sorted (start, size) free gaps
        self._data_top = DATA_START  # first byte past the last physical record
        self._next_id = 0
        self.reorganizations = 0
        self.image = bytearray(PAGE_BYTES)
        self.image[:DATA_START] = self._fixed_header()
        self.image[DATA_START:DATA_END] = self._filler(DATA_START, DATA_END - DATA_START)
        self.image[DATA_END:] = self._filler(DATA_END, PAGE_BYTES - DATA_END)
        self.mappings = []
        for p in range(PAGE_BYTES // PAGE_SIZE):
            content = bytes(self.image[p * PAGE_SIZE:(p + 1) * PAGE_SIZE])
            self.mappings.append(pool.map_page(owner, content, mergeable=True))

    def _fixed_header(self):
        h = hashlib.sha256(f"{self.salt}:header".encode()).digest()
        return (h * ((DATA_START // len(h)) + 1))[:DATA_START]

    def _filler(self, start, length):
        h = hashlib.sha256(f"{self.salt}:free".encode()).digest()
        reps = (start + length) // len(h) + 2
        return (h * reps)[start:start + length]

    # -- write-through ---------------------------------------------------------

    def _push(self, start, end, clock):
        first, last = start // PAGE_SIZE, (end - 1) // PAGE_SIZE
        for p in range(first, last + 1):
            lo = max(start, p * PAGE_SIZE)
            hi = min(end, (p + 1) * PAGE_SIZE)
            self.pool.write_page(self.mappings[p], lo - p * PAGE_SIZE,
                                 bytes(self.image[lo:hi]), clock)

    def _push_all(self, clock):
        for p, mapping in enumerate(self.mappings):
            self.pool.write_page(mapping, 0,
                                 bytes(self.image[p * PAGE_SIZE:(p + 1) * PAGE_SIZE]),
                                 clock)

    # -- logical order helpers ---------------------------------------------------

    def _successor_offset(self, key):
        i = bisect.bisect_right(self._keys, key)
        if i == len(self._keys):
            return SUPREMUM
        return self.records[self.by_key[self._keys[i]]].offset

    def _predecessor(self, key):
        i = bisect.bisect_left(self._keys, key)
        if i == 0:
            return None
        return self.records[self.by_key[self._keys[i - 1]]]

    def _materialize(self, rec, clock, push=True):
        start = rec.offset
        header = record_header_bytes(rec.key, self._successor_offset(rec.key),
                                     self.header_size)
        self.image[start:start + rec.size] = header + rec.payload
        if push:
            self._push(start, start + rec.size, clock)

    def _refresh_predecessor_link(self, key, clock, push=True):
        pred = self._predecessor(key)
        if pred is not None:
            nxt = self._successor_offset(pred.key)
            self.image[pred.offset:pred.offset + 2] = nxt.to_bytes(2, "big")
            if push:
                self._push(pred.offset, pred.offset + 2, clock)

    # -- free-space bookkeeping ----------------------------------------------------

    @property
    def trailing_free(self):
        return DATA_END - self._data_top

    @property
    def free_total(self):
        return self.trailing_free + sum(size for _, size in self._gaps)

    def _add_gap(self, start, size):
        if size <= 0:
            return
        bisect.insort(self._gaps, (start, size))
        # coalesce adjacent gaps, then absorb into trailing space
        merged = []
        for s, z in self._gaps:
            if merged and merged[-1][0] + merged[-1][1] == s:
                merged[-1] = (merged[-1][0], merged[-1][1] + z)
            else:
                merged.append((s, z))
        while merged and merged[-1][0] + merged[-1][1] == self._data_top:
            s, z = merged.pop()
            self._data_top = s
        self._gaps = merged

    def _take_space(self, size):
        """First sufficient gap, else trailing space; None if neither fits."""
        for i, (start, gap_size) in enumerate(self._gaps):
            if gap_size >= size:
                if gap_size == size:
                    del self._gaps[i]
                else:
                    self._gaps[i] = (start + size, gap_size - size)
                return start
        if self.trailing_free >= size:
            start = self._data_top
            self._data_top += size
            return start
        return None

    # -- operations -------------------------------------------------------------

    def insert(self, key, payload, clock):
        payload = bytes(payload)
        size = self.header_size + len(payload)
        if size > MAX_RECORD:
            raise RecordSizeError(f"record of {size} bytes exceeds {MAX_RECORD}")
        if key in self.by_key:
            raise EngineError(f"duplicate key {key}")
        rec = UserRecord(self._next_id, key, payload, -1, self.header_size)
        self._next_id += 1
        placed = self._take_space(size)
        if placed is None:
            if self.free_total >= size:
                self._reorganize_with_pending(rec, clock)
                return rec.id
            raise PageFullError("record does not fit even after reorganization")
        rec.offset = placed
        self._link(rec, clock)
        return rec.id

    def _link(self, rec, clock, push=True):
        self.records[rec.id] = rec
        self.by_key[rec.key] = rec.id
        bisect.insort(self._keys, rec.key)
        self._materialize(rec, clock, push)
        self._refresh_predecessor_link(rec.key, clock, push)

    def _unlink(self, rec, clock, reclaim=True, push=True):
        del self.records[rec.id]
        del self.by_key[rec.key]
        self._keys.remove(rec.key)
        if reclaim:
            self._add_gap(rec.offset, rec.size)
        self._refresh_predecessor_link(rec.key, clock, push)

    def update(self, rec_id, new_payload, clock):
        rec = self.records.get(rec_id)
        if rec is None:
            raise RecordNotFound(f"record {rec_id} not found")
        new_payload = bytes(new_payload)
        new_size = self.header_size + len(new_payload)
        if new_size > MAX_RECORD:
            raise RecordSizeError(f"record of {new_size} bytes exceeds {MAX_RECORD}")
        old_size = rec.size
        if new_size <= old_size:
            rec.payload = new_payload
            self._materialize(rec, clock)
            self._add_gap(rec.offset + new_size, old_size - new_size)
            return IN_PLACE
        if self.free_total + old_size < new_size:
            raise PageFullError("grown record does not fit even after reorganization")
        # delete plus insert of the grown record
        self._unlink(rec, clock)
        rec.payload = new_payload
        placed = self._take_space(new_size)
        if placed is None:
            self._reorganize_with_pending(rec, clock)
            return REORGANIZED
        rec.offset = placed
        self._link(rec, clock)
        return RELOCATED

    def delete(self, rec_id, clock):
        rec = self.records.get(rec_id)
        if rec is None:
            raise RecordNotFound(f"record {rec_id} not found")
        self._unlink(rec, clock)

    def reorganize(self, pending_id, clock):
        """Rebuild the page: pack records in logical order, pending last."""
        rec = self.records.get(pending_id)
        if rec is None:
            raise RecordNotFound(f"record {pending_id} not found")
        self._unlink(rec, clock, reclaim=True, push=False)
        self._reorganize_with_pending(rec, clock)

    def _reorganize_with_pending(self, pending, clock):
        self.reorganizations += 1
        survivors = [self.records[self.by_key[k]] for k in self._keys]
        offset = DATA_START
        for rec in survivors:
            rec.offset = offset
            offset += rec.size
        pending.offset = offset
        offset += pending.size
        if offset > DATA_END:
            raise PageFullError("reorganization cannot place the pending record")
        self._gaps = []
        self._data_top = offset
        self.records[pending.id] = pending
        self.by_key[pending.key] = pending.id
        bisect.insort(self._keys, pending.key)
        # rebuild the full image: every backing page is rewritten
        self.image[DATA_START:DATA_END] = self._filler(DATA_START, DATA_END - DATA_START)
        for rec in self.records.values():
            header = record_header_bytes(rec.key, self._successor_offset(rec.key),
                                         self.header_size)
            self.image[rec.offset:rec.offset + rec.size] = header + rec.payload
        self._push_all(clock)

    # -- accessors / external interface ----------------------------------------

    def record(self, rec_id):
        rec = self.records.get(rec_id)
        if rec is None:
            raise RecordNotFound(f"record {rec_id} not found")
        return rec

    def id_for_key(self, key):
        rec_id = self.by_key.get(key)
        if rec_id is None:
            raise RecordNotFound(f"key {key} not found")
        return rec_id

    def physical_order(self):
        return sorted(self.records.values(), key=lambda r: r.offset)

    def dump_csv(self):
        lines = ["offset,key,size"]
        for rec in self.physical_order():
            lines.append(f"{rec.offset},{rec.key},{rec.size}")
        return "\n".join(lines) + "\n"

    def live_bytes(self):
        return sum(rec.size for rec in self.records.values())


def run_commands(page, text, clock):
    """INSERT key size / UPDATE key size / DELETE key / DUMP scenario script."""
    out = []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        verb = parts[0].upper()
        try:
            if verb == "INSERT" and len(parts) == 3:
                key, size = int(parts[1]), int(parts[2])
                payload = _scripted_payload(key, size - page.header_size)
                page.insert(key, payload, clock)
                out.append("OK")
            elif verb == "UPDATE" and len(parts) == 3:
                key, size = int(parts[1]), int(parts[2])
                payload = _scripted_payload(key, size - page.header_size)
                out.append(page.update(page.id_for_key(key), payload, clock).upper())
            elif verb == "DELETE" and len(parts) == 2:
                page.delete(page.id_for_key(int(parts[1])), clock)
                out.append("OK")
            elif verb == "DUMP" and len(parts) == 1:
                out.append(page.dump_csv().rstrip("\n"))
            else:
                out.append("ERROR bad command")
        except EngineError as exc:
            out.append(f"ERROR {exc}")
    return out


def _scripted_payload(key, length):
    if length < 0:
        raise RecordSizeError("record smaller than its header")
    pat = hashlib.sha1(b"payload:%d" % key).digest()
    return (pat * (length // len(pat) + 1))[:length]


# -- shift planning and appendix arithmetic ---------------------------------------


class ShiftPlan:
    """Geometry of the record-shift attack on one index page.

    at/ax/t are the alignment-control, reorganization-trigger, and target
    record ids; sizes are full record sizes (header included).  misalignment
    is the page offset of the alignment record after the first rebuild.
    """

    def __init__(self, r_at=None, r_ax=None, r_t=None, delta=1,
                 misalignment=120, at_size=MAX_RECORD, ax_size=4064,
                 t_size=4096, header_size=DEFAULT_RECORD_HEADER):
        self.r_at = r_at
        self.r_ax = r_ax
        self.r_t = r_t
        self.delta = int(delta)
        self.misalignment = int(misalignment)
        self.at_size = int(at_size)
        self.ax_size = int(ax_size)
        self.t_size = int(t_size)
        self.header_size = int(header_size)

    @property
    def target_offset_mod_page(self):
        # records pack back to back, so the target starts right after the
        # alignment record
        return (self.misalignment + self.at_size) % PAGE_SIZE


class InequalityCheck:
    __slots__ = ("name", "lhs", "rhs", "passed")

    def __init__(self, name, lhs, rhs, passed):
        self.name = name
        self.lhs = lhs
        self.rhs = rhs
        self.passed = passed

    def __repr__(self):
        op = ">" if self.passed else "<="
        return f"{self.name}: {self.lhs} {op} {self.rhs}"


class ValidationReport:
    def __init__(self, checks, left_free_space):
        self.checks = {c.name: c for c in checks}
        self.left_free_space = left_free_space

    @property
    def all_passed(self):
        return all(c.passed for c in self.checks.values())

    def failed(self):
        return [c.name for c in self.checks.values() if not c.passed]


def validate_plan(plan):
    """Feasibility inequalities for reliably triggerable reorganizations."""
    at, ax, hdr = plan.at_size, plan.ax_size, plan.header_size
    checks = []
    # the first rebuild must be triggerable: worst-case trailing space bound
    initial_rhs = (MAX_FREE_SPACE - at - 1) // 2
    checks.append(InequalityCheck("initial_trigger", ax, initial_rhs, ax > initial_rhs))
    # reset state -> reorganized state: growing the trigger record by delta
    checks.append(InequalityCheck("shift_trigger", 2 * ax, MAX_FREE_SPACE - at,
                                  2 * ax > MAX_FREE_SPACE - at))
    # reorganized state -> reset state: restoring the alignment record, with
    # the attacker-controlled span claim |shrunk at| + |t| >= 4096
    reset_rhs = MAX_FREE_SPACE - PAGE_SIZE - ax
    checks.append(InequalityCheck("reset_trigger", at, reset_rhs, at > reset_rhs))
    # the leak page must start inside the alignment record's payload
    checks.append(InequalityCheck("misalignment_min", plan.misalignment, 68,
                                  plan.misalignment >= 68))
    max_mis = PAGE_SIZE - hdr
    checks.append(InequalityCheck("misalignment_max", max_mis, plan.misalignment,
                                  plan.misalignment <= max_mis))
    checks.append(InequalityCheck("delta_nonnegative", plan.delta, -1, plan.delta >= 0))
    left_free_space = MAX_FREE_SPACE - at - ax
    return ValidationReport(checks, left_free_space)


def plan_shift(page, plan):
    """Update pair realizing one delta-byte shift of the target record.

    Shrinking the alignment record is in place; growing the trigger record
    then fails to fit and rebuilds the page, moving the target delta bytes
    closer to the alignment record's controlled leak page.
    """
    report = validate_plan(plan)
    if not report.all_passed:
        raise EngineError("infeasible shift plan: " + ", ".join(report.failed()))
    if plan.delta == 0:
        return []
    at = page.record(plan.r_at)
    ax = page.record(plan.r_ax)
    return [
        (plan.r_at, at.size - plan.delta),
        (plan.r_ax, ax.size + plan.delta),
    ]


def compute_max_leakage(plan):
    """Bytes of the target that can be walked across the leak page end."""
    off_t = plan.target_offset_mod_page
    budget = (plan.at_size - 1 - plan.header_size - off_t
              + plan.at_size - 2 * PAGE_SIZE + 1)
    return max(0, min(budget, plan.t_size, PAGE_SIZE))
