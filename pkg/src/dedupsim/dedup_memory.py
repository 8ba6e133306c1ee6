"""Simulated physical memory with content-based page deduplication.

A MemoryPool holds 4 KiB physical pages and virtual mappings onto them.  A
round-robin scanner merges byte-identical mergeable pages into copy-on-write
merge groups; writes to shared pages fault and copy out, while the remaining
sharers stay copy-on-write (R/W-bit persistence).  Per-write latencies are
drawn from a configurable log-normal cost model, which is the only signal an
attacker ever observes.
"""

import hashlib

import numpy as np

from .clock import NS_PER_MS, NS_PER_S

PAGE_SIZE = 4096
ZERO_PAGE = bytes(PAGE_SIZE)

SCAN_MODES = ("full-dedup", "zero-page-only", "fake-merging", "disabled")


class DedupSimError(Exception):
    pass


class PageSizeError(DedupSimError):
    pass


class PageBoundsError(DedupSimError):
    pass


class ConfigError(DedupSimError):
    pass


def _lognormal_params(mean, rel_sigma):
    # mean/std parameterization of a log-normal: rel_sigma = std/mean
    sigma = float(np.sqrt(np.log1p(rel_sigma * rel_sigma)))
    mu = float(np.log(mean) - 0.5 * sigma * sigma)
    return mu, sigma


class CostModel:
    """Server-side write costs in nanoseconds.

    cow_fault_ns / plain_write_ns are distribution means, the sigmas are
    relative standard deviations.  fault_setup_ns is a one-off cost the
    service layer adds to a request's first faulting write (cold fault path);
    it is zero for the local model and calibrated per network preset.
    """

    def __init__(self, cow_fault_ns=7209.3, cow_fault_sigma=0.2623,
                 plain_write_ns=100.0, plain_write_sigma=0.29,
                 fault_setup_ns=0.0):
        if cow_fault_ns <= plain_write_ns:
            raise ConfigError("cow_fault_ns must exceed plain_write_ns")
        self.cow_fault_ns = float(cow_fault_ns)
        self.cow_fault_sigma = float(cow_fault_sigma)
        self.plain_write_ns = float(plain_write_ns)
        self.plain_write_sigma = float(plain_write_sigma)
        self.fault_setup_ns = float(fault_setup_ns)
        self._cow_ln = _lognormal_params(cow_fault_ns, cow_fault_sigma) \
            if cow_fault_sigma > 0 else None
        self._plain_ln = _lognormal_params(plain_write_ns, plain_write_sigma) \
            if plain_write_sigma > 0 else None

    def draw_cow(self, rng, n=None):
        if self._cow_ln is None:
            return self.cow_fault_ns if n is None else np.full(n, self.cow_fault_ns)
        mu, sigma = self._cow_ln
        return rng.lognormal(mu, sigma, n)

    def draw_plain(self, rng, n=None):
        if self._plain_ln is None:
            return self.plain_write_ns if n is None else np.full(n, self.plain_write_ns)
        mu, sigma = self._plain_ln
        return rng.lognormal(mu, sigma, n)


class ScannerConfig:
    def __init__(self, pages_to_scan=100, sleep_millisecs=200, mode="full-dedup"):
        if pages_to_scan < 1:
            raise ConfigError("pages_to_scan must be >= 1")
        if sleep_millisecs < 1:
            raise ConfigError("sleep_millisecs must be >= 1")
        if mode not in SCAN_MODES:
            raise ConfigError(f"unknown scanner mode {mode!r}")
        self.pages_to_scan = int(pages_to_scan)
        self.sleep_millisecs = int(sleep_millisecs)
        self.mode = mode

    @property
    def sleep_ns(self):
        return self.sleep_millisecs * NS_PER_MS

    def __repr__(self):
        return (f"ScannerConfig(pages_to_scan={self.pages_to_scan}, "
                f"sleep_millisecs={self.sleep_millisecs}, mode={self.mode!r})")


class PhysicalPage:
    __slots__ = ("id", "content", "mergeable", "refs")

    def __init__(self, page_id, content, mergeable):
        self.id = page_id
        self.content = content
        self.mergeable = mergeable
        self.refs = 1


class VirtualMapping:
    __slots__ = ("id", "owner", "page", "cow", "mergeable", "dirty", "group_id")

    def __init__(self, mapping_id, owner, page, mergeable):
        self.id = mapping_id
        self.owner = owner
        self.page = page
        self.cow = False
        self.mergeable = mergeable
        self.dirty = False
        self.group_id = None


class MergeGroup:
    __slots__ = ("id", "page", "members")

    def __init__(self, group_id, page, members):
        self.id = group_id
        self.page = page          # canonical physical page, content frozen
        self.members = members    # set of mapping ids


class WriteOutcome:
    __slots__ = ("latency_ns", "faulted")

    def __init__(self, latency_ns, faulted):
        self.latency_ns = latency_ns
        self.faulted = faulted


class MergeReport:
    __slots__ = ("pages_examined", "groups_formed")

    def __init__(self, pages_examined, groups_formed):
        self.pages_examined = pages_examined
        self.groups_formed = groups_formed


class MemoryPool:
    """Deterministic single-owner page pool driven by an explicit clock.

    The scanner mode is pinned for the pool's lifetime; mitigation
    comparisons use one pool per mode.  ambient_pages adds phantom scan work
    after the live pages, modelling a host with a much larger resident set
    than the simulated services.
    """

    def __init__(self, cost_model=None, scanner=None, rng=None, ambient_pages=0):
        self.cost_model = cost_model or CostModel()
        self.scanner = scanner or ScannerConfig()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.ambient_pages = int(ambient_pages)
        self.pages = {}
        self.mappings = {}
        self._ring = []            # mergeable mappings in map order
        self._cursor = 0           # virtual ring position (live + ambient)
        self._groups = {}
        self._stable = {}          # content -> group id
        self._loose = {}           # content -> mapping id seen loose by the scanner
        self._attention = set()    # mapping ids whose examination can change state
        self._next_page_id = 0
        self._next_mapping_id = 0
        self._next_group_id = 0
        self._scan_due_ns = None
        self.total_faults = 0
        self.total_writes = 0
        self._request_faults = None
        self._request_cost = 0.0
        self._plain_buf = np.empty(0)
        self._plain_i = 0
        self._cow_buf = np.empty(0)
        self._cow_i = 0

    # -- buffered latency draws ------------------------------------------------

    _DRAW_BUF = 4096

    def _draw_plain(self):
        if self._plain_i >= len(self._plain_buf):
            self._plain_buf = np.asarray(self.cost_model.draw_plain(self.rng, self._DRAW_BUF))
            self._plain_i = 0
        v = self._plain_buf[self._plain_i]
        self._plain_i += 1
        return float(v)

    def _draw_cow(self):
        if self._cow_i >= len(self._cow_buf):
            self._cow_buf = np.asarray(self.cost_model.draw_cow(self.rng, self._DRAW_BUF))
            self._cow_i = 0
        v = self._cow_buf[self._cow_i]
        self._cow_i += 1
        return float(v)

    def _draw_plain_vec(self, n):
        return np.asarray(self.cost_model.draw_plain(self.rng, n))

    def _draw_cow_vec(self, n):
        return np.asarray(self.cost_model.draw_cow(self.rng, n))

    # -- mapping / write API -------------------------------------------------

    def map_page(self, owner, content, mergeable=True):
        content = bytes(content)
        if len(content) != PAGE_SIZE:
            raise PageSizeError(f"page content must be {PAGE_SIZE} bytes, got {len(content)}")
        page = PhysicalPage(self._next_page_id, content, mergeable)
        self._next_page_id += 1
        mapping = VirtualMapping(self._next_mapping_id, owner, page, mergeable)
        self._next_mapping_id += 1
        self.pages[page.id] = page
        self.mappings[mapping.id] = mapping
        if mergeable:
            self._ring.append(mapping)
            self._attention.add(mapping.id)
        return mapping

    def write_page(self, mapping, offset, data, clock):
        data = bytes(data)
        if offset < 0 or offset + len(data) > PAGE_SIZE:
            raise PageBoundsError(f"write [{offset}, {offset + len(data)}) outside page")
        self.total_writes += 1
        fake = self.scanner.mode == "fake-merging" and mapping.mergeable
        if mapping.cow:
            latency = self._draw_cow()
            self._copy_out(mapping, offset, data)
            self._count_fault(latency)
            return WriteOutcome(latency, True)
        old = mapping.page.content
        if offset == 0 and len(data) == PAGE_SIZE:
            changed = old != data
        else:
            changed = old[offset:offset + len(data)] != data
        if changed:
            # non-cow mapping always owns its page exclusively
            mapping.page.content = old[:offset] + data + old[offset + len(data):]
            mapping.dirty = True
            if mapping.mergeable:
                self._attention.add(mapping.id)
        if fake:
            # uniform behavior for all dedup candidates: every write looks
            # like a copy-on-write fault
            latency = self._draw_cow()
            self._count_fault(latency)
            return WriteOutcome(latency, True)
        latency = self._draw_plain()
        if self._request_faults is not None:
            self._request_cost += latency
        return WriteOutcome(latency, False)

    def _count_fault(self, latency):
        self.total_faults += 1
        if self._request_faults is not None:
            self._request_faults += 1
            self._request_cost += latency

    def _copy_out(self, mapping, offset, data):
        page = mapping.page
        new_content = page.content[:offset] + data + page.content[offset + len(data):]
        gid = mapping.group_id
        if gid is not None:
            group = self._groups[gid]
            group.members.discard(mapping.id)
            mapping.group_id = None
            if len(group.members) == 1:
                # group of one dissolves; the survivor stays copy-on-write
                # until it is itself written (R/W-bit persistence)
                survivor_id = next(iter(group.members))
                survivor = self.mappings[survivor_id]
                survivor.group_id = None
                self._stable.pop(group.page.content, None)
                del self._groups[gid]
                if survivor.mergeable:
                    self._attention.add(survivor_id)
        self._release_page(page)
        new_page = PhysicalPage(self._next_page_id, new_content, mapping.mergeable)
        self._next_page_id += 1
        self.pages[new_page.id] = new_page
        mapping.page = new_page
        mapping.cow = False
        mapping.dirty = new_content != page.content
        if mapping.mergeable:
            self._attention.add(mapping.id)

    def _release_page(self, page):
        page.refs -= 1
        if page.refs == 0:
            del self.pages[page.id]

    # -- request cost accounting (used by the network layer) ------------------

    def begin_request(self):
        self._request_faults = 0
        self._request_cost = 0.0

    def end_request(self):
        faults, cost = self._request_faults, self._request_cost
        self._request_faults = None
        self._request_cost = 0.0
        if faults:
            cost += self.cost_model.fault_setup_ns
        return cost, faults

    def probe_rewrite_bundles(self, bundles):
        """Batched probe: rewrite every mapping with its current content.

        One bundle per request.  Semantically a loop of full-page write_page
        calls with unchanged bytes; returns per-bundle (server_cost_ns,
        fault_count) arrays with the same cost distributions, drawn
        vectorized.
        """
        fake = self.scanner.mode == "fake-merging"
        n = len(bundles)
        plain_counts = np.zeros(n, dtype=np.int64)
        fault_counts = np.zeros(n, dtype=np.int64)
        for i, bundle in enumerate(bundles):
            faults = 0
            for mapping in bundle:
                if mapping.cow:
                    faults += 1
                    self._copy_out(mapping, 0, mapping.page.content)
                elif fake and mapping.mergeable:
                    faults += 1
            fault_counts[i] = faults
            plain_counts[i] = len(bundle) - faults
        self.total_writes += int(plain_counts.sum() + fault_counts.sum())
        self.total_faults += int(fault_counts.sum())
        costs = np.zeros(n)
        total_plain = int(plain_counts.sum())
        if total_plain:
            draws = self._draw_plain_vec(total_plain)
            edges = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(plain_counts, out=edges[1:])
            costs += np.add.reduceat(np.append(draws, 0.0), edges[:-1]) * (plain_counts > 0)
        total_faulted = int(fault_counts.sum())
        if total_faulted:
            draws = self._draw_cow_vec(total_faulted)
            edges = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(fault_counts, out=edges[1:])
            costs += np.add.reduceat(np.append(draws, 0.0), edges[:-1]) * (fault_counts > 0)
            costs += self.cost_model.fault_setup_ns * (fault_counts > 0)
        return costs, fault_counts

    # -- scanner --------------------------------------------------------------

    def scan_tick(self, clock, config=None):
        cfg = self._effective_config(config)
        clock.advance(cfg.sleep_ns)
        if cfg.mode == "disabled":
            return MergeReport(0, 0)
        return self._scan_burst(cfg)

    def advance_time(self, clock, duration_s, config=None):
        """Let simulated time pass, running scanner ticks at their cadence."""
        cfg = self._effective_config(config)
        target = clock.now_ns + int(round(duration_s * NS_PER_S))
        if cfg.mode == "disabled":
            clock.jump_to(target)
            return
        if self._scan_due_ns is None:
            self._scan_due_ns = clock.now_ns + cfg.sleep_ns
        while self._scan_due_ns <= target:
            clock.jump_to(self._scan_due_ns)
            self._scan_burst(cfg)
            self._scan_due_ns += cfg.sleep_ns
        clock.jump_to(target)

    def _effective_config(self, config):
        cfg = config or self.scanner
        if cfg.mode != self.scanner.mode:
            raise ConfigError("scanner mode is pinned per pool; build a new pool to change it")
        return cfg

    def _scan_burst(self, cfg):
        vlen = len(self._ring) + self.ambient_pages
        if vlen == 0:
            return MergeReport(0, 0)
        n = min(cfg.pages_to_scan, vlen)
        formed_before = self._next_group_id
        live = len(self._ring)
        if n >= vlen:
            # whole pass: only pages flagged for attention can change state
            for mid in sorted(self._attention):
                mapping = self.mappings.get(mid)
                if mapping is not None:
                    self._examine(mapping, cfg)
        else:
            start = self._cursor
            for seg_start, seg_len in self._window_segments(start, n, vlen, live):
                for idx in range(seg_start, seg_start + seg_len):
                    mapping = self._ring[idx]
                    if mapping.id in self._attention:
                        self._examine(mapping, cfg)
            self._cursor = (start + n) % vlen
        return MergeReport(n, self._next_group_id - formed_before)

    @staticmethod
    def _window_segments(start, n, vlen, live):
        # live-index segments covered by virtual window [start, start+n)
        segments = []
        remaining = n
        pos = start
        while remaining > 0:
            span = min(remaining, vlen - pos)
            if pos < live:
                segments.append((pos, min(span, live - pos)))
            remaining -= span
            pos = (pos + span) % vlen
            if pos == start:
                break
        return segments

    def _examine(self, mapping, cfg):
        if mapping.dirty:
            # one-scan cooldown for recently modified pages
            mapping.dirty = False
            return
        if mapping.group_id is not None:
            self._attention.discard(mapping.id)
            return
        content = mapping.page.content
        if cfg.mode == "zero-page-only" and content != ZERO_PAGE:
            self._attention.discard(mapping.id)
            return
        gid = self._stable.get(content)
        if gid is not None:
            self._join_group(mapping, self._groups[gid])
            return
        partner_id = self._loose.get(content)
        if partner_id is not None and partner_id != mapping.id:
            partner = self.mappings.get(partner_id)
            if (partner is not None and partner.group_id is None
                    and partner.mergeable and not partner.dirty
                    and partner.page.content == content):
                self._form_group(partner, mapping, content)
                return
        self._loose[content] = mapping.id
        self._attention.discard(mapping.id)

    def _join_group(self, mapping, group):
        self._release_page(mapping.page)
        mapping.page = group.page
        group.page.refs += 1
        mapping.cow = True
        mapping.group_id = group.id
        group.members.add(mapping.id)
        self._attention.discard(mapping.id)

    def _form_group(self, first, second, content):
        group = MergeGroup(self._next_group_id, first.page, {first.id, second.id})
        self._next_group_id += 1
        self._groups[group.id] = group
        self._release_page(second.page)
        second.page = first.page
        first.page.refs += 1
        first.cow = True
        second.cow = True
        first.group_id = group.id
        second.group_id = group.id
        self._stable[content] = group.id
        self._loose.pop(content, None)
        self._attention.discard(first.id)
        self._attention.discard(second.id)

    # -- introspection ---------------------------------------------------------

    def group_of(self, mapping):
        return self._groups.get(mapping.group_id) if mapping.group_id is not None else None

    def group_count(self):
        return len(self._groups)

    def set_scan_cursor(self, position):
        """Scenario/test hook: place the scan cursor at a virtual position."""
        vlen = len(self._ring) + self.ambient_pages
        if vlen == 0:
            self._cursor = 0
        else:
            self._cursor = int(position) % vlen

    def force_full_scan(self, clock, config=None):
        """Test hook: run scan ticks until one full pass completed."""
        cfg = self._effective_config(config)
        vlen = len(self._ring) + self.ambient_pages
        ticks = -(-vlen // cfg.pages_to_scan) if vlen else 0
        report = MergeReport(0, 0)
        for _ in range(ticks):
            r = self.scan_tick(clock, cfg)
            report = MergeReport(report.pages_examined + r.pages_examined,
                                 report.groups_formed + r.groups_formed)
        return report

    def dump(self):
        """Pool state as text: page_id, content_digest, group|-, cow flags."""
        by_page = {}
        for mapping in self.mappings.values():
            by_page.setdefault(mapping.page.id, []).append(mapping)
        lines = []
        for page_id in sorted(self.pages):
            page = self.pages[page_id]
            digest = hashlib.sha1(page.content).hexdigest()[:12]
            maps = sorted(by_page.get(page_id, []), key=lambda m: m.id)
            gids = {m.group_id for m in maps if m.group_id is not None}
            gid = str(gids.pop()) if len(gids) == 1 else "-"
            flags = "".join("C" if m.cow else "w" for m in maps)
            lines.append(f"{page_id}, {digest}, {gid}, {flags}")
        return "\n".join(lines) + ("\n" if lines else "")


# -- scan-rate model -----------------------------------------------------------


def expected_dedup_time(pool_size, config):
    """Analytic expected time until a freshly mapped page is merged.

    The target page sits at a uniformly random distance from the scan cursor
    among pool_size scanned pages; it merges at the end of the tick that
    examines it.
    """
    if config.pages_to_scan < 1:
        raise ConfigError("pages_to_scan must be >= 1")
    if config.mode == "disabled":
        return float("inf")
    pool_size = int(pool_size)
    if pool_size < 1:
        raise ConfigError("pool_size must be >= 1")
    n = config.pages_to_scan
    if n >= pool_size:
        expected_ticks = 1.0
    else:
        q, r = divmod(pool_size, n)
        total_floor = n * q * (q - 1) // 2 + r * q
        expected_ticks = total_floor / pool_size + 1.0
    return expected_ticks * config.sleep_millisecs / 1000.0


def full_scan_time(pool_size, config):
    """Duration of one complete scanner pass over pool_size pages."""
    if config.mode == "disabled":
        return float("inf")
    ticks = -(-int(pool_size) // config.pages_to_scan)
    return ticks * config.sleep_millisecs / 1000.0


def calibrate_pool_size(config, target_seconds):
    """Pool size whose expected_dedup_time is closest to target_seconds."""
    lo, hi = 1, max(2, 4 * config.pages_to_scan)
    while expected_dedup_time(hi, config) < target_seconds:
        hi *= 2
    while lo < hi:
        mid = (lo + hi) // 2
        if expected_dedup_time(mid, config) < target_seconds:
            lo = mid + 1
        else:
            hi = mid
    best = lo
    best_err = abs(expected_dedup_time(lo, config) - target_seconds)
    for cand in (lo - 1, lo + 1):
        if cand >= 1:
            err = abs(expected_dedup_time(cand, config) - target_seconds)
            if err < best_err:
                best, best_err = cand, err
    return best


def recommended_wait_s(pool_size, config):
    # expected merge delay plus a 25% safety margin
    return 1.25 * expected_dedup_time(pool_size, config)
