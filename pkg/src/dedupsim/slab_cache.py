"""Slab-allocated in-memory key-value cache, the Memcached-style victim.

Values live in fixed-size chunks carved out of 1 MiB slab regions backed by
mergeable pool pages.  Updates are never in place: a set on an existing key
allocates a new chunk and pushes the old one onto the class's LIFO free
list, which is exactly the reuse behavior the remote attacks exploit.
"""

import hashlib
import math
from collections import OrderedDict

import numpy as np

from .clock import NS_PER_S
from .dedup_memory import (PAGE_SIZE, ConfigError, DedupSimError, MemoryPool,
                           ScannerConfig)

SLAB_BYTES = 1 << 20
MALLOC_OFFSET = 16
ITEM_HEADER_SIZE = 56


class CacheError(DedupSimError):
    pass


class CapacityError(CacheError):
    pass


class NotFoundError(CacheError):
    pass


def default_ladder(start=96, factor=1.25, align=8):
    sizes = []
    size = start
    while size < SLAB_BYTES:
        sizes.append(size)
        size = int(math.ceil(size * factor / align) * align)
        if size == sizes[-1]:
            size += align
    sizes.append(SLAB_BYTES)
    return tuple(sizes)


DEFAULT_LADDER = default_ladder()


class AlignmentSpec:
    def __init__(self, malloc_offset=MALLOC_OFFSET, item_header_size=ITEM_HEADER_SIZE,
                 key_size=0, chunk_size=64):
        if min(malloc_offset, item_header_size, key_size) < 0 or chunk_size <= 0:
            raise ConfigError("alignment spec fields out of range")
        self.malloc_offset = malloc_offset
        self.item_header_size = item_header_size
        self.key_size = key_size
        self.chunk_size = chunk_size


def enumerate_alignments(spec, page_span=None):
    """All page offsets a chunk's value can start at within a slab class.

    Evaluates (malloc_offset + i*chunk_size + item_header_size + key_size)
    mod 4096 over the chunk indices of one slab; the attacker uploads one
    payload per offset so one copy is guaranteed page-aligned.
    """
    chunks = SLAB_BYTES // spec.chunk_size
    if page_span is not None:
        chunks = min(chunks, int(page_span))
    step = spec.chunk_size % PAGE_SIZE
    cycle = PAGE_SIZE // math.gcd(step if step else PAGE_SIZE, PAGE_SIZE)
    base = spec.malloc_offset + spec.item_header_size + spec.key_size
    return {(base + i * spec.chunk_size) % PAGE_SIZE for i in range(min(chunks, cycle))}


def item_header_bytes(key):
    # opaque per-item metadata; only its size matters, content must be stable
    h = hashlib.sha1(b"item-header:" + key).digest()
    return (h + h + h)[:ITEM_HEADER_SIZE]


class SlabItem:
    __slots__ = ("key", "value", "cls", "chunk_index", "slab_index")

    def __init__(self, key, value, cls, slab_index, chunk_index):
        self.key = key
        self.value = value
        self.cls = cls
        self.slab_index = slab_index
        self.chunk_index = chunk_index


class Slab:
    """One 1 MiB region: 16 bytes of allocator overhead, then the chunks."""

    def __init__(self, cache, cls, index):
        self.cls = cls
        self.index = index
        span = MALLOC_OFFSET + SLAB_BYTES
        n_pages = -(-span // PAGE_SIZE)
        self.mappings = []
        for p in range(n_pages):
            seed = f"{cache.salt}:{cls.chunk_size}:{index}:{p}".encode()
            filler = hashlib.sha256(seed).digest()
            content = (filler * (PAGE_SIZE // len(filler) + 1))[:PAGE_SIZE]
            self.mappings.append(cache.pool.map_page(cache.owner, content, mergeable=True))


class SlabClass:
    def __init__(self, chunk_size):
        self.chunk_size = chunk_size
        self.chunks_per_slab = SLAB_BYTES // chunk_size
        self.slabs = []
        self.free_list = []            # LIFO stack of (slab_index, chunk_index)
        self.lru = OrderedDict()       # key -> SlabItem, oldest first
        self.next_fresh = 0            # fresh chunks handed out, last slab


class SlabCache:
    def __init__(self, pool, memory_limit_bytes, ladder=DEFAULT_LADDER,
                 owner="memcached", salt="cache"):
        if memory_limit_bytes < MALLOC_OFFSET + SLAB_BYTES:
            raise ConfigError("memory limit smaller than one slab")
        self.pool = pool
        self.memory_limit = int(memory_limit_bytes)
        self.ladder = tuple(sorted(ladder))
        self.owner = owner
        self.salt = salt
        self.classes = {}
        self.items = {}
        self.allocated_bytes = 0
        self.evictions = 0

    # -- class / chunk management ---------------------------------------------

    def class_for(self, total_size):
        for size in self.ladder:
            if size >= total_size:
                return self.classes.setdefault(size, SlabClass(size))
        raise CapacityError(f"no slab class fits {total_size} bytes")

    def _grow(self, cls):
        if self.allocated_bytes + MALLOC_OFFSET + SLAB_BYTES > self.memory_limit:
            return False
        cls.slabs.append(Slab(self, cls, len(cls.slabs)))
        self.allocated_bytes += MALLOC_OFFSET + SLAB_BYTES
        cls.next_fresh = 0
        return True

    def _allocate_chunk(self, cls, clock, exclude_key=None):
        if cls.free_list:
            return cls.free_list.pop()
        if cls.slabs and cls.next_fresh < cls.chunks_per_slab:
            chunk = (len(cls.slabs) - 1, cls.next_fresh)
            cls.next_fresh += 1
            return chunk
        if self._grow(cls):
            cls.next_fresh = 1
            return (len(cls.slabs) - 1, 0)
        # class memory exhausted: evict the least recently used item
        for old_key in cls.lru:
            if old_key != exclude_key:
                victim = cls.lru.pop(old_key)
                del self.items[old_key]
                self.evictions += 1
                return (victim.slab_index, victim.chunk_index)
        raise CapacityError("slab class has no evictable item")

    def _chunk_byte_range(self, cls, slab_index, chunk_index):
        start = MALLOC_OFFSET + chunk_index * cls.chunk_size
        return start, start + cls.chunk_size

    def _write_range(self, cls, slab_index, start, data, clock):
        slab = cls.slabs[slab_index]
        pos = 0
        while pos < len(data):
            page_idx, page_off = divmod(start + pos, PAGE_SIZE)
            span = min(PAGE_SIZE - page_off, len(data) - pos)
            self.pool.write_page(slab.mappings[page_idx], page_off,
                                 data[pos:pos + span], clock)
            pos += span

    # -- public operations ------------------------------------------------------

    def set(self, key, value, clock):
        key = bytes(key)
        value = bytes(value)
        total = ITEM_HEADER_SIZE + len(key) + len(value)
        cls = self.class_for(total)
        slab_index, chunk_index = self._allocate_chunk(cls, clock, exclude_key=key)
        start, _ = self._chunk_byte_range(cls, slab_index, chunk_index)
        self._write_range(cls, slab_index, start,
                          item_header_bytes(key) + key + value, clock)
        # the old location is unlinked only after the new data is written
        old = self.items.pop(key, None)
        if old is not None:
            old.cls.free_list.append((old.slab_index, old.chunk_index))
            old.cls.lru.pop(key, None)
        item = SlabItem(key, value, cls, slab_index, chunk_index)
        self.items[key] = item
        cls.lru[key] = item
        cls.lru.move_to_end(key)
        return item

    def get(self, key, clock):
        item = self.items.get(bytes(key))
        if item is None:
            raise NotFoundError(f"key {key!r} not found")
        item.cls.lru.move_to_end(item.key)
        return item.value

    def delete(self, key, clock):
        key = bytes(key)
        item = self.items.pop(key, None)
        if item is None:
            raise NotFoundError(f"key {key!r} not found")
        item.cls.free_list.append((item.slab_index, item.chunk_index))
        item.cls.lru.pop(key, None)

    def contains(self, key):
        return bytes(key) in self.items

    # -- geometry accessors (oracles and alignment cross-checks) ----------------

    def item_value_offset(self, key):
        """Byte offset of the item's value within its slab region."""
        item = self.items[bytes(key)]
        start, _ = self._chunk_byte_range(item.cls, item.slab_index, item.chunk_index)
        return start + ITEM_HEADER_SIZE + len(item.key)

    def item_value_residue(self, key):
        return self.item_value_offset(key) % PAGE_SIZE

    def value_page_mappings(self, key):
        """Mappings fully covered by the item's value (page-aligned spans)."""
        item = self.items[bytes(key)]
        off = self.item_value_offset(key)
        end = off + len(item.value)
        first = -(-off // PAGE_SIZE)
        slab = item.cls.slabs[item.slab_index]
        return [slab.mappings[p] for p in range(first, end // PAGE_SIZE)]


# -- text command protocol -------------------------------------------------------


def run_commands(cache, data, clock):
    """Newline-delimited SET/GET/DEL protocol with exact byte counts."""
    out = []
    pos = 0
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0:
            break
        line = data[pos:nl]
        pos = nl + 1
        if not line.strip():
            continue
        parts = line.split()
        try:
            if parts[0] == b"SET" and len(parts) == 4:
                length = int(parts[3])
                payload = data[pos:pos + length]
                if len(payload) != length:
                    out.append(b"CLIENT_ERROR bad data chunk")
                    break
                pos += length
                if pos < len(data) and data[pos:pos + 1] == b"\n":
                    pos += 1
                cache.set(parts[1], payload, clock)
                out.append(b"STORED")
            elif parts[0] == b"GET" and len(parts) == 2:
                try:
                    value = cache.get(parts[1], clock)
                    out.append(b"VALUE %s 0 %d" % (parts[1], len(value)))
                    out.append(value)
                    out.append(b"END")
                except NotFoundError:
                    out.append(b"END")
            elif parts[0] == b"DEL" and len(parts) == 2:
                try:
                    cache.delete(parts[1], clock)
                    out.append(b"DELETED")
                except NotFoundError:
                    out.append(b"NOT_FOUND")
            else:
                out.append(b"ERROR")
        except CacheError as exc:
            out.append(b"SERVER_ERROR " + str(exc).encode())
    return out


# -- eviction-time experiment ------------------------------------------------------


class WorkloadSpec:
    def __init__(self, ops_per_sec, write_fraction=0.5, key_space=200_000,
                 value_bytes=1024, gaussian_sigma_frac=0.1, max_ops=5_000_000):
        self.ops_per_sec = float(ops_per_sec)
        self.write_fraction = float(write_fraction)
        self.key_space = int(key_space)
        self.value_bytes = int(value_bytes)
        self.gaussian_sigma_frac = float(gaussian_sigma_frac)
        self.max_ops = int(max_ops)


def simulate_eviction_time(memory_limit, workload, clock, rng=None):
    """Simulated seconds until a probe entry is evicted under the workload.

    The cache is filled to its limit, a probe entry added, then a
    Gaussian-keyed read/write mix replays at the workload's op rate.
    Returns +inf if the workload cannot evict the probe.
    """
    if workload.ops_per_sec <= 0:
        raise ConfigError("workload needs a positive op rate")
    rng = rng if rng is not None else np.random.default_rng(0)
    pool = MemoryPool(scanner=ScannerConfig(mode="disabled"), rng=rng)
    cache = SlabCache(pool, memory_limit)
    value = bytes(workload.value_bytes)
    filler = b"f" * workload.value_bytes
    n = 0
    while True:
        cls = cache.class_for(ITEM_HEADER_SIZE + 12 + workload.value_bytes)
        full = (not cls.free_list
                and (cls.slabs and cls.next_fresh >= cls.chunks_per_slab or not cls.slabs)
                and cache.allocated_bytes + MALLOC_OFFSET + SLAB_BYTES > cache.memory_limit)
        if full:
            break
        cache.set(b"fill-%08d" % n, filler, clock)
        n += 1
    if workload.write_fraction <= 0.0:
        return math.inf
    probe = b"probe-entry!"
    cache.set(probe, value, clock)
    op_ns = int(round(NS_PER_S / workload.ops_per_sec))
    center = workload.key_space / 2.0
    sigma = workload.key_space * workload.gaussian_sigma_frac
    start_ns = clock.now_ns
    batch = 4096
    ops = 0
    while ops < workload.max_ops:
        idxs = np.clip(rng.normal(center, sigma, batch), 0,
                       workload.key_space - 1).astype(np.int64)
        writes = rng.random(batch) < workload.write_fraction
        for i in range(batch):
            clock.advance(op_ns)
            key = b"u-%d" % idxs[i]
            if writes[i]:
                cache.set(key, value, clock)
                if probe not in cache.items:
                    return (clock.now_ns - start_ns) / NS_PER_S
            elif key in cache.items:
                cache.get(key, clock)
        ops += batch
    return math.inf
