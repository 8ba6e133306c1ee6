"""Victim-side services the attacker reaches through network requests.

Each service executes named operations against the shared memory pool; the
network layer accounts the write costs into the request's response time.
"""

import numpy as np

from .dedup_memory import DedupSimError
from .index_engine import IndexPage
from .slab_cache import SlabCache


class ServiceError(DedupSimError):
    pass


class PageStoreService:
    """In-memory file store: named files of whole 4 KiB pages.

    Models the upload/update website used for the covert channel and the
    page-set API used for the KASLR break.
    """

    name = "pages"

    def __init__(self, pool, owner="webapp"):
        self.pool = pool
        self.owner = owner
        self.files = {}

    def execute(self, op, params, clock):
        if op == "store":
            name, pages = params
            self.store(name, pages, clock)
        elif op == "store_many":
            entries = params[0] if len(params) == 1 else params
            for name, pages in entries:
                self.store(name, pages, clock)
        elif op == "write":
            name, index, content = params
            self.write(name, index, content, clock)
        elif op == "rewrite_same":
            (name,) = params
            self.rewrite_same(name, clock)
        elif op == "read":
            pass
        else:
            raise ServiceError(f"unknown page-store op {op!r}")

    def store(self, name, pages, clock):
        if name in self.files:
            mappings = self.files[name]
            if len(pages) != len(mappings):
                raise ServiceError("file size is fixed once stored")
            for mapping, content in zip(mappings, pages):
                self.pool.write_page(mapping, 0, content, clock)
        else:
            self.files[name] = [self.pool.map_page(self.owner, content, mergeable=True)
                                for content in pages]

    def write(self, name, index, content, clock):
        self.pool.write_page(self.files[name][index], 0, content, clock)

    def rewrite_same(self, name, clock):
        for mapping in self.files[name]:
            self.pool.write_page(mapping, 0, mapping.page.content, clock)

    def rewrite_probe_batch(self, keys, clock):
        bundles = [self.files[name] for name in keys]
        return self.pool.probe_rewrite_bundles(bundles)


class SlabCacheService:
    """Key-value store facade over the slab cache (the Memcached victim)."""

    name = "kv"

    def __init__(self, cache: SlabCache):
        self.cache = cache
        self.pool = cache.pool

    def execute(self, op, params, clock):
        if op == "set":
            key, value = params
            self.cache.set(key, value, clock)
        elif op == "set_batch":
            for key, value in params[0]:
                self.cache.set(key, value, clock)
        elif op == "get":
            self.cache.get(params[0], clock)
        elif op == "delete":
            self.cache.delete(params[0], clock)
        elif op == "probe_dance":
            self._dance(params[0], clock)
        else:
            raise ServiceError(f"unknown kv op {op!r}")

    def _dance(self, keys, clock):
        # free each deduplicated chunk and immediately reacquire it from the
        # free-list head; the rewrite of the reacquired chunk is what faults
        for key in keys:
            value = self.cache.get(key, clock)
            self.cache.set(key, b"!", clock)
            self.cache.set(key, value, clock)

    def rewrite_probe_batch(self, key_groups, clock):
        n = len(key_groups)
        costs = np.zeros(n)
        faults = np.zeros(n, dtype=np.int64)
        for i, keys in enumerate(key_groups):
            self.pool.begin_request()
            self._dance(keys, clock)
            costs[i], faults[i] = self.pool.end_request()
        return costs, faults


class IndexEngineService:
    """SQL-flavored facade over one index page (the database victim)."""

    name = "db"

    def __init__(self, page: IndexPage):
        self.page = page
        self.pool = page.pool

    def execute(self, op, params, clock):
        if op == "insert":
            key, payload = params
            self.page.insert(key, payload, clock)
        elif op == "update":
            rec_id, payload = params
            self.page.update(rec_id, payload, clock)
        elif op == "delete":
            self.page.delete(params[0], clock)
        else:
            raise ServiceError(f"unknown db op {op!r}")


def build_services(*services):
    return {svc.name: svc for svc in services}
