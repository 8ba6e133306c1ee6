"""Randomized kernel image model: per-slot candidate pages and the offline
candidate-scanning phase over synthetic memory dumps.

The kernel text region holds 512 possible 2 MiB-aligned bases.  A candidate
page is static content plus a set of 8-byte-aligned pointer slots whose
materialized words are base-relative kernel text addresses; scanning a
synthetic dump recovers exactly the planted stable text-only pages.
"""

import hashlib

import numpy as np

from .dedup_memory import PAGE_SIZE, DedupSimError

REGION_START = 0xFFFFFFFF80000000
REGION_END = 0xFFFFFFFFC0000000
SLOT_BYTES = 2 << 20
SLOT_COUNT = 512
MODULE_REGION_START = REGION_END
MODULE_REGION_END = REGION_END + (1 << 30)


class KernelPagesError(DedupSimError):
    pass


class KernelLayout:
    def __init__(self, slot):
        if not 0 <= slot < SLOT_COUNT:
            raise KernelPagesError(f"slot {slot} outside [0, {SLOT_COUNT})")
        self.slot = int(slot)

    @property
    def base_address(self):
        return REGION_START + self.slot * SLOT_BYTES


class CandidatePage:
    """Static 4 KiB template plus pointer slots holding base-relative
    displacements into kernel text."""

    def __init__(self, page_id, template, pointer_slots):
        template = bytes(template)
        if len(template) != PAGE_SIZE:
            raise KernelPagesError("template must be one page")
        for off in pointer_slots:
            if off % 8 or not 0 <= off <= PAGE_SIZE - 8:
                raise KernelPagesError(f"pointer slot {off} misaligned or out of range")
        self.page_id = page_id
        self.template = template
        self.pointer_slots = dict(sorted(pointer_slots.items()))

    def generate(self, slot):
        if not 0 <= slot < SLOT_COUNT:
            raise KernelPagesError(f"slot {slot} outside [0, {SLOT_COUNT})")
        base = REGION_START + slot * SLOT_BYTES
        buf = bytearray(self.template)
        for off, disp in self.pointer_slots.items():
            word = base + disp
            if not REGION_START <= word < REGION_END:
                raise KernelPagesError("materialized pointer outside text region")
            buf[off:off + 8] = word.to_bytes(8, "little")
        return bytes(buf)


def generate_candidate(page, slot):
    return page.generate(slot)


def make_candidate_pages(rng, count=7, pointers_per_page=(4, 17)):
    """Synthetic stable text-only pages with seeded pointer displacements."""
    max_disp = (REGION_END - REGION_START) - (SLOT_COUNT - 1) * SLOT_BYTES - 8
    pages = []
    for i in range(count):
        template = rng.integers(0, 256, PAGE_SIZE, dtype=np.uint8).tobytes()
        n_ptr = int(rng.integers(*pointers_per_page))
        offsets = rng.choice(PAGE_SIZE // 8, size=n_ptr, replace=False) * 8
        slots = {int(off): int(rng.integers(0, max_disp + 1)) & ~7
                 for off in sorted(offsets)}
        pages.append(CandidatePage(f"kpage-{i}", template, slots))
    return pages


# -- synthetic dumps and the offline scanning phase -------------------------------

TEXT_ONLY = "resolvable-text-only"
MODULE_ADDRS = "module-addresses"
MIXED = "mixed"
NO_SYMBOLS = "no-symbols"
NO_POINTERS = "no-pointers"


class DumpCounts:
    def __init__(self, total=15737, text_only=15, module=3973, mixed=39,
                 no_symbols=43, unstable_text_only=0):
        self.total = total
        self.text_only = text_only
        self.module = module
        self.mixed = mixed
        self.no_symbols = no_symbols
        self.unstable_text_only = unstable_text_only

    @property
    def pointer_bearing(self):
        return (self.text_only + self.module + self.mixed + self.no_symbols
                + self.unstable_text_only)


class SyntheticDump:
    """One synthetic memory image per boot, with ground-truth annotations."""

    def __init__(self, boots, slots, annotations, planted_text_only):
        self.boots = boots                  # list of {page_index: bytes}
        self.slots = slots                  # kernel slot per boot
        self.annotations = annotations      # page_index -> category
        self.planted_text_only = planted_text_only  # page_index -> CandidatePage


def build_synthetic_dump(rng, counts=None, boots=2, salt="dump"):
    counts = counts or DumpCounts()
    if counts.pointer_bearing > counts.total:
        raise KernelPagesError("pointer-bearing pages exceed total")
    slots = [int(s) for s in rng.choice(SLOT_COUNT, size=boots, replace=False)]
    order = rng.permutation(counts.total)
    annotations = {}
    planted = {}
    kinds = ([TEXT_ONLY] * counts.text_only
             + ["unstable"] * counts.unstable_text_only
             + [MODULE_ADDRS] * counts.module
             + [MIXED] * counts.mixed
             + [NO_SYMBOLS] * counts.no_symbols)
    kinds += [NO_POINTERS] * (counts.total - len(kinds))
    images = [dict() for _ in range(boots)]
    max_disp = (REGION_END - REGION_START) - (SLOT_COUNT - 1) * SLOT_BYTES - 8
    for rank, idx in enumerate(order):
        idx = int(idx)
        kind = kinds[rank]
        seed = f"{salt}:{idx}".encode()
        base_bytes = bytearray(hashlib.shake_256(seed).digest(PAGE_SIZE))
        n_ptr = int(rng.integers(2, 9))
        offsets = sorted(int(o) * 8 for o in rng.choice(PAGE_SIZE // 8, n_ptr, replace=False))
        if kind in (TEXT_ONLY, "unstable"):
            page = CandidatePage(idx, bytes(base_bytes),
                                 {off: int(rng.integers(0, max_disp + 1)) & ~7
                                  for off in offsets})
            if kind == TEXT_ONLY:
                planted[idx] = page
                annotations[idx] = TEXT_ONLY
            else:
                annotations[idx] = "unstable-text-only"
            for b in range(boots):
                content = bytearray(page.generate(slots[b]))
                if kind == "unstable":
                    # boot-initialized bytes: non-pointer content varies per boot
                    noise_at = next(o for o in range(0, PAGE_SIZE - 8, 8)
                                    if o not in page.pointer_slots)
                    content[noise_at:noise_at + 8] = hashlib.sha1(
                        seed + b"boot%d" % b).digest()[:8]
                images[b][idx] = bytes(content)
            continue
        annotations[idx] = {MODULE_ADDRS: MODULE_ADDRS, MIXED: MIXED,
                            NO_SYMBOLS: NO_SYMBOLS, NO_POINTERS: NO_POINTERS}[kind]
        for b in range(boots):
            content = bytearray(base_bytes)
            if kind != NO_POINTERS:
                for j, off in enumerate(offsets):
                    if kind == MODULE_ADDRS and j == 0:
                        word = MODULE_REGION_START + (int(rng.integers(0, 1 << 24)) & ~7)
                    else:
                        word = REGION_START + slots[b] * SLOT_BYTES \
                            + (int(rng.integers(0, max_disp + 1)) & ~7)
                    content[off:off + 8] = word.to_bytes(8, "little")
                if kind in (MIXED, NO_SYMBOLS):
                    # mark trailing pointers as symbol-less in the annotation
                    pass
            images[b][idx] = bytes(content)
    return SyntheticDump(images, slots, annotations, planted)


class CandidateSet:
    def __init__(self, pages, classification_counts):
        self.pages = list(pages)
        self.classification_counts = dict(classification_counts)

    def __len__(self):
        return len(self.pages)


def _pointer_offsets(content, lo, hi):
    words = np.frombuffer(content, dtype="<u8")
    mask = (words >= lo) & (words < hi)
    return [int(i) * 8 for i in np.nonzero(mask)[0]]


def scan_for_candidates(dump):
    """Offline phase: classify dump pages and keep stable text-only ones.

    A page qualifies when every pointer word lies in the text region with a
    resolvable symbol annotation and all remaining bytes are identical
    across boots while the pointers move consistently with the slot delta.
    """
    if len(dump.boots) < 2:
        raise KernelPagesError("stability filtering needs at least two boots")
    counts = {TEXT_ONLY: 0, MODULE_ADDRS: 0, MIXED: 0, NO_SYMBOLS: 0,
              NO_POINTERS: 0, "filtered-unstable": 0}
    first, slots = dump.boots[0], dump.slots
    recovered = []
    for idx in sorted(first):
        content = first[idx]
        text_ptrs = _pointer_offsets(content, REGION_START, REGION_END)
        module_ptrs = _pointer_offsets(content, MODULE_REGION_START, MODULE_REGION_END)
        annotation = dump.annotations[idx]
        if not text_ptrs and not module_ptrs:
            counts[NO_POINTERS] += 1
            continue
        if module_ptrs:
            counts[MODULE_ADDRS] += 1
            continue
        if annotation == MIXED:
            counts[MIXED] += 1
            continue
        if annotation == NO_SYMBOLS:
            counts[NO_SYMBOLS] += 1
            continue
        # stability across boots: pointers shift by the slot delta, the rest
        # of the page stays byte-identical
        stable = True
        for b in range(1, len(dump.boots)):
            other = dump.boots[b][idx]
            delta = (slots[b] - slots[0]) * SLOT_BYTES
            for off in range(0, PAGE_SIZE, 8):
                w0 = int.from_bytes(content[off:off + 8], "little")
                wb = int.from_bytes(other[off:off + 8], "little")
                if off in text_ptrs:
                    if wb - w0 != delta:
                        stable = False
                        break
                elif w0 != wb:
                    stable = False
                    break
            if not stable:
                break
        if not stable:
            counts["filtered-unstable"] += 1
            continue
        counts[TEXT_ONLY] += 1
        base = REGION_START + slots[0] * SLOT_BYTES
        template = bytearray(content)
        pointer_slots = {}
        for off in text_ptrs:
            word = int.from_bytes(content[off:off + 8], "little")
            pointer_slots[off] = word - base
            template[off:off + 8] = b"\x00" * 8
        recovered.append(CandidatePage(idx, bytes(template), pointer_slots))
    return CandidateSet(recovered, counts)


def install_victim_kernel(pool, candidate_set, layout, clock, owner="kernel"):
    """Map the true-slot materialization of every candidate page."""
    if not candidate_set.pages:
        raise KernelPagesError("candidate set is empty")
    mappings = []
    for page in candidate_set.pages:
        mappings.append(pool.map_page(owner, page.generate(layout.slot), mergeable=True))
    return mappings


# -- candidate-set file format ------------------------------------------------------


def save_candidate_set(candidate_set, path):
    with open(path, "w") as fh:
        for page in candidate_set.pages:
            offs = ",".join(str(o) for o in page.pointer_slots)
            fh.write(f"{page.page_id}: {offs}\n")
            stored = bytearray(page.template)
            for off, disp in page.pointer_slots.items():
                stored[off:off + 8] = int(disp).to_bytes(8, "little")
            fh.write(stored.hex() + "\n")


def load_candidate_set(path):
    pages = []
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if len(lines) % 2:
        raise KernelPagesError("candidate-set file truncated")
    for i in range(0, len(lines), 2):
        head, hexblock = lines[i], lines[i + 1]
        page_id, _, offs = head.partition(":")
        stored = bytearray.fromhex(hexblock)
        if len(stored) != PAGE_SIZE:
            raise KernelPagesError("candidate template must be one page")
        pointer_slots = {}
        for tok in offs.split(","):
            tok = tok.strip()
            if not tok:
                continue
            off = int(tok)
            pointer_slots[off] = int.from_bytes(stored[off:off + 8], "little")
            stored[off:off + 8] = b"\x00" * 8
        pages.append(CandidatePage(page_id.strip(), bytes(stored), pointer_slots))
    return CandidateSet(pages, {})
