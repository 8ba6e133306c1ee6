"""Remote covert channel over the deduplication side channel.

Sender and receiver hold identical large files on the victim's in-memory
file store.  Per epoch the sender re-uploads its file with bit pages either
matching the receiver's (a 1) or perturbed (a 0); after the deduplication
wait the receiver probes its own pages and classifies each bit's round-trip
samples against self-made merged and unmerged references.
"""

import hashlib

import numpy as np

from ..clock import NS_PER_S
from ..dedup_memory import PAGE_SIZE
from .. import stats


class CovertConfig:
    def __init__(self, amplification=16, requests_per_bit=7, parallel_bits=16,
                 dedup_wait_s=3.0, salt="covert"):
        if amplification < 1 or parallel_bits < 1 or requests_per_bit < 1:
            raise ValueError("covert config fields must be >= 1")
        self.amplification = amplification
        self.requests_per_bit = requests_per_bit
        self.parallel_bits = parallel_bits
        self.dedup_wait_s = dedup_wait_s
        self.salt = salt


def _bit_page(salt, epoch, bit, amp):
    seed = f"{salt}:e{epoch}:b{bit}:a{amp}".encode()
    return hashlib.shake_256(seed).digest(PAGE_SIZE)


def _perturb(page):
    return page[:-1] + bytes([page[-1] ^ 0xFF])


def bits_from_bytes(data):
    return "".join(f"{byte:08b}" for byte in data)


def bytes_from_bits(bits):
    return bytes(int(bits[i:i + 8], 2) for i in range(0, len(bits), 8))


def covert_send(surface, bits, epoch, cfg):
    """One sender upload: same page content for 1-bits, perturbed for 0-bits."""
    pages = []
    for bit_index, bit in enumerate(bits):
        for amp in range(cfg.amplification):
            page = _bit_page(cfg.salt, epoch, bit_index, amp)
            pages.append(page if bit == "1" else _perturb(page))
    surface.http1("pages", "store", (f"covert-snd-{cfg.salt}", pages))


def _receiver_setup(surface, epoch, cfg):
    entries = []
    for bit_index in range(cfg.parallel_bits):
        pages = [_bit_page(cfg.salt, epoch, bit_index, a)
                 for a in range(cfg.amplification)]
        entries.append((f"covert-rcv-{bit_index}", pages))
    # references the receiver fabricates itself: a never-merged page set and
    # a pair of identical sets that always merge with each other
    ref_plain = [hashlib.shake_256(f"{cfg.salt}:ref0:{epoch}:{a}".encode()).digest(PAGE_SIZE)
                 for a in range(cfg.amplification)]
    ref_merged = [hashlib.shake_256(f"{cfg.salt}:ref1:{epoch}:{a}".encode()).digest(PAGE_SIZE)
                  for a in range(cfg.amplification)]
    entries.append(("covert-ref-plain", ref_plain))
    entries.append(("covert-ref-merged-a", ref_merged))
    entries.append(("covert-ref-merged-b", ref_merged))
    for name, pages in entries:
        surface.http1("pages", "store", (name, pages))


def covert_receive(surface, epoch, cfg, box=None):
    """Probe each bit's pages and classify against the references."""
    names = [f"covert-rcv-{i}" for i in range(cfg.parallel_bits)]
    per_bit = [[] for _ in range(cfg.parallel_bits)]
    ref_plain, ref_merged = [], []
    for _ in range(cfg.requests_per_bit):
        surface.wait(cfg.dedup_wait_s)
        for i, name in enumerate(names):
            per_bit[i].append(surface.http1("pages", "rewrite_same", (name,)))
        ref_plain.append(surface.http1("pages", "rewrite_same", ("covert-ref-plain",)))
        ref_merged.append(surface.http1("pages", "rewrite_same", ("covert-ref-merged-a",)))
    bits = []
    plain = stats.SampleSet(ref_plain, "reference plain")
    merged = stats.SampleSet(ref_merged, "reference merged")
    for i in range(cfg.parallel_bits):
        observed = stats.SampleSet(per_bit[i], f"bit {i}")
        above_plain = stats.box_test(observed, plain, box) == stats.A_GREATER
        below_merged = stats.box_test(merged, observed, box) == stats.A_GREATER
        if above_plain and not below_merged:
            bits.append("1")
        elif below_merged and not above_plain:
            bits.append("0")
        else:
            # ambiguous even against both references
            bits.append("1" if above_plain else ("0" if below_merged else "?"))
    return "".join(bits)


def run_covert_trial(surface, secret, cfg, box=None):
    """Transmit secret bytes in parallel-bit epochs; returns decode stats."""
    bits = bits_from_bytes(secret)
    if len(bits) % cfg.parallel_bits:
        raise ValueError("secret bits must divide into parallel epochs")
    decoded = []
    for epoch in range(len(bits) // cfg.parallel_bits):
        chunk = bits[epoch * cfg.parallel_bits:(epoch + 1) * cfg.parallel_bits]
        _receiver_setup(surface, epoch, cfg)
        covert_send(surface, chunk, epoch, cfg)
        decoded.append(covert_receive(surface, epoch, cfg, box))
    decoded_bits = "".join(decoded)
    errors = sum(1 for a, b in zip(bits, decoded_bits) if a != b)
    elapsed_s = surface.elapsed_s
    return {
        "sent_bits": bits,
        "decoded_bits": decoded_bits,
        "bit_errors": errors,
        "bit_error_rate": errors / len(bits),
        "erasures": decoded_bits.count("?"),
        "sim_time_s": elapsed_s,
        "throughput_bytes_per_hour": (len(bits) / 8.0) * 3600.0 / elapsed_s,
    }


def estimate_covert_throughput(cfg, pacing_s, upload_requests=None,
                               wait_override_s=None):
    """Wait-bound throughput arithmetic for configurations that are not run
    live (for example the 15-minute page-combining scan period)."""
    wait = wait_override_s if wait_override_s is not None else cfg.dedup_wait_s
    uploads = upload_requests if upload_requests is not None else cfg.parallel_bits + 1
    probes_per_round = cfg.parallel_bits + 2
    epoch_s = uploads * pacing_s + cfg.requests_per_bit * (wait + probes_per_round * pacing_s)
    return (cfg.parallel_bits / 8.0) * 3600.0 / epoch_s
