"""On-disk FRF cache, content-addressed by model and grid digests.

Subsystem responses are expensive and operating-point sweeps reuse them
unchanged, so sweeps store each subsystem's FRF once under a key derived
from the matrix content (or source file bytes), the port maps and the
frequency grid.  Any change to an ingredient changes the key; stale data
can never be returned.  Writes are atomic (write to a temp file, then
rename), which makes concurrent processes sharing a cache directory safe.
"""

import hashlib
import os
import tempfile
from pathlib import Path

import numpy as np

from .core import FrfSweep


def digest_bytes(*chunks):
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()


def digest_file(path):
    return digest_bytes(Path(path).read_bytes())


def digest_sparse(mat):
    """Canonical digest of a sparse matrix's structure and values."""
    csr = mat.tocsr()
    csr.sort_indices()
    return digest_bytes(
        repr(csr.shape).encode(),
        csr.indptr.tobytes(),
        csr.indices.tobytes(),
        csr.data.tobytes(),
    )


def digest_array(arr):
    a = np.ascontiguousarray(arr)
    return digest_bytes(repr(a.shape).encode(), str(a.dtype).encode(), a.tobytes())


def system_digest(sys, extra=()):
    """Digest of a second-order system: matrices, port maps, labels."""
    parts = [
        digest_sparse(sys.M).encode(),
        digest_sparse(sys.D).encode(),
        digest_sparse(sys.K).encode(),
        repr(sys.input_map).encode(),
        repr(sys.output_map).encode(),
        repr(sys.input_labels).encode(),
        repr(sys.output_labels).encode(),
    ]
    parts.extend(str(e).encode() for e in extra)
    return digest_bytes(*parts)


class FrfCache:
    """Directory-backed store of FrfSweep payloads with hit/miss counters."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self.evaluations = 0

    def key(self, subsystem_digest, omega):
        omega = np.asarray(omega, dtype=np.float64)
        return digest_bytes(subsystem_digest.encode(), omega.tobytes())

    def _path(self, key):
        return self.root / f"{key}.npz"

    def load(self, key):
        path = self._path(key)
        if not path.exists():
            return None
        with np.load(path, allow_pickle=False) as payload:
            sweep = FrfSweep(
                payload["frequencies"],
                payload["data"],
                tuple(payload["input_labels"]),
                tuple(payload["output_labels"]),
            )
        return sweep

    def store(self, key, sweep):
        path = self._path(key)
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.savez(
                    fh,
                    frequencies=sweep.frequencies,
                    data=sweep.data,
                    input_labels=np.array(sweep.input_labels),
                    output_labels=np.array(sweep.output_labels),
                )
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def get_or_compute(self, subsystem_digest, omega, compute):
        """Return the cached sweep for (digest, grid) or compute and store it."""
        key = self.key(subsystem_digest, omega)
        cached = self.load(key)
        if cached is not None:
            self.hits += 1
            return cached
        self.misses += 1
        self.evaluations += 1
        sweep = compute()
        self.store(key, sweep)
        return sweep

    @property
    def stats(self):
        return {"hits": self.hits, "misses": self.misses,
                "evaluations": self.evaluations}
