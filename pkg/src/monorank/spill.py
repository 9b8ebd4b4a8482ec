"""Hidden-state offload: per-chunk spill files and a single background I/O worker.

Spill file layout (little-endian)::

    magic  b"MRHS"   u32 version   u32 n_candidates   u32 d_model
    n x (i64 candidate_id, u32 length)
    rows of every candidate in header order, float32

Every read, write and delete runs on one FIFO worker thread.  The compute
thread submits ``load(next chunk)`` before computing the current chunk and
``store(current chunk)`` after, so at most three chunks are resident: one
computing, one being written out, one being read in.
"""
import shutil
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import FormatError, SpillError
from .ledger import HIDDEN_CHUNKS, MemoryLedger

MAGIC = b"MRHS"
VERSION = 1
_HEAD = struct.Struct("<4sIII")
_ENTRY = struct.Struct("<qI")
FLOAT = np.dtype("<f4")


def header_nbytes(n):
    return _HEAD.size + n * _ENTRY.size


def write_chunk_file(path, ids, states):
    d = states[0].shape[1] if states else 0
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, len(ids), d))
        for cid, s in zip(ids, states):
            f.write(_ENTRY.pack(int(cid), s.shape[0]))
        for s in states:
            f.write(np.ascontiguousarray(s, dtype=FLOAT).tobytes())


def read_chunk_file(path):
    """Return ``(ids, states)`` from a spill file."""
    with open(path, "rb") as f:
        head = f.read(_HEAD.size)
        if len(head) != _HEAD.size:
            raise FormatError(f"{path}: truncated spill header")
        magic, version, n, d = _HEAD.unpack(head)
        if magic != MAGIC or version != VERSION:
            raise FormatError(f"{path}: not a spill file")
        entries = [_ENTRY.unpack(f.read(_ENTRY.size)) for _ in range(n)]
        ids, states = [], []
        for cid, length in entries:
            nbytes = length * d * FLOAT.itemsize
            data = f.read(nbytes)
            if len(data) != nbytes:
                raise FormatError(f"{path}: truncated rows for candidate {cid}")
            ids.append(cid)
            states.append(np.frombuffer(data, dtype=FLOAT).astype(np.float32).reshape(length, d))
    return ids, states


class HiddenSpill:
    """Index of where every active candidate's hidden state lives on disk."""

    def __init__(self, d_model, *, directory=None, ledger=None):
        self.d_model = d_model
        self._own_dir = directory is None
        self.dir = Path(tempfile.mkdtemp(prefix="monorank-spill-")) if directory is None else Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.ledger = ledger if ledger is not None else MemoryLedger()
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="hidden-spill")
        self._index = {}  # candidate -> (file name, offset, length)
        self._refs = {}  # file name -> live candidates not yet consumed
        self._serial = 0
        self._pending_writes = []
        self.wait_seconds = 0.0
        self._closed = False

    def _chunk_nbytes(self, states):
        return sum(s.shape[0] for s in states) * self.d_model * FLOAT.itemsize

    def _next_name(self):
        self._serial += 1
        return f"chunk_{self._serial:06d}.bin"

    def __contains__(self, cid):
        return cid in self._index

    def resident_files(self):
        return sorted(p.name for p in self.dir.glob("chunk_*.bin"))

    def store(self, chunk_index, ids, states, counted=True):
        """Queue a chunk for writing; its ledger entry is released once it is on disk."""
        name = self._next_name()
        nbytes = self._chunk_nbytes(states)
        offset = header_nbytes(len(ids))
        for cid, s in zip(ids, states):
            self._index[cid] = (name, offset, s.shape[0])
            offset += s.shape[0] * self.d_model * FLOAT.itemsize
        self._refs[name] = set(ids)
        if not counted:
            self.ledger.acquire(HIDDEN_CHUNKS, 1, nbytes)
        path = self.dir / name

        def task():
            try:
                write_chunk_file(path, ids, states)
            except Exception as exc:  # noqa: BLE001
                raise SpillError(chunk_index, exc) from exc
            finally:
                self.ledger.release(HIDDEN_CHUNKS, 1, nbytes)

        fut = self._pool.submit(task)
        self._pending_writes.append(fut)
        return fut

    def load(self, chunk_index, ids):
        """Queue a read of ``ids``; the chunk counts as resident from now on."""
        plan = [(cid, *self._index[cid]) for cid in ids]
        nbytes = sum(length for *_, length in plan) * self.d_model * FLOAT.itemsize
        self.ledger.acquire(HIDDEN_CHUNKS, 1, nbytes)
        emptied = []
        for cid, name, _, _ in plan:
            refs = self._refs[name]
            refs.discard(cid)
            if not refs:
                emptied.append(name)
                del self._refs[name]
        d = self.d_model

        def task():
            try:
                states = []
                handles = {}
                try:
                    for cid, name, offset, length in plan:
                        f = handles.get(name)
                        if f is None:
                            f = handles[name] = open(self.dir / name, "rb")
                        f.seek(offset)
                        n = length * d * FLOAT.itemsize
                        data = f.read(n)
                        if len(data) != n:
                            raise FormatError(f"{name}: short read for candidate {cid}")
                        states.append(np.frombuffer(data, dtype=FLOAT).astype(np.float32).reshape(length, d))
                finally:
                    for f in handles.values():
                        f.close()
                for name in emptied:
                    (self.dir / name).unlink(missing_ok=True)
                return states
            except Exception as exc:  # noqa: BLE001
                self.ledger.release(HIDDEN_CHUNKS, 1, nbytes)
                raise SpillError(chunk_index, exc) from exc

        return self._pool.submit(task), nbytes

    def abandon(self, future, nbytes):
        """Give back the ledger entry of a load whose states will never be stored."""
        if future.exception() is None:
            self.ledger.release(HIDDEN_CHUNKS, 1, nbytes)

    def forget(self, ids):
        """Drop pruned candidates; files left with no live candidates are deleted."""
        emptied = []
        for cid in ids:
            entry = self._index.pop(cid, None)
            if entry is None:
                continue
            refs = self._refs.get(entry[0])
            if refs is not None:
                refs.discard(cid)
                if not refs:
                    emptied.append(entry[0])
        for name in emptied:
            self._refs.pop(name, None)
            self._pool.submit((self.dir / name).unlink, missing_ok=True)

    def wait_writes(self, keep=0):
        """Block until at most ``keep`` queued writes are still outstanding."""
        while len(self._pending_writes) > keep:
            self._pending_writes.pop(0).result()

    def flush(self):
        """Wait for queued writes; re-raise the first failure."""
        pending, self._pending_writes = self._pending_writes, []
        for fut in pending:
            fut.result()

    def close(self):
        if self._closed:
            return
        self._closed = True
        self._pool.shutdown(wait=True)
        for fut in self._pending_writes:
            fut.exception()
        self._pending_writes = []
        if self._own_dir:
            shutil.rmtree(self.dir, ignore_errors=True)
        else:
            for p in self.dir.glob("chunk_*.bin"):
                p.unlink(missing_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
