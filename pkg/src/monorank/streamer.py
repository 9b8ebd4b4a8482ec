"""Dual-layer sliding window over per-layer weight files.

Two byte buffers sized to one layer are allocated up front.  While the caller
computes with layer ``i`` in one buffer, a background thread reads layer
``i + 1`` into the other.  Releasing layer ``i`` immediately queues layer
``i + 2`` into the freed buffer.  Layers must be acquired in ascending order.
"""
import enum
import queue
import threading
import time

import numpy as np

from .errors import ContractError, LayerLoadError
from .ledger import LAYER_BUFFERS, MemoryLedger
from .store import load_all_layers, read_layer_into, read_manifest


class BufferStatus(enum.Enum):
    EMPTY = "empty"
    LOADING = "loading"
    READY = "ready"
    IN_USE = "in_use"


class WeightStreamer:
    """Owns the two layer buffers and the prefetch thread.

    ``delay`` is an optional fault-injection hook: a number of seconds, or a
    callable ``layer_index -> seconds``, slept by the prefetch thread before
    each read.  ``recorder`` receives every read (see :class:`~monorank.store.IORecorder`).
    """

    def __init__(self, model_dir, start_layer=0, *, manifest=None, ledger=None,
                 recorder=None, delay=None):
        self.model_dir = model_dir
        self.manifest = manifest if manifest is not None else read_manifest(model_dir)
        n = self.manifest.n_layers
        if not isinstance(start_layer, int) or not 0 <= start_layer < n:
            raise ContractError(f"start_layer {start_layer} outside [0, {n})")
        self.ledger = ledger if ledger is not None else MemoryLedger()
        self.recorder = recorder
        self._delay = delay
        nbytes = self.manifest.layer_nbytes
        self._buffers = [np.empty(nbytes, dtype=np.uint8) for _ in range(2)]
        self._status = [BufferStatus.EMPTY, BufferStatus.EMPTY]
        self._layer = [None, None]
        self._weights = [None, None]
        self._cond = threading.Condition()
        self._queue = queue.Queue()
        self._stop = threading.Event()
        self._error = None
        self._closed = False
        self.next_expected = start_layer
        self.wait_seconds = 0.0

        self._thread = threading.Thread(target=self._run, name="weight-prefetch", daemon=True)
        self._thread.start()
        self._schedule(0, start_layer)
        if start_layer + 1 < n:
            self._schedule(1, start_layer + 1)

    @property
    def n_layers(self):
        return self.manifest.n_layers

    def status(self):
        with self._cond:
            return [(s, l) for s, l in zip(self._status, self._layer)]

    def _schedule(self, slot, layer):
        with self._cond:
            self._status[slot] = BufferStatus.LOADING
            self._layer[slot] = layer
        self.ledger.acquire(LAYER_BUFFERS, 1, self.manifest.layer_nbytes)
        self._queue.put((slot, layer))

    def _injected_delay(self, layer):
        if self._delay is None:
            return 0.0
        return float(self._delay(layer) if callable(self._delay) else self._delay)

    def _run(self):
        while True:
            item = self._queue.get()
            if item is None or self._stop.is_set():
                return
            slot, layer = item
            try:
                pause = self._injected_delay(layer)
                if pause > 0 and self._stop.wait(pause):
                    return
                weights = read_layer_into(
                    self.model_dir, self.manifest, layer, self._buffers[slot], self.recorder
                )
            except Exception as exc:  # noqa: BLE001 - any failure poisons the stream
                with self._cond:
                    self._error = LayerLoadError(layer, exc)
                    self._cond.notify_all()
                return
            with self._cond:
                self._weights[slot] = weights
                self._status[slot] = BufferStatus.READY
                self._cond.notify_all()

    def _slot_of(self, layer):
        for slot in (0, 1):
            if self._layer[slot] == layer and self._status[slot] is not BufferStatus.EMPTY:
                return slot
        return None

    def acquire(self, i):
        """Block until layer ``i`` is resident and return its weights.

        The returned arrays are views into a reusable buffer and are only
        valid until :meth:`release` is called for the same layer.
        """
        if self._closed:
            raise ContractError("weight stream is closed")
        if self._error is not None:
            raise self._error
        if i != self.next_expected:
            raise ContractError(f"out-of-order acquire: expected layer {self.next_expected}, got {i}")
        t0 = time.perf_counter()
        with self._cond:
            slot = self._slot_of(i)
            if slot is None:
                raise ContractError(f"layer {i} is not scheduled")
            while self._status[slot] is BufferStatus.LOADING and self._error is None:
                self._cond.wait()
            if self._status[slot] is BufferStatus.LOADING:
                raise self._error
            self._status[slot] = BufferStatus.IN_USE
            weights = self._weights[slot]
        self.wait_seconds += time.perf_counter() - t0
        self.next_expected = i + 1
        return weights

    def release(self, i):
        """Free layer ``i``'s buffer and start prefetching layer ``i + 2`` into it."""
        with self._cond:
            slot = self._slot_of(i)
            if slot is None or self._status[slot] is not BufferStatus.IN_USE:
                raise ContractError(f"release of layer {i}, which is not acquired")
            self._status[slot] = BufferStatus.EMPTY
            self._layer[slot] = None
            self._weights[slot] = None
        self.ledger.release(LAYER_BUFFERS, 1, self.manifest.layer_nbytes)
        if i + 2 < self.n_layers and self._error is None and not self._closed:
            self._schedule(slot, i + 2)

    def close(self):
        """Stop the prefetch thread and release every buffer from the ledger."""
        if self._closed:
            return
        self._closed = True
        self._stop.set()
        self._queue.put(None)
        self._thread.join()
        with self._cond:
            for slot in (0, 1):
                if self._status[slot] is not BufferStatus.EMPTY:
                    self.ledger.release(LAYER_BUFFERS, 1, self.manifest.layer_nbytes)
                    self._status[slot] = BufferStatus.EMPTY
                    self._layer[slot] = None
                    self._weights[slot] = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class PreloadedWeights:
    """All layers held in memory; same acquire/release protocol as the streamer."""

    def __init__(self, model_dir, *, manifest=None, layers=None, ledger=None):
        self.manifest = manifest if manifest is not None else read_manifest(model_dir)
        self.layers = layers if layers is not None else load_all_layers(model_dir, self.manifest)
        self.ledger = ledger if ledger is not None else MemoryLedger()
        self.next_expected = 0
        self.wait_seconds = 0.0
        self._in_use = None
        self._held = len(self.layers)
        self.ledger.acquire(LAYER_BUFFERS, self._held, self._held * self.manifest.layer_nbytes)

    @property
    def n_layers(self):
        return self.manifest.n_layers

    def acquire(self, i):
        if i != self.next_expected:
            raise ContractError(f"out-of-order acquire: expected layer {self.next_expected}, got {i}")
        self.next_expected = i + 1
        self._in_use = i
        return self.layers[i]

    def release(self, i):
        if self._in_use != i:
            raise ContractError(f"release of layer {i}, which is not acquired")
        self._in_use = None

    def close(self):
        if self._held:
            self.ledger.release(LAYER_BUFFERS, self._held, self._held * self.manifest.layer_nbytes)
            self._held = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def start_stream(model_dir, start_layer=0, **kwargs):
    return WeightStreamer(model_dir, start_layer, **kwargs)


def acquire_layer(stream, i):
    return stream.acquire(i)


def release_layer(stream, i):
    stream.release(i)
