"""Per-task batch-norm statistics: capture, plug, and the on-disk bank.

A snapshot holds copies of every BN layer's running mean and variance plus a
fingerprint of the frozen model's trainable parameters. Plugging swaps only
those two buffers into the model, which is why re-plugging an earlier task's
snapshot restores that task's behaviour exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import Reader, Writer
from .errors import FormatError, StructureError, WrongModelError
from .tensor_nn import Model

BANK_MAGIC = b"DISCSTAT"
BANK_VERSION = 1


@dataclass(frozen=True)
class StatsEntry:
    layer_key: str
    mean: np.ndarray
    var: np.ndarray

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class StatsSnapshot:
    task_id: str
    entries: tuple[StatsEntry, ...]
    model_fingerprint: int
    # adaptation batches used and a short provenance note
    batches: int = 0
    source: str = ""

    @property
    def meta(self) -> dict:
        return {"batches": self.batches, "source": self.source}

    def same_stats(self, other: StatsSnapshot) -> bool:
        return len(self.entries) == len(other.entries) and all(
            a.layer_key == b.layer_key
            and np.array_equal(a.mean, b.mean)
            and np.array_equal(a.var, b.var)
            for a, b in zip(self.entries, other.entries)
        )


def _frozen_copy(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float32, copy=True)
    out.flags.writeable = False
    return out


def capture(model: Model, task_id: str, *, batches: int = 0, source: str = "capture") -> StatsSnapshot:
    layers = model.bn_layers
    if not layers:
        raise StructureError("model has no batch-norm layers to capture")
    entries = tuple(
        StatsEntry(
            layer.key,
            _frozen_copy(model.buffers[layer.pkey("running_mean")]),
            _frozen_copy(model.buffers[layer.pkey("running_var")]),
        )
        for layer in layers
    )
    return StatsSnapshot(task_id, entries, model.parameter_fingerprint(), batches, source)


def plug(model: Model, snapshot: StatsSnapshot, *, fingerprint: int | None = None) -> Model:
    """Replace the model's BN running statistics with ``snapshot``'s, in place.

    ``fingerprint`` may be passed by callers that already know the model's
    parameter fingerprint (it is recomputed otherwise).
    """
    layers = model.bn_layers
    keys = [l.key for l in layers]
    if keys != [e.layer_key for e in snapshot.entries]:
        raise StructureError(
            f"snapshot layers {[e.layer_key for e in snapshot.entries]} do not match model layers {keys}"
        )
    for layer, entry in zip(layers, snapshot.entries):
        if entry.channels != layer.channels:
            raise StructureError(f"{entry.layer_key}: snapshot has {entry.channels} channels, layer has {layer.channels}")
    fp = model.parameter_fingerprint() if fingerprint is None else fingerprint
    if fp != snapshot.model_fingerprint:
        raise WrongModelError(
            f"snapshot {snapshot.task_id!r} was captured from model {snapshot.model_fingerprint:016x}, "
            f"not {fp:016x}"
        )
    dtype = model.dtype
    for layer, entry in zip(layers, snapshot.entries):
        model.buffers[layer.pkey("running_mean")] = entry.mean.astype(dtype, copy=True)
        model.buffers[layer.pkey("running_var")] = entry.var.astype(dtype, copy=True)
    return model


@dataclass
class StatsBank:
    snapshots: dict[str, StatsSnapshot] = field(default_factory=dict)

    @property
    def fingerprint(self) -> int | None:
        return next(iter(self.snapshots.values())).model_fingerprint if self.snapshots else None

    def add(self, snapshot: StatsSnapshot, *, replace: bool = False) -> None:
        if snapshot.task_id in self.snapshots and not replace:
            raise StructureError(f"bank already holds task {snapshot.task_id!r}")
        others = [s for t, s in self.snapshots.items() if t != snapshot.task_id]
        if others and others[0].model_fingerprint != snapshot.model_fingerprint:
            raise WrongModelError(f"snapshot {snapshot.task_id!r} comes from a different model than the bank")
        self.snapshots[snapshot.task_id] = snapshot

    def __getitem__(self, task_id: str) -> StatsSnapshot:
        try:
            return self.snapshots[task_id]
        except KeyError:
            raise KeyError(f"no statistics stored for task {task_id!r}") from None

    def __contains__(self, task_id) -> bool:
        return task_id in self.snapshots

    def __len__(self) -> int:
        return len(self.snapshots)

    @property
    def task_ids(self) -> list[str]:
        return list(self.snapshots)

    def to_bytes(self) -> bytes:
        return bank_to_bytes(self)


def bank_to_bytes(bank: StatsBank) -> bytes:
    w = Writer()
    w.raw(BANK_MAGIC)
    w.u16(BANK_VERSION)
    w.u64(bank.fingerprint or 0)
    w.u16(len(bank))
    for snap in bank.snapshots.values():
        w.text(snap.task_id)
        w.u16(len(snap.entries))
        for e in snap.entries:
            w.text(e.layer_key)
            w.u32(e.channels)
            w.f32_array(e.mean)
            w.f32_array(e.var)
        # meta block
        w.u32(snap.batches)
        w.text(snap.source)
    return w.getvalue()


def bank_from_bytes(data: bytes) -> StatsBank:
    r = Reader(data)
    r.expect_magic(BANK_MAGIC)
    at = r.offset
    if (v := r.u16()) != BANK_VERSION:
        raise FormatError(f"unsupported bank version {v}", at)
    fingerprint = r.u64()
    bank = StatsBank()
    for _ in range(r.u16()):
        at = r.offset
        task_id = r.text()
        if task_id in bank:
            raise FormatError(f"duplicate task id {task_id!r}", at)
        entries = []
        for _ in range(r.u16()):
            key = r.text()
            channels = r.u32()
            mean = _frozen_copy(r.f32_array(channels))
            at = r.offset
            var = _frozen_copy(r.f32_array(channels))
            if np.any(var < 0):
                raise FormatError(f"negative variance in {task_id}/{key}", at)
            entries.append(StatsEntry(key, mean, var))
        batches = r.u32()
        source = r.text()
        bank.snapshots[task_id] = StatsSnapshot(task_id, tuple(entries), fingerprint, batches, source)
    r.expect_end()
    return bank


def save_bank(bank: StatsBank, path) -> None:
    Path(path).write_bytes(bank_to_bytes(bank))


def load_bank(path) -> StatsBank:
    return bank_from_bytes(Path(path).read_bytes())
