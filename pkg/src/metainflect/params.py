"""Named, shape-checked parameter collections and the checkpoint file format.

A ParamSet is an immutable mapping name -> float64 array. Updates produce new
ParamSets; the arrays themselves are marked read-only so a stale handle can
never observe an in-place change (the meta-training outer loop relies on
keeping the pre-adaptation parameters intact).

Checkpoint layout: one UTF-8 JSON header line (model kind, array names and
shapes, vocabulary hash, config hash, seed), then the raw little-endian
float64 payloads concatenated in header order.
"""

from __future__ import annotations

import json
from collections.abc import Mapping

import numpy as np

from .autodiff import Array, GradientMap


def _freeze(arr) -> Array:
    out = np.array(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


class ParamSet(Mapping):
    """Immutable name -> array mapping with shape bookkeeping."""

    __slots__ = ("_arrays",)

    def __init__(self, arrays: Mapping[str, Array]):
        self._arrays = {name: _freeze(a) for name, a in arrays.items()}

    def __getitem__(self, name: str) -> Array:
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: a.shape for name, a in self._arrays.items()}

    def updated(self, changes: Mapping[str, Array]) -> "ParamSet":
        """New ParamSet with some arrays replaced; shapes must be preserved."""
        merged = dict(self._arrays)
        for name, arr in changes.items():
            if name not in merged:
                raise KeyError(f"unknown parameter {name!r}")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != merged[name].shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {merged[name].shape}"
                )
            merged[name] = arr
        return ParamSet(merged)

    def n_scalars(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def allclose(self, other: "ParamSet", atol=0.0, rtol=0.0) -> bool:
        if set(self) != set(other):
            return False
        return all(np.allclose(self[n], other[n], atol=atol, rtol=rtol) for n in self)

    def __repr__(self):
        return f"ParamSet({len(self._arrays)} tensors, {self.n_scalars()} scalars)"


def init_uniform(shapes: Mapping[str, tuple], seed: int, scale: float = 0.1) -> ParamSet:
    """Uniform [-scale, scale] initialization, drawn in name order for determinism."""
    rng = np.random.default_rng(seed)
    return ParamSet({name: rng.uniform(-scale, scale, size=shape) for name, shape in shapes.items()})


def check_grads(params: ParamSet, grads: GradientMap) -> None:
    if set(grads) != set(params):
        missing = set(params) ^ set(grads)
        raise ValueError(f"gradient keys do not match parameters: {sorted(missing)}")
    for name in params:
        if np.shape(grads[name]) != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")


def sgd_step(params: ParamSet, grads: GradientMap, eta: float) -> ParamSet:
    """One plain gradient-descent step; pure, inputs untouched."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    check_grads(params, grads)
    return ParamSet({name: params[name] - eta * grads[name] for name in params})


def global_norm(grads: GradientMap) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g)))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: GradientMap, max_norm: float) -> GradientMap:
    """Rescale all gradients jointly so their global L2 norm is at most max_norm."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}


# ---------------------------------------------------------------------------
# checkpoint format

_MAGIC = "metainflect-checkpoint-v1"


def save_checkpoint(path, params: ParamSet, *, kind: str, vocab_hash: str,
                    config_hash: str, seed: int, extra: dict | None = None) -> None:
    header = {
        "format": _MAGIC,
        "kind": kind,
        "vocab_hash": vocab_hash,
        "config_hash": config_hash,
        "seed": int(seed),
        "arrays": [{"name": name, "shape": list(params[name].shape)} for name in params],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(b"\n")
        for name in params:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise ValueError(f"not a checkpoint file: {path}") from err
        if header.get("format") != _MAGIC:
            raise ValueError(f"unrecognized checkpoint format in {path}")
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"truncated checkpoint payload in {path}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape)
        if fh.read(1):
            raise ValueError(f"trailing bytes after checkpoint payload in {path}")
    return ParamSet(arrays), header
