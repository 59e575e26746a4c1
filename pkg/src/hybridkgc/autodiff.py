"""Minimal dense reverse-mode automatic differentiation on 2-D float64 arrays.

A Tape records nodes in creation order (which is already topological); each
node caches its forward value and a closure that scatters the output gradient
to its tensor parents. Binary ops accept plain numpy arrays as constants:
gradients only flow into Tensor operands. No general broadcasting; the few
shape rules supported are stated per op.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

CHECKPOINT_MAGIC = b"HKGC"
CHECKPOINT_VERSION = 1


class Tensor:
    __slots__ = ("data", "grad", "name", "_parents", "_backward")

    def __init__(self, data: np.ndarray, name: str | None = None) -> None:
        self.data = data
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor{tag} {self.data.shape[0]}x{self.data.shape[1]}>"


def _value(x: "Tensor | np.ndarray") -> np.ndarray:
    return x.data if isinstance(x, Tensor) else x


def _check_2d(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{what} must be 2-D, got shape {arr.shape}")
    return arr


class Tape:
    """Records the computation; finite values are enforced after every op."""

    def __init__(self, check_finite: bool = True) -> None:
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite
        self._named: dict[str, Tensor] = {}

    # -- node plumbing ------------------------------------------------------

    def _register(
        self,
        data: np.ndarray,
        parents: tuple[Tensor, ...],
        backward: Callable[[np.ndarray], None] | None,
        name: str | None = None,
    ) -> Tensor:
        if self.check_finite and not np.isfinite(data).all():
            raise FloatingPointError("non-finite value produced on the tape")
        node = Tensor(data, name)
        node._parents = parents
        node._backward = backward
        self.nodes.append(node)
        return node

    def leaf(self, array: np.ndarray, name: str | None = None) -> Tensor:
        """A gradient-carrying input; named leaves must be unique per tape."""
        arr = _check_2d(array, "leaf")
        if name is not None:
            if name in self._named:
                raise ValueError(f"duplicate leaf name {name!r} on one tape")
        node = self._register(arr, (), None, name)
        if name is not None:
            self._named[name] = node
        return node

    # -- ops ----------------------------------------------------------------

    def matmul(self, a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> Tensor:
        av, bv = _check_2d(_value(a), "matmul lhs"), _check_2d(_value(b), "matmul rhs")
        if av.shape[1] != bv.shape[0]:
            raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
        out = av @ bv
        parents = tuple(x for x in (a, b) if isinstance(x, Tensor))

        def backward(g: np.ndarray) -> None:
            if isinstance(a, Tensor):
                _accum(a, g @ bv.T)
            if isinstance(b, Tensor):
                _accum(b, av.T @ g)

        return self._register(out, parents, backward)

    def add(self, a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> Tensor:
        """Elementwise sum; the rhs may also be a (1, cols) row vector."""
        av, bv = _check_2d(_value(a), "add lhs"), _check_2d(_value(b), "add rhs")
        row_broadcast = bv.shape == (1, av.shape[1]) and av.shape[0] != 1
        if not row_broadcast and av.shape != bv.shape:
            raise ValueError(f"add shape mismatch {av.shape} + {bv.shape}")
        out = av + bv
        parents = tuple(x for x in (a, b) if isinstance(x, Tensor))

        def backward(g: np.ndarray) -> None:
            if isinstance(a, Tensor):
                _accum(a, g)
            if isinstance(b, Tensor):
                _accum(b, g.sum(axis=0, keepdims=True) if row_broadcast else g)

        return self._register(out, parents, backward)

    def hadamard(self, a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> Tensor:
        av, bv = _check_2d(_value(a), "hadamard lhs"), _check_2d(_value(b), "hadamard rhs")
        if av.shape != bv.shape:
            raise ValueError(f"hadamard shape mismatch {av.shape} * {bv.shape}")
        out = av * bv
        parents = tuple(x for x in (a, b) if isinstance(x, Tensor))

        def backward(g: np.ndarray) -> None:
            if isinstance(a, Tensor):
                _accum(a, g * bv)
            if isinstance(b, Tensor):
                _accum(b, g * av)

        return self._register(out, parents, backward)

    def scale_rows(self, a: Tensor | np.ndarray, s: Tensor | np.ndarray) -> Tensor:
        """Multiply row i of `a` by scalar s[i, 0]."""
        av, sv = _check_2d(_value(a), "scale_rows input"), _check_2d(_value(s), "scale_rows scale")
        if sv.shape != (av.shape[0], 1):
            raise ValueError(f"scale_rows needs ({av.shape[0]}, 1) scales, got {sv.shape}")
        out = av * sv
        parents = tuple(x for x in (a, s) if isinstance(x, Tensor))

        def backward(g: np.ndarray) -> None:
            if isinstance(a, Tensor):
                _accum(a, g * sv)
            if isinstance(s, Tensor):
                _accum(s, (g * av).sum(axis=1, keepdims=True))

        return self._register(out, parents, backward)

    def scalar_mul(self, a: Tensor, c: float) -> Tensor:
        out = a.data * float(c)

        def backward(g: np.ndarray) -> None:
            _accum(a, g * float(c))

        return self._register(out, (a,), backward)

    def sigmoid(self, a: Tensor) -> Tensor:
        z = a.data
        out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.clip(z, 0, None))),
                       np.exp(np.clip(z, None, 0)) / (1.0 + np.exp(np.clip(z, None, 0))))

        def backward(g: np.ndarray) -> None:
            _accum(a, g * out * (1.0 - out))

        return self._register(out, (a,), backward)

    def relu(self, a: Tensor) -> Tensor:
        out = np.maximum(a.data, 0.0)

        def backward(g: np.ndarray) -> None:
            _accum(a, g * (a.data > 0))

        return self._register(out, (a,), backward)

    def concat_cols(self, a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> Tensor:
        av, bv = _check_2d(_value(a), "concat lhs"), _check_2d(_value(b), "concat rhs")
        if av.shape[0] != bv.shape[0]:
            raise ValueError(f"concat_cols row mismatch {av.shape} | {bv.shape}")
        out = np.concatenate([av, bv], axis=1)
        split = av.shape[1]
        parents = tuple(x for x in (a, b) if isinstance(x, Tensor))

        def backward(g: np.ndarray) -> None:
            if isinstance(a, Tensor):
                _accum(a, g[:, :split])
            if isinstance(b, Tensor):
                _accum(b, g[:, split:])

        return self._register(out, parents, backward)

    def slice_cols(self, a: Tensor, start: int, stop: int) -> Tensor:
        if not 0 <= start < stop <= a.data.shape[1]:
            raise ValueError(f"bad column slice [{start}:{stop}] of {a.data.shape}")
        out = a.data[:, start:stop].copy()

        def backward(g: np.ndarray) -> None:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            _accum(a, full)

        return self._register(out, (a,), backward)

    def gather_rows(self, a: Tensor, index: np.ndarray) -> Tensor:
        idx = np.asarray(index, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
            raise IndexError("gather_rows index out of range")
        out = a.data[idx]

        def backward(g: np.ndarray) -> None:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full)

        return self._register(out, (a,), backward)

    def segment_sum(self, a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
        seg = np.asarray(segments, dtype=np.int64).ravel()
        if seg.size != a.data.shape[0]:
            raise ValueError("segment ids must match the number of rows")
        if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
            raise IndexError("segment id out of range")
        out = np.zeros((num_segments, a.data.shape[1]))
        np.add.at(out, seg, a.data)

        def backward(g: np.ndarray) -> None:
            _accum(a, g[seg])

        return self._register(out, (a,), backward)

    def segment_max(self, a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
        """Per-segment columnwise max; empty segments yield 0, ties route the
        gradient to the first row attaining the max."""
        seg = np.asarray(segments, dtype=np.int64).ravel()
        if seg.size != a.data.shape[0]:
            raise ValueError("segment ids must match the number of rows")
        if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
            raise IndexError("segment id out of range")
        cols = a.data.shape[1]
        out = np.full((num_segments, cols), -np.inf)
        np.maximum.at(out, seg, a.data)
        empty = ~np.isin(np.arange(num_segments), seg)
        out[empty] = 0.0

        def backward(g: np.ndarray) -> None:
            grad = np.zeros_like(a.data)
            taken = np.zeros((num_segments, cols), dtype=bool)
            for row in range(a.data.shape[0]):
                s = seg[row]
                hit = (a.data[row] == out[s]) & ~taken[s]
                grad[row][hit] = g[s][hit]
                taken[s] |= hit
            _accum(a, grad)

        return self._register(out, (a,), backward)

    def mean_all(self, a: Tensor) -> Tensor:
        out = np.array([[a.data.mean()]])
        size = a.data.size

        def backward(g: np.ndarray) -> None:
            _accum(a, np.full_like(a.data, g[0, 0] / size))

        return self._register(out, (a,), backward)

    def bce_with_logits(self, logits: Tensor, targets: np.ndarray) -> Tensor:
        """Mean binary cross-entropy from logits, numerically stable.

        Uses max(z, 0) - z*y + log1p(exp(-|z|)), so extreme logits neither
        overflow nor produce NaN.
        """
        y = _check_2d(np.asarray(targets, dtype=np.float64), "bce targets")
        z = logits.data
        if z.shape != y.shape:
            raise ValueError(f"bce shape mismatch {z.shape} vs {y.shape}")
        loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        out = np.array([[loss.mean()]])
        n = z.size

        def backward(g: np.ndarray) -> None:
            sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.clip(z, 0, None))),
                           np.exp(np.clip(z, None, 0)) / (1.0 + np.exp(np.clip(z, None, 0))))
            _accum(logits, g[0, 0] * (sig - y) / n)

        return self._register(out, (logits,), backward)


def _accum(node: Tensor, grad: np.ndarray) -> None:
    if node.grad is None:
        node.grad = grad.copy() if grad.base is not None else grad
    else:
        node.grad = node.grad + grad


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from `loss`; returns gradients of named leaves.

    Leaves that never influenced the loss are reported with zero gradient.
    """
    if loss.data.shape != (1, 1):
        raise ValueError("backward expects a scalar (1, 1) loss node")
    if loss not in tape.nodes:
        raise ValueError("loss node does not belong to this tape")
    loss.grad = np.ones((1, 1))
    start = tape.nodes.index(loss)
    for node in reversed(tape.nodes[: start + 1]):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    out = {}
    for name, node in tape._named.items():
        out[name] = node.grad if node.grad is not None else np.zeros_like(node.data)
    return out


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints


class ParamStore:
    """Named float64 parameter matrices with deterministic initializers."""

    def __init__(self) -> None:
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray) -> np.ndarray:
        if name in self._arrays:
            raise ValueError(f"parameter {name!r} already exists")
        self._arrays[name] = _check_2d(array, f"parameter {name!r}").copy()
        return self._arrays[name]

    def xavier(self, name: str, rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
        bound = np.sqrt(6.0 / (rows + cols))
        return self.add(name, rng.uniform(-bound, bound, size=(rows, cols)))

    def zeros(self, name: str, rows: int, cols: int) -> np.ndarray:
        return self.add(name, np.zeros((rows, cols)))

    def normal(
        self, name: str, rows: int, cols: int, rng: np.random.Generator, std: float = 0.1
    ) -> np.ndarray:
        return self.add(name, rng.normal(0.0, std, size=(rows, cols)))

    def tensor(self, tape: Tape, name: str) -> Tensor:
        return tape.leaf(self._arrays[name], name)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array: np.ndarray) -> None:
        expected = self._arrays[name].shape
        arr = _check_2d(array, f"parameter {name!r}")
        if arr.shape != expected:
            raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {expected}")
        self._arrays[name] = arr.copy()

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name, arr in self._arrays.items():
            dup.add(name, arr)
        return dup


class Adam:
    """Adam with bias correction; moments and step counter live here."""

    def __init__(
        self,
        store: ParamStore,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(arr) for name, arr in store.items()}
        self.v = {name: np.zeros_like(arr) for name, arr in store.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        """One update; parameters missing from `grads` get zero gradient."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, arr in self.store.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(arr)
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def save_checkpoint(path: Path | str, store: ParamStore, meta: dict | None = None) -> None:
    """Binary checkpoint: named tensors, shapes, little-endian float64 payload."""
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(store.names())))
        for name, arr in store.items():
            blob = name.encode("utf-8")
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: Path | str) -> tuple[ParamStore, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        store = ParamStore()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            rows, cols = struct.unpack("<II", fh.read(8))
            data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8").reshape(rows, cols)
            store.add(name, data.astype(np.float64))
    return store, meta
