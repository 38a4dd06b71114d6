"""MLP classifier with an expandable output head and frozen snapshots.

Checkpoint layout (all integers little-endian)::

    offset 0   8 bytes   magic b"CLDKCKPT"
    offset 8   u32       format version (1)
    offset 12  u32       metadata length M
    offset 16  M bytes   UTF-8 JSON metadata (in_dim, hidden_dims,
                         cosine_head, class_registry, tensor names)
    then       u32       tensor count N
    then       N entries of: u32 ndim, ndim x u32 dims   (shape table)
    then       N blocks of float64 little-endian values in row-major order
"""

from __future__ import annotations

import copy
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError, UsageError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"CLDKCKPT"
CHECKPOINT_VERSION = 1


class MLPClassifier:
    """``head(encoder(x))`` where the encoder is a stack of affine+ReLU layers.

    The head starts with zero columns and grows through :meth:`expand_head`.
    With ``cosine_head`` the logits are ``scale * <x/|x|, w_j/|w_j|>`` with a
    learnable scalar ``scale`` and no bias.
    """

    def __init__(
        self,
        in_dim: int,
        hidden_dims: Sequence[int],
        cosine_head: bool = False,
        cosine_scale: float = 10.0,
        seed: int | np.random.Generator = 0,
    ):
        if in_dim < 1 or not hidden_dims or min(hidden_dims) < 1:
            raise ValueError("in_dim and every hidden dim must be positive, with at least one hidden layer")
        rng = np.random.default_rng(seed)
        self.in_dim = int(in_dim)
        self.hidden_dims = [int(h) for h in hidden_dims]
        self.cosine_head = bool(cosine_head)
        self.frozen = False
        self.class_registry: list[int] = []
        self.layers: list[tuple[Tensor, Tensor]] = []
        fan_in = self.in_dim
        for width in self.hidden_dims:
            bound = np.sqrt(6.0 / fan_in)
            w = Tensor(rng.uniform(-bound, bound, size=(fan_in, width)), requires_grad=True)
            b = Tensor(np.zeros(width), requires_grad=True)
            self.layers.append((w, b))
            fan_in = width
        self.head_w = Tensor(np.zeros((self.feature_dim, 0)), requires_grad=True)
        self.head_b = Tensor(np.zeros(0), requires_grad=not self.cosine_head)
        self.scale = Tensor([float(cosine_scale)], requires_grad=self.cosine_head)
        self._head_rng = rng

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]

    @property
    def n_classes(self) -> int:
        return len(self.class_registry)

    def parameters(self) -> list[Tensor]:
        params = [t for layer in self.layers for t in layer]
        params.append(self.head_w)
        params.append(self.scale if self.cosine_head else self.head_b)
        return params

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out += [(f"encoder.{i}.weight", w.data), (f"encoder.{i}.bias", b.data)]
        out += [("head.weight", self.head_w.data), ("head.bias", self.head_b.data), ("head.scale", self.scale.data)]
        return out

    def column_of(self, class_id: int) -> int:
        try:
            return self.class_registry.index(class_id)
        except ValueError:
            raise KeyError(f"class {class_id} is not registered in the head") from None

    def columns(self, class_ids) -> list[int]:
        lookup = {c: i for i, c in enumerate(self.class_registry)}
        try:
            return [lookup[c] for c in class_ids]
        except KeyError as exc:
            raise KeyError(f"class {exc.args[0]} is not registered in the head") from None

    # -- forward -----------------------------------------------------------

    def _as_input(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of shape [batch, {self.in_dim}], got {x.shape}")
        return x

    def extract_features(self, batch) -> Tensor:
        # Global average pooling is the identity for vector features.
        h = self._as_input(batch)
        for w, b in self.layers:
            h = T.relu(T.affine(h, w, b))
        return h

    def logits_from_features(self, feats: Tensor) -> Tensor:
        if self.cosine_head:
            return T.scale_by(T.matmul(T.normalize_rows(feats), T.normalize_cols(self.head_w)), self.scale)
        return T.affine(feats, self.head_w, self.head_b)

    def forward_logits(self, batch) -> Tensor:
        return self.logits_from_features(self.extract_features(batch))

    __call__ = forward_logits

    def predict(self, inputs) -> np.ndarray:
        """Class ids by argmax over every registered class."""
        with T.no_grad():
            logits = self.forward_logits(inputs).data
        return np.asarray(self.class_registry)[np.argmax(logits, axis=1)]

    # -- head growth -------------------------------------------------------

    def expand_head(self, new_classes: Sequence[int]) -> None:
        if self.frozen:
            raise UsageError("cannot expand a frozen snapshot")
        new_classes = [int(c) for c in new_classes]
        if len(set(new_classes)) != len(new_classes):
            raise ValueError(f"duplicate class ids in {new_classes}")
        clash = set(new_classes) & set(self.class_registry)
        if clash:
            raise ValueError(f"classes already registered: {sorted(clash)}")
        k = len(new_classes)
        if k == 0:
            return
        bound = 1.0 / np.sqrt(self.feature_dim)
        cols = self._head_rng.uniform(-bound, bound, size=(self.feature_dim, k))
        self.head_w.data = np.concatenate([self.head_w.data, cols], axis=1)
        self.head_b.data = np.concatenate([self.head_b.data, np.zeros(k)])
        self.head_w.grad = self.head_b.grad = None
        self.class_registry.extend(new_classes)

    # -- snapshots and persistence ------------------------------------------

    def snapshot(self) -> "MLPClassifier":
        """Independent frozen copy with gradient tracking disabled."""
        snap = copy.deepcopy(self)
        for p in snap.parameters() + [snap.head_b, snap.scale]:
            p.requires_grad = False
            p.grad = None
        snap.frozen = True
        return snap

    def copy_state_from(self, other: "MLPClassifier") -> None:
        for (name, dst), (_, src) in zip(self.named_arrays(), other.named_arrays()):
            if dst.shape != src.shape:
                raise ShapeError(f"{name}: shape {src.shape} does not fit {dst.shape}")
            dst[...] = src

    def save(self, path) -> None:
        arrays = self.named_arrays()
        meta = {
            "in_dim": self.in_dim,
            "hidden_dims": self.hidden_dims,
            "cosine_head": self.cosine_head,
            "class_registry": self.class_registry,
            "tensors": [name for name, _ in arrays],
        }
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
        parts.append(struct.pack("<I", len(arrays)))
        for _, arr in arrays:
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        for _, arr in arrays:
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path, frozen: bool = False) -> "MLPClassifier":
        raw = Path(path).read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {raw[:8]!r} at offset 0")
        pos = 8
        try:
            version, mlen = struct.unpack_from("<II", raw, pos)
        except struct.error:
            raise FormatError(f"{path}: truncated header at offset {pos}") from None
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported version {version} at offset {pos}")
        pos += 8
        try:
            meta = json.loads(raw[pos : pos + mlen].decode("utf-8"))
        except ValueError:
            raise FormatError(f"{path}: unreadable metadata at offset {pos}") from None
        pos += mlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shapes.append(struct.unpack_from(f"<{ndim}I", raw, pos + 4))
            pos += 4 + 4 * ndim
        model = cls(meta["in_dim"], meta["hidden_dims"], cosine_head=meta["cosine_head"])
        model.class_registry = [int(c) for c in meta["class_registry"]]
        k = len(model.class_registry)
        model.head_w.data = np.zeros((model.feature_dim, k))
        model.head_b.data = np.zeros(k)
        named = model.named_arrays()
        if [n for n, _ in named] != meta["tensors"] or count != len(named):
            raise FormatError(f"{path}: tensor table does not match the architecture")
        for (name, dst), shape in zip(named, shapes):
            if tuple(shape) != dst.shape:
                raise FormatError(f"{path}: {name} has shape {tuple(shape)}, expected {dst.shape}")
            nbytes = 8 * int(np.prod(shape))
            if pos + nbytes > len(raw):
                raise FormatError(f"{path}: data for {name} truncated at offset {pos}")
            dst[...] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
            pos += nbytes
        if pos != len(raw):
            raise FormatError(f"{path}: {len(raw) - pos} trailing bytes at offset {pos}")
        return model.snapshot() if frozen else model
