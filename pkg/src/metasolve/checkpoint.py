"""MSCK checkpoint files: a flat list of named float64 tensors plus the
64-bit config hash.

Layout (little-endian): ``b"MSCK"``, u8 version, u32 tensor count; per tensor
u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims, f64 payload; then a
trailing u64 config hash.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embed import EmbeddingParams
from .errors import FormatError, ValidationError
from .optim import AdamState
from .solvers import SolverHyperparams
from .tensor import Node

MAGIC = b"MSCK"
VERSION = 1


@dataclass
class Checkpoint:
    """Named tensors describing the full training state.

    Naming: ``embed.*`` and ``solver.*`` hold the current parameters,
    ``best.embed.*`` / ``best.solver.*`` the best-on-validation snapshot,
    ``adam.m.*`` / ``adam.v.*`` / ``adam.t`` the optimizer and ``meta.*`` the
    counters (episode, best metric, best episode, seed).
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    config_hash: int = 0

    @classmethod
    def capture(cls, embed: EmbeddingParams, hp: SolverHyperparams, adam: AdamState, *,
                episode: int, best_val: float, best_episode: int, seed: int,
                best: dict[str, np.ndarray], config_hash: int) -> "Checkpoint":
        t = {}
        t.update({k: v.value.copy() for k, v in model_params(embed, hp).items()})
        t.update({f"best.{k}": v.copy() for k, v in best.items()})
        t["adam.t"] = np.array(float(adam.t))
        for k in adam.m:
            t[f"adam.m.{k}"] = adam.m[k].copy()
            t[f"adam.v.{k}"] = adam.v[k].copy()
        t["meta.episode"] = np.array(float(episode))
        t["meta.best_val"] = np.array(float(best_val))
        t["meta.best_episode"] = np.array(float(best_episode))
        t["meta.seed"] = np.array(float(seed))
        return cls(t, config_hash)

    @property
    def episode(self) -> int:
        return int(self.tensors["meta.episode"])

    @property
    def best_val(self) -> float:
        return float(self.tensors["meta.best_val"])

    @property
    def best_episode(self) -> int:
        return int(self.tensors["meta.best_episode"])

    def _get(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise ValidationError(f"checkpoint has no tensor {name!r}") from None

    def embed_params(self, dropout, concat_last_two: bool, best: bool = False) -> EmbeddingParams:
        prefix = "best." if best else ""
        layers = sum(1 for k in self.tensors if k.startswith(prefix + "embed.w"))
        weights = [Node(self._get(f"{prefix}embed.w{i}").copy(), True, name=f"embed.w{i}")
                   for i in range(layers)]
        biases = [Node(self._get(f"{prefix}embed.b{i}").copy(), True, name=f"embed.b{i}")
                  for i in range(layers)]
        if dropout is None:
            dropout = [0.0] * layers
        return EmbeddingParams(weights, biases, tuple(dropout), concat_last_two)

    def solver_hp(self, learn_lambda: bool = True, learn_alpha: bool = True,
                  learn_beta: bool = True, best: bool = False) -> SolverHyperparams:
        prefix = "best." if best else ""
        return SolverHyperparams(
            lambda_raw=Node(self._get(prefix + "solver.lambda_raw").copy(), learn_lambda, name="lambda_raw"),
            alpha=Node(self._get(prefix + "solver.alpha").copy(), learn_alpha, name="alpha"),
            beta=Node(self._get(prefix + "solver.beta").copy(), learn_beta, name="beta"),
            learn_lambda=learn_lambda, learn_alpha=learn_alpha, learn_beta=learn_beta,
        )

    def adam_state(self) -> AdamState:
        m = {k[len("adam.m."):]: v.copy() for k, v in self.tensors.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: a.copy() for k, a in self.tensors.items() if k.startswith("adam.v.")}
        return AdamState(m=m, v=v, t=int(self._get("adam.t")))

    def best_snapshot(self) -> dict[str, np.ndarray]:
        return {k[len("best."):]: v.copy() for k, v in self.tensors.items() if k.startswith("best.")}


def model_params(embed: EmbeddingParams, hp: SolverHyperparams) -> dict[str, Node]:
    out = dict(embed.named())
    out.update({f"solver.{k}": v for k, v in hp.named().items()})
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    parts.append(struct.pack("<Q", ckpt.config_hash))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an MSCK checkpoint", 0)
    version, count = struct.unpack("<BI", take(5, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    tensors = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", start + 2) from None
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(8 * size, f"tensor {name!r}"), dtype="<f8")
        tensors[name] = arr.astype(np.float64).reshape(dims)
    (chash,) = struct.unpack("<Q", take(8, "config hash"))
    if pos != len(data):
        raise FormatError("trailing bytes after config hash", pos)
    return Checkpoint(tensors, chash)
