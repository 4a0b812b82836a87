"""Patched residual-MLP forecaster with hand-written gradients.

The context window is cut into non-overlapping patches, each patch goes
through a shared linear embedding and a ReLU, the patch embeddings are
concatenated into one vector of width ``D = n_patches * embed_dim``, a stack
of residual MLP blocks refines it, and a linear head emits the horizon.

Parameters are a plain ``dict[str, np.ndarray]`` in float64. The layout is
self-describing, so ``forward``/``backward`` need no config object.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

Params = dict[str, np.ndarray]

CHECKPOINT_MAGIC = b"TSFGCKP1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    context_len: int = 256
    horizon: int = 128
    patch_len: int = 32
    embed_dim: int = 64
    hidden_dim: int = 512
    n_blocks: int = 2
    init_seed: int = 0

    def __post_init__(self):
        for name in ("context_len", "horizon", "patch_len", "embed_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if self.context_len % self.patch_len:
            raise ValueError(
                f"patch_len {self.patch_len} does not divide context_len {self.context_len}")

    @property
    def n_patches(self) -> int:
        return self.context_len // self.patch_len

    @property
    def width(self) -> int:
        return self.n_patches * self.embed_dim

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, hd = self.width, self.hidden_dim
        shapes = {
            "embed_w": (self.patch_len, self.embed_dim),
            "embed_b": (self.embed_dim,),
        }
        for i in range(self.n_blocks):
            shapes[f"block{i}_w1"] = (d, hd)
            shapes[f"block{i}_b1"] = (hd,)
            shapes[f"block{i}_w2"] = (hd, d)
            shapes[f"block{i}_b2"] = (d,)
        shapes["head_w"] = (d, self.horizon)
        shapes["head_b"] = (self.horizon,)
        return shapes


def init_params(cfg: ModelConfig) -> Params:
    """Glorot-uniform weights, zero biases, drawn in layout order from ``init_seed``."""
    rng = np.random.default_rng(cfg.init_seed)
    params: Params = {}
    for name, shape in cfg.param_shapes().items():
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def n_blocks_of(params: Params) -> int:
    n = 0
    while f"block{n}_w1" in params:
        n += 1
    return n


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def param_hash(params: Params) -> str:
    h = hashlib.sha256()
    for name in params:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"expected a 1-D window or 2-D batch, got shape {x.shape}")
    return x, False


def _forward_cache(params: Params, contexts: np.ndarray):
    patch_len, embed_dim = params["embed_w"].shape
    b, length = contexts.shape
    if length % patch_len:
        raise ValueError(f"context length {length} is not a multiple of patch_len {patch_len}")
    if not np.all(np.isfinite(contexts)):
        raise ValueError("context contains non-finite values")
    patches = contexts.reshape(b, length // patch_len, patch_len)
    z = patches @ params["embed_w"] + params["embed_b"]
    x = np.maximum(z, 0.0).reshape(b, -1)
    if x.shape[1] != params["head_w"].shape[0]:
        raise ValueError(
            f"context length {length} gives width {x.shape[1]}, "
            f"model expects {params['head_w'].shape[0]}")
    blocks = []
    for i in range(n_blocks_of(params)):
        u = x @ params[f"block{i}_w1"] + params[f"block{i}_b1"]
        h = np.maximum(u, 0.0)
        blocks.append((x, u, h))
        x = x + h @ params[f"block{i}_w2"] + params[f"block{i}_b2"]
    out = x @ params["head_w"] + params["head_b"]
    return out, (patches, z, blocks, x)


def forward(params: Params, context) -> np.ndarray:
    """Forecast ``horizon`` values from a context window (or a batch of them)."""
    contexts, single = _as_batch(context)
    out, _ = _forward_cache(params, contexts)
    return out[0] if single else out


def preactivations(params: Params, context) -> list[np.ndarray]:
    """Every ReLU input for ``context``; used to keep gradient checks off kinks."""
    contexts, _ = _as_batch(context)
    _, (_, z, blocks, _) = _forward_cache(params, contexts)
    return [z] + [u for _, u, _ in blocks]


def loss_mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    return float(np.mean((pred - target) ** 2))


def backward(params: Params, context, target) -> tuple[float, Params]:
    """MSE loss and its exact gradient, averaged over the batch if one is given."""
    contexts, _ = _as_batch(context)
    targets, _ = _as_batch(target)
    out, (patches, z, blocks, x_last) = _forward_cache(params, contexts)
    if out.shape != targets.shape:
        raise ValueError(f"shape mismatch: pred {out.shape} vs target {targets.shape}")

    resid = out - targets
    loss = float(np.mean(resid**2))
    dout = 2.0 * resid / resid.size

    grads: Params = {}
    grads["head_w"] = x_last.T @ dout
    grads["head_b"] = dout.sum(axis=0)
    dx = dout @ params["head_w"].T
    for i in reversed(range(len(blocks))):
        x_in, u, h = blocks[i]
        grads[f"block{i}_w2"] = h.T @ dx
        grads[f"block{i}_b2"] = dx.sum(axis=0)
        du = (dx @ params[f"block{i}_w2"].T) * (u > 0)
        grads[f"block{i}_w1"] = x_in.T @ du
        grads[f"block{i}_b1"] = du.sum(axis=0)
        dx = dx + du @ params[f"block{i}_w1"].T

    dz = dx.reshape(z.shape) * (z > 0)
    patch_len, embed_dim = params["embed_w"].shape
    grads["embed_w"] = patches.reshape(-1, patch_len).T @ dz.reshape(-1, embed_dim)
    grads["embed_b"] = dz.sum(axis=(0, 1))
    return loss, {k: grads[k] for k in params}


# Checkpoint layout (all integers little-endian):
#   8 bytes   magic b"TSFGCKP1"
#   8 bytes   uint64 manifest length M
#   M bytes   UTF-8 JSON manifest: {"version", "config", "dtype": "<f8",
#             "tensors": [{"name", "shape"}, ...]}
#   rest      raw float64 tensor data, C order, in manifest order
_HEADER = struct.Struct("<8sQ")


def save_checkpoint(params: Params, cfg: ModelConfig, path) -> None:
    validate_params(params, cfg)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "dtype": "<f8",
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, len(blob)))
        fh.write(blob)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Params, ModelConfig]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, mlen = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    start = _HEADER.size + mlen
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[_HEADER.size:start].decode("utf-8"))
        cfg = ModelConfig(**manifest["config"])
        tensors = [(t["name"], tuple(t["shape"])) for t in manifest["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION or manifest.get("dtype") != "<f8":
        raise CheckpointError(f"{path}: unsupported version or dtype")

    expected = sum(int(np.prod(s)) for _, s in tensors) * 8
    if len(data) - start != expected:
        raise CheckpointError(
            f"{path}: expected {expected} bytes of tensor data, found {len(data) - start}")
    params: Params = {}
    offset = start
    for name, shape in tensors:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        params[name] = arr.reshape(shape).astype(np.float64)
        offset += count * 8
    validate_params(params, cfg)
    return params, cfg


def validate_params(params: Params, cfg: ModelConfig) -> None:
    shapes = cfg.param_shapes()
    if list(params) != list(shapes):
        raise CheckpointError(
            f"tensor names {list(params)} do not match config layout {list(shapes)}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise CheckpointError(
                f"tensor {name} has shape {tuple(params[name].shape)}, config implies {shape}")
