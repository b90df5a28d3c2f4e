"""Neural network layers on top of :mod:`prospectr.tensor`.

Pre-norm vision transformer pieces (patch embedding with fixed 2-D sincos
positions, multi-head self-attention, GELU MLP), plus the BatchNorm /
PReLU / Dropout stack used by the prospectivity classifier, an Adam
optimizer and a checksummed checkpoint format.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import (ContractError, ShapeError, Tensor, count_flops, gather, gelu, matmul,
                     no_grad, prelu, rng_stream, softmax, where_const)


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    # resample-free truncation at 2 std
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Parameter, Module)):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.requires_grad or not trainable_only]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def num_params(self, trainable_only: bool = True) -> int:
        return sum(p.size for p in self.parameters(trainable_only))

    def state_dict(self) -> dict[str, np.ndarray]:
        sd = {name: p.data.copy() for name, p in self.named_parameters()}
        sd.update({name: b.copy() for name, b in self.named_buffers()})
        return sd

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) ^ set(sd)
        if missing:
            raise CheckpointError(f"state dict key mismatch: {sorted(missing)[:5]}")
        for name, p in params.items():
            if p.shape != sd[name].shape:
                raise CheckpointError(f"shape mismatch for {name}: {p.shape} vs {sd[name].shape}")
            p.data[...] = sd[name]
        for name, b in buffers.items():
            b[...] = sd[name]

    def checksum(self) -> int:
        crc = 0
        for name, p in self.named_parameters():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
        return crc


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expected last dim {self.d_in}, got {x.shape}")
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


def normalize(x: Tensor, axis: int, eps: float) -> Tensor:
    """(x - mean) / sqrt(var + eps) along ``axis`` as one fused op."""
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def back(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (rstd * (g - gm - xhat * gxm),)
    return Tensor.from_op(xhat, (x,), back, "normalize")


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return normalize(x, -1, self.eps) * self.weight + self.bias


class BatchNorm1d(Module):
    """Batch normalisation over axis 0 of [B, D] inputs.

    Running statistics follow ``r <- (1 - momentum) * r + momentum * batch``
    with the unbiased batch variance, as in common deep learning libraries.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim, dtype=self.weight.dtype)
        self.running_var = np.ones(dim, dtype=self.weight.dtype)
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            b = x.shape[0]
            if b < 2:
                raise ContractError("BatchNorm1d in train mode needs a batch of at least 2")
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * x.data.mean(axis=0)
            self.running_var[...] = (1 - m) * self.running_var + m * x.data.var(axis=0, ddof=1)
            xhat = normalize(x, 0, self.eps)
        else:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * scale
        return xhat * self.weight + self.bias


class PReLU(Module):
    def __init__(self, init: float = 0.25):
        self.slope = Parameter(np.full(1, init))

    def forward(self, x: Tensor) -> Tensor:
        return prelu(x, self.slope)


class Dropout(Module):
    """Inverted dropout.

    Active in training mode, or in eval mode when ``mc`` is set (MC Dropout).
    ``mask_override`` lets a caller inject keep-masks drawn from its own
    streams; otherwise the layer's private generator is used.
    """

    def __init__(self, p: float, seed: int = 0):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.mc = False
        self.mask_override: np.ndarray | None = None
        self.reseed(seed)

    def reseed(self, seed: int, *path) -> None:
        self.rng = rng_stream(seed, "dropout", *path)

    @property
    def active(self) -> bool:
        return self.p > 0.0 and (self.training or self.mc)

    def forward(self, x: Tensor) -> Tensor:
        if not self.active:
            return x
        if self.mask_override is not None:
            keep = self.mask_override
            if keep.shape != x.shape:
                raise ShapeError(f"dropout mask {keep.shape} does not match input {x.shape}")
        else:
            keep = self.rng.random(x.shape) >= self.p
        return x * (keep.astype(x.dtype) / np.asarray(1.0 - self.p, x.dtype))


# -- transformer ---------------------------------------------------------------

def sincos_pos_embed_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position table of shape [grid * grid, dim]."""
    if dim % 4:
        raise ConfigError("sincos position embedding needs dim divisible by 4")
    omega = 1.0 / 10000 ** (np.arange(dim // 4, dtype=np.float64) / (dim / 4.0))
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")

    def encode(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)
    return np.concatenate([encode(rows), encode(cols)], axis=1)


def patchify(x: Tensor, p: int) -> Tensor:
    """[B, m, w, w] -> [B, (w/p)^2, p*p*m], patches in row-major grid order."""
    b, m, w, _ = x.shape
    g = w // p
    return x.reshape(b, m, g, p, g, p).transpose(0, 2, 4, 3, 5, 1).reshape(b, g * g, p * p * m)


def unpatchify(t: Tensor, m: int, p: int) -> Tensor:
    b, n, _ = t.shape
    g = int(round(math.sqrt(n)))
    return t.reshape(b, g, g, p, p, m).transpose(0, 5, 1, 3, 2, 4).reshape(b, m, g * p, g * p)


class PatchEmbed(Module):
    def __init__(self, bands: int, window: int, patch: int, dim: int, rng: np.random.Generator):
        if window % patch:
            raise ConfigError(f"patch size {patch} does not divide window {window}")
        self.bands, self.window, self.patch = bands, window, patch
        self.grid = window // patch
        self.num_patches = self.grid ** 2
        self.proj = Linear(patch * patch * bands, dim, rng)
        self.pos = sincos_pos_embed_2d(dim, self.grid).astype(self.proj.weight.dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1:] != (self.bands, self.window, self.window):
            raise ShapeError(f"expected input [B, {self.bands}, {self.window}, {self.window}], got {x.shape}")
        return self.proj(patchify(x, self.patch)) + self.pos


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"embedding dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """``key_mask`` [B, N] marks tokens that may be attended to."""
        b, n, d = x.shape
        h, dh = self.heads, d // self.heads

        def split(t):
            return t.reshape(b, n, h, dh).transpose(0, 2, 1, 3)
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        if key_mask is not None:
            allowed = np.asarray(key_mask, bool)[:, None, None, :]
            scores = where_const(np.broadcast_to(allowed, scores.shape), scores, -np.inf)
        attn = softmax(scores, axis=-1)
        out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, int(dim * mlp_ratio), rng)

    def forward(self, x: Tensor, key_mask=None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.mlp(self.norm2(x))


@dataclass
class ViTConfig:
    bands: int = 24
    window: int = 16
    patch: int = 4
    dim: int = 256
    depth: int = 6
    heads: int = 8
    mlp_ratio: float = 4.0
    final_norm: bool = True


class ViTEncoder(Module):
    """Patch embedding + pre-norm transformer blocks; no class token."""

    def __init__(self, cfg: ViTConfig, seed: int = 0):
        rng = rng_stream(seed, "init", "encoder")
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.bands, cfg.window, cfg.patch, cfg.dim, rng)
        self.blocks = [TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim) if cfg.final_norm else None

    @property
    def num_patches(self) -> int:
        return self.patch_embed.num_patches

    def forward(self, x, keep_idx: np.ndarray | None = None) -> Tensor:
        """Encode [B, m, w, w]; with ``keep_idx`` [B, K] only those patches are seen."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        tokens = self.patch_embed(x)
        if keep_idx is not None:
            tokens = gather(tokens, keep_idx)
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens) if self.norm is not None else tokens

    def features(self, x) -> Tensor:
        return self.forward(x).mean(axis=1)

    def example_input(self) -> np.ndarray:
        c = self.cfg
        return np.zeros((1, c.bands, c.window, c.window), dtype=self.patch_embed.proj.weight.dtype)


# -- bookkeeping ---------------------------------------------------------------

def count_params_flops(model: Module, x: np.ndarray | None = None) -> tuple[int, int]:
    """Trainable parameter count and FLOPs of one single-sample forward pass."""
    params = sum(p.size for p in model.parameters())
    x = model.example_input() if x is None else x
    was_training = model.training
    model.eval()
    try:
        with no_grad(), count_flops() as counter:
            model(x)
    finally:
        model.train(was_training)
    return params, counter["flops"]


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def cosine_lr(base: float, step: int, total: int, warmup: int = 0, floor: float = 0.0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total - warmup)
    frac = min(1.0, (step - warmup) / span)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * frac))


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_FORMAT = "prospectr-checkpoint/1"


def save_checkpoint(model: Module, stem, arch: dict, seed: int, extra: dict | None = None) -> Path:
    """Write ``<stem>.json`` (manifest) and ``<stem>.bin`` (parameter blob)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name, arr in model.state_dict().items():
            raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                            "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
            offset += len(raw)
    manifest = {"format": CHECKPOINT_FORMAT, "arch": arch, "seed": seed, "tensors": entries}
    if extra:
        manifest["extra"] = extra
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return stem.with_suffix(".json")


def read_manifest(stem) -> dict:
    manifest = json.loads(Path(stem).with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(model: Module, stem, arch: dict) -> dict:
    """Load parameters into ``model``; the manifest architecture must equal ``arch``."""
    stem = Path(stem)
    manifest = read_manifest(stem)
    if manifest["arch"] != json.loads(json.dumps(arch)):
        raise CheckpointError(f"architecture mismatch: checkpoint {manifest['arch']} vs model {arch}")
    blob = stem.with_suffix(".bin").read_bytes()
    sd = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated parameter blob at {e['name']}")
        if zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"checksum mismatch for {e['name']}")
        sd[e["name"]] = np.frombuffer(raw, dtype=np.dtype("<" + e["dtype"])).reshape(e["shape"])
    model.load_state_dict(sd)
    return manifest


def arch_dict(cfg) -> dict:
    return asdict(cfg)
