"""The modified V-Net: residual conv blocks, strided-conv downsampling,
transposed-conv upsampling, concat skip connections merged by 1x1x1 convs,
instance norm + ELU everywhere, and a 4-channel softmax head.

Channels double per level starting from ``base_channels`` at full
resolution.  Channel dropout sits after each decoder block by default so
test-time-dropout variance concentrates near the output.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .kernel import (
    Tensor,
    add,
    channel_dropout,
    concat_channels,
    conv3d,
    conv3d_transpose,
    default_dtype,
    elu,
    instance_norm,
    softmax_channels,
)

DROPOUT_SITES = ("decoder-blocks", "all-blocks", "none")
_V_NET_CONVS = (1, 2, 3, 3, 3)
_CHECKPOINT_MAGIC = b"VSEGCKP1"
CHECKPOINT_FORMAT = "voxelseg-checkpoint-v1"


@dataclass
class VNetConfig:
    levels: int = 5
    base_channels: int = 32
    kernel: int = 3
    convs_per_level: list[int] | None = None
    dropout_p: float = 0.5
    dropout_sites: str = "decoder-blocks"
    in_channels: int = 4
    out_channels: int = 4
    patch_size: int | None = None
    memory_budget_mb: float = 8192.0

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.dropout_sites not in DROPOUT_SITES:
            raise ConfigError(f"dropout_sites must be one of {DROPOUT_SITES}, got {self.dropout_sites!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0,1), got {self.dropout_p}")
        if self.convs_per_level is None:
            base = list(_V_NET_CONVS)
            self.convs_per_level = (base + [base[-1]] * self.levels)[: self.levels]
        self.convs_per_level = [int(c) for c in self.convs_per_level]
        if len(self.convs_per_level) != self.levels:
            raise ConfigError(
                f"convs_per_level has {len(self.convs_per_level)} entries for {self.levels} levels"
            )
        if any(c < 1 for c in self.convs_per_level):
            raise ConfigError("convs_per_level entries must be >= 1")
        if self.patch_size is not None and self.patch_size % self.downsample_factor != 0:
            raise ConfigError(
                f"patch size {self.patch_size} not divisible by 2^(levels-1)={self.downsample_factor}"
            )

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)

    def channels_at(self, level: int) -> int:
        return self.base_channels * (2 ** level)

    def dropout_active(self) -> bool:
        return self.dropout_sites != "none" and self.dropout_p > 0.0


class ModelParameters:
    """Named parameter tensors plus the config that determines them."""

    def __init__(self, config: VNetConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors.keys())


def _conv_unit_shapes(cfg: VNetConfig):
    """Yield (path, c_in, c_out, kernel, with_norm) for every conv unit, in
    forward order.  Transposed convs are marked with kernel < 0."""
    k = cfg.kernel
    yield "enc0.stem", cfg.in_channels, cfg.channels_at(0), k, True
    for level in range(cfg.levels):
        if level > 0:
            yield f"enc{level}.down", cfg.channels_at(level - 1), cfg.channels_at(level), k, True
        for i in range(cfg.convs_per_level[level]):
            c = cfg.channels_at(level)
            yield f"enc{level}.conv{i}", c, c, k, True
    for level in range(cfg.levels - 2, -1, -1):
        yield f"dec{level}.up", cfg.channels_at(level + 1), cfg.channels_at(level), -k, True
        yield f"dec{level}.merge", 2 * cfg.channels_at(level), cfg.channels_at(level), 1, True
        for i in range(cfg.convs_per_level[level]):
            c = cfg.channels_at(level)
            yield f"dec{level}.conv{i}", c, c, k, True
    yield "head", cfg.channels_at(0), cfg.out_channels, 1, False


def build(config: VNetConfig, seed: int) -> ModelParameters:
    """Deterministic He-style initialization; same seed -> identical bits."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    dtype = default_dtype()
    tensors: dict[str, Tensor] = {}
    for path, c_in, c_out, kernel, with_norm in _conv_unit_shapes(config):
        transpose = kernel < 0
        k = abs(kernel)
        w_shape = (c_in, c_out, k, k, k) if transpose else (c_out, c_in, k, k, k)
        fan_in = c_in * k ** 3
        std = float(np.sqrt(2.0 / fan_in))
        tensors[f"{path}.w"] = Tensor(
            rng.normal(0.0, std, size=w_shape).astype(dtype), requires_grad=True
        )
        tensors[f"{path}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        if with_norm:
            tensors[f"{path}.gamma"] = Tensor(np.ones(c_out, dtype=dtype), requires_grad=True)
            tensors[f"{path}.beta"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
    return ModelParameters(config, tensors)


def _unit(params: ModelParameters, path: str, x: Tensor, stride: int = 1, transpose: bool = False,
          kernel: int | None = None) -> Tensor:
    """conv -> instance norm -> ELU."""
    w = params[f"{path}.w"]
    b = params[f"{path}.b"]
    if transpose:
        h = conv3d_transpose(x, w, b, stride=2)
    else:
        k = kernel if kernel is not None else w.shape[2]
        h = conv3d(x, w, b, stride=stride, pad=k // 2)
    h = instance_norm(h, params[f"{path}.gamma"], params[f"{path}.beta"])
    return elu(h)


def forward(params: ModelParameters, x: Tensor, mode: str = "eval",
            rng: np.random.Generator | None = None) -> Tensor:
    """Softmax probabilities with the input's spatial shape.

    ``train`` and ``eval-with-dropout`` sample channel dropout (an rng is
    then required); ``eval`` is deterministic.
    """
    cfg = params.config
    if mode not in ("train", "eval", "eval-with-dropout"):
        raise ValueError(f"unknown mode {mode!r}")
    if x.data.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (N,{cfg.in_channels},d,d,d) input, got {x.shape}")
    spatial = x.shape[2:]
    factor = cfg.downsample_factor
    if any(s % factor != 0 for s in spatial):
        raise ShapeError(f"spatial dims {spatial} not divisible by 2^(levels-1)={factor}")
    sample_dropout = mode in ("train", "eval-with-dropout") and cfg.dropout_active()
    if sample_dropout and rng is None:
        raise ValueError(f"mode {mode!r} with dropout_p={cfg.dropout_p} needs an rng")

    def block(h: Tensor, prefix: str, level: int) -> Tensor:
        r = h
        for i in range(cfg.convs_per_level[level]):
            h = _unit(params, f"{prefix}{level}.conv{i}", h)
        return add(h, r)

    h = _unit(params, "enc0.stem", x)
    skips: list[Tensor] = []
    for level in range(cfg.levels):
        if level > 0:
            h = _unit(params, f"enc{level}.down", h, stride=2)
        h = block(h, "enc", level)
        if sample_dropout and cfg.dropout_sites == "all-blocks":
            h = channel_dropout(h, cfg.dropout_p, rng)
        if level < cfg.levels - 1:
            skips.append(h)
    for level in range(cfg.levels - 2, -1, -1):
        up = _unit(params, f"dec{level}.up", h, transpose=True)
        h = _unit(params, f"dec{level}.merge", concat_channels(up, skips[level]))
        h = block(h, "dec", level)
        if sample_dropout and cfg.dropout_sites in ("decoder-blocks", "all-blocks"):
            h = channel_dropout(h, cfg.dropout_p, rng)
    logits = conv3d(h, params["head.w"], params["head.b"], stride=1, pad=0)
    return softmax_channels(logits)


def count_parameters(params: ModelParameters) -> int:
    return sum(t.size for t in params.tensors.values())


def estimate_training_memory_bytes(config: VNetConfig, patch_size: int, batch: int) -> int:
    """Rough peak-resident estimate for one training step: taped forward
    activations, their gradients, and the transient convolution buffers."""
    itemsize = np.dtype(default_dtype()).itemsize
    act = 0
    for level in range(config.levels):
        vox = (patch_size // 2 ** level) ** 3
        c = config.channels_at(level)
        n_units = config.convs_per_level[level] * 2 + 3  # enc+dec blocks, down/up/merge
        # conv out, norm out, elu out per unit
        act += batch * c * vox * 3 * n_units
    transient = batch * config.channels_at(0) * patch_size ** 3 * config.kernel ** 3
    transient = min(transient * itemsize, 2 * 192 * 1024 * 1024)
    return act * 2 * itemsize + transient


def check_memory_budget(config: VNetConfig, patch_size: int, batch: int) -> None:
    need = estimate_training_memory_bytes(config, patch_size, batch)
    budget = config.memory_budget_mb * 1024 * 1024
    if need > budget:
        raise ConfigError(
            f"estimated training memory {need / 1e6:.0f} MB exceeds budget "
            f"{config.memory_budget_mb:.0f} MB (patch {patch_size}, batch {batch}); "
            "reduce levels/base_channels/patch/batch or raise memory_budget_mb"
        )


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + float32 blob in one file
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParameters, step: int = 0, extra: dict | None = None) -> None:
    """Single-file checkpoint: magic, manifest length, UTF-8 JSON manifest,
    then the little-endian float32 parameter blob (sorted by name)."""
    names = sorted(params.tensors.keys())
    blobs = []
    entries = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        blobs.append(arr.tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(params.config),
        "step": int(step),
        "tensors": entries,
        "extra": extra or {},
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ModelParameters, dict]:
    """Returns (params, manifest).  Raises CheckpointError on any mismatch."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:8] != _CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a voxelseg checkpoint (bad magic)")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown format tag {manifest.get('format')!r}")
    config = VNetConfig(**manifest["config"])
    blob = raw[16 + mlen:]
    tensors: dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        chunk = blob[entry["offset"]: entry["offset"] + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: tensor {entry['name']} truncated")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(default_dtype())
        tensors[entry["name"]] = Tensor(arr, requires_grad=True)
    params = ModelParameters(config, tensors)
    want = {f"{unit}.{suffix}" for unit, _, _, _, with_norm in _conv_unit_shapes(config)
            for suffix in (("w", "b", "gamma", "beta") if with_norm else ("w", "b"))}
    if set(tensors.keys()) != want:
        missing = sorted(want - set(tensors.keys()))
        raise CheckpointError(f"{path}: parameter names do not match config (missing {missing[:3]})")
    return params, manifest
