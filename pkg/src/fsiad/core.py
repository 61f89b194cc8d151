"""Shared types, configuration, seeded RNG and the checkpoint file format."""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

LATENT_DIM = 256
RESOLUTIONS = (32, 64, 128)
DOMAINS = ("N", "V")

CHECKPOINT_MAGIC = b"FSIAD1"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


# --------------------------------------------------------------------------
# domain types


@dataclass
class ImageBatch:
    """B x 3 x H x W images in [-1, 1] from a single capture domain."""

    data: torch.Tensor
    domain: str

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        d = self.data
        if d.ndim != 4 or d.shape[0] < 1 or d.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W with B >= 1, got {tuple(d.shape)}")
        if d.shape[2] != d.shape[3] or d.shape[2] not in RESOLUTIONS:
            raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {tuple(d.shape[2:])}")
        lo, hi = float(d.min()), float(d.max())
        if lo < -1.0 or hi > 1.0:
            raise ValueError(f"image values outside [-1, 1]: [{lo}, {hi}]")

    @property
    def resolution(self) -> int:
        return int(self.data.shape[-1])

    def __len__(self):
        return int(self.data.shape[0])


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over attribute codes; sigma = exp(logvar / 2)."""

    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError("mu and logvar shapes differ")

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)

    def split(self, size: int) -> tuple["GaussianPosterior", ...]:
        """Chunks of ``size`` rows along the batch dimension."""
        return tuple(GaussianPosterior(m, v) for m, v in zip(self.mu.split(size), self.logvar.split(size)))

    @classmethod
    def from_sigma(cls, mu: torch.Tensor, sigma: torch.Tensor) -> "GaussianPosterior":
        if bool((sigma <= 0).any()):
            raise ValueError("sigma must be strictly positive")
        return cls(mu, 2.0 * torch.log(sigma))


def check_identity_code(z: torch.Tensor, tol: float = 1e-5) -> torch.Tensor:
    if z.shape[-1] != LATENT_DIM:
        raise ValueError(f"identity code length {z.shape[-1]} != {LATENT_DIM}")
    norms = z.detach().norm(dim=-1)
    if bool(((norms - 1).abs() > tol).any()):
        raise ValueError("identity codes must be unit norm")
    return z


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    # loss weights
    lambda_dis: float = 2.0
    lambda_int: float = 5.0
    lambda_adv: float = 1.0
    gamma: float = 0.001
    alpha: float = 0.84
    # optimisers
    adam_lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.99
    sgd_lr: float = 1e-3
    sgd_momentum: float = 0.9
    sgd_weight_decay: float = 1e-4
    # FSIAD loop
    batch_size: int = 6
    iterations: int = 3000
    n_aug: int = 5000
    resolution: int = 64
    width: float = 0.125
    seed: int = 0
    int_only: bool = False
    # dataset
    n_subjects: int = 40
    attrs_per_subject: int = 12
    # recognizer pretraining / HFR fine-tuning
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    hfr_steps: int = 600
    hfr_batch_size: int = 16
    synth_per_real: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        for key in ("lambda_dis", "lambda_int", "lambda_adv", "gamma"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: trade-off weight must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha: must lie in [0, 1]")
        if self.resolution not in RESOLUTIONS:
            raise ConfigError(f"resolution: must be one of {RESOLUTIONS}")
        positive = ("adam_lr", "sgd_lr", "batch_size", "width", "hfr_batch_size", "synth_per_real")
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key}: must be > 0")
        for key in ("adam_beta1", "adam_beta2", "sgd_momentum"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError(f"{key}: must lie in [0, 1)")
        nonneg = ("iterations", "n_aug", "pretrain_epochs", "hfr_steps", "sgd_weight_decay")
        for key in nonneg:
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be >= 0")
        if self.n_subjects < 2 or self.attrs_per_subject < 1:
            raise ConfigError("n_subjects: need at least 2 subjects and 1 attribute draw")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown config key")
        return cls(**dict(values))

    def dumps(self) -> str:
        return "".join(f"{k}={_format_value(v)}\n" for k, v in self.to_dict().items())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _parse_value(key: str, raw: str, kind: type):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


_FIELD_TYPES = {f.name: {"float": float, "int": int, "bool": bool}[f.type] for f in fields(TrainConfig)}


def parse_config(text: str) -> TrainConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown config key (line {lineno})")
        values[key] = _parse_value(key, raw, _FIELD_TYPES[key])
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# RNG


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; stream is fixed by the seed on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def torch_seed_from(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def set_threads(default: int = 1) -> int:
    import os

    n = int(os.environ.get("FSIAD_THREADS", default))
    torch.set_num_threads(max(1, n))
    return n


# --------------------------------------------------------------------------
# checkpoints

_DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
    np.dtype("u1"): 5,
    np.dtype("bool"): 6,
    np.dtype("<f2"): 7,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    a = np.asarray(x)
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return a


def save_checkpoint(path, arrays: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    meta = dict(meta or {})
    meta["format_version"] = CHECKPOINT_VERSION
    meta["n_arrays"] = len(arrays)
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name, value in arrays.items():
            a = _as_numpy(value)
            dt = a.dtype.newbyteorder("<") if a.dtype.itemsize > 1 else a.dtype
            if dt not in _DTYPE_CODES:
                raise CheckpointError(f"{name}: unsupported dtype {a.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_CODES[dt], a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype=dt).tobytes())
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path, expected_shapes: Mapping[str, tuple] | None = None) -> Checkpoint:
    """Read a checkpoint; optionally verify array shapes against an architecture."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not an FSIAD checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", r.take(8, "header length"))
    meta = json.loads(r.take(hlen, "metadata").decode("utf-8"))
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} != {CHECKPOINT_VERSION}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(meta["n_arrays"]):
        (nlen,) = struct.unpack("<I", r.take(4, "name length"))
        name = r.take(nlen, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", r.take(2, f"{name} dtype"))
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"{name} dims"))
        dt = _CODE_DTYPES.get(code)
        if dt is None:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        count = int(np.prod(dims, dtype=np.int64))
        payload = r.take(count * dt.itemsize, f"{name} payload")
        arrays[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last array")
    meta.pop("n_arrays")
    if expected_shapes is not None:
        check_shapes(arrays, expected_shapes)
    return Checkpoint(arrays, meta)


def check_shapes(arrays: Mapping[str, np.ndarray], expected: Mapping[str, tuple]):
    for name, shape in expected.items():
        if name not in arrays:
            raise ShapeMismatchError(f"{name}: missing from checkpoint")
        if tuple(arrays[name].shape) != tuple(shape):
            raise ShapeMismatchError(
                f"{name}: checkpoint shape {tuple(arrays[name].shape)} != architecture {tuple(shape)}")


def module_arrays(modules: Mapping[str, torch.nn.Module]) -> dict[str, np.ndarray]:
    out = {}
    for prefix, mod in modules.items():
        for k, v in mod.state_dict().items():
            out[f"{prefix}.{k}"] = v.detach().cpu().numpy().copy()
    return out


def load_modules(arrays: Mapping[str, np.ndarray], modules: Mapping[str, torch.nn.Module]):
    """Copy checkpoint arrays into modules, verifying shapes first."""
    for prefix, mod in modules.items():
        sd = mod.state_dict()
        expected = {f"{prefix}.{k}": tuple(v.shape) for k, v in sd.items()}
        check_shapes(arrays, expected)
        mod.load_state_dict({k: torch.from_numpy(np.array(arrays[f"{prefix}.{k}"])) for k in sd})


def checksum(module: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
