"""Synthetic multi-domain live/spoof data.

Live samples carry a smooth elliptic intensity bump with a specular highlight,
and the bump itself (sampled on a coarse grid) is their depth target.  Spoof
samples are flattened, contrast-compressed copies overlaid with a periodic
texture; their depth target is all zeros.  Each domain rotates the scene,
adds a per-channel bias, sets the sensor noise level and the texture
frequency, so the same labelling rule is seen through a different lens.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

IMAGE_SIZE = 16
DEPTH_SIZE = 8
CHANNELS = 3

RECORD_FORMAT = "selfadapt-domain"
RECORD_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    rotation: float  # degrees
    channel_bias: tuple[float, float, float]
    noise: float
    texture_freq: float  # cycles per image

    def __post_init__(self):
        object.__setattr__(self, "channel_bias", tuple(float(b) for b in self.channel_bias))
        if self.noise < 0:
            raise ValueError("noise sigma must be non-negative")
        if len(self.channel_bias) != CHANNELS or any(abs(b) > 0.3 for b in self.channel_bias):
            raise ValueError("channel bias must be a 3-vector within [-0.3, 0.3]")


@dataclass(frozen=True)
class Sample:
    x: np.ndarray  # (3, 16, 16)
    y: int
    depth: np.ndarray  # (8, 8)


@dataclass
class DomainBatch:
    x: np.ndarray  # (N, 3, 16, 16)
    y: np.ndarray  # (N,) 1 = live, 0 = spoof
    depth: np.ndarray  # (N, 8, 8)
    domain_id: int

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.y[i]), self.depth[i])

    def subset(self, idx) -> "DomainBatch":
        idx = np.asarray(idx)
        return DomainBatch(self.x[idx], self.y[idx], self.depth[idx], self.domain_id)

    def stratified(self, n: int, rng: np.random.Generator) -> "DomainBatch":
        """Draw ``n`` samples without replacement, half from each class."""
        live = np.flatnonzero(self.y == 1)
        spoof = np.flatnonzero(self.y == 0)
        n_live = n // 2
        n_spoof = n - n_live
        if len(live) < n_live or len(spoof) < n_spoof:
            raise ValueError(f"domain {self.domain_id}: not enough samples per class for "
                             f"a batch of {n}")
        idx = np.concatenate([rng.choice(live, n_live, replace=False),
                              rng.choice(spoof, n_spoof, replace=False)])
        return self.subset(rng.permutation(idx))


def make_domains(n: int = 4, seed: int = 0) -> list[DomainSpec]:
    """``n`` domains whose shift parameters are spread across their ranges."""
    if n < 2:
        raise ValueError("need at least two domains")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi)
    rotations = np.arange(n) * (180.0 / n) + rng.uniform(-10, 10, n)
    noises = rng.permutation(np.linspace(0.02, 0.10, n))
    freqs = rng.permutation(np.linspace(2.0, 5.0, n))
    specs = []
    for i in range(n):
        ang = phase + 2 * np.pi * i / n
        mag = rng.uniform(0.18, 0.28)
        bias = mag * np.cos(ang + np.array([0.0, 2.0, 4.0]) * np.pi / 3)
        specs.append(DomainSpec(
            domain_id=i,
            rotation=float(round(rotations[i], 6)),
            channel_bias=tuple(float(round(b, 6)) for b in bias),
            noise=float(round(noises[i], 6)),
            texture_freq=float(round(freqs[i], 6)),
        ))
    return specs


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(c, c, indexing="ij")
    return u, v


def _rotate(u, v, degrees):
    t = np.deg2rad(degrees)
    return u * np.cos(t) + v * np.sin(t), -u * np.sin(t) + v * np.cos(t)


def _bump(u, v, cx, cy, w, rotation):
    ur, vr = _rotate(u[None] - cx[:, None, None], v[None] - cy[:, None, None], rotation)
    w = w[:, None, None]
    return np.exp(-(ur ** 2 / w ** 2 + vr ** 2 / (0.6 * w) ** 2))


def sample_batch(spec: DomainSpec, n: int, seed: int) -> DomainBatch:
    """Stratified batch of ``n`` samples from one domain."""
    if n < 2:
        raise ValueError("batch size must be at least 2")
    rng = np.random.default_rng([seed, spec.domain_id])
    y = rng.permutation(np.r_[np.ones(n // 2), np.zeros(n - n // 2)]).astype(np.int64)
    live = y == 1

    u, v = _grid(IMAGE_SIZE)
    du, dv = _grid(DEPTH_SIZE)
    color = rng.uniform(0.35, 0.65, (n, CHANNELS))
    cx, cy = rng.uniform(-0.2, 0.2, (2, n))
    width = rng.uniform(0.45, 0.7, n)
    amp = np.where(live, rng.uniform(0.15, 0.45, n), rng.uniform(0.05, 0.35, n))
    contrast = np.where(live, rng.uniform(0.75, 1.0, n), rng.uniform(0.55, 0.9, n))
    tex_amp = np.where(live, rng.uniform(0.0, 0.03, n), rng.uniform(0.01, 0.06, n))
    tex_phase = rng.uniform(0, 2 * np.pi, n)

    bump = _bump(u, v, cx, cy, width, spec.rotation)
    shade = 1.0 - amp[:, None, None] / 2 + amp[:, None, None] * bump
    hx, hy = cx - 0.25, cy - 0.25
    highlight = 0.15 * amp[:, None, None] * live[:, None, None] * np.exp(
        -((u[None] - hx[:, None, None]) ** 2 + (v[None] - hy[:, None, None]) ** 2) / 0.02)
    img = color[:, :, None, None] * shade[:, None] + highlight[:, None]
    c = contrast[:, None, None, None]
    img = c * img + (1 - c) * 0.5

    ur, _ = _rotate(u, v, spec.rotation)
    texture = tex_amp[:, None, None] * np.sin(
        2 * np.pi * spec.texture_freq * (ur[None] + 1) / 2 + tex_phase[:, None, None])
    img = img + texture[:, None]

    img = img + np.asarray(spec.channel_bias)[None, :, None, None]
    img = img + spec.noise * rng.standard_normal(img.shape)
    x = np.clip(img, 0.0, 1.0)

    depth = _bump(du, dv, cx, cy, width, spec.rotation) * live[:, None, None]
    return DomainBatch(x=x, y=y, depth=depth, domain_id=spec.domain_id)


# ---------------------------------------------------------------------------
# record files: one JSON header line, then float64 little-endian records of
# (y, x[3*16*16], depth[8*8]) in row-major order


def write_records(batch: DomainBatch, path: str | Path, spec: DomainSpec | None = None) -> Path:
    path = Path(path)
    header = {
        "format": RECORD_FORMAT,
        "version": RECORD_VERSION,
        "domain_id": batch.domain_id,
        "count": len(batch),
        "x_shape": list(batch.x.shape[1:]),
        "depth_shape": list(batch.depth.shape[1:]),
        "dtype": "<f8",
        "spec": asdict(spec) if spec is not None else None,
    }
    body = np.concatenate([
        batch.y.astype("<f8")[:, None],
        batch.x.reshape(len(batch), -1),
        batch.depth.reshape(len(batch), -1),
    ], axis=1).astype("<f8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(body.tobytes())
    return path


def read_records(path: str | Path) -> tuple[DomainBatch, DomainSpec | None]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != RECORD_FORMAT:
            raise ValueError(f"{path}: not a domain record file")
        if header.get("version") != RECORD_VERSION:
            raise ValueError(f"{path}: unsupported record version {header.get('version')}")
        raw = fh.read()
    n = header["count"]
    xs, ds = header["x_shape"], header["depth_shape"]
    width = 1 + int(np.prod(xs)) + int(np.prod(ds))
    if len(raw) != n * width * 8:
        raise ValueError(f"{path}: truncated body ({len(raw)} bytes)")
    body = np.frombuffer(raw, dtype="<f8").reshape(n, width).astype(np.float64)
    nx = int(np.prod(xs))
    batch = DomainBatch(
        x=body[:, 1:1 + nx].reshape(n, *xs),
        y=body[:, 0].astype(np.int64),
        depth=body[:, 1 + nx:].reshape(n, *ds),
        domain_id=header["domain_id"],
    )
    spec = DomainSpec(**header["spec"]) if header.get("spec") else None
    return batch, spec
