"""Desk-scale networks: feature extractor F, classifier C (and its adapted
form C_a), depth estimator D, autoencoder R and the 1x1 residual adaptor A.

Feature maps are channels-last, shape ``(N, s, s, k)``, so that a 1x1
convolution is a matrix product over the trailing axis.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ShapeError, Tensor, conv1x1, no_record, relu, sigmoid
from .nn import GROUP_NAMES, ParamGroup, ParamSet, dense, init_group

MANIFEST_FORMAT = "selfadapt-model"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int = 3
    image_size: int = 16
    f_hidden: tuple[int, ...] = (64,)
    k: int = 8
    s: int = 8
    c_hidden: int = 8
    depth_size: int = 8
    ae_bottleneck: int = 64
    residual: str = "pre"  # where the adaptor branch joins C's first layer

    def __post_init__(self):
        object.__setattr__(self, "f_hidden", tuple(int(h) for h in self.f_hidden))
        if self.k < 2:
            raise ValueError("feature channels k must be at least 2")
        if self.depth_size >= self.image_size:
            raise ValueError("depth grid must be smaller than the input")
        if self.ae_bottleneck >= self.feature_size:
            raise ValueError("autoencoder bottleneck must be smaller than the feature map")
        if self.residual not in ("pre", "post"):
            raise ValueError("residual must be 'pre' or 'post'")

    @property
    def feature_size(self) -> int:
        return self.k * self.s * self.s

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.image_size, self.image_size)

    @property
    def input_size(self) -> int:
        return self.in_channels * self.image_size ** 2


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """Fan-in uniform weights, zero biases, zero adaptor."""
    rng = np.random.default_rng(seed)
    widths = [spec.input_size, *spec.f_hidden, spec.feature_size]
    f_shapes = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        f_shapes[f"W{i}"] = ((a, b), a)
        f_shapes[f"b{i}"] = ((b,), 0)
    k, fs = spec.k, spec.feature_size
    groups = {
        "F": init_group("F", f_shapes, rng),
        "C": init_group("C", {
            "W1": ((k, k), k), "b1": ((k,), 0),
            "W2": ((k, spec.c_hidden), k), "b2": ((spec.c_hidden,), 0),
            "W3": ((spec.c_hidden, 1), spec.c_hidden), "b3": ((1,), 0),
        }, rng),
        "D": init_group("D", {
            "W1": ((fs, spec.depth_size ** 2), fs), "b1": ((spec.depth_size ** 2,), 0),
        }, rng),
        "R": init_group("R", {
            "W1": ((fs, spec.ae_bottleneck), fs), "b1": ((spec.ae_bottleneck,), 0),
            "W2": ((spec.ae_bottleneck, fs), spec.ae_bottleneck), "b2": ((fs,), 0),
        }, rng),
        "A": init_group("A", {"W": ((k, k), k)}, rng, zero=True),
    }
    return ParamSet(groups)


def random_adaptor(spec: ModelSpec, seed: int) -> ParamGroup:
    return init_group("A", {"W": ((spec.k, spec.k), spec.k)}, np.random.default_rng(seed))


def _check_input(spec: ModelSpec, x) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim != 4 or data.shape[1:] != spec.input_shape:
        raise ShapeError(f"input shape {data.shape} does not match (N, *{spec.input_shape})")
    return data


def forward_F(F: ParamGroup, x, spec: ModelSpec = ModelSpec()) -> Tensor:
    """Dense stages over the flattened image, reshaped to an (s, s, k) map."""
    data = _check_input(spec, x)
    h = Tensor(data.reshape(len(data), -1))
    for i in range(1, len(F.tensors) // 2 + 1):
        h = relu(dense(F[f"W{i}"], F[f"b{i}"], h))
    return h.reshape(len(data), spec.s, spec.s, spec.k)


def _check_features(C: ParamGroup, f: Tensor) -> None:
    if f.ndim != 4 or f.shape[-1] != C["W1"].shape[1]:
        raise ShapeError(f"feature map {f.shape} does not have {C['W1'].shape[1]} channels")


def forward_C_l1(C: ParamGroup, f: Tensor, activation: Callable = relu) -> Tensor:
    """C's first layer up to (and including) its first activation."""
    _check_features(C, f)
    return activation(conv1x1(C["W1"], f) + C["b1"])


def forward_Ca_l1(C: ParamGroup, A: ParamGroup, f: Tensor, activation: Callable = relu,
                  residual: str = "pre") -> Tensor:
    _check_features(C, f)
    W = A["W"]
    if W.shape != C["W1"].shape:
        raise ShapeError(f"adaptor {W.shape} must be a {C['W1'].shape} channel map")
    z = conv1x1(C["W1"], f) + C["b1"]
    if residual == "pre":
        return activation(z + conv1x1(W, f))
    return activation(z) + conv1x1(W, f)


def _head(C: ParamGroup, h: Tensor) -> Tensor:
    pooled = h.mean(axis=(1, 2))
    z = relu(dense(C["W2"], C["b2"], pooled))
    logit = dense(C["W3"], C["b3"], z)
    return sigmoid(logit).reshape(-1)


def forward_C(C: ParamGroup, f: Tensor) -> Tensor:
    """P(live) per sample from the plain classifier."""
    return _head(C, forward_C_l1(C, f))


def forward_Ca(C: ParamGroup, A: ParamGroup, f: Tensor, residual: str = "pre") -> Tensor:
    return _head(C, forward_Ca_l1(C, A, f, residual=residual))


def pooled_features(C: ParamGroup, A: ParamGroup, f: Tensor, residual: str = "pre") -> Tensor:
    """Spatially pooled first-layer activations of C_a (the head's input)."""
    return forward_Ca_l1(C, A, f, residual=residual).mean(axis=(1, 2))


def forward_D(D: ParamGroup, f: Tensor, spec: ModelSpec = ModelSpec()) -> Tensor:
    flat = f.reshape(f.shape[0], -1)
    d = spec.depth_size
    return sigmoid(dense(D["W1"], D["b1"], flat)).reshape(f.shape[0], d, d)


def forward_R(R: ParamGroup, h: Tensor) -> Tensor:
    flat = h.reshape(h.shape[0], -1)
    z = relu(dense(R["W1"], R["b1"], flat))
    return dense(R["W2"], R["b2"], z).reshape(h.shape)


# ---------------------------------------------------------------------------
# feature-moment recalibration (used by the AdapBN-style baseline)


@dataclass
class Moments:
    """Per-channel mean and variance of feature maps."""

    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count}

    @classmethod
    def from_dict(cls, d: dict) -> "Moments":
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["var"], dtype=np.float64), int(d["count"]))


class MomentAccumulator:
    """Streaming per-channel moments (Chan et al. pairwise merge)."""

    def __init__(self, channels: int):
        self.n = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)

    def update(self, f: np.ndarray) -> None:
        x = f.reshape(-1, f.shape[-1])
        nb = x.shape[0]
        if nb == 0:
            return
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * nb / n
        self.m2 = self.m2 + m2b + delta ** 2 * self.n * nb / n
        self.n = n

    def result(self) -> Moments:
        return Moments(self.mean.copy(), self.m2 / max(self.n, 1), self.n)


def recalibrate(f: Tensor, source: Moments, current: Moments, eps: float = 1e-5) -> Tensor:
    """Map features standardized with ``current`` moments onto ``source`` moments."""
    scale = np.sqrt(source.var + eps) / np.sqrt(current.var + eps)
    return (f - current.mean) * scale + source.mean


# ---------------------------------------------------------------------------


@dataclass
class TrainedModel:
    params: ParamSet
    spec: ModelSpec = field(default_factory=ModelSpec)
    config: dict = field(default_factory=dict)
    trace_path: str | None = None
    source_moments: Moments | None = None
    recalibration: Moments | None = None
    traces: list = field(default_factory=list, repr=False, compare=False)

    def features(self, x) -> Tensor:
        f = forward_F(self.params["F"], x, self.spec)
        if self.recalibration is not None and self.source_moments is not None:
            f = recalibrate(f, self.source_moments, self.recalibration)
        return f

    def copy(self) -> "TrainedModel":
        return TrainedModel(self.params.copy(), self.spec, dict(self.config), self.trace_path,
                            self.source_moments, self.recalibration, list(self.traces))


def param_census(params: ParamSet, spec: ModelSpec = ModelSpec()) -> dict[str, str]:
    """Map every parameter tensor touched by the forward passes to its group."""
    from .autodiff import Tape

    leaves = {g: params[g].leaves() for g in GROUP_NAMES}
    x = np.zeros((1, *spec.input_shape))
    with Tape() as tape:
        f = forward_F(leaves["F"], x, spec)
        forward_Ca(leaves["C"], leaves["A"], f, spec.residual)
        forward_C(leaves["C"], f)
        forward_D(leaves["D"], f, spec)
        forward_R(leaves["R"], forward_C_l1(leaves["C"], f))
    seen: dict[str, str] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.node is None and t.requires_grad:
                seen[t.name] = t.name.split(".")[0]
    return seen


def save_model(model: TrainedModel, path: str | Path) -> Path:
    """Write a versioned JSON manifest, one record per tensor (row-major values)."""
    path = Path(path)
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "spec": asdict(model.spec),
        "config": model.config,
        "trace_path": model.trace_path,
        "source_moments": model.source_moments.to_dict() if model.source_moments else None,
        "recalibration": model.recalibration.to_dict() if model.recalibration else None,
        "tensors": [
            {"name": name, "shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in model.params.flat()
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_model(path: str | Path) -> TrainedModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a model manifest")
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {doc.get('version')}")
    groups: dict[str, dict[str, Tensor]] = {g: {} for g in GROUP_NAMES}
    for rec in doc["tensors"]:
        g, k = rec["name"].split(".", 1)
        data = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        groups[g][k] = Tensor(data, name=rec["name"])
    params = ParamSet({g: ParamGroup(g, t) for g, t in groups.items()})
    sm = doc.get("source_moments")
    rc = doc.get("recalibration")
    return TrainedModel(
        params=params,
        spec=ModelSpec(**doc["spec"]),
        config=doc.get("config", {}),
        trace_path=doc.get("trace_path"),
        source_moments=Moments.from_dict(sm) if sm else None,
        recalibration=Moments.from_dict(rc) if rc else None,
    )


def predict_probs(model: TrainedModel, x) -> np.ndarray:
    with no_record():
        f = model.features(x)
        return forward_Ca(model.params["C"], model.params["A"], f, model.spec.residual).data
