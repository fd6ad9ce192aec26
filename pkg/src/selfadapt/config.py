"""Flat ``key = value`` run configuration with typed defaults."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable

from .losses import AblationMask, LossWeights
from .metatrain import MetaConfig
from .model import ModelSpec
from .nn import Hyperparams
from .protocol import VARIANTS, ProtocolConfig
from .ttadapt import AdaptConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_domains: int = 4
    domain_seed: int = 0
    pool_size: int = 200
    alpha: float = 1e-3
    beta: float = 1e-3
    lam: float = 0.1
    mu: float = 10.0
    batch_per_domain: int = 20
    iterations: int = 2000
    grad_mode: str = "second"
    outer_optimizer: str = "adam"
    entropy: str = "bernoulli"
    orth_iterations: int = 2
    use_ae: bool = True
    use_orth: bool = True
    use_ent: bool = True
    disable_meta: bool = False
    residual: str = "pre"
    adapt_epochs: int = 1
    adapt_batch_size: int = 20
    adapt_lr: float = 1e-3
    adapt_optimizer: str = "sgd"
    adapt_on: str = "eval"
    adapt_baseline: str = "none"
    variants: tuple[str, ...] = ("baseline", "ours_wo_adapt", "ours")
    tasks: tuple[int, ...] = ()
    target: int = -1
    out_dir: str = "runs/default"
    workers: int = 1

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {self.schema_version}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError("variants", f"unknown variant {v!r}")
        if self.workers < 1:
            raise ConfigError("workers", "must be at least 1")
        try:
            self.protocol_config()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("config", str(exc)) from None

    # -- derived component configs ------------------------------------------
    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.alpha, self.beta, self.lam, self.mu, self.batch_per_domain,
                           self.adapt_epochs)

    def mask(self) -> AblationMask:
        return AblationMask(self.use_ae, self.use_orth, self.use_ent)

    def meta_config(self) -> MetaConfig:
        return MetaConfig(hyper=self.hyperparams(), grad_mode=self.grad_mode, mask=self.mask(),
                          iterations=self.iterations, seed=self.seed,
                          disable_meta=self.disable_meta, outer_optimizer=self.outer_optimizer,
                          entropy_form=self.entropy, orth_iterations=self.orth_iterations,
                          spec=ModelSpec(residual=self.residual))

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(epochs=self.adapt_epochs, batch_size=self.adapt_batch_size,
                           lr=self.adapt_lr, weights=LossWeights(self.lam, self.mu),
                           mask=self.mask(), baseline=self.adapt_baseline,
                           optimizer=self.adapt_optimizer, entropy_form=self.entropy,
                           orth_iterations=self.orth_iterations)

    def protocol_config(self) -> ProtocolConfig:
        return ProtocolConfig(meta=self.meta_config(), adapt=self.adapt_config(),
                              n_domains=self.n_domains, domain_seed=self.domain_seed,
                              pool_size=self.pool_size, adapt_on=self.adapt_on)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}
_ALIASES = {"lambda": "lam"}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(key: str, raw: str):
    default = getattr(RunConfig(), key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = _FIELDS[key].type
            return tuple(int(s) for s in items) if "int" in str(kind) else tuple(items)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse value {raw!r}") from None


def parse_pairs(pairs: Iterable[tuple[str, str]], base: RunConfig | None = None) -> RunConfig:
    updates = {}
    for key, raw in pairs:
        key = _ALIASES.get(key.strip(), key.strip())
        if key not in _FIELDS:
            raise ConfigError(key, "unknown configuration key")
        updates[key] = _parse_value(key, raw)
    base = base or RunConfig()
    try:
        return replace(base, **updates)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("config", str(exc)) from None


def read_config_text(text: str) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", f"expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults <- config file <- ``key=value`` overrides."""
    pairs: list[tuple[str, str]] = []
    if path is not None:
        pairs += read_config_text(Path(path).read_text())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        k, v = item.split("=", 1)
        pairs.append((k, v))
    return parse_pairs(pairs)
