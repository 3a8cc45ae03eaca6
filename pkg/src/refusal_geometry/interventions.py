"""Directional ablation, activation addition and difference-in-means extraction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import torch
from torch import Tensor

from refusal_geometry.model import Intervention, ToyModel
from refusal_geometry.scoring import refusal_propensity, retain_kl_batch
from refusal_geometry.tensorcore import DTYPE
from refusal_geometry.toytask import pad_batch

log = logging.getLogger(__name__)

DIRECTION_SCHEMA_VERSION = 1
Source = Literal["DIM", "RDO", "cone-sample", "RepInd", "random"]


class DegenerateDirectionError(ValueError):
    pass


@dataclass
class Direction:
    """Unit vector plus the metadata needed to use it as an intervention.

    ``norm_at_extraction`` is the magnitude before normalization and serves
    as the default addition/subtraction coefficient.
    """

    vector: Tensor
    norm_at_extraction: float = 1.0
    source: str = "random"
    layer: int | None = None
    position: int | str | None = "last"
    model_checksum: str | None = None
    degenerate: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = torch.as_tensor(self.vector, dtype=DTYPE).detach().clone()
        n = float(v.norm())
        if n == 0.0:
            if not self.degenerate:
                raise DegenerateDirectionError("zero-norm direction")
        elif abs(n - 1.0) > 1e-14:  # already-unit vectors stay bit-identical across save/load
            v = v / n
        self.vector = v

    @property
    def d_model(self) -> int:
        return self.vector.shape[0]

    def ablation(self) -> Intervention:
        return Intervention.ablate(self.vector)

    def addition(self, layer: int | None = None, alpha: float | None = None, sign: str = "+") -> Intervention:
        layer = self.layer if layer is None else layer
        alpha = self.norm_at_extraction if alpha is None else alpha
        kind = "add" if sign == "+" else "subtract"
        return Intervention(kind, self.vector, alpha, layer)

    def to_dict(self) -> dict:
        return {
            "schema_version": DIRECTION_SCHEMA_VERSION,
            "vector": [float(x) for x in self.vector],
            "norm_at_extraction": float(self.norm_at_extraction),
            "source": self.source,
            "layer": self.layer,
            "position": self.position,
            "model_checksum": self.model_checksum,
            "degenerate": self.degenerate,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Direction":
        if d.get("schema_version") != DIRECTION_SCHEMA_VERSION:
            raise ValueError(f"unsupported direction schema {d.get('schema_version')}")
        return cls(
            torch.tensor(d["vector"], dtype=DTYPE),
            d["norm_at_extraction"],
            d["source"],
            d["layer"],
            d["position"],
            d.get("model_checksum"),
            d.get("degenerate", False),
            d.get("meta", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Direction":
        return cls.from_dict(json.loads(Path(path).read_text()))


def random_direction(d_model: int, seed: int) -> Direction:
    g = torch.Generator().manual_seed(seed)
    return Direction(torch.randn(d_model, generator=g, dtype=DTYPE), source="random")


def _as_unit(r) -> Tensor:
    v = r.vector if isinstance(r, Direction) else torch.as_tensor(r, dtype=DTYPE)
    n = v.norm()
    if float(n) == 0.0:
        raise DegenerateDirectionError("zero-norm direction")
    return v / n


def ablate_vector(x, r) -> Tensor:
    """Remove the component of ``x`` along ``r``."""
    x = torch.as_tensor(x, dtype=DTYPE)
    rhat = _as_unit(r)
    if x.shape[-1] != rhat.shape[-1]:
        raise ValueError(f"dimension mismatch: x has {x.shape[-1]}, direction has {rhat.shape[-1]}")
    return x - (x @ rhat).unsqueeze(-1) * rhat


def add_scaled(x, r, alpha: float, sign: str = "+") -> Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    rhat = _as_unit(r)
    if x.shape[-1] != rhat.shape[-1]:
        raise ValueError(f"dimension mismatch: x has {x.shape[-1]}, direction has {rhat.shape[-1]}")
    if not torch.isfinite(torch.as_tensor(alpha)):
        raise ValueError("alpha must be finite")
    return x + alpha * rhat if sign == "+" else x - alpha * rhat


def _positions(prompts: list[list[int]], position) -> list[int]:
    if position == "last":
        return [len(p) - 1 for p in prompts]
    pos = int(position)
    for p in prompts:
        if not -len(p) <= pos < len(p):
            raise ValueError(f"position {pos} invalid for a prompt of length {len(p)}")
    return [pos % len(p) for p in prompts]


@torch.no_grad()
def activations_at(
    model: ToyModel, prompts: list[list[int]], layer: int, position="last", intervention: Intervention | None = None
) -> Tensor:
    """Residual-stream vectors ``[n_prompts, d]`` at one hook point and token position."""
    tokens, _ = pad_batch(prompts)
    kw = {} if intervention is None else {"intervention": intervention}
    _, tr = model(tokens, trace=True, **kw)
    idx = torch.tensor(_positions(prompts, position))
    return tr.resid[layer][torch.arange(len(prompts)), idx]


def extract_dim(
    model: ToyModel,
    harmful: list[list[int]],
    safe: list[list[int]],
    layer: int,
    position="last",
) -> Direction:
    """Difference between mean harmful and mean safe activations, normalized."""
    if not harmful or not safe:
        raise ValueError("both prompt sets must be non-empty")
    if not 0 <= layer < model.n_points:
        raise ValueError(f"layer {layer} outside [0, {model.n_points})")
    mh = activations_at(model, harmful, layer, position).mean(0)
    ms = activations_at(model, safe, layer, position).mean(0)
    v = mh - ms
    norm = float(v.norm())
    degenerate = norm < 1e-8
    if degenerate:
        log.warning("difference-in-means at layer %d is degenerate (norm %.3g)", layer, norm)
        v = torch.zeros_like(v)
    return Direction(v, norm, "DIM", layer, position, model.checksum(), degenerate=degenerate)


@dataclass
class ValidationSet:
    harmful: list[list[int]]
    safe: list[list[int]]
    safe_targets: list[list[int]]


@dataclass
class Selection:
    direction: Direction
    index: int
    scores: list[float]
    kls: list[float]
    warning: bool = False


@torch.no_grad()
def score_direction(model: ToyModel, direction: Direction, val: ValidationSet) -> tuple[float, float]:
    """(mean refusal-propensity drop under ablation on harmful, mean side-effect KL on safe)."""
    base = refusal_propensity(model, val.harmful)
    abl = refusal_propensity(model, val.harmful, direction.ablation())
    kl = retain_kl_batch(model, val.safe, val.safe_targets, direction.ablation())
    return float((base - abl).mean()), float(kl.mean())


def select_direction(
    model: ToyModel,
    candidates: list[Direction],
    val: ValidationSet,
    kl_threshold: float = 0.1,
) -> Selection:
    """Highest refusal-score drop among candidates under the KL threshold.

    Ties break on lower KL, then lower index. If every candidate exceeds the
    threshold the best-scoring one is returned with ``warning`` set.
    """
    if not candidates:
        raise ValueError("no candidates")
    scores, kls = [], []
    for c in candidates:
        s, k = score_direction(model, c, val)
        scores.append(s)
        kls.append(k)
    ok = [i for i, k in enumerate(kls) if k < kl_threshold]
    warning = not ok
    pool = ok or list(range(len(candidates)))
    best = min(pool, key=lambda i: (-scores[i], kls[i], i))
    if warning:
        log.warning("all %d candidates exceed KL threshold %.3g", len(candidates), kl_threshold)
    return Selection(candidates[best], best, scores, kls, warning)
