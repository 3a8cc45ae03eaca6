"""Representational independence: cosine profiles, the independence penalty, and the search."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import Tensor

from refusal_geometry.directionopt import (
    BatchTensors,
    OptimConfig,
    PromptRecord,
    RDOResult,
    rdo_train,
)
from refusal_geometry.interventions import Direction, ValidationSet
from refusal_geometry.model import NO_INTERVENTION, Intervention, ToyModel
from refusal_geometry.scoring import refusal_propensity, refused_under_directions
from refusal_geometry.tensorcore import DTYPE, cosine
from refusal_geometry.toytask import pad_batch

log = logging.getLogger(__name__)


def layer_set(n_points: int, cutoff: float = 0.9) -> list[int]:
    """The first ``cutoff`` fraction of hook points (at least one, rounded down)."""
    if not 0 < cutoff <= 1:
        raise ValueError("cutoff must lie in (0, 1]")
    return list(range(max(1, int(cutoff * n_points + 1e-9))))


@dataclass
class CosineProfile:
    values: list[float]  # one per hook point
    intervention: str = "none"

    def to_dict(self) -> dict:
        return {"values": self.values, "intervention": self.intervention}


def _vec(d) -> Tensor:
    return (d.vector if isinstance(d, Direction) else torch.as_tensor(d)).to(DTYPE)


def _last_index(prompts: list[list[int]]) -> Tensor:
    return torch.tensor([len(p) - 1 for p in prompts])


def last_token_cosines(model: ToyModel, direction, prompts, intervention: Intervention = NO_INTERVENTION) -> Tensor:
    """``[n_points, n_prompts]`` cosine between the direction and the last-token residual."""
    r = _vec(direction)
    if r.shape[-1] != model.cfg.d_model:
        raise ValueError(f"direction dimension {r.shape[-1]} != d_model {model.cfg.d_model}")
    if not prompts:
        raise ValueError("no prompts")
    tokens, _ = pad_batch(prompts)
    _, tr = model(tokens, intervention, trace=True)
    idx = _last_index(prompts)
    rows = torch.arange(len(prompts))
    return torch.stack([cosine(x[rows, idx], r) for x in tr.resid])


@torch.no_grad()
def cosine_profile(model: ToyModel, direction, prompts, intervention: Intervention = NO_INTERVENTION) -> CosineProfile:
    c = last_token_cosines(model, direction, prompts, intervention).mean(1)
    return CosineProfile([float(x) for x in c], intervention.kind)


def _token_cosines(resid: list[Tensor], r: Tensor, layers: list[int]) -> Tensor:
    return torch.stack([cosine(resid[l], r) for l in layers])  # [n_layers, batch, seq]


def repind_loss(
    model: ToyModel,
    r: Tensor,
    v: Tensor,
    prompts: list[list[int]] | Tensor,
    layers: list[int],
    mask: Tensor | None = None,
    clean: list[Tensor] | None = None,
    v_ablated: list[Tensor] | None = None,
) -> Tensor:
    """Mean squared change of each direction's cosine when the other is ablated.

    Averaged over the layer set and over every prompt token. ``clean`` and
    ``v_ablated`` residual traces may be passed in to skip recomputation.
    """
    if not layers:
        raise ValueError("empty layer set")
    if isinstance(prompts, Tensor):
        tokens = prompts
        if mask is None:
            mask = torch.ones(tokens.shape, dtype=torch.bool)
    else:
        tokens, mask = pad_batch(prompts)
    v = v.to(DTYPE)
    if clean is None or v_ablated is None:
        with torch.no_grad():
            clean = model(tokens, trace=True)[1].resid
            v_ablated = model(tokens, Intervention.ablate(v), trace=True)[1].resid
    r_ablated = model(tokens, Intervention.ablate(r), trace=True)[1].resid
    term_r = (_token_cosines(clean, r, layers) - _token_cosines(v_ablated, r, layers)) ** 2
    term_v = (_token_cosines(clean, v, layers) - _token_cosines(r_ablated, v, layers)) ** 2
    per_token = (term_r + term_v).mean(0)  # [batch, seq]
    m = mask.to(per_token.dtype)
    return ((per_token * m).sum(1) / m.sum(1)).mean()


@dataclass
class IndependenceConstraintSet:
    directions: list[Tensor] = field(default_factory=list)
    cutoff: float = 0.9
    weight: float = 200.0

    def __post_init__(self):
        if not 0 < self.cutoff <= 1:
            raise ValueError("cutoff must lie in (0, 1]")
        self.directions = [_vec(d) / _vec(d).norm() for d in self.directions]


def independence_penalty(model: ToyModel, constraints: IndependenceConstraintSet):
    """Build the extra loss ``weight * sum_j repind_loss(r, v_j)`` over a batch's harmful prompts."""
    layers = layer_set(model.n_points, constraints.cutoff)
    cache: dict[int, tuple] = {}

    def extra(r: Tensor, batch: BatchTensors) -> Tensor:
        if not constraints.directions:
            return torch.zeros((), dtype=DTYPE)
        inputs, _, target_mask = batch.harm
        # prompt tokens only: positions before the first target prediction
        first = target_mask.float().argmax(1)
        pos = torch.arange(inputs.shape[1])
        prompt_mask = pos.unsqueeze(0) <= first.unsqueeze(1)
        key = hash(inputs.numpy().tobytes())
        if key not in cache:
            with torch.no_grad():
                clean = model(inputs, trace=True)[1].resid
                abl = [model(inputs, Intervention.ablate(v), trace=True)[1].resid for v in constraints.directions]
            cache.clear()
            cache[key] = (clean, abl)
        clean, abl = cache[key]
        total = sum(
            repind_loss(model, r, v, inputs, layers, prompt_mask, clean, a)
            for v, a in zip(constraints.directions, abl)
        )
        return constraints.weight * total

    return extra


@dataclass
class IndependenceReport:
    deviation_r: list[float]  # per layer in the set: |cos(x, r) - cos(x_abl(v), r)|
    deviation_v: list[float]
    layers: list[int]
    epsilon: float

    @property
    def max_deviation_r(self) -> float:
        return max(self.deviation_r)

    @property
    def max_deviation_v(self) -> float:
        return max(self.deviation_v)

    @property
    def passed(self) -> bool:
        return self.max_deviation_r < self.epsilon and self.max_deviation_v < self.epsilon

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "deviation_r": self.deviation_r,
            "deviation_v": self.deviation_v,
            "max_deviation_r": self.max_deviation_r,
            "max_deviation_v": self.max_deviation_v,
            "epsilon": self.epsilon,
            "pass": self.passed,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))


@torch.no_grad()
def verify_independence(
    model: ToyModel,
    r,
    v,
    prompts: list[list[int]],
    epsilon: float = 0.05,
    cutoff: float = 0.9,
) -> IndependenceReport:
    """Compare each direction's mean last-token cosine with and without ablating the other."""
    r, v = _vec(r), _vec(v)
    layers = layer_set(model.n_points, cutoff)
    clean_r = last_token_cosines(model, r, prompts).mean(1)
    clean_v = last_token_cosines(model, v, prompts).mean(1)
    r_under_v = last_token_cosines(model, r, prompts, Intervention.ablate(v)).mean(1)
    v_under_r = last_token_cosines(model, v, prompts, Intervention.ablate(r)).mean(1)
    dev_r = [float((clean_r[l] - r_under_v[l]).abs()) for l in layers]
    dev_v = [float((clean_v[l] - v_under_r[l]).abs()) for l in layers]
    return IndependenceReport(dev_r, dev_v, layers, epsilon)


@dataclass
class RepIndResult:
    direction: Direction
    candidates: list[RDOResult]
    refusal_scores: list[float]
    failed: bool
    baseline_asr: float
    asr: float


def train_repind_direction(
    model: ToyModel,
    records: list[PromptRecord],
    constraints: IndependenceConstraintSet,
    cfg: OptimConfig,
    val: ValidationSet,
    n_candidates: int = 5,
    random_seed: int = 12345,
) -> RepIndResult:
    """Train candidates with the independence penalty; keep the lowest validation refusal score."""
    extra = independence_penalty(model, constraints) if constraints.directions else None
    candidates, scores = [], []
    for k in range(n_candidates):
        c_cfg = OptimConfig(**{**cfg.__dict__, "seed": cfg.seed + k})
        res = rdo_train(model, records, c_cfg, val, extra_loss=extra, source="RepInd")
        candidates.append(res)
        with torch.no_grad():
            scores.append(float(refusal_propensity(model, val.harmful, res.direction.ablation()).mean()))
    best = min(range(n_candidates), key=lambda i: (scores[i], i))
    chosen = candidates[best].direction
    g = torch.Generator().manual_seed(random_seed)
    rand = torch.randn((1, model.cfg.d_model), generator=g, dtype=DTYPE)
    base = float((~refused_under_directions(model, val.harmful, rand)).float().mean())
    asr = float((~refused_under_directions(model, val.harmful, chosen.vector.unsqueeze(0))).float().mean())
    failed = asr <= base
    if failed:
        log.warning("no independent candidate beats the random-direction ASR %.3f", base)
    chosen.meta.update({"candidate": best, "refusal_scores": scores})
    return RepIndResult(chosen, candidates, scores, failed, base, asr)
