"""Refusal cone optimization: orthonormal bases, uniform cone sampling, training."""

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
    compute_loss,
    optimize_directions,
)
from refusal_geometry.interventions import Direction, ValidationSet, select_direction
from refusal_geometry.model import Intervention, ToyModel
from refusal_geometry.scoring import refusal_propensity, refused_under_directions
from refusal_geometry.tensorcore import DTYPE

log = logging.getLogger(__name__)

CONE_SCHEMA_VERSION = 1


class DegenerateBasisError(ValueError):
    def __init__(self, index: int, residual: float):
        super().__init__(f"vector {index} is (nearly) in the span of the previous ones (residual {residual:.3g})")
        self.index = index


def gram_schmidt(vectors, tol: float = 1e-8) -> Tensor:
    """Classical Gram-Schmidt with one re-orthogonalization pass.

    Rows of the result are orthonormal, span the input rows, and the first
    row keeps the first input's direction. A row whose residual falls below
    ``tol`` relative to its own norm raises :class:`DegenerateBasisError`.
    """
    v = torch.as_tensor(vectors, dtype=DTYPE)
    if v.dim() == 1:
        v = v.unsqueeze(0)
    out: list[Tensor] = []
    for i, x in enumerate(v):
        scale = float(x.norm())
        w = x.clone()
        for _ in range(2):
            for q in out:
                w = w - (q @ w) * q
        res = float(w.norm())
        if scale == 0.0 or res < tol * max(scale, 1.0) or res < tol:
            raise DegenerateBasisError(i, res)
        out.append(w / res)
    return torch.stack(out)


@dataclass
class ConeBasis:
    vectors: Tensor  # [N, d], orthonormal rows
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = torch.as_tensor(self.vectors, dtype=DTYPE)
        n, d = self.vectors.shape
        if not 1 <= n <= d:
            raise ValueError(f"cone dimension {n} must be in [1, {d}]")
        gram = self.vectors @ self.vectors.T
        err = float((gram - torch.eye(n, dtype=DTYPE)).abs().max())
        if err >= 1e-6:
            raise ValueError(f"basis is not orthonormal (max |B B^T - I| = {err:.3g})")

    @property
    def N(self) -> int:
        return self.vectors.shape[0]

    def to_dict(self) -> dict:
        return {
            "schema_version": CONE_SCHEMA_VERSION,
            "N": self.N,
            "vectors": [[float(x) for x in row] for row in self.vectors],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConeBasis":
        if d.get("schema_version") != CONE_SCHEMA_VERSION:
            raise ValueError(f"unsupported cone schema {d.get('schema_version')}")
        basis = cls(torch.tensor(d["vectors"], dtype=DTYPE), d.get("meta", {}))
        if basis.N != d["N"]:
            raise ValueError("N does not match the number of vectors")
        return basis

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ConeBasis":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ConeSample:
    coefficients: Tensor  # [N], nonnegative, unit norm
    direction: Tensor     # [d], unit norm


def sample_coefficients(n: int, k: int, generator: torch.Generator) -> Tensor:
    """``k`` points uniform on the positive-orthant patch of the unit sphere in R^n."""
    g = torch.randn((k, n), generator=generator, dtype=DTYPE).abs()
    return g / g.norm(dim=1, keepdim=True)


def sample_cone_direction(basis: ConeBasis | Tensor, generator: torch.Generator) -> ConeSample:
    b = basis.vectors if isinstance(basis, ConeBasis) else basis
    s = sample_coefficients(b.shape[0], 1, generator)[0]
    return ConeSample(s, s @ b)


def sample_cone_directions(basis: ConeBasis | Tensor, k: int, generator: torch.Generator) -> Tensor:
    b = basis.vectors if isinstance(basis, ConeBasis) else basis
    return sample_coefficients(b.shape[0], k, generator) @ b


@dataclass
class RCOResult:
    basis: ConeBasis
    pool: list[Tensor]
    history: list[dict]
    effective_found: bool = True
    recoveries: int = 0


def _project_basis(param: Tensor, generator: torch.Generator, counter: list[int]) -> None:
    while True:
        try:
            param.copy_(gram_schmidt(param))
            return
        except DegenerateBasisError as exc:
            log.warning("degenerate basis at vector %d; re-randomizing it", exc.index)
            counter[0] += 1
            param[exc.index] = torch.randn(param.shape[1], generator=generator, dtype=DTYPE)


def rco_train(
    model: ToyModel,
    records: list[PromptRecord],
    cfg: OptimConfig,
    n_dim: int,
    samples_per_step: int = 16,
    val: ValidationSet | None = None,
    min_effective_asr: float = 0.5,
    selection_samples: int = 16,
) -> RCOResult:
    """Projected gradient descent on a cone basis.

    Each step averages the direction loss over fresh cone samples (one set of
    ``samples_per_step`` per accumulation chunk) and over the basis vectors
    themselves, steps, and re-orthonormalizes the basis.
    """
    if n_dim < 1:
        raise ValueError("cone dimension must be >= 1")
    d = model.cfg.d_model
    gen = torch.Generator().manual_seed(cfg.seed)
    init = torch.randn((n_dim, d), generator=gen, dtype=DTYPE)
    recoveries = [0]
    _project_basis(init, gen, recoveries)
    sample_gen = torch.Generator().manual_seed(cfg.seed + 1)

    def loss_fn(b: Tensor, batch: BatchTensors, step: int):
        if n_dim == 1:
            # every sample coincides with the single basis vector
            terms = compute_loss(b[0], model, batch, cfg)
            return terms.total, {"sample": terms.total.item(), "basis": terms.total.item()}
        chunks = min(cfg.accumulation_steps, batch.n)
        per_chunk = -(-batch.n // chunks)
        rows = []
        for c in range(chunks):
            n_rows = min(per_chunk, batch.n - c * per_chunk)
            if n_rows <= 0:
                break
            coeffs = sample_coefficients(n_dim, samples_per_step, sample_gen)
            rows.append((n_rows, coeffs))
        # record i of chunk c pairs with every sample drawn for chunk c
        coeff_rows = torch.cat([c.repeat(n, 1) for n, c in rows])  # [n * S, N], record-major
        tiled = batch.tiled(samples_per_step)
        dirs = coeff_rows @ b
        l_sample = compute_loss(dirs, model, tiled, cfg).total
        basis_rows = b.repeat(batch.n, 1)  # record-major, N per record
        l_basis = compute_loss(basis_rows, model, batch.tiled(n_dim), cfg).total
        return l_sample + l_basis, {"sample": l_sample.item(), "basis": l_basis.item()}

    pool, history = optimize_directions(
        model, records, cfg, init, loss_fn,
        project=lambda p: _project_basis(p, gen, recoveries),
    )
    meta = {"seed": cfg.seed, "steps": len(history), "model_checksum": model.checksum(),
            "alpha": cfg.alpha, "layer": cfg.l_add}
    if val is None:
        return RCOResult(ConeBasis(pool[-1], meta), pool, history, True, recoveries[0])
    if n_dim == 1:
        sel = select_direction(model, [Direction(p[0]) for p in pool], val)
        meta["selected_from_last"] = len(pool)
        return RCOResult(ConeBasis(pool[sel.index], meta), pool, history, not sel.warning, recoveries[0])
    best, found = select_basis(model, pool, val, min_effective_asr, selection_samples, cfg.seed)
    meta["selected_from_last"] = len(pool)
    return RCOResult(ConeBasis(pool[best], meta), pool, history, found, recoveries[0])


@torch.no_grad()
def select_basis(
    model: ToyModel,
    pool: list[Tensor],
    val: ValidationSet,
    min_effective_asr: float = 0.5,
    n_samples: int = 16,
    seed: int = 0,
) -> tuple[int, bool]:
    """Index of the chosen basis and whether every basis vector was effective.

    Candidates whose basis vectors all reach ``min_effective_asr`` under
    ablation on the validation harmful prompts are preferred; among them (or
    among all, as a fallback) the one whose cone samples give the largest
    mean refusal-score drop wins.
    """
    base = refusal_propensity(model, val.harmful)
    sample_scores, effective = [], []
    for b in pool:
        refused = refused_under_directions(model, val.harmful, b)
        effective.append(bool(((~refused).float().mean(1) >= min_effective_asr).all()))
        g = torch.Generator().manual_seed(seed)
        dirs = sample_cone_directions(b, n_samples, g)
        drops = []
        for r in dirs:
            drops.append(float((base - refusal_propensity(model, val.harmful, Intervention.ablate(r))).mean()))
        sample_scores.append(sum(drops) / len(drops))
    ok = [i for i, e in enumerate(effective) if e]
    pool_idx = ok or list(range(len(pool)))
    best = max(pool_idx, key=lambda i: (sample_scores[i], -i))
    return best, bool(ok)


@dataclass
class ConeEvaluation:
    asr: list[float]
    coefficients: list[list[float]]

    @property
    def summary(self) -> dict:
        t = torch.tensor(self.asr, dtype=DTYPE)
        return {"min": float(t.min()), "median": float(t.median()), "max": float(t.max()),
                "mean": float(t.mean()), "n_samples": len(self.asr)}


def evaluate_cone(
    model: ToyModel,
    basis: ConeBasis,
    harmful: list[list[int]],
    n_samples: int = 256,
    seed: int = 0,
    max_new_tokens: int = 8,
) -> ConeEvaluation:
    """Directional-ablation ASR of ``n_samples`` uniform cone samples."""
    g = torch.Generator().manual_seed(seed)
    coeffs = sample_coefficients(basis.N, n_samples, g)
    dirs = coeffs @ basis.vectors
    refused = refused_under_directions(model, harmful, dirs, max_new_tokens)
    asr = (~refused).to(DTYPE).mean(1)
    return ConeEvaluation([float(a) for a in asr], [[float(c) for c in row] for row in coeffs])
