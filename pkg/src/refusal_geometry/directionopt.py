"""Refusal direction optimization: targets, losses and the projected-gradient loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
from torch import Tensor

from refusal_geometry.interventions import Direction, Selection, ValidationSet, select_direction
from refusal_geometry.model import Intervention, ToyModel, generate_batch
from refusal_geometry.scoring import retain_kl_batch, retain_mask
from refusal_geometry.tensorcore import DTYPE, kl_divergence, log_softmax
from refusal_geometry.toytask import REFUSAL_TEMPLATE, pad_batch

log = logging.getLogger(__name__)

# Target lengths, shortened from 30/29 tokens to fit the toy context.
ANSWER_TOKENS = 8
RETAIN_TOKENS = 7


@dataclass
class PromptRecord:
    p_harm: list[int]
    p_safe: list[int]
    t_answer: list[int]
    t_refusal: list[int]
    t_retain: list[int]

    def __post_init__(self):
        for name in ("p_harm", "p_safe", "t_answer", "t_refusal", "t_retain"):
            if not getattr(self, name):
                raise ValueError(f"PromptRecord field {name} is empty")

    def to_dict(self) -> dict:
        return asdict(self)


def save_records(records: list[PromptRecord], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_records(path: str | Path) -> list[PromptRecord]:
    with open(path) as f:
        return [PromptRecord(**json.loads(line)) for line in f if line.strip()]


@dataclass
class TargetReport:
    records: list[PromptRecord]
    answer_rate: float  # fraction of t_answer that are not refusals
    dropped: int
    low_quality: bool


def _contains(seq, sub) -> bool:
    sub = list(sub)
    return any(list(seq[i : i + len(sub)]) == sub for i in range(len(seq) - len(sub) + 1))


def generate_targets(
    model: ToyModel,
    seed_direction: Direction,
    harmful: list[list[int]],
    safe: list[list[int]],
    alpha: float | None = None,
    layer: int | None = None,
    answer_tokens: int = ANSWER_TOKENS,
    retain_tokens: int = RETAIN_TOKENS,
    min_answer_rate: float = 0.5,
) -> TargetReport:
    """Pair prompts into records whose targets come from the model itself.

    ``t_answer``: greedy completion of the harmful prompt with the seed direction ablated.
    ``t_refusal``: greedy completion of the safe prompt with the seed direction added.
    ``t_retain``: greedy completion of the safe prompt, no intervention.
    """
    n = min(len(harmful), len(safe))
    layer = seed_direction.layer if layer is None else layer
    add = seed_direction.addition(layer=layer, alpha=alpha)
    n_seq = model.cfg.max_seq_len
    keep, dropped = [], 0
    for i in range(n):
        if max(len(harmful[i]), len(safe[i])) + answer_tokens > n_seq:
            log.warning("dropping record %d: prompt plus %d target tokens exceeds context", i, answer_tokens)
            dropped += 1
        else:
            keep.append(i)
    hp = [harmful[i] for i in keep]
    sp = [safe[i] for i in keep]
    answers = generate_batch(model, hp, answer_tokens, seed_direction.ablation())
    refusals = generate_batch(model, sp, answer_tokens, add)
    retains = generate_batch(model, sp, retain_tokens)
    records = [
        PromptRecord(list(h), list(s), a[len(h):], r[len(s):], k[len(s):])
        for h, s, a, r, k in zip(hp, sp, answers, refusals, retains)
    ]
    rate = sum(not _contains(rec.t_answer, REFUSAL_TEMPLATE) for rec in records) / max(len(records), 1)
    low = rate < min_answer_rate
    if low:
        log.warning("seed direction answers only %.0f%% of harmful prompts; targets are low quality", 100 * rate)
    return TargetReport(records, rate, dropped, low)


@dataclass
class OptimConfig:
    lambda_abl: float = 1.0
    lambda_add: float = 0.2
    lambda_ret: float = 1.0
    alpha: float = 1.0
    l_add: int = 0
    lr: float = 0.01
    batch_size: int = 16
    accumulation_steps: int = 16
    max_steps: int = 200
    retain_tokens: int = RETAIN_TOKENS
    seed: int = 0
    plateau_window: int = 5
    plateau_patience: int = 2
    plateau_tol: float = 0.01
    min_steps: int = 60
    lr_factor: float = 0.1
    max_lr_reductions: int = 2
    flat_steps: int = 10
    pool_size: int = 20
    divergence_steps: int = 25

    def __post_init__(self):
        for name in ("lambda_abl", "lambda_add", "lambda_ret"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size % self.accumulation_steps and self.accumulation_steps > self.batch_size:
            raise ValueError("accumulation_steps cannot exceed batch_size")

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        return cls(**d)


@dataclass
class LossTerms:
    ablation: Tensor
    addition: Tensor
    retain: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("ablation", "addition", "retain", "total")}


def _row_ce(logits: Tensor, targets: Tensor, mask: Tensor) -> Tensor:
    nll = -log_softmax(logits, -1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    m = mask.to(nll.dtype)
    return (nll * m).sum(1) / m.sum(1)


def target_batch(prompts: list[list[int]], targets: list[list[int]]):
    """Inputs, next-token labels and a mask over the target predictions only."""
    seqs = [list(p) + list(t) for p, t in zip(prompts, targets)]
    tokens, valid = pad_batch(seqs)
    inputs, labels = tokens[:, :-1], tokens[:, 1:]
    mask = torch.zeros_like(labels, dtype=torch.bool)
    for i, (p, t) in enumerate(zip(prompts, targets)):
        mask[i, len(p) - 1 : len(p) - 1 + len(t)] = True
    return inputs, labels, mask


class BatchTensors:
    """Pre-tokenized tensors for one batch of records (reused across directions)."""

    def __init__(self, model: ToyModel, records: list[PromptRecord], retain_tokens: int = RETAIN_TOKENS):
        self.n = len(records)
        self.harm = target_batch([r.p_harm for r in records], [r.t_answer for r in records])
        self.safe = target_batch([r.p_safe for r in records], [r.t_refusal for r in records])
        ret_t = [r.t_retain[:retain_tokens] for r in records]
        seqs = [list(r.p_safe) + t for r, t in zip(records, ret_t)]
        self.ret_tokens, _ = pad_batch(seqs)
        self.ret_mask = retain_mask([len(r.p_safe) for r in records], [len(t) for t in ret_t], self.ret_tokens.shape[1])
        with torch.no_grad():
            self.ret_clean, _ = model(self.ret_tokens)

    def tiled(self, k: int) -> "BatchTensors":
        """Repeat every row ``k`` times (row-major: record i occupies rows i*k..i*k+k-1)."""
        out = object.__new__(BatchTensors)
        out.n = self.n * k
        rep = lambda t: t.repeat_interleave(k, dim=0)
        out.harm = tuple(rep(t) for t in self.harm)
        out.safe = tuple(rep(t) for t in self.safe)
        out.ret_tokens = rep(self.ret_tokens)
        out.ret_mask = rep(self.ret_mask)
        out.ret_clean = rep(self.ret_clean)
        return out


def compute_loss(
    r: Tensor,
    model: ToyModel,
    batch: BatchTensors | list[PromptRecord],
    cfg: OptimConfig,
    reduce: bool = True,
) -> LossTerms:
    """Weighted ablation, addition and retain losses for direction ``r``.

    ``r`` is ``[d]`` or one direction per batch row ``[n, d]``. With
    ``reduce=False`` the terms stay per row.
    """
    if not isinstance(batch, BatchTensors):
        if not batch:
            raise ValueError("empty batch")
        batch = BatchTensors(model, batch, cfg.retain_tokens)
    if not torch.isfinite(r).all():
        raise FloatingPointError("direction is not finite")

    def term(weight: float, fn) -> Tensor:
        if weight == 0:
            return torch.zeros(batch.n, dtype=DTYPE)
        return fn()

    def ablation():
        inputs, labels, mask = batch.harm
        logits, _ = model(inputs, Intervention.ablate(r))
        return _row_ce(logits, labels, mask)

    def addition():
        inputs, labels, mask = batch.safe
        logits, _ = model(inputs, Intervention.add(r, cfg.alpha, cfg.l_add))
        return _row_ce(logits, labels, mask)

    def retain():
        logits, _ = model(batch.ret_tokens, Intervention.ablate(r))
        kl = kl_divergence(batch.ret_clean, logits)
        m = batch.ret_mask.to(kl.dtype)
        return (kl * m).sum(1) / m.sum(1)

    la = term(cfg.lambda_abl, ablation)
    ld = term(cfg.lambda_add, addition)
    lr_ = term(cfg.lambda_ret, retain)
    total = cfg.lambda_abl * la + cfg.lambda_add * ld + cfg.lambda_ret * lr_
    if reduce:
        la, ld, lr_, total = la.mean(), ld.mean(), lr_.mean(), total.mean()
    if not torch.isfinite(total).all():
        raise FloatingPointError("non-finite loss")
    return LossTerms(la, ld, lr_, total)


def retain_kl(
    model: ToyModel,
    r,
    p_safe: list[int],
    t_retain: list[int],
) -> Tensor:
    """Mean over the last prompt token and the retain-target positions of KL(clean || ablated)."""
    if not t_retain:
        raise ValueError("empty retain mask")
    vec = r.vector if isinstance(r, Direction) else r
    return retain_kl_batch(model, [p_safe], [t_retain], Intervention.ablate(vec))[0]


class PlateauSchedule:
    """Every ``plateau_window`` batches, compare the window's mean loss with the best so far.

    After ``plateau_patience`` windows without a relative improvement of
    ``plateau_tol`` the learning rate is multiplied by ``lr_factor``, at most
    ``max_lr_reductions`` times. Once those are spent, training stops when the
    loss has been flat for ``flat_steps`` batches. Nothing is reduced during
    the first ``min_steps`` batches (the loss can sit on a saddle early on).
    """

    def __init__(self, optimizer: torch.optim.Optimizer, cfg: OptimConfig):
        self.opt = optimizer
        self.cfg = cfg
        self.window: list[float] = []
        self.best = math.inf
        self.bad_windows = 0
        self.flat = 0
        self.reductions = 0
        self.seen = 0

    def step(self, loss: float) -> bool:
        """Record a batch loss; True once training should stop."""
        cfg = self.cfg
        self.seen += 1
        self.window.append(loss)
        if len(self.window) < cfg.plateau_window:
            return False
        mean = sum(self.window) / len(self.window)
        self.window = []
        if mean < self.best * (1 - cfg.plateau_tol):
            self.best = mean
            self.bad_windows = 0
            self.flat = 0
            return False
        if self.seen < cfg.min_steps:
            return False
        self.bad_windows += 1
        self.flat += cfg.plateau_window
        if self.reductions >= cfg.max_lr_reductions:
            return self.flat >= cfg.flat_steps
        if self.bad_windows >= cfg.plateau_patience:
            self.reductions += 1
            self.bad_windows = 0
            self.flat = 0
            for g in self.opt.param_groups:
                g["lr"] *= cfg.lr_factor
            log.info("plateau: lr -> %.3g", self.opt.param_groups[0]["lr"])
        return False


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, history):
        super().__init__(msg)
        self.history = history


@dataclass
class RDOResult:
    direction: Direction
    pool: list[Direction]
    history: list[dict] = field(default_factory=list)
    selection: Selection | None = None


def batch_order(n: int, batch_size: int, steps: int, seed: int) -> list[list[int]]:
    """Deterministic epoch-shuffled batches of record indices."""
    g = torch.Generator().manual_seed(seed)
    out, perm = [], []
    while len(out) < steps:
        if len(perm) < batch_size:
            perm = perm + torch.randperm(n, generator=g).tolist()
        out.append(perm[:batch_size])
        perm = perm[batch_size:]
    return out


def init_direction(d_model: int, seed: int) -> Tensor:
    g = torch.Generator().manual_seed(seed)
    r = torch.randn(d_model, generator=g, dtype=DTYPE)
    return r / r.norm()


def optimize_directions(
    model: ToyModel,
    records: list[PromptRecord],
    cfg: OptimConfig,
    init: Tensor,
    loss_fn,
    project=None,
    pool_size: int | None = None,
    project_grad=None,
):
    """Shared projected-gradient loop over a parameter tensor.

    ``loss_fn(param, batch_tensors, step)`` returns (scalar loss, info dict);
    ``project(param)`` runs in place after every optimizer step and
    ``project_grad(grad)`` in place before it. Returns the
    last ``pool_size`` parameter snapshots and the history.
    """
    if not records:
        raise ValueError("empty dataset")
    param = init.clone().to(DTYPE).requires_grad_(True)
    opt = torch.optim.AdamW([param], lr=cfg.lr, weight_decay=0.0)
    sched = PlateauSchedule(opt, cfg)
    bs = min(cfg.batch_size, len(records))
    order = batch_order(len(records), bs, cfg.max_steps, cfg.seed)
    pool_size = cfg.pool_size if pool_size is None else pool_size
    pool: list[Tensor] = []
    history: list[dict] = []
    initial = None
    worse = 0
    for step, idx in enumerate(order):
        batch = BatchTensors(model, [records[i] for i in idx], cfg.retain_tokens)
        loss, info = loss_fn(param, batch, step)
        opt.zero_grad()
        loss.backward()
        if project_grad is not None:
            with torch.no_grad():
                project_grad(param.grad)
        opt.step()
        with torch.no_grad():
            if project is not None:
                project(param)
        value = loss.item()
        history.append({"step": step, "loss": value, "lr": opt.param_groups[0]["lr"], **info})
        pool.append(param.detach().clone())
        pool = pool[-pool_size:]
        if initial is None:
            initial = value
        worse = worse + 1 if value > initial else 0
        if worse >= cfg.divergence_steps:
            raise DivergenceError(f"loss above its initial value for {worse} consecutive steps", history)
        if sched.step(value):
            log.info("converged after %d steps", step + 1)
            break
    return pool, history


def renormalize(param: Tensor) -> None:
    param.div_(param.norm())


def rdo_train(
    model: ToyModel,
    records: list[PromptRecord],
    cfg: OptimConfig,
    val: ValidationSet | None = None,
    init: Tensor | None = None,
    extra_loss=None,
    orthogonal_to: list[Tensor] | None = None,
    source: str = "RDO",
) -> RDOResult:
    """Train a unit refusal direction and select from the final checkpoints.

    ``extra_loss(r, batch)`` adds further differentiable terms (the
    independence penalty); ``orthogonal_to`` keeps ``r`` in the orthogonal
    complement of the given vectors by projecting after each step.
    """
    d = model.cfg.d_model
    r0 = init_direction(d, cfg.seed) if init is None else init.to(DTYPE)
    basis = None
    if orthogonal_to:
        q, _ = torch.linalg.qr(torch.stack([v.to(DTYPE) for v in orthogonal_to], 1))
        basis = q

        def project(p):
            p.sub_(basis @ (basis.T @ p))
            renormalize(p)

        project(r0)
    else:
        project = renormalize

    def loss_fn(r, batch, step):
        terms = compute_loss(r, model, batch, cfg)
        loss = terms.total
        info = {k: v for k, v in terms.floats().items()}
        if extra_loss is not None:
            extra = extra_loss(r, batch)
            loss = loss + extra
            info["extra"] = extra.item()
        return loss, info

    project_grad = None
    if basis is not None:
        def project_grad(g):
            g.sub_(basis @ (basis.T @ g))

    pool, history = optimize_directions(model, records, cfg, r0, loss_fn, project, project_grad=project_grad)
    checksum = model.checksum()
    dirs = [
        Direction(p, cfg.alpha, source, cfg.l_add, "last", checksum, meta={"step": history[-len(pool) + i]["step"]})
        for i, p in enumerate(pool)
    ]
    selection = None
    if val is not None:
        selection = select_direction(model, dirs, val)
        best = selection.direction
    else:
        best = dirs[-1]
    return RDOResult(best, dirs, history, selection)


def save_pool(pool: list[Direction], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for d in pool:
        d.save(directory / f"step_{d.meta.get('step', 0):05d}.json")
