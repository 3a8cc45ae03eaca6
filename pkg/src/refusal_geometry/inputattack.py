"""Discrete suffix search that suppresses a direction's representation and jailbreaks the toy model.

The suffix is inserted between the prompt content and the closing CHAT_END
token, so the decision position (the last prompt token) stays the same.
Candidate swaps are ranked with the gradient of the attack loss through a
one-hot relaxation of the suffix tokens and then evaluated exactly.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor

from refusal_geometry.model import ToyModel, generate_batch
from refusal_geometry.repind import CosineProfile, cosine_profile
from refusal_geometry.scoring import DEFAULT_MATCHER, RefusalMatcher, is_refusal
from refusal_geometry.tensorcore import DTYPE, cosine
from refusal_geometry.toytask import ANSWER, CHAT_END, SPECIAL_IDS, content_of

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SuffixAttackConfig:
    suffix_len: int = 6
    top_k: int = 8
    max_iters: int = 30
    w_ce: float = 1.0
    w_dir: float = 300.0  # cos^2 of a weakly represented direction is ~1e-3
    late_fraction: float = 0.25
    joint_budget: int = 1024  # evaluate the full product of per-position candidates when it is this small
    seed: int = 0
    allowed: tuple[int, ...] | None = None  # candidate tokens; default: every non-special id

    def __post_init__(self):
        if self.suffix_len < 1:
            raise ValueError("suffix length must be >= 1")
        if self.w_ce < 0 or self.w_dir < 0:
            raise ValueError("loss weights must be >= 0")
        if self.top_k < 1 or self.max_iters < 0:
            raise ValueError("top_k must be >= 1 and max_iters >= 0")
        if not 0 < self.late_fraction <= 1:
            raise ValueError("late_fraction must lie in (0, 1]")
        if self.allowed is not None:
            object.__setattr__(self, "allowed", tuple(sorted(set(self.allowed))))
            if not self.allowed:
                raise ValueError("empty candidate token set")

    def candidates(self, vocab_size: int) -> list[int]:
        if self.allowed is None:
            return [t for t in range(vocab_size) if t not in SPECIAL_IDS]
        if max(self.allowed) >= vocab_size or min(self.allowed) < 0:
            raise ValueError("allowed token outside the vocabulary")
        return list(self.allowed)


def late_layers(n_points: int, fraction: float = 0.25) -> list[int]:
    """The last ``fraction`` of hook points (at least one, rounded up)."""
    k = max(1, math.ceil(fraction * n_points - 1e-9))
    return list(range(n_points - k, n_points))


def insert_suffix(prompt: list[int], suffix: list[int]) -> list[int]:
    if not prompt or prompt[-1] != CHAT_END:
        raise ValueError("prompt must end with CHAT_END")
    return list(prompt[:-1]) + list(suffix) + [CHAT_END]


def attack_target(prompt: list[int]) -> list[int]:
    """Compliance target: the answer marker followed by the first content token."""
    content = content_of(prompt)
    return [ANSWER, *content[:1]]


def _batch_loss(
    model: ToyModel,
    prompts: Tensor,
    target: list[int],
    direction: Tensor,
    cfg: SuffixAttackConfig,
    embeds: Tensor | None = None,
) -> Tensor:
    """Per-row attack loss for equal-length prompts ``[b, p]``."""
    b, p = prompts.shape
    tgt = torch.tensor(target, dtype=torch.long)
    inputs = torch.cat([prompts, tgt[:-1].expand(b, -1)], dim=1)
    if embeds is not None and len(target) > 1:
        embeds = torch.cat([embeds, model.embed(tgt[:-1]).expand(b, -1, -1)], dim=1)
    need_trace = cfg.w_dir > 0
    logits, tr = model(inputs, trace=need_trace, embeds=embeds)
    loss = torch.zeros(b, dtype=DTYPE)
    if cfg.w_ce > 0:
        pred = logits[:, p - 1 : p - 1 + len(target)]
        ce = F.cross_entropy(pred.reshape(-1, pred.shape[-1]), tgt.repeat(b), reduction="none")
        loss = loss + cfg.w_ce * ce.view(b, -1).mean(1)
    if need_trace:
        layers = late_layers(model.n_points, cfg.late_fraction)
        cos2 = torch.stack([cosine(tr.resid[l][:, p - 1], direction) ** 2 for l in layers])
        loss = loss + cfg.w_dir * cos2.mean(0)
    return loss


def attack_loss(
    model: ToyModel,
    prompt: list[int],
    target: list[int],
    direction: Tensor,
    cfg: SuffixAttackConfig = SuffixAttackConfig(),
) -> Tensor:
    """Weighted target cross-entropy plus the mean squared late-layer cosine.

    ``prompt`` already contains the suffix. The cosine is taken at the last
    prompt token, where the response decision is made.
    """
    if not target:
        raise ValueError("empty target")
    direction = torch.as_tensor(direction, dtype=DTYPE)
    direction = direction / direction.norm()
    tokens = torch.tensor([prompt], dtype=torch.long)
    return _batch_loss(model, tokens, target, direction, cfg)[0]


@dataclass
class SuffixAttackResult:
    suffix: list[int]
    loss: float
    trace: list[float]  # best-so-far loss after each iteration (entry 0: initial suffix)
    before: CosineProfile
    after: CosineProfile
    stopped_early: bool
    iterations: int

    def to_dict(self) -> dict:
        return {
            "suffix": self.suffix,
            "loss": self.loss,
            "trace": self.trace,
            "before": self.before.to_dict(),
            "after": self.after.to_dict(),
            "stopped_early": self.stopped_early,
            "iterations": self.iterations,
        }


def _check_fits(model: ToyModel, prompt: list[int], suffix_len: int, target: list[int], extra: int = 0) -> None:
    need = len(prompt) + suffix_len + max(len(target) - 1, extra)
    if need > model.cfg.max_seq_len:
        raise ValueError(f"prompt + suffix + target needs {need} positions > context {model.cfg.max_seq_len}")


def _suffix_grad(model, prompt, suffix, target, direction, cfg, vocab) -> Tensor:
    """Gradient of the loss w.r.t. the one-hot suffix tokens, ``[suffix_len, vocab]``."""
    tokens = insert_suffix(prompt, suffix)
    start = len(prompt) - 1
    t = torch.tensor([tokens], dtype=torch.long)
    onehot = F.one_hot(torch.tensor(suffix), vocab).to(DTYPE).requires_grad_(True)
    w = model.embed.weight
    emb = w[t[0]].clone()
    emb = torch.cat([emb[:start], onehot @ w, emb[start + len(suffix):]]).unsqueeze(0)
    loss = _batch_loss(model, t, target, direction, cfg, embeds=emb)[0]
    (grad,) = torch.autograd.grad(loss, onehot)
    return grad


@torch.no_grad()
def _evaluate(model, prompt, suffixes, target, direction, cfg, chunk: int = 1024) -> Tensor:
    rows = torch.tensor([insert_suffix(prompt, s) for s in suffixes], dtype=torch.long)
    return torch.cat([_batch_loss(model, rows[i : i + chunk], target, direction, cfg) for i in range(0, len(rows), chunk)])


def _candidate_suffixes(suffix: list[int], grad: Tensor, allowed: list[int], cfg: SuffixAttackConfig) -> list[list[int]]:
    allowed_t = torch.tensor(allowed)
    k = min(cfg.top_k, len(allowed))
    per_pos = []
    for pos in range(len(suffix)):
        scores = -grad[pos, allowed_t]
        top = torch.topk(scores, k).indices
        per_pos.append(sorted(allowed_t[top].tolist()))
    if k ** len(suffix) <= cfg.joint_budget:
        return [list(c) for c in itertools.product(*per_pos)]
    out = []
    for pos, toks in enumerate(per_pos):
        for tok in toks:
            if tok != suffix[pos]:
                out.append(suffix[:pos] + [tok] + suffix[pos + 1 :])
    return out


def suffix_attack(
    model: ToyModel,
    prompt: list[int],
    direction: Tensor,
    cfg: SuffixAttackConfig = SuffixAttackConfig(),
    target: list[int] | None = None,
    init: list[int] | None = None,
) -> SuffixAttackResult:
    """Greedy coordinate search for a suffix minimizing :func:`attack_loss`.

    Each iteration ranks token swaps by the one-hot gradient, evaluates the
    top-k per position exactly and keeps the best if it improves the loss.
    A sweep with no improving swap stops the search early.
    """
    target = attack_target(prompt) if target is None else list(target)
    if not target:
        raise ValueError("empty target")
    _check_fits(model, prompt, cfg.suffix_len, target)
    direction = torch.as_tensor(direction, dtype=DTYPE)
    direction = direction / direction.norm()
    vocab = model.cfg.vocab_size
    allowed = cfg.candidates(vocab)
    if init is None:
        g = torch.Generator().manual_seed(cfg.seed)
        idx = torch.randint(len(allowed), (cfg.suffix_len,), generator=g)
        suffix = [allowed[i] for i in idx.tolist()]
    else:
        if len(init) != cfg.suffix_len:
            raise ValueError("init suffix has the wrong length")
        suffix = list(init)
    best = float(_evaluate(model, prompt, [suffix], target, direction, cfg)[0])
    trace = [best]
    stopped_early = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if cfg.w_ce == 0 and cfg.w_dir == 0:
            stopped_early = True
            break
        grad = _suffix_grad(model, prompt, suffix, target, direction, cfg, vocab)
        cands = _candidate_suffixes(suffix, grad, allowed, cfg)
        if not cands:
            stopped_early = True
            break
        losses = _evaluate(model, prompt, cands, target, direction, cfg)
        j = int(torch.argmin(losses))
        if float(losses[j]) < best:
            best = float(losses[j])
            suffix = cands[j]
            trace.append(best)
        else:
            trace.append(best)
            stopped_early = True
            log.info("no improving swap after %d iterations", it)
            break
    with torch.no_grad():
        before = cosine_profile(model, direction, [prompt])
        after = cosine_profile(model, direction, [insert_suffix(prompt, suffix)])
    return SuffixAttackResult(suffix, best, trace, before, after, stopped_early, it)


@torch.no_grad()
def exhaustive_suffix(
    model: ToyModel,
    prompt: list[int],
    direction: Tensor,
    cfg: SuffixAttackConfig = SuffixAttackConfig(),
    target: list[int] | None = None,
    max_candidates: int = 100_000,
) -> tuple[list[int], float]:
    """Brute-force optimum over every suffix of length ``cfg.suffix_len`` (lexicographic tie-break)."""
    target = attack_target(prompt) if target is None else list(target)
    _check_fits(model, prompt, cfg.suffix_len, target)
    direction = torch.as_tensor(direction, dtype=DTYPE)
    direction = direction / direction.norm()
    allowed = cfg.candidates(model.cfg.vocab_size)
    if len(allowed) ** cfg.suffix_len > max_candidates:
        raise ValueError("search space too large for exhaustive enumeration")
    suffixes = [list(c) for c in itertools.product(allowed, repeat=cfg.suffix_len)]
    losses = _evaluate(model, prompt, suffixes, target, direction, cfg)
    j = int(torch.argmin(losses))
    return suffixes[j], float(losses[j])


def late_cosine(profile: CosineProfile, n_points: int, fraction: float = 0.25) -> float:
    layers = late_layers(n_points, fraction)
    return sum(profile.values[l] for l in layers) / len(layers)


@dataclass
class AttackReport:
    suffixes: list[list[int]]
    jailbroken_before: list[bool]
    jailbroken_after: list[bool]
    late_cos_before: float  # mean over prompts of the mean late-layer cosine
    late_cos_after: float
    profile_before: list[float]
    profile_after: list[float]
    traces: list[list[float]] = field(default_factory=list)

    @property
    def asr_before(self) -> float:
        return sum(self.jailbroken_before) / len(self.jailbroken_before)

    @property
    def asr_after(self) -> float:
        return sum(self.jailbroken_after) / len(self.jailbroken_after)

    @property
    def cosine_reduction(self) -> float:
        """Relative drop of the mean late-layer cosine (1.0 = fully suppressed)."""
        if self.late_cos_before == 0:
            return 0.0
        return 1.0 - self.late_cos_after / self.late_cos_before

    def to_dict(self) -> dict:
        return {
            "suffixes": self.suffixes,
            "jailbroken_before": self.jailbroken_before,
            "jailbroken_after": self.jailbroken_after,
            "asr_before": self.asr_before,
            "asr_after": self.asr_after,
            "late_cos_before": self.late_cos_before,
            "late_cos_after": self.late_cos_after,
            "cosine_reduction": self.cosine_reduction,
            "profile_before": self.profile_before,
            "profile_after": self.profile_after,
            "traces": self.traces,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))


def attack_prompts(
    model: ToyModel,
    prompts: list[list[int]],
    direction: Tensor,
    cfg: SuffixAttackConfig = SuffixAttackConfig(),
    max_new_tokens: int = 8,
    matcher: RefusalMatcher = DEFAULT_MATCHER,
) -> AttackReport:
    """Attack every prompt independently and compare refusal and cosines with and without the suffix."""
    if not prompts:
        raise ValueError("no prompts")
    results = [suffix_attack(model, p, direction, cfg) for p in prompts]
    adv = [insert_suffix(p, r.suffix) for p, r in zip(prompts, results)]
    outs_before = generate_batch(model, prompts, max_new_tokens)
    outs_after = generate_batch(model, adv, max_new_tokens)
    jb_before = [not is_refusal(o[len(p):], matcher) for o, p in zip(outs_before, prompts)]
    jb_after = [not is_refusal(o[len(p):], matcher) for o, p in zip(outs_after, adv)]
    n = model.n_points
    prof_b = cosine_profile(model, direction, prompts).values
    prof_a = cosine_profile(model, direction, adv).values
    late_b = sum(late_cosine(r.before, n, cfg.late_fraction) for r in results) / len(results)
    late_a = sum(late_cosine(r.after, n, cfg.late_fraction) for r in results) / len(results)
    return AttackReport(
        [r.suffix for r in results], jb_before, jb_after, late_b, late_a, prof_b, prof_a,
        [r.trace for r in results],
    )
