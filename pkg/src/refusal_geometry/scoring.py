"""Teacher-forced scores shared by direction selection, training and evaluation."""

from __future__ import annotations

import torch
from torch import Tensor

from refusal_geometry.model import NO_INTERVENTION, Intervention, ToyModel, generate_batch
from refusal_geometry.tensorcore import kl_divergence
from refusal_geometry.toytask import REFUSAL_TEMPLATE, lm_batch, pad_batch


def refusal_propensity(
    model: ToyModel,
    prompts: list[list[int]],
    intervention: Intervention = NO_INTERVENTION,
    template=REFUSAL_TEMPLATE,
) -> Tensor:
    """Per-prompt mean log-probability of the refusal template under teacher forcing."""
    inputs, targets, mask = lm_batch(prompts, [list(template)] * len(prompts), eos_tail=0)
    logits, _ = model(inputs, intervention)
    logp = torch.log_softmax(logits, -1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    m = mask.to(logp.dtype)
    return (logp * m).sum(1) / m.sum(1)


def retain_mask(prompt_lens: list[int], target_lens: list[int], width: int) -> Tensor:
    """Logit positions of the last instruction token and of every retain-target token."""
    mask = torch.zeros((len(prompt_lens), width), dtype=torch.bool)
    for i, (p, t) in enumerate(zip(prompt_lens, target_lens)):
        mask[i, p - 1 : p + t] = True
    return mask


def retain_kl_batch(
    model: ToyModel,
    prompts: list[list[int]],
    targets: list[list[int]],
    intervention: Intervention,
    clean_logits: Tensor | None = None,
) -> Tensor:
    """Per-prompt mean over masked positions of KL(clean || intervened)."""
    seqs = [list(p) + list(t) for p, t in zip(prompts, targets)]
    tokens, _ = pad_batch(seqs)
    mask = retain_mask([len(p) for p in prompts], [len(t) for t in targets], tokens.shape[1])
    mask = mask[:, : tokens.shape[1]]
    if not mask.any(dim=1).all():
        raise ValueError("empty retain mask")
    if clean_logits is None:
        with torch.no_grad():
            clean_logits, _ = model(tokens)
    logits, _ = model(tokens, intervention)
    kl = kl_divergence(clean_logits, logits)
    m = mask.to(kl.dtype)
    return (kl * m).sum(1) / m.sum(1)


class RefusalMatcher:
    """Exact subsequence containment against a list of refusal markers."""

    def __init__(self, markers=(REFUSAL_TEMPLATE,)):
        markers = [tuple(m) for m in markers]
        if not markers or any(not m for m in markers):
            raise ValueError("matcher needs at least one non-empty marker")
        self.markers = markers

    def __call__(self, completion) -> bool:
        return is_refusal(completion, self)


DEFAULT_MATCHER = RefusalMatcher()


def is_refusal(completion, matcher: RefusalMatcher = DEFAULT_MATCHER) -> bool:
    seq = list(completion)
    if not seq:
        raise ValueError("empty completion")
    for m in matcher.markers:
        k = len(m)
        if any(tuple(seq[i : i + k]) == m for i in range(len(seq) - k + 1)):
            return True
    return False


@torch.no_grad()
def refused_under_directions(
    model: ToyModel,
    prompts: list[list[int]],
    directions: Tensor,
    max_new_tokens: int = 8,
    kind: str = "ablate",
    alpha: float | None = None,
    layer: int | None = None,
    matcher: RefusalMatcher = DEFAULT_MATCHER,
    chunk_rows: int = 4096,
) -> Tensor:
    """Boolean ``[n_directions, n_prompts]``: did greedy decoding refuse under each direction?"""
    k, n = directions.shape[0], len(prompts)
    rows = [(j, i) for j in range(k) for i in range(n)]
    out = torch.zeros((k, n), dtype=torch.bool)
    for s in range(0, len(rows), chunk_rows):
        part = rows[s : s + chunk_rows]
        dirs = directions[torch.tensor([j for j, _ in part])]
        ps = [prompts[i] for _, i in part]
        iv = Intervention(kind, dirs, alpha if kind != "ablate" else None, layer if kind != "ablate" else None)
        outs = generate_batch(model, ps, max_new_tokens, iv)
        for (j, i), o, p in zip(part, outs, ps):
            out[j, i] = is_refusal(o[len(p):], matcher)
    return out
