"""Synthetic refusal task: vocabulary, prompt sampling, datasets and model training.

A prompt is ``[BOS] content [CHAT_END]``. Content holding any trigger token is
harmful and must be answered with the fixed refusal template; otherwise the
model answers ``[ANSWER] content [EOS]`` (an echo of the payload).
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import Tensor

from refusal_geometry.model import ModelConfig, ToyModel
from refusal_geometry.tensorcore import DTYPE, cross_entropy

log = logging.getLogger(__name__)

PAD, BOS, CHAT_END, EOS, REFUSE, ANSWER, SORRY, CANNOT = range(8)
SPECIAL_IDS = frozenset(range(8))
REFUSAL_TEMPLATE = (REFUSE, SORRY, CANNOT, EOS)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 32
    triggers: tuple[int, ...] = (8, 9, 10, 11, 12, 13, 14, 15)
    prompt_len: tuple[int, int] = (3, 6)
    n_train: int = 256
    n_val: int = 64
    n_test: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "triggers", tuple(self.triggers))
        object.__setattr__(self, "prompt_len", tuple(self.prompt_len))
        if not self.triggers:
            raise ValueError("trigger set must be non-empty")
        if set(self.triggers) & SPECIAL_IDS:
            raise ValueError("triggers overlap the reserved special tokens")
        if max(self.triggers) >= self.vocab_size:
            raise ValueError("trigger id outside vocabulary")
        lo, hi = self.prompt_len
        if not 1 <= lo <= hi:
            raise ValueError(f"bad prompt length range {self.prompt_len}")
        if not self.words:
            raise ValueError("no ordinary word tokens left in the vocabulary")
        for n in (self.n_train, self.n_val, self.n_test):
            if n % 2:
                raise ValueError("split sizes must be even to balance harmful and safe prompts")

    @property
    def words(self) -> tuple[int, ...]:
        return tuple(t for t in range(self.vocab_size) if t not in SPECIAL_IDS and t not in self.triggers)

    @property
    def max_prompt_tokens(self) -> int:
        return self.prompt_len[1] + 2

    @property
    def max_response_tokens(self) -> int:
        return max(self.prompt_len[1] + 2, len(REFUSAL_TEMPLATE))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        return cls(**d)


def is_harmful(prompt: list[int], triggers) -> bool:
    return any(t in triggers for t in prompt)


def content_of(prompt: list[int]) -> list[int]:
    return [t for t in prompt if t not in (BOS, CHAT_END)]


def wrap(content: list[int]) -> list[int]:
    return [BOS, *content, CHAT_END]


def answer_for(prompt: list[int]) -> list[int]:
    return [ANSWER, *content_of(prompt), EOS]


def response_for(prompt: list[int], triggers) -> list[int]:
    return list(REFUSAL_TEMPLATE) if is_harmful(prompt, triggers) else answer_for(prompt)


def sample_prompt(spec: SyntheticTaskSpec, rng: random.Random, harmful: bool) -> list[int]:
    n = rng.randint(*spec.prompt_len)
    content = [rng.choice(spec.words) for _ in range(n)]
    if harmful:
        k = 1 if n == 1 or rng.random() < 0.7 else 2
        for pos in rng.sample(range(n), k):
            content[pos] = rng.choice(spec.triggers)
    return wrap(content)


def generate_splits(spec: SyntheticTaskSpec) -> dict[str, list[dict]]:
    """Balanced, mutually disjoint train/val/test prompt rows."""
    rng = random.Random(spec.seed)
    seen: set[tuple[int, ...]] = set()
    splits = {}
    for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        rows = []
        for harmful in (True, False):
            got = 0
            tries = 0
            while got < n // 2:
                tries += 1
                if tries > 10_000 * n:
                    raise RuntimeError("prompt space exhausted; shrink the splits or widen prompt_len")
                p = sample_prompt(spec, rng, harmful)
                if tuple(p) in seen:
                    continue
                seen.add(tuple(p))
                rows.append({"prompt": p, "label": "harmful" if harmful else "safe"})
                got += 1
        splits[name] = rows
    all_keys = [tuple(r["prompt"]) for rows in splits.values() for r in rows]
    assert len(all_keys) == len(set(all_keys)), "splits overlap"
    return splits


def write_jsonl(rows: list[dict], path: str | Path) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def split_prompts(rows: list[dict]) -> tuple[list[list[int]], list[list[int]]]:
    harm = [r["prompt"] for r in rows if r["label"] == "harmful"]
    safe = [r["prompt"] for r in rows if r["label"] == "safe"]
    return harm, safe


def pad_batch(seqs: list[list[int]], pad: int = PAD) -> tuple[Tensor, Tensor]:
    """Right-pad to a dense batch; returns tokens and a validity mask."""
    t = max(len(s) for s in seqs)
    tokens = torch.full((len(seqs), t), pad, dtype=torch.long)
    mask = torch.zeros((len(seqs), t), dtype=torch.bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return tokens, mask


def lm_batch(prompts: list[list[int]], responses: list[list[int]], eos_tail: int = 1):
    """Teacher-forcing inputs, next-token targets and a mask covering response predictions."""
    seqs, starts = [], []
    for p, r in zip(prompts, responses):
        seqs.append(list(p) + list(r) + [EOS] * eos_tail)
        starts.append(len(p) - 1)
    tokens, valid = pad_batch(seqs)
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    mask = valid[:, 1:].clone()
    for i, s in enumerate(starts):
        mask[i, :s] = False
    return inputs, targets, mask


@dataclass
class TrainReport:
    accuracy: float
    steps: int
    curve: list[tuple[int, float, float]] = field(default_factory=list)  # (step, loss, accuracy)


class ToyTrainingError(RuntimeError):
    def __init__(self, msg: str, curve):
        super().__init__(msg)
        self.curve = curve


@torch.no_grad()
def task_accuracy(model: ToyModel, prompts: list[list[int]], triggers) -> float:
    """Teacher-forced next-token accuracy over the response tokens."""
    responses = [response_for(p, triggers) for p in prompts]
    inputs, targets, mask = lm_batch(prompts, responses, eos_tail=0)
    logits, _ = model(inputs)
    hit = (logits.argmax(-1) == targets) & mask
    return float(hit.sum()) / float(mask.sum())


def train_toy_model(
    spec: SyntheticTaskSpec,
    model_cfg: ModelConfig | None = None,
    steps: int = 600,
    batch_size: int = 64,
    lr: float = 3e-3,
    min_accuracy: float = 0.99,
    eval_every: int = 100,
    held_out: list[list[int]] | None = None,
) -> tuple[ToyModel, TrainReport]:
    """Train a fresh toy model on freshly sampled task prompts (never from ``held_out``)."""
    model_cfg = model_cfg or ModelConfig(vocab_size=spec.vocab_size, seed=spec.seed)
    if model_cfg.vocab_size != spec.vocab_size:
        raise ValueError("model and task vocabularies differ")
    torch.manual_seed(model_cfg.seed)
    model = ToyModel(model_cfg)
    rng = random.Random(spec.seed + 1)
    if held_out is None:
        held_out = [r["prompt"] for rows in generate_splits(spec).values() for r in rows]
    excluded = {tuple(p) for p in held_out}
    eval_prompts = held_out

    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
    curve = []
    model.train()
    for step in range(1, steps + 1):
        prompts = []
        while len(prompts) < batch_size:
            p = sample_prompt(spec, rng, harmful=len(prompts) % 2 == 0)
            if tuple(p) not in excluded:
                prompts.append(p)
        inputs, targets, mask = lm_batch(prompts, [response_for(p, spec.triggers) for p in prompts])
        logits, _ = model(inputs)
        loss = cross_entropy(logits, targets, mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % eval_every == 0 or step == steps:
            model.eval()
            acc = task_accuracy(model, eval_prompts, spec.triggers)
            model.train()
            curve.append((step, loss.item(), acc))
            log.info("toy step %d loss %.4f held-out acc %.4f", step, loss.item(), acc)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    acc = curve[-1][2]
    if acc < min_accuracy:
        raise ToyTrainingError(f"held-out accuracy {acc:.4f} below {min_accuracy}", curve)
    return model, TrainReport(acc, steps, curve)


def spec_to_dict(spec: SyntheticTaskSpec) -> dict:
    d = asdict(spec)
    d["triggers"] = list(d["triggers"])
    d["prompt_len"] = list(d["prompt_len"])
    return d
