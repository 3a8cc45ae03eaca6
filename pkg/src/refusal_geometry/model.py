"""Minimal decoder-only transformer with residual-stream interventions.

Hook points are numbered 0..n_layers: point 0 is the embedding output and
point l is the residual stream after block l. Block l reads point l-1 and
writes ``attn`` then ``mlp`` on top of it (pre-norm, RMS normalization).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from refusal_geometry.tensorcore import DTYPE, NonFiniteError, ShapeError, rms_norm

CHECKPOINT_MAGIC = b"RGTOY\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_mlp: int = 256
    max_seq_len: int = 32
    seed: int = 0
    # reserved ids, see toytask.Vocab
    refuse_id: int = 4
    answer_id: int = 5
    chat_end_id: int = 2

    def __post_init__(self):
        if self.vocab_size < 8:
            raise ValueError("vocab_size must be at least 8")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        reserved = {self.refuse_id, self.answer_id, self.chat_end_id}
        if len(reserved) != 3 or max(reserved) >= self.vocab_size:
            raise ValueError("special token ids must be distinct and < vocab_size")


@dataclass
class Intervention:
    """What to do to the residual stream during a forward pass.

    ``direction`` may be a single vector ``[d_model]`` or one vector per batch
    row ``[batch, d_model]``; it is normalized inside the pass so gradients
    flow to the raw parameter.
    """

    kind: Literal["none", "ablate", "add", "subtract"] = "none"
    direction: Tensor | None = None
    alpha: float | Tensor | None = None
    layer: int | None = None

    def __post_init__(self):
        if self.kind not in ("none", "ablate", "add", "subtract"):
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        if self.kind == "none":
            return
        if self.direction is None:
            raise ValueError(f"{self.kind} needs a direction")
        if self.kind == "ablate":
            if self.alpha is not None:
                raise ValueError("ablate carries no alpha")
        else:
            if self.alpha is None or self.layer is None:
                raise ValueError(f"{self.kind} needs alpha and layer")
            if not torch.isfinite(torch.as_tensor(self.alpha)).all():
                raise ValueError("alpha must be finite")

    @classmethod
    def none(cls) -> "Intervention":
        return cls("none")

    @classmethod
    def ablate(cls, direction: Tensor) -> "Intervention":
        return cls("ablate", direction)

    @classmethod
    def add(cls, direction: Tensor, alpha, layer: int) -> "Intervention":
        return cls("add", direction, alpha, layer)

    @classmethod
    def subtract(cls, direction: Tensor, alpha, layer: int) -> "Intervention":
        return cls("subtract", direction, alpha, layer)


NO_INTERVENTION = Intervention()


@dataclass
class ActivationTrace:
    resid: list[Tensor] = field(default_factory=list)     # n_layers + 1 entries, [batch, seq, d]
    attn_out: list[Tensor] = field(default_factory=list)  # n_layers entries
    mlp_out: list[Tensor] = field(default_factory=list)

    def stack(self) -> Tensor:
        """Residual stream as ``[n_points, batch, seq, d]``."""
        return torch.stack(self.resid)


def _unit(direction: Tensor) -> Tensor:
    norm = direction.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError("zero-norm direction")
    return direction / norm


def _rowwise(v: Tensor) -> Tensor:
    # [d] -> [1, 1, d]; [B, d] -> [B, 1, d]
    return v.reshape(1, 1, -1) if v.dim() == 1 else v.unsqueeze(1)


def project_out(x: Tensor, rhat: Tensor) -> Tensor:
    r = _rowwise(rhat)
    return x - (x * r).sum(-1, keepdim=True) * r


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.Parameter(torch.ones(d))
        self.ln2 = nn.Parameter(torch.ones(d))
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.out = nn.Linear(d, d, bias=False)
        self.fc_in = nn.Linear(d, cfg.d_mlp)
        self.fc_out = nn.Linear(cfg.d_mlp, d)

    def attn(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(rms_norm(x, self.ln1)).split(d, dim=-1)
        q, k, v = (z.view(b, t, h, d // h).transpose(1, 2) for z in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        causal = torch.ones(t, t, dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~causal, float("-inf"))
        z = torch.softmax(scores, dim=-1) @ v
        return self.out(z.transpose(1, 2).reshape(b, t, d))

    def mlp(self, x: Tensor) -> Tensor:
        return self.fc_out(F.gelu(self.fc_in(rms_norm(x, self.ln2))))


class ToyModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.Parameter(torch.ones(cfg.d_model))
        self.unembed = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("ln") or ".ln" in name:
                    continue
                if name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02 * (2 if "embed" in name or "pos" in name else 1))
        self.to(DTYPE)

    @property
    def n_points(self) -> int:
        return self.cfg.n_layers + 1

    def forward(
        self,
        tokens: Tensor,
        intervention: Intervention = NO_INTERVENTION,
        trace: bool = False,
        embeds: Tensor | None = None,
    ) -> tuple[Tensor, ActivationTrace | None]:
        """Logits ``[batch, seq, vocab]`` and, if requested, the activation trace.

        ``embeds`` replaces the token-embedding lookup (used by the suffix
        search to differentiate through a one-hot relaxation).
        """
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        b, t = tokens.shape
        cfg = self.cfg
        if t == 0:
            raise ShapeError("empty token sequence")
        if t > cfg.max_seq_len:
            raise ShapeError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if int(tokens.max()) >= cfg.vocab_size or int(tokens.min()) < 0:
            raise ShapeError(f"token id out of range for vocab_size {cfg.vocab_size}")

        kind = intervention.kind
        rhat = None
        if kind != "none":
            r = intervention.direction
            if r.shape[-1] != cfg.d_model:
                raise ShapeError(f"direction dimension {r.shape[-1]} != d_model {cfg.d_model}")
            rhat = _unit(r.to(DTYPE))
            if kind in ("add", "subtract") and not 0 <= intervention.layer < cfg.n_layers:
                raise ValueError(f"add layer {intervention.layer} outside [0, {cfg.n_layers})")

        def write(delta: Tensor) -> Tensor:
            return project_out(delta, rhat) if kind == "ablate" else delta

        def steer(x: Tensor, point: int) -> Tensor:
            if kind in ("add", "subtract") and point == intervention.layer:
                sign = 1.0 if kind == "add" else -1.0
                alpha = torch.as_tensor(intervention.alpha, dtype=DTYPE)
                if alpha.dim() == 1:
                    alpha = alpha.view(-1, 1, 1)
                return x + sign * alpha * _rowwise(rhat)
            return x

        tr = ActivationTrace() if trace else None
        tok = self.embed(tokens) if embeds is None else embeds
        x = write(tok + self.pos.weight[:t])
        x = steer(x, 0)
        if tr is not None:
            tr.resid.append(x)
        for l, block in enumerate(self.blocks, start=1):
            a = write(block.attn(x))
            x = x + a
            m = write(block.mlp(x))
            x = x + m
            x = steer(x, l)
            if not torch.isfinite(x).all():
                raise NonFiniteError(f"non-finite activations at layer {l}")
            if tr is not None:
                tr.attn_out.append(a)
                tr.mlp_out.append(m)
                tr.resid.append(x)
        logits = self.unembed(rms_norm(x, self.ln_f))
        return logits, tr

    def checksum(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()[:16]


def checkpoint_bytes(model: ToyModel) -> bytes:
    """Versioned binary container: magic, header length, JSON header, raw float64 payload."""
    state = model.state_dict()
    names = sorted(state)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(
        state[n].detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes() for n in names
    )
    return CHECKPOINT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload


def save_model(model: ToyModel, path: str | Path) -> str:
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()[:16]


def load_model(path: str | Path) -> ToyModel:
    import numpy as np

    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a toy-model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", data[off:off + 4])
    off += 4
    header = json.loads(data[off:off + hlen])
    off += hlen
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    model = ToyModel(ModelConfig(**header["config"]))
    state = {}
    for spec in header["tensors"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(spec["shape"])
        off += 8 * n
        state[spec["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def generate(
    model: ToyModel,
    prompt: list[int],
    max_new_tokens: int,
    intervention: Intervention = NO_INTERVENTION,
) -> list[int]:
    """Greedy continuation of a single prompt (prompt included in the result)."""
    return generate_batch(model, [prompt], max_new_tokens, intervention)[0]


@torch.no_grad()
def generate_batch(
    model: ToyModel,
    prompts: list[list[int]],
    max_new_tokens: int,
    intervention: Intervention = NO_INTERVENTION,
    temperature: float = 0.0,
    generator: torch.Generator | None = None,
) -> list[list[int]]:
    """Decode every prompt; greedy when ``temperature == 0``.

    Prompts are grouped by length so each group is a dense batch. A per-row
    direction (``[len(prompts), d]``) is split along with its prompts.
    """
    n_seq = model.cfg.max_seq_len
    for p in prompts:
        if not p:
            raise ShapeError("empty prompt")
        if len(p) + max_new_tokens > n_seq:
            raise ShapeError(f"prompt length {len(p)} + {max_new_tokens} new tokens exceeds context {n_seq}")
    out: list[list[int] | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    per_row = intervention.direction is not None and intervention.direction.dim() == 2
    per_row_alpha = isinstance(intervention.alpha, Tensor) and intervention.alpha.dim() == 1
    for length in sorted(groups):
        idx = groups[length]
        iv = intervention
        if per_row or per_row_alpha:
            sel = torch.tensor(idx)
            iv = Intervention(
                intervention.kind,
                intervention.direction[sel] if per_row else intervention.direction,
                intervention.alpha[sel] if per_row_alpha else intervention.alpha,
                intervention.layer,
            )
        seq = torch.tensor([prompts[i] for i in idx], dtype=torch.long)
        for _ in range(max_new_tokens):
            logits, _ = model(seq, iv)
            last = logits[:, -1]
            if temperature > 0:
                probs = torch.softmax(last / temperature, -1)
                nxt = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
            else:
                nxt = last.argmax(-1)
            seq = torch.cat([seq, nxt.unsqueeze(1)], dim=1)
        for j, i in enumerate(idx):
            out[i] = seq[j].tolist()
    return out
