import random
import time
from pathlib import Path

import pytest
import torch

from refusal_geometry import cli
from refusal_geometry.directionopt import PromptRecord
from refusal_geometry.model import ModelConfig, ToyModel
from refusal_geometry.tensorcore import DTYPE
from refusal_geometry.toytask import REFUSAL_TEMPLATE, SyntheticTaskSpec, answer_for, sample_prompt

torch.set_num_threads(1)


def make_tiny_model(seed: int = 0, d_model: int = 16, n_layers: int = 2) -> ToyModel:
    """Untrained 2-layer model with weights large enough to give non-trivial gradients."""
    m = ToyModel(ModelConfig(vocab_size=32, d_model=d_model, n_layers=n_layers, n_heads=2, d_mlp=32, seed=seed))
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for name, p in m.named_parameters():
            if name.startswith("ln") or ".ln" in name:
                continue
            scale = 0.5 if "embed" in name or "pos" in name else 0.3
            p.copy_(torch.randn(p.shape, generator=g, dtype=DTYPE) * scale)
    m.eval()
    for p in m.parameters():
        p.requires_grad_(False)
    return m


def make_records(n: int = 4, seed: int = 0) -> list[PromptRecord]:
    spec = SyntheticTaskSpec()
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        h = sample_prompt(spec, rng, True)
        s = sample_prompt(spec, rng, False)
        out.append(PromptRecord(h, s, answer_for(h)[:8], list(REFUSAL_TEMPLATE), answer_for(s)[:7]))
    return out


@pytest.fixture
def tiny_model():
    return make_tiny_model()


@pytest.fixture
def records():
    return make_records()


def run_stage(command: str, out: str, **cfg) -> Path:
    args = cli.build_parser().parse_args([command, "--seed", str(cfg.pop("seed", 0)), "--out", out])
    resolved = cli.resolve_config(command, args)
    resolved.update(cfg)
    return cli.dispatch(command, resolved)


class Pipeline:
    """Default-configuration CLI stages, each run once on first use and timed."""

    def __init__(self, root: Path):
        self.root = root
        self.seconds: dict[str, float] = {}

    def __truediv__(self, other: str) -> Path:
        return self.root / other

    def _stages(self) -> dict:
        r = lambda p: str(self.root / p)
        data = dict(data=r("data"))
        common = dict(model=r("toy/model.bin"), **data)
        train = dict(direction=r("dim/dim.json"), targets=r("targets/targets.jsonl"), **common)
        return {
            "data": ("gen-data", [], {}),
            "toy": ("train-toy", ["data"], data),
            "dim": ("extract-dim", ["toy"], common),
            "targets": ("gen-targets", ["dim"], dict(direction=r("dim/dim.json"), **common)),
            "rdo": ("train-rdo", ["targets"], train),
            "eval_dim": ("evaluate", ["dim"], dict(direction=r("dim/dim.json"), **common)),
            "eval_rdo": ("evaluate", ["rdo"], dict(direction=r("rdo/rdo.json"), **common)),
            "cone2": ("train-cone", ["targets"], dict(n_dim=2, **train)),
            "cone1": ("train-cone", ["targets"], dict(n_dim=1, n_eval_samples=1, **train)),
            "orth": ("train-rdo", ["targets"], dict(orthogonal_to=[r("dim/dim.json")], **train)),
            "ind_orth": ("verify-independence", ["orth"], dict(r=r("orth/rdo.json"), v=r("dim/dim.json"), **common)),
            "repind": ("train-repind", ["targets"], train),
            "ind_repind": ("verify-independence", ["repind"],
                           dict(r=r("repind/repind.json"), v=r("dim/dim.json"), **common)),
            "attack": ("attack-suffix", ["repind"], dict(direction=r("repind/repind.json"), **common)),
        }

    def stage(self, name: str) -> Path:
        if name not in self.seconds:
            command, deps, cfg = self._stages()[name]
            for dep in deps:
                self.stage(dep)
            t0 = time.perf_counter()
            run_stage(command, str(self.root / name), **cfg)
            self.seconds[name] = time.perf_counter() - t0
        return self.root / name

    def total_seconds(self, *names: str) -> float:
        """Wall time of the named stages plus everything they depend on."""
        stages = self._stages()
        seen: set[str] = set()

        def visit(n):
            if n not in seen:
                seen.add(n)
                for d in stages[n][1]:
                    visit(d)

        for n in names:
            self.stage(n)
            visit(n)
        return sum(self.seconds[n] for n in seen)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory) -> Pipeline:
    return Pipeline(tmp_path_factory.mktemp("pipeline"))


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request) -> dict:
    """criterion number -> list of (passed, detail) for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        ok = all(p for p, _ in log[n])
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: " + "; ".join(d for _, d in log[n]))
