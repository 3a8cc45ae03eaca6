"""Command-line entry point: one experiment stage per command, artifacts plus a manifest per run.

Configuration comes from command defaults, then an optional JSON config file
(``--config``), then explicit flags, in increasing priority.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from refusal_geometry import evalharness as ev
from refusal_geometry import plotting
from refusal_geometry.coneopt import ConeBasis, evaluate_cone, rco_train
from refusal_geometry.directionopt import OptimConfig, generate_targets, load_records, rdo_train, save_records
from refusal_geometry.inputattack import SuffixAttackConfig, attack_prompts
from refusal_geometry.interventions import Direction, ValidationSet, extract_dim, random_direction, select_direction
from refusal_geometry.model import ModelConfig, ToyModel, load_model, save_model
from refusal_geometry.repind import (
    IndependenceConstraintSet,
    cosine_profile,
    train_repind_direction,
    verify_independence,
)
from refusal_geometry.scoring import refused_under_directions
from refusal_geometry.toytask import (
    SyntheticTaskSpec,
    generate_splits,
    read_jsonl,
    spec_to_dict,
    split_prompts,
    train_toy_model,
    write_jsonl,
)

log = logging.getLogger("refusal_geometry")

EXIT_CONFIG = 2
EXIT_CHECKSUM = 3
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    def __init__(self, field: str, msg: str):
        super().__init__(f"field '{field}': {msg}")
        self.field = field


class ChecksumError(RuntimeError):
    pass


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "unknown"


# ---------------------------------------------------------------- config


def _need(cfg: dict, key: str, kind: str | None = None):
    if cfg.get(key) is None:
        raise ConfigError(key, "missing")
    v = cfg[key]
    if kind == "file" and not Path(v).is_file():
        raise ConfigError(key, f"file not found: {v}")
    if kind == "dir" and not Path(v).is_dir():
        raise ConfigError(key, f"directory not found: {v}")
    return v


def _files(cfg: dict, key: str) -> list[str]:
    paths = cfg.get(key) or []
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(key, f"file not found: {p}")
    return list(paths)


class Run:
    """Resolved config plus the bookkeeping for one command invocation."""

    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        _need(cfg, "seed")
        self.out = Path(_need(cfg, "out"))
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.model_checksum: str | None = None

    def input(self, key: str, kind: str = "file") -> str:
        path = _need(self.cfg, key, kind)
        if kind == "file":
            self.inputs[key] = path
        return path

    def input_data(self, key: str = "data") -> dict[str, list[dict]]:
        d = Path(self.input(key, "dir"))
        splits = {}
        for name in SPLITS:
            f = d / f"{name}.jsonl"
            if not f.is_file():
                raise ConfigError(key, f"missing split file {f}")
            self.inputs[f"{key}/{name}"] = str(f)
            splits[name] = read_jsonl(f)
        return splits

    def model(self, key: str = "model") -> ToyModel:
        m = load_model(self.input(key))
        self.model_checksum = m.checksum()
        return m

    def direction(self, key: str, model: ToyModel) -> Direction:
        d = Direction.load(self.input(key))
        self.check(d.model_checksum, model, key)
        return d

    def check(self, checksum: str | None, model: ToyModel, what: str) -> None:
        if checksum is not None and checksum != model.checksum():
            raise ChecksumError(f"{what} was produced by model {checksum}, not {model.checksum()}")

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return self.out / name

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, sort_keys=True, indent=1))
        return p

    def manifest(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        m = {
            "command": self.command,
            "config": self.cfg,
            "seed": self.cfg["seed"],
            "model_checksum": self.model_checksum,
            "inputs": {k: {"path": v, "sha256": sha256_file(v)} for k, v in sorted(self.inputs.items())},
            "outputs": {n: sha256_file(self.out / n) for n in sorted(set(self.outputs))},
            "versions": {"python": platform.python_version(), "torch": torch.__version__, "package": _version()},
        }
        p = self.out / f"manifest.{self.command}.json"
        p.write_text(json.dumps(m, sort_keys=True, indent=1))
        return p


def _val_set(model: ToyModel, splits) -> ValidationSet:
    vh, vs = split_prompts(splits["val"])
    return ValidationSet(vh, vs, ev.retain_targets(model, vs))


def _optim_cfg(cfg: dict, direction: Direction) -> OptimConfig:
    alpha = cfg.get("alpha")
    layer = cfg.get("layer")
    oc = OptimConfig(
        alpha=direction.norm_at_extraction if alpha is None else float(alpha),
        l_add=direction.layer if layer is None else int(layer),
        seed=int(cfg["seed"]),
    )
    for k in ("lambda_abl", "lambda_add", "lambda_ret", "lr", "batch_size", "max_steps", "min_steps"):
        if cfg.get(k) is not None:
            setattr(oc, k, type(getattr(oc, k))(cfg[k]))
    return oc


def _history_csv(run: Run, name: str, history: list[dict]) -> None:
    keys = sorted({k for h in history for k in h})
    ev.write_csv(run.path(name), keys, ([h.get(k, "") for k in keys] for h in history))


def _asr_of(model, prompts, vec) -> float:
    return float((~refused_under_directions(model, prompts, vec.unsqueeze(0))).float().mean())


# ---------------------------------------------------------------- commands


def cmd_gen_data(run: Run):
    cfg = run.cfg
    spec = SyntheticTaskSpec(
        vocab_size=cfg["vocab_size"],
        triggers=tuple(cfg["triggers"]),
        prompt_len=tuple(cfg["prompt_len"]),
        n_train=cfg["n_train"],
        n_val=cfg["n_val"],
        n_test=cfg["n_test"],
        seed=cfg["seed"],
    )
    splits = generate_splits(spec)
    for name in SPLITS:
        write_jsonl(splits[name], run.path(f"{name}.jsonl"))
    run.write_json("task.json", spec_to_dict(spec))


def cmd_train_toy(run: Run):
    cfg = run.cfg
    data = run.input("data", "dir")
    task = Path(data) / "task.json"
    if not task.is_file():
        raise ConfigError("data", f"missing {task}")
    run.inputs["data/task"] = str(task)
    spec = SyntheticTaskSpec.from_dict(json.loads(task.read_text()))
    splits = run.input_data()
    held_out = [r["prompt"] for rows in splits.values() for r in rows]
    mc = ModelConfig(vocab_size=spec.vocab_size, d_model=cfg["d_model"], n_layers=cfg["n_layers"],
                     n_heads=cfg["n_heads"], d_mlp=cfg["d_mlp"], seed=cfg["seed"])
    model, report = train_toy_model(spec, mc, steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                                    min_accuracy=cfg["min_accuracy"], held_out=held_out)
    run.model_checksum = save_model(model, run.path("model.bin"))
    run.write_json("train_report.json", {"accuracy": report.accuracy, "steps": report.steps,
                                         "model_config": asdict(mc), "model_checksum": run.model_checksum})
    ev.write_csv(run.path("train_curve.csv"), ["step", "loss", "accuracy"], report.curve)
    plotting.plot_loss_history([{"step": s, "loss": l} for s, l, _ in report.curve], run.path("train_curve.png"),
                               title="Toy model training loss")


def cmd_extract_dim(run: Run):
    cfg = run.cfg
    model = run.model()
    splits = run.input_data()
    trh, trs = split_prompts(splits["train"])
    layer = cfg.get("layer")
    if layer is not None:
        d = extract_dim(model, trh, trs, int(layer))
    else:
        # one candidate per hook point that activation addition can use
        cands = [extract_dim(model, trh, trs, l) for l in range(model.cfg.n_layers)]
        sel = select_direction(model, cands, _val_set(model, splits))
        d = sel.direction
        d.meta["layer_scores"] = sel.scores
        d.meta["layer_kls"] = sel.kls
        ev.write_csv(run.path("dim_layers.csv"), ["layer", "score", "kl"],
                     [(c.layer, s, k) for c, s, k in zip(cands, sel.scores, sel.kls)])
    d.save(run.path("dim.json"))


def cmd_gen_targets(run: Run):
    cfg = run.cfg
    model = run.model()
    splits = run.input_data()
    seed_dir = run.direction("direction", model)
    harm, safe = split_prompts(splits["train"])
    rep = generate_targets(model, seed_dir, harm, safe, alpha=cfg.get("alpha"), layer=cfg.get("layer"))
    save_records(rep.records, run.path("targets.jsonl"))
    run.write_json("targets_report.json", {"answer_rate": rep.answer_rate, "dropped": rep.dropped,
                                           "low_quality": rep.low_quality, "n_records": len(rep.records)})


def _training_inputs(run: Run):
    model = run.model()
    splits = run.input_data()
    seed_dir = run.direction("direction", model)
    records = load_records(run.input("targets"))
    return model, splits, seed_dir, records


def cmd_train_rdo(run: Run):
    model, splits, seed_dir, records = _training_inputs(run)
    orth = [Direction.load(p).vector for p in _files(run.cfg, "orthogonal_to")]
    for i, p in enumerate(run.cfg.get("orthogonal_to") or []):
        run.inputs[f"orthogonal_to/{i}"] = p
    oc = _optim_cfg(run.cfg, seed_dir)
    res = rdo_train(model, records, oc, _val_set(model, splits), orthogonal_to=orth or None)
    res.direction.meta["selection"] = {"index": res.selection.index, "scores": res.selection.scores,
                                       "kls": res.selection.kls, "warning": res.selection.warning}
    res.direction.save(run.path("rdo.json"))
    _history_csv(run, "rdo_history.csv", res.history)
    plotting.plot_loss_history(res.history, run.path("rdo_loss.png"), title="RDO training loss")


def cmd_train_cone(run: Run):
    cfg = run.cfg
    model, splits, seed_dir, records = _training_inputs(run)
    oc = _optim_cfg(cfg, seed_dir)
    res = rco_train(model, records, oc, int(cfg["n_dim"]), samples_per_step=int(cfg["samples_per_step"]),
                    val=_val_set(model, splits))
    res.basis.meta["effective_found"] = res.effective_found
    res.basis.save(run.path("cone.json"))
    _history_csv(run, "cone_history.csv", res.history)
    plotting.plot_loss_history(res.history, run.path("cone_loss.png"), keys=("loss", "sample", "basis"),
                               title="Cone training loss")
    teh, _ = split_prompts(splits["test"])
    evaluation = evaluate_cone(model, res.basis, teh, int(cfg["n_eval_samples"]), seed=int(cfg["seed"]))
    baseline = _asr_of(model, teh, random_direction(model.cfg.d_model, int(cfg["seed"])).vector)
    run.write_json("cone_eval.json", {"summary": evaluation.summary, "random_baseline_asr": baseline,
                                      "frac_above_baseline": sum(a > baseline for a in evaluation.asr) / len(evaluation.asr)})
    ev.cone_samples_csv(evaluation.asr, evaluation.coefficients, run.path("cone_samples.csv"))
    plotting.plot_cone_asr(evaluation.asr, baseline, run.path("cone_asr.png"))


def cmd_train_repind(run: Run):
    cfg = run.cfg
    model, splits, seed_dir, records = _training_inputs(run)
    paths = _files(cfg, "constraints") or [run.inputs["direction"]]
    for i, p in enumerate(paths):
        run.inputs[f"constraints/{i}"] = p
    refs = [Direction.load(p) for p in paths]
    for p, d in zip(paths, refs):
        run.check(d.model_checksum, model, p)
    cons = IndependenceConstraintSet([d.vector for d in refs], cutoff=float(cfg["cutoff"]), weight=float(cfg["weight"]))
    oc = _optim_cfg(cfg, seed_dir)
    res = train_repind_direction(model, records, cons, oc, _val_set(model, splits),
                                 n_candidates=int(cfg["n_candidates"]), random_seed=int(cfg["seed"]))
    res.direction.save(run.path("repind.json"))
    teh, _ = split_prompts(splits["test"])
    reports = [verify_independence(model, res.direction, d, teh, float(cfg["epsilon"]), float(cfg["cutoff"])).to_dict()
               for d in refs]
    run.write_json("repind_report.json", {
        "refusal_scores": res.refusal_scores, "failed": res.failed, "val_asr": res.asr,
        "val_random_asr": res.baseline_asr, "test_asr": _asr_of(model, teh, res.direction.vector),
        "independence": reports,
    })
    for k, c in enumerate(res.candidates):
        _history_csv(run, f"repind_history_{k}.csv", c.history)


def cmd_verify_independence(run: Run):
    cfg = run.cfg
    model = run.model()
    splits = run.input_data()
    r = run.direction("r", model)
    v = run.direction("v", model)
    teh, _ = split_prompts(splits[cfg["split"]])
    rep = verify_independence(model, r, v, teh, float(cfg["epsilon"]), float(cfg["cutoff"]))
    rep.save(run.path("independence.json"))
    profiles = {
        "r": cosine_profile(model, r, teh).values,
        "r | ablate v": cosine_profile(model, r, teh, v.ablation()).values,
        "v": cosine_profile(model, v, teh).values,
        "v | ablate r": cosine_profile(model, v, teh, r.ablation()).values,
    }
    ev.profile_csv(profiles, run.path("independence_profiles.csv"))
    plotting.plot_cosine_profiles(profiles, run.path("independence_profiles.png"),
                                  title=f"Mutual ablation (pass={rep.passed})")


def cmd_attack_suffix(run: Run):
    cfg = run.cfg
    model = run.model()
    splits = run.input_data()
    d = run.direction("direction", model)
    teh, _ = split_prompts(splits["test"])
    prompts = teh[: int(cfg["n_prompts"])]
    ac = SuffixAttackConfig(suffix_len=int(cfg["suffix_len"]), top_k=int(cfg["top_k"]), max_iters=int(cfg["max_iters"]),
                            w_ce=float(cfg["w_ce"]), w_dir=float(cfg["w_dir"]), seed=int(cfg["seed"]))
    rep = attack_prompts(model, prompts, d.vector, ac)
    rep.save(run.path("attack.json"))
    profiles = {"no suffix": rep.profile_before, "adversarial suffix": rep.profile_after}
    ev.profile_csv(profiles, run.path("attack_profiles.csv"))
    plotting.plot_cosine_profiles(profiles, run.path("attack_profiles.png"),
                                  title=f"ASR {rep.asr_before:.2f} -> {rep.asr_after:.2f}")


def cmd_evaluate(run: Run):
    cfg = run.cfg
    model = run.model()
    splits = run.input_data()
    d = run.direction("direction", model)
    teh, tes = split_prompts(splits["test"])
    report = ev.asr(model, teh, d.ablation(), experiment_id=cfg.get("experiment_id") or f"{d.source}-ablation")
    layer = d.layer if cfg.get("layer") is None else int(cfg["layer"])
    alpha = d.norm_at_extraction if cfg.get("alpha") is None else float(cfg["alpha"])
    alphas = [float(m) * alpha for m in cfg["alpha_multiples"]]
    curve = ev.refusal_scaling_curve(model, tes, d.vector, alphas, layer)
    report.scaling_curve = {**curve.to_dict(), "layer": layer, "monotone": curve.is_monotone()}
    report.side_effect_kl = ev.side_effect_kl(model, d.vector, tes)
    rand = random_direction(model.cfg.d_model, int(cfg["seed"]))
    report.samples = {
        "baseline_asr": ev.asr(model, teh).asr,
        "random_asr": ev.asr(model, teh, rand.ablation()).asr,
    }
    report.save(run.path("eval.json"))
    ev.scaling_csv(curve, run.path("scaling.csv"))
    plotting.plot_scaling_curve(curve.alphas, curve.refusal_fraction, run.path("scaling.png"))
    ev.profile_csv({"harmful": cosine_profile(model, d, teh).values, "safe": cosine_profile(model, d, tes).values},
                   run.path("profile.csv"))


def cmd_best_of_n(run: Run):
    cfg = run.cfg
    model = run.model()
    splits = run.input_data()
    basis = ConeBasis.load(run.input("cone"))
    run.check(basis.meta.get("model_checksum"), model, "cone")
    teh, _ = split_prompts(splits["test"])
    n = int(cfg["n"])
    seed = int(cfg["seed"])
    results = [ev.best_of_n(model, teh, ev.ConeStrategy(basis, n), seed=seed)]
    if cfg.get("direction"):
        base_vec = run.direction("direction", model).vector
    else:
        base_vec = basis.vectors[0]
    for t in cfg["temperatures"]:
        results.append(ev.best_of_n(model, teh, ev.TemperatureStrategy(base_vec, float(t), n), seed=seed))
    run.write_json("best_of_n.json", {"results": [r.to_dict() for r in results]})
    ev.best_of_n_csv(results, run.path("best_of_n.csv"))
    plotting.plot_best_of_n({r.strategy: r.curve for r in results}, run.path("best_of_n.png"))


# ---------------------------------------------------------------- parser

COMMON = {"seed": None, "out": None}
TRAIN = {"alpha": None, "layer": None, "lr": None, "max_steps": None, "min_steps": None, "batch_size": None,
         "lambda_abl": None, "lambda_add": None, "lambda_ret": None}

COMMANDS = {
    "gen-data": (cmd_gen_data, {"vocab_size": 32, "triggers": list(range(8, 16)), "prompt_len": [3, 6],
                                "n_train": 256, "n_val": 64, "n_test": 128}),
    "train-toy": (cmd_train_toy, {"data": None, "steps": 600, "batch_size": 64, "lr": 3e-3, "min_accuracy": 0.99,
                                  "d_model": 64, "n_layers": 4, "n_heads": 4, "d_mlp": 256}),
    "extract-dim": (cmd_extract_dim, {"model": None, "data": None, "layer": None}),
    "gen-targets": (cmd_gen_targets, {"model": None, "data": None, "direction": None, "alpha": None, "layer": None}),
    "train-rdo": (cmd_train_rdo, {"model": None, "data": None, "direction": None, "targets": None,
                                  "orthogonal_to": [], **TRAIN}),
    "train-cone": (cmd_train_cone, {"model": None, "data": None, "direction": None, "targets": None, "n_dim": 2,
                                    "samples_per_step": 16, "n_eval_samples": 256, **TRAIN}),
    "train-repind": (cmd_train_repind, {"model": None, "data": None, "direction": None, "targets": None,
                                        "constraints": [], "cutoff": 0.9, "weight": 200.0, "n_candidates": 5,
                                        "epsilon": 0.05, **TRAIN}),
    "verify-independence": (cmd_verify_independence, {"model": None, "data": None, "r": None, "v": None,
                                                      "epsilon": 0.05, "cutoff": 0.9, "split": "test"}),
    "attack-suffix": (cmd_attack_suffix, {"model": None, "data": None, "direction": None, "n_prompts": 64,
                                          "suffix_len": 6, "top_k": 8, "max_iters": 30, "w_ce": 1.0, "w_dir": 300.0}),
    "evaluate": (cmd_evaluate, {"model": None, "data": None, "direction": None, "alpha": None, "layer": None,
                                "alpha_multiples": [0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0, 1.125, 1.25],
                                "experiment_id": None}),
    "best-of-n": (cmd_best_of_n, {"model": None, "data": None, "cone": None, "direction": None, "n": 16,
                                  "temperatures": [0.7, 1.0]}),
}


def _add_option(p: argparse.ArgumentParser, key: str, default) -> None:
    flag = "--" + key.replace("_", "-")
    if isinstance(default, list):
        elem = (float if any(isinstance(x, float) for x in default) else type(default[0])) if default else str
        p.add_argument(flag, dest=key, nargs="*", type=elem, default=argparse.SUPPRESS)
    elif isinstance(default, bool):
        p.add_argument(flag, dest=key, type=lambda s: s.lower() in ("1", "true", "yes"), default=argparse.SUPPRESS)
    elif isinstance(default, (int, float)):
        p.add_argument(flag, dest=key, type=type(default), default=argparse.SUPPRESS)
    else:
        p.add_argument(flag, dest=key, default=argparse.SUPPRESS)


_INT_KEYS = {"seed", "layer", "max_steps", "min_steps", "batch_size"}
_FLOAT_KEYS = {"alpha", "lr", "lambda_abl", "lambda_add", "lambda_ret"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refgeo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, defaults) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file; explicit flags override it")
        for key, default in {**COMMON, **defaults}.items():
            if default is None and key in _INT_KEYS:
                p.add_argument("--" + key.replace("_", "-"), dest=key, type=int, default=argparse.SUPPRESS)
            elif default is None and key in _FLOAT_KEYS:
                p.add_argument("--" + key.replace("_", "-"), dest=key, type=float, default=argparse.SUPPRESS)
            else:
                _add_option(p, key, default)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    defaults = {**COMMON, **COMMANDS[command][1]}
    cfg = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from exc
        if from_file.get("command", command) != command:
            raise ConfigError("command", f"config is for '{from_file['command']}', not '{command}'")
        for k, v in from_file.items():
            if k == "command":
                continue
            if k not in defaults:
                raise ConfigError(k, f"unknown field for '{command}'")
            cfg[k] = v
    for k, v in vars(args).items():
        if k in defaults:
            cfg[k] = v
    return cfg


def dispatch(command: str, cfg: dict) -> Path:
    run = Run(command, cfg)
    COMMANDS[command][0](run)
    return run.manifest()


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        manifest = dispatch(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ChecksumError as exc:
        print(f"checksum mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKSUM
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
