"""Command-line front end: train, attack, and sweep experiments.

Configs are single JSON files mapped 1:1 onto the config dataclasses, with
unknown keys rejected so parameter typos fail loudly. All results are CSV
(plus PGM image dumps for attacks) under the requested output directory, and
identical config + seed reproduces byte-identical files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from . import attack as attack_mod
from . import defense as defense_mod
from . import flsim, metrics, tinynn
from .errors import InvalidConfig, NumericalFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

SWEEP_AXES = ("beta", "rho", "noise_scale", "prune_rate")


@dataclass(frozen=True)
class AttackHarnessConfig:
    """How the attack evaluation samples victims.

    Each victim update is the gradient of a small batch: the target example
    plus companions with distinct labels. batch_size 1 reproduces the
    single-example setting (where plain low-rank truncation is lossless);
    sizes 2-4 give the gradients genuine rank for the defenses to act on.
    `restarts` runs the optimizer from that many seeds and keeps the run with
    the lowest gradient distance.
    """

    batch_size: int = 3
    n_examples: int = 8
    restarts: int = 3

    def validate(self) -> list[str]:
        errors = []
        if not 1 <= self.batch_size <= 4:
            errors.append("attack.batch_size must be in [1, 4]")
        if self.n_examples < 1:
            errors.append("attack.n_examples must be >= 1")
        if self.restarts < 1:
            errors.append("attack.restarts must be >= 1")
        return errors


@dataclass(frozen=True)
class ExperimentSpec:
    seed: int = 0
    data: flsim.DataConfig = field(default_factory=flsim.DataConfig)
    fl: flsim.FlConfig = field(default_factory=flsim.FlConfig)
    attack: attack_mod.AttackConfig = field(default_factory=attack_mod.AttackConfig)
    harness: AttackHarnessConfig = field(default_factory=AttackHarnessConfig)
    hidden_dims: tuple = (32,)


def _take_section(raw: dict, name: str, cls, errors: list[str], extra_keys=()):
    """Build dataclass `cls` from raw[name], collecting unknown-key errors.

    Returns (instance, leftover) where leftover holds the extra_keys values.
    """
    section = raw.get(name, {})
    if not isinstance(section, dict):
        errors.append(f"config section '{name}' must be an object")
        return cls(), {}
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    leftover = {}
    for key, value in section.items():
        if key in extra_keys:
            leftover[key] = value
        elif key in known:
            kwargs[key] = value
        else:
            errors.append(f"unknown key '{name}.{key}'")
    try:
        return cls(**kwargs), leftover
    except (TypeError, ValueError) as exc:
        errors.append(f"bad value in section '{name}': {exc}")
        return cls(), leftover


def load_spec(path: str) -> tuple[ExperimentSpec | None, list[str]]:
    """Parse and validate a config file; returns (spec, errors)."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        return None, [f"config file not found: {path}"]
    except json.JSONDecodeError as exc:
        return None, [f"config file {path} is not valid JSON: {exc}"]
    if not isinstance(raw, dict):
        return None, [f"config file {path} must hold a JSON object"]

    errors: list[str] = []
    top_known = {"seed", "data", "model", "fl", "attack"}
    for key in raw:
        if key not in top_known:
            errors.append(f"unknown key '{key}'")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        errors.append("'seed' must be an integer")
        seed = 0
    env_seed = os.environ.get("SVDLAB_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            errors.append(f"SVDLAB_SEED must be an integer, got {env_seed!r}")

    data_cfg, _ = _take_section(raw, "data", flsim.DataConfig, errors)

    model_section = raw.get("model", {})
    hidden_dims = (32,)
    if isinstance(model_section, dict):
        for key in model_section:
            if key != "hidden_dims":
                errors.append(f"unknown key 'model.{key}'")
        dims = model_section.get("hidden_dims", [32])
        if (
            not isinstance(dims, list)
            or not dims
            or not all(isinstance(d, int) and d >= 1 for d in dims)
        ):
            errors.append("'model.hidden_dims' must be a non-empty list of positive ints")
        else:
            hidden_dims = tuple(dims)
    else:
        errors.append("config section 'model' must be an object")

    fl_cfg, fl_extra = _take_section(raw, "fl", flsim.FlConfig, errors, extra_keys=("defense",))
    defense_raw = {"fl": fl_extra.get("defense", {})}
    defense_cfg, _ = _take_section(defense_raw, "fl", defense_mod.DefenseConfig, errors)
    defense_cfg = replace(defense_cfg, seed=seed)
    fl_cfg = replace(fl_cfg, defense=defense_cfg, seed=seed)

    harness_keys = {f.name for f in dataclasses.fields(AttackHarnessConfig)}
    attack_cfg, attack_extra = _take_section(
        raw, "attack", attack_mod.AttackConfig, errors, extra_keys=tuple(harness_keys)
    )
    try:
        harness = AttackHarnessConfig(**attack_extra)
    except (TypeError, ValueError) as exc:
        errors.append(f"bad value in section 'attack': {exc}")
        harness = AttackHarnessConfig()
    attack_cfg = replace(attack_cfg, seed=seed, defense=defense_cfg)

    spec = ExperimentSpec(
        seed=seed, data=data_cfg, fl=fl_cfg, attack=attack_cfg,
        harness=harness, hidden_dims=hidden_dims,
    )
    errors.extend(spec.data.validate())
    errors.extend(spec.fl.validate())
    errors.extend(spec.attack.validate())
    errors.extend(spec.harness.validate())
    if spec.attack.label_mode == "inferred" and spec.harness.batch_size != 1:
        errors.append("label_mode 'inferred' requires attack.batch_size = 1")
    return spec, errors


def _write_text_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv(rows: list[list], header: list[str]) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def run_train(spec: ExperimentSpec, out_dir: str):
    """Train and persist rounds CSV plus the final checkpoint. Returns the
    report list and final model for reuse by sweep."""
    reports, model = flsim.run_experiment(spec.fl, spec.data, spec.hidden_dims)
    rows = [
        [r.round_index, r.accuracy, r.bytes_up, r.bytes_down, r.mean_entropy,
         spec.fl.defense.method]
        for r in reports
    ]
    header = ["round", "accuracy", "bytes_up", "bytes_down", "mean_entropy", "defense_method"]
    _write_text_atomic(os.path.join(out_dir, "rounds.csv"), _csv(rows, header))
    tinynn.save_model(model, os.path.join(out_dir, "model.bin"))
    return reports, model


def pick_victim_batches(ds, n_examples: int, batch_size: int, seed: int):
    """Deterministic target examples, each padded with companions carrying
    distinct labels."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    targets = rng.choice(len(ds.examples), size=min(n_examples, len(ds.examples)), replace=False)
    batches = []
    labels = np.array([ex.label for ex in ds.examples])
    for t in targets:
        batch = [int(t)]
        used = {int(labels[t])}
        candidates = rng.permutation(len(ds.examples))
        for c in candidates:
            if len(batch) == batch_size:
                break
            if int(labels[c]) not in used:
                batch.append(int(c))
                used.add(int(labels[c]))
        if len(batch) < batch_size:
            raise InvalidConfig(
                "not enough distinct labels for the requested attack batch size"
            )
        batches.append(batch)
    return batches


def attack_one(model, ds, batch_indices, spec: ExperimentSpec, run_seed: int):
    """Defend one victim batch per the fl defense and attack it; returns the
    per-example metric values and the best attack result."""
    batch = [ds.examples[i] for i in batch_indices]
    labels = [ex.label for ex in batch]
    _, grads = tinynn.loss_and_grad(model, batch)
    packets, _ = defense_mod.defend_update(
        grads, spec.fl.defense,
        rng=np.random.default_rng(np.random.SeedSequence([spec.seed, 8, run_seed])),
    )
    shape = (len(batch), model.input_dim)
    kwargs = {}
    if spec.attack.label_mode == "known":
        kwargs["labels"] = labels
    best = None
    for j in range(spec.harness.restarts):
        cfg = replace(spec.attack, seed=spec.seed + 1000 * j + run_seed)
        result = attack_mod.run_attack(model, packets, shape, cfg, **kwargs)
        if best is None or result.final_distance < best.final_distance:
            best = result
    truth = batch[0].input
    return (
        metrics.mse(truth, best.reconstructed),
        metrics.psnr(truth, best.reconstructed),
        metrics.ssim(truth, best.reconstructed, window=min(7, ds.side)),
        best,
    )


def run_attack_suite(spec: ExperimentSpec, out_dir: str, model=None, write_images=True):
    """Attack a sampled set of victims; emits the metric CSV and image dumps.

    Returns the list of (mse, psnr, ssim) rows.
    """
    train, _, _, built_model = flsim.build_experiment(spec.fl, spec.data, spec.hidden_dims)
    if model is None:
        model = built_model
    batches = pick_victim_batches(
        train, spec.harness.n_examples, spec.harness.batch_size, spec.seed
    )
    rows = []
    values = []
    for i, batch_indices in enumerate(batches):
        m, p, s, best = attack_one(model, train, batch_indices, spec, run_seed=i)
        values.append((m, p, s))
        rows.append([i, spec.fl.defense.method, spec.attack.adaptive, m, p, s])
        if write_images:
            truth = train.examples[batch_indices[0]].input
            attack_mod.write_pgm(truth, train.side, os.path.join(out_dir, f"truth_{i:03d}.pgm"))
            attack_mod.write_pgm(
                best.reconstructed, train.side, os.path.join(out_dir, f"recon_{i:03d}.pgm")
            )
            attack_mod.write_image_csv(
                truth, best.reconstructed, train.side,
                os.path.join(out_dir, f"images_{i:03d}.csv"),
            )
    arr = np.array(values)
    rows.append(
        ["mean", spec.fl.defense.method, spec.attack.adaptive,
         float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 2].mean())]
    )
    header = ["example_id", "defense", "attack_mode", "mse", "psnr", "ssim"]
    _write_text_atomic(os.path.join(out_dir, "attack.csv"), _csv(rows, header))
    return values


def _apply_axis(spec: ExperimentSpec, axis: str, value: float) -> ExperimentSpec:
    if axis == "beta":
        defense_cfg = replace(spec.fl.defense, beta=value)
    elif axis == "noise_scale":
        defense_cfg = replace(spec.fl.defense, noise_scale=value)
    elif axis == "prune_rate":
        defense_cfg = replace(spec.fl.defense, prune_rate=value)
    elif axis == "rho":
        fl = replace(spec.fl, rho=value, partition_scheme="rho")
        return replace(spec, fl=fl, attack=replace(spec.attack, defense=fl.defense))
    else:
        raise InvalidConfig(f"unknown sweep axis {axis!r}")
    fl = replace(spec.fl, defense=defense_cfg)
    return replace(spec, fl=fl, attack=replace(spec.attack, defense=defense_cfg))


def run_sweep(spec: ExperimentSpec, axis: str, values: list[float], out_dir: str):
    """One train + attack per axis value; returns the summary rows."""
    rows = []
    for value in values:
        point = _apply_axis(spec, axis, value)
        point_dir = os.path.join(out_dir, f"{axis}_{value:g}")
        os.makedirs(point_dir, exist_ok=True)
        reports, model = run_train(point, point_dir)
        attack_values = run_attack_suite(point, point_dir, write_images=False)
        baseline_up = (
            flsim.raw_upload_bytes(model) * point.fl.clients_per_round * point.fl.rounds
        )
        total_up = sum(r.bytes_up for r in reports)
        rows.append(
            [
                axis,
                value,
                reports[-1].accuracy,
                float(np.mean([v[0] for v in attack_values])),
                metrics.comm_reduction(total_up, baseline_up),
                float(np.mean([r.mean_entropy for r in reports])),
            ]
        )
    header = ["axis", "value", "final_accuracy", "mean_attack_mse",
              "comm_reduction_pct", "mean_entropy"]
    _write_text_atomic(os.path.join(out_dir, "sweep.csv"), _csv(rows, header))
    return rows


def _prepare(args) -> tuple[ExperimentSpec | None, int]:
    spec, errors = load_spec(args.config)
    if errors:
        for line in errors:
            print(f"config error: {line}", file=sys.stderr)
        return None, EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    return spec, EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="svdlab",
        description="Federated-learning gradient defense / inversion laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "run a federated training experiment"),
        ("attack", "run gradient inversion attacks against defended updates"),
        ("sweep", "train + attack across one parameter axis"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", required=True, help="output directory")
        if name == "attack":
            p.add_argument("--model", default=None, help="checkpoint to attack (default: fresh init)")
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=SWEEP_AXES)
            p.add_argument("--values", required=True, help="comma-separated values")
    args = parser.parse_args(argv)

    spec, code = _prepare(args)
    if spec is None:
        return code
    try:
        if args.command == "train":
            run_train(spec, args.out)
        elif args.command == "attack":
            model = tinynn.load_model(args.model) if args.model else None
            run_attack_suite(spec, args.out, model=model)
        else:
            try:
                values = [float(v) for v in args.values.split(",") if v.strip() != ""]
            except ValueError:
                print(f"config error: bad sweep values {args.values!r}", file=sys.stderr)
                return EXIT_CONFIG
            if not values:
                print("config error: empty sweep axis", file=sys.stderr)
                return EXIT_CONFIG
            run_sweep(spec, args.axis, values, args.out)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
