"""Command-line entry point: ``vigait {synth,train,eval,gradcheck,inspect}``.

Exit codes: 0 success, 1 a check failed, 2 usage or input error,
3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .backbone import BackboneConfig
from .config import ConfigError, load_config, merge, parse_bool, parse_list
from .data import load_dataset, write_pgm
from .data.synth import CONDITIONS, generate
from .evaluator import EvalProtocol, evaluate
from .hpp import HppConfig
from .losses import LossWeights
from .model import SELECTION_MODES, ModelConfig
from .projection import INIT_SCHEMES, PLACEMENTS, difference_summary, relative_difference
from .trainer import NumericalAbort, TrainConfig, gradcheck_model, model_from_checkpoint, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("vigait")


class UsageError(Exception):
    pass


def _ints(text):
    return parse_list(text, int)


def _floats(text):
    return parse_list(text, float)


def _strs(text):
    return parse_list(text, str)


def subject_positions(text: str, count: int) -> list[int]:
    """``"1-10,15"`` -> zero-based positions into the sorted subject list."""
    if text.strip().lower() == "all":
        return list(range(count))
    out = []
    for part in parse_list(text):
        lo, _, hi = part.partition("-")
        lo, hi = int(lo), int(hi or lo)
        if lo < 1 or hi > count or lo > hi:
            raise UsageError(f"subject range {part!r} outside 1-{count}")
        out.extend(range(lo - 1, hi))
    return sorted(set(out))


# (flag, type for config-file values, default, help); ``None`` default = required or unset
SYNTH_OPTS = {
    "out": (str, None, "output directory (required)"),
    "subjects": (int, 10, "number of subjects"),
    "views": (int, 8, "number of views spread evenly over -90..90 degrees (0 is frontal)"),
    "angles": (_floats, None, "explicit comma-separated azimuths (overrides --views)"),
    "seqs": (int, 4, "sequences per subject, condition and view"),
    "frames": (int, 24, "frames per sequence"),
    "conditions": (_strs, ["nm"], "comma-separated walking conditions (nm, bg, cl)"),
    "variation": (float, 0.03, "per-sequence body/gait jitter"),
    "seed": (int, 0, "generator seed"),
}

TRAIN_OPTS = {
    "data": (str, None, "dataset root (required)"),
    "out": (str, None, "checkpoint path (required)"),
    "log": (str, None, "metrics TSV path (default: <out>.tsv)"),
    "resume": (str, None, "continue from this checkpoint"),
    "subjects": (str, "all", "training subjects as 1-based ranges of the sorted list, e.g. 1-10"),
    "iterations": (int, 1000, "total iterations"),
    "lr": (float, 1e-4, "Adam learning rate"),
    "lr_drop_factor": (float, None, "multiply the learning rate by this factor ..."),
    "lr_drop_at": (int, None, "... from this iteration on"),
    "p": (int, 4, "subjects per batch"),
    "k": (int, 4, "sequences per subject"),
    "frames": (int, 8, "frames sampled per sequence"),
    "margin": (float, 0.2, "triplet margin"),
    "lambda_ce": (float, 0.5, "view cross-entropy weight"),
    "lambda_trip": (float, 1.0, "triplet weight"),
    "beta1": (float, 0.9, "Adam beta1"),
    "beta2": (float, 0.999, "Adam beta2"),
    "adam_eps": (float, 1e-8, "Adam epsilon"),
    "seed": (int, 0, "initialisation and sampling seed"),
    "selection_mode": (str, "predicted", "bank matrix selection: predicted or ground-truth"),
    "placement": (str, "after-separate-fc", "bank placement"),
    "shared": (parse_bool, False, "one bank matrix per view shared by every strip"),
    "baseline": (parse_bool, False, "disable the projection bank"),
    "bank_init": (str, "identity-perturbed", "bank initialisation"),
    "bank_eps": (float, 0.01, "perturbation scale for identity-perturbed"),
    "freeze": (_strs, [], "comma-separated parameter name prefixes to keep fixed"),
    "widths": (_ints, [8, 16, 32], "backbone channel widths"),
    "scales": (_ints, [1, 2, 4], "pyramid scales"),
    "dim": (int, 64, "strip feature dimension D"),
    "view_dim": (int, 32, "view head hidden dimension"),
}

EVAL_OPTS = {
    "model": (str, None, "checkpoint (required)"),
    "data": (str, None, "dataset root (required)"),
    "subjects": (str, None, "evaluation subjects (default: those not used for training)"),
    "gallery": (_strs, ["NM#1-2"], "gallery selectors"),
    "probe": (_strs, ["NM#3-4"], "probe selectors"),
    "exclude_identical": (parse_bool, True, "drop same-view gallery entries"),
    "out": (str, None, "report TSV path"),
    "table": (str, None, "aligned text table path"),
}

GRADCHECK_OPTS = {
    "eps": (float, 1e-5, "finite-difference step"),
    "samples": (int, 5, "coordinates per parameter tensor"),
    "threshold": (float, 1e-4, "maximum allowed relative error"),
    "seed": (int, 0, "seed"),
}

INSPECT_OPTS = {
    "model": (str, None, "checkpoint (required)"),
    "strip": (int, 0, "strip index"),
    "views": (_ints, None, "two view labels a,b"),
    "angles": (_floats, None, "two azimuths a,b (alternative to --views)"),
    "out": (str, ".", "output directory"),
}

COMMANDS = {
    "synth": SYNTH_OPTS,
    "train": TRAIN_OPTS,
    "eval": EVAL_OPTS,
    "gradcheck": GRADCHECK_OPTS,
    "inspect": INSPECT_OPTS,
}


def _flag_type(conv):
    if conv is parse_bool:
        return None
    return conv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vigait", description="View-conditioned gait embeddings")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override it")
        for key, (conv, default, text) in opts.items():
            flag = "--" + key.replace("_", "-")
            shown = f"{text} [default: {default}]" if default not in (None, []) else text
            if conv is parse_bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, help=shown)
                p.add_argument("--no-" + key.replace("_", "-"), dest=key, action="store_const", const=False)
            else:
                p.add_argument(flag, dest=key, type=conv, help=shown)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    opts = COMMANDS[command]
    flags = {k: getattr(ns, k) for k in opts}
    file_values = load_config(ns.config) if ns.config else {}
    values = merge({k: v[0] for k, v in opts.items()}, file_values, flags)
    for key, (_, default, _) in opts.items():
        if values.get(key) is None:
            values[key] = default
    return values


def _require(values: dict, *keys: str) -> None:
    missing = [k for k in keys if values.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# ------------------------------------------------------------------ commands


def cmd_synth(o: dict) -> int:
    _require(o, "out")
    angles = o["angles"] or [float(a) for a in np.rint(np.linspace(-90, 90, o["views"])) + 0.0]
    bad = [c for c in o["conditions"] if c not in CONDITIONS]
    if bad:
        raise UsageError(f"unknown condition(s) {bad}; choose from {CONDITIONS}")
    rows = generate(o["out"], o["subjects"], angles, o["seqs"], o["frames"], o["seed"], o["conditions"], o["variation"])
    print(f"wrote {len(rows)} sequences ({o['subjects']} subjects x {len(o['conditions'])} conditions x "
          f"{len(angles)} views x {o['seqs']} seqs, {o['frames']} frames) to {o['out']}")
    print("angles: " + ", ".join(f"{a:g}" for a in angles))
    return EXIT_OK


def _model_config(o: dict, num_views: int) -> ModelConfig:
    if o["placement"] not in PLACEMENTS:
        raise UsageError(f"--placement must be one of {PLACEMENTS}")
    if o["bank_init"] not in INIT_SCHEMES:
        raise UsageError(f"--bank-init must be one of {INIT_SCHEMES}")
    return ModelConfig(
        num_views=num_views,
        backbone=BackboneConfig(widths=tuple(o["widths"])),
        hpp=HppConfig(scales=tuple(o["scales"]), dim=o["dim"]),
        view_dim=o["view_dim"],
        use_bank=not o["baseline"],
        placement=o["placement"],
        shared=o["shared"],
        bank_init=o["bank_init"],
        bank_eps=o["bank_eps"],
    )


def cmd_train(o: dict) -> int:
    _require(o, "data", "out")
    if o["selection_mode"] not in SELECTION_MODES:
        raise UsageError(f"--selection-mode must be one of {SELECTION_MODES}")
    if (o["lr_drop_factor"] is None) != (o["lr_drop_at"] is None):
        raise UsageError("--lr-drop-factor and --lr-drop-at go together")
    index = load_dataset(o["data"])
    if not index.entries:
        raise UsageError(f"no sequences under {o['data']}")
    subjects = [index.subjects[i] for i in subject_positions(o["subjects"], len(index.subjects))]
    sequences = index.load_all(subjects)
    resume = ckpt_io.load(o["resume"]) if o["resume"] else None
    cfg = TrainConfig(
        learning_rate=o["lr"],
        lr_drop=None if o["lr_drop_factor"] is None else (o["lr_drop_factor"], o["lr_drop_at"]),
        iterations=o["iterations"],
        p=o["p"],
        k=o["k"],
        frames=o["frames"],
        weights=LossWeights(o["lambda_ce"], o["lambda_trip"], o["margin"]),
        betas=(o["beta1"], o["beta2"]),
        eps=o["adam_eps"],
        seed=o["seed"],
        selection_mode=o["selection_mode"],
        frozen=tuple(o["freeze"]),
    )
    meta = {"angles": index.angles, "train_subjects": subjects}
    model_cfg = _model_config(o, index.num_views) if resume is None else ModelConfig.from_dict(resume.config["model"])
    log_path = o["log"] or str(Path(o["out"]).with_suffix(".tsv"))
    result = train(sequences, model_cfg, cfg, resume=resume, log_path=log_path, meta=meta)
    ckpt_io.save(result.checkpoint, o["out"])
    last = result.log[-1] if result.log else None
    if last:
        print(f"iteration {last['iteration']}: ce {last['ce']:.4f} trip {last['trip']:.4f} "
              f"batch view acc {last['batch_view_acc']:.2f}")
    print(f"checkpoint: {o['out']}  log: {log_path}")
    return EXIT_OK


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    ckpt = ckpt_io.load(path)
    return ckpt, model_from_checkpoint(ckpt)


def cmd_eval(o: dict) -> int:
    _require(o, "model", "data")
    ckpt, model = _load_model(o["model"])
    protocol = EvalProtocol(o["gallery"], o["probe"], o["exclude_identical"])
    index = load_dataset(o["data"])
    meta = ckpt.config.get("meta", {})
    angles = [float(a) for a in meta.get("angles", index.angles)]
    unknown = sorted(set(index.angles) - set(angles))
    if unknown:
        raise UsageError(f"dataset angles {unknown} are unknown to the model")
    if o["subjects"]:
        subjects = [index.subjects[i] for i in subject_positions(o["subjects"], len(index.subjects))]
    else:
        trained = set(meta.get("train_subjects", []))
        subjects = [s for s in index.subjects if s not in trained] or index.subjects
    sequences = [replace(s, view=angles.index(s.angle)) for s in index.load_all(subjects)]
    report = evaluate(model, sequences, protocol, angles)
    text = report.to_table()
    print(text, end="")
    if o["out"]:
        Path(o["out"]).write_text(report.to_tsv(), encoding="utf-8")
    if o["table"]:
        Path(o["table"]).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(o: dict) -> int:
    errors = gradcheck_model(eps=o["eps"], samples=o["samples"], seed=o["seed"])
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{'ok  ' if err < o['threshold'] else 'FAIL'} {name:32s} {err:.3e}")
    print(f"max relative error {worst:.3e} (threshold {o['threshold']:g})")
    return EXIT_OK if worst < o["threshold"] else EXIT_FAIL


def cmd_inspect(o: dict) -> int:
    _require(o, "model")
    ckpt, model = _load_model(o["model"])
    bank = model.bank
    if bank is None:
        raise UsageError("checkpoint has no projection bank (baseline model)")
    if o["angles"] is not None:
        angles = [float(a) for a in ckpt.config.get("meta", {}).get("angles", [])]
        try:
            views = [angles.index(a) for a in o["angles"]]
        except ValueError:
            raise UsageError(f"angles {o['angles']} not among the model's {angles}") from None
    else:
        views = o["views"] if o["views"] is not None else [0, bank.num_views - 1]
    if len(views) != 2:
        raise UsageError("need exactly two views")
    if any(not 0 <= v < bank.num_views for v in views):
        raise UsageError(f"view labels must lie in 0-{bank.num_views - 1}")
    if not 0 <= o["strip"] < bank.n:
        raise UsageError(f"strip {o['strip']} out of range 0-{bank.n - 1}")
    a, b = views
    za, zb = bank.matrix(a, o["strip"]), bank.matrix(b, o["strip"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    stem = f"strip{o['strip']}"
    np.savetxt(out / f"{stem}_view{a}.csv", za, delimiter=",", fmt="%.17g")
    np.savetxt(out / f"{stem}_view{b}.csv", zb, delimiter=",", fmt="%.17g")
    diff = np.abs(za - zb)
    peak = max(np.abs(za).max(), np.abs(zb).max())
    write_pgm(out / f"{stem}_diff_{a}_{b}.pgm", np.rint(np.clip(diff / peak, 0, 1) * 255).astype(np.uint8))
    print(f"strip {o['strip']} views {a} vs {b}: ||Za-Zb||_F = {np.linalg.norm(za - zb):.6g}, "
          f"||Za||_F = {np.linalg.norm(za):.6g}, relative = {relative_difference(za, zb):.6g}")
    summary = difference_summary(bank)
    strip, va, vb, rel = max(summary, key=lambda r: r[3])
    print(f"largest relative difference over all strips/pairs: {rel:.6g} (strip {strip}, views {va} vs {vb})")
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return HANDLERS[ns.command](resolve(ns.command, ns))
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, indent=2, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, FileNotFoundError, ckpt_io.CheckpointFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
