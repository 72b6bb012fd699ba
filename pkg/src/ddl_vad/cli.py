"""Command-line entry point: synth, train, score, eval, gradcheck.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 I/O or data error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import SECTIONS, ConfigError, RunConfig, load_config_file, resolve
from .data_io import BagFormatError, ManifestError, generate_synthetic, load_bags, read_manifest, write_synthetic
from .metrics import (
    AnnotationError,
    UndefinedMetricError,
    evaluate,
    expand_scores,
    read_annotations,
    read_score_csv,
    write_score_csv,
)
from .model import init_params, predict
from .trainer import (
    CheckpointError,
    NonFiniteGradientError,
    grad_audit,
    load_checkpoint,
    new_train_state,
    save_checkpoint,
    toy_problem,
    train_epoch,
)

log = logging.getLogger("ddl_vad")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

# flag name -> (section, field); --seed is shared and handled separately
_FIELD_FLAGS: dict[str, tuple[str, str]] = {}
for _section, _cls in SECTIONS.items():
    for _f in dataclasses.fields(_cls):
        if _f.name != "seed":
            _FIELD_FLAGS[_f.name] = (_section, _f.name)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file in the RunConfig layout")
    p.add_argument("--profile", choices=["ucf", "xd", "desk"])
    p.add_argument("--seed", type=int, help="seed for synthesis and training")
    group = p.add_argument_group("configuration overrides")
    for dest, (section, name) in _FIELD_FLAGS.items():
        default = next(f for f in dataclasses.fields(SECTIONS[section]) if f.name == name).default
        flag = "--" + name.replace("_", "-")
        if isinstance(default, bool):
            group.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, tuple):
            group.add_argument(flag, dest=dest, type=int, nargs=len(default), default=None)
        else:
            group.add_argument(flag, dest=dest, type=type(default), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddl-vad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--data", required=True, help="training manifest JSON")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("score", help="frame-level scores for every bag in a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--annotations", help="supplies per-video frame counts (default 16 x T)")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("eval", help="frame-level AUC and AP of a score CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out")
    _add_config_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all gradients on a toy model")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--out")
    _add_config_flags(p)
    return parser


def resolve_args(args) -> RunConfig:
    overrides: dict = {section: {} for section in SECTIONS}
    for dest, (section, name) in _FIELD_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[section][name] = list(value) if isinstance(value, list) else value
    if args.seed is not None:
        overrides["train"]["seed"] = args.seed
        overrides["synth"]["seed"] = args.seed
    file_values = load_config_file(args.config) if args.config else None
    return resolve(args.profile, file_values, overrides)


def _write_config(cfg: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    ds = generate_synthetic(cfg.synth)
    paths = write_synthetic(ds, out)
    _write_config(cfg, out)
    (out / "synth_spec.json").write_text(json.dumps(dataclasses.asdict(cfg.synth), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test bags to {out}")
    for key, path in paths.items():
        print(f"  {key}: {path}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    manifest = read_manifest(args.data)
    bags = load_bags(manifest)
    labels = {b.label for b in bags}
    if cfg.train.epochs > 0 and labels != {0, 1}:
        raise ConfigError("training manifest needs both normal and abnormal bags")
    hp, tc = cfg.model, cfg.train
    _write_config(cfg, out)
    state = new_train_state(init_params(hp, manifest.dim, tc.seed), tc)
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "lr", "total", "mil", "dr", "da"])
        while state.epoch < tc.epochs:
            m = train_epoch(state, bags, hp, tc)
            writer.writerow([m.epoch, repr(m.lr), repr(m.total), repr(m.mil), repr(m.dr), repr(m.da)])
            log.info("epoch %d lr %.2e loss %.5f (mil %.5f dr %.5f da %.5f)", m.epoch, m.lr, m.total, m.mil, m.dr, m.da)
            if tc.checkpoint_interval and state.epoch % tc.checkpoint_interval == 0 and state.epoch < tc.epochs:
                save_checkpoint(out / f"checkpoint_epoch{state.epoch:03d}.ddlc", state, hp, manifest.dim)
    save_checkpoint(out / "checkpoint.ddlc", state, hp, manifest.dim)
    print(f"trained {state.epoch} epochs; checkpoint at {out / 'checkpoint.ddlc'}")
    return EXIT_OK


def cmd_score(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    state, hp, dim = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    if manifest.dim != dim:
        raise ConfigError(f"checkpoint expects {dim}-dim features, manifest has {manifest.dim}")
    frames = {}
    if args.annotations:
        frames = {a.video_id: a.total_frames for a in read_annotations(args.annotations)}
    results = {}
    for bag in load_bags(manifest):
        scores = predict(bag.features, state.params, hp)
        total = frames.get(bag.video_id, 16 * bag.length)
        results[bag.video_id] = expand_scores(scores, total)
    _write_config(cfg, out)
    write_score_csv(results, out / "scores.csv")
    print(f"scored {len(results)} videos -> {out / 'scores.csv'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    scores = read_score_csv(args.scores)
    annotations = read_annotations(args.annotations)
    result = evaluate(scores, annotations)
    text = json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        _write_config(cfg, out)
        (out / "metrics.json").write_text(text)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    hp = cfg.model
    params, pos, neg, toy_hp = toy_problem(
        seed=cfg.train.seed, lambda1=hp.lambda1, lambda2=hp.lambda2, zeta=hp.zeta, epsilon=hp.epsilon,
        use_prior=hp.use_prior, literal_mil=hp.literal_mil,
    )
    report = grad_audit(params, pos, neg, toy_hp, tolerance=args.tolerance, step=args.step)
    text = "\n".join(report.lines()) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        _write_config(cfg, out)
        (out / "gradcheck.txt").write_text(text)
    return EXIT_OK if report.passed else EXIT_VERIFY


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_args(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UndefinedMetricError, NonFiniteGradientError) as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (OSError, BagFormatError, ManifestError, CheckpointError, AnnotationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
