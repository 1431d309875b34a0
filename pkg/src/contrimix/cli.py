"""Command-line entry point: ``contrimix <subcommand> [flags]``.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on runtime
failures (missing files, numerical aborts, failed checks).
"""

from __future__ import annotations

import argparse
import contextlib
import difflib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import field_types, gen_config_keys, load_config
from .errors import ConfigError, ContriMixError, UsageError

log = logging.getLogger("contrimix")

SEED_ENV = "CONTRIMIX_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse calls this for every usage problem
        raise UsageError(f"{self.prog}: {message}")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", metavar="FILE", help="key-value config file with [train] and/or [data] sections")
    p.add_argument("--seed", type=int, help=f"master seed (falls back to ${SEED_ENV}, then the config)")
    p.add_argument("--threads", type=int, help="cap BLAS worker threads; 1 gives bit-reproducible runs")
    p.add_argument("--out", required=out_required, metavar="DIR", help="output directory; nothing is written elsewhere")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    from .config import TrainConfig

    g = p.add_argument_group("training config (mirrors [train] keys)")
    for key, tp in field_types(TrainConfig).items():
        if key == "seed":
            continue
        g.add_argument(_flag(key), dest=f"train__{key}", metavar=getattr(tp, "__name__", "VALUE").upper())


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data config (mirrors [data] keys)")
    for key in gen_config_keys():
        g.add_argument(_flag(key), dest=f"data__{key}", metavar="VALUE")


def _add_model_input(p: argparse.ArgumentParser, split_default: str = "test_ood") -> None:
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--split", default=split_default, choices=("train", "val_ood", "test_ood"))


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="contrimix", description="Content/attribute mixing for stain-robust classifiers.", allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"contrimix {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_, description=help_, allow_abbrev=False)
        subs[name] = p
        return p

    p = add("gen-data", "generate the synthetic multi-domain dataset")
    _add_common(p)
    _add_data_flags(p)

    for name, help_ in (("train", "train ContriMix encoders and backbone"), ("train-erm", "train the plain cross-entropy baseline")):
        p = add(name, help_)
        _add_common(p)
        p.add_argument("--data", required=True, metavar="DIR", help="dataset directory from gen-data")
        _add_train_flags(p)

    p = add("eval", "score a checkpoint, probe its encoders and export PCA embeddings")
    _add_common(p)
    _add_model_input(p)
    p.add_argument("--probe-split", default="train", choices=("train", "val_ood", "test_ood"))
    p.add_argument("--probe-per-cell", type=int, default=100, help="samples per (domain, label) cell for probes")

    p = add("ablate", "sweep one axis over seeds and tabulate mean (std) OOD accuracy")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--axis", required=True, help="mixes, attributes, centers or strategy")
    p.add_argument("--values", help="comma-separated grid; defaults to the standard grid for the axis")
    p.add_argument("--seeds", help="comma-separated training seeds (default: the resolved seed)")
    _add_train_flags(p)

    p = add("render-grid", "render the content x attribute mixing grid as a PPM image")
    _add_common(p)
    _add_model_input(p)
    p.add_argument("--content-indices", help="comma-separated sample indices for rows")
    p.add_argument("--donor-indices", help="comma-separated sample indices for columns")
    p.add_argument("--count", type=int, default=4, help="rows/columns to draw when indices are not given")

    p = add("render-content", "render each content channel of a few images as a PPM image")
    _add_common(p)
    _add_model_input(p)
    p.add_argument("--indices", help="comma-separated sample indices")
    p.add_argument("--count", type=int, default=4)

    p = add("gradcheck", "finite-difference check of every op and of the full training graph")
    _add_common(p, out_required=False)
    p.add_argument("--num-seeds", type=int, default=10)
    p.add_argument("--rtol", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-3, help="finite-difference step h")
    return parser, subs


# -- helpers -------------------------------------------------------------------------

def _resolve_seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"${SEED_ENV} must be an integer, got {env!r}") from None
    return None


def _overrides(args, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in vars(args).items() if k.startswith(prefix) and v is not None}


def _train_config(args):
    over = _overrides(args, "train__")
    seed = _resolve_seed(args)
    if seed is not None:
        over["seed"] = seed
    return load_config(args.config, train_overrides=over).train


def _int_list(text: str | None, what: str) -> list[int] | None:
    if text is None:
        return None
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{what} is empty")
    return vals


def _load_data(path: str):
    from .imaging import dataset_hash, load_dataset

    if not Path(path).exists():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    return load_dataset(path), dataset_hash(path)


def _pick(split, indices: list[int] | None, count: int, seed: int) -> np.ndarray:
    if indices is None:
        if count < 1:
            raise UsageError("--count must be at least 1")
        rng = np.random.default_rng(seed)
        return np.sort(rng.choice(len(split), size=min(count, len(split)), replace=False))
    idx = np.asarray(indices)
    if idx.min() < 0 or idx.max() >= len(split):
        raise UsageError(f"indices must lie in [0, {len(split)}), got {indices}")
    return idx


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .imaging import dataset_hash, make_dataset, save_dataset

    cfg = load_config(args.config, data_overrides=_overrides(args, "data__")).data
    seed = _resolve_seed(args)
    out = save_dataset(make_dataset(cfg, 0 if seed is None else seed), args.out)
    print(f"dataset written to {out} (hash {dataset_hash(out)[:12]})")
    return 0


def _cmd_train(args, erm: bool) -> int:
    from .trainer import train_contrimix, train_erm

    cfg = _train_config(args)
    ds, ds_id = _load_data(args.data)
    result = (train_erm if erm else train_contrimix)(ds, cfg, out_dir=args.out, dataset_id=ds_id)
    print(
        f"best val_ood accuracy {result.best_val_accuracy:.4f} at epoch {result.best_epoch}; "
        f"checkpoints in {Path(args.out) / 'checkpoints'}"
    )
    return 0


def cmd_train(args) -> int:
    return _cmd_train(args, erm=False)


def cmd_train_erm(args) -> int:
    return _cmd_train(args, erm=True)


def cmd_eval(args) -> int:
    from .encoders import load_model
    from .evaluation import evaluate_classifier, export_embedding_csv, pca_embed, probe_encoders

    ds, _ = _load_data(args.data)
    model, _ = load_model(args.checkpoint)
    split = ds.split(args.split)
    seed = _resolve_seed(args) or 0
    report = evaluate_classifier(model, split)
    report.attribute_probe, report.content_probe = probe_encoders(
        model, ds.split(args.probe_split), per_cell=args.probe_per_cell, seed=seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    zc, za = model.encodings(split.images)
    for name, enc in (("content", zc.mean(axis=(1, 2))), ("attribute", za.reshape(len(za), -1))):
        try:
            pca = pca_embed(enc, 2)
        except ContriMixError as exc:
            log.warning("skipping %s embedding: %s", name, exc)
            continue
        export_embedding_csv(out / f"embedding_{name}.csv", pca.coords, split.domains, split.name)
    print(
        f"{split.name}: accuracy {report.accuracy:.4f}, macro F1 {report.macro_f1:.4f}; "
        f"probes attribute {report.attribute_probe:.3f} content {report.content_probe:.3f}"
    )
    return 0


def cmd_ablate(args) -> int:
    from .trainer import run_ablation

    cfg = _train_config(args)
    ds, _ = _load_data(args.data)
    seeds = _int_list(args.seeds, "--seeds") or [cfg.seed]
    values = args.values.split(",") if args.values is not None else None
    result = run_ablation(args.axis, values, ds, cfg, seeds=seeds, out_dir=args.out)
    print(result.table())
    return 0


def cmd_render_grid(args) -> int:
    from .evaluation import render_mix_grid

    ds, _ = _load_data(args.data)
    split = ds.split(args.split)
    seed = _resolve_seed(args) or 0
    rows = _pick(split, _int_list(args.content_indices, "--content-indices"), args.count, seed)
    cols = _pick(split, _int_list(args.donor_indices, "--donor-indices"), args.count, seed + 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    render_mix_grid(args.checkpoint, split.images[rows], split.images[cols], out / "mix_grid.ppm")
    _write_json(out / "mix_grid.json", {"split": split.name, "content_indices": rows.tolist(), "donor_indices": cols.tolist()})
    print(f"wrote {out / 'mix_grid.ppm'}")
    return 0


def cmd_render_content(args) -> int:
    from .evaluation import render_content_channels

    ds, _ = _load_data(args.data)
    split = ds.split(args.split)
    idx = _pick(split, _int_list(args.indices, "--indices"), args.count, _resolve_seed(args) or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    render_content_channels(args.checkpoint, split.images[idx], out / "content_channels.ppm")
    _write_json(out / "content_channels.json", {"split": split.name, "indices": idx.tolist()})
    print(f"wrote {out / 'content_channels.ppm'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_suite
    from .trainer import rows_to_csv

    if args.num_seeds < 1:
        raise UsageError("--num-seeds must be at least 1")
    base = _resolve_seed(args) or 0
    results = run_suite(seeds=range(base, base + args.num_seeds), h=args.step, rtol=args.rtol)
    by_op: dict[str, list] = {}
    for r in results:
        by_op.setdefault(r.name, []).append(r)
    for name, rs in by_op.items():
        worst = max(r.max_rel_err for r in rs)
        status = "ok  " if all(r.passed for r in rs) else "FAIL"
        print(f"{status} {name:<28} max rel err {worst:.2e} over {len(rs)} seeds")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = [
            {"op": r.name, "seed": r.seed, "max_rel_err": r.max_rel_err, "n_checked": r.n_checked,
             "n_skipped": r.n_skipped, "passed": int(r.passed)}
            for r in results
        ]
        (out / "gradcheck.csv").write_text(
            rows_to_csv(rows, ("op", "seed", "max_rel_err", "n_checked", "n_skipped", "passed")), encoding="utf-8"
        )
    failed = sum(not r.passed for r in results)
    if failed:
        print(f"{failed} of {len(results)} checks failed", file=sys.stderr)
        return 2
    print(f"all {len(results)} checks passed at rtol {args.rtol:g}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-erm": cmd_train_erm,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "render-grid": cmd_render_grid,
    "render-content": cmd_render_content,
    "gradcheck": cmd_gradcheck,
}


def _suggest(unknown: Sequence[str], parser: argparse.ArgumentParser) -> str:
    known = [s for a in parser._actions for s in a.option_strings]
    hints = []
    for tok in unknown:
        if tok.startswith("-"):
            close = difflib.get_close_matches(tok.split("=")[0], known, n=1)
            if close:
                hints.append(f"{tok} (did you mean {close[0]}?)")
                continue
        hints.append(tok)
    return "unrecognized arguments: " + " ".join(hints)


@contextlib.contextmanager
def _thread_cap(n: int | None):
    if n is None:
        yield
        return
    if n < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def run_command(argv: Sequence[str] | None = None) -> int:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, unknown = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError(f"missing subcommand; choose from {', '.join(COMMANDS)}")
        if unknown:
            raise UsageError(f"contrimix {args.command}: " + _suggest(unknown, subs[args.command]))
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
        )
        with _thread_cap(args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("run 'contrimix --help' or 'contrimix COMMAND --help' for usage", file=sys.stderr)
        return 1
    except (ContriMixError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())
