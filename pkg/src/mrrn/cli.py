"""Command-line entry point: ``mrrn <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .arch import ArchConfig, ConfigError, PUBLISHED_PARAM_COUNT, build_model, count_params
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .metrics import STRUCTURE_NAMES, aggregate, emit_table, per_case_dsc, read_stats_csv
from .phantom import (DatasetFormatError, LabeledSlice, PhantomError, PhantomParams, generate_corpus,
                      make_splits, read_dataset, read_slice, write_dataset, write_slice)
from .textconfig import TextConfigError
from .training import TrainingError, predict, threads, train, write_history

log = logging.getLogger("mrrn")

HISTORY_NAME = "history.csv"
BEST_NAME = "best.ckpt"
EVAL_NAME = "eval.csv"
REPORT_NAME = "report.txt"
METHOD_LABELS = {"mrrn": "MRRN", "unet": "U-Net"}

# RGB tints for the overlay: agreement, prediction only, ground truth only
_AGREE, _PRED_ONLY, _GT_ONLY = (0, 200, 0), (230, 40, 40), (40, 90, 255)


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="sectioned key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--out", help="output directory (default: [run] out)")
    p.add_argument("--seed", type=int, help="run seed (default: MRRN_SEED or 0)")
    p.add_argument("--threads", type=int, help="BLAS threads; 1 is the reproducible path")
    p.add_argument("--model", choices=sorted(METHOD_LABELS), help="architecture kind")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--data-dir", help="MRSL corpus directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mrrn", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate-data", help="write a synthetic phantom corpus and manifest")
    _add_common(p)

    p = sub.add_parser("train", help="train a model; writes history.csv and checkpoints")
    _add_common(p)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", help="per-structure DSC statistics on one split")
    _add_common(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", help=f"model checkpoint (default: <out>/{BEST_NAME})")
    src.add_argument("--predictions", help="directory of predicted MRSL masks named <slice_id>.mrsl")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--method", help="row label in the output table")

    p = sub.add_parser("predict", help="write predicted masks and overlay images")
    _add_common(p)
    p.add_argument("--checkpoint", help=f"model checkpoint (default: <out>/{BEST_NAME})")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("gradcheck", help="finite-difference suite over every op and the tiny model")
    _add_common(p)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--ops-only", action="store_true", help="skip the whole-model checks")

    p = sub.add_parser("param-count", help="trainable parameter count for a config")
    _add_common(p)

    p = sub.add_parser("report", help="render the DSC table from eval CSVs")
    _add_common(p)
    p.add_argument("inputs", nargs="+", help="eval CSV files")
    p.add_argument("--digits", type=int, default=2)
    return parser


def _overrides(args) -> dict[str, dict[str, str]]:
    ov: dict[str, dict[str, str]] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        sec, dot, name = key.partition(".")
        if not sep or not dot or not sec or not name:
            raise CLIError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        ov.setdefault(sec.strip(), {})[name.strip()] = value.strip()
    for flag, sec, name in (("out", "run", "out"), ("seed", "run", "seed"), ("threads", "run", "threads"),
                            ("model", "run", "model"), ("precision", "train", "precision"),
                            ("data_dir", "data", "data_dir"), ("epochs", "train", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            ov.setdefault(sec, {})[name] = str(value)
    return ov


def resolve_config(args) -> RunConfig:
    ov = _overrides(args)
    cfg = load_run_config(args.config, ov)
    if "threads" not in ov.get("train", {}):
        cfg.train.threads = cfg.threads
    cfg.train.checkpoint_dir = cfg.out
    return cfg.validate()


def _phantom_params(cfg: RunConfig) -> PhantomParams:
    return PhantomParams(size=cfg.data.size, noise_sigma=cfg.data.noise_sigma)


def _load_split(cfg: RunConfig, split: str) -> list[LabeledSlice]:
    data = read_dataset(cfg.data.data_dir, split)
    if not data:
        raise CLIError(f"no {split!r} slices in {cfg.data.data_dir}")
    return data


# --------------------------------------------------------------------------- commands

def cmd_generate_data(cfg: RunConfig, args) -> int:
    params = _phantom_params(cfg)
    params.validate()
    manifest = make_splits(cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, seed=cfg.seed)
    corpus = generate_corpus(params, [sid for sid, _ in manifest], cfg.seed)
    write_dataset(corpus, cfg.data.data_dir, dict(manifest))
    print(f"wrote {len(corpus)} slices ({cfg.data.n_train} train / {cfg.data.n_val} val / "
          f"{cfg.data.n_test} test) to {cfg.data.data_dir}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    train_set = _load_split(cfg, "train")
    val_set = _load_split(cfg, "val")
    model = build_model(cfg.model, cfg.arch, seed=cfg.seed, precision=cfg.train.precision)
    best, history = train(model, train_set, val_set, cfg.train)
    out = Path(cfg.out)
    write_history(history, out / HISTORY_NAME)
    save_checkpoint(best, out / BEST_NAME)
    rec = history[best.best_epoch - 1]
    print(f"best epoch {best.best_epoch}: validation DSC {rec.dsc_avg:.4f}; checkpoint {out / BEST_NAME}")
    return 0


def _predictions_from_dir(directory: str, slices: Sequence[LabeledSlice]) -> list[np.ndarray]:
    root = Path(directory)
    out = []
    for s in slices:
        pred = read_slice(root / f"{s.slice_id}.mrsl", s.slice_id)
        if pred.mask.shape != s.mask.shape:
            raise CLIError(f"prediction {s.slice_id} is {pred.mask.shape}, ground truth {s.mask.shape}")
        out.append(pred.mask)
    return out


def _checkpoint_path(cfg: RunConfig, args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / BEST_NAME


def cmd_eval(cfg: RunConfig, args) -> int:
    slices = _load_split(cfg, args.split)
    if args.predictions:
        preds = _predictions_from_dir(args.predictions, slices)
        method = args.method or "predictions"
    else:
        model = load_checkpoint(_checkpoint_path(cfg, args))
        with threads(cfg.threads):
            preds = list(predict(model, slices))
        method = args.method or METHOD_LABELS.get(model.kind, model.kind)
    per_case = per_case_dsc(preds, [s.mask for s in slices])
    row = {name: aggregate(per_case[lab]) for lab, name in enumerate(STRUCTURE_NAMES, start=1)}
    csv_text = emit_table({method: row}, format="csv")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / EVAL_NAME).write_text(csv_text)
    print(emit_table({method: row}), end="")
    return 0


def overlay_pixmap(image: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> bytes:
    """Binary PPM: grayscale image with prediction/ground-truth agreement tinted."""
    gray = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    pf, gf = pred > 0, gt > 0
    agree = pf & gf & (pred == gt)
    for sel, colour in ((agree, _AGREE), (pf & ~agree, _PRED_ONLY), (gf & ~pf, _GT_ONLY)):
        rgb[sel] = (rgb[sel] // 2 + np.array(colour, dtype=np.uint8) // 2)
    h, w = gray.shape
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def label_graymap(mask: np.ndarray) -> bytes:
    """Binary PGM of a label mask, labels spread over the gray range."""
    h, w = mask.shape
    return f"P5\n{w} {h}\n255\n".encode() + (mask.astype(np.uint8) * 51).tobytes()


def cmd_predict(cfg: RunConfig, args) -> int:
    slices = _load_split(cfg, args.split)
    model = load_checkpoint(_checkpoint_path(cfg, args))
    with threads(cfg.threads):
        preds = predict(model, slices)
    out = Path(cfg.out)
    mask_dir, ov_dir = out / "predictions", out / "overlays"
    mask_dir.mkdir(parents=True, exist_ok=True)
    ov_dir.mkdir(parents=True, exist_ok=True)
    for s, p in zip(slices, preds):
        write_slice(LabeledSlice(s.image, p, s.slice_id), mask_dir / f"{s.slice_id}.mrsl")
        (ov_dir / f"{s.slice_id}.ppm").write_bytes(overlay_pixmap(s.image, p, s.mask))
        (ov_dir / f"{s.slice_id}_pred.pgm").write_bytes(label_graymap(p))
    print(f"wrote {len(slices)} predicted masks to {mask_dir} and overlays to {ov_dir}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .verify import run_suite

    precisions = (args.precision,) if args.precision else ("f64", "f32")
    reports = run_suite(precisions, instances=args.instances, seed=cfg.seed,
                        include_models=not args.ops_only, log=print)
    failed = [r for r in reports if not r.passed]
    for prec in precisions:
        worst = max(r.max_rel_error for r in reports if r.precision == prec)
        print(f"{prec}: max relative error {worst:.3e} over {sum(r.precision == prec for r in reports)} checks")
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(f'{r.name}/{r.precision}' for r in failed)}",
              file=sys.stderr)
        return 1
    return 0


def cmd_param_count(cfg: RunConfig, args) -> int:
    model = build_model(cfg.model, cfg.arch, seed=cfg.seed, precision=cfg.train.precision)
    n = count_params(model)
    print(n)
    if cfg.model == "mrrn" and cfg.arch == ArchConfig():
        print(f"reference config: {n} vs {PUBLISHED_PARAM_COUNT} published, delta {n - PUBLISHED_PARAM_COUNT:+d}")
    return 0


def _median_iqr_lines(table) -> list[str]:
    lines = ["", "# median DSC (IQR: q1-q3)"]
    for method, row in table.items():
        cells = [f"{s} {st.median:.2f} ({st.q1:.2f}-{st.q3:.2f})" for s, st in row.items() if st.median == st.median]
        if cells:
            lines.append(f"{method}: " + "; ".join(cells))
    return lines


def cmd_report(cfg: RunConfig, args) -> int:
    table: dict = {}
    for path in args.inputs:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise CLIError(f"cannot read {path}: {exc.strerror}") from None
        for method, row in read_stats_csv(text).items():
            if method in table:
                raise CLIError(f"method {method!r} appears in more than one input")
            table[method] = {s: row[s] for s in STRUCTURE_NAMES if s in row}
    doc = emit_table(table, digits=args.digits)
    doc += "\n".join(_median_iqr_lines(table)) + "\n"
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_NAME).write_text(doc)
    print(doc, end="")
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "param-count": cmd_param_count,
    "report": cmd_report,
}

_EXPECTED = (CLIError, ConfigError, TextConfigError, CheckpointError, DatasetFormatError, PhantomError,
             TrainingError, ValueError, OSError)


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        cfg = resolve_config(args)
        cfg.write(cfg.out)
        with threads(cfg.threads):
            return COMMANDS[args.command](cfg, args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except _EXPECTED as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        if isinstance(exc, OSError) and exc.filename is not None:
            msg = f"{exc.strerror or 'I/O error'}: {exc.filename}"
        print(f"mrrn: error: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, (CLIError, ConfigError, TextConfigError)) else 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
