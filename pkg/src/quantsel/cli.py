"""``quantsel`` command line: task generation, quantization, evaluation, reporting.

Every parameter can come from a flag or from a TOML file given with
``--config``; flags win. Top-level TOML keys apply to every command that
knows them, a ``[command-name]`` table only to that command.

Default output paths live under ``$QUANTSEL_OUT`` (``./quantsel-out`` when
unset). Existing outputs are never overwritten without ``--force``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import __version__, records as recio
from .confidence import SelectorModel, SelectorTrainConfig, selector_train
from .errors import NumericalError, ValidationError
from .mbq import DEFAULT_CALIB_SIZE, CalibBatch
from .metrics import DEFAULT_BINS, eval_mixture, mixture_csv, reliability_report, select_threshold
from .model import ModelConfig, init_model
from .pipeline import (
    FP_LABEL, RunManifest, evaluate, fit_split, load_model, parse_label, quantize_for_label,
    rescore, save_model, sha256_file, storage_report,
)
from .task import Sample, TaskConfig, calibration_batch, generate, pretraining_corpus
from .tensor_quant import Method
from .training import train_model

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

logger = logging.getLogger("quantsel")

OUT_ENV = "QUANTSEL_OUT"
DEFAULT_OUT_ROOT = "quantsel-out"
MANIFEST_FILE = "manifest.json"
MODEL_FILE = "model.sqnt"
SAMPLES_FILE = "samples.jsonl"
TASK_FILE = "task.json"
CALIB_FILE = "calib.jsonl"


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV) or DEFAULT_OUT_ROOT)


def _out_path(args, default_name: str) -> Path:
    return Path(args.out) if args.out else out_root() / default_name


def _claim(path: Path, force: bool) -> Path:
    """Refuse to overwrite ``path`` unless forced; create its parent directory."""
    if path.exists() and not force:
        raise ValidationError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _write_text(path: Path, text: str) -> None:
    # binary mode keeps "\n" on every platform
    path.write_bytes(text.encode("utf-8"))


# --- task files ---------------------------------------------------------------------


def read_samples(task_dir) -> list[Sample]:
    path = Path(task_dir) / SAMPLES_FILE
    if not path.exists():
        raise ValidationError(f"{path} not found; run gen-task first")
    with open(path, encoding="utf-8") as fh:
        return [Sample.from_dict(json.loads(line)) for line in fh if line.strip()]


def cmd_gen_task(args) -> int:
    cfg = TaskConfig(seed=args.seed, n_samples=args.n_samples, noise_rate=args.noise_rate,
                     vocab_size=args.vocab_size, source=args.source)
    out = _out_path(args, "task")
    if (out / SAMPLES_FILE).exists() and not args.force:
        raise ValidationError(f"{out / SAMPLES_FILE} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    samples = generate(cfg)
    _write_text(out / TASK_FILE, cfg.to_json() + "\n")
    _write_text(out / SAMPLES_FILE, "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in samples))
    rows = calibration_batch(samples, args.calib_size)
    CalibBatch.from_records(rows).dump(out / CALIB_FILE)
    counts = {sp: sum(s.split == sp for s in samples) for sp in ("train", "dev", "test")}
    _emit({"task": str(out), "samples": len(samples), **counts})
    return 0


def cmd_train_model(args) -> int:
    cfg = ModelConfig(d_model=args.d_model, n_layers=args.n_layers, n_heads=args.n_heads,
                      vocab_size=args.vocab_size, max_seq=args.max_seq, seed=args.seed)
    out = _claim(_out_path(args, MODEL_FILE), args.force)
    model = init_model(cfg)
    corpus = pretraining_corpus(args.seed, args.steps * args.batch_size)
    history = train_model(model, corpus, args.steps, args.batch_size, args.lr, args.seed)
    size = save_model(out, model)
    _emit({"model": str(out), "bytes": size, "final_loss": history[-1] if history else None})
    return 0


# --- quantization -------------------------------------------------------------------


def cmd_quantize(args) -> int:
    parsed = parse_label(args.label)
    model_path = Path(args.model)
    if not model_path.is_file():
        raise ValidationError(f"model checkpoint {model_path} not found")
    data_aware = parsed is not None and parsed[1] is Method.MBQ
    if data_aware and not args.calib:
        raise ValidationError("MBQ needs calibration data: pass --calib <task dir>/calib.jsonl")
    out = _out_path(args, args.label)
    for name in (MANIFEST_FILE, MODEL_FILE):
        _claim(out / name, args.force)
    # data-free methods ignore --calib, so it stays out of their manifest
    calib = CalibBatch.load(args.calib) if data_aware else None
    spec = {"group_size": args.group_size, "lp_norm": args.lp_norm, "hqq_iters": args.hqq_iters}
    model = load_model(model_path)
    qweights, info = quantize_for_label(model, args.label, calib, group_size=args.group_size,
                                        lp_norm=args.lp_norm, hqq_iters=args.hqq_iters)
    extra = {}
    if qweights is not None:
        extra["storage"] = storage_report(model, qweights)
    if "modality_weights" in info:
        extra["modality_weights"] = info["modality_weights"]
        extra["exponents"] = info["exponents"]
    manifest = RunManifest(
        model_checkpoint=str(model_path),
        model_sha256=sha256_file(model_path),
        quant_label=args.label,
        spec=spec if parsed is not None else {},
        calibration=str(args.calib) if calib is not None else None,
        calibration_sha256=sha256_file(args.calib) if calib is not None else None,
        seed=args.seed,
        output_dir=str(out),
        extra=extra,
    )
    manifest.write(out / MANIFEST_FILE)
    if qweights is None:
        shutil.copyfile(model_path, out / MODEL_FILE)
    else:
        save_model(out / MODEL_FILE, model, qweights)
    report = {"label": args.label, "manifest": manifest.digest(), "checkpoint": str(out / MODEL_FILE),
              "checkpoint_bytes": (out / MODEL_FILE).stat().st_size}
    report.update(extra.get("storage", {}))
    _emit(report)
    return 0


def _resolve_model(path) -> tuple[Path, RunManifest]:
    """Checkpoint path and manifest for a quantize output dir or a bare checkpoint."""
    p = Path(path)
    ckpt = p / MODEL_FILE if p.is_dir() else p
    if not ckpt.is_file():
        raise ValidationError(f"model checkpoint {ckpt} not found")
    mpath = ckpt.parent / MANIFEST_FILE
    if mpath.exists():
        return ckpt, RunManifest.read(mpath)
    # a bare full-precision checkpoint is its own provenance
    return ckpt, RunManifest(str(ckpt), sha256_file(ckpt), FP_LABEL, {}, None, None, 0, str(ckpt.parent))


# --- evaluation and selectors -------------------------------------------------------


def cmd_eval(args) -> int:
    ckpt, manifest = _resolve_model(args.model)
    samples = read_samples(args.task)
    if args.split != "all":
        samples = [s for s in samples if s.split == args.split]
    if not samples:
        raise ValidationError(f"no samples in split {args.split!r}")
    out = _claim(_out_path(args, "records.jsonl"), args.force)
    model = load_model(ckpt)
    records, _ = evaluate(model, samples, manifest.digest())
    recio.write(out, records)
    _emit({"records": str(out), "n": len(records), "label": manifest.quant_label,
           "manifest": manifest.digest()})
    return 0


def _single_manifest(records, what: str, allow_mixed: bool) -> str | None:
    hashes = recio.manifest_hashes(records)
    if len(hashes) > 1 and not allow_mixed:
        raise ValidationError(f"{what} mixes runs {sorted(hashes)}; pass --allow-mixed to accept")
    return next(iter(hashes)) if len(hashes) == 1 else None


def _check_same(a: str | None, b: str | None, what: str, allow_mixed: bool) -> None:
    if a != b and not allow_mixed:
        raise ValidationError(f"{what}: manifest {a} != {b}; pass --allow-mixed to accept")


def cmd_train_selector(args) -> int:
    records = recio.read(args.records)
    manifest = _single_manifest(records, "training records", args.allow_mixed)
    fit, _ = fit_split(records, args.fraction)
    cfg = SelectorTrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                              seed=args.seed, hidden=args.hidden, weight_decay=args.weight_decay)
    out = _claim(_out_path(args, "selector.json"), args.force)
    selector = selector_train(fit, cfg)
    selector.save(out, extra={
        "manifest": manifest,
        "fraction": args.fraction,
        "fit_ids": [r.id for r in fit],
        "train_config": dict(cfg.__dict__),
    })
    _emit({"selector": str(out), "n_fit": len(fit), "manifest": manifest})
    return 0


def _selector_meta(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read selector {path}: {exc}") from None


def cmd_rescore(args) -> int:
    records = recio.read(args.records)
    manifest = _single_manifest(records, "records", args.allow_mixed)
    meta = _selector_meta(args.selector)
    _check_same(meta.get("manifest"), manifest, "selector vs records", args.allow_mixed)
    selector = SelectorModel.from_json(json.dumps(meta))
    if args.heldout_only:
        fit = set(meta.get("fit_ids", []))
        records = [r for r in records if r.id not in fit]
        if not records:
            raise ValidationError("every record was used to fit the selector")
    out = _claim(_out_path(args, "rescored.jsonl"), args.force)
    rescored = rescore(records, selector)
    recio.write(out, rescored)
    _emit({"records": str(out), "n": len(rescored), "manifest": manifest})
    return 0


# --- reports --------------------------------------------------------------------------


def _drop_fit_ids(records, selector_path):
    if not selector_path:
        return records
    fit = set(_selector_meta(selector_path).get("fit_ids", []))
    kept = [r for r in records if r.id not in fit]
    if not kept:
        raise ValidationError("no dev records left after dropping selector training ids")
    return kept


def cmd_report(args) -> int:
    records = recio.read(args.records)
    dev = _drop_fit_ids(recio.read(args.dev), args.exclude_fit_of)
    m_test = _single_manifest(records, "records", args.allow_mixed)
    m_dev = _single_manifest(dev, "dev records", args.allow_mixed)
    _check_same(m_test, m_dev, "records vs dev records", args.allow_mixed)
    out = _claim(_out_path(args, "report.json"), args.force)
    curve_path = _claim(Path(args.curve) if args.curve else out.with_suffix(".curve.csv"), args.force)
    rep = reliability_report(records, dev, args.label, args.bins)
    doc = {"metrics": rep.metrics(), "manifest": m_test, "ece_bins": args.bins, "tool_version": __version__}
    _write_text(out, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _write_text(curve_path, f"# manifest {m_test}\n" + rep.curve.to_csv())
    _emit({"report": str(out), "curve": str(curve_path), **rep.metrics()})
    return 0


def _parse_fractions(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        try:
            vals = [float(v) for v in str(text).split(",") if v.strip()]
        except ValueError:
            raise ValidationError(f"bad fraction list {text!r}") from None
    if not vals:
        raise ValidationError("empty fraction grid")
    return vals


def cmd_mix(args) -> int:
    ids, oods = recio.read(args.id), recio.read(args.ood)
    m_id = _single_manifest(ids, "ID records", args.allow_mixed)
    m_ood = _single_manifest(oods, "OOD records", args.allow_mixed)
    _check_same(m_id, m_ood, "ID vs OOD records", args.allow_mixed)
    if (args.gamma is None) == (args.dev is None):
        raise ValidationError("give exactly one of --gamma or --dev")
    if args.gamma is not None:
        gamma = args.gamma
    else:
        dev = _drop_fit_ids(recio.read(args.dev), args.exclude_fit_of)
        _check_same(_single_manifest(dev, "dev records", args.allow_mixed), m_id, "dev vs ID records",
                    args.allow_mixed)
        gamma = select_threshold(dev, args.cost)
    out = _claim(_out_path(args, "mixture.csv"), args.force)
    rows = eval_mixture(ids, oods, _parse_fractions(args.fractions), gamma, args.cost, args.seed)
    _write_text(out, f"# manifest {m_id} gamma {gamma!r} c {args.cost!r}\n" + mixture_csv(rows))
    _emit({"mixture": str(out), "gamma": gamma, "rows": len(rows)})
    return 0


# --- parser ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="TOML file with parameter defaults (flags win)")
    p.add_argument("--out", help=out_help)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantsel", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"quantsel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-task", help="generate a synthetic task with splits and calibration data")
    _common(p, "output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=2000)
    p.add_argument("--noise-rate", type=float, default=0.2)
    p.add_argument("--vocab-size", type=int, default=40)
    p.add_argument("--source", choices=("ID", "OOD_A", "OOD_B"), default="ID")
    p.add_argument("--calib-size", type=int, default=DEFAULT_CALIB_SIZE)
    p.set_defaults(func=cmd_gen_task)

    p = sub.add_parser("train-model", help="train the full-precision toy decoder")
    _common(p, "checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=40)
    p.add_argument("--max-seq", type=int, default=16)
    p.set_defaults(func=cmd_train_model)

    p = sub.add_parser("quantize", help="quantize a checkpoint under a label such as int4_MBQ")
    _common(p, "output directory (manifest.json + model.sqnt)")
    p.add_argument("--model", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--calib")
    p.add_argument("--group-size", type=int, default=64)
    p.add_argument("--lp-norm", type=float, default=0.7)
    p.add_argument("--hqq-iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="greedy-decode a split into prediction records")
    _common(p, "records file")
    p.add_argument("--model", required=True, help="quantize output dir or checkpoint")
    p.add_argument("--task", required=True, help="gen-task output dir")
    p.add_argument("--split", choices=("train", "dev", "test", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-selector", help="fit a Selector on a fraction of dev records")
    _common(p, "selector JSON path")
    p.add_argument("--records", required=True)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-mixed", action="store_true")
    p.set_defaults(func=cmd_train_selector)

    p = sub.add_parser("rescore", help="replace confidences with Selector predictions")
    _common(p, "records file")
    p.add_argument("--records", required=True)
    p.add_argument("--selector", required=True)
    p.add_argument("--heldout-only", action="store_true", help="drop records the selector was fit on")
    p.add_argument("--allow-mixed", action="store_true")
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("report", help="reliability report JSON and risk-coverage CSV")
    _common(p, "report JSON path")
    p.add_argument("--records", required=True)
    p.add_argument("--dev", required=True, help="records used to pick Phi thresholds")
    p.add_argument("--exclude-fit-of", metavar="SELECTOR", help="drop this selector's fit ids from --dev")
    p.add_argument("--label", default="")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--curve", help="curve CSV path (default: next to the report)")
    p.add_argument("--allow-mixed", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("mix", help="ID/OOD mixture sweep at a fixed threshold")
    _common(p, "mixture CSV path")
    p.add_argument("--id", required=True)
    p.add_argument("--ood", required=True)
    p.add_argument("--fractions", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")
    p.add_argument("--gamma", type=float)
    p.add_argument("--dev", help="pick gamma on these records at cost --cost")
    p.add_argument("--exclude-fit-of", metavar="SELECTOR")
    p.add_argument("--cost", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-mixed", action="store_true")
    p.set_defaults(func=cmd_mix)
    return parser


def _config_defaults(path, command: str, sub: argparse.ArgumentParser) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    known = {a.dest for a in sub._actions}
    norm = lambda k: k.replace("-", "_")  # noqa: E731
    out = {norm(k): v for k, v in doc.items() if not isinstance(v, dict) and norm(k) in known}
    section = doc.get(command, {})
    if not isinstance(section, dict):
        raise ValidationError(f"{path}: [{command}] must be a table")
    for k, v in section.items():
        if norm(k) not in known:
            raise ValidationError(f"{path}: unknown key {k!r} for {command}")
        out[norm(k)] = v
    out.pop("config", None)
    out.pop("func", None)
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subs = parser._subparsers._group_actions[0].choices
    if known.config and known.command in subs:
        sub = subs[known.command]
        sub.set_defaults(**_config_defaults(known.config, known.command, sub))
        # required flags may come from the config instead
        for action in sub._actions:
            if action.required and action.dest in sub._defaults:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ValidationError as exc:
        print(f"quantsel: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"quantsel: error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"quantsel: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
