"""``rri-seqnet`` command line: synth, prepare, train, eval, predict, complexity.

Every command writes its resolved configuration next to its outputs and logs
line-delimited JSON to stderr. Failures print one JSON object
``{"error": ..., "message": ...}`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as runcfg
from .complexity import count_flops, reference_comparison
from .data import (LABELS, DataError, RriRecord, Segment, SplitPlan, load_rri_csv, make_splits, pre_af_crop,
                   read_segment_cache, window_segments, write_rri_csv, write_segment_cache)
from .metrics import aggregate_splits, evaluate_scores
from .model import CheckpointError, build_model, load_checkpoint
from .synth import SynthConfig, synth_generate
from .training import train

log = logging.getLogger("rri_seqnet")


class CliError(RuntimeError):
    pass


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {"ts": round(record.created, 3), "level": record.levelname.lower(), "logger": record.name,
                 "msg": record.getMessage()}
        entry.update(getattr(record, "fields", {}))
        return json.dumps(entry, sort_keys=True)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("rri_seqnet")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if verbose else logging.WARNING)
    root.propagate = False


def _info(msg: str, **fields) -> None:
    log.info(msg, extra={"fields": fields})


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _resolve(args) -> runcfg.RunConfig:
    overrides: Dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "preset", None):
        overrides.setdefault("preset", args.preset)
    if getattr(args, "precision", None):
        overrides["model.dtype"] = {"f32": "float32", "f64": "float64"}[args.precision]
    if getattr(args, "seeds", None):
        overrides["seeds"] = ",".join(str(s) for s in runcfg.seeds_list(args.seeds))
    if getattr(args, "seed", None) is not None and "seeds" not in overrides:
        overrides["seeds"] = str(args.seed)
    kv = runcfg.parse_kv_file(args.config) if args.config else {}
    # preset must be known before field overrides are applied
    if "preset" in overrides:
        kv = {"preset": overrides.pop("preset"), **kv}
    kv.update(overrides)
    return runcfg.resolve(kv)


# -- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.nsr < 0 or args.af < 0:
        raise CliError("--nsr and --af must be non-negative")
    seed = 0 if args.seed is None else args.seed
    out = _prepare_out(Path(args.out), args.force)
    for old in out.glob("*.csv"):
        old.unlink()
    scfg = SynthConfig()
    subjects = []
    for kind, n in (("NSR", args.nsr), ("preAF", args.af)):
        for rec in synth_generate(n, kind, seed, scfg):
            name = f"{rec.subject_id}.csv"
            write_rri_csv(rec, out / name)
            subjects.append({"file": name, "subject_id": rec.subject_id, "label": rec.label,
                             "dataset": "AF" if kind == "preAF" else "NSR", "af_onset_s": rec.af_onset,
                             "n_ectopic": int(len(rec.meta.get("ectopic_times", ())))})
    _write_json(out / "manifest.json", {"seed": seed, "generator": scfg.to_dict(), "subjects": subjects})
    _info("synth done", n_files=len(subjects), out=str(out))
    return 0


def _dataset_of(rec: RriRecord) -> str:
    return "AF" if rec.label == "AF" else "NSR"


def cmd_prepare(args) -> int:
    rc = _resolve(args)
    src = Path(args.data)
    if not src.is_dir():
        raise CliError(f"data directory {src} does not exist")
    out = _prepare_out(Path(args.out), args.force)
    files = sorted(src.glob("*.csv"))
    if not files:
        raise CliError(f"no CSV files in {src}")
    segments: List[Segment] = []
    subjects: Dict[str, List[str]] = {"AF": [], "NSR": []}
    exclusions = []
    for path in files:
        try:
            rec = load_rri_csv(path)
            if rec.label == "AF":
                if rec.af_onset is None:
                    raise DataError(f"{path}: AF record without af_onset_s")
                cropped = pre_af_crop(rec)
                if cropped is None:
                    exclusions.append({"file": path.name, "reason": "less than 2 h of pre-onset history"})
                    continue
                rec = cropped
            segs = window_segments(rec)
        except DataError as e:
            exclusions.append({"file": path.name, "reason": str(e)})
            continue
        if not segs:
            exclusions.append({"file": path.name, "reason": "no complete 30 min window"})
            continue
        if rec.subject_id in subjects["AF"] + subjects["NSR"]:
            exclusions.append({"file": path.name, "reason": f"duplicate subject id {rec.subject_id}"})
            continue
        subjects[_dataset_of(rec)].append(rec.subject_id)
        segments.extend(segs)
    if not segments:
        raise CliError("no usable segments")
    write_segment_cache(out / "segments", segments)
    split_dir = out / "splits"
    split_dir.mkdir(exist_ok=True)
    plans = make_splits({k: v for k, v in subjects.items() if v}, rc.seeds)
    for plan in plans:
        asg = plan.assignment()
        counts = {sp: {lab: sum(1 for s in segments if asg[s.subject_id] == sp and s.label == lab) for lab in LABELS}
                  for sp in ("train", "val", "test")}
        _write_json(split_dir / f"seed{plan.seed}.json", {**plan.to_dict(), "segment_counts": counts})
    _write_json(out / "exclusions.json", exclusions)
    (out / "resolved_config.txt").write_text(rc.to_kv())
    summary = {lab: sum(1 for s in segments if s.label == lab) for lab in LABELS}
    _info("prepare done", segments=summary, excluded=len(exclusions), seeds=list(rc.seeds))
    return 0


def _load_split(prep: Path, seed: int):
    path = prep / "splits" / f"seed{seed}.json"
    if not path.exists():
        raise CliError(f"no split file for seed {seed} in {prep / 'splits'}")
    plan = SplitPlan.from_dict(json.loads(path.read_text()))
    return plan.assignment()


def _split_arrays(values: np.ndarray, index: Sequence[dict], asg: Dict[str, str], split: str):
    rows = [i for i, e in enumerate(index) if asg.get(e["subject_id"]) == split]
    X = values[rows]
    y = np.array([LABELS.index(index[i]["label"]) for i in rows], dtype=np.int64)
    ids = [index[i]["subject_id"] for i in rows]
    return X, y, ids


def cmd_train(args) -> int:
    rc = _resolve(args)
    prep = Path(args.prep)
    values, index = read_segment_cache(prep / "segments")
    if values.shape[1] != rc.model.input_len:
        raise CliError(f"segment length {values.shape[1]} does not match model.input_len {rc.model.input_len}")
    out = _prepare_out(Path(args.out), args.force)
    (out / "resolved_config.txt").write_text(rc.to_kv())
    for seed in rc.seeds:
        asg = _load_split(prep, seed)
        Xtr, ytr, _ = _split_arrays(values, index, asg, "train")
        Xva, yva, _ = _split_arrays(values, index, asg, "val")
        run = out / f"seed{seed}"
        run.mkdir(exist_ok=True)
        log_path = run / "train_log.jsonl"
        log_path.unlink(missing_ok=True)
        model = build_model(rc.model, seed=seed)
        optim = dataclasses.replace(rc.optim, seed=seed)
        t0 = time.time()
        ckpt, hist = train(model, (Xtr, ytr), (Xva, yva), optim, log_path=log_path)
        ckpt.metadata.update({"split_seed": seed, "stop_reason": hist.stop_reason, "n_train": int(len(Xtr)),
                              "n_val": int(len(Xva))})
        ckpt.save(run / "model.ckpt")
        _write_json(run / "history.json", hist.to_dict())
        _info("train done", seed=seed, best_epoch=hist.best_epoch, epochs=len(hist.val_loss),
              stop_reason=hist.stop_reason, seconds=round(time.time() - t0, 1))
    return 0


def _load_model(path: Path, rc: Optional[runcfg.RunConfig] = None):
    try:
        model, meta = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint {path} not found") from None
    except CheckpointError as e:
        raise CliError(str(e)) from None
    if rc is not None:
        want = dataclasses.replace(rc.model, seed=model.config.seed).to_dict()
        have = model.config.to_dict()
        diff = sorted(k for k in want if want[k] != have.get(k))
        if diff:
            raise CliError(f"checkpoint {path} does not match the configured model (differs in {diff})")
    return model, meta


def cmd_eval(args) -> int:
    # only check the checkpoint against a model configuration when one is given
    rc = _resolve(args) if args.config or args.set or args.preset or args.precision else None
    seeds = runcfg.seeds_list(args.seeds) if args.seeds else (
        rc.seeds if rc else runcfg.DEFAULT_SEEDS)
    prep, runs = Path(args.prep), Path(args.runs)
    values, index = read_segment_cache(prep / "segments")
    out = _prepare_out(Path(args.out), args.force)
    reports = []
    for seed in seeds:
        model, _ = _load_model(runs / f"seed{seed}" / "model.ckpt", rc)
        if values.shape[1] != model.config.input_len:
            raise CliError(f"segment length {values.shape[1]} does not match checkpoint input_len "
                           f"{model.config.input_len}")
        asg = _load_split(prep, seed)
        X, y, ids = _split_arrays(values, index, asg, args.split)
        probs = np.concatenate([model.predict_proba(X[i:i + 64]) for i in range(0, len(X), 64)])
        rep = evaluate_scores(probs, y, args.threshold, ids, args.mode)
        (out / f"metrics_seed{seed}.json").write_text(rep.to_json() + "\n")
        reports.append(rep)
        _info("eval", seed=seed, **{k: getattr(rep, k) for k in ("sens", "spec", "auroc")})
    summary = aggregate_splits(reports)
    summary.update({"seeds": list(seeds), "split": args.split, "threshold": args.threshold, "mode": args.mode})
    _write_json(out / "summary.json", summary)
    (out / "resolved_config.txt").write_text(
        f"prep={prep}\nruns={runs}\nseeds={','.join(map(str, seeds))}\nsplit={args.split}\n"
        f"threshold={args.threshold}\nmode={args.mode}\n")
    print(json.dumps(summary["mean"], sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    model, _ = _load_model(Path(args.checkpoint))
    try:
        rec = load_rri_csv(args.csv)
        if rec.label == "AF" and rec.af_onset is not None:
            cropped = pre_af_crop(rec)
            rec = cropped if cropped is not None else rec
        segs = window_segments(rec, model.config.input_len)
    except DataError as e:
        raise CliError(str(e)) from None
    if not segs:
        raise CliError(f"{args.csv}: shorter than one {model.config.input_len} s window")
    probs = model.predict_proba(np.stack([s.values for s in segs]))
    result = {"subject_id": rec.subject_id, "windows": [float(p) for p in probs], "af_probability": float(probs.mean()),
              "threshold": args.threshold, "prediction": LABELS[int(probs.mean() >= args.threshold)]}
    text = json.dumps(result, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_complexity(args) -> int:
    rc = _resolve(args)
    rep = count_flops(rc.model)
    if args.json:
        d = rep.to_dict()
        d["reference"] = reference_comparison(rep).splitlines()
        text = json.dumps(d, indent=1)
    else:
        text = rep.to_table() + "\n\n" + reference_comparison(rep)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / ("complexity.json" if args.json else "complexity.txt")).write_text(text + "\n")
        (out / "resolved_config.txt").write_text(rc.to_kv())
    print(text)
    return 0


# -- parser -------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, seeds: bool = True) -> None:
    p.add_argument("--config", help="flat key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--preset", choices=("full", "reduced"), help="model width preset")
    p.add_argument("--precision", choices=("f32", "f64"), help="floating point precision")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    if seeds:
        p.add_argument("--seed", type=int)
        p.add_argument("--seeds", help="comma separated split seeds")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rri-seqnet", description="TCN-Mamba AF prediction from RR intervals")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RR-interval corpus")
    _common(p)
    p.add_argument("--nsr", type=int, default=54)
    p.add_argument("--af", type=int, default=151)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="crop, resample, window and split a corpus")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model per split seed")
    _common(p)
    p.add_argument("--prep", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score trained models on a split")
    _common(p)
    p.add_argument("--prep", required=True)
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--mode", choices=("segment", "subject"), default="segment")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="AF probability for one RR-interval CSV")
    _common(p, seeds=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("complexity", help="parameter and FLOP report")
    _common(p, seeds=False)
    p.add_argument("--json", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_complexity)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (CliError, DataError, CheckpointError, ValueError, OSError) as e:
        err = {"error": type(e).__name__, "message": str(e), "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
