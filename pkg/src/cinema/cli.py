"""Command-line entry point.

Every command writes ``run_manifest.json`` into its output directory before
doing any work and marks it complete at the end. Results go to
``result.json`` (sorted keys, no timestamps) so identical inputs give
byte-identical files. Exit codes: 64 usage, 65 bad config/input, 70 runtime.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

EX_USAGE, EX_DATAERR, EX_SOFTWARE = 64, 65, 70
CONFIG_VERSION = 1
MANIFEST = "run_manifest.json"
RESULT = "result.json"

log = logging.getLogger("cinema")


class UsageError(Exception):
    pass


class InputError(Exception):
    """Bad configuration or input data (exit 65)."""


# ---------------------------------------------------------------------------
# plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {"t": round(record.created, 3), "level": record.levelname.lower(), "event": record.getMessage()}
        entry.update(getattr(record, "fields", {}))
        return json.dumps(_jsonable(entry), sort_keys=True)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else ("nan" if math.isnan(x) else ("inf" if x > 0 else "-inf"))
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def load_config(path, allowed: set[str], required: set[str] = frozenset()) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"config file {path} not found")
    except json.JSONDecodeError as e:
        raise InputError(f"config {path} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise InputError("config must be a JSON object")
    if cfg.get("version") != CONFIG_VERSION:
        raise InputError(f"config version must be {CONFIG_VERSION}, got {cfg.get('version')!r}")
    unknown = sorted(set(cfg) - allowed - {"version"})
    if unknown:
        raise InputError(f"unknown config keys: {unknown}")
    missing = sorted(required - set(cfg))
    if missing:
        raise InputError(f"missing config keys: {missing}")
    return cfg


class Run:
    """Output directory bookkeeping: manifest first, JSON-lines log, results last."""

    def __init__(self, command: str, out: Path, config: dict | None, inputs: list[str], seeds=()):
        self.out = Path(out)
        for p in inputs:
            if Path(p).resolve() == self.out.resolve():
                raise InputError("the output directory must differ from every input")
        if (self.out / MANIFEST).exists():
            prior = json.loads((self.out / MANIFEST).read_text())
            if prior.get("status") == "complete":
                raise InputError(f"{self.out} already holds a completed run")
        self.out.mkdir(parents=True, exist_ok=True)
        blob = json.dumps({"command": command, "config": config, "seeds": list(seeds)}, sort_keys=True)
        self.manifest = {
            "run_id": hashlib.sha256(blob.encode()).hexdigest()[:16],
            "command": command,
            "config": config,
            "code_version": __version__,
            "seeds": list(seeds),
            "inputs": [str(p) for p in inputs],
            "output": str(self.out),
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "status": "running",
        }
        self._t0 = time.monotonic()
        dump_json(self.manifest, self.out / MANIFEST)
        self.handler = logging.FileHandler(self.out / "log.jsonl", mode="w")
        self.handler.setFormatter(_JsonFormatter())
        log.addHandler(self.handler)
        log.setLevel(logging.INFO)

    def event(self, name: str, **fields) -> None:
        log.info(name, extra={"fields": fields})

    def finish(self, result: dict | None, status: str = "complete", error: str | None = None) -> None:
        if result is not None:
            dump_json(result, self.out / RESULT)
        self.manifest.update(
            status=status,
            finished_at=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            wall_clock_s=round(time.monotonic() - self._t0, 3),
        )
        if error:
            self.manifest["error"] = error
        dump_json(self.manifest, self.out / MANIFEST)
        log.removeHandler(self.handler)
        self.handler.close()


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise InputError(f"{data_dir} has no manifest.json")
    return json.loads(path.read_text())


def _load_studies(data_dir, subjects=None):
    from .dataio import read_study

    man = _read_manifest(data_dir)
    entries = man["studies"]
    if subjects is not None:
        by_id = {e["id"]: e for e in entries}
        missing = [s for s in subjects if s not in by_id]
        if missing:
            raise InputError(f"unknown subjects {missing}")
        entries = [by_id[s] for s in subjects]
    return entries, [read_study(Path(data_dir) / e["file"]) for e in entries]


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}")


# ---------------------------------------------------------------------------
# phantom / data


def cmd_phantom_generate(args) -> int:
    from . import phantom
    from .dataio import write_study

    cfg = load_config(args.config, {"n_subjects", "seed", "preset", "overrides", "vary"}, {"n_subjects"})
    preset = cfg.get("preset", "desk")
    if preset not in ("desk", "default"):
        raise InputError(f"unknown phantom preset {preset!r}")
    try:
        template = phantom.desk_params() if preset == "desk" else phantom.PhantomParams()
        template = phantom.PhantomParams.from_dict({**template.to_dict(), **cfg.get("overrides", {})})
    except (TypeError, ValueError) as e:
        raise InputError(str(e))
    n, seed = int(cfg["n_subjects"]), int(cfg.get("seed", 0))
    if n < 1:
        raise InputError("n_subjects must be positive")
    run = Run("phantom generate", args.out, cfg, [args.config], [seed])
    if cfg.get("vary", True):
        params = phantom.sample_cohort(n, seed, template)
    else:
        params = [phantom.PhantomParams.from_dict({**template.to_dict(), "seed": seed + i}) for i in range(n)]
    cache = os.environ.get("CINEMA_CACHE")
    entries = []
    for i, p in enumerate(params):
        sid = f"sub-{i:04d}"
        dest = Path(args.out) / f"{sid}.cmrc"
        key = hashlib.sha256(json.dumps(p.to_dict(), sort_keys=True).encode()).hexdigest()[:20]
        cached = Path(cache) / f"phantom-{key}.cmrc" if cache else None
        if cached is not None and cached.exists():
            shutil.copyfile(cached, dest)
            run.event("phantom_cached", subject=sid, key=key)
        else:
            write_study(phantom.generate_study(p), dest)
            if cached is not None:
                cached.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(dest, cached)
        entries.append(
            {
                "id": sid,
                "file": dest.name,
                "params": p.to_dict(),
                "gt_scalars": phantom.analytic_ground_truth(p),
                "labels": phantom.cohort_labels(p),
            }
        )
        run.event("phantom_written", subject=sid)
    listing = {"version": CONFIG_VERSION, "kind": "phantom_cohort", "studies": entries}
    dump_json(listing, Path(args.out) / "manifest.json")
    run.finish({"n_subjects": n, "files": {e["id"]: _sha256(Path(args.out) / e["file"]) for e in entries}})
    return 0


def _grid(d, name):
    from .dataio import GridSpec

    try:
        return GridSpec(tuple(float(s) for s in d["spacing"]), tuple(int(s) for s in d["size"]))
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"bad {name} grid: {e}")


def cmd_data_preprocess(args) -> int:
    from .dataio import preprocess_study, read_study, write_study

    cfg = load_config(args.grid, {"sax", "lax", "normalize"}, {"sax", "lax"})
    sax, lax = _grid(cfg["sax"], "sax"), _grid(cfg["lax"], "lax")
    src = _read_manifest(args.inp)
    run = Run("data preprocess", args.out, cfg, [args.inp, args.grid])
    entries, files = [], {}
    for e in src["studies"]:
        study = read_study(Path(args.inp) / e["file"])
        out = preprocess_study(study, sax, lax, normalize=cfg.get("normalize", True))
        write_study(out, Path(args.out) / e["file"])
        entries.append({**e, "grid": {"sax": cfg["sax"], "lax": cfg["lax"]}})
        files[e["id"]] = _sha256(Path(args.out) / e["file"])
        run.event("study_preprocessed", subject=e["id"])
    dump_json({**src, "studies": entries}, Path(args.out) / "manifest.json")
    run.finish({"n_subjects": len(entries), "files": files})
    return 0


# ---------------------------------------------------------------------------
# training


def _model_config(spec):
    from .backbone import ModelConfig, base_config, desk_config

    if spec in (None, "desk"):
        return desk_config()
    if spec == "base":
        return base_config()
    if isinstance(spec, dict):
        try:
            return ModelConfig.from_dict(spec)
        except (TypeError, ValueError, KeyError) as e:
            raise InputError(f"bad model config: {e}")
    raise InputError(f"unknown model preset {spec!r}")


def _train_config(task: str, overrides: dict, seed: int | None = None):
    from .training import ConfigError, recipe

    if "task" in overrides:
        raise InputError("the task is set by the command, not the train section")
    try:
        cfg = recipe(task, **overrides)
        return cfg if seed is None else recipe(task, **{**overrides, "seed": seed})
    except (ConfigError, TypeError) as e:
        raise InputError(str(e))


def _determinism():
    import torch

    torch.use_deterministic_algorithms(True, warn_only=True)


def cmd_train_pretrain(args) -> int:
    from .training import load_checkpoint, pretrain, reconstruction_loss, save_checkpoint

    cfg = load_config(args.config, {"model", "train", "subjects"})
    model_cfg = _model_config(cfg.get("model"))
    tcfg = _train_config("pretrain", cfg.get("train", {}))
    run = Run("train pretrain", args.out, cfg, [args.config, args.data], [tcfg.seed])
    _determinism()
    _, studies = _load_studies(args.data, cfg.get("subjects"))
    resume = load_checkpoint(args.resume) if args.resume else None
    res = pretrain(model_cfg, tcfg, studies, resume=resume, log=lambda r: run.event("train_step", **r))
    ckpt = Path(args.out) / "checkpoint.cmrc"
    save_checkpoint(res.checkpoint, ckpt)
    losses = [h["loss"] for h in res.history]
    run.finish(
        {
            "task": "pretrain",
            "steps": res.checkpoint.step,
            "first_loss": losses[0] if losses else None,
            "final_loss": losses[-1] if losses else None,
            "reconstruction_loss": reconstruction_loss(res.model, studies),
            "checkpoint": ckpt.name,
            "checkpoint_sha256": _sha256(ckpt),
        }
    )
    return 0


_FINETUNE_KEYS = {
    "task", "arm", "views", "model", "train", "phases", "target", "train_subjects", "val_subjects",
    "unet_widths", "head_channels", "n_out",
}


def _examples(task: str, cfg: dict, studies, ids):
    from . import training

    views = cfg.get("views") or (["sax"] if task in ("segmentation", "regression", "classification") else ["lax_4c"])
    phases = cfg.get("phases", "edes")
    if task == "segmentation":
        return training.segmentation_examples(studies, views[0], phases, ids)
    if task in ("landmark_heatmap", "landmark_coord"):
        return training.landmark_examples(studies, views[0], phases, ids)
    target = cfg.get("target", "ef" if task == "regression" else "disease")
    ys = []
    for s in studies:
        gt = s.gt_scalars or {}
        if target == "disease":
            ys.append(float(gt["ef"] < 45.0))
        elif target in gt:
            ys.append(float(gt[target]))
        else:
            raise InputError(f"studies carry no scalar {target!r}")
    return training.scalar_examples(studies, ys, views, "edes", ids)


def _split(cfg, entries):
    ids = [e["id"] for e in entries]
    train_ids, val_ids = cfg.get("train_subjects"), cfg.get("val_subjects")
    if train_ids is None and val_ids is None:
        n_val = max(1, len(ids) // 5)
        train_ids, val_ids = ids[:-n_val], ids[-n_val:]
    elif train_ids is None:
        train_ids = [i for i in ids if i not in set(val_ids)]
    elif val_ids is None:
        val_ids = [i for i in ids if i not in set(train_ids)]
    if set(train_ids) & set(val_ids):
        raise InputError("train and validation subjects overlap")
    if not val_ids:
        raise InputError("empty validation split")
    return list(train_ids), list(val_ids)


def cmd_train_finetune(args) -> int:
    from .training import TASK_METRIC, finetune, load_checkpoint, save_checkpoint

    cfg = load_config(args.config, _FINETUNE_KEYS, {"task"})
    task, arm = cfg["task"], cfg.get("arm", "finetune")
    if task not in TASK_METRIC:
        raise InputError(f"unknown fine-tuning task {task!r}")
    if arm not in ("finetune", "randinit", "unet"):
        raise InputError(f"unknown arm {arm!r}")
    if arm == "finetune" and not args.pretrained:
        raise InputError("the finetune arm needs --pretrained")
    seeds = _seeds(args.seeds)
    inputs = [args.config, args.data] + ([args.pretrained] if args.pretrained else [])
    base_cfg = _train_config(task, cfg.get("train", {}))
    run = Run("train finetune", args.out, cfg, inputs, seeds)
    _determinism()
    entries, studies = _load_studies(args.data)
    train_ids, val_ids = _split(cfg, entries)
    by_id = dict(zip([e["id"] for e in entries], studies))
    train = _examples(task, cfg, [by_id[i] for i in train_ids], train_ids)
    val = _examples(task, cfg, [by_id[i] for i in val_ids], val_ids)
    pretrained = load_checkpoint(args.pretrained) if args.pretrained else None
    model_cfg = _model_config(cfg.get("model")) if arm == "randinit" else None
    extra = {k: tuple(cfg[k]) for k in ("unet_widths", "head_channels") if k in cfg}
    results = {}
    for seed in seeds:
        tcfg = _train_config(task, cfg.get("train", {}), seed)
        res = finetune(
            task, train, val, tcfg, arm=arm, pretrained=pretrained, model_config=model_cfg, n_out=cfg.get("n_out"),
            log=lambda r, s=seed: run.event("train_step", seed=s, **r), **extra,
        )
        d = Path(args.out) / f"seed_{seed}"
        d.mkdir(exist_ok=True)
        save_checkpoint(res.checkpoint, d / "checkpoint.cmrc")
        results[str(seed)] = {
            "best_val": res.best_metric,
            "epochs": res.checkpoint.epoch,
            "checkpoint": f"seed_{seed}/checkpoint.cmrc",
            "checkpoint_sha256": _sha256(d / "checkpoint.cmrc"),
        }
    run.finish(
        {
            "task": task,
            "arm": arm,
            "validation_metric": base_cfg.validation_metric,
            "train_subjects": train_ids,
            "val_subjects": val_ids,
            "seeds": results,
        }
    )
    return 0


# ---------------------------------------------------------------------------
# evaluation and reporting


def _safe(fn, *a):
    from .metrics import EmptyRegionError

    try:
        return fn(*a)
    except EmptyRegionError:
        return float("nan")


def evaluate_subject(model, task: str, study, sid: str, spec: dict) -> dict[str, float]:
    """Per-subject metrics for one fine-tuned model."""
    from . import metrics, phantom, training

    view = spec["views"][0]
    ed, es = int(study.meta.get("ed_phase", 0)), int(study.meta.get("es_phase", study.n_phases // 2))
    row: dict[str, float] = {}
    if task == "segmentation":
        ex = training.segmentation_examples([study], view, "all", [sid])
        preds = training.predict(model, task, ex)
        sp = study.spacing(view)
        for name, lab in (("rv", phantom.RV), ("myo", phantom.MYO), ("lv", phantom.LV)):
            row[f"dice_{name}"] = float(np.mean([metrics.dice(preds[t], ex[t].target, lab) for t in (ed, es)]))
            row[f"hd95_{name}"] = float(np.mean([_safe(metrics.hd95, preds[t], ex[t].target, lab, sp) for t in (ed, es)]))
        row["dice_mean"] = float(np.mean([row["dice_rv"], row["dice_myo"], row["dice_lv"]]))
        if view == "sax":
            pred_series = metrics.VolumeSeries.from_masks(np.stack(preds, -1), sp)
            # a model that never predicts LV has no EF; keep the row, mark it missing
            ef_pred = metrics.ef_from_series(pred_series)[0] if pred_series.lv.max() > 0 else float("nan")
            ef_true = metrics.ef_from_series(metrics.VolumeSeries.from_masks(study.gt_masks[view], sp))[0]
            row.update(lvef_pred=ef_pred, lvef_true=ef_true, lvef_abs_err=abs(ef_pred - ef_true))
    elif task in ("landmark_heatmap", "landmark_coord"):
        ex = training.landmark_examples([study], view, [ed, es], [sid])
        p_ed, p_es = training.predict(model, task, ex)
        row["landmark_l2"] = float(np.mean([metrics.landmark_error(p, e.target).mean() for p, e in zip((p_ed, p_es), ex)]))
        m_pred, m_true = metrics.mapse(p_ed, p_es), metrics.mapse(ex[0].target, ex[1].target)
        g_pred = metrics.gls(metrics.lv_length(p_ed), metrics.lv_length(p_es))
        g_true = metrics.gls(metrics.lv_length(ex[0].target), metrics.lv_length(ex[1].target))
        row.update(mapse_pred=m_pred, mapse_true=m_true, mapse_abs_err=abs(m_pred - m_true))
        row.update(gls_pred=g_pred, gls_true=g_true, gls_abs_err=abs(g_pred - g_true))
    else:
        target = spec.get("target", "ef" if task == "regression" else "disease")
        gt = study.gt_scalars or {}
        y = float(gt["ef"] < 45.0) if target == "disease" else float(gt[target])
        ex = training.scalar_examples([study], [y], spec["views"], "edes", [sid])
        pred = training.predict(model, task, ex)[0]
        row.update(pred=float(pred), true=y)
        if task == "regression":
            row["abs_err"] = abs(pred - y)
        else:
            row["correct"] = float(pred == y)
    return row


def cmd_eval(args) -> int:
    from . import metrics
    from .training import load_checkpoint, model_from_checkpoint

    run_dir = Path(args.run)
    try:
        train_result = json.loads((run_dir / RESULT).read_text())
    except FileNotFoundError:
        raise InputError(f"{run_dir} holds no completed fine-tuning run")
    subjects = args.subjects.split(",") if args.subjects else None
    run = Run("eval", args.out, {"run": str(run_dir), "subjects": subjects}, [args.run, args.data],
              [int(s) for s in train_result["seeds"]])
    entries, studies = _load_studies(args.data, subjects)
    task = train_result["task"]
    rows = []
    for seed, info in sorted(train_result["seeds"].items(), key=lambda kv: int(kv[0])):
        ckpt = load_checkpoint(run_dir / info["checkpoint"])
        model = model_from_checkpoint(ckpt)
        spec = dict(ckpt.model)
        for e, s in zip(entries, studies):
            rows.append({"subject": e["id"], "seed": int(seed), **evaluate_subject(model, task, s, e["id"], spec)})
        run.event("seed_evaluated", seed=int(seed))
    names = [k for k in rows[0] if k not in ("subject", "seed")]
    with open(Path(args.out) / "per_subject.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["subject", "seed"] + names, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    ids = [e["id"] for e in entries]
    per_subject = {n: [float(np.nanmean([r[n] for r in rows if r["subject"] == i])) for i in ids] for n in names}
    summary = {n: float(np.nanmean(v)) for n, v in per_subject.items()}
    if task == "classification":
        counts = metrics.ConfusionCounts.from_labels(
            [r["pred"] for r in rows], [r["true"] for r in rows]
        )
        summary.update({f"cls_{k}": v for k, v in metrics.classification_metrics(counts, strict=False).items()})
    run.finish({"task": task, "arm": train_result["arm"], "subjects": ids, "summary": summary, "per_subject": per_subject})
    return 0


def _read_per_subject(eval_dir) -> tuple[str, list[str], dict[str, np.ndarray]]:
    res = json.loads((Path(eval_dir) / RESULT).read_text())
    return res["task"], res["subjects"], {k: np.asarray(v, float) for k, v in res["per_subject"].items()}


def cmd_report(args) -> int:
    from .stats import bootstrap_compare, bootstrap_summary

    run = Run("report", args.out, {"runs": args.runs, "n_boot": args.n_boot, "seed": args.seed}, args.runs, [args.seed])
    arms = {}
    for d in args.runs:
        label = Path(d).name
        if label in arms:
            raise InputError(f"duplicate arm label {label!r}")
        try:
            arms[label] = _read_per_subject(d)
        except FileNotFoundError:
            raise InputError(f"{d} holds no completed evaluation")
    labels = list(arms)
    ref_task, ref_subjects, ref_metrics = arms[labels[0]]
    if len(ref_subjects) < 2:
        raise InputError(f"arm {labels[0]!r} has {len(ref_subjects)} subject(s); the bootstrap needs at least two")
    for lab in labels[1:]:
        task, subjects, _ = arms[lab]
        if subjects != ref_subjects:
            raise InputError(f"arm {lab!r} covers different subjects than {labels[0]!r}")
        if task != ref_task:
            raise InputError(f"arm {lab!r} is a {task} run, {labels[0]!r} is {ref_task}")
    metric_names = [m for m in ref_metrics if all(m in arms[l][2] for l in labels)]
    table = []
    for m in metric_names:
        for i, lab in enumerate(labels):
            vals = arms[lab][2][m]
            if np.any(np.isnan(vals)):
                continue
            rng = np.random.default_rng(args.seed)
            if i == 0:
                r = bootstrap_summary(vals, args.n_boot, rng, m)
                row = {"metric": m, "arm": lab, "mean": r.mean, "std": r.std, "vs": None, "p_value": None, "tier": None}
            else:
                r = bootstrap_compare(vals, ref_metrics[m], args.n_boot, rng, m)
                row = {"metric": m, "arm": lab, "mean": r.mean, "std": r.std, "vs": labels[0], "p_value": r.p_value, "tier": r.tier}
            table.append(row)
    with open(Path(args.out) / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["metric", "arm", "mean", "std", "vs", "p_value", "tier"], lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else ("" if v is None else v)) for k, v in row.items()})
    run.finish({"arms": labels, "task": ref_task, "n_boot": args.n_boot, "table": table})
    return 0


def read_records(path):
    from .stats import SubjectRecord

    fixed = {"id", "age", "sex", "bmi", "disease", "time", "event", "group"}
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = fixed - set(reader.fieldnames or [])
        if missing:
            raise InputError(f"records lack columns {sorted(missing)}")
        for row in reader:
            try:
                out.append(
                    SubjectRecord(
                        id=row["id"], age=float(row["age"]), sex=int(row["sex"]), bmi=float(row["bmi"]),
                        disease=int(row["disease"]), time=float(row["time"]), event=int(row["event"]),
                        group=row["group"], metrics={k: float(v) for k, v in row.items() if k not in fixed and v != ""},
                    )
                )
            except ValueError as e:
                raise InputError(f"bad record {row.get('id')!r}: {e}")
    return out


def cmd_analyze(args) -> int:
    from . import stats

    records = read_records(args.records)
    if not records or any(args.metric not in r.metrics for r in records):
        raise InputError(f"every record needs a value for metric {args.metric!r}")
    run = Run(f"analyze {args.kind}", args.out, {"kind": args.kind, "metric": args.metric}, [args.records])
    y = np.array([r.metrics[args.metric] for r in records])
    cov = {k: np.array([getattr(r, k) for r in records], float) for k in ("disease", "age", "sex", "bmi")}
    if args.kind == "assoc":
        fit = stats.ols_fit(y, cov, list(stats.COVARIATES))
        result = {"model": "ols", "response": args.metric, "n": len(records), "coefficients": fit.table()}
    elif args.kind == "survival":
        time_ = np.array([r.time for r in records])
        event = np.array([r.event for r in records])
        covs = {args.metric: y, "age": cov["age"], "sex": cov["sex"], "bmi": cov["bmi"]}
        fit = stats.cox_fit(time_, event, covs, list(covs))
        table = fit.table()
        for row, hr in zip(table, fit.extra["hazard_ratio"]):
            row["hazard_ratio"] = float(hr)
        result = {"model": "cox_breslow", "n": len(records), "n_events": int(event.sum()), "coefficients": table}
    else:
        groups = [r.group for r in records]
        curve = stats.disparity_curve(y, groups)
        result = {"metric": args.metric, "n": len(records), "curve": [vars(c) for c in curve]}
    run.finish(result)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cinema", description="Multi-view cine MRI masked autoencoder pipeline.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    ph = sub.add_parser("phantom", help="synthetic phantom cohorts").add_subparsers(dest="action", parser_class=_Parser, required=True)
    g = ph.add_parser("generate", help="write phantom studies and manifest.json")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_phantom_generate)

    da = sub.add_parser("data", help="data preparation").add_subparsers(dest="action", parser_class=_Parser, required=True)
    g = da.add_parser("preprocess", help="resample, crop/pad and normalise studies")
    g.add_argument("--in", dest="inp", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--grid", required=True)
    g.set_defaults(func=cmd_data_preprocess)

    tr = sub.add_parser("train", help="pre-training and fine-tuning").add_subparsers(dest="action", parser_class=_Parser, required=True)
    g = tr.add_parser("pretrain", help="masked-reconstruction pre-training")
    g.add_argument("--config", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--resume", help="checkpoint to continue from")
    g.set_defaults(func=cmd_train_pretrain)
    g = tr.add_parser("finetune", help="task fine-tuning over several seeds")
    g.add_argument("--config", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--pretrained", help="pre-training checkpoint (finetune arm)")
    g.add_argument("--seeds", default="0,1,2")
    g.set_defaults(func=cmd_train_finetune)

    g = sub.add_parser("eval", help="per-subject metrics of a fine-tuning run")
    g.add_argument("--run", required=True, help="output directory of `train finetune`")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--subjects", help="comma-separated subject ids (default: all)")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("analyze", help="association, survival and disparity analyses")
    g.add_argument("kind", choices=("assoc", "survival", "disparity"))
    g.add_argument("--records", required=True)
    g.add_argument("--metric", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_analyze)

    g = sub.add_parser("report", help="bootstrap comparison of evaluated arms")
    g.add_argument("--runs", nargs="+", required=True, help="eval output directories; the first is the reference")
    g.add_argument("--out", required=True)
    g.add_argument("--n-boot", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_report)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail(EX_USAGE, "usage", str(e))
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    try:
        return args.func(args)
    except InputError as e:
        _mark_failed(args, e)
        return _fail(EX_DATAERR, "input", str(e))
    except Exception as e:  # noqa: BLE001 - every failure must map to an exit code
        _mark_failed(args, e)
        return _fail(EX_SOFTWARE, type(e).__name__, str(e))


def _mark_failed(args, exc) -> None:
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    path = Path(getattr(args, "out", "") or ".") / MANIFEST
    if getattr(args, "out", None) and path.exists():
        man = json.loads(path.read_text())
        if man.get("status") == "running":
            man.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            dump_json(man, path)


if __name__ == "__main__":
    sys.exit(main())
