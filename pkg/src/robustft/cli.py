"""Command-line harness: pretrain, finetune, sweep, diagnose, time, report.

Every run writes into ``--out``: versioned CSVs, checkpoints and exactly one
``manifest.json``. Exit codes: 0 success, 1 runtime failure, 2 config error,
3 data error. Metric CSVs hold no wall-clock values, so re-running a
manifest's config reproduces them bitwise; timings go to ``*timing.csv``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfg
from .attacks import AttackError, AttackSpec
from .config import ConfigError, RunConfig, stage_seed
from .data_io import (
    DIGITS_IMAGES,
    DIGITS_LABELS,
    DataError,
    ImageDataset,
    TransferSplit,
    class_split,
    holdout,
    load_digits_idx,
    load_idx,
    synth_clusters,
)
from .diagnostics import detect_overfit, similarity, time_attack
from .models import (
    Model,
    ModelError,
    PeftMode,
    build_model,
    insert_adapters,
    load_checkpoint,
    reinit_head,
    save_checkpoint,
)
from .trainer import RunHistory, TrainError, roli_plans, train

log = logging.getLogger("robustft")

MANIFEST_FORMAT = "robustft-manifest/1"
SCHEMAS = {
    "history": ("robustft-history/1",
                ["epoch", "train_loss", "train_attack_acc", "nat_acc", "robust_acc_pgd10", "lr_used"]),
    "history_timing": ("robustft-history-timing/1", ["epoch", "wall_time_sec"]),
    "summary": ("robustft-sweep-summary/1",
                ["peft", "attack", "eps", "peak_nat_acc", "peak_robust_acc", "best_epoch",
                 "final_robust_acc", "overfit", "overfit_onset", "diff_fgsm_pgd"]),
    "summary_timing": ("robustft-sweep-timing/1", ["peft", "attack", "eps", "total_time_sec"]),
    "similarity": ("robustft-similarity/1", ["eps", "mean_cos", "loss_ratio", "racc_ratio", "n", "excluded"]),
    "time": ("robustft-time/1",
             ["peft", "attack", "eps", "median_epoch_sec", "input_grads", "param_grads",
              "gradalign_grads", "grad_calls", "fgsm_pgd_pct", "fgsm_pgd_calls"]),
}
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


# ------------------------------------------------------------------ CSV output


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(kind: str, rows) -> str:
    """CSV with ``# schema: <name>`` as its first line."""
    version, columns = SCHEMAS[kind]
    buf = io.StringIO()
    buf.write(f"# schema: {version}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def read_csv(path) -> tuple[str, list[dict]]:
    """Schema name and rows of a CSV written by :func:`csv_text`."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# schema: "):
        raise DataError(f"{path}: missing schema header")
    schema = lines[0][len("# schema: "):].strip()
    return schema, list(csv.DictReader(lines[1:]))


def history_rows(hist: RunHistory) -> tuple[list[dict], list[dict]]:
    metrics = [dict(zip(SCHEMAS["history"][1], r.metrics())) for r in hist.records]
    timing = [{"epoch": r.epoch, "wall_time_sec": r.wall_time_sec} for r in hist.records]
    return metrics, timing


# ---------------------------------------------------------------- run directory


@dataclass
class RunDir:
    """Collects outputs; nothing touches disk until the first write."""

    root: Path
    command: str
    config: RunConfig
    inputs: dict
    t0: float

    def __post_init__(self):
        self.outputs: list[str] = []
        self.stages: dict[str, float] = {}

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_text(self, rel: str, text: str):
        self.path(rel).write_text(text)
        self.outputs.append(rel)

    def write_csv(self, rel: str, kind: str, rows):
        self.write_text(rel, csv_text(kind, rows))

    def write_history(self, prefix: str, hist: RunHistory):
        metrics, timing = history_rows(hist)
        self.write_csv(f"{prefix}history.csv", "history", metrics)
        self.write_csv(f"{prefix}history_timing.csv", "history_timing", timing)

    def save_model(self, rel: str, model: Model):
        save_checkpoint(model, self.path(rel))
        self.outputs.append(rel)

    def finish(self):
        manifest = {
            "format": MANIFEST_FORMAT,
            "command": self.command,
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "config": cfg.to_pairs(self.config),
            "seeds": {s: stage_seed(self.config.seed, s) for s in SEED_STAGES},
            "inputs": self.inputs,
            "outputs": {rel: _digest(self.root / rel) for rel in self.outputs},
            "wall_time_sec": {**self.stages, "total": time.perf_counter() - self.t0},
        }
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


SEED_STAGES = ("split", "source-split", "model", "adapters", "head", "pretrain", "finetune", "time")


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


# ------------------------------------------------------------------------ data


def load_dataset(config: RunConfig) -> tuple[ImageDataset, dict]:
    """The configured dataset and digests of the files it came from."""
    d = config.data
    if d.source == "digits":
        return load_digits_idx(), {"digits:images": _digest(DIGITS_IMAGES), "digits:labels": _digest(DIGITS_LABELS)}
    if d.source == "idx":
        data = load_idx(d.images, d.labels, d.num_classes)
        return data, {d.images: _digest(d.images), d.labels: _digest(d.labels)}
    return synth_clusters(config.synth), {}


def load_split(config: RunConfig) -> tuple[TransferSplit, dict]:
    data, digests = load_dataset(config)
    split = class_split(data, config.data.source_classes, config.data.target_classes,
                        config.data.test_fraction, stage_seed(config.seed, "split"))
    return split, digests


def source_sets(config: RunConfig, split: TransferSplit) -> tuple[ImageDataset, ImageDataset]:
    return holdout(split.source, config.data.source_test_fraction, stage_seed(config.seed, "source-split"))


def load_model_file(path) -> tuple[Model, dict]:
    if path is None:
        raise ConfigError("finetune.checkpoint is not set")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint not found: {p}")
    try:
        return load_checkpoint(p), {str(p): _digest(p)}
    except (ModelError, OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read checkpoint {p}: {exc}") from None


def prepare_finetune_model(config: RunConfig, model: Model, num_classes: int, peft_modes) -> Model:
    """Match the head to the target task and add adapters when a mode needs them."""
    ft = config.finetune
    if model.spec.num_classes != num_classes:
        if not ft.reinit_head:
            raise ConfigError(
                f"checkpoint head has {model.spec.num_classes} classes, target task has {num_classes}; "
                "set finetune.reinit_head = true"
            )
    if ft.reinit_head:
        if ft.head_init not in ("zero", "seeded"):
            raise ConfigError(f"finetune.head_init must be zero or seeded, got {ft.head_init!r}")
        model = reinit_head(model, num_classes, ft.head_init, stage_seed(config.seed, "head"))
    if PeftMode.ADAPTER in {PeftMode(m) for m in peft_modes} and not model.has_adapters:
        if not config.model.adapters_enabled:
            raise ConfigError("peft=adapter needs model.adapters_enabled = true (the checkpoint has no adapters)")
        model = insert_adapters(model, config.model.adapter_reduction, stage_seed(config.seed, "adapters"))
    return model


# -------------------------------------------------------------------- commands


def cmd_pretrain(config: RunConfig, out: Path) -> RunDir:
    split, digests = load_split(config)
    train_set, test_set = source_sets(config, split)
    spec = config.model.spec(train_set.input_shape, train_set.num_classes)
    model = build_model(spec, stage_seed(config.seed, "model"))
    plan = config.pretrain.plan(stage_seed(config.seed, "pretrain"), config.eval_subset)
    run = RunDir(out, "pretrain", config, digests, time.perf_counter())
    log.info("pretrain: %d examples, %s, %d epochs", len(train_set), plan.attack.label(), plan.epochs)
    t = time.perf_counter()
    hist = train(model, train_set, test_set, plan, on_epoch=_log_epoch)
    run.stages["pretrain"] = time.perf_counter() - t
    run.write_history("", hist)
    run.save_model("checkpoint.npz", hist.best_checkpoint)
    return run


def _finetune_inputs(config: RunConfig, modes):
    split, digests = load_split(config)
    model, ck = load_model_file(config.finetune.checkpoint)
    model = prepare_finetune_model(config, model, split.target_train.num_classes, modes)
    return split, model, {**digests, **ck}


def cmd_finetune(config: RunConfig, out: Path) -> RunDir:
    ft = config.finetune
    modes = [ft.peft] + ([ft.roli_peft] if ft.roli else [])
    split, model, inputs = _finetune_inputs(config, modes)
    seed = stage_seed(config.seed, "finetune")
    run = RunDir(out, "finetune", config, inputs, time.perf_counter())
    plan = ft.plan(seed, config.eval_subset)
    if ft.roli:
        lp, ft_plan = roli_plans(plan.replace(peft=PeftMode.LINEAR_PROBE), ft.roli_peft, ft.roli_epochs,
                                 ft_lr=ft.roli_lr)
        t = time.perf_counter()
        s1 = train(model, split.target_train, split.target_test, lp, on_epoch=_log_epoch)
        run.stages["stage1"] = time.perf_counter() - t
        t = time.perf_counter()
        s2 = train(s1.best_checkpoint, split.target_train, split.target_test, ft_plan, on_epoch=_log_epoch)
        run.stages["stage2"] = time.perf_counter() - t
        run.write_history("stage1_", s1)
        run.write_history("stage2_", s2)
        run.save_model("stage1_best.npz", s1.best_checkpoint)
        run.save_model("best.npz", s2.best_checkpoint)
    else:
        t = time.perf_counter()
        hist = train(model, split.target_train, split.target_test, plan, on_epoch=_log_epoch)
        run.stages["finetune"] = time.perf_counter() - t
        run.write_history("", hist)
        run.save_model("best.npz", hist.best_checkpoint)
    return run


def run_name(peft: str, attack: str, eps: float) -> str:
    return f"{peft}_{attack}_eps{eps:g}"


def _sweep_job(args):
    config, model, split, peft, attack, eps = args
    seed = stage_seed(config.seed, "finetune")
    plan = config.finetune.plan(seed, config.eval_subset, attack=attack, eps=eps, peft=peft)
    hist = train(model, split.target_train, split.target_test, plan)
    verdict = detect_overfit(hist, config.sweep.drop_fraction, config.sweep.window)
    return peft, attack, eps, hist, verdict


def cmd_sweep(config: RunConfig, out: Path) -> RunDir:
    sw = config.sweep
    split, model, inputs = _finetune_inputs(config, sw.pefts)
    run = RunDir(out, "sweep", config, inputs, time.perf_counter())
    jobs = [(config, model, split, p, a, e) for p in sw.pefts for a in sw.attacks for e in sw.eps]
    t = time.perf_counter()
    if config.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    run.stages["sweep"] = time.perf_counter() - t
    summary, timing = [], []
    peaks = {(p, a, e): h.peak_robust_acc for p, a, e, h, _ in results}
    for peft, attack, eps, hist, verdict in results:
        name = run_name(peft, attack, eps)
        log.info("%s: peak RAcc %.4f, overfit %s", name, hist.peak_robust_acc, verdict.detected)
        run.write_history(f"runs/{name}/", hist)
        run.save_model(f"runs/{name}/best.npz", hist.best_checkpoint)
        diff = None
        if attack == "fgsm" and (peft, "pgd", eps) in peaks:
            diff = hist.peak_robust_acc - peaks[(peft, "pgd", eps)]
        summary.append({
            "peft": peft, "attack": attack, "eps": eps,
            "peak_nat_acc": hist.peak_nat_acc, "peak_robust_acc": hist.peak_robust_acc,
            "best_epoch": hist.best_epoch, "final_robust_acc": verdict.final_racc,
            "overfit": verdict.detected, "overfit_onset": verdict.onset_epoch, "diff_fgsm_pgd": diff,
        })
        timing.append({"peft": peft, "attack": attack, "eps": eps, "total_time_sec": hist.total_time})
    run.write_csv("summary.csv", "summary", summary)
    run.write_csv("summary_timing.csv", "summary_timing", timing)
    return run


def _diag_attack(name: str, eps: float, steps: int) -> AttackSpec:
    if name == "pgd":
        return AttackSpec.pgd(eps, steps=steps)
    if name == "fgsm":
        return AttackSpec.fgsm(eps)
    raise ConfigError(f"diagnose.compare takes fgsm or pgd, got {name!r}")


def cmd_diagnose(config: RunConfig, out: Path) -> RunDir:
    dg = config.diagnose
    if dg.sweep_dir is None:
        raise ConfigError("diagnose.sweep_dir is not set")
    a, b = (_diag_attack(n, 1.0, dg.pgd_steps) for n in dg.compare)
    split, digests = load_split(config)
    models, inputs = {}, dict(digests)
    for eps in config.sweep.eps:
        path = Path(dg.sweep_dir) / "runs" / run_name(dg.peft, dg.attack, eps) / "best.npz"
        models[eps], ck = load_model_file(path)
        inputs.update(ck)
    data = split.target_test.head(config.eval_subset)
    run = RunDir(out, "diagnose", config, inputs, time.perf_counter())
    rows = []
    for eps in sorted(models):
        rep = similarity(models[eps], data, a.with_eps(eps), b.with_eps(eps))
        rows.append({"eps": eps, "mean_cos": rep.mean_cos, "loss_ratio": rep.loss_ratio,
                     "racc_ratio": rep.racc_ratio, "n": rep.n_examples, "excluded": rep.n_excluded})
        log.info("eps %g: cos %.4f loss ratio %.4f", eps, rep.mean_cos, rep.loss_ratio)
    run.stages["diagnose"] = time.perf_counter() - run.t0
    run.write_csv("similarity.csv", "similarity", rows)
    return run


def cmd_time(config: RunConfig, out: Path) -> RunDir:
    tc = config.time
    split, inputs = load_split(config)
    data = split.target_train
    if config.finetune.checkpoint is not None:
        model, ck = load_model_file(config.finetune.checkpoint)
        inputs.update(ck)
        model = prepare_finetune_model(config, model, data.num_classes, tc.pefts)
    else:
        spec = config.model.spec(data.input_shape, data.num_classes)
        model = build_model(spec, stage_seed(config.seed, "model"))
        if PeftMode.ADAPTER.value in tc.pefts and not model.has_adapters:
            model = insert_adapters(model, config.model.adapter_reduction, stage_seed(config.seed, "adapters"))
    run = RunDir(out, "time", config, inputs, time.perf_counter())
    seed = stage_seed(config.seed, "time")
    rows = []
    for peft in tc.pefts:
        per_attack = {}
        for attack in tc.attacks:
            plan = config.finetune.plan(seed, attack=attack, peft=peft)
            rep = time_attack(model, data, plan.attack, tc.repeats, plan.batch_size, train_plan=plan)
            calls = rep.grad_calls_per_batch
            row = {"peft": peft, "attack": attack, "eps": plan.attack.eps_255, "median_epoch_sec": rep.median,
                   "input_grads": calls.get("input", 0.0), "param_grads": calls.get("param", 0.0),
                   "gradalign_grads": calls.get("gradalign", 0.0)}
            row["grad_calls"] = row["input_grads"] + row["param_grads"] + row["gradalign_grads"]
            per_attack[attack] = row
            rows.append(row)
            log.info("%s/%s: %.3fs per epoch, %g gradient calls per batch", peft, attack, rep.median, row["grad_calls"])
        if "pgd" in per_attack:
            ref = per_attack["pgd"]
            for attack, row in per_attack.items():
                if attack != "pgd":
                    row["fgsm_pgd_pct"] = 100.0 * row["median_epoch_sec"] / ref["median_epoch_sec"]
                    row["fgsm_pgd_calls"] = f"{row['grad_calls']:g}:{ref['grad_calls']:g}"
    run.stages["time"] = time.perf_counter() - run.t0
    run.write_csv("time.csv", "time", rows)
    return run


# ---------------------------------------------------------------------- report


def _fmt(v: str) -> str:
    try:
        f = float(v)
    except ValueError:
        return v
    if v.lstrip("-").isdigit():
        return v
    return f"{f:.4f}"


def _table(columns, rows) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r.get(c, "") or "") for c in columns) + " |")
    return "\n".join(lines)


def _pct(v):
    return None if v in ("", None) else float(v)


def render_report(paths) -> str:
    """Markdown tables for every recognised CSV under ``paths`` (files or directories)."""
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.rglob("*.csv")))
        elif p.is_file():
            files.append(p)
        else:
            raise DataError(f"report input not found: {p}")
    if not files:
        raise DataError("no CSV files to report on")
    parsed = [(f, *read_csv(f)) for f in files]
    by_schema = {}
    for f, schema, rows in parsed:
        by_schema.setdefault(schema.split("/")[0], []).append((f, rows))
    out = ["# Results", ""]
    if "robustft-sweep-summary" in by_schema:
        times = {}
        for f, rows in by_schema.get("robustft-sweep-timing", []):
            for r in rows:
                times[(str(f.parent), r["peft"], r["attack"], r["eps"])] = r["total_time_sec"]
        out += ["## Sweep summary", ""]
        for f, rows in by_schema["robustft-sweep-summary"]:
            for r in rows:
                r["total_time_sec"] = times.get((str(f.parent), r["peft"], r["attack"], r["eps"]), "")
            cols = SCHEMAS["summary"][1] + ["total_time_sec"]
            out += [f"`{f}`", "", _table(cols, rows), ""]
            diffs = [_pct(r["diff_fgsm_pgd"]) for r in rows if _pct(r["diff_fgsm_pgd"]) is not None]
            if diffs:
                out += [f"Average diff. (FGSM - PGD peak RAcc): {np.mean(diffs):+.4f}", ""]
    for key, title, kind in (("robustft-similarity", "FGSM vs PGD similarity", "similarity"),
                             ("robustft-time", "Epoch time", "time")):
        if key in by_schema:
            out += [f"## {title}", ""]
            for f, rows in by_schema[key]:
                out += [f"`{f}`", "", _table(SCHEMAS[kind][1], rows), ""]
    if "robustft-history" in by_schema:
        out += ["## Training runs (best epoch)", ""]
        rows = []
        for f, hist in by_schema["robustft-history"]:
            if not hist:
                continue
            best = max(hist, key=lambda r: (float(r["robust_acc_pgd10"]), -int(r["epoch"])))
            verdict = detect_overfit([float(r["robust_acc_pgd10"]) for r in hist])
            rows.append({"run": str(f.parent), "epochs": str(len(hist)), "best_epoch": best["epoch"],
                         "nat_acc": best["nat_acc"], "robust_acc": best["robust_acc_pgd10"],
                         "overfit": "true" if verdict.detected else "false"})
        out += [_table(["run", "epochs", "best_epoch", "nat_acc", "robust_acc", "overfit"], rows), ""]
    return "\n".join(out)


def cmd_report(config: RunConfig, out: Path, extra_inputs=()) -> RunDir:
    paths = list(config.report.inputs) + list(extra_inputs)
    text = render_report(paths)
    run = RunDir(out, "report", config, {}, time.perf_counter())
    run.write_text("report.md", text)
    return run


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
    "time": cmd_time,
    "report": cmd_report,
}


# ------------------------------------------------------------------ entry point


def _log_epoch(rec):
    log.info("epoch %d: loss %.4f nat %.4f robust %.4f (%.2fs)", rec.epoch, rec.train_loss,
             rec.nat_acc, rec.robust_acc_pgd10, rec.wall_time_sec)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key = value config file, or a manifest.json")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--jobs", type=int, help="parallel sweep workers")
        p.add_argument("--eval-subset", type=int, help="evaluate on the first N test examples")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("inputs", nargs="*", type=Path, help="CSV files or run directories")
    return parser


def resolve_config(args) -> RunConfig:
    config = cfg.load(args.config) if args.config else RunConfig()
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    config = cfg.from_pairs(pairs, config)
    flags = {"seed": args.seed, "jobs": args.jobs, "eval_subset": args.eval_subset}
    config = replace(config, **{k: v for k, v in flags.items() if v is not None})
    return config.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        config = resolve_config(args)
        if args.command == "report":
            run = cmd_report(config, args.out, args.inputs)
        else:
            run = COMMANDS[args.command](config, args.out)
        run.finish()
    except (ConfigError, ModelError, AttackError, TrainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
