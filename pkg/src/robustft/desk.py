"""The desk transfer setup behind the acceptance runs and the experiment scripts.

Everything goes through the CLI entry point, so these runs exercise the same
config, CSV and manifest paths a user does. The base config is
``configs/desk.cfg``; per-run changes are ``--set`` overrides.
"""

from __future__ import annotations

import statistics
from pathlib import Path

from .cli import main, read_csv
from .diagnostics import OverfitVerdict, detect_overfit

CONFIG_PATH = Path(__file__).parent / "configs" / "desk.cfg"

PRETRAIN_EPS = 16.0
EPS_GRID = (2.0, 4.0, 8.0, 16.0, 24.0, 32.0)
# fine-tuning at twice the pretraining budget, as eps=8 is to eps=4
STABLE_EPS = 32.0
# from-scratch FGSM setting for the collapse check (see the README cookbook)
SCRATCH_EPS = 64.0
SCRATCH_EPOCHS = 40
SCRATCH_LR = 0.05


class DeskError(RuntimeError):
    pass


def cli(command: str, out, *pairs: tuple[str, object], seed: int | None = None,
        config=CONFIG_PATH, extra=()) -> Path:
    """Run ``robustft <command>`` with ``--set key=value`` for each pair."""
    argv = [command, "--config", str(config), "--out", str(out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    for key, value in pairs:
        argv += ["--set", f"{key}={value}"]
    argv += [str(e) for e in extra]
    code = main(argv)
    if code != 0:
        raise DeskError(f"robustft {command} exited with {code}")
    return Path(out)


def pretrain(root, seed: int = 0) -> Path:
    """Robust source checkpoint under ``root/pretrain``; reused when present."""
    out = Path(root) / "pretrain"
    ckpt = out / "checkpoint.npz"
    if not ckpt.is_file():
        cli("pretrain", out, seed=seed)
    return ckpt


def robust_curve(history_csv) -> list[float]:
    _, rows = read_csv(history_csv)
    return [float(r["robust_acc_pgd10"]) for r in rows]


def peak(history_csv) -> float:
    return max(robust_curve(history_csv))


def median(values) -> float:
    return float(statistics.median(values))


# ------------------------------------------------------------------ experiments


def lp_sweep(root, ckpt, eps=EPS_GRID, attacks=("fgsm", "pgd")) -> Path:
    """Linear-probe sweep over ``eps`` from the robust checkpoint; reused when present."""
    out = Path(root) / "lp_sweep"
    if (out / "summary.csv").is_file():
        return out
    grid = ", ".join(f"{e:g}" for e in eps)
    return cli("sweep", out, ("finetune.checkpoint", ckpt),
               ("sweep.eps", grid), ("sweep.attacks", ", ".join(attacks)), ("sweep.pefts", "linear_probe"))


def similarity(root, sweep_dir, eps=EPS_GRID) -> list[dict]:
    """FGSM vs PGD-7 similarity on each FGSM-trained linear-probe model."""
    grid = ", ".join(f"{e:g}" for e in eps)
    out = cli("diagnose", Path(root) / "similarity", ("diagnose.sweep_dir", sweep_dir), ("sweep.eps", grid),
              ("diagnose.attack", "fgsm"), ("diagnose.peft", "linear_probe"), ("diagnose.compare", "fgsm, pgd"))
    return read_csv(out / "similarity.csv")[1]


def scratch_fgsm(root, eps=SCRATCH_EPS, epochs=SCRATCH_EPOCHS, lr=SCRATCH_LR, seed: int = 0) -> tuple[list[float], OverfitVerdict]:
    """FGSM training from scratch on the source task; returns the robust curve and verdict."""
    out = cli("pretrain", Path(root) / f"scratch_fgsm_eps{eps:g}", ("pretrain.attack", "fgsm"),
              ("pretrain.eps", eps), ("pretrain.epochs", epochs), ("pretrain.lr", lr), seed=seed)
    curve = robust_curve(out / "history.csv")
    return curve, detect_overfit(curve)


def roli_vs_direct(root, ckpt, seed: int, eps=PRETRAIN_EPS) -> tuple[float, float]:
    """Peak robust accuracy of direct full FT and of RoLI full FT at the same total epoch budget.

    RoLI spends the configured epochs on each stage, so direct fine-tuning gets twice that.
    """
    root = Path(root)
    common = (("finetune.checkpoint", ckpt), ("finetune.eps", eps), ("finetune.attack", "fgsm"))
    epochs = 20
    direct = cli("finetune", root / f"direct_s{seed}", *common, ("finetune.peft", "full"),
                 ("finetune.epochs", 2 * epochs), seed=seed)
    roli = cli("finetune", root / f"roli_s{seed}", *common, ("finetune.roli", "true"),
               ("finetune.roli_peft", "full"), ("finetune.epochs", epochs), ("finetune.roli_epochs", epochs), seed=seed)
    return peak(direct / "history.csv"), peak(roli / "stage2_history.csv")


def regularizer_parity(root, ckpt, seed: int, eps=STABLE_EPS,
                       attacks=("fgsm", "fgsm_ri", "fgsm_gradalign")) -> dict[str, float]:
    """Peak robust accuracy per single-step variant (linear probing at ``eps``)."""
    out = cli("sweep", Path(root) / f"parity_s{seed}", ("finetune.checkpoint", ckpt), ("sweep.eps", f"{eps:g}"),
              ("sweep.attacks", ", ".join(attacks)), ("sweep.pefts", "linear_probe"), seed=seed)
    return {r["attack"]: float(r["peak_robust_acc"]) for r in read_csv(out / "summary.csv")[1]}


def epoch_times(root, ckpt, attacks, pefts=("full", "linear_probe"), eps=PRETRAIN_EPS, repeats: int = 3,
                name: str = "time") -> list[dict]:
    """Rows of ``time.csv`` for fine-tuning epochs on the target task."""
    out = cli("time", Path(root) / name, ("finetune.checkpoint", ckpt), ("finetune.eps", eps),
              ("time.attacks", ", ".join(attacks)), ("time.pefts", ", ".join(pefts)), ("time.repeats", repeats))
    return read_csv(out / "time.csv")[1]
