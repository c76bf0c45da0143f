"""SVG line charts drawn from a run directory's CSV files."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "daif"  # stable element ids

TRAIN_LOG = "train_log.csv"
VALIDATION = "validation.csv"
CHARTS = (
    "validation_preference.svg",
    "energy_saving.svg",
    "efe_components.svg",
    "loss_bce_buffer.svg",
    "loss_bce_machines.svg",
    "loss_mse_prefs.svg",
)


class PlotError(RuntimeError):
    pass


def read_csv(path: Path) -> list[dict[str, str]]:
    if not path.is_file():
        raise PlotError(f"missing CSV: {path}")
    with path.open(newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise PlotError(f"empty CSV: {path}")
    return rows


def _col(rows, key) -> list[float]:
    return [float(r[key]) for r in rows]


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _line_chart(path: Path, x, series: dict[str, list[float]], xlabel: str, ylabel: str, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, y in series.items():
        ax.plot(x, y, label=label, linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_run(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """The six training charts for one run; returns the written paths."""
    run_dir = Path(run_dir)
    log_rows = read_csv(run_dir / TRAIN_LOG)
    val_rows = read_csv(run_dir / VALIDATION)
    out = Path(out_dir) if out_dir is not None else run_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)

    epochs = _col(val_rows, "epoch")
    step = list(range(len(log_rows)))
    paths = [
        _line_chart(
            out / CHARTS[0], epochs,
            {"agent": _col(val_rows, "pref_mean"), "random phase": _col(val_rows, "random_pref_mean")},
            "epoch", "composite preference", "Validation preference",
        ),
        _line_chart(
            out / CHARTS[1], epochs,
            {"energy saving": _col(val_rows, "energy_saving"), "production loss": _col(val_rows, "production_loss")},
            "epoch", "% vs ALL-ON", "Energy saving",
        ),
        _line_chart(
            out / CHARTS[2], step,
            {"total": _col(log_rows, "G_total"), "extrinsic": _col(log_rows, "G_extrinsic"),
             "state": _col(log_rows, "G_state"), "parameter": _col(log_rows, "G_param")},
            "iteration", "nats", "Expected free energy",
        ),
        _line_chart(out / CHARTS[3], step, {"BCE_b": _col(log_rows, "BCE_b")}, "iteration", "nats", "Buffer reconstruction"),
        _line_chart(out / CHARTS[4], step, {"BCE_m": _col(log_rows, "BCE_m")}, "iteration", "nats", "Machine reconstruction"),
        _line_chart(out / CHARTS[5], step, {"MSE_r": _col(log_rows, "MSE_r")}, "iteration", "nats", "Preference reconstruction"),
    ]
    return paths


def plot_horizon_sweep(run_dirs: list[str | Path], horizons: list[int], path: str | Path) -> Path:
    """Validation preference per epoch for each horizon and the best epoch against ``H``."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.5))
    best, best_std = [], []
    for d, h in sorted(zip(run_dirs, horizons), key=lambda t: t[1]):
        rows = read_csv(Path(d) / VALIDATION)
        pref = _col(rows, "pref_mean")
        left.plot(_col(rows, "epoch"), pref, label=f"H = {h}", linewidth=1.2)
        i = max(range(len(pref)), key=pref.__getitem__)
        best.append(pref[i])
        best_std.append(float(rows[i]["pref_std"]))
    hs = sorted(horizons)
    left.set_xlabel("epoch")
    left.set_ylabel("composite preference")
    left.set_title("Validation preference by horizon")
    left.legend(fontsize=8)
    left.grid(alpha=0.3)
    right.errorbar(hs, best, yerr=best_std, marker="o", capsize=3)
    right.set_xscale("log")
    right.set_xlabel("horizon H (decisions)")
    right.set_ylabel("best validation preference")
    right.set_title("Preference vs horizon")
    right.grid(alpha=0.3)
    return _save(fig, Path(path))
