"""Report output: records CSV, aggregate JSON summary, and PNG figures.

CSV floats are written with ``repr`` so parsing them back reproduces the
exact doubles. The summary holds per-(alpha, noise, location-mode,
variable) means over evaluation points; cycling groups additionally report
means over cycles 10 and later, the settled part of the run.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .experiments import CycleRecord

CSV_COLUMNS = [
    "experiment",
    "alpha",
    "sigma_noise",
    "location_mode",
    "cycle",
    "time_index",
    "variable",
    "rmse_background",
    "rmse_analysis",
    "rmse_freerun",
    "wall_ms",
]

SETTLED_CYCLE = 10


def write_records_csv(records: list[CycleRecord], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.experiment,
                    repr(r.alpha),
                    repr(r.sigma_noise),
                    r.location_mode,
                    r.cycle,
                    r.time_index,
                    r.variable,
                    repr(r.rmse_background),
                    repr(r.rmse_analysis),
                    repr(r.rmse_freerun),
                    repr(r.wall_ms),
                ]
            )


def read_records_csv(path) -> list[CycleRecord]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise FormatError(f"{path}: unexpected records header {header}")
        records = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise FormatError(f"{path}: malformed row {row}")
            records.append(
                CycleRecord(
                    experiment=row[0],
                    alpha=float(row[1]),
                    sigma_noise=float(row[2]),
                    location_mode=row[3],
                    cycle=int(row[4]),
                    time_index=int(row[5]),
                    variable=row[6],
                    rmse_background=float(row[7]),
                    rmse_analysis=float(row[8]),
                    rmse_freerun=float(row[9]),
                    wall_ms=float(row[10]),
                )
            )
    return records


def _group_key(r: CycleRecord):
    return (r.experiment, r.alpha, r.sigma_noise, r.location_mode, r.variable)


def summarize(records: list[CycleRecord]) -> dict:
    """Aggregate means per (alpha, noise, location mode, variable) group."""
    if not records:
        return {"empty": True, "n_records": 0, "groups": []}
    groups: dict[tuple, list[CycleRecord]] = {}
    for r in records:
        groups.setdefault(_group_key(r), []).append(r)
    out = []
    for key in sorted(groups):
        experiment, alpha, sigma, mode, variable = key
        rows = groups[key]
        entry = {
            "experiment": experiment,
            "alpha": alpha,
            "sigma_noise": sigma,
            "location_mode": mode,
            "variable": variable,
            "n": len(rows),
            "mean_rmse_background": float(np.mean([r.rmse_background for r in rows])),
            "mean_rmse_analysis": float(np.mean([r.rmse_analysis for r in rows])),
            "mean_rmse_freerun": float(np.mean([r.rmse_freerun for r in rows])),
        }
        settled = [r for r in rows if r.cycle >= SETTLED_CYCLE]
        if settled and experiment == "cycle":
            entry["settled_from_cycle"] = SETTLED_CYCLE
            entry["mean_rmse_background_settled"] = float(
                np.mean([r.rmse_background for r in settled])
            )
            entry["mean_rmse_analysis_settled"] = float(
                np.mean([r.rmse_analysis for r in settled])
            )
            entry["mean_rmse_freerun_settled"] = float(
                np.mean([r.rmse_freerun for r in settled])
            )
        out.append(entry)
    return {"empty": False, "n_records": len(records), "groups": out}


def write_summary_json(records: list[CycleRecord], path) -> dict:
    summary = summarize(records)
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary


# ---------------------------------------------------------------------------
# figures


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _variables(records):
    return sorted({r.variable for r in records})


def _figure_single_step(records, variable, out_path):
    plt = _plt()
    rows = [r for r in records if r.variable == variable]
    alphas = sorted({r.alpha for r in rows})
    mean_a = [np.mean([r.rmse_analysis for r in rows if r.alpha == a]) for a in alphas]
    mean_b = [np.mean([r.rmse_background for r in rows if r.alpha == a]) for a in alphas]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(alphas, mean_b, "s--", color="gray", label="background")
    ax.plot(alphas, mean_a, "o-", color="tab:blue", label="analysis")
    ax.set_xscale("log")
    ax.set_xlabel("observation rate")
    ax.set_ylabel(f"RMSE ({variable})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def _figure_noise_sweep(records, variable, out_path):
    plt = _plt()
    rows = [r for r in records if r.variable == variable]
    alphas = sorted({r.alpha for r in rows})
    sigmas = sorted({r.sigma_noise for r in rows})
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for a in alphas:
        means = [
            np.mean(
                [r.rmse_analysis for r in rows if r.alpha == a and r.sigma_noise == s]
            )
            for s in sigmas
        ]
        ax.plot(sigmas, means, "o-", label=f"rate {a:g}")
    bg = np.mean([r.rmse_background for r in rows])
    ax.axhline(bg, color="gray", linestyle="--", label="background")
    ax.set_xlabel("observation noise level")
    ax.set_ylabel(f"analysis RMSE ({variable})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def _figure_cycling(records, variable, out_path):
    plt = _plt()
    rows = [r for r in records if r.variable == variable]
    alphas = sorted({r.alpha for r in rows})
    cycles = sorted({r.cycle for r in rows})
    fig, ax = plt.subplots(figsize=(6, 3.6))
    free = [
        np.mean([r.rmse_freerun for r in rows if r.cycle == c]) for c in cycles
    ]
    ax.plot(cycles, free, color="black", linestyle=":", label="free run")
    for a in alphas:
        series = [
            np.mean(
                [r.rmse_analysis for r in rows if r.cycle == c and r.alpha == a]
            )
            for c in cycles
        ]
        ax.plot(cycles, series, label=f"analysis, rate {a:g}")
    ax.set_xlabel("cycle")
    ax.set_ylabel(f"RMSE ({variable})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def render_figures(records: list[CycleRecord], out_dir, name: str) -> list[Path]:
    """One PNG per variable, styled by experiment type."""
    if not records:
        return []
    out_dir = Path(out_dir)
    experiment = records[0].experiment
    render = {
        "single_step": _figure_single_step,
        "noise_sweep": _figure_noise_sweep,
        "cycle": _figure_cycling,
    }.get(experiment, _figure_single_step)
    paths = []
    for variable in _variables(records):
        path = out_dir / f"{name}_{variable}.png"
        render(records, variable, path)
        paths.append(path)
    return paths


def write_report(
    records: list[CycleRecord], out_dir, name: str, figures: bool = True
) -> dict:
    """Write ``<name>.csv``, ``<name>_summary.json`` and optional figures.

    Returns the paths written, keyed by kind.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    json_path = out_dir / f"{name}_summary.json"
    write_records_csv(records, csv_path)
    write_summary_json(records, json_path)
    out = {"csv": csv_path, "summary": json_path, "figures": []}
    if figures and records:
        out["figures"] = render_figures(records, out_dir, name)
    return out
