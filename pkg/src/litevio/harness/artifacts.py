"""Report artifacts: JSON, per-pose CSV, KITTI trajectories, static plots and a text table."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..geometry import Pose, integrate, write_kitti_poses  # noqa: E402
from .report import PREDICTORS, MetricsReport, render_table  # noqa: E402

AXES = ("phi_x", "phi_y", "phi_z", "v_x", "v_y", "v_z")
_COLORS = {"gt": "black", "baseline": "tab:red", "tta": "tab:blue", "finetuned": "tab:green",
           "inertial": "tab:gray"}


class ArtifactError(OSError):
    pass


def _seq_name(seq) -> str:
    return f"seed{seq['seed']}_{seq['noise']}"


def write_per_pose_csv(report: MetricsReport, path) -> Path:
    """One row per (sequence, transition) with every stored series."""
    cols = ["sequence", "seed", "noise", "t", "label", "k", "loss"]
    for p in ("gt",) + PREDICTORS:
        cols += [f"{p}_{a}" for a in AXES]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i, seq in enumerate(report.sequences):
            s = seq["series"]
            for t in range(len(s["gt"])):
                row = [i, seq["seed"], seq["noise"], t, s["label"][t]]
                row.append("" if s.get("k") is None else s["k"][t])
                loss = s["loss"][t] if s.get("loss") is not None else None
                row.append("" if loss is None else repr(float(loss)))
                for p in ("gt",) + PREDICTORS:
                    vals = s.get(p)
                    row += [""] * 6 if vals is None else [repr(float(x)) for x in vals[t]]
                w.writerow(row)
    return Path(path)


def read_per_pose_csv(path) -> list[dict]:
    """Series per sequence, in the layout stored in reports."""
    seqs: dict[int, dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            s = seqs.setdefault(int(row["sequence"]), {"seed": int(row["seed"]), "noise": row["noise"],
                                                       "series": {"label": [], "k": [], "loss": []}})
            ser = s["series"]
            ser["label"].append(int(row["label"]))
            ser["k"].append(None if row["k"] == "" else int(row["k"]))
            ser["loss"].append(None if row["loss"] == "" else float(row["loss"]))
            for p in ("gt",) + PREDICTORS:
                cells = [row[f"{p}_{a}"] for a in AXES]
                if cells[0] != "":
                    ser.setdefault(p, []).append([float(c) for c in cells])
    out = []
    for i in sorted(seqs):
        ser = seqs[i]["series"]
        for key in ("k", "loss"):
            if all(v is None for v in ser[key]):
                ser[key] = None
        out.append(seqs[i])
    return out


def _write_trajectories(seq, folder: Path) -> list[Path]:
    paths = []
    for p in ("gt",) + PREDICTORS:
        vals = seq["series"].get(p)
        if vals is None:
            continue
        path = folder / f"{_seq_name(seq)}_{p}.txt"
        write_kitti_poses(path, integrate(Pose.identity(), np.asarray(vals, dtype=float)))
        paths.append(path)
    return paths


def _shade_episodes(ax, seq):
    for e in seq.get("schedule") or []:
        ax.axvspan(e["start"] - 1, e["end"] - 1, color="0.85", lw=0)
        ax.text((e["start"] + e["end"]) / 2 - 1, 1.0, e["noise"], transform=ax.get_xaxis_transform(),
                ha="center", va="bottom", fontsize=7)


def _plot_errors(seq, path):
    s = seq["series"]
    gt = np.asarray(s["gt"])
    fig, ax = plt.subplots(figsize=(8, 3), dpi=100)
    _shade_episodes(ax, seq)
    for p in ("baseline", "tta", "finetuned"):
        if s.get(p) is not None:
            err = np.linalg.norm(np.asarray(s[p])[:, 3:] - gt[:, 3:], axis=1)
            ax.plot(np.arange(len(err)), err, lw=0.8, color=_COLORS[p], label=p)
    if seq.get("window"):
        for t in seq["window"]:
            ax.axvline(t - 1, color="k", ls="--", lw=0.8)
    ax.set_xlabel("transition")
    ax.set_ylabel("pose-wise t error [m]")
    ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _plot_trajectory(seq, path):
    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    for p in ("gt", "baseline", "tta", "finetuned"):
        vals = seq["series"].get(p)
        if vals is None:
            continue
        xyz = integrate(Pose.identity(), np.asarray(vals, dtype=float)).positions()
        ax.plot(xyz[:, 0], xyz[:, 1], lw=1.0, color=_COLORS[p], label=p)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def emit_artifacts(report: MetricsReport, out_dir, plots: bool = True) -> list[Path]:
    """Write every artifact for ``report``; rerunning overwrites with identical bytes."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "trajectories").mkdir(exist_ok=True)
        files = [report.save(out / "report.json"), write_per_pose_csv(report, out / "per_pose.csv")]
        table = out / "table.txt"
        table.write_text(render_table(report) + "\n")
        files.append(table)
        for seq in report.sequences:
            files += _write_trajectories(seq, out / "trajectories")
        if plots:
            (out / "plots").mkdir(exist_ok=True)
            for seq in report.sequences:
                for kind, fn in (("errors", _plot_errors), ("trajectory", _plot_trajectory)):
                    path = out / "plots" / f"{_seq_name(seq)}_{kind}.png"
                    fn(seq, path)
                    files.append(path)
    except OSError as e:
        raise ArtifactError(f"cannot write artifacts to {out}: {e}") from e
    return files
