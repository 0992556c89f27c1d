"""Metrics reports: computation from per-pose series, JSON I/O and text tables."""
from __future__ import annotations

import json
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..corruption import NoiseId
from ..geometry import Pose, integrate, pose_rmse, relative_errors

SCHEMA = "litevio-report/1"
PREDICTORS = ("baseline", "tta", "finetuned", "inertial")


def provenance() -> str:
    rev = "unknown"
    try:
        here = Path(__file__).resolve().parent
        out = subprocess.run(["git", "-C", str(here), "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            rev = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"litevio {__version__} ({rev})"


def _f(x):
    return None if x is None else float(x)


def delta_metrics(pred, gt) -> dict:
    """``t_rmse``, ``r_rmse`` and KITTI relative errors of trajectories integrated from identity."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    t_rmse, r_rmse = pose_rmse(pred, gt)
    rel = relative_errors(integrate(Pose.identity(), pred), integrate(Pose.identity(), gt))
    return {"t_rmse": t_rmse, "r_rmse": r_rmse, "t_rel": _f(rel.t_rel), "r_rel": _f(rel.r_rel),
            "n_segments": rel.n_segments}


def pearson(a, b) -> float | None:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def pseudo_label_correlation(fused, inertial, gt) -> float | None:
    """Pearson r of per-pose translation error vs ground truth and vs the inertial pseudo label."""
    fused, inertial, gt = (np.asarray(x, dtype=float) for x in (fused, inertial, gt))
    e_gt = np.linalg.norm(fused[:, 3:] - gt[:, 3:], axis=1)
    e_pl = np.linalg.norm(fused[:, 3:] - inertial[:, 3:], axis=1)
    return pearson(e_gt, e_pl)


def _ddf_acc(k, labels, bank_labels, mask=None) -> float | None:
    if k is None or bank_labels is None:
        return None
    k = np.asarray(k, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if mask is not None:
        k, labels = k[mask], labels[mask]
    if len(k) == 0:
        return None
    matched = np.array([int(NoiseId.parse(bank_labels[i])) for i in k])
    return float(np.mean(matched == labels) * 100.0)


def summarize(series: dict, bank_labels=None, window=None) -> dict:
    """All per-sequence numbers derived from the stored series.

    ``series`` holds ``gt`` and predictor deltas (T-1, 6), transition
    ``label`` ids and optionally matched indices ``k``. ``window`` is an
    optional ``(t0, t1)`` frame pair for single-shift reports.
    """
    gt = np.asarray(series["gt"], dtype=float)
    labels = np.asarray(series["label"], dtype=int)
    preds = {p: np.asarray(series[p], dtype=float) for p in PREDICTORS if series.get(p) is not None}
    out = {"metrics": {p: delta_metrics(y, gt) for p, y in preds.items()}}
    k = series.get("k")
    out["ddf_accuracy"] = _ddf_acc(k, labels, bank_labels)
    per_noise = {}
    for lab in sorted(set(labels.tolist())):
        m = labels == lab
        entry = {p: pose_rmse(y[m], gt[m])[0] for p, y in preds.items() if p != "inertial"}
        entry["n"] = int(m.sum())
        entry["ddf_accuracy"] = _ddf_acc(k, labels, bank_labels, m)
        per_noise[NoiseId(lab).name.lower()] = entry
    out["per_noise"] = per_noise
    if "baseline" in preds and "inertial" in preds:
        out["pseudo_label_r"] = pseudo_label_correlation(preds["baseline"], preds["inertial"], gt)
    else:
        out["pseudo_label_r"] = None
    if window is not None:
        t0, t1 = window
        # transition t ends at frame t + 1
        idx = np.arange(len(gt)) + 1
        parts = {"pre": idx < t0, "episode": (idx >= t0) & (idx < t1), "post": idx >= t1}
        win = {"t0": int(t0), "t1": int(t1)}
        for name, m in parts.items():
            win[name] = ({p: pose_rmse(y[m], gt[m])[0] for p, y in preds.items() if p != "inertial"}
                         if m.any() else None)
        out["windows"] = win
    else:
        out["windows"] = None
    return out


def _stats(values) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.array(vals, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std()) if len(arr) > 1 else None,
            "n": len(arr)}


def aggregate(sequences: list[dict]) -> dict:
    """Mean and std over sequences (seed order), grouped by sequence ``noise`` tag."""
    groups: dict[str, list] = {}
    for s in sequences:
        groups.setdefault(s["noise"], []).append(s)
    out = {}
    for tag, seqs in groups.items():
        g = {}
        for p in PREDICTORS:
            if all(p in s["metrics"] for s in seqs):
                g[p] = {m: _stats([s["metrics"][p][m] for s in seqs])
                        for m in ("t_rmse", "r_rmse", "t_rel", "r_rel")}
        g["ddf_accuracy"] = _stats([s["ddf_accuracy"] for s in seqs])
        g["pseudo_label_r"] = _stats([s["pseudo_label_r"] for s in seqs])
        if "baseline" in g and "tta" in g and g["baseline"]["t_rmse"]["mean"]:
            g["t_rmse_reduction"] = 1.0 - g["tta"]["t_rmse"]["mean"] / g["baseline"]["t_rmse"]["mean"]
        noises = sorted({n for s in seqs for n in s["per_noise"]})
        g["per_noise"] = {}
        for n in noises:
            rows = [s["per_noise"][n] for s in seqs if n in s["per_noise"]]
            g["per_noise"][n] = {key: _stats([r.get(key) for r in rows])
                                 for key in ("baseline", "tta", "finetuned", "ddf_accuracy")
                                 if any(r.get(key) is not None for r in rows)}
        if all(s["windows"] for s in seqs):
            g["windows"] = {part: {p: _stats([s["windows"][part][p] for s in seqs if s["windows"][part]])
                                   for p in ("baseline", "tta")}
                            for part in ("pre", "episode", "post")}
        out[tag] = g
    return out


def make_sequence(seed: int, noise: str, series: dict, schedule=None, bank_labels=None,
                  window=None) -> dict:
    series = {k: (np.asarray(v).tolist() if v is not None else None) for k, v in series.items()}
    seq = {"seed": int(seed), "noise": noise, "T": len(series["gt"]) + 1,
           "schedule": schedule or [], "window": list(window) if window else None,
           "bank_labels": list(bank_labels) if bank_labels else None}
    seq.update(summarize(series, bank_labels, window))
    seq["series"] = series
    return seq


@dataclass
class MetricsReport:
    protocol: str
    sequences: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    assumptions: list = field(default_factory=list)
    provenance: str = ""
    aggregate: dict = field(default_factory=dict)
    schema: str = SCHEMA

    def __post_init__(self):
        if not self.aggregate and self.sequences:
            self.aggregate = aggregate(self.sequences)

    def to_dict(self) -> dict:
        return {"schema": self.schema, "protocol": self.protocol, "provenance": self.provenance,
                "config": self.config, "assumptions": list(self.assumptions),
                "aggregate": self.aggregate, "sequences": self.sequences}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(protocol=d["protocol"], sequences=d["sequences"], config=d.get("config", {}),
                   assumptions=d.get("assumptions", []), provenance=d.get("provenance", ""),
                   aggregate=d["aggregate"], schema=d["schema"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def numbers(self) -> dict:
        """Everything except provenance and config: the part compared by regression tests."""
        d = self.to_dict()
        return {k: d[k] for k in ("schema", "protocol", "aggregate", "sequences")}


def _close(a, b, tol) -> bool:
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k], tol) for k in a)
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(_close(x, y, tol) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        if a is None or b is None:
            return False
        return math.isclose(a, b, rel_tol=tol, abs_tol=tol)
    return a == b


def verify_report(report: MetricsReport, tol: float = 0.0) -> list[str]:
    """Recompute every number from the stored series; returns mismatch descriptions."""
    problems = []
    for i, seq in enumerate(report.sequences):
        window = tuple(seq["window"]) if seq.get("window") else None
        redo = summarize(seq["series"], seq.get("bank_labels"), window)
        for key, value in redo.items():
            if not _close(json.loads(json.dumps(value)), seq[key], tol):
                problems.append(f"sequence {i} ({seq['noise']}, seed {seq['seed']}): {key} differs")
    if not _close(json.loads(json.dumps(aggregate(report.sequences))), report.aggregate, tol):
        problems.append("aggregate differs")
    return problems


# ---- plain-text tables

def _fmt(x, spec=".4f"):
    return "-" if x is None else format(x, spec)


def _pm(st, spec=".4f"):
    if st is None or st["mean"] is None:
        return "-"
    if st["std"] is None:
        return format(st["mean"], spec)
    return f"{format(st['mean'], spec)}±{format(st['std'], spec)}"


def _grid(header, rows) -> str:
    table = [header] + rows
    widths = [max(len(str(r[i])) for r in table) for i in range(len(header))]
    lines = ["  ".join(str(c).rjust(w) if j else str(c).ljust(w) for j, (c, w) in enumerate(zip(r, widths)))
             for r in table]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def render_table(report: MetricsReport) -> str:
    agg = report.aggregate
    n_seeds = len({s["seed"] for s in report.sequences})
    head = f"protocol: {report.protocol}   sequences: {len(report.sequences)}   seeds: {n_seeds}"
    if report.protocol == "continual":
        g = agg.get("continual") or next(iter(agg.values()))
        noises = [n for n in g["per_noise"] if n != "clean"]
        header = ["t_rmse"] + noises + ["average"]
        rows = [[p] + [_pm(g["per_noise"][n].get(p)) for n in noises] + [_pm(g[p]["t_rmse"])]
                for p in ("baseline", "tta") if p in g]
        rows.append(["ddf acc (%)"] + [_pm(g["per_noise"][n].get("ddf_accuracy"), ".1f") for n in noises]
                    + [_pm(g["ddf_accuracy"], ".1f")])
        red = g.get("t_rmse_reduction")
        return f"{head}\n{_grid(header, rows)}\nt_rmse reduction: {_fmt(red and 100 * red, '.1f')}%"
    if report.protocol == "single-shift":
        g = next(iter(agg.values()))
        w0 = report.sequences[0]["window"]
        header = ["t_rmse", f"pre (<{w0[0]})", f"episode [{w0[0]},{w0[1]})", f"post (>={w0[1]})", "overall"]
        rows = [[p] + [_pm(g["windows"][part][p]) for part in ("pre", "episode", "post")]
                + [_pm(g[p]["t_rmse"])] for p in ("baseline", "tta")]
        return f"{head}\n{_grid(header, rows)}\nddf acc (%): {_pm(g['ddf_accuracy'], '.1f')}"
    if report.protocol == "stationary":
        preds = [p for p in ("baseline", "tta", "finetuned") if all(p in g for g in agg.values())]
        header = ["noise"] + [f"{p} t_rmse" for p in preds] + ["tta reduction (%)"]
        rows = []
        for tag, g in agg.items():
            red = g.get("t_rmse_reduction")
            rows.append([tag] + [_pm(g[p]["t_rmse"]) for p in preds] + [_fmt(red and 100 * red, ".1f")])
        return f"{head}\n{_grid(header, rows)}"
    header = ["sequence"] + [m for m in ("t_rmse", "r_rmse", "t_rel", "r_rel")]
    rows = []
    for tag, g in agg.items():
        for p in PREDICTORS:
            if p in g:
                rows.append([f"{tag}/{p}"] + [_pm(g[p][m]) for m in ("t_rmse", "r_rmse", "t_rel", "r_rel")])
    return f"{head}\n{_grid(header, rows)}"
