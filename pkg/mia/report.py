import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .bundle_io import _csv_text
from .disparity import ConvergenceCurve, SimilarityMatrix
from .ensemble import EnsembleSweep
from .record import ExperimentBundle
from .util import AuditError, AuditErrorCode, write_atomic

log = logging.getLogger(__name__)

SIGNIFICANT_DIGITS = 12

CONVERGENCE_COLUMNS = [
    "k",
    "coverage_tpr",
    "coverage_fpr",
    "coverage_precision",
    "coverage_size",
    "stability_tpr",
    "stability_fpr",
    "stability_precision",
    "stability_size",
]
SWEEP_COLUMNS = ["beta", "fpr", "tpr"]
ENVELOPE_COLUMNS = ["fpr", "tpr"]


def round_numbers(value: Any) -> Any:
    """
    JSON-ready copy of ``value`` with every float cut to 12 significant digits and NaN mapped to null.
    """
    if isinstance(value, dict):
        return {str(k): round_numbers(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [round_numbers(v) for v in value]
    if isinstance(value, np.ndarray):
        return [round_numbers(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        if not np.isfinite(value):
            return None
        return float(f"{float(value):.{SIGNIFICANT_DIGITS}g}")
    return value


def to_json(report: Dict) -> str:
    return json.dumps(round_numbers(report), indent=2, sort_keys=True) + "\n"


def format_number(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.{SIGNIFICANT_DIGITS}g}"


def bundle_fingerprint(bundle: ExperimentBundle) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(bundle.ground_truth.labels).tobytes())
    for name, matrix in bundle.attacks.items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(matrix.values).tobytes())
    return digest.hexdigest()


def convergence_dict(curve: ConvergenceCurve) -> List[Dict]:
    return [
        {
            "k": point.k,
            "coverage": vars(point.coverage).copy(),
            "stability": vars(point.stability).copy(),
        }
        for point in curve.points
    ]


def similarity_dict(matrix: SimilarityMatrix) -> Dict:
    return {"basis": matrix.basis.value, "attacks": list(matrix.attack_names), "values": matrix.values.tolist()}


def sweep_dict(sweep: EnsembleSweep, readout_fprs: Sequence[float]) -> Dict:
    return {
        "strategy": sweep.strategy.value,
        "attacks": list(sweep.attacks),
        "n_instances": sweep.n_instances,
        "auc": sweep.auc,
        "raw_auc": sweep.raw_auc,
        "best_balanced_accuracy": sweep.best_balanced_accuracy(),
        "tpr_at": {format_number(fpr): sweep.tpr_at(fpr) for fpr in readout_fprs},
        "points": [{"beta": p.beta, "fpr": p.fpr, "tpr": p.tpr} for p in sweep.points],
        "envelope": [list(point) for point in sweep.envelope],
    }


def _beta_tag(beta: float) -> str:
    return format_number(beta).replace(".", "p").replace("-", "m")


def write_analysis_sidecars(report: Dict, directory: Path) -> List[Path]:
    written: List[Path] = []
    for level in report["fpr_levels"]:
        tag = _beta_tag(level["beta"])
        for attack, result in level["attacks"].items():
            rows = [
                [format_number(point["k"])]
                + [
                    format_number(point[side][field])
                    for side in ("coverage", "stability")
                    for field in ("tpr", "fpr", "precision", "set_size")
                ]
                for point in result["convergence"]
            ]
            path = directory / f"convergence_{attack}_fpr{tag}.csv"
            write_atomic(path, _csv_text(CONVERGENCE_COLUMNS, rows))
            written.append(path)
        for basis, matrix in level["similarity"].items():
            header = ["attack"] + matrix["attacks"]
            rows = [[name] + [format_number(v) for v in row] for name, row in zip(matrix["attacks"], matrix["values"])]
            path = directory / f"similarity_{basis}_fpr{tag}.csv"
            write_atomic(path, _csv_text(header, rows))
            written.append(path)
    log.debug(f"Wrote {len(written)} analysis sidecars to {directory}")
    return written


def write_ensemble_sidecars(report: Dict, directory: Path) -> List[Path]:
    written: List[Path] = []
    for strategy, result in report["strategies"].items():
        sweep = result["full"]
        path = directory / f"ensemble_{strategy}_sweep.csv"
        rows = [[format_number(p["beta"]), format_number(p["fpr"]), format_number(p["tpr"])] for p in sweep["points"]]
        write_atomic(path, _csv_text(SWEEP_COLUMNS, rows))
        written.append(path)
        path = directory / f"ensemble_{strategy}_envelope.csv"
        rows = [[format_number(f), format_number(t)] for f, t in sweep["envelope"]]
        write_atomic(path, _csv_text(ENVELOPE_COLUMNS, rows))
        written.append(path)
    return written


def _svg_figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # Stable element ids so identical data renders to identical files
    plt.rcParams["svg.hashsalt"] = "mia"
    return plt


def _save_svg(plt, figure, path: Path):
    buffer = io.StringIO()
    figure.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(figure)
    write_atomic(path, buffer.getvalue())


def render_analysis_svg(report: Dict, directory: Path) -> List[Path]:
    plt = _svg_figure()
    written: List[Path] = []
    for level in report["fpr_levels"]:
        tag = _beta_tag(level["beta"])
        figure, (coverage_axis, stability_axis) = plt.subplots(1, 2, figsize=(10, 4))
        for attack, result in level["attacks"].items():
            ks = [p["k"] for p in result["convergence"]]
            coverage_axis.plot(ks, [p["coverage"]["tpr"] for p in result["convergence"]], marker="o", label=attack)
            stability_axis.plot(ks, [p["stability"]["tpr"] for p in result["convergence"]], marker="o", label=attack)
        coverage_axis.set_title(f"Coverage TPR at FPR {level['beta']}")
        stability_axis.set_title(f"Stability TPR at FPR {level['beta']}")
        for axis in (coverage_axis, stability_axis):
            axis.set_xlabel("instances")
            axis.legend()
        path = directory / f"convergence_fpr{tag}.svg"
        _save_svg(plt, figure, path)
        written.append(path)

        for basis, matrix in level["similarity"].items():
            figure, axis = plt.subplots(figsize=(5, 4))
            image = axis.imshow(np.array(matrix["values"]), vmin=0, vmax=1, cmap="viridis")
            axis.set_xticks(range(len(matrix["attacks"])), matrix["attacks"], rotation=45, ha="right")
            axis.set_yticks(range(len(matrix["attacks"])), matrix["attacks"])
            axis.set_title(f"{basis} similarity at FPR {level['beta']}")
            figure.colorbar(image)
            figure.tight_layout()
            path = directory / f"similarity_{basis}_fpr{tag}.svg"
            _save_svg(plt, figure, path)
            written.append(path)
    return written


def log_visible(envelope) -> np.ndarray:
    """
    Envelope points that a log-log plot can show: the (0, 0) anchor and any zero-TPR points are dropped.
    """
    points = np.asarray(envelope, dtype=np.float64).reshape(-1, 2)
    return points[(points[:, 0] > 0) & (points[:, 1] > 0)]


def render_ensemble_svg(report: Dict, directory: Path) -> List[Path]:
    plt = _svg_figure()
    figure, axis = plt.subplots(figsize=(5, 5))
    for strategy, result in report["strategies"].items():
        envelope = log_visible(result["full"]["envelope"])
        if len(envelope) == 0:
            continue
        axis.plot(envelope[:, 0], envelope[:, 1], label=f"{strategy} (AUC {result['full']['auc']:.3f})")
    axis.set_xscale("log")
    axis.set_yscale("log")
    axis.set_xlabel("FPR")
    axis.set_ylabel("TPR")
    axis.legend()
    path = directory / "ensemble_roc.svg"
    _save_svg(plt, figure, path)
    return [path]


def average_reports(reports: Sequence[Dict]) -> Dict:
    """
    Averages consistency, set sizes and similarity matrices over analysis reports of the same attacks and FPRs.
    """
    if len(reports) == 0:
        raise AuditError(AuditErrorCode.INVALID_CONFIG, "no stored runs to average")
    betas = [level["beta"] for level in reports[0]["fpr_levels"]]
    for report in reports[1:]:
        if [level["beta"] for level in report["fpr_levels"]] != betas:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, "stored runs were analyzed at different FPR levels")

    levels = []
    for index, beta in enumerate(betas):
        per_run = [report["fpr_levels"][index] for report in reports]
        attacks = list(per_run[0]["attacks"].keys())
        similarity_attacks = {basis: matrix["attacks"] for basis, matrix in per_run[0]["similarity"].items()}
        for level in per_run[1:]:
            other = {basis: matrix["attacks"] for basis, matrix in level["similarity"].items()}
            if list(level["attacks"].keys()) != attacks or other != similarity_attacks:
                raise AuditError(
                    AuditErrorCode.INVALID_CONFIG,
                    f"stored runs analyzed different attacks at FPR {beta}: {attacks} vs {list(level['attacks'])}",
                )
        averaged_attacks = {}
        for attack in attacks:
            results = [level["attacks"][attack] for level in per_run]
            averaged_attacks[attack] = {
                "runs": len(results),
                "consistency": _mean([r["consistency"] for r in results]),
                "coverage_size": _mean([r["coverage_size"] for r in results]),
                "stability_size": _mean([r["stability_size"] for r in results]),
            }
        similarity = {}
        for basis, matrix in per_run[0]["similarity"].items():
            stacked = [level["similarity"][basis]["values"] for level in per_run]
            similarity[basis] = {
                "basis": basis,
                "attacks": matrix["attacks"],
                "values": np.mean(np.array(stacked, dtype=np.float64), axis=0).tolist(),
            }
        levels.append({"beta": beta, "attacks": averaged_attacks, "similarity": similarity})
    return {"kind": "average", "runs": len(reports), "fpr_levels": levels}


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return float(np.mean(present))
