import csv
import io
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .record import ExperimentBundle, GroundTruth, ScoreMatrix, validate_bundle
from .util import AuditError, AuditErrorCode, write_atomic

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


def format_float(value: float) -> str:
    # repr is the shortest string that parses back to the same double
    if np.isnan(value):
        return ""
    return repr(float(value))


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def _read_csv(path: Path) -> Tuple[List[str], List[List[str]]]:
    if not path.exists():
        raise AuditError(AuditErrorCode.MISSING_FILE, f"File {path} does not exist.", {"path": str(path)})
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if len(rows) == 0:
        raise AuditError(AuditErrorCode.PARSE_ERROR, f"{path}: missing header row", {"path": str(path), "line": 1})
    return rows[0], rows[1:]


def _parse_cell(path: Path, line: int, column: int, text: str, allow_empty: bool = False) -> float:
    if allow_empty and text.strip() == "":
        return float("nan")
    try:
        value = float(text)
    except ValueError:
        raise AuditError(
            AuditErrorCode.PARSE_ERROR,
            f"{path}:{line}:{column}: non-numeric cell {text!r}",
            {"path": str(path), "line": line, "column": column, "cell": text},
        )
    if np.isnan(value):
        raise AuditError(
            AuditErrorCode.PARSE_ERROR,
            f"{path}:{line}:{column}: NaN cell",
            {"path": str(path), "line": line, "column": column, "cell": text},
        )
    return value


def _check_width(path: Path, line: int, row: List[str], width: int):
    if len(row) != width:
        raise AuditError(
            AuditErrorCode.PARSE_ERROR,
            f"{path}:{line}: expected {width} columns, found {len(row)}",
            {"path": str(path), "line": line},
        )


def read_column(path: Path, name: str, integral: bool = False) -> np.ndarray:
    """
    Single-column CSV with header ``name``, one row per sample.
    """
    header, rows = _read_csv(path)
    if header != [name]:
        raise AuditError(
            AuditErrorCode.PARSE_ERROR, f"{path}:1: expected header {name!r}, found {header}", {"path": str(path)}
        )
    values = []
    for offset, row in enumerate(rows):
        line = offset + 2
        _check_width(path, line, row, 1)
        value = _parse_cell(path, line, 1, row[0])
        if integral and value not in (0.0, 1.0):
            raise AuditError(
                AuditErrorCode.PARSE_ERROR,
                f"{path}:{line}:1: expected 0 or 1, found {row[0]!r}",
                {"path": str(path), "line": line, "column": 1, "cell": row[0]},
            )
        values.append(value)
    return np.array(values, dtype=np.int64 if integral else np.float64)


def write_column(path: Path, name: str, values: np.ndarray, integral: bool = False):
    rows = [[str(int(v))] if integral else [format_float(v)] for v in values]
    write_atomic(path, _csv_text([name], rows))


def read_score_matrix(path: Path, attack_name: str) -> ScoreMatrix:
    """
    Header ``seed,0,1,...,n-1``; one row per instance, seed label first.
    """
    header, rows = _read_csv(path)
    if len(header) < 2 or header[0] != "seed":
        raise AuditError(AuditErrorCode.PARSE_ERROR, f"{path}:1: header must start with 'seed'", {"path": str(path)})
    width = len(header)
    seeds, values = [], []
    for offset, row in enumerate(rows):
        line = offset + 2
        _check_width(path, line, row, width)
        seeds.append(row[0])
        values.append([_parse_cell(path, line, column + 1, cell) for column, cell in enumerate(row) if column > 0])
    if len(values) == 0:
        raise AuditError(AuditErrorCode.PARSE_ERROR, f"{path}: no instance rows", {"path": str(path)})
    return ScoreMatrix(attack_name, np.array(values), seeds)


def write_score_matrix(path: Path, matrix: ScoreMatrix):
    header = ["seed"] + [str(i) for i in range(matrix.n_samples)]
    rows = [[seed] + [format_float(v) for v in row] for seed, row in zip(matrix.seed_labels, matrix.values)]
    write_atomic(path, _csv_text(header, rows))


def read_signal(path: Path) -> np.ndarray:
    """
    Vector signals use the single header ``value``; matrix signals use ``c0..c{k-1}``, one row per sample, with
    empty cells marking absent entries of ragged signals.
    """
    header, rows = _read_csv(path)
    if header == ["value"]:
        values = []
        for offset, row in enumerate(rows):
            _check_width(path, offset + 2, row, 1)
            values.append(_parse_cell(path, offset + 2, 1, row[0]))
        return np.array(values, dtype=np.float64)
    if len(header) == 0 or header != [f"c{j}" for j in range(len(header))]:
        raise AuditError(
            AuditErrorCode.PARSE_ERROR, f"{path}:1: expected header 'value' or 'c0,c1,...'", {"path": str(path)}
        )
    values = []
    for offset, row in enumerate(rows):
        line = offset + 2
        _check_width(path, line, row, len(header))
        values.append([_parse_cell(path, line, j + 1, cell, allow_empty=True) for j, cell in enumerate(row)])
    return np.array(values, dtype=np.float64).reshape(len(values), len(header))


def write_signal(path: Path, values: np.ndarray):
    if values.ndim == 1:
        write_atomic(path, _csv_text(["value"], [[format_float(v)] for v in values]))
    else:
        header = [f"c{j}" for j in range(values.shape[1])]
        write_atomic(path, _csv_text(header, [[format_float(v) for v in row] for row in values]))


def _safe_name(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def emit_bundle(bundle: ExperimentBundle, directory: Union[str, Path]) -> Path:
    """
    Writes ``bundle`` as CSV files plus a JSON manifest under ``directory`` and returns the manifest path.
    """
    directory = Path(directory)
    manifest: Dict = {
        "version": MANIFEST_VERSION,
        "n_samples": bundle.n_samples,
        "ground_truth": "ground_truth.csv",
        "attacks": {},
        "signals": {},
        "canary_mask": None,
        "metadata": bundle.metadata,
    }
    write_column(directory / "ground_truth.csv", "member", bundle.ground_truth.labels, integral=True)
    for index, (name, matrix) in enumerate(bundle.attacks.items()):
        file_name = f"scores/{index:02d}_{_safe_name(name)}.csv"
        write_score_matrix(directory / file_name, matrix)
        manifest["attacks"][name] = {"file": file_name, "seed_labels": list(matrix.seed_labels)}
    for index, (name, values) in enumerate(bundle.signals.items()):
        file_name = f"signals/{index:03d}_{_safe_name(name)}.csv"
        write_signal(directory / file_name, values)
        manifest["signals"][name] = file_name
    if bundle.canary_mask is not None:
        manifest["canary_mask"] = "canary.csv"
        write_column(directory / "canary.csv", "canary", bundle.canary_mask, integral=True)

    manifest_path = directory / MANIFEST_NAME
    # Insertion order is kept: attack order is part of the bundle
    write_atomic(manifest_path, json.dumps(manifest, indent=2) + "\n")
    log.info(f"Wrote bundle with {len(bundle.attacks)} attacks to {directory}")
    return manifest_path


def _manifest_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def load_bundle(manifest_path: Union[str, Path]) -> ExperimentBundle:
    """
    Parses the manifest and every file it references, without validating invariants.
    """
    manifest_path = _manifest_path(manifest_path)
    if not manifest_path.exists():
        raise AuditError(
            AuditErrorCode.MISSING_FILE, f"File {manifest_path} does not exist.", {"path": str(manifest_path)}
        )
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise AuditError(
            AuditErrorCode.PARSE_ERROR,
            f"{manifest_path}:{e.lineno}:{e.colno}: {e.msg}",
            {"path": str(manifest_path), "line": e.lineno, "column": e.colno},
        )
    if not isinstance(manifest, dict) or manifest.get("version") != MANIFEST_VERSION:
        raise AuditError(
            AuditErrorCode.PARSE_ERROR, f"{manifest_path}: unsupported manifest version", {"path": str(manifest_path)}
        )
    root = manifest_path.parent
    try:
        labels = read_column(root / manifest["ground_truth"], "member", integral=True)
        attacks = {}
        for name, entry in manifest["attacks"].items():
            matrix = read_score_matrix(root / entry["file"], name)
            declared = [str(label) for label in entry.get("seed_labels", matrix.seed_labels)]
            if declared != list(matrix.seed_labels):
                raise AuditError(
                    AuditErrorCode.PARSE_ERROR,
                    f"{root / entry['file']}: seed labels {list(matrix.seed_labels)} do not match manifest {declared}",
                    {"path": str(root / entry["file"])},
                )
            attacks[name] = matrix
        signals = {name: read_signal(root / file_name) for name, file_name in (manifest.get("signals") or {}).items()}
        canary: Optional[np.ndarray] = None
        if manifest.get("canary_mask"):
            canary = read_column(root / manifest["canary_mask"], "canary", integral=True)
    except (KeyError, TypeError, AttributeError) as e:
        raise AuditError(
            AuditErrorCode.PARSE_ERROR, f"{manifest_path}: malformed manifest ({e})", {"path": str(manifest_path)}
        )

    declared_samples = manifest.get("n_samples")
    if declared_samples is not None and declared_samples != len(labels):
        raise AuditError(
            AuditErrorCode.VALIDATION_FAILED,
            f"length mismatch: manifest n_samples={declared_samples}, gt={len(labels)}",
            {"path": str(manifest_path)},
        )
    return ExperimentBundle(
        ground_truth=GroundTruth(labels),
        attacks=attacks,
        signals=signals,
        canary_mask=canary,
        metadata=manifest.get("metadata") or {},
    )


def ingest(manifest_path: Union[str, Path]) -> ExperimentBundle:
    bundle = load_bundle(manifest_path)
    violations = validate_bundle(bundle)
    if violations:
        raise AuditError(
            AuditErrorCode.VALIDATION_FAILED,
            f"{len(violations)} invariant violation(s): {violations[0].message}",
            [v.to_dict() for v in violations],
        )
    log.info(f"Ingested {len(bundle.attacks)} attacks over {bundle.n_samples} samples from {manifest_path}")
    return bundle


PERFORMANCE_COLUMNS = ["attacks", "n_instances", "performance"]


def read_performance(path: Union[str, Path]) -> Dict[Tuple[Tuple[str, ...], int], float]:
    """
    Header ``attacks,n_instances,performance``; attacks of one candidate are joined with ``+``.
    """
    path = Path(path)
    header, rows = _read_csv(path)
    if header != PERFORMANCE_COLUMNS:
        raise AuditError(
            AuditErrorCode.PARSE_ERROR,
            f"{path}:1: expected header {','.join(PERFORMANCE_COLUMNS)}, found {','.join(header)}",
            {"path": str(path)},
        )
    performance = {}
    for offset, row in enumerate(rows):
        line = offset + 2
        _check_width(path, line, row, 3)
        attacks = tuple(sorted(name for name in row[0].split("+") if name))
        n_instances = _parse_cell(path, line, 2, row[1])
        if len(attacks) == 0 or n_instances < 1 or n_instances != int(n_instances):
            raise AuditError(
                AuditErrorCode.PARSE_ERROR,
                f"{path}:{line}: candidate needs at least one attack and a positive integer instance count",
                {"path": str(path), "line": line},
            )
        performance[(attacks, int(n_instances))] = _parse_cell(path, line, 3, row[2])
    return performance
