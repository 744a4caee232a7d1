"""Frame-to-frame relative pose error metrics and mode comparison tables.

For each consecutive pair of associated poses the estimated and ground-truth
relative transforms are compared: translation error is the Euclidean norm of
the difference of relative translations (reported in cm), rotation error the
angle of the relative rotation discrepancy (degrees, with the arccos argument
clamped). RMSE over all pairs matches the reporting convention of the
comparison table, including percent change versus the baseline mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DatasetFormatError,
    MismatchedDatasets,
    NoAssociation,
    TooFewPoses,
)
from .geometry import Pose, Rotation3


@dataclass
class Trajectory:
    """Time-ordered pose samples."""

    t: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        if len(self.t) != len(self.poses):
            raise ValueError("timestamp/pose count mismatch")
        if np.any(np.diff(self.t) <= 0.0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    @staticmethod
    def from_arrays(t: np.ndarray, positions: np.ndarray,
                    quats_wxyz: np.ndarray) -> "Trajectory":
        poses = [Pose(Rotation3.from_quaternion(q), p)
                 for q, p in zip(quats_wxyz, positions)]
        return Trajectory(t=t, poses=poses)

    @staticmethod
    def load_csv(path) -> "Trajectory":
        """Read `t,px,py,pz,qw,qx,qy,qz[,...]` rows (header + comments allowed)."""
        path = Path(path)
        if not path.is_file():
            raise DatasetFormatError(f"missing trajectory file: {path}")
        rows = []
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(",")
                if lineno == 1 and not _is_number(parts[0]):
                    continue  # header
                if len(parts) < 8:
                    raise DatasetFormatError(f"{path}:{lineno}: expected >= 8 columns")
                try:
                    rows.append([float(p) for p in parts[:8]])
                except ValueError:
                    raise DatasetFormatError(f"{path}:{lineno}: non-numeric field")
        if len(rows) < 2:
            raise DatasetFormatError(f"{path}: fewer than two poses")
        data = np.asarray(rows)
        return Trajectory.from_arrays(data[:, 0], data[:, 1:4], data[:, 4:8])


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def relative_pose(t_i: Pose, t_j: Pose) -> Pose:
    """Relative transform (T_i)^-1 * T_j."""
    return t_i.inverse().compose(t_j)


@dataclass
class RpeReport:
    """Frame-to-frame relative pose RMSE for one run."""

    trans_rmse_cm: float
    rot_rmse_deg: float
    trans_errors_cm: np.ndarray
    rot_errors_deg: np.ndarray
    pairs: int
    sequence: str = ""
    clamp_activations: int = 0

    @staticmethod
    def from_rmse(trans_rmse_cm: float, rot_rmse_deg: float,
                  sequence: str = "") -> "RpeReport":
        """Wrap externally published RMSE numbers (single-pair series)."""
        return RpeReport(trans_rmse_cm=trans_rmse_cm, rot_rmse_deg=rot_rmse_deg,
                         trans_errors_cm=np.array([trans_rmse_cm]),
                         rot_errors_deg=np.array([rot_rmse_deg]),
                         pairs=1, sequence=sequence)


def rpe(est: Trajectory, gt: Trajectory, assoc_tol: float = 1e-3,
        sequence: str = "") -> RpeReport:
    """Relative pose error between an estimate and ground truth.

    Estimated poses are associated to the nearest ground-truth timestamp
    within ``assoc_tol`` seconds; errors are computed over consecutive
    associated pairs.

    Raises:
        NoAssociation: no estimated pose has a ground-truth match.
        TooFewPoses: fewer than two associated poses.
    """
    idx = np.searchsorted(gt.t, est.t)
    pairs = []
    for k in range(len(est)):
        best, best_dt = None, assoc_tol
        for j in (idx[k] - 1, idx[k]):
            if 0 <= j < len(gt):
                dt = abs(gt.t[j] - est.t[k])
                if dt <= best_dt:
                    best, best_dt = j, dt
        if best is not None:
            pairs.append((k, best))
    if not pairs:
        raise NoAssociation(f"no timestamps matched within {assoc_tol} s")
    if len(pairs) < 2:
        raise TooFewPoses("need at least two associated poses")

    trans_err = np.empty(len(pairs) - 1)
    rot_err = np.empty(len(pairs) - 1)
    clamps = 0
    for n in range(len(pairs) - 1):
        (e0, g0), (e1, g1) = pairs[n], pairs[n + 1]
        rel_est = relative_pose(est.poses[e0], est.poses[e1])
        rel_gt = relative_pose(gt.poses[g0], gt.poses[g1])
        trans_err[n] = 100.0 * np.linalg.norm(rel_est.translation - rel_gt.translation)
        arg = 0.5 * (np.trace(rel_est.rotation.matrix.T @ rel_gt.rotation.matrix) - 1.0)
        if abs(arg) > 1.0:
            if abs(arg) > 1.0 + 1e-12:
                clamps += 1
            arg = max(-1.0, min(1.0, arg))
        # arccos cannot resolve angles below ~1e-7 rad; snap its slop to zero
        rot_err[n] = 0.0 if arg >= 1.0 - 1e-14 else math.degrees(math.acos(arg))

    return RpeReport(
        trans_rmse_cm=float(np.sqrt(np.mean(trans_err ** 2))),
        rot_rmse_deg=float(np.sqrt(np.mean(rot_err ** 2))),
        trans_errors_cm=trans_err, rot_errors_deg=rot_err,
        pairs=len(pairs) - 1, sequence=sequence, clamp_activations=clamps)


@dataclass
class ComparisonRow:
    mode: str
    sequence: str
    trans_rmse_cm: float
    rot_rmse_deg: float
    pairs: int
    trans_change_pct: Optional[float] = None   # vs baseline; None when absent
    rot_change_pct: Optional[float] = None


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow] = field(default_factory=list)

    def row(self, mode: str) -> ComparisonRow:
        for r in self.rows:
            if r.mode == mode:
                return r
        raise KeyError(mode)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("mode,sequence,trans_rmse_cm,rot_rmse_deg,pairs\n")
            for r in self.rows:
                fh.write(f"{r.mode},{r.sequence},{r.trans_rmse_cm:.9g},"
                         f"{r.rot_rmse_deg:.9g},{r.pairs}\n")

    def format_text(self) -> str:
        header = (f"{'mode':<10} {'sequence':<12} {'trans (cm)':>12} "
                  f"{'rot (deg)':>12} {'pairs':>7} {'d-trans %':>10} {'d-rot %':>10}")
        lines = [header, "-" * len(header)]
        for r in self.rows:
            dt = f"{r.trans_change_pct:+.1f}" if r.trans_change_pct is not None else "-"
            dr = f"{r.rot_change_pct:+.1f}" if r.rot_change_pct is not None else "-"
            lines.append(f"{r.mode:<10} {r.sequence:<12} {r.trans_rmse_cm:>12.4f} "
                         f"{r.rot_rmse_deg:>12.4f} {r.pairs:>7d} {dt:>10} {dr:>10}")
        return "\n".join(lines)


_MODE_ORDER = {"baseline": 0, "phase1": 1, "phase2": 2}


def compare(reports: dict[str, RpeReport]) -> ComparisonTable:
    """Comparison table over labeled reports from the same sequence.

    Percent-change columns are relative to the ``baseline`` entry and are
    omitted when no baseline report is present; a missing mode simply leaves
    no row.

    Raises:
        MismatchedDatasets: the reports carry different sequence labels.
    """
    if len(reports) < 2:
        raise TooFewPoses("need at least two labeled reports to compare")
    sequences = {r.sequence for r in reports.values()}
    if len(sequences) > 1:
        raise MismatchedDatasets(f"reports span different sequences: {sequences}")

    base = reports.get("baseline")
    table = ComparisonTable()
    for mode in sorted(reports, key=lambda m: (_MODE_ORDER.get(m, 99), m)):
        rep = reports[mode]
        row = ComparisonRow(mode=mode, sequence=rep.sequence,
                            trans_rmse_cm=rep.trans_rmse_cm,
                            rot_rmse_deg=rep.rot_rmse_deg, pairs=rep.pairs)
        if base is not None and base.trans_rmse_cm > 0.0 and base.rot_rmse_deg >= 0.0:
            row.trans_change_pct = 100.0 * (rep.trans_rmse_cm - base.trans_rmse_cm) \
                / base.trans_rmse_cm
            if base.rot_rmse_deg > 0.0:
                row.rot_change_pct = 100.0 * (rep.rot_rmse_deg - base.rot_rmse_deg) \
                    / base.rot_rmse_deg
        table.rows.append(row)
    return table
