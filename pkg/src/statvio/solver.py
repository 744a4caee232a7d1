"""Damped Gauss-Newton (Levenberg-Marquardt) engine over manifold variables.

Shared by PnP tracking and sliding-window bundle adjustment. Variables are
either poses (6-dof, retracted by right multiplication with ``se3_exp``),
plain vectors (additive), or landmarks (3-vectors that are additive but
eliminated from the normal equations through a per-landmark Schur
complement, keeping the dense solve at the size of the frame states).

Residual blocks come in two forms:

* generic callback blocks — arbitrary residual functions with per-variable
  Jacobians, used for IMU factors and in tests;
* reprojection batches — arrays of pinhole reprojection residuals evaluated
  and assembled with vectorized numpy; internally the solver keeps all poses
  and landmarks in stacked arrays so trial steps never rebuild per-key
  objects, which is what keeps window optimization fast enough for the
  evaluation harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericalFailure, SingularNormalEquations
from .geometry import PinholeCamera, Pose, Rotation3, se3_exp

_KIND_POSE = "pose"
_KIND_VECTOR = "vector"
_KIND_LANDMARK = "landmark"


@dataclass
class SolveOptions:
    max_iterations: int = 20
    tol: float = 1e-8                 # relative cost decrease for convergence
    cost_floor: float = 1e-20         # absolute cost treated as converged
    lm_lambda0: float = 1e-4
    lm_up: float = 10.0
    lm_down: float = 0.5
    lm_lambda_max: float = 1e10
    lm_lambda_min: float = 1e-12
    max_rejects: int = 15
    check_singular: bool = True
    singular_ratio: float = 1e-12


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str                  # converged | max-iter | stalled
    cost_trace: list = field(default_factory=list)
    dropped_observations: int = 0


@dataclass
class _Variable:
    kind: str
    value: object
    dim: int
    fixed: bool = False


class _CallbackBlock:
    """Residual block backed by a user callback.

    The callback receives the values mapping and returns
    ``(residual, {key: jacobian})``; Jacobians for fixed variables may be
    omitted. ``residual_fn``, when given, is a cheaper residual-only path
    used while testing trial steps.
    """

    def __init__(self, keys, omega, fn, residual_fn=None):
        self.keys = tuple(keys)
        self.omega = np.asarray(omega, dtype=float)
        self._fn = fn
        self._residual_fn = residual_fn

    def residual(self, values):
        if self._residual_fn is not None:
            return self._residual_fn(values)
        return self._fn(values)[0]

    def linearize(self, values):
        return self._fn(values)


class _ReprojectionBatch:
    """Stacked pinhole reprojection residuals sharing one camera model."""

    def __init__(self, cam: PinholeCamera, pose_keys: Sequence[str],
                 z: np.ndarray, omega: Optional[np.ndarray],
                 landmark_keys: Optional[Sequence[str]],
                 points: Optional[np.ndarray]):
        self.cam = cam
        self.z = np.asarray(z, dtype=float)
        n = len(self.z)
        if omega is None:
            omega = np.broadcast_to(np.eye(2), (n, 2, 2))
        self.omega = np.ascontiguousarray(omega, dtype=float)
        self.pose_keys = list(pose_keys)
        self.landmark_keys = list(landmark_keys) if landmark_keys is not None else None
        self.points = np.asarray(points, dtype=float) if points is not None else None
        if (self.landmark_keys is None) == (self.points is None):
            raise ValueError("provide exactly one of landmark_keys or points")


class Problem:
    """Nonlinear least-squares problem over pose/vector/landmark variables."""

    def __init__(self):
        self._vars: dict[str, _Variable] = {}
        self._blocks: list[_CallbackBlock] = []
        self._batches: list[_ReprojectionBatch] = []

    # -- variables ------------------------------------------------------

    def add_pose(self, key: str, value: Pose) -> None:
        self._add(key, _Variable(_KIND_POSE, value.copy(), 6))

    def add_vector(self, key: str, value: np.ndarray) -> None:
        v = np.array(value, dtype=float)
        self._add(key, _Variable(_KIND_VECTOR, v, v.size))

    def add_landmark(self, key: str, value: np.ndarray) -> None:
        v = np.array(value, dtype=float)
        if v.size != 3:
            raise ValueError("landmarks are 3-vectors")
        self._add(key, _Variable(_KIND_LANDMARK, v, 3))

    def _add(self, key, var):
        if key in self._vars:
            raise ValueError(f"duplicate variable {key!r}")
        self._vars[key] = var

    def fix(self, key: str) -> None:
        self._vars[key].fixed = True

    def value(self, key: str):
        return self._vars[key].value

    def values(self) -> dict:
        return {k: v.value for k, v in self._vars.items()}

    # -- residuals ------------------------------------------------------

    def add_residual_block(self, keys: Sequence[str], omega: np.ndarray,
                           fn: Callable, residual_fn: Callable = None) -> None:
        """Register a callback block; see :class:`_CallbackBlock`."""
        for k in keys:
            if k not in self._vars:
                raise ValueError(f"unknown variable {k!r}")
        lm_keys = [k for k in keys if self._vars[k].kind == _KIND_LANDMARK]
        if len(lm_keys) > 1:
            raise ValueError("a residual block may reference at most one landmark")
        self._blocks.append(_CallbackBlock(keys, omega, fn, residual_fn))

    def add_reprojection_batch(self, cam: PinholeCamera,
                               pose_keys: Sequence[str], z: np.ndarray,
                               omega: Optional[np.ndarray] = None,
                               landmark_keys: Optional[Sequence[str]] = None,
                               points: Optional[np.ndarray] = None) -> None:
        """Register stacked reprojection residuals.

        ``landmark_keys`` ties each observation to an optimized landmark;
        ``points`` instead treats the 3D points as constants (PnP).
        """
        for k in dict.fromkeys(pose_keys):
            if self._vars[k].kind != _KIND_POSE:
                raise ValueError(f"{k!r} is not a pose")
        if landmark_keys is not None:
            for k in dict.fromkeys(landmark_keys):
                if self._vars[k].kind != _KIND_LANDMARK:
                    raise ValueError(f"{k!r} is not a landmark")
        self._batches.append(_ReprojectionBatch(cam, pose_keys, z, omega,
                                                landmark_keys, points))

    def block_count(self) -> int:
        return len(self._blocks) + sum(len(b.z) for b in self._batches)


class _Workspace:
    """Index maps and per-batch index arrays for one solve."""

    def __init__(self, problem: Problem):
        self.problem = problem
        self.frame_keys: list[str] = []
        self.frame_offset: dict[str, int] = {}
        # every pose/landmark gets an array row, fixed or not
        self.pose_row: dict[str, int] = {}
        self.lm_row: dict[str, int] = {}
        self.free_lm: dict[str, int] = {}    # landmark key -> Schur index
        offset = 0
        for key, var in problem._vars.items():
            if var.kind == _KIND_POSE:
                self.pose_row[key] = len(self.pose_row)
            elif var.kind == _KIND_LANDMARK:
                self.lm_row[key] = len(self.lm_row)
            if var.fixed:
                continue
            if var.kind == _KIND_LANDMARK:
                self.free_lm[key] = len(self.free_lm)
            else:
                self.frame_keys.append(key)
                self.frame_offset[key] = offset
                offset += var.dim
        self.dim_frames = offset
        self.n_landmarks = len(self.free_lm)
        if self.dim_frames == 0 and self.n_landmarks == 0:
            raise ValueError("problem has no free variables")
        self.free_lm_keys = list(self.free_lm)
        # generic blocks need dict entries for any landmark keys they touch
        self.generic_lm_keys = sorted({
            k for blk in problem._blocks for k in blk.keys
            if problem._vars[k].kind == _KIND_LANDMARK})

        self.prepared = [self._prepare(b) for b in problem._batches]

    def _prepare(self, batch: _ReprojectionBatch):
        prob = self.problem
        obs_pose_row = np.array([self.pose_row[k] for k in batch.pose_keys],
                                dtype=np.intp)
        pose_free = np.array([not prob._vars[k].fixed for k in batch.pose_keys])
        obs_offset = np.array([self.frame_offset.get(k, 0) for k in batch.pose_keys],
                              dtype=np.intp)
        if batch.landmark_keys is not None:
            obs_lm_row = np.array([self.lm_row[k] for k in batch.landmark_keys],
                                  dtype=np.intp)
            lm_free = np.array([not prob._vars[k].fixed for k in batch.landmark_keys])
            obs_lm_free = np.array([self.free_lm.get(k, 0)
                                    for k in batch.landmark_keys], dtype=np.intp)
        else:
            obs_lm_row = lm_free = obs_lm_free = None
        return {"batch": batch, "pose_row": obs_pose_row, "pose_free": pose_free,
                "offset": obs_offset, "lm_row": obs_lm_row, "lm_free": lm_free,
                "lm_index": obs_lm_free}


class _State:
    """Stacked variable values plus the dict view used by callback blocks."""

    __slots__ = ("values", "rot", "trans", "lms")

    @staticmethod
    def from_problem(problem: Problem, ws: _Workspace) -> "_State":
        st = _State()
        st.values = problem.values()
        st.rot = np.stack([problem._vars[k].value.rotation.matrix
                           for k in ws.pose_row]) if ws.pose_row else np.zeros((0, 3, 3))
        st.trans = np.stack([problem._vars[k].value.translation
                             for k in ws.pose_row]) if ws.pose_row else np.zeros((0, 3))
        st.lms = np.stack([problem._vars[k].value for k in ws.lm_row]) \
            if ws.lm_row else np.zeros((0, 3))
        return st

    def retracted(self, ws: _Workspace, df: np.ndarray, dl: np.ndarray) -> "_State":
        out = _State()
        out.values = dict(self.values)
        out.rot = self.rot.copy()
        out.trans = self.trans.copy()
        for key in ws.frame_keys:
            var = ws.problem._vars[key]
            off = ws.frame_offset[key]
            step = df[off:off + var.dim]
            if var.kind == _KIND_POSE:
                pose = self.values[key].compose(se3_exp(step))
                out.values[key] = pose
                row = ws.pose_row[key]
                out.rot[row] = pose.rotation.matrix
                out.trans[row] = pose.translation
            else:
                out.values[key] = self.values[key] + step
        if ws.n_landmarks:
            out.lms = self.lms.copy()
            rows = [ws.lm_row[k] for k in ws.free_lm_keys]
            out.lms[rows] += dl
            for key in ws.generic_lm_keys:
                out.values[key] = out.lms[ws.lm_row[key]]
        else:
            out.lms = self.lms
        return out


def _batch_terms(prep, state: _State):
    """Residuals and camera-frame geometry for one prepared batch."""
    batch = prep["batch"]
    cam = batch.cam
    rot = state.rot[prep["pose_row"]]
    trans = state.trans[prep["pose_row"]]
    pts = state.lms[prep["lm_row"]] if prep["lm_row"] is not None else batch.points
    p_body = np.einsum("nji,nj->ni", rot, pts - trans)
    r_cb = cam.T_cb.rotation.matrix
    p_cam = p_body @ r_cb.T + cam.T_cb.translation
    zc = p_cam[:, 2]
    valid = zc > cam.z_min
    safe = np.where(valid, zc, 1.0)
    u = cam.fx * p_cam[:, 0] / safe + cam.cx
    v = cam.fy * p_cam[:, 1] / safe + cam.cy
    e = batch.z - np.stack([u, v], axis=1)
    return e, valid, p_body, p_cam


def _batch_cost(prep, state: _State) -> tuple[float, int]:
    e, valid, _, _ = _batch_terms(prep, state)
    we = np.einsum("nij,nj->ni", prep["batch"].omega, e)
    ewe = np.einsum("ni,ni->n", e, we)
    return float(np.sum(ewe[valid])), int(np.count_nonzero(~valid))


def evaluate_cost(problem: Problem, values: Optional[dict] = None) -> float:
    """Total cost: sum of e^T Omega e over all residual blocks."""
    if values is None:
        values = problem.values()
    cost = 0.0
    for blk in problem._blocks:
        e = blk.residual(values)
        cost += float(e @ blk.omega @ e)
    for batch in problem._batches:
        rot = np.stack([values[k].rotation.matrix for k in batch.pose_keys])
        trans = np.stack([values[k].translation for k in batch.pose_keys])
        pts = np.stack([values[k] for k in batch.landmark_keys]) \
            if batch.landmark_keys is not None else batch.points
        p_body = np.einsum("nji,nj->ni", rot, pts - trans)
        cam = batch.cam
        p_cam = p_body @ cam.T_cb.rotation.matrix.T + cam.T_cb.translation
        zc = p_cam[:, 2]
        valid = zc > cam.z_min
        safe = np.where(valid, zc, 1.0)
        e = batch.z - np.stack([cam.fx * p_cam[:, 0] / safe + cam.cx,
                                cam.fy * p_cam[:, 1] / safe + cam.cy], axis=1)
        ewe = np.einsum("ni,nij,nj->n", e, batch.omega, e)
        cost += float(np.sum(ewe[valid]))
    return cost


def _state_cost(problem: Problem, ws: _Workspace, state: _State) -> tuple[float, int]:
    cost = 0.0
    invalid = 0
    for blk in problem._blocks:
        e = blk.residual(state.values)
        cost += float(e @ blk.omega @ e)
    for prep in ws.prepared:
        c, bad = _batch_cost(prep, state)
        cost += c
        invalid += bad
    return cost, invalid


class _Linearization:
    def __init__(self, ws: _Workspace):
        d, l = ws.dim_frames, ws.n_landmarks
        self.h_ff = np.zeros((d, d))
        self.b_f = np.zeros(d)
        self.h_ll = np.zeros((l, 3, 3))
        self.b_l = np.zeros((l, 3))
        self.w = np.zeros((l, d, 3))
        self.cost = 0.0
        self.invalid = 0


def _bincount_matrix(idx: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    """Deterministic scatter-add of flat-indexed values into a flat array."""
    return np.bincount(idx.ravel(), weights=values.ravel(), minlength=size)


def _linearize(problem: Problem, ws: _Workspace, state: _State) -> _Linearization:
    lin = _Linearization(ws)
    d = ws.dim_frames

    for blk in problem._blocks:
        e, jacs = blk.linearize(state.values)
        e = np.asarray(e, dtype=float)
        lin.cost += float(e @ blk.omega @ e)
        entries = []
        lm_entry = None
        for key in blk.keys:
            var = problem._vars[key]
            if var.fixed or key not in jacs:
                continue
            j = np.asarray(jacs[key], dtype=float)
            if var.kind == _KIND_LANDMARK:
                lm_entry = (ws.free_lm[key], j)
            else:
                entries.append((ws.frame_offset[key], var.dim, j))
        we = blk.omega @ e
        for off_a, dim_a, j_a in entries:
            lin.b_f[off_a:off_a + dim_a] -= j_a.T @ we
            for off_b, dim_b, j_b in entries:
                lin.h_ff[off_a:off_a + dim_a, off_b:off_b + dim_b] += \
                    j_a.T @ blk.omega @ j_b
        if lm_entry is not None:
            li, j_l = lm_entry
            lin.h_ll[li] += j_l.T @ blk.omega @ j_l
            lin.b_l[li] -= j_l.T @ we
            for off_a, dim_a, j_a in entries:
                lin.w[li, off_a:off_a + dim_a, :] += j_a.T @ blk.omega @ j_l

    for prep in ws.prepared:
        batch = prep["batch"]
        cam = batch.cam
        e, valid, p_body, p_cam = _batch_terms(prep, state)
        lin.invalid += int(np.count_nonzero(~valid))
        omega = batch.omega
        we = np.einsum("nij,nj->ni", omega, e)
        ewe = np.einsum("ni,ni->n", e, we)
        lin.cost += float(np.sum(ewe[valid]))

        n = len(e)
        zc = np.where(valid, p_cam[:, 2], 1.0)
        j_pi = np.zeros((n, 2, 3))
        j_pi[:, 0, 0] = cam.fx / zc
        j_pi[:, 0, 2] = -cam.fx * p_cam[:, 0] / (zc * zc)
        j_pi[:, 1, 1] = cam.fy / zc
        j_pi[:, 1, 2] = -cam.fy * p_cam[:, 1] / (zc * zc)
        a = j_pi @ cam.T_cb.rotation.matrix              # (n,2,3)
        hat = np.zeros((n, 3, 3))
        hat[:, 0, 1] = -p_body[:, 2]
        hat[:, 0, 2] = p_body[:, 1]
        hat[:, 1, 0] = p_body[:, 2]
        hat[:, 1, 2] = -p_body[:, 0]
        hat[:, 2, 0] = -p_body[:, 1]
        hat[:, 2, 1] = p_body[:, 0]
        j_pose = np.concatenate([a, -np.matmul(a, hat)], axis=2)     # (n,2,6)
        rot = state.rot[prep["pose_row"]]
        j_point = -np.matmul(a, rot.transpose(0, 2, 1))              # (n,2,3)

        obs_pose_free = prep["pose_free"] & valid
        obs_off = prep["offset"]

        if np.any(obs_pose_free):
            sel = obs_pose_free
            jp = j_pose[sel]
            wjp = np.matmul(omega[sel], jp)
            jp_t = jp.transpose(0, 2, 1)
            h_blocks = np.matmul(jp_t, wjp)                     # (m,6,6)
            g_blocks = np.einsum("nji,nj->ni", jp, we[sel])     # (m,6)
            off = obs_off[sel]
            rows = off[:, None, None] + np.arange(6)[:, None]
            cols = off[:, None, None] + np.arange(6)[None, :]
            lin.h_ff += _bincount_matrix(rows * d + cols, h_blocks, d * d).reshape(d, d)
            lin.b_f -= _bincount_matrix(off[:, None] + np.arange(6), g_blocks, d)

        if prep["lm_row"] is not None:
            obs_lm = valid & prep["lm_free"]
            if np.any(obs_lm):
                sel = obs_lm
                jl = j_point[sel]
                li = prep["lm_index"][sel]
                wjl = np.matmul(omega[sel], jl)
                hll_blocks = np.matmul(jl.transpose(0, 2, 1), wjl)
                bl_blocks = np.einsum("nji,nj->ni", jl, we[sel])
                flat = (li[:, None, None] * 9 + np.arange(9).reshape(3, 3))
                lin.h_ll += _bincount_matrix(flat, hll_blocks,
                                             ws.n_landmarks * 9).reshape(-1, 3, 3)
                lin.b_l -= _bincount_matrix(li[:, None] * 3 + np.arange(3), bl_blocks,
                                            ws.n_landmarks * 3).reshape(-1, 3)

                both = obs_pose_free & obs_lm
                if np.any(both):
                    jp_t = j_pose[both].transpose(0, 2, 1)
                    wjl = np.matmul(omega[both], j_point[both])
                    w_blocks = np.matmul(jp_t, wjl)             # (m,6,3)
                    li_b = prep["lm_index"][both]
                    off_b = obs_off[both]
                    rows = off_b[:, None, None] + np.arange(6)[:, None]
                    flat = (li_b[:, None, None] * (d * 3) + rows * 3
                            + np.arange(3)[None, None, :])
                    lin.w += _bincount_matrix(flat, w_blocks,
                                              ws.n_landmarks * d * 3).reshape(-1, d, 3)

    return lin


def _schur_solve(lin: _Linearization, lam: float):
    """Solve the lambda-damped normal equations; returns (df, dl, pred)."""
    d = lin.h_ff.shape[0]
    n_lm = lin.h_ll.shape[0]
    if n_lm:
        h_ll = lin.h_ll + lam * np.eye(3)
        try:
            m_inv = np.linalg.inv(h_ll)
        except np.linalg.LinAlgError:
            return None
        wm = np.matmul(lin.w, m_inv)                               # (l,d,3)
        h_red = lin.h_ff - np.tensordot(wm, lin.w, axes=([0, 2], [0, 2]))
        b_red = lin.b_f - np.einsum("ldj,lj->d", wm, lin.b_l)
    else:
        m_inv = None
        h_red = lin.h_ff.copy()
        b_red = lin.b_f

    if d:
        h_red = h_red + lam * np.eye(d)
        try:
            df = np.linalg.solve(h_red, b_red)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(df)):
            return None
    else:
        df = np.zeros(0)

    if n_lm:
        wt_df = np.einsum("ldi,d->li", lin.w, df)
        dl = np.einsum("lij,lj->li", m_inv, lin.b_l - wt_df)
        if not np.all(np.isfinite(dl)):
            return None
    else:
        dl = np.zeros((0, 3))

    pred = float(df @ lin.b_f + np.sum(dl * lin.b_l)
                 + lam * (df @ df + np.sum(dl * dl)))
    return df, dl, pred


def _check_singular(lin: _Linearization, ws: _Workspace, ratio: float) -> None:
    # Jacobi-equilibrated rank test: mixed residual scales (e.g. tight IMU
    # weights next to pixel weights) must not mask or fake a null space.
    if not (np.all(np.isfinite(lin.h_ff)) and np.all(np.isfinite(lin.h_ll))):
        raise NumericalFailure("non-finite entries in the normal equations")
    if ws.n_landmarks:
        diag = np.einsum("lii->li", lin.h_ll)
        if np.any(diag <= 0.0):
            raise SingularNormalEquations("a landmark block is unconstrained")
        s = 1.0 / np.sqrt(diag)
        scaled = lin.h_ll * s[:, :, None] * s[:, None, :]
        eigs = np.linalg.eigvalsh(scaled)
        if eigs.min() <= ratio:
            raise SingularNormalEquations("a landmark block is rank deficient")
        m_inv = np.linalg.inv(lin.h_ll)
        wm = np.matmul(lin.w, m_inv)
        h_red = lin.h_ff - np.tensordot(wm, lin.w, axes=([0, 2], [0, 2]))
    else:
        h_red = lin.h_ff
    if h_red.shape[0]:
        h_red = 0.5 * (h_red + h_red.T)
        diag = np.diag(h_red).copy()
        if np.any(diag <= 0.0):
            raise SingularNormalEquations("a variable is unconstrained")
        s = 1.0 / np.sqrt(diag)
        try:
            eigs = np.linalg.eigvalsh(h_red * np.outer(s, s))
        except np.linalg.LinAlgError:
            return  # cannot decide; the damped solve itself will surface failures
        if eigs.min() <= ratio:
            raise SingularNormalEquations(
                f"reduced normal equations rank deficient "
                f"(equilibrated min eigenvalue {eigs.min():.3e})")


def solve(problem: Problem, opts: Optional[SolveOptions] = None) -> SolveReport:
    """Minimize the total cost; variables are updated in place.

    Raises:
        SingularNormalEquations: structurally under-constrained problem
            (detected at the first linearization).
        NumericalFailure: non-finite cost at the initial values.
    """
    opts = opts or SolveOptions()
    ws = _Workspace(problem)
    state = _State.from_problem(problem, ws)

    cost, _ = _state_cost(problem, ws, state)
    if not np.isfinite(cost):
        raise NumericalFailure("initial cost is not finite")
    report = SolveReport(initial_cost=cost, final_cost=cost, iterations=0,
                         termination="max-iter", cost_trace=[cost])

    if cost <= opts.cost_floor:
        report.termination = "converged"
        return report

    lam = opts.lm_lambda0
    for it in range(opts.max_iterations):
        lin = _linearize(problem, ws, state)
        report.dropped_observations = lin.invalid
        if it == 0 and opts.check_singular:
            _check_singular(lin, ws, opts.singular_ratio)

        accepted = False
        for _ in range(opts.max_rejects):
            sol = _schur_solve(lin, lam)
            if sol is None:
                lam = min(lam * opts.lm_up, opts.lm_lambda_max)
                continue
            df, dl, pred = sol
            trial = state.retracted(ws, df, dl)
            trial_cost, _ = _state_cost(problem, ws, trial)
            if np.isfinite(trial_cost) and trial_cost <= cost and pred > 0.0:
                state = trial
                decrease = cost - trial_cost
                cost = trial_cost
                report.cost_trace.append(cost)
                report.iterations += 1
                lam = max(lam * opts.lm_down, opts.lm_lambda_min)
                accepted = True
                if cost <= opts.cost_floor or decrease <= opts.tol * max(cost, opts.cost_floor):
                    report.termination = "converged"
                break
            lam = min(lam * opts.lm_up, opts.lm_lambda_max)
            if lam >= opts.lm_lambda_max:
                break

        if not accepted:
            report.termination = "stalled"
            break
        if report.termination == "converged":
            break

    for key, var in problem._vars.items():
        if var.kind == _KIND_LANDMARK:
            var.value = state.lms[ws.lm_row[key]].copy()
        else:
            var.value = state.values[key]
    report.final_cost = cost
    return report
