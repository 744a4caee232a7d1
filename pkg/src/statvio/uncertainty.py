"""Statistical landmark-uncertainty learning and adaptive observation weights.

The closed loop has two directions:

* forward — a landmark's learned 3x3 world covariance is pushed through the
  camera rotation and the projection Jacobian into a 2x2 pixel covariance,
  whose regularized inverse becomes the observation's information matrix;
* backward — after a window optimization converges, every observation of a
  landmark is back-projected at its optimized depth using the *measured*
  normalized image coordinate, and the spread of those positions around the
  optimized landmark (used as the mean) is the new empirical covariance.

Empirical covariances are blended with the previous estimate, floored, and
capped so that a handful of consistent observations cannot produce infinite
information and an outlier spread cannot zero a landmark's weight.

Functions operating on a "window" only rely on a small duck-typed surface:
``window.keyframes`` (ordered, each with ``id``, ``state.T_wb`` and an
``observations`` mapping of landmark id to an object with ``z``/``p_norm``)
and ``window.landmarks`` (mapping of landmark id to an object with
``position`` and ``uncertainty``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BehindCamera, DegenerateBaseline
from .geometry import (
    PinholeCamera,
    Pose,
    projection_jacobian,
    projection_jacobians,
)
from .solver import SolveReport


@dataclass
class UncertaintyConfig:
    """Tunables of the learning loop; defaults match the shipped scenarios."""

    lam: float = 1e-6            # information regularizer (px^-2)
    sigma_floor: float = 1e-3    # per-axis covariance floor (m)
    sigma_cap: float = 1.0       # per-axis covariance cap (m)
    min_obs: int = 3             # observations required before learning
    blend_prior_count: float = 5.0   # pseudo-count n0 in w = n / (n + n0)
    outer_iters: int = 2         # forward/solve/backward alternations
    trace_tol: float = 0.05      # relative trace change declaring convergence
    pixel_sigma0: float = 1.0    # pixel noise assumed by the geometric prior
    min_baseline: float = 0.01   # meters between camera centers
    initial_sigma: float = 0.05  # isotropic prior (m) used before any evidence


@dataclass
class LandmarkUncertainty:
    """Learned (or prior) 3x3 world-frame covariance of a landmark."""

    Sigma_world: np.ndarray
    source: str = "prior"        # prior | geometric | learned
    sample_count: int = 0

    def __post_init__(self):
        self.Sigma_world = np.asarray(self.Sigma_world, dtype=float)

    def trace(self) -> float:
        return float(np.trace(self.Sigma_world))


@dataclass
class AdaptiveInformation:
    """Symmetric positive-definite 2x2 observation weight (px^-2)."""

    Omega: np.ndarray

    def __post_init__(self):
        self.Omega = np.asarray(self.Omega, dtype=float)


def initial_uncertainty(cfg: UncertaintyConfig) -> LandmarkUncertainty:
    return LandmarkUncertainty(cfg.initial_sigma ** 2 * np.eye(3), "prior", 0)


def regularize_covariances(sigmas: np.ndarray, floor: float, cap: float) -> np.ndarray:
    """Clip eigenvalues of stacked 3x3 covariances to [floor^2, cap^2]."""
    sigmas = 0.5 * (sigmas + np.swapaxes(sigmas, -1, -2))
    vals, vecs = np.linalg.eigh(sigmas)
    vals = np.clip(vals, floor * floor, cap * cap)
    return np.einsum("...ij,...j,...kj->...ik", vecs, vals, vecs)


def blend_covariance(old: np.ndarray, empirical: np.ndarray, n: int,
                     n0: float) -> tuple[np.ndarray, float]:
    """Pseudo-count blend toward the empirical covariance; returns (cov, w)."""
    w = n / (n + n0)
    return (1.0 - w) * old + w * empirical, w


def propagate_to_pixel(cam: PinholeCamera, T_cw: Pose, p_world: np.ndarray,
                       Sigma_world: np.ndarray) -> np.ndarray:
    """First-order transport of a world covariance into pixel space.

    Computes ``J_pi R_cw Sigma_world R_cw^T J_pi^T`` with the projection
    Jacobian evaluated at ``T_cw * p_world``.

    Raises:
        BehindCamera: the landmark projects behind the camera.
    """
    p_cam = T_cw.act(p_world)
    j_pi = projection_jacobian(cam, p_cam)
    m = j_pi @ T_cw.rotation.matrix
    return m @ np.asarray(Sigma_world, dtype=float) @ m.T


_COND_LIMIT = 1e12
_EPS_PIXEL = 1e-9


def adaptive_information_matrices(sigma_pixel: np.ndarray, lam: float) -> np.ndarray:
    """Batched inverse-plus-regularizer over stacked 2x2 pixel covariances.

    Well-conditioned covariances are inverted directly; degenerate ones
    take the jittered path ``(Sigma + eps I)^-1``.
    """
    s = np.asarray(sigma_pixel, dtype=float)
    single = s.ndim == 2
    if single:
        s = s[None]
    s = 0.5 * (s + np.swapaxes(s, -1, -2))
    a, b, c = s[:, 0, 0], s[:, 0, 1], s[:, 1, 1]
    half_tr = 0.5 * (a + c)
    root = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    eig_min, eig_max = half_tr - root, half_tr + root
    degenerate = (eig_min <= 0.0) | (eig_min * _COND_LIMIT < eig_max)

    aa = np.where(degenerate, a + _EPS_PIXEL, a)
    cc = np.where(degenerate, c + _EPS_PIXEL, c)
    det = aa * cc - b * b
    omega = np.empty_like(s)
    omega[:, 0, 0] = cc / det + lam
    omega[:, 1, 1] = aa / det + lam
    omega[:, 0, 1] = -b / det
    omega[:, 1, 0] = -b / det
    return omega[0] if single else omega


def adaptive_information(sigma_pixel: np.ndarray, lam: float) -> AdaptiveInformation:
    """Regularized inverse of one pixel covariance (total by construction)."""
    return AdaptiveInformation(adaptive_information_matrices(sigma_pixel, lam))


def geometric_prior(cam: PinholeCamera, T_wb_first: Pose, T_wb_second: Pose,
                    p_world: np.ndarray, cfg: UncertaintyConfig) -> LandmarkUncertainty:
    """Two-view triangulation covariance used as the Phase 1 prior.

    Stacks both views' reprojection Jacobians with respect to the landmark
    and inverts the resulting information, assuming isotropic pixel noise of
    ``cfg.pixel_sigma0``.

    Raises:
        DegenerateBaseline: camera centers closer than ``cfg.min_baseline``,
            or the stacked system is not invertible.
        BehindCamera: the point is behind either view.
    """
    t_bc = cam.T_cb.inverse()
    center_a = T_wb_first.compose(t_bc).translation
    center_b = T_wb_second.compose(t_bc).translation
    if np.linalg.norm(center_a - center_b) <= cfg.min_baseline:
        raise DegenerateBaseline("camera centers nearly coincide")

    h = np.zeros((3, 3))
    for T_wb in (T_wb_first, T_wb_second):
        T_cw = cam.T_cb.compose(T_wb.inverse())
        p_cam = T_cw.act(p_world)
        j = projection_jacobian(cam, p_cam) @ T_cw.rotation.matrix  # d(pixel)/d(p_world)
        h += j.T @ j
    h /= cfg.pixel_sigma0 ** 2
    try:
        sigma = np.linalg.inv(h)
    except np.linalg.LinAlgError as exc:
        raise DegenerateBaseline("two-view information not invertible") from exc
    if not np.all(np.isfinite(sigma)):
        raise DegenerateBaseline("two-view information not invertible")
    sigma = regularize_covariances(sigma[None], cfg.sigma_floor, cfg.sigma_cap)[0]
    return LandmarkUncertainty(sigma, "geometric", 2)


# -- window-level passes ------------------------------------------------------

def _window_arrays(window, cam: PinholeCamera):
    """Flatten a window into per-observation index arrays (deterministic order).

    The index structure (which keyframe observes which landmark) is cached on
    the window object and reused until the keyframe/landmark sets change;
    poses and positions are re-stacked on every call.
    """
    kf_ids = tuple(kf.id for kf in window.keyframes)
    lm_ids = tuple(window.landmarks.keys())
    cache_key = (kf_ids, lm_ids)
    cached = getattr(window, "_obs_index_cache", None)
    if cached is not None and cached[0] == cache_key:
        index = cached[1]
    else:
        lm_index = {lid: i for i, lid in enumerate(lm_ids)}
        kf_idx, lm_idx, p_norm, frame_of_obs, lm_of_obs = [], [], [], [], []
        for ki, kf in enumerate(window.keyframes):
            for lid, obs in kf.observations.items():
                if lid not in lm_index:
                    continue
                kf_idx.append(ki)
                lm_idx.append(lm_index[lid])
                p_norm.append(obs.p_norm)
                frame_of_obs.append(kf.id)
                lm_of_obs.append(lid)
        if not kf_idx:
            return None
        index = {
            "kf_idx": np.asarray(kf_idx, dtype=np.intp),
            "lm_idx": np.asarray(lm_idx, dtype=np.intp),
            "p_norm": np.asarray(p_norm, dtype=float),
            "lm_ids": list(lm_ids),
            "frame_of_obs": frame_of_obs,
            "lm_of_obs": lm_of_obs,
        }
        try:
            window._obs_index_cache = (cache_key, index)
        except AttributeError:
            pass  # plain duck-typed windows may be read-only

    kf_rot_cw, kf_t_cw, kf_rot_wc, kf_t_wc = [], [], [], []
    for kf in window.keyframes:
        t_cw = cam.T_cb.compose(kf.state.T_wb.inverse())
        t_wc = t_cw.inverse()
        kf_rot_cw.append(t_cw.rotation.matrix)
        kf_t_cw.append(t_cw.translation)
        kf_rot_wc.append(t_wc.rotation.matrix)
        kf_t_wc.append(t_wc.translation)
    out = dict(index)
    out["rot_cw"] = np.stack(kf_rot_cw)
    out["t_cw"] = np.stack(kf_t_cw)
    out["rot_wc"] = np.stack(kf_rot_wc)
    out["t_wc"] = np.stack(kf_t_wc)
    out["positions"] = np.stack([np.asarray(window.landmarks[lid].position,
                                            dtype=float) for lid in index["lm_ids"]])
    return out


def learn_from_ba(window, cam: PinholeCamera,
                  cfg: UncertaintyConfig) -> dict[int, LandmarkUncertainty]:
    """Backward pass: empirical landmark covariances from an optimized window.

    For every landmark with at least ``cfg.min_obs`` positive-depth
    observations, each observing view back-projects the measured normalized
    coordinate at the optimized depth; the spread of those world points
    around the optimized position (divisor n, fixed mean) is blended with the
    previous covariance and clipped. Landmarks with fewer usable observations
    keep their current uncertainty and are absent from the result.
    """
    arrays = _window_arrays(window, cam)
    if arrays is None:
        return {}
    kf_idx, lm_idx = arrays["kf_idx"], arrays["lm_idx"]
    positions = arrays["positions"]
    n_lm = len(arrays["lm_ids"])

    p_lm = positions[lm_idx]
    p_cam = np.einsum("nij,nj->ni", arrays["rot_cw"][kf_idx], p_lm) + arrays["t_cw"][kf_idx]
    depth = p_cam[:, 2]
    valid = depth > 0.0

    ray = np.concatenate([arrays["p_norm"] * depth[:, None], depth[:, None]], axis=1)
    p_back = np.einsum("nij,nj->ni", arrays["rot_wc"][kf_idx], ray) + arrays["t_wc"][kf_idx]
    diff = np.where(valid[:, None], p_back - p_lm, 0.0)

    counts = np.bincount(lm_idx[valid], minlength=n_lm)
    outer = diff[:, :, None] * diff[:, None, :]
    flat = lm_idx[:, None, None] * 9 + np.arange(9).reshape(3, 3)
    sums = np.bincount(flat.ravel(), weights=outer.ravel(),
                       minlength=n_lm * 9).reshape(n_lm, 3, 3)

    updates: dict = {}
    eligible = np.flatnonzero(counts >= cfg.min_obs)
    if eligible.size == 0:
        return updates
    emp = sums[eligible] / counts[eligible][:, None, None]
    old = np.stack([np.asarray(
        window.landmarks[arrays["lm_ids"][i]].uncertainty.Sigma_world, dtype=float)
        for i in eligible])
    w = counts[eligible] / (counts[eligible] + cfg.blend_prior_count)
    blended = (1.0 - w)[:, None, None] * old + w[:, None, None] * emp
    blended = regularize_covariances(blended, cfg.sigma_floor, cfg.sigma_cap)
    for row, i in enumerate(eligible):
        updates[arrays["lm_ids"][i]] = LandmarkUncertainty(
            blended[row], "learned", int(counts[i]))
    return updates


@dataclass
class ObservationWeights:
    """Per-observation information matrices in window observation order."""

    pairs: list                 # (keyframe id, landmark id) per observation
    omega: np.ndarray           # (N,2,2)

    def as_dict(self) -> dict:
        return {p: self.omega[i] for i, p in enumerate(self.pairs)}


def _forward_weights(window, cam: PinholeCamera, cfg: UncertaintyConfig,
                     noise_floor_px: float) -> Optional["ObservationWeights"]:
    arrays = _window_arrays(window, cam)
    if arrays is None:
        return None
    kf_idx, lm_idx = arrays["kf_idx"], arrays["lm_idx"]
    p_lm = arrays["positions"][lm_idx]
    rot_cw = arrays["rot_cw"][kf_idx]
    p_cam = np.einsum("nij,nj->ni", rot_cw, p_lm) + arrays["t_cw"][kf_idx]
    valid = p_cam[:, 2] > cam.z_min
    safe = p_cam.copy()
    safe[~valid, 2] = 1.0

    j_pi = projection_jacobians(cam, safe)
    m = np.matmul(j_pi, rot_cw)
    sigmas = np.stack([np.asarray(
        window.landmarks[lid].uncertainty.Sigma_world, dtype=float)
        for lid in arrays["lm_ids"]])
    sigma_pix = np.matmul(np.matmul(m, sigmas[lm_idx]), m.transpose(0, 2, 1))
    if noise_floor_px > 0.0:
        sigma_pix = sigma_pix + (noise_floor_px ** 2) * np.eye(2)
    omega = adaptive_information_matrices(sigma_pix, cfg.lam)
    omega[~valid] = np.eye(2)
    return ObservationWeights(
        pairs=list(zip(arrays["frame_of_obs"], arrays["lm_of_obs"])), omega=omega)


def observation_information(window, cam: PinholeCamera, cfg: UncertaintyConfig,
                            noise_floor_px: float = 0.0) -> dict:
    """Forward pass: adaptive 2x2 information per (keyframe id, landmark id).

    ``noise_floor_px`` adds an isotropic pixel-noise variance to the
    propagated covariance before inversion; it is used by modes whose
    landmark covariances model only map uncertainty (static geometric
    priors), not the measurement noise itself. Learned covariances already
    contain the measurement spread, so the learning mode passes zero.

    Observations whose landmark currently projects behind the camera fall
    back to the identity weight (the solver drops them anyway if still
    invalid at its own evaluation).
    """
    weights = _forward_weights(window, cam, cfg, noise_floor_px)
    return {} if weights is None else weights.as_dict()


def pixel_covariance_rows(window, cam: PinholeCamera,
                          frames=None) -> list[tuple]:
    """(frame_id, landmark_id, s11, s12, s22) rows for CSV export.

    ``frames`` optionally restricts the export to the given keyframe ids.
    """
    arrays = _window_arrays(window, cam)
    if arrays is None:
        return []
    kf_idx, lm_idx = arrays["kf_idx"], arrays["lm_idx"]
    keep = np.ones(len(kf_idx), dtype=bool)
    if frames is not None:
        wanted = set(frames)
        keep = np.array([f in wanted for f in arrays["frame_of_obs"]])
        if not np.any(keep):
            return []
    kf_idx, lm_idx = kf_idx[keep], lm_idx[keep]
    frame_of_obs = [f for f, k in zip(arrays["frame_of_obs"], keep) if k]
    lm_of_obs = [l for l, k in zip(arrays["lm_of_obs"], keep) if k]

    p_lm = arrays["positions"][lm_idx]
    rot_cw = arrays["rot_cw"][kf_idx]
    p_cam = np.einsum("nij,nj->ni", rot_cw, p_lm) + arrays["t_cw"][kf_idx]
    valid = p_cam[:, 2] > cam.z_min
    safe = p_cam.copy()
    safe[~valid, 2] = 1.0
    j_pi = projection_jacobians(cam, safe)
    m = np.matmul(j_pi, rot_cw)
    sigmas = np.stack([np.asarray(
        window.landmarks[lid].uncertainty.Sigma_world, dtype=float)
        for lid in arrays["lm_ids"]])
    sigma_pix = np.einsum("nij,njk,nlk->nil", m, sigmas[lm_idx], m)
    rows = []
    for i, (f, l) in enumerate(zip(frame_of_obs, lm_of_obs)):
        if valid[i]:
            rows.append((f, l, float(sigma_pix[i, 0, 0]),
                         float(sigma_pix[i, 0, 1]), float(sigma_pix[i, 1, 1])))
    return rows


def multiview_geometric(window, cam: PinholeCamera,
                        cfg: UncertaintyConfig) -> dict[int, LandmarkUncertainty]:
    """Per-window geometric landmark covariances from all observing views.

    The multi-view analogue of :func:`geometric_prior`: stacks every
    observing keyframe's reprojection Jacobian under the assumed isotropic
    pixel noise and inverts the resulting information. Purely geometric (no
    measured residuals are used), recomputed from the current poses, so it
    reflects how well each landmark is currently constrained. Landmarks with
    fewer than two positive-depth observations are skipped.
    """
    arrays = _window_arrays(window, cam)
    if arrays is None:
        return {}
    kf_idx, lm_idx = arrays["kf_idx"], arrays["lm_idx"]
    n_lm = len(arrays["lm_ids"])
    p_lm = arrays["positions"][lm_idx]
    rot_cw = arrays["rot_cw"][kf_idx]
    p_cam = np.einsum("nij,nj->ni", rot_cw, p_lm) + arrays["t_cw"][kf_idx]
    valid = p_cam[:, 2] > cam.z_min
    safe = p_cam.copy()
    safe[~valid, 2] = 1.0
    j_pi = projection_jacobians(cam, safe)
    m = np.matmul(j_pi, rot_cw)
    m[~valid] = 0.0
    blocks = np.einsum("nij,nik->njk", m, m) / cfg.pixel_sigma0 ** 2
    flat = lm_idx[:, None, None] * 9 + np.arange(9).reshape(3, 3)
    h = np.bincount(flat.ravel(), weights=blocks.ravel(),
                    minlength=n_lm * 9).reshape(n_lm, 3, 3)
    counts = np.bincount(lm_idx[valid], minlength=n_lm)

    out: dict = {}
    eligible = np.flatnonzero(counts >= 2)
    if eligible.size == 0:
        return out
    try:
        sigmas = np.linalg.inv(h[eligible])
    except np.linalg.LinAlgError:
        sigmas = np.linalg.pinv(h[eligible])
    sigmas = regularize_covariances(sigmas, cfg.sigma_floor, cfg.sigma_cap)
    for row, i in enumerate(eligible):
        out[arrays["lm_ids"][i]] = LandmarkUncertainty(
            sigmas[row], "geometric", int(counts[i]))
    return out


@dataclass
class RefineReport:
    outer_iterations: int = 0
    solve_reports: list = field(default_factory=list)
    trace_changes: list = field(default_factory=list)
    learned_landmarks: int = 0


def refine_iteratively(window, cam: PinholeCamera, solve_ba: Callable,
                       cfg: UncertaintyConfig) -> RefineReport:
    """Alternate adaptive-weight construction, BA, and statistical learning.

    ``solve_ba`` receives the per-observation information mapping, must run
    one window optimization, write the optimized states/landmarks back into
    the window, and return a :class:`SolveReport`. Iteration stops after
    ``cfg.outer_iters`` rounds or when the largest relative change of any
    landmark's covariance trace drops below ``cfg.trace_tol``.
    """
    report = RefineReport()
    for _ in range(cfg.outer_iters):
        omega = observation_information(window, cam, cfg)
        solve_report = solve_ba(omega)
        if not isinstance(solve_report, SolveReport):
            raise TypeError("solve_ba must return a SolveReport")
        report.solve_reports.append(solve_report)
        report.outer_iterations += 1

        updates = learn_from_ba(window, cam, cfg)
        max_change = 0.0
        for lid, new_unc in updates.items():
            old_trace = window.landmarks[lid].uncertainty.trace()
            change = abs(new_unc.trace() - old_trace) / max(old_trace, 1e-12)
            max_change = max(max_change, change)
            window.landmarks[lid].uncertainty = new_unc
        report.trace_changes.append(max_change)
        report.learned_landmarks = len(updates)
        if max_change < cfg.trace_tol:
            break
    return report
