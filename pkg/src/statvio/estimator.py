"""Sliding-window visual-inertial estimator with three weighting modes.

Per-frame flow: IMU samples since the previous frame are preintegrated and
propagate the last state into a seed; PnP refines the pose against the
current landmark table; every k-th frame (or on low landmark overlap with
the last keyframe) the frame becomes a keyframe, new landmarks are
triangulated, and the window is re-optimized.

Modes:

* ``baseline`` — identity information for every visual observation;
* ``phase1``  — information propagated from fixed two-view geometric priors;
* ``phase2``  — the full closed loop: adaptive information from learned
  covariances, re-learned from every converged window optimization.

The emitted trajectory contains the track-time pose of every camera frame,
so all modes are compared on the same online estimate; window refinements
influence later frames through the landmark table and the keyframe states.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import SimpleNamespace
from typing import Optional

import numpy as np

from .errors import (
    DatasetFormatError,
    InsufficientLandmarks,
    SingularNormalEquations,
    StatvioError,
)
from .geometry import PinholeCamera, Pose, Rotation3
from .imu import (
    GravityModel,
    ImuBias,
    ImuNoiseParams,
    ImuSample,
    PreintegratedImu,
    imu_residual,
    imu_residual_jacobians,
    preintegrate,
    propagate_state,
)
from .solver import Problem, SolveOptions, SolveReport, solve
from .uncertainty import (
    LandmarkUncertainty,
    UncertaintyConfig,
    adaptive_information_matrices,
    geometric_prior,
    initial_uncertainty,
    multiview_geometric,
    observation_information,
    pixel_covariance_rows,
    refine_iteratively,
)
from . import simulator as sim
from .errors import BehindCamera, DegenerateBaseline


class Mode(str, Enum):
    BASELINE = "baseline"
    PHASE1 = "phase1"
    PHASE2 = "phase2"

    @staticmethod
    def parse(name: str) -> "Mode":
        try:
            return Mode(name)
        except ValueError:
            raise StatvioError(f"unknown mode {name!r}") from None


@dataclass
class ModeConfig:
    """Which weighting/learning behavior is active (exactly one mode)."""

    mode: Mode = Mode.BASELINE

    @property
    def adaptive_weights(self) -> bool:
        return self.mode is not Mode.BASELINE

    @property
    def learns(self) -> bool:
        return self.mode is Mode.PHASE2

    def noise_floor_px(self, pixel_sigma0: float) -> float:
        """Pixel-noise variance floor for the forward pass.

        Static geometric priors describe map uncertainty only, so phase1
        adds the assumed measurement noise; learned covariances already
        absorb the measurement spread.
        """
        return pixel_sigma0 if self.mode is Mode.PHASE1 else 0.0


@dataclass
class NavState:
    """Body state: pose, world velocity, IMU biases, timestamp."""

    T_wb: Pose
    v_w: np.ndarray
    bias: ImuBias
    t: float = 0.0

    def __post_init__(self):
        self.v_w = np.asarray(self.v_w, dtype=float)

    def copy(self) -> "NavState":
        return NavState(self.T_wb.copy(), self.v_w.copy(),
                        ImuBias(self.bias.b_a.copy(), self.bias.b_g.copy()), self.t)


@dataclass
class Observation:
    frame_id: int
    landmark_id: int
    z: np.ndarray
    p_norm: np.ndarray


@dataclass
class Landmark:
    id: int
    position: np.ndarray
    uncertainty: LandmarkUncertainty


@dataclass
class Keyframe:
    id: int
    state: NavState
    observations: dict[int, Observation] = field(default_factory=dict)


@dataclass
class ImuSegment:
    pre: PreintegratedImu
    samples: list[ImuSample]


class SlidingWindow:
    """Fixed-size keyframe window with its landmark table and IMU chain."""

    def __init__(self, max_size: int = 10):
        self.max_size = max_size
        self.keyframes: list[Keyframe] = []
        self.landmarks: dict[int, Landmark] = {}
        self.segments: list[ImuSegment] = []   # between consecutive keyframes

    def __len__(self) -> int:
        return len(self.keyframes)

    def observation_count(self, landmark_id: int) -> int:
        return sum(1 for kf in self.keyframes if landmark_id in kf.observations)

    def insert_keyframe(self, state: NavState, observations: list[Observation],
                        segment: Optional[ImuSegment] = None) -> Keyframe:
        """Append a keyframe; evict the oldest once over capacity.

        Eviction deletes landmarks left with fewer than two window
        observations; the new oldest pose becomes the gauge anchor.
        """
        if self.keyframes and segment is None:
            raise ValueError("non-first keyframe needs its IMU segment")
        kf = Keyframe(id=observations[0].frame_id if observations else
                      (self.keyframes[-1].id + 1 if self.keyframes else 0),
                      state=state.copy())
        for obs in observations:
            kf.observations[obs.landmark_id] = obs
        self.keyframes.append(kf)
        if segment is not None:
            self.segments.append(segment)

        if len(self.keyframes) > self.max_size:
            self.keyframes.pop(0)
            self.segments.pop(0)
            dead = [lid for lid in self.landmarks
                    if self.observation_count(lid) < 2]
            for lid in dead:
                del self.landmarks[lid]
        return kf


@dataclass
class EstimatorConfig:
    window_size: int = 10
    keyframe_interval: int = 4
    keyframe_overlap: float = 0.6
    min_parallax_deg: float = 1.0
    min_track_landmarks: int = 4
    bias_recompute_threshold: float = 1e-3
    # Weighting floors: modeled IMU noise may not drop below the midpoint
    # integrator's discretization fidelity, or zero-noise datasets would let
    # integration error masquerade as signal and drag states off the map.
    min_sigma_g: float = 1e-4
    min_sigma_a: float = 2e-3
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    ba: SolveOptions = field(default_factory=lambda: SolveOptions(max_iterations=12))
    pnp: SolveOptions = field(default_factory=lambda: SolveOptions(
        max_iterations=10, tol=1e-10, check_singular=False))


@dataclass
class FrameResult:
    frame_id: int
    t: float
    state: NavState
    tracked: bool
    n_observations: int


class VioEstimator:
    """Single-threaded reference pipeline (track, maybe-keyframe, optimize)."""

    def __init__(self, cam: PinholeCamera, gravity: GravityModel,
                 noise: ImuNoiseParams, mode: ModeConfig,
                 config: Optional[EstimatorConfig] = None):
        self.cam = cam
        self.gravity = gravity
        self.noise = noise
        self.mode = mode
        self.config = config or EstimatorConfig()
        self.window = SlidingWindow(self.config.window_size)
        self.state: Optional[NavState] = None
        self.counters = {"learn_from_ba_calls": 0, "tracking_failures": 0,
                         "keyframes": 0, "ba_solves": 0}
        self.timing = {"tracking": [], "preintegration": [], "ba": [],
                       "learning": 0.0}
        self._frame_index = -1
        self._frames_since_kf = 0
        self._last_kf_ids: set[int] = set()
        self._kf_samples: list[ImuSample] = []
        self.uncertainty_rows: list[tuple] = []
        self.collect_uncertainty = False

    # -- tracking ---------------------------------------------------------

    def _pnp_information(self, seed: NavState, ids, points):
        """Adaptive per-observation weights for tracking (phase1/phase2)."""
        t0 = time.perf_counter()
        t_cw = self.cam.T_cb.compose(seed.T_wb.inverse())
        rot_cw = t_cw.rotation.matrix
        p_cam = points @ rot_cw.T + t_cw.translation
        valid = p_cam[:, 2] > self.cam.z_min
        safe = p_cam.copy()
        safe[~valid, 2] = 1.0
        from .geometry import projection_jacobians

        j_pi = projection_jacobians(self.cam, safe)
        m = j_pi @ rot_cw
        sigmas = np.stack([self.window.landmarks[i].uncertainty.Sigma_world
                           for i in ids])
        sigma_pix = np.einsum("nij,njk,nlk->nil", m, sigmas, m)
        floor = self.mode.noise_floor_px(self.config.uncertainty.pixel_sigma0)
        if floor > 0.0:
            sigma_pix = sigma_pix + floor ** 2 * np.eye(2)
        omega = adaptive_information_matrices(sigma_pix, self.config.uncertainty.lam)
        omega[~valid] = np.eye(2)
        self.timing["learning"] += time.perf_counter() - t0
        return omega

    def track_frame(self, frame: sim.FrameObservations, seed: NavState) -> NavState:
        """Pose-only PnP against the current landmark table.

        Raises:
            InsufficientLandmarks: fewer than the configured minimum of
                mapped landmarks are visible.
        """
        known = [(int(lid), k) for k, lid in enumerate(frame.landmark_ids)
                 if int(lid) in self.window.landmarks]
        if len(known) < self.config.min_track_landmarks:
            raise InsufficientLandmarks(
                f"{len(known)} < {self.config.min_track_landmarks} mapped landmarks")
        ids = [lid for lid, _ in known]
        rows = [k for _, k in known]
        points = np.stack([self.window.landmarks[lid].position for lid in ids])
        z = frame.uv[rows]

        omega = None
        if self.mode.adaptive_weights:
            omega = self._pnp_information(seed, ids, points)

        problem = Problem()
        problem.add_pose("T", seed.T_wb)
        problem.add_reprojection_batch(self.cam, ["T"] * len(ids), z,
                                       omega=omega, points=points)
        solve(problem, self.config.pnp)
        return NavState(T_wb=problem.value("T"), v_w=seed.v_w.copy(),
                        bias=ImuBias(seed.bias.b_a.copy(), seed.bias.b_g.copy()),
                        t=frame.t)

    # -- landmark initialization -------------------------------------------

    def _triangulate_candidates(self) -> int:
        """Two-view midpoint triangulation for landmarks seen by >= 2 keyframes."""
        window = self.window
        seen: dict[int, list[Keyframe]] = {}
        for kf in window.keyframes:
            for lid in kf.observations:
                if lid not in window.landmarks:
                    seen.setdefault(lid, []).append(kf)
        added = 0
        min_cos = math.cos(math.radians(self.config.min_parallax_deg))
        for lid, kfs in seen.items():
            if len(kfs) < 2:
                continue
            kf_a, kf_b = kfs[0], kfs[1]
            p = self._midpoint_triangulate(kf_a, kf_b, lid, min_cos)
            if p is None:
                continue
            if self.mode.adaptive_weights:
                t0 = time.perf_counter()
                try:
                    unc = geometric_prior(self.cam, kf_a.state.T_wb, kf_b.state.T_wb,
                                          p, self.config.uncertainty)
                except (DegenerateBaseline, BehindCamera):
                    unc = initial_uncertainty(self.config.uncertainty)
                self.timing["learning"] += time.perf_counter() - t0
            else:
                unc = initial_uncertainty(self.config.uncertainty)
            window.landmarks[lid] = Landmark(id=lid, position=p, uncertainty=unc)
            added += 1
        return added

    def _midpoint_triangulate(self, kf_a: Keyframe, kf_b: Keyframe,
                              lid: int, min_cos: float) -> Optional[np.ndarray]:
        t_bc = self.cam.T_cb.inverse()
        rays, centers = [], []
        for kf in (kf_a, kf_b):
            p_norm = kf.observations[lid].p_norm
            t_wc = kf.state.T_wb.compose(t_bc)
            d = t_wc.rotation.act(np.array([p_norm[0], p_norm[1], 1.0]))
            rays.append(d / np.linalg.norm(d))
            centers.append(t_wc.translation)
        d1, d2 = rays
        c1, c2 = centers
        cos_ang = abs(float(d1 @ d2))
        if cos_ang >= min_cos:
            return None  # parallax below threshold
        b = c2 - c1
        a11, a12, a22 = d1 @ d1, d1 @ d2, d2 @ d2
        det = a11 * a22 - a12 * a12
        if det < 1e-12:
            return None
        s = (a22 * (b @ d1) - a12 * (b @ d2)) / det
        u = (a12 * (b @ d1) - a11 * (b @ d2)) / det
        if s <= 0.0 or u <= 0.0:
            return None  # behind a camera
        return 0.5 * (c1 + s * d1 + c2 + u * d2)

    # -- window optimization ------------------------------------------------

    def _recompute_preintegrations(self) -> None:
        thresh = self.config.bias_recompute_threshold
        for i, seg in enumerate(self.window.segments):
            bias = self.window.keyframes[i].state.bias
            if seg.pre.bias_ref.distance(bias) > thresh:
                seg.pre = preintegrate(seg.samples, bias, self.noise)

    def _drop_degenerate_landmarks(self) -> int:
        """Remove landmarks without two positive-depth window observations.

        A badly triangulated point can end up behind its observing cameras,
        where it constrains nothing; keeping it would make the normal
        equations singular.
        """
        from .uncertainty import _window_arrays

        window = self.window
        arrays = _window_arrays(window, self.cam)
        if arrays is None:
            return 0
        p_lm = arrays["positions"][arrays["lm_idx"]]
        rot_cw = arrays["rot_cw"][arrays["kf_idx"]]
        depth = (np.einsum("nij,nj->ni", rot_cw, p_lm)
                 + arrays["t_cw"][arrays["kf_idx"]])[:, 2]
        counts = np.bincount(arrays["lm_idx"][depth > self.cam.z_min],
                             minlength=len(arrays["lm_ids"]))
        dead = [arrays["lm_ids"][i] for i in np.flatnonzero(counts < 2)]
        for lid in dead:
            del window.landmarks[lid]
        return len(dead)

    def _imu_block(self, key_ti, key_vi, key_tj, key_vj, pre: PreintegratedImu):
        gravity = self.gravity
        bias = pre.bias_ref

        def as_states(values):
            s_i = SimpleNamespace(T_wb=values[key_ti], v_w=values[key_vi], bias=bias)
            s_j = SimpleNamespace(T_wb=values[key_tj], v_w=values[key_vj], bias=bias)
            return s_i, s_j

        def fn(values):
            s_i, s_j = as_states(values)
            r, j_i, j_j = imu_residual_jacobians(s_i, s_j, pre, gravity)
            return r, {key_ti: j_i[:, 0:6], key_vi: j_i[:, 6:9],
                       key_tj: j_j[:, 0:6], key_vj: j_j[:, 6:9]}

        def residual_fn(values):
            s_i, s_j = as_states(values)
            return imu_residual(s_i, s_j, pre, gravity)

        omega = np.linalg.inv(pre.Sigma_imu)
        return (key_ti, key_vi, key_tj, key_vj), 0.5 * (omega + omega.T), fn, residual_fn

    def _window_obs_arrays(self):
        """Observation arrays for the window problem, cached per composition."""
        window = self.window
        key = (tuple(kf.id for kf in window.keyframes), tuple(window.landmarks))
        cached = getattr(window, "_ba_obs_cache", None)
        if cached is not None and cached[0] == key:
            return cached[1]
        pose_keys, lm_keys, zs, pairs = [], [], [], []
        for kf in window.keyframes:
            for lid, obs in kf.observations.items():
                if lid not in window.landmarks:
                    continue
                pose_keys.append(f"T{kf.id}")
                lm_keys.append(f"L{lid}")
                zs.append(obs.z)
                pairs.append((kf.id, lid))
        data = (pose_keys, lm_keys,
                np.asarray(zs) if zs else np.zeros((0, 2)), pairs)
        window._ba_obs_cache = (key, data)
        return data

    def _solve_window(self, omega_map) -> SolveReport:
        window = self.window
        problem = Problem()
        for kf in window.keyframes:
            problem.add_pose(f"T{kf.id}", kf.state.T_wb)
            problem.add_vector(f"v{kf.id}", kf.state.v_w)
        problem.fix(f"T{window.keyframes[0].id}")
        if len(window.keyframes) == 2:
            # a single IMU segment cannot separate scene scale from the first
            # velocity; anchor the bootstrap velocity until the chain grows
            problem.fix(f"v{window.keyframes[0].id}")
        for lid, lm in window.landmarks.items():
            problem.add_landmark(f"L{lid}", lm.position)

        pose_keys, lm_keys, zs, pairs = self._window_obs_arrays()
        if len(zs) == 0:
            raise SingularNormalEquations("window has no usable observations")
        omegas = None
        if omega_map is not None:
            omegas = np.stack([omega_map[p] for p in pairs])
        problem.add_reprojection_batch(self.cam, pose_keys, zs, omega=omegas,
                                       landmark_keys=lm_keys)

        for i, seg in enumerate(window.segments):
            kf_i, kf_j = window.keyframes[i], window.keyframes[i + 1]
            keys, omega, fn, residual_fn = self._imu_block(
                f"T{kf_i.id}", f"v{kf_i.id}", f"T{kf_j.id}", f"v{kf_j.id}", seg.pre)
            problem.add_residual_block(keys, omega, fn, residual_fn)

        report = solve(problem, self.config.ba)
        self.counters["ba_solves"] += 1

        for kf in window.keyframes:
            kf.state.T_wb = problem.value(f"T{kf.id}")
            kf.state.v_w = problem.value(f"v{kf.id}")
        for lid, lm in window.landmarks.items():
            lm.position = problem.value(f"L{lid}")
        return report

    def optimize_window(self) -> Optional[SolveReport]:
        """Run the mode-appropriate window optimization; update the window.

        Returns the (last) solve report, or None when fewer than two
        keyframes are present.
        """
        window = self.window
        if len(window) < 2:
            return None
        t0 = time.perf_counter()
        self._recompute_preintegrations()
        self._drop_degenerate_landmarks()

        unc_cfg = self.config.uncertainty
        if self.mode.learns:
            solver_wall = [0.0]

            def solve_ba(omega_map):
                t_s = time.perf_counter()
                rep = self._solve_window(omega_map)
                solver_wall[0] += time.perf_counter() - t_s
                return rep

            t_learn0 = time.perf_counter()
            refine = refine_iteratively(window, self.cam, solve_ba, unc_cfg)
            self.counters["learn_from_ba_calls"] += refine.outer_iterations
            report = refine.solve_reports[-1]
            # solver time inside the loop is not learning overhead
            learn_wall = (time.perf_counter() - t_learn0) - solver_wall[0]
            self.timing["learning"] += max(learn_wall, 0.0)
        elif self.mode.adaptive_weights:
            t_learn0 = time.perf_counter()
            for lid, unc in multiview_geometric(window, self.cam, unc_cfg).items():
                window.landmarks[lid].uncertainty = unc
            omega_map = observation_information(
                window, self.cam, unc_cfg,
                noise_floor_px=self.mode.noise_floor_px(unc_cfg.pixel_sigma0))
            self.timing["learning"] += time.perf_counter() - t_learn0
            report = self._solve_window(omega_map)
        else:
            report = self._solve_window(None)

        self.timing["ba"].append(time.perf_counter() - t0)

        if self.collect_uncertainty and window.keyframes:
            # diagnostics export, not part of the estimation loop's budget
            newest = window.keyframes[-1].id
            rows = pixel_covariance_rows(window, self.cam, frames=(newest,))
            self.uncertainty_rows.extend(rows)
        return report

    # -- frame pipeline -------------------------------------------------------

    def initialize(self, state: NavState, frame: sim.FrameObservations) -> None:
        self.state = state.copy()
        obs = _frame_to_observations(frame)
        self.window.insert_keyframe(self.state, obs, segment=None)
        self._frame_index = 0
        self._frames_since_kf = 0
        self._last_kf_ids = set(int(i) for i in frame.landmark_ids)
        self._kf_samples = []
        self.counters["keyframes"] += 1

    def process_frame(self, frame: sim.FrameObservations,
                      segment_samples: list[ImuSample]) -> FrameResult:
        """Track one camera frame; possibly promote it to a keyframe."""
        if self.state is None:
            raise StatvioError("estimator not initialized")
        self._frame_index += 1
        self._frames_since_kf += 1

        t0 = time.perf_counter()
        pre = preintegrate(segment_samples, self.state.bias, self.noise)
        seed = propagate_state(self.state, pre, self.gravity)
        seed.t = frame.t
        self.timing["preintegration"].append(time.perf_counter() - t0)
        self._kf_samples = _merge_samples(self._kf_samples, segment_samples)

        t0 = time.perf_counter()
        tracked = True
        try:
            state = self.track_frame(frame, seed)
        except (InsufficientLandmarks, SingularNormalEquations):
            self.counters["tracking_failures"] += 1
            tracked = False
            state = seed
        self.timing["tracking"].append(time.perf_counter() - t0)
        self.state = state.copy()

        result = FrameResult(frame_id=frame.frame_id, t=frame.t,
                             state=state.copy(), tracked=tracked,
                             n_observations=len(frame))

        if self._keyframe_due(frame):
            self._promote_keyframe(frame)
        return result

    def _keyframe_due(self, frame: sim.FrameObservations) -> bool:
        if self._frames_since_kf >= self.config.keyframe_interval:
            return True
        current = set(int(i) for i in frame.landmark_ids)
        if not self._last_kf_ids:
            return True
        overlap = len(current & self._last_kf_ids) / len(self._last_kf_ids)
        return overlap < self.config.keyframe_overlap

    def _promote_keyframe(self, frame: sim.FrameObservations) -> None:
        pre = preintegrate(self._kf_samples, self.state.bias, self.noise)
        segment = ImuSegment(pre=pre, samples=list(self._kf_samples))
        self.window.insert_keyframe(self.state, _frame_to_observations(frame),
                                    segment=segment)
        self.counters["keyframes"] += 1
        self._frames_since_kf = 0
        self._last_kf_ids = set(int(i) for i in frame.landmark_ids)
        self._kf_samples = self._kf_samples[-1:]

        self._triangulate_candidates()
        self.optimize_window()
        # continue from the refined newest keyframe state
        refined = self.window.keyframes[-1].state
        self.state = refined.copy()


def _frame_to_observations(frame: sim.FrameObservations) -> list[Observation]:
    return [Observation(frame_id=frame.frame_id, landmark_id=int(frame.landmark_ids[k]),
                        z=frame.uv[k], p_norm=frame.p_norm[k])
            for k in range(len(frame))]


def _merge_samples(acc: list[ImuSample], new: list[ImuSample]) -> list[ImuSample]:
    if not acc:
        return list(new)
    out = list(acc)
    for s in new:
        if s.t > out[-1].t + 1e-12:
            out.append(s)
    return out


# -- sequence driver -----------------------------------------------------------

@dataclass
class RunResult:
    mode: str
    dataset: str
    frames: list[FrameResult]
    timing: dict
    counters: dict
    landmark_uncertainties: dict[int, LandmarkUncertainty]
    uncertainty_rows: list[tuple]

    def trajectory_rows(self) -> list[str]:
        rows = []
        for fr in self.frames:
            q = fr.state.T_wb.rotation.as_quaternion()
            p = fr.state.T_wb.translation
            v = fr.state.v_w
            vals = [fr.t, p[0], p[1], p[2], q[0], q[1], q[2], q[3], v[0], v[1], v[2]]
            rows.append(",".join(format(float(x), ".17g") for x in vals))
        return rows

    def write(self, out_dir, config_echo: Optional[dict] = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "trajectory.csv", "w") as fh:
            fh.write("t,px,py,pz,qw,qx,qy,qz,vx,vy,vz\n")
            fh.write("\n".join(self.trajectory_rows()) + "\n")
        with open(out / "timing.json", "w") as fh:
            json.dump(self.timing, fh, indent=2)
            fh.write("\n")
        if self.uncertainty_rows:
            with open(out / "uncertainty.csv", "w") as fh:
                fh.write("frame_id,landmark_id,s11,s12,s22\n")
                for r in self.uncertainty_rows:
                    fh.write(f"{r[0]},{r[1]},{r[2]:.9g},{r[3]:.9g},{r[4]:.9g}\n")
        if self.landmark_uncertainties:
            with open(out / "landmark_uncertainty.csv", "w") as fh:
                fh.write("landmark_id,source,sample_count,trace,"
                         "s11,s12,s13,s22,s23,s33\n")
                for lid in sorted(self.landmark_uncertainties):
                    unc = self.landmark_uncertainties[lid]
                    s = unc.Sigma_world
                    fh.write(f"{lid},{unc.source},{unc.sample_count},"
                             f"{np.trace(s):.9g},{s[0, 0]:.9g},{s[0, 1]:.9g},"
                             f"{s[0, 2]:.9g},{s[1, 1]:.9g},{s[1, 2]:.9g},"
                             f"{s[2, 2]:.9g}\n")
        meta = {"mode": self.mode, "dataset": self.dataset,
                "frames": len(self.frames), "counters": self.counters}
        if config_echo:
            meta["config"] = config_echo
        with open(out / "run.json", "w") as fh:
            json.dump(meta, fh, indent=2)
            fh.write("\n")


def _timing_summary(timing: dict) -> dict:
    out = {}
    for stage in ("tracking", "preintegration", "ba"):
        xs = timing[stage]
        out[stage] = {
            "count": len(xs),
            "mean_ms": 1e3 * float(np.mean(xs)) if xs else 0.0,
            "max_ms": 1e3 * float(np.max(xs)) if xs else 0.0,
            "total_ms": 1e3 * float(np.sum(xs)),
        }
    ba_total = sum(timing["ba"])
    out["learning"] = {
        "total_ms": 1e3 * timing["learning"],
        "fraction_of_ba": (timing["learning"] / ba_total) if ba_total > 0 else 0.0,
    }
    return out


def run_sequence(dataset_dir, mode, config: Optional[EstimatorConfig] = None,
                 collect_uncertainty: Optional[bool] = None) -> RunResult:
    """Run the estimator over a dataset directory; deterministic per config.

    Raises:
        DatasetFormatError: the dataset is missing files or malformed.
    """
    dataset_dir = str(dataset_dir)
    mode_cfg = ModeConfig(Mode.parse(mode) if isinstance(mode, str) else mode)
    config = config or EstimatorConfig()

    cam, gravity = sim.load_calib(dataset_dir)
    meta = sim.load_meta(dataset_dir)
    noise = ImuNoiseParams(
        sigma_g=max(float(meta.get("sigma_g", 1.7e-4)), config.min_sigma_g),
        sigma_a=max(float(meta.get("sigma_a", 2.0e-3)), config.min_sigma_a))
    gt_rows = sim.load_groundtruth_rows(dataset_dir)

    estimator = VioEstimator(cam, gravity, noise, mode_cfg, config)
    estimator.collect_uncertainty = (mode_cfg.learns if collect_uncertainty is None
                                     else collect_uncertainty)

    frames_out: list[FrameResult] = []
    buffer: list[ImuSample] = []
    initialized = False

    for event in sim.replay(dataset_dir):
        if isinstance(event, ImuSample):
            buffer.append(event)
            continue
        frame = event
        if not initialized:
            idx = int(np.argmin(np.abs(gt_rows[:, 0] - frame.t)))
            if abs(gt_rows[idx, 0] - frame.t) > 1e-3:
                raise DatasetFormatError("no ground-truth row near the first frame")
            row = gt_rows[idx]
            state = NavState(T_wb=Pose(Rotation3.from_quaternion(row[4:8]), row[1:4]),
                             v_w=row[8:11], bias=ImuBias(), t=frame.t)
            estimator.initialize(state, frame)
            frames_out.append(FrameResult(frame.frame_id, frame.t, state.copy(),
                                          True, len(frame)))
            buffer = [s for s in buffer if s.t >= frame.t - 1e-6]
            initialized = True
            continue

        segment = [s for s in buffer if s.t <= frame.t + 1e-6]
        leftover = [s for s in buffer if s.t > frame.t + 1e-6]
        frames_out.append(estimator.process_frame(frame, segment))
        buffer = segment[-1:] + leftover

    if not initialized:
        raise DatasetFormatError("dataset contains no camera frames")

    final_unc = {lid: lm.uncertainty for lid, lm in
                 estimator.window.landmarks.items()}
    return RunResult(mode=str(mode_cfg.mode.value), dataset=dataset_dir,
                     frames=frames_out, timing=_timing_summary(estimator.timing),
                     counters=dict(estimator.counters),
                     landmark_uncertainties=final_unc,
                     uncertainty_rows=list(estimator.uncertainty_rows))
