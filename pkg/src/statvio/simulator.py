"""Synthetic camera+IMU scenario generation and dataset replay.

Trajectories are analytic and twice differentiable, so world acceleration
and body angular velocity are exact; the accelerometer model is
``R_wb^T (a_world - g_world) + b_a + n_a`` and the gyro model
``omega_body + b_g + n_g``. Measurement noise is committed to disk so all
estimator modes consume byte-identical data.

Dataset directory layout (CSV with header rows, ``#`` comments allowed):

* ``imu.csv``            t,wx,wy,wz,ax,ay,az
* ``features.csv``       frame_id,t,landmark_id,u,v,xn,yn
* ``groundtruth.csv``    t,px,py,pz,qw,qx,qy,qz,vx,vy,vz
* ``calib.cfg``          intrinsics, T_cb (translation + w-first quaternion), gravity
* ``meta.cfg``           seed, rates, noise spec
* ``landmark_noise.csv`` landmark_id,sigma_px
* ``landmarks.csv``      true landmark positions (diagnostics only)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from . import config as cfgutil
from .errors import ConfigError, DatasetFormatError
from .geometry import PinholeCamera, Pose, Rotation3, project_points, so3_exp
from .imu import GravityModel, ImuSample

PIXEL_MODELS = ("uniform", "two-group", "log-uniform")
TRAJECTORY_KINDS = ("circle", "lissajous", "random-spline")


@dataclass
class ScenarioConfig:
    """Everything needed to synthesize one dataset deterministically."""

    kind: str = "circle"
    duration: float = 60.0
    imu_rate: int = 200
    cam_rate: int = 20
    seed: int = 1

    # landmark field
    n_landmarks: int = 300
    landmark_lo: np.ndarray = field(default_factory=lambda: np.array([-2.5, -2.5, -1.2]))
    landmark_hi: np.ndarray = field(default_factory=lambda: np.array([2.5, 2.5, 1.2]))
    max_range: float = 20.0

    # trajectory parameters (kind-specific ones are ignored by other kinds)
    radius: float = 4.0
    height: float = 0.0
    angular_rate: float = 0.5
    bob_amplitude: float = 0.15
    bob_rate: float = 1.1
    amplitude: np.ndarray = field(default_factory=lambda: np.array([1.2, 0.9, 0.4]))
    freq: np.ndarray = field(default_factory=lambda: np.array([0.23, 0.31, 0.17]))
    yaw_rate: float = 0.1
    spline_terms: int = 4

    # camera
    fx: float = 458.0
    fy: float = 457.0
    cx: float = 367.5
    cy: float = 240.0
    width: int = 752
    height_px: int = 480
    t_cb: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_cb: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    # noise
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    sigma_g: float = 1.7e-4
    sigma_a: float = 2.0e-3
    sigma_bias_rw_g: float = 0.0
    sigma_bias_rw_a: float = 0.0
    b_a0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pixel_model: str = "two-group"
    sigma_px: float = 1.0
    sigma_clean: float = 0.5
    sigma_noisy: float = 2.0
    noisy_fraction: float = 0.5
    sigma_px_min: float = 0.2
    sigma_px_max: float = 2.0

    def __post_init__(self):
        for name in ("landmark_lo", "landmark_hi", "amplitude", "freq",
                     "t_cb", "q_cb", "gravity", "b_a0", "b_g0"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.kind not in TRAJECTORY_KINDS:
            raise ConfigError(f"unknown trajectory kind {self.kind!r}")
        if self.pixel_model not in PIXEL_MODELS:
            raise ConfigError(f"unknown pixel noise model {self.pixel_model!r}")
        if self.imu_rate <= 0 or self.cam_rate <= 0:
            raise ConfigError("rates must be positive")
        if self.imu_rate % self.cam_rate != 0:
            raise ConfigError("imu_rate must be an integer multiple of cam_rate")
        if not 0.0 <= self.noisy_fraction <= 1.0:
            raise ConfigError("noisy_fraction must lie in [0, 1]")
        if self.duration <= 0.0:
            raise ConfigError("duration must be positive")

    def camera(self) -> PinholeCamera:
        return PinholeCamera(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                             width=self.width, height=self.height_px,
                             T_cb=Pose(Rotation3.from_quaternion(self.q_cb),
                                       np.asarray(self.t_cb, dtype=float)))


_SCENARIO_KEYS = {
    "kind": ("kind", str), "duration": ("duration", float),
    "imu_rate": ("imu_rate", int), "cam_rate": ("cam_rate", int),
    "seed": ("seed", int), "landmarks": ("n_landmarks", int),
    "landmark_lo": ("landmark_lo", "floats"), "landmark_hi": ("landmark_hi", "floats"),
    "max_range": ("max_range", float),
    "radius": ("radius", float), "trajectory_height": ("height", float),
    "angular_rate": ("angular_rate", float),
    "bob_amplitude": ("bob_amplitude", float), "bob_rate": ("bob_rate", float),
    "amplitude": ("amplitude", "floats"), "freq": ("freq", "floats"),
    "yaw_rate": ("yaw_rate", float), "spline_terms": ("spline_terms", int),
    "fx": ("fx", float), "fy": ("fy", float), "cx": ("cx", float), "cy": ("cy", float),
    "width": ("width", int), "height": ("height_px", int),
    "T_cb": ("_T_cb", "floats"), "gravity": ("gravity", "floats"),
    "sigma_g": ("sigma_g", float), "sigma_a": ("sigma_a", float),
    "sigma_bias_rw_g": ("sigma_bias_rw_g", float),
    "sigma_bias_rw_a": ("sigma_bias_rw_a", float),
    "b_a0": ("b_a0", "floats"), "b_g0": ("b_g0", "floats"),
    "pixel_model": ("pixel_model", str), "sigma_px": ("sigma_px", float),
    "sigma_clean": ("sigma_clean", float), "sigma_noisy": ("sigma_noisy", float),
    "noisy_fraction": ("noisy_fraction", float),
    "sigma_px_min": ("sigma_px_min", float), "sigma_px_max": ("sigma_px_max", float),
}


def scenario_from_mapping(mapping: dict[str, str]) -> ScenarioConfig:
    """Build a ScenarioConfig from parsed key-value text; unknown keys fail."""
    kwargs = {}
    for key, raw in mapping.items():
        if key not in _SCENARIO_KEYS:
            raise ConfigError(f"unknown scenario key {key!r}")
        attr, typ = _SCENARIO_KEYS[key]
        try:
            if typ is str:
                value = raw
            elif typ is int:
                value = int(raw)
            elif typ is float:
                value = float(raw)
            else:
                value = np.array([float(tok) for tok in raw.split()])
        except ValueError as exc:
            raise ConfigError(f"{key}: bad value {raw!r}") from exc
        if attr == "_T_cb":
            if value.size != 7:
                raise ConfigError("T_cb needs 7 numbers (t, quaternion wxyz)")
            kwargs["t_cb"] = value[:3]
            kwargs["q_cb"] = value[3:]
        else:
            kwargs[attr] = value
    return ScenarioConfig(**kwargs)


def load_scenario(path) -> ScenarioConfig:
    return scenario_from_mapping(cfgutil.parse_kv_file(path))


# -- analytic trajectory models -----------------------------------------------

class _TrajectoryModel:
    """Position/orientation with analytic first and second derivatives."""

    def __init__(self, cfg: ScenarioConfig, cam: PinholeCamera):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed + 17)
        if cfg.kind == "random-spline":
            k = cfg.spline_terms
            self.sp_amp = rng.uniform(0.1, 0.5, (k, 3)) * cfg.amplitude
            self.sp_freq = rng.uniform(0.1, 0.5, (k, 3)) * 2.0 * math.pi
            self.sp_phase = rng.uniform(0.0, 2.0 * math.pi, (k, 3))
        # camera initially looks at the landmark-field center from p(0)
        p0 = self.position(0.0)
        fwd = -p0
        norm = np.linalg.norm(fwd)
        fwd = fwd / norm if norm > 1e-9 else np.array([1.0, 0.0, 0.0])
        up = np.array([0.0, 0.0, -1.0])
        x = np.cross(up, fwd)
        if np.linalg.norm(x) < 1e-9:
            up = np.array([0.0, -1.0, 0.0])
            x = np.cross(up, fwd)
        x /= np.linalg.norm(x)
        y = np.cross(fwd, x)
        r_wc0 = np.stack([x, y, fwd], axis=1)
        self.r0 = r_wc0 @ cam.T_cb.rotation.matrix       # R_wb(0)
        rate = cfg.angular_rate if cfg.kind == "circle" else cfg.yaw_rate
        self.yaw_rate = rate
        self.omega_body = rate * (self.r0.T @ np.array([0.0, 0.0, 1.0]))

    def position(self, t: float) -> np.ndarray:
        cfg = self.cfg
        if cfg.kind == "circle":
            a = cfg.angular_rate * t
            return np.array([cfg.radius * math.cos(a), cfg.radius * math.sin(a),
                             cfg.height + cfg.bob_amplitude * math.sin(cfg.bob_rate * t)])
        if cfg.kind == "lissajous":
            w = 2.0 * math.pi * cfg.freq
            return cfg.amplitude * np.sin(w * t) + np.array([cfg.radius, 0.0, cfg.height])
        acc = np.sum(self.sp_amp * np.sin(self.sp_freq * t + self.sp_phase), axis=0)
        return acc + np.array([cfg.radius, 0.0, cfg.height])

    def velocity(self, t: float) -> np.ndarray:
        cfg = self.cfg
        if cfg.kind == "circle":
            a = cfg.angular_rate * t
            w = cfg.angular_rate
            return np.array([-cfg.radius * w * math.sin(a), cfg.radius * w * math.cos(a),
                             cfg.bob_amplitude * cfg.bob_rate * math.cos(cfg.bob_rate * t)])
        if cfg.kind == "lissajous":
            w = 2.0 * math.pi * cfg.freq
            return cfg.amplitude * w * np.cos(w * t)
        return np.sum(self.sp_amp * self.sp_freq
                      * np.cos(self.sp_freq * t + self.sp_phase), axis=0)

    def acceleration(self, t: float) -> np.ndarray:
        cfg = self.cfg
        if cfg.kind == "circle":
            a = cfg.angular_rate * t
            w2 = cfg.angular_rate ** 2
            return np.array([-cfg.radius * w2 * math.cos(a), -cfg.radius * w2 * math.sin(a),
                             -cfg.bob_amplitude * cfg.bob_rate ** 2 * math.sin(cfg.bob_rate * t)])
        if cfg.kind == "lissajous":
            w = 2.0 * math.pi * cfg.freq
            return -cfg.amplitude * w * w * np.sin(w * t)
        return -np.sum(self.sp_amp * self.sp_freq ** 2
                       * np.sin(self.sp_freq * t + self.sp_phase), axis=0)

    def rotation(self, t: float) -> np.ndarray:
        return so3_exp(np.array([0.0, 0.0, self.yaw_rate * t])).matrix @ self.r0


@dataclass
class GroundTruth:
    """Everything the scenario knows to be true, sampled at both rates."""

    t_imu: np.ndarray
    p_imu: np.ndarray
    v_imu: np.ndarray
    q_imu: np.ndarray
    b_a: np.ndarray
    b_g: np.ndarray
    t_cam: np.ndarray
    p_cam: np.ndarray
    v_cam: np.ndarray
    q_cam: np.ndarray
    landmarks: np.ndarray
    sigma_px: np.ndarray


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _landmark_sigmas(cfg: ScenarioConfig, rng) -> np.ndarray:
    if cfg.pixel_model == "uniform":
        return np.full(cfg.n_landmarks, cfg.sigma_px)
    if cfg.pixel_model == "two-group":
        noisy = rng.random(cfg.n_landmarks) < cfg.noisy_fraction
        return np.where(noisy, cfg.sigma_noisy, cfg.sigma_clean)
    lo, hi = math.log(cfg.sigma_px_min), math.log(cfg.sigma_px_max)
    return np.exp(rng.uniform(lo, hi, cfg.n_landmarks))


def generate(cfg: ScenarioConfig, out_dir, force: bool = False) -> GroundTruth:
    """Synthesize a dataset on disk; deterministic for a fixed config+seed.

    Raises:
        ConfigError: invalid configuration, or the output directory already
            contains a dataset and ``force`` is false.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} exists; use force to overwrite")
    out.mkdir(parents=True, exist_ok=True)

    cam = cfg.camera()
    model = _TrajectoryModel(cfg, cam)
    gravity = np.asarray(cfg.gravity, dtype=float)
    rng = np.random.default_rng(cfg.seed)

    n_imu = int(round(cfg.duration * cfg.imu_rate)) + 1
    dt = 1.0 / cfg.imu_rate
    # both grids via division so shared instants are bit-identical floats
    t_imu = np.arange(n_imu) / cfg.imu_rate
    n_frames = int(round(cfg.duration * cfg.cam_rate))
    stride = cfg.imu_rate // cfg.cam_rate
    t_cam = np.arange(n_frames) / cfg.cam_rate

    landmarks = rng.uniform(cfg.landmark_lo, cfg.landmark_hi, (cfg.n_landmarks, 3))
    sigma_px = _landmark_sigmas(cfg, rng)

    # truth at IMU rate
    p_imu = np.empty((n_imu, 3))
    v_imu = np.empty((n_imu, 3))
    q_imu = np.empty((n_imu, 4))
    rot_stack = np.empty((n_imu, 3, 3))
    for i, t in enumerate(t_imu):
        p_imu[i] = model.position(t)
        v_imu[i] = model.velocity(t)
        rot_stack[i] = model.rotation(t)
        q_imu[i] = Rotation3(rot_stack[i]).as_quaternion()

    # biases: constant start plus optional random walk
    b_a = np.tile(np.asarray(cfg.b_a0, dtype=float), (n_imu, 1))
    b_g = np.tile(np.asarray(cfg.b_g0, dtype=float), (n_imu, 1))
    if cfg.sigma_bias_rw_a > 0.0:
        b_a += np.cumsum(rng.normal(0.0, cfg.sigma_bias_rw_a * math.sqrt(dt), (n_imu, 3)),
                         axis=0)
    if cfg.sigma_bias_rw_g > 0.0:
        b_g += np.cumsum(rng.normal(0.0, cfg.sigma_bias_rw_g * math.sqrt(dt), (n_imu, 3)),
                         axis=0)

    # IMU measurements
    accel_world = np.stack([model.acceleration(t) for t in t_imu])
    specific = np.einsum("nji,nj->ni", rot_stack, accel_world - gravity)
    omega = np.tile(model.omega_body, (n_imu, 1))
    n_a = rng.normal(0.0, cfg.sigma_a / math.sqrt(dt), (n_imu, 3)) if cfg.sigma_a > 0 \
        else np.zeros((n_imu, 3))
    n_g = rng.normal(0.0, cfg.sigma_g / math.sqrt(dt), (n_imu, 3)) if cfg.sigma_g > 0 \
        else np.zeros((n_imu, 3))
    accel_meas = specific + b_a + n_a
    omega_meas = omega + b_g + n_g

    with open(out / "imu.csv", "w") as fh:
        fh.write("t,wx,wy,wz,ax,ay,az\n")
        for i in range(n_imu):
            fh.write(",".join([_fmt(t_imu[i])]
                              + [_fmt(x) for x in omega_meas[i]]
                              + [_fmt(x) for x in accel_meas[i]]) + "\n")

    with open(out / "groundtruth.csv", "w") as fh:
        fh.write("t,px,py,pz,qw,qx,qy,qz,vx,vy,vz\n")
        for i in range(n_imu):
            fh.write(",".join([_fmt(t_imu[i])]
                              + [_fmt(x) for x in p_imu[i]]
                              + [_fmt(x) for x in q_imu[i]]
                              + [_fmt(x) for x in v_imu[i]]) + "\n")

    # camera observations (visibility-culled, noise committed to disk)
    r_cb = cam.T_cb.rotation.matrix
    t_cb_vec = cam.T_cb.translation
    with open(out / "features.csv", "w") as fh:
        fh.write("frame_id,t,landmark_id,u,v,xn,yn\n")
        for f in range(n_frames):
            i = f * stride
            r_wb, p_wb = rot_stack[i], p_imu[i]
            p_body = (landmarks - p_wb) @ r_wb
            p_cam = p_body @ r_cb.T + t_cb_vec
            uv, valid = project_points(cam, p_cam)
            rng_frame_noise = rng.normal(0.0, 1.0, uv.shape)
            in_img = ((uv[:, 0] >= 0.0) & (uv[:, 0] < cam.width)
                      & (uv[:, 1] >= 0.0) & (uv[:, 1] < cam.height))
            rangeok = np.linalg.norm(p_cam, axis=1) < cfg.max_range
            vis = valid & in_img & rangeok
            uv_noisy = uv + rng_frame_noise * sigma_px[:, None]
            for j in np.flatnonzero(vis):
                xn = (uv_noisy[j, 0] - cam.cx) / cam.fx
                yn = (uv_noisy[j, 1] - cam.cy) / cam.fy
                fh.write(f"{f},{_fmt(t_cam[f])},{j},{_fmt(uv_noisy[j, 0])},"
                         f"{_fmt(uv_noisy[j, 1])},{_fmt(xn)},{_fmt(yn)}\n")

    with open(out / "calib.cfg", "w") as fh:
        fh.write("# camera intrinsics and extrinsics\n")
        fh.write(f"fx = {_fmt(cam.fx)}\nfy = {_fmt(cam.fy)}\n")
        fh.write(f"cx = {_fmt(cam.cx)}\ncy = {_fmt(cam.cy)}\n")
        fh.write(f"width = {cam.width}\nheight = {cam.height}\n")
        q_cb = cam.T_cb.rotation.as_quaternion()
        fh.write("T_cb = " + " ".join(_fmt(x) for x in
                                      list(cam.T_cb.translation) + list(q_cb)) + "\n")
        fh.write("gravity = " + " ".join(_fmt(x) for x in gravity) + "\n")

    with open(out / "meta.cfg", "w") as fh:
        fh.write("# scenario metadata\n")
        fh.write(f"kind = {cfg.kind}\nseed = {cfg.seed}\n")
        fh.write(f"duration = {_fmt(cfg.duration)}\n")
        fh.write(f"imu_rate = {cfg.imu_rate}\ncam_rate = {cfg.cam_rate}\n")
        fh.write(f"sigma_g = {_fmt(cfg.sigma_g)}\nsigma_a = {_fmt(cfg.sigma_a)}\n")
        fh.write(f"pixel_model = {cfg.pixel_model}\n")
        fh.write(f"landmarks = {cfg.n_landmarks}\n")

    with open(out / "landmark_noise.csv", "w") as fh:
        fh.write("landmark_id,sigma_px\n")
        for j in range(cfg.n_landmarks):
            fh.write(f"{j},{_fmt(sigma_px[j])}\n")

    with open(out / "landmarks.csv", "w") as fh:
        fh.write("landmark_id,x,y,z\n")
        for j in range(cfg.n_landmarks):
            fh.write(f"{j}," + ",".join(_fmt(x) for x in landmarks[j]) + "\n")

    return GroundTruth(t_imu=t_imu, p_imu=p_imu, v_imu=v_imu, q_imu=q_imu,
                       b_a=b_a, b_g=b_g, t_cam=t_cam,
                       p_cam=p_imu[::stride][:n_frames],
                       v_cam=v_imu[::stride][:n_frames],
                       q_cam=q_imu[::stride][:n_frames],
                       landmarks=landmarks, sigma_px=sigma_px)


# -- replay -------------------------------------------------------------------

@dataclass
class FrameObservations:
    """All feature observations of one camera frame, column-major."""

    frame_id: int
    t: float
    landmark_ids: np.ndarray   # (K,) int
    uv: np.ndarray             # (K,2) pixels
    p_norm: np.ndarray         # (K,2) normalized image coordinates

    def __len__(self) -> int:
        return len(self.landmark_ids)


Event = Union[ImuSample, FrameObservations]


def _load_table(path: Path, n_cols: int) -> np.ndarray:
    """Fast numeric CSV load; falls back to row parsing for precise errors."""
    if not path.is_file():
        raise DatasetFormatError(f"missing file: {path}")
    try:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # empty files are reported below
            data = np.loadtxt(path, delimiter=",", skiprows=1, comments="#", ndmin=2)
        if data.size and data.shape[1] != n_cols:
            raise ValueError("column count")
        return data.reshape(-1, n_cols)
    except DatasetFormatError:
        raise
    except Exception:
        rows = [row for _, row in _read_rows(path, n_cols)]
        return np.asarray(rows, dtype=float).reshape(-1, n_cols)


def _read_rows(path: Path, n_cols: int) -> Iterator[tuple[int, list[float]]]:
    if not path.is_file():
        raise DatasetFormatError(f"missing file: {path}")
    with open(path) as fh:
        header_seen = False
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != n_cols:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected {n_cols} columns, got {len(parts)}")
            try:
                yield lineno, [float(p) for p in parts]
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: non-numeric field")
        if not header_seen:
            raise DatasetFormatError(f"{path}: empty file")


def load_calib(dataset_dir) -> tuple[PinholeCamera, GravityModel]:
    mapping = cfgutil.parse_kv_file(Path(dataset_dir) / "calib.cfg")
    try:
        t_cb = cfgutil.as_floats(mapping, "T_cb", [0, 0, 0, 1, 0, 0, 0])
        cam = PinholeCamera(
            fx=float(mapping["fx"]), fy=float(mapping["fy"]),
            cx=float(mapping["cx"]), cy=float(mapping["cy"]),
            width=int(mapping["width"]), height=int(mapping["height"]),
            T_cb=Pose(Rotation3.from_quaternion(np.array(t_cb[3:])),
                      np.array(t_cb[:3])))
        gravity = GravityModel(np.array(cfgutil.as_floats(
            mapping, "gravity", [0.0, 0.0, -9.81])))
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"bad calib.cfg: {exc}") from exc
    return cam, gravity


def load_meta(dataset_dir) -> dict[str, str]:
    return cfgutil.parse_kv_file(Path(dataset_dir) / "meta.cfg")


def load_landmark_noise(dataset_dir) -> dict[int, float]:
    path = Path(dataset_dir) / "landmark_noise.csv"
    return {int(row[0]): row[1] for _, row in _read_rows(path, 2)}


def load_imu(dataset_dir) -> list[ImuSample]:
    path = Path(dataset_dir) / "imu.csv"
    data = _load_table(path, 7)
    if len(data) == 0:
        raise DatasetFormatError(f"{path}: no samples")
    if np.any(np.diff(data[:, 0]) <= 0.0):
        bad = int(np.flatnonzero(np.diff(data[:, 0]) <= 0.0)[0]) + 3
        raise DatasetFormatError(f"{path}:{bad}: non-increasing timestamp")
    return [ImuSample(t=row[0], omega=row[1:4], accel=row[4:7]) for row in data]


def load_frames(dataset_dir) -> list[FrameObservations]:
    path = Path(dataset_dir) / "features.csv"
    data = _load_table(path, 7)
    if len(data) == 0:
        raise DatasetFormatError(f"{path}: no feature rows")
    fids = data[:, 0].astype(int)
    order = np.argsort(fids, kind="stable")
    data, fids = data[order], fids[order]
    unique_ids, starts = np.unique(fids, return_index=True)
    bounds = list(starts) + [len(data)]
    frames = []
    for k, fid in enumerate(unique_ids):
        seg = data[bounds[k]:bounds[k + 1]]
        if np.ptp(seg[:, 1]) > 1e-12:
            raise DatasetFormatError(f"{path}: frame {fid} timestamp mismatch")
        frames.append(FrameObservations(
            frame_id=int(fid), t=float(seg[0, 1]),
            landmark_ids=seg[:, 2].astype(int),
            uv=np.ascontiguousarray(seg[:, 3:5]),
            p_norm=np.ascontiguousarray(seg[:, 5:7])))
    return frames


def replay(dataset_dir) -> Iterator[Event]:
    """Time-ordered event stream; IMU samples at a frame's timestamp precede it.

    Raises:
        DatasetFormatError: missing files or malformed rows (with location).
    """
    samples = load_imu(dataset_dir)
    frames = load_frames(dataset_dir)
    i = j = 0
    while i < len(samples) or j < len(frames):
        if j >= len(frames):
            yield samples[i]
            i += 1
        elif i >= len(samples) or frames[j].t < samples[i].t:
            yield frames[j]
            j += 1
        else:
            yield samples[i]
            i += 1


def load_groundtruth_rows(dataset_dir) -> np.ndarray:
    path = Path(dataset_dir) / "groundtruth.csv"
    rows = [row for _, row in _read_rows(path, 11)]
    if len(rows) < 2:
        raise DatasetFormatError(f"{path}: too few rows")
    return np.asarray(rows)
