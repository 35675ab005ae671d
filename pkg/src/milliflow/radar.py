"""Stepped-frequency radar forward model.

The chain per frame: body reflectors -> complex array response cube ->
sliding-window clutter removal -> range/angle FFT heatmap -> CA-CFAR peaks ->
3D point cloud with intensities, visibility dropout and multipath ghosts.

Conventions: the radar sits at the origin of a right-handed x-right /
y-forward / z-up frame.  The virtual uniform rectangular array is spaced at
half the center-frequency wavelength; direction cosines are u = x/R (azimuth
axis) and v = z/R (elevation axis).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from ._kernels import cfar_mask, knn_indices
from .errors import ConfigError
from .geometry import rotation_between
from .skeleton import SkeletonModel, SkeletonPose

SPEED_OF_LIGHT = 3.0e8  # m/s


@dataclass(frozen=True)
class CfarParams:
    # wide guard band: the body spans several adjacent range bins, and a
    # narrow one lets body cells inflate the training mean and mask each other
    train_cells: int = 8
    guard_cells: int = 6
    scale_factor: float = 5.0


@dataclass(frozen=True)
class RadarConfig:
    f_min: float = 62.0e9
    f_max: float = 63.6e9
    n_freq_steps: int = 151
    n_az: int = 20
    n_el: int = 16
    cfar: CfarParams = field(default_factory=CfarParams)
    ghost_prob: float = 0.05
    visibility_half_angle: float = 1.4  # radians
    reflectors_per_bone: int = 14
    snr_db: float | None = 20.0  # None disables receiver noise
    # per-frame reflector jitter; 1 mm is several wavelengths of phase at
    # 62 GHz, so nominally static body parts decorrelate across the clutter
    # window and survive mean subtraction (nobody holds a limb sub-mm still)
    micro_motion_std: float = 1.0e-3
    pad_factor: int = 2

    def __post_init__(self):
        if self.f_max <= self.f_min:
            raise ConfigError("f_max must exceed f_min")
        if self.n_freq_steps < 2:
            raise ConfigError("need at least 2 frequency steps")

    @property
    def bandwidth(self) -> float:
        return self.f_max - self.f_min

    @property
    def freq_step(self) -> float:
        return self.bandwidth / (self.n_freq_steps - 1)

    @property
    def center_freq(self) -> float:
        return 0.5 * (self.f_min + self.f_max)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.center_freq

    @property
    def element_spacing(self) -> float:
        return 0.5 * self.wavelength

    @property
    def range_resolution(self) -> float:
        return SPEED_OF_LIGHT / (2.0 * self.bandwidth)

    @property
    def max_range(self) -> float:
        return SPEED_OF_LIGHT / (2.0 * self.freq_step)

    @property
    def n_virtual_pairs(self) -> int:
        return self.n_az * self.n_el

    @property
    def frequencies(self) -> np.ndarray:
        return self.f_min + self.freq_step * np.arange(self.n_freq_steps)


def default_vayyar_config() -> RadarConfig:
    """62-63.6 GHz, 151 steps, 20x16 virtual array: 9.375 cm bins, ~14 m reach."""
    return RadarConfig()


@dataclass(frozen=True)
class Reflectors:
    """Point scatterers attached to skeleton bones."""

    positions: np.ndarray  # (K, 3)
    reflectivities: np.ndarray  # (K,)
    normals: np.ndarray  # (K, 3) unit outward
    bone_index: np.ndarray  # (K,) int

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, mask: np.ndarray) -> "Reflectors":
        return Reflectors(
            self.positions[mask],
            self.reflectivities[mask],
            self.normals[mask],
            self.bone_index[mask],
        )


@dataclass(frozen=True)
class RadarFrame:
    points: np.ndarray  # (N, 3)
    intensities: np.ndarray  # (N,)
    frame_index: int
    timestamp: float
    prov_bone: np.ndarray | None = None  # (N,) generating bone, -1 for ghosts

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx: np.ndarray) -> "RadarFrame":
        prov = None if self.prov_bone is None else self.prov_bone[idx]
        return replace(
            self,
            points=self.points[idx],
            intensities=self.intensities[idx],
            prov_bone=prov,
        )


def bone_frame(parent: np.ndarray, child: np.ndarray, rest_axis: np.ndarray,
                rest_e1: np.ndarray, rest_e2: np.ndarray):
    """Transport the rest-pose bone triad onto the current bone direction."""
    axis = child - parent
    length = np.linalg.norm(axis)
    axis = axis / length
    r = rotation_between(rest_axis, axis)
    return axis, length, r @ rest_e1, r @ rest_e2


def rest_triads(model: SkeletonModel):
    triads = []
    for p, c in model.bones:
        axis = model.rest_keypoints[c] - model.rest_keypoints[p]
        axis = axis / np.linalg.norm(axis)
        probe = np.array([1.0, 0.0, 0.0])
        if abs(axis[0]) > 0.9:
            probe = np.array([0.0, 1.0, 0.0])
        e1 = np.cross(axis, probe)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        triads.append((axis, e1, e2))
    return triads


def sample_bone_local_reflectors(model: SkeletonModel, cfg: RadarConfig, seed: int):
    """Material reflector coordinates (t along bone, angle around it) per bone.

    Drawing these once per subject keeps reflector identity stable across
    frames, so exact per-reflector motion is available for ground truth.
    """
    rng = np.random.default_rng(seed)
    n = cfg.reflectors_per_bone
    t = rng.uniform(0.0, 1.0, size=(13, n))
    psi = rng.uniform(0.0, 2.0 * np.pi, size=(13, n))
    radial = rng.uniform(0.85, 1.0, size=(13, n))  # just under the envelope
    return t, psi, radial


def place_reflectors(
    model: SkeletonModel,
    pose: SkeletonPose,
    local_coords,
    jitter_std: float = 0.0,
    jitter_seed: int = 0,
) -> Reflectors:
    """Map bone-local reflector coordinates into the world for one pose."""
    t, psi, radial = local_coords
    n = t.shape[1]
    triads = rest_triads(model)
    positions = np.empty((13 * n, 3))
    normals = np.empty((13 * n, 3))
    reflectivities = np.empty(13 * n)
    bone_index = np.empty(13 * n, dtype=np.int64)
    kp = pose.keypoints
    for b, (p, c) in enumerate(model.bones):
        rest_axis, rest_e1, rest_e2 = triads[b]
        axis, length, e1, e2 = bone_frame(kp[p], kp[c], rest_axis, rest_e1, rest_e2)
        radius = model.body_radius_per_bone[b] * radial[b]
        outward = np.cos(psi[b])[:, None] * e1 + np.sin(psi[b])[:, None] * e2
        sl = slice(b * n, (b + 1) * n)
        positions[sl] = kp[p] + t[b][:, None] * (length * axis) + radius[:, None] * outward
        normals[sl] = outward
        # scaled so a detected body cell clears the downstream intensity
        # floor of 0.5 even after clutter-removal and straddle losses
        reflectivities[sl] = model.body_radius_per_bone[b] / 0.0125
        bone_index[sl] = b
    if jitter_std > 0.0:
        rng = np.random.default_rng(jitter_seed)
        positions = positions + rng.normal(0.0, jitter_std, size=positions.shape)
    return Reflectors(positions, reflectivities, normals, bone_index)


def sample_reflectors(
    pose: SkeletonPose, model: SkeletonModel, cfg: RadarConfig, seed: int
) -> Reflectors:
    """Reflectors for a single pose; same seed gives the same material points."""
    return place_reflectors(model, pose, sample_bone_local_reflectors(model, cfg, seed))


def visibility_filter(
    reflectors: Reflectors, sensor_origin: np.ndarray, half_angle: float
) -> Reflectors:
    """Keep reflectors whose outward normal faces the sensor within half_angle."""
    to_sensor = np.asarray(sensor_origin)[None, :] - reflectors.positions
    to_sensor = to_sensor / np.linalg.norm(to_sensor, axis=1, keepdims=True)
    cosang = np.sum(reflectors.normals * to_sensor, axis=1)
    return reflectors.subset(cosang >= np.cos(half_angle) - 1e-12)


def synthesize_cube(
    reflectors: Reflectors, cfg: RadarConfig, seed: int = 0
) -> np.ndarray:
    """Complex response cube of shape (n_az, n_el, n_freq_steps).

    Each reflector contributes a range phase ramp over the frequency steps and
    a URA steering vector over the two array axes; receiver noise is complex
    Gaussian at cfg.snr_db relative to mean signal power.
    """
    shape = (cfg.n_az, cfg.n_el, cfg.n_freq_steps)
    cube = np.zeros(shape, dtype=np.complex128)
    if len(reflectors) > 0:
        pos = reflectors.positions
        r = np.linalg.norm(pos, axis=1)
        u = pos[:, 0] / r
        v = pos[:, 2] / r
        k_wave = 2.0 * np.pi / cfg.wavelength
        d = cfg.element_spacing
        phase_range = np.exp(
            -1j * (2.0 * np.pi * 2.0 / SPEED_OF_LIGHT) * np.outer(r, cfg.frequencies)
        )
        phase_az = np.exp(-1j * k_wave * d * np.outer(u, np.arange(cfg.n_az)))
        phase_el = np.exp(-1j * k_wave * d * np.outer(v, np.arange(cfg.n_el)))
        weighted = reflectors.reflectivities[:, None] * phase_az
        cube = np.einsum("ka,ke,km->aem", weighted, phase_el, phase_range, optimize=True)
    if cfg.snr_db is not None:
        rng = np.random.default_rng(seed)
        sig_power = np.mean(np.abs(cube) ** 2) if len(reflectors) else 1.0
        noise_power = sig_power / (10.0 ** (cfg.snr_db / 10.0))
        sigma = np.sqrt(noise_power / 2.0)
        cube = cube + sigma * (
            rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        )
    return cube


def clutter_removal(cubes: list[np.ndarray]) -> np.ndarray:
    """Subtract the per-cell window mean from the newest cube."""
    if len(cubes) < 2:
        raise ConfigError("clutter removal needs a window of at least 2 cubes")
    stack = np.stack(cubes)
    return stack[-1] - stack.mean(axis=0)


def heatmap(cube: np.ndarray, cfg: RadarConfig) -> np.ndarray:
    """Magnitude spectrum over (range, azimuth, elevation), zero-padded 2x.

    The synthesis phase convention uses negative exponents, so the cube is
    conjugated before the forward FFT; angle axes are shifted to center zero
    spatial frequency.
    """
    p = cfg.pad_factor
    spec = np.fft.fftn(
        np.conj(cube),
        s=(p * cfg.n_az, p * cfg.n_el, p * cfg.n_freq_steps),
        axes=(0, 1, 2),
    )
    spec = np.fft.fftshift(spec, axes=(0, 1))
    mag = np.abs(spec) / (cfg.n_az * cfg.n_el * cfg.n_freq_steps)
    return mag.transpose(2, 0, 1)  # (range, az, el)


def range_axis(cfg: RadarConfig) -> np.ndarray:
    n = cfg.pad_factor * cfg.n_freq_steps
    return np.arange(n) * SPEED_OF_LIGHT / (2.0 * cfg.freq_step * n)


def _direction_cosine_axis(n_elements: int, pad_factor: int, cfg: RadarConfig) -> np.ndarray:
    n = pad_factor * n_elements
    spatial_freq = (np.arange(n) - n // 2) / n  # cycles per element after shift
    return spatial_freq * cfg.wavelength / cfg.element_spacing


def azimuth_cosine_axis(cfg: RadarConfig) -> np.ndarray:
    return _direction_cosine_axis(cfg.n_az, cfg.pad_factor, cfg)


def elevation_cosine_axis(cfg: RadarConfig) -> np.ndarray:
    return _direction_cosine_axis(cfg.n_el, cfg.pad_factor, cfg)


def cfar_detect(hm: np.ndarray, cfar: CfarParams) -> np.ndarray:
    """CA-CFAR along range plus 3x3x3 local-maximum suppression.

    Returns a (D, 4) array of (range_bin, az_bin, el_bin, intensity) rows in
    lexicographic bin order.
    """
    if cfar.train_cells < 1:
        raise ConfigError("train_cells must be >= 1")
    if cfar.scale_factor <= 0:
        raise ConfigError("scale_factor must be positive")
    detected = cfar_mask(hm, cfar.train_cells, cfar.guard_cells, cfar.scale_factor)
    local_max = hm >= ndimage.maximum_filter(hm, size=3, mode="constant", cval=0.0)
    cells = np.argwhere(detected & local_max)
    values = hm[tuple(cells.T)] if len(cells) else np.empty(0)
    return np.column_stack([cells.astype(np.float64), values]) if len(cells) else np.empty((0, 4))


def to_point_cloud(
    detections: np.ndarray,
    cfg: RadarConfig,
    ghost_prob: float,
    seed: int,
    frame_index: int = 0,
    timestamp: float = 0.0,
    reflectors: Reflectors | None = None,
) -> RadarFrame:
    """Convert CFAR cells to Cartesian points; optionally append ghosts.

    Cells whose direction cosines fall outside the unit disk have no physical
    direction and are dropped.  Each kept point spawns, with probability
    ghost_prob, a range-extended ghost with attenuated intensity.  When the
    generating reflectors are passed in, every real point is tagged with the
    bone of its nearest reflector and ghosts are tagged -1; otherwise the
    frame carries no provenance.
    """
    ranges = range_axis(cfg)
    u_ax = azimuth_cosine_axis(cfg)
    v_ax = elevation_cosine_axis(cfg)
    pts, intens = [], []
    for rb, ab, eb, val in detections:
        r = ranges[int(rb)]
        u = u_ax[int(ab)]
        v = v_ax[int(eb)]
        w2 = 1.0 - u * u - v * v
        if w2 <= 0.0 or r <= 0.0:
            continue
        pts.append((r * u, r * np.sqrt(w2), r * v))
        intens.append(val)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    intens = np.asarray(intens, dtype=np.float64)

    prov = None
    if reflectors is not None and len(reflectors) > 0:
        if len(pts):
            nearest = knn_indices(pts, reflectors.positions, 1)[:, 0]
            prov = reflectors.bone_index[nearest]
        else:
            prov = np.empty(0, dtype=np.int64)

    rng = np.random.default_rng(seed)
    ghost_pts, ghost_int = [], []
    for i in range(len(pts)):
        if rng.uniform() < ghost_prob:
            stretch = 1.0 + rng.uniform(0.15, 0.5)
            ghost_pts.append(pts[i] * stretch)
            ghost_int.append(intens[i] * rng.uniform(0.3, 0.7))
    if ghost_pts:
        pts = np.vstack([pts, ghost_pts])
        intens = np.concatenate([intens, ghost_int])
        if prov is not None:
            prov = np.concatenate([prov, -np.ones(len(ghost_pts), dtype=np.int64)])
    return RadarFrame(pts, intens, frame_index, timestamp, prov)
