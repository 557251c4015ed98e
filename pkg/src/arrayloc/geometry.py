"""Microphone-array geometry, plane-wave steering delays and the pinhole
camera model tying horizontal pixel coordinates to azimuth angles.

Conventions: right-handed frame with x to the right (image x direction),
y up, z along the camera boresight. Azimuth is measured in the horizontal
plane, positive toward +x, so a source at positive azimuth appears right
of the image center. Elevation is positive toward +y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_SOUND = 343.0  # m/s

# Rig constants: 2448x2048 @ 30 fps cameras, 450 mm / 40 mm apertures.
IMAGE_WIDTH_PX = 2448
IMAGE_HEIGHT_PX = 2048
APERTURE_X_M = 0.450
APERTURE_Y_M = 0.040
N_MICS = 16
N_VIEWS = 11
ORTF_HALF_SPACING_M = 0.0883

# Focal length calibrated so a 2 deg offset lands exactly 89 px from the
# principal point; 5 deg then maps to ~223 px.
DEFAULT_FOCAL_PX = 89.0 / math.tan(math.radians(2.0))


class GeometryError(ValueError):
    """Raised when a geometry or camera definition violates its contract."""


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    """Microphone positions in meters, shape (n_mics, 3)."""

    mic_positions: np.ndarray
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        pos = np.asarray(self.mic_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise GeometryError(f"mic_positions must be (n, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise GeometryError("mic positions must be finite")
        if len(np.unique(pos, axis=0)) != pos.shape[0]:
            raise GeometryError("mic positions must be distinct")
        if self.speed_of_sound <= 0:
            raise GeometryError("speed_of_sound must be positive")
        pos.flags.writeable = False
        object.__setattr__(self, "mic_positions", pos)

    @property
    def n_mics(self) -> int:
        return self.mic_positions.shape[0]

    def validate_rig(self) -> "ArrayGeometry":
        """Check the full 16-element rig invariants (aperture, mic count)."""
        pos = self.mic_positions
        if self.n_mics != N_MICS:
            raise GeometryError(f"rig array must have {N_MICS} mics, got {self.n_mics}")
        ap_x = pos[:, 0].max() - pos[:, 0].min()
        if abs(ap_x - APERTURE_X_M) > 1e-9:
            raise GeometryError(f"horizontal aperture must be {APERTURE_X_M} m, got {ap_x}")
        ap_y = pos[:, 1].max() - pos[:, 1].min()
        if ap_y > APERTURE_Y_M + 1e-9:
            raise GeometryError(f"vertical aperture must be <= {APERTURE_Y_M} m, got {ap_y}")
        return self

    def mirrored_ordering(self) -> np.ndarray:
        """Index permutation mapping each mic to its x-mirrored partner."""
        pos = self.mic_positions
        mirrored = pos * np.array([-1.0, 1.0, 1.0])
        order = np.empty(self.n_mics, dtype=int)
        for i, p in enumerate(mirrored):
            dist = np.linalg.norm(pos - p, axis=1)
            j = int(np.argmin(dist))
            if dist[j] > 1e-9:
                raise GeometryError("array is not left-right symmetric")
            order[i] = j
        return order


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera restricted to the horizontal axis."""

    image_width_px: int = IMAGE_WIDTH_PX
    image_height_px: int = IMAGE_HEIGHT_PX
    focal_px: float = DEFAULT_FOCAL_PX
    principal_x_px: float | None = None
    view_id: int = 0

    def __post_init__(self):
        if self.principal_x_px is None:
            object.__setattr__(self, "principal_x_px", self.image_width_px / 2.0)
        if self.focal_px <= 0:
            raise GeometryError("focal_px must be positive")
        if not 0 <= self.view_id < N_VIEWS:
            raise GeometryError(f"view_id must be in [0, {N_VIEWS - 1}], got {self.view_id}")
        if self.image_width_px <= 0 or self.image_height_px <= 0:
            raise GeometryError("image dimensions must be positive")


@dataclass(frozen=True)
class LookDirectionSet:
    """Ordered beamformer look azimuths; elevation is fixed at 0."""

    azimuths_deg: tuple = field(default_factory=tuple)

    def __post_init__(self):
        az = tuple(float(a) for a in self.azimuths_deg)
        if len(az) == 0:
            raise GeometryError("look direction set must not be empty")
        if len(set(az)) != len(az):
            raise GeometryError("look directions must be unique")
        if list(az) != sorted(az):
            raise GeometryError("look directions must be sorted ascending")
        object.__setattr__(self, "azimuths_deg", az)

    def __len__(self) -> int:
        return len(self.azimuths_deg)


# Presets: 15 = 5-deg grid over +-30 plus +-45; 7 and 3 are the reduced
# front-end variants used by the coarser baselines.
LOOK_DIR_PRESETS = {
    15: tuple(sorted(list(range(-30, 31, 5)) + [-45, 45])),
    7: (-45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0),
    3: (-20.0, 0.0, 20.0),
}


def default_look_directions(n: int = 15) -> LookDirectionSet:
    try:
        return LookDirectionSet(LOOK_DIR_PRESETS[n])
    except KeyError:
        raise GeometryError(f"no look-direction preset for n={n}; use 3, 7 or 15") from None


def default_ava_array() -> ArrayGeometry:
    """Nominal 16-mic rig geometry.

    8 x-positions per side, log-spaced 10..225 mm from center with the
    +-88.3 mm pair pinned exactly (the stereo baseline mics); rows
    alternate between y = 40 mm and y = 0 so that the 88.3 mm pair sits
    at y = 0. Exact spacing of the real rig is not published; this layout
    satisfies the aperture and pair constraints and can be replaced via a
    geometry file.
    """
    xs = np.geomspace(0.010, 0.225, 8)
    xs[0], xs[-1] = 0.010, 0.225
    xs[np.argmin(np.abs(xs - ORTF_HALF_SPACING_M))] = ORTF_HALF_SPACING_M
    ys = np.where(np.arange(8) % 2 == 0, APERTURE_Y_M, 0.0)
    pos = [(s * x, y, 0.0) for s in (-1.0, 1.0) for x, y in zip(xs, ys)]
    pos.sort()
    return ArrayGeometry(np.array(pos)).validate_rig()


def stereo_pair_indices(geom: ArrayGeometry) -> tuple[int, int]:
    """Indices of the +-88.3 mm (ORTF-spaced) pair, left then right."""
    x = geom.mic_positions[:, 0]
    left = int(np.argmin(np.abs(x + ORTF_HALF_SPACING_M)))
    right = int(np.argmin(np.abs(x - ORTF_HALF_SPACING_M)))
    if abs(x[left] + ORTF_HALF_SPACING_M) > 1e-6 or abs(x[right] - ORTF_HALF_SPACING_M) > 1e-6:
        raise GeometryError("geometry has no +-88.3 mm mic pair")
    return left, right


def center_mic_index(geom: ArrayGeometry) -> int:
    """Index of the mic closest to the array center (mono baseline)."""
    return int(np.argmin(np.linalg.norm(geom.mic_positions, axis=1)))


def direction_unit_vector(azimuth_deg: float, elevation_deg: float = 0.0) -> np.ndarray:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return np.array([math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])


def steering_delays(geom: ArrayGeometry, azimuth_deg: float, elevation_deg: float = 0.0) -> np.ndarray:
    """Far-field arrival delays (s) per mic, relative to the array origin.

    A plane wave from (az, el) reaches mic i at delay -(p_i . u) / c where
    u points from the array toward the source; mics nearer the source get
    negative (earlier) delays.
    """
    if abs(azimuth_deg) > 90.0:
        raise GeometryError(f"|azimuth| must be <= 90 deg, got {azimuth_deg}")
    u = direction_unit_vector(azimuth_deg, elevation_deg)
    return -(geom.mic_positions @ u) / geom.speed_of_sound


def azimuth_to_pixel(cam: CameraModel, azimuth_deg: float) -> float:
    """Horizontal pixel coordinate of a source at the given azimuth."""
    if abs(azimuth_deg) >= 90.0:
        raise GeometryError(f"|azimuth| must be < 90 deg, got {azimuth_deg}")
    return cam.principal_x_px + cam.focal_px * math.tan(math.radians(azimuth_deg))


def pixel_to_azimuth(cam: CameraModel, pixel_x: float) -> float:
    """Azimuth (deg) of the ray through a horizontal pixel coordinate."""
    return math.degrees(math.atan((pixel_x - cam.principal_x_px) / cam.focal_px))


def in_frame(cam: CameraModel, pixel_x: float) -> bool:
    return 0.0 <= pixel_x < cam.image_width_px


# ---------------------------------------------------------------------------
# File formats. Geometry: one "index x_m y_m z_m" row per mic. Camera:
# single row "view_id width height focal_px principal_x".
# ---------------------------------------------------------------------------

def save_geometry(path, geom: ArrayGeometry) -> None:
    with open(path, "w") as f:
        f.write("# index x_m y_m z_m\n")
        for i, (x, y, z) in enumerate(geom.mic_positions):
            f.write(f"{i} {float(x)!r} {float(y)!r} {float(z)!r}\n")


def load_geometry(path, validate_rig: bool = True) -> ArrayGeometry:
    rows = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise GeometryError(f"{path}:{lineno}: expected 'index x y z', got {line!r}")
            try:
                idx = int(parts[0])
                xyz = tuple(float(p) for p in parts[1:])
            except ValueError as e:
                raise GeometryError(f"{path}:{lineno}: {e}") from None
            if idx in rows:
                raise GeometryError(f"{path}:{lineno}: duplicate mic index {idx}")
            rows[idx] = xyz
    if sorted(rows) != list(range(len(rows))):
        raise GeometryError(f"{path}: mic indices must be 0..{len(rows) - 1}")
    geom = ArrayGeometry(np.array([rows[i] for i in range(len(rows))]))
    return geom.validate_rig() if validate_rig else geom


def save_camera(path, cam: CameraModel) -> None:
    with open(path, "w") as f:
        f.write("# view_id width height focal_px principal_x\n")
        f.write(f"{cam.view_id} {cam.image_width_px} {cam.image_height_px} "
                f"{cam.focal_px!r} {cam.principal_x_px!r}\n")


def load_camera(path) -> CameraModel:
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise GeometryError(f"{path}:{lineno}: expected 5 fields, got {line!r}")
            try:
                return CameraModel(
                    view_id=int(parts[0]),
                    image_width_px=int(parts[1]),
                    image_height_px=int(parts[2]),
                    focal_px=float(parts[3]),
                    principal_x_px=float(parts[4]),
                )
            except ValueError as e:
                raise GeometryError(f"{path}:{lineno}: {e}") from None
    raise GeometryError(f"{path}: no camera row found")
