"""Spherical head geometry, source lattice, sensor array and lead field.

Source points follow raster order with x varying fastest, then y, then z.
Point ``k`` owns lead-field columns ``3k, 3k+1, 3k+2`` (x, y, z moments).
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
SINGULAR_DISTANCE_MM = 1e-6


@dataclass(frozen=True)
class SourceSpace:
    grid_spacing: float
    origin: np.ndarray
    mask: np.ndarray  # bool, indexed [ix, iy, iz]
    points: np.ndarray  # (N, 3) mm
    sphere_radius: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def grid_dims(self):
        return tuple(int(d) for d in self.mask.shape)

    @property
    def n_points(self):
        return int(self.points.shape[0])

    def lattice_indices(self):
        """(N, 3) integer lattice indices of the points, in raster order."""
        ix, iy, iz = np.nonzero(self.mask.transpose(2, 1, 0))[::-1]
        return np.stack([ix, iy, iz], axis=1)

    def flat_mask_indices(self):
        """Indices into ``mask.ravel(order='C')`` for each point, raster order."""
        idx = self.lattice_indices()
        return np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]), self.mask.shape)


@dataclass(frozen=True)
class SensorArray:
    positions: np.ndarray  # (M, 3) mm
    orientations: np.ndarray  # (M, 3) unit
    sphere_center: np.ndarray
    sphere_radius: float

    @property
    def n_sensors(self):
        return int(self.positions.shape[0])


@dataclass(frozen=True)
class LeadField:
    matrix: np.ndarray  # (M, 3N) fT/nAm
    source_space: SourceSpace
    sensor_array: SensorArray

    @property
    def shape(self):
        return self.matrix.shape

    def point_columns(self, k):
        return self.matrix[:, 3 * k:3 * k + 3]


def build_source_space(sphere_radius, region_radius, grid_spacing, min_radius=0.0):
    """Lattice points within ``region_radius`` of the sphere center.

    The lattice contains the center and is symmetric about it. Points closer
    than ``min_radius`` are dropped; the center point itself has an all-zero
    lead field, so experiment code passes ``min_radius > 0``.
    """
    if not grid_spacing > 0:
        raise ValueError(f"grid_spacing must be positive, got {grid_spacing}")
    if not 0 < region_radius < sphere_radius:
        raise ValueError(
            f"need 0 < region_radius < sphere_radius, got {region_radius} and {sphere_radius}"
        )
    half = int(np.floor(region_radius / grid_spacing + 1e-9))
    n = 2 * half + 1
    coords = (np.arange(n) - half) * float(grid_spacing)
    origin = np.full(3, coords[0])
    X, Y, Z = np.meshgrid(coords, coords, coords, indexing="ij")
    r = np.sqrt(X * X + Y * Y + Z * Z)
    tol = 1e-9 * grid_spacing
    mask = (r <= region_radius + tol) & (r >= min_radius - tol)
    if not mask.any():
        raise ValueError("source space is empty")
    # raster order: x fastest, then y, then z
    order = np.nonzero(mask.transpose(2, 1, 0))
    iz, iy, ix = order
    points = np.stack([coords[ix], coords[iy], coords[iz]], axis=1)
    return SourceSpace(
        grid_spacing=float(grid_spacing),
        origin=origin,
        mask=mask,
        points=points,
        sphere_radius=float(sphere_radius),
    )


def build_sensor_array(n_sensors, shell_radius, coverage=0.5, sphere_radius=90.0,
                       sphere_center=(0.0, 0.0, 0.0)):
    """Fibonacci-lattice magnetometers on a cap of a spherical shell.

    ``coverage`` is the covered fraction of the full solid angle, measured
    from the +z pole (0.5 is the upper hemisphere, 1.0 the whole sphere).
    Sensors are oriented radially.
    """
    if n_sensors < 1:
        raise ValueError("n_sensors must be >= 1")
    if shell_radius <= sphere_radius:
        raise ValueError(
            f"sensor shell radius {shell_radius} must exceed sphere radius {sphere_radius}"
        )
    if not 0 < coverage <= 1:
        raise ValueError(f"coverage must be in (0, 1], got {coverage}")
    center = np.asarray(sphere_center, dtype=np.float64)
    i = np.arange(n_sensors)
    z = 1.0 - 2.0 * coverage * i / max(n_sensors - 1, 1)
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * GOLDEN_ANGLE
    unit = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    return SensorArray(
        positions=center + shell_radius * unit,
        orientations=unit,
        sphere_center=center,
        sphere_radius=float(sphere_radius),
    )


def compute_lead_field(space, sensors):
    """Analytic lead field of a homogeneous conducting sphere (Sarvas model)."""
    center = sensors.sphere_center
    rel_pts = space.points - center
    rel_sens = sensors.positions - center
    if np.any(np.linalg.norm(rel_pts, axis=1) >= sensors.sphere_radius):
        raise ValueError("all source points must lie strictly inside the sphere")
    if np.any(np.linalg.norm(rel_sens, axis=1) <= sensors.sphere_radius):
        raise ValueError("all sensors must lie strictly outside the sphere")
    d = np.linalg.norm(rel_sens[:, None, :] - rel_pts[None, :, :], axis=2)
    if d.min() < SINGULAR_DISTANCE_MM:
        i, k = np.unravel_index(np.argmin(d), d.shape)
        raise ValueError(f"source point {k} coincides with sensor {i}")
    matrix = kernels.lead_field(rel_pts, rel_sens, sensors.orientations)
    if not np.all(np.isfinite(matrix)):
        raise FloatingPointError("non-finite lead field entries")
    return LeadField(matrix=matrix, source_space=space, sensor_array=sensors)


def build_head_model(sphere_radius_mm=90.0, region_radius_mm=70.0, grid_spacing_mm=10.0,
                     n_sensors=60, sensor_shell_radius_mm=120.0, coverage_fraction=0.5,
                     min_radius_mm=None):
    """Source space, sensors and lead field from a head-model config block.

    The center lattice point is excluded by default (``min_radius_mm`` of half
    a grid spacing) because it is magnetically silent.
    """
    if min_radius_mm is None:
        min_radius_mm = 0.5 * grid_spacing_mm
    space = build_source_space(sphere_radius_mm, region_radius_mm, grid_spacing_mm,
                               min_radius=min_radius_mm)
    sensors = build_sensor_array(n_sensors, sensor_shell_radius_mm, coverage_fraction,
                                 sphere_radius=sphere_radius_mm)
    return space, sensors, compute_lead_field(space, sensors)
