"""Ground-truth dipoles, forward projection and noisy observations."""

from dataclasses import dataclass

import numpy as np

# noiseless mode: C = (level * peak)^2 I keeps whitening well scaled
NOISELESS_REL_LEVEL = 1e-6


@dataclass(frozen=True)
class GroundTruthSource:
    location: np.ndarray  # mm, one of SourceSpace.points
    moment: np.ndarray  # nAm
    index: int  # raster index of location
    label: str = ""


@dataclass(frozen=True)
class Observation:
    b_obs: np.ndarray
    noise_cov: np.ndarray
    clean: np.ndarray
    psnr_db: float
    rng_seed: int

    @property
    def n_sensors(self):
        return int(self.b_obs.shape[0])


def make_dipole(space, nearest_to, moment, label=""):
    """Snap a dipole to the nearest source point; ties go to the lowest raster index."""
    moment = np.asarray(moment, dtype=np.float64)
    if moment.shape != (3,):
        raise ValueError("moment must be a 3-vector")
    if not np.any(moment != 0):
        raise ValueError("dipole moment must be non-zero")
    if space.n_points == 0:
        raise ValueError("empty source space")
    d2 = np.sum((space.points - np.asarray(nearest_to, dtype=np.float64)) ** 2, axis=1)
    k = int(np.argmin(d2))  # argmin returns the first minimum
    return GroundTruthSource(location=space.points[k].copy(), moment=moment, index=k,
                             label=label)


def source_vector(n_points, sources):
    """Dense 3N current vector for one or more dipoles."""
    if isinstance(sources, GroundTruthSource):
        sources = [sources]
    q = np.zeros(3 * n_points)
    for s in sources:
        q[3 * s.index:3 * s.index + 3] += s.moment
    return q


def forward(lead, source):
    """Sensor readings ``L q`` of a single dipole."""
    k = source.index
    if not np.array_equal(lead.source_space.points[k], source.location):
        raise ValueError("source location is not a point of the lead field's source space")
    return lead.matrix[:, 3 * k:3 * k + 3] @ source.moment


def _shape_cov(m, cov_shape):
    if cov_shape is None or cov_shape == "identity":
        return np.eye(m)
    if isinstance(cov_shape, tuple) and cov_shape[0] == "diagonal":
        d = np.asarray(cov_shape[1], dtype=np.float64)
        if d.shape != (m,) or np.any(d <= 0):
            raise ValueError("diagonal noise shape needs M positive entries")
        return np.diag(d / d.mean())
    if isinstance(cov_shape, tuple) and cov_shape[0] == "full":
        sigma = np.asarray(cov_shape[1], dtype=np.float64)
        if sigma.shape != (m, m):
            raise ValueError("full noise shape needs an MxM matrix")
        sigma = 0.5 * (sigma + sigma.T)
        if np.linalg.eigvalsh(sigma).min() <= 0:
            raise ValueError("full noise shape must be positive definite")
        return sigma / np.mean(np.diag(sigma))
    raise ValueError(f"unknown noise covariance shape {cov_shape!r}")


def psnr_db(clean, noise, mode="rms"):
    """Peak of ``clean`` over the rms (or peak-to-peak) of ``noise``, in dB."""
    if mode == "rms":
        level = np.sqrt(np.mean(noise * noise))
    elif mode == "peak_to_peak":
        level = noise.max() - noise.min()
    else:
        raise ValueError(f"unknown psnr mode {mode!r}")
    return float(20.0 * np.log10(np.max(np.abs(clean)) / level))


def add_noise(clean, target_psnr_db, cov_shape="identity", seed=0, psnr_mode="rms"):
    """Gaussian sensor noise scaled to hit ``target_psnr_db``.

    The noise is drawn from ``N(0, Sigma0)`` with ``Sigma0`` normalized to unit
    mean diagonal and then rescaled so the realized PSNR equals the target.
    The returned covariance is exactly the one of the rescaled draw.
    ``target_psnr_db = inf`` yields a noiseless observation.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if not np.any(clean != 0):
        raise ValueError("clean signal is all zero; PSNR undefined")
    m = clean.shape[0]
    if np.isposinf(target_psnr_db):
        eps = (NOISELESS_REL_LEVEL * np.max(np.abs(clean))) ** 2
        return Observation(b_obs=clean.copy(), noise_cov=eps * np.eye(m),
                           clean=clean.copy(), psnr_db=float("inf"), rng_seed=int(seed))
    if not np.isfinite(target_psnr_db):
        raise ValueError("target PSNR must be finite or +inf")
    sigma0 = _shape_cov(m, cov_shape)
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(sigma0)
    unit_noise = chol @ rng.standard_normal(m)
    current = psnr_db(clean, unit_noise, psnr_mode)
    scale = 10.0 ** ((current - target_psnr_db) / 20.0)
    noise = scale * unit_noise
    return Observation(
        b_obs=clean + noise,
        noise_cov=scale * scale * sigma0,
        clean=clean.copy(),
        psnr_db=psnr_db(clean, noise, psnr_mode),
        rng_seed=int(seed),
    )


def estimate_noise_cov(noise_cov, n_draws, seed=0):
    """Sample covariance of ``n_draws`` noise vectors drawn from ``noise_cov``.

    Used to study solver behavior when C is estimated rather than known.
    """
    if n_draws < 2:
        raise ValueError("need at least two draws")
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(noise_cov)
    draws = chol @ rng.standard_normal((noise_cov.shape[0], n_draws))
    return np.cov(draws)
