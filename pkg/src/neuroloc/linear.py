"""Depth weighting, regularized minimum-norm inverse and sLORETA."""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

# relative eigenvalue floor below which a 3x3 sLORETA block is regularized
BLOCK_RCOND = 1e-10
BLOCK_EPS = 1e-8


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class DepthWeights:
    s: np.ndarray
    p: float
    normalization: float  # max of the raw weights; s = raw / normalization

    def expanded(self):
        """Diagonal of S with each weight repeated for the x, y, z moments."""
        return np.repeat(self.s, 3)


@dataclass
class CurrentEstimate:
    q_hat: np.ndarray
    per_point_amplitude: np.ndarray
    method: str
    lam: float
    p: float = 0.0
    diagnostics: dict = field(default_factory=dict)


def point_norms(q):
    return np.sqrt(np.sum(np.reshape(q, (-1, 3)) ** 2, axis=1))


def depth_weights(lead, p):
    """Per-point prior variances ``(sum of squared column norms) ** -p``, max-normalized."""
    matrix = lead.matrix if hasattr(lead, "matrix") else np.asarray(lead)
    power = np.sum(matrix * matrix, axis=0).reshape(-1, 3).sum(axis=1)
    dead = np.flatnonzero(power == 0)
    if dead.size:
        raise ValueError(
            f"source point {int(dead[0])} has an all-zero lead field; exclude it from the source space"
        )
    if p == 0:
        return DepthWeights(s=np.ones_like(power), p=0.0, normalization=1.0)
    raw = power ** (-float(p))
    norm = float(raw.max())
    return DepthWeights(s=raw / norm, p=float(p), normalization=norm)


def whiten(lead_matrix, b, noise_cov):
    """Return ``(K^-1 L, K^-1 b)`` with ``C = K K^T``."""
    try:
        k = la.cholesky(noise_cov, lower=True)
    except la.LinAlgError as exc:
        raise SolverError("noise covariance is not positive definite") from exc
    lw = la.solve_triangular(k, lead_matrix, lower=True)
    bw = la.solve_triangular(k, b, lower=True)
    return lw, bw


def _factor_gram(gram, lam):
    m = gram.shape[0]
    a = gram + lam * np.eye(m)
    try:
        return la.cho_factor(a, lower=True)
    except la.LinAlgError as exc:
        cond = np.linalg.cond(a)
        raise SolverError(
            f"Cholesky factorization failed for lambda={lam} (condition estimate {cond:.3e})"
        ) from exc


def _check_dims(lead_matrix, obs, n_weights=None):
    m, n3 = lead_matrix.shape
    if obs.b_obs.shape != (m,) or obs.noise_cov.shape != (m, m):
        raise ValueError(
            f"observation has {obs.b_obs.shape[0]} sensors, lead field has {m}"
        )
    if n3 % 3:
        raise ValueError("lead field column count must be a multiple of 3")
    if n_weights is not None and 3 * n_weights != n3:
        raise ValueError(f"{n_weights} depth weights for {n3 // 3} source points")


def mne_solve(lead, obs, weights=None, lam=0.0):
    """``S L^T (L S L^T + lam C)^-1 b`` via pre-whitening and a Cholesky solve."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    matrix = lead.matrix
    n_pts = matrix.shape[1] // 3
    if weights is None:
        weights = DepthWeights(s=np.ones(n_pts), p=0.0, normalization=1.0)
    _check_dims(matrix, obs, weights.s.shape[0])
    lw, bw = whiten(matrix, obs.b_obs, obs.noise_cov)
    s_diag = weights.expanded()
    lws = lw * s_diag
    factor = _factor_gram(lws @ lw.T, lam)
    q_hat = lws.T @ la.cho_solve(factor, bw)
    return CurrentEstimate(
        q_hat=q_hat,
        per_point_amplitude=point_norms(q_hat),
        method="mne",
        lam=float(lam),
        p=weights.p,
    )


def sloreta_solve(lead, obs, lam=0.0):
    """MNE with unit prior, standardized per point by its 3x3 resolution block.

    Blocks are rank-deficient in a spherical conductor (radial moments are
    silent); those with a relative eigenvalue below ``BLOCK_RCOND`` get
    ``BLOCK_EPS * trace`` added to the diagonal and are counted in
    ``diagnostics['regularized_blocks']``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    matrix = lead.matrix
    _check_dims(matrix, obs)
    m, n3 = matrix.shape
    n_pts = n3 // 3
    lw, bw = whiten(matrix, obs.b_obs, obs.noise_cov)
    factor = _factor_gram(lw @ lw.T, lam)
    q_hat = lw.T @ la.cho_solve(factor, bw)
    gl = la.cho_solve(factor, lw)
    blocks = np.einsum("mki,mkj->kij", lw.reshape(m, n_pts, 3), gl.reshape(m, n_pts, 3))
    blocks = 0.5 * (blocks + blocks.transpose(0, 2, 1))
    evals = np.linalg.eigvalsh(blocks)
    trace = np.trace(blocks, axis1=1, axis2=2)
    weak = evals[:, 0] <= BLOCK_RCOND * evals[:, -1]
    if np.any(weak):
        blocks[weak] += (BLOCK_EPS * trace[weak])[:, None, None] * np.eye(3)
    evals, evecs = np.linalg.eigh(blocks)
    bad = np.flatnonzero(~(evals[:, 0] > 0))
    if bad.size:
        raise SolverError(f"sLORETA resolution block {int(bad[0])} is singular")
    proj = np.einsum("kij,ki->kj", evecs, q_hat.reshape(n_pts, 3))
    power = np.sum(proj * proj / evals, axis=1)
    return CurrentEstimate(
        q_hat=q_hat,
        per_point_amplitude=np.sqrt(power),
        method="sloreta",
        lam=float(lam),
        p=0.0,
        diagnostics={"regularized_blocks": int(np.count_nonzero(weak))},
    )


def localize(est, space):
    """Coordinates of the point with the largest amplitude (lowest index on ties)."""
    amp = np.asarray(est.per_point_amplitude)
    if amp.size == 0:
        raise ValueError("empty estimate")
    if not np.any(amp > 0):
        raise ValueError("no activity")
    return space.points[int(np.argmax(amp))].copy()


def localization_error(estimated, truth):
    """Euclidean distance in mm between a location and the true dipole."""
    loc = truth.location if hasattr(truth, "location") else truth
    return float(np.linalg.norm(np.asarray(estimated, dtype=np.float64) - loc))
