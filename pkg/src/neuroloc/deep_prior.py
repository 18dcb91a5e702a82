"""Untrained convolutional generator as a prior on the current distribution.

The generator maps a fixed standard-normal latent vector to a (3, X, Y, Z)
volume; the voxels inside the source-space mask are read out as the current
vector. Only the network parameters are optimized, against the whitened data
misfit plus a depth-weighted quadratic penalty.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .linear import CurrentEstimate, point_norms, whiten

SNAPSHOT_VERSION = 1
SEED_SIZE = 4


class DeepPriorDivergence(FloatingPointError):
    def __init__(self, iteration, last_finite):
        self.iteration = iteration
        self.last_finite = last_finite
        super().__init__(
            f"non-finite loss at iteration {iteration}; last finite snapshot {last_finite}; "
            "retry with a smaller learning_rate"
        )


@dataclass
class DeepPriorConfig:
    lam: float = 0.0
    p: float = 0.5
    iterations: int = 3000
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    init_scale: float = 1.0
    snapshot_every: int = 50

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")


@dataclass
class TraceLog:
    rows: list = field(default_factory=list)  # (iteration, total, data, reg)

    def append(self, iteration, total, data, reg):
        self.rows.append((int(iteration), float(total), float(data), float(reg)))

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "total_loss", "data_term", "reg_term"])
        for it, total, data, reg in self.rows:
            w.writerow([it, repr(total), repr(data), repr(reg)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        log = cls()
        for r in rows:
            log.append(int(r["iteration"]), float(r["total_loss"]), float(r["data_term"]),
                       float(r["reg_term"]))
        return log


class GeneratorNetwork:
    """Dense projection to a 4^3 seed volume, then upsample/conv/leaky-relu blocks.

    Output is cropped to the source-space grid from the low corner.
    """

    def __init__(self, grid_dims, point_voxels, latent, params, n_blocks, slope=0.1):
        self.grid_dims = tuple(int(d) for d in grid_dims)
        self.point_voxels = np.asarray(point_voxels, dtype=np.intp)
        self.latent_z = np.asarray(latent, dtype=np.float64)
        self.params = params  # name -> Tensor, insertion order is the canonical order
        self.n_blocks = int(n_blocks)
        self.slope = slope
        n_vox = int(np.prod(self.grid_dims))
        # point k, channel c -> flat index into the (3, X, Y, Z) output
        self._gather_idx = (np.arange(3)[None, :] * n_vox + self.point_voxels[:, None]).ravel()

    @property
    def n_points(self):
        return int(self.point_voxels.shape[0])

    @property
    def output_volume_shape(self):
        return (3,) + self.grid_dims

    def parameters(self):
        return list(self.params.values())

    def volume(self):
        """Differentiable (3, X, Y, Z) output volume."""
        p = self.params
        z = ag.tensor(self.latent_z)
        h = ag.linear(z, p["proj.weight"], p["proj.bias"])
        c0 = p["proj.bias"].shape[0] // SEED_SIZE ** 3
        h = h.reshape(c0, SEED_SIZE, SEED_SIZE, SEED_SIZE)
        for i in range(self.n_blocks):
            h = ag.upsample3d_nearest(h, 2)
            h = ag.conv3d(h, p[f"block{i}.weight"], p[f"block{i}.bias"])
            h = ag.leaky_relu(h, self.slope)
        h = ag.conv3d(h, p["out.weight"], p["out.bias"])
        nx, ny, nz = self.grid_dims
        if h.shape[1:] != self.grid_dims:
            h = h[:, :nx, :ny, :nz]
        return h

    def forward(self):
        """Differentiable 3N current vector in raster point order."""
        return ag.gather(self.volume(), self._gather_idx)

    def state(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)


def n_upsample_blocks(grid_dims):
    return int(math.ceil(math.log2(max(grid_dims) / SEED_SIZE)))


def build_generator(space, latent_dim=128, seed=0, init_scale=1.0, seed_channels=8,
                    min_channels=8, kernel_size=3):
    """Deterministic generator for ``space``'s grid, seeded from ``seed``.

    The latent vector is drawn first, then each weight tensor in layer order
    from ``N(0, init_scale**2 / fan_in)``. Biases start at zero.
    """
    dims = space.grid_dims if hasattr(space, "grid_dims") else tuple(space)
    if min(dims) < SEED_SIZE:
        raise ValueError(f"grid dims {dims} must each be >= {SEED_SIZE}")
    n_blocks = n_upsample_blocks(dims)
    if n_blocks < 1:
        raise ValueError(f"grid dims {dims} too small for one upsample block")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(latent_dim)

    def weight(shape, fan_in):
        return ag.tensor(rng.standard_normal(shape) * (init_scale / math.sqrt(fan_in)),
                         requires_grad=True)

    def zeros(n):
        return ag.tensor(np.zeros(n), requires_grad=True)

    k3 = kernel_size ** 3
    params = {
        "proj.weight": weight((seed_channels * SEED_SIZE ** 3, latent_dim), latent_dim),
        "proj.bias": zeros(seed_channels * SEED_SIZE ** 3),
    }
    c_in = seed_channels
    for i in range(n_blocks):
        c_out = max(c_in // 2, min_channels)
        params[f"block{i}.weight"] = weight((c_out, c_in) + (kernel_size,) * 3, c_in * k3)
        params[f"block{i}.bias"] = zeros(c_out)
        c_in = c_out
    params["out.weight"] = weight((3, c_in) + (kernel_size,) * 3, c_in * k3)
    params["out.bias"] = zeros(3)
    if hasattr(space, "flat_mask_indices"):
        voxels = space.flat_mask_indices()
    else:
        voxels = np.arange(int(np.prod(dims)))
    return GeneratorNetwork(dims, voxels, z, params, n_blocks)


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LossOperands:
    lw: np.ndarray  # whitened lead field
    bw: np.ndarray  # whitened observation
    inv_s: np.ndarray  # 3N diagonal of S^-1


def loss_operands(lead, obs, weights):
    matrix = lead.matrix if hasattr(lead, "matrix") else np.asarray(lead)
    lw, bw = whiten(matrix, obs.b_obs, obs.noise_cov)
    inv_s = 1.0 / weights.expanded()
    if inv_s.shape[0] != lw.shape[1]:
        raise ValueError(f"{inv_s.shape[0] // 3} depth weights for {lw.shape[1] // 3} points")
    return LossOperands(lw=lw, bw=bw, inv_s=inv_s)


def loss_terms(f, ops, lam):
    """``(total, data, reg)`` tensors for current vector ``f``."""
    if f.shape != (ops.lw.shape[1],):
        raise ValueError(f"current vector shape {f.shape} does not match lead field {ops.lw.shape}")
    r = ag.sub(ops.bw, ag.matmul(ops.lw, f))
    data = ag.dot(r, r)
    reg = ag.dot(f, ag.mul(f, ops.inv_s))
    total = ag.add(data, ag.scale(reg, lam))
    return total, data, reg


def dp_loss(net, lead, obs, weights, lam):
    """Whitened misfit plus ``lam * f^T S^-1 f`` at the generator's output."""
    total, _, _ = loss_terms(net.forward(), loss_operands(lead, obs, weights), lam)
    return total


class Adam:
    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = p.grad
            if g is None:
                continue
            if k not in self.m:
                self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def fit(net, lead, obs, weights, config, callback=None):
    """Adam on the generator parameters; returns the best-loss iterate.

    Returns ``(CurrentEstimate, TraceLog)``. On return the network holds the
    parameters of the best iterate, so ``net.forward()`` reproduces ``q_hat``.
    """
    ops = loss_operands(lead, obs, weights)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    trace = TraceLog()
    best = (math.inf, -1, None, None)  # loss, iteration, state, q
    last_finite = None
    params = net.params
    for it in range(config.iterations + 1):
        for t in params.values():
            t.zero_grad()
        f = net.forward()
        total, data, reg = loss_terms(f, ops, config.lam)
        val = total.item()
        if not math.isfinite(val):
            raise DeepPriorDivergence(it, last_finite)
        if it % config.snapshot_every == 0 or it == config.iterations:
            trace.append(it, val, data.item(), reg.item())
            last_finite = trace.rows[-1]
        if val < best[0]:
            best = (val, it, net.state(), f.data.copy())
        if callback is not None:
            callback(it, val)
        if it == config.iterations:
            break
        ag.backward(total)
        opt.step(params)
    best_loss, best_it, state, q_hat = best
    net.load_state(state)
    est = CurrentEstimate(
        q_hat=q_hat,
        per_point_amplitude=point_norms(q_hat),
        method="deep_prior",
        lam=float(config.lam),
        p=float(weights.p),
        diagnostics={
            "best_iteration": best_it,
            "best_loss": best_loss,
            "final_loss": trace.rows[-1][1],
            "seed": config.seed,
        },
    )
    return est, trace


# --------------------------------------------------------------------------


def save_generator(net, path):
    """Versioned ``.npz`` snapshot of a generator's latent vector and parameters."""
    arrays = {f"param/{k}": v.data for k, v in net.params.items()}
    np.savez(
        path,
        format_version=np.array(SNAPSHOT_VERSION),
        grid_dims=np.array(net.grid_dims),
        point_voxels=net.point_voxels,
        latent_z=net.latent_z,
        n_blocks=np.array(net.n_blocks),
        slope=np.array(net.slope),
        param_order=np.array(list(net.params.keys())),
        **arrays,
    )


def load_generator(path):
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported generator snapshot version {version}")
        params = {
            str(k): ag.tensor(z[f"param/{k}"], requires_grad=True) for k in z["param_order"]
        }
        return GeneratorNetwork(tuple(z["grid_dims"]), z["point_voxels"], z["latent_z"],
                                params, int(z["n_blocks"]), float(z["slope"]))
