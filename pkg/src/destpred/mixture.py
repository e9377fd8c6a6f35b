"""2-D Gaussian mixture math: density, loss, gradients, sampling, truncation.

A mixture stores component means in ego-frame meters, a scale parameter per
component (per-axis standard deviations, or a lower-triangular Cholesky
factor of the covariance), and unnormalized log-weights. Mixture weights are
always the softmax of the log-weights, so any subset of components is again
a valid, renormalized mixture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PixelFrame, pixel_to_ego

LOG_TWO_PI = float(np.log(2.0 * np.pi))

# Density evaluations are floored here instead of returning -inf: this is
# roughly the log of the smallest positive double, so exp() of a floored
# value is still a representable (subnormal) number and nothing downstream
# ever sees an inf or a NaN.
LOG_PDF_FLOOR = -745.0

DIAG = "diag"
CHOL = "chol"


class MixtureError(ValueError):
    pass


@dataclass(frozen=True)
class GaussComponent:
    mean: np.ndarray  # (2,) meters
    scale: np.ndarray  # (2,) per-axis sigma, or (2, 2) lower-triangular factor
    log_weight: float


class Mixture2D:
    """Nonempty list of 2-D Gaussian components with softmax-normalized weights."""

    def __init__(self, means, scales, log_weights):
        means = np.asarray(means, dtype=np.float64)
        scales = np.asarray(scales, dtype=np.float64)
        log_weights = np.asarray(log_weights, dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != 2 or means.shape[0] < 1:
            raise MixtureError(f"means must be (n, 2) with n >= 1, got {means.shape}")
        n = means.shape[0]
        if scales.shape == (n, 2):
            kind = DIAG
            if not np.all(scales > 0):
                raise MixtureError("diagonal sigmas must be positive")
        elif scales.shape == (n, 2, 2):
            kind = CHOL
            if not np.all(scales[:, 0, 0] > 0) or not np.all(scales[:, 1, 1] > 0):
                raise MixtureError("Cholesky factors need a positive diagonal")
            if not np.all(scales[:, 0, 1] == 0):
                raise MixtureError("Cholesky factors must be lower-triangular")
        else:
            raise MixtureError(f"bad scale shape {scales.shape} for {n} components")
        if log_weights.shape != (n,):
            raise MixtureError(f"log_weights must be ({n},), got {log_weights.shape}")
        for name, arr in (("means", means), ("scales", scales), ("log_weights", log_weights)):
            if not np.all(np.isfinite(arr)):
                raise MixtureError(f"non-finite values in {name}")
        self.means = means
        self.scales = scales
        self.log_weights = log_weights
        self.kind = kind

    @classmethod
    def from_components(cls, components) -> "Mixture2D":
        comps = list(components)
        if not comps:
            raise MixtureError("mixture needs at least one component")
        means = np.stack([np.asarray(c.mean, dtype=np.float64) for c in comps])
        scales = np.stack([np.asarray(c.scale, dtype=np.float64) for c in comps])
        logw = np.array([c.log_weight for c in comps], dtype=np.float64)
        return cls(means, scales, logw)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def weights(self) -> np.ndarray:
        lw = self.log_weights - self.log_weights.max()
        w = np.exp(lw)
        return w / w.sum()

    def components(self) -> list[GaussComponent]:
        return [
            GaussComponent(self.means[i].copy(), self.scales[i].copy(), float(self.log_weights[i]))
            for i in range(self.n_components)
        ]

    def sigma_bounds(self) -> np.ndarray:
        """Per-axis marginal standard deviations, shape (n, 2)."""
        if self.kind == DIAG:
            return self.scales.copy()
        l = self.scales
        sx = l[:, 0, 0]
        sy = np.sqrt(l[:, 1, 0] ** 2 + l[:, 1, 1] ** 2)
        return np.stack([sx, sy], axis=1)


def component_log_density(m: Mixture2D, points) -> np.ndarray:
    """log density of each component at each point, shape (npoints, ncomp)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.all(np.isfinite(pts)):
        raise MixtureError("non-finite query point")
    d = pts[:, None, :] - m.means[None, :, :]  # (p, n, 2)
    if m.kind == DIAG:
        sig = m.scales[None, :, :]
        quad = np.sum((d / sig) ** 2, axis=-1)
        logdet = np.sum(np.log(m.scales), axis=-1)[None, :]
    else:
        l00 = m.scales[:, 0, 0][None, :]
        l10 = m.scales[:, 1, 0][None, :]
        l11 = m.scales[:, 1, 1][None, :]
        z0 = d[:, :, 0] / l00
        z1 = (d[:, :, 1] - l10 * z0) / l11
        quad = z0**2 + z1**2
        logdet = np.log(l00 * l11)
    return -LOG_TWO_PI - logdet - 0.5 * quad


def log_pdf_many(m: Mixture2D, points) -> np.ndarray:
    """Mixture log density at each of (k, 2) points, floored at LOG_PDF_FLOOR."""
    logdens = component_log_density(m, points)
    logits = m.log_weights - _logsumexp(m.log_weights)
    total = _logsumexp(logits[None, :] + logdens, axis=1)
    return np.maximum(total, LOG_PDF_FLOOR)


def log_pdf(m: Mixture2D, y) -> float:
    return float(log_pdf_many(m, np.asarray(y, dtype=np.float64).reshape(1, 2))[0])


def nll_loss(m: Mixture2D, targets) -> float:
    """Mean negative log density over the provided target points."""
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if t.shape[0] == 0:
        raise MixtureError("nll_loss needs at least one target")
    return float(-np.mean(log_pdf_many(m, t)))


@dataclass
class MixtureGrad:
    means: np.ndarray  # (n, 2)
    scales: np.ndarray  # same shape as the mixture's scales
    log_weights: np.ndarray  # (n,)


def nll_grad(m: Mixture2D, targets) -> MixtureGrad:
    """Exact gradient of :func:`nll_loss` w.r.t. means, scales and log-weights."""
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if t.shape[0] == 0:
        raise MixtureError("nll_grad needs at least one target")
    n_t = t.shape[0]
    logdens = component_log_density(m, t)  # (t, n)
    logits = m.log_weights - _logsumexp(m.log_weights)
    joint = logits[None, :] + logdens
    log_mix = _logsumexp(joint, axis=1, keepdims=True)
    resp = np.exp(joint - log_mix)  # (t, n) posterior responsibilities
    pi = np.exp(logits)

    d = t[:, None, :] - m.means[None, :, :]  # (t, n, 2)
    if m.kind == DIAG:
        sig = m.scales[None, :, :]
        g_mu = d / sig**2  # d log phi / d mu
        g_sig = d**2 / m.scales[None, :, :] ** 3 - 1.0 / m.scales[None, :, :]
        grad_scales = np.einsum("tn,tnk->nk", resp, -g_sig) / n_t
    else:
        l = m.scales
        l00 = l[:, 0, 0][None, :]
        l10 = l[:, 1, 0][None, :]
        l11 = l[:, 1, 1][None, :]
        z0 = d[:, :, 0] / l00
        z1 = (d[:, :, 1] - l10 * z0) / l11
        # g = Sigma^{-1} d = L^{-T} z
        a1 = z1 / l11
        a0 = (z0 - l10 * a1) / l00
        g_mu = np.stack([a0, a1], axis=-1)
        # d log phi / d L = g g^T L - L^{-T}, lower triangle only
        gl00 = a0 * (a0 * l00 + a1 * l10) - 1.0 / l00
        gl10 = a1 * (a0 * l00 + a1 * l10)
        gl11 = a1 * a1 * l11 - 1.0 / l11
        grad_scales = np.zeros_like(m.scales)
        grad_scales[:, 0, 0] = np.einsum("tn,tn->n", resp, -gl00) / n_t
        grad_scales[:, 1, 0] = np.einsum("tn,tn->n", resp, -gl10) / n_t
        grad_scales[:, 1, 1] = np.einsum("tn,tn->n", resp, -gl11) / n_t

    grad_means = np.einsum("tn,tnk->nk", resp, -g_mu) / n_t
    grad_logw = (pi[None, :] - resp).mean(axis=0)
    return MixtureGrad(means=grad_means, scales=grad_scales, log_weights=grad_logw)


def sample(m: Mixture2D, n: int, rng) -> np.ndarray:
    """Draw n points: a categorical component pick, then one Gaussian draw each."""
    if n < 1:
        raise MixtureError("sample count must be >= 1")
    rng = _as_generator(rng)
    idx = rng.choice(m.n_components, size=n, p=m.weights)
    z = rng.standard_normal((n, 2))
    if m.kind == DIAG:
        return m.means[idx] + m.scales[idx] * z
    return m.means[idx] + np.einsum("nij,nj->ni", m.scales[idx], z)


def top_k_truncate(m: Mixture2D, k: int) -> Mixture2D:
    """Keep the k heaviest components (ties to the lower index) and renormalize."""
    if not 1 <= k <= m.n_components:
        raise MixtureError(f"k={k} out of range 1..{m.n_components}")
    order = np.argsort(-m.weights, kind="stable")[:k]
    keep = np.sort(order)
    return Mixture2D(m.means[keep], m.scales[keep], m.log_weights[keep])


def render_heatmap(m: Mixture2D, dims_hw: tuple[int, int]) -> np.ndarray:
    """Density at every pixel center, rescaled to a max of 1. Shape (H, W)."""
    h, w = dims_hw
    frame = PixelFrame.from_hw(dims_hw)
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pts_px = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    pts_m = pixel_to_ego(pts_px, frame)
    dens = np.exp(log_pdf_many(m, pts_m)).reshape(h, w)
    peak = dens.max()
    if peak > 0:
        dens = dens / peak
    return dens


def heatmap_to_png(grid: np.ndarray, path) -> None:
    """Write a (H, W) grid in [0, 1] as an 8-bit grayscale PNG."""
    from PIL import Image

    img = np.clip(np.rint(grid * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def _logsumexp(a, axis=None, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    if not keepdims and axis is not None:
        out = np.squeeze(out, axis=axis)
    elif not keepdims:
        out = np.squeeze(out)
    return out


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.PCG64(rng))
