"""Finite-difference gradient audits.

Two layers of defense: the analytic numpy gradient of the mixture NLL is
checked coordinate-by-coordinate against central differences, and the full
model loss gradient (reverse-mode) is spot-checked on a seeded random subset
of parameter coordinates in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..mixture import CHOL, DIAG, Mixture2D, nll_grad, nll_loss


@dataclass
class AuditResult:
    name: str
    n_instances: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{self.name}: max relative error {self.max_rel_err:.3e} "
            f"(tolerance {self.tolerance:.1e}, {self.n_instances} instances) {status}"
        )


def random_mixture(rng: np.random.Generator, n_components: int, kind: str = DIAG) -> Mixture2D:
    means = rng.uniform(-30.0, 30.0, size=(n_components, 2))
    log_weights = rng.uniform(-3.0, 3.0, size=n_components)
    if kind == DIAG:
        scales = rng.uniform(0.3, 5.0, size=(n_components, 2))
    elif kind == CHOL:
        scales = np.zeros((n_components, 2, 2))
        scales[:, 0, 0] = rng.uniform(0.3, 4.0, size=n_components)
        scales[:, 1, 1] = rng.uniform(0.3, 4.0, size=n_components)
        scales[:, 1, 0] = rng.uniform(-2.0, 2.0, size=n_components)
    else:
        raise ValueError(f"unknown mixture kind {kind!r}")
    return Mixture2D(means=means, scales=scales, log_weights=log_weights)


def random_targets(rng: np.random.Generator, mixture: Mixture2D, n: int) -> np.ndarray:
    idx = rng.integers(0, mixture.means.shape[0], size=n)
    jitter = rng.uniform(-4.0, 4.0, size=(n, 2))
    return mixture.means[idx] + jitter


def _flatten_params(m: Mixture2D) -> np.ndarray:
    if m.kind == DIAG:
        scale_part = m.scales.ravel()
    else:
        scale_part = np.stack([m.scales[:, 0, 0], m.scales[:, 1, 0], m.scales[:, 1, 1]], axis=1).ravel()
    return np.concatenate([m.means.ravel(), scale_part, m.log_weights])


def _unflatten_params(vec: np.ndarray, template: Mixture2D) -> Mixture2D:
    n = template.means.shape[0]
    means = vec[: 2 * n].reshape(n, 2)
    if template.kind == DIAG:
        scales = vec[2 * n : 4 * n].reshape(n, 2)
        rest = 4 * n
    else:
        tri = vec[2 * n : 5 * n].reshape(n, 3)
        scales = np.zeros((n, 2, 2))
        scales[:, 0, 0] = tri[:, 0]
        scales[:, 1, 0] = tri[:, 1]
        scales[:, 1, 1] = tri[:, 2]
        rest = 5 * n
    log_weights = vec[rest : rest + n]
    return Mixture2D(means=means, scales=scales, log_weights=log_weights)


def _flatten_grad(m: Mixture2D, grad) -> np.ndarray:
    if m.kind == DIAG:
        scale_part = grad.scales.ravel()
    else:
        scale_part = np.stack(
            [grad.scales[:, 0, 0], grad.scales[:, 1, 0], grad.scales[:, 1, 1]], axis=1
        ).ravel()
    return np.concatenate([grad.means.ravel(), scale_part, grad.log_weights])


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def check_mixture_grad(m: Mixture2D, targets: np.ndarray, h: float = 1e-5) -> float:
    """Relative error between analytic and central-difference NLL gradients."""
    vec = _flatten_params(m)
    analytic = _flatten_grad(m, nll_grad(m, targets))
    fd = np.zeros_like(vec)
    for i in range(len(vec)):
        hi = h * max(1.0, abs(vec[i]))
        plus = vec.copy()
        plus[i] += hi
        minus = vec.copy()
        minus[i] -= hi
        fd[i] = (
            nll_loss(_unflatten_params(plus, m), targets)
            - nll_loss(_unflatten_params(minus, m), targets)
        ) / (2.0 * hi)
    return relative_error(analytic, fd)


def audit_mixture_core(
    n_instances: int = 100, seed: int = 0, tolerance: float = 1e-4
) -> AuditResult:
    worst = 0.0
    for i in range(n_instances):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i,))))
        kind = DIAG if i % 2 == 0 else CHOL
        m = random_mixture(rng, int(rng.integers(1, 9)), kind)
        targets = random_targets(rng, m, int(rng.integers(1, 4)))
        worst = max(worst, check_mixture_grad(m, targets))
    return AuditResult(
        name="mixture-core nll_grad vs central differences",
        n_instances=n_instances,
        max_rel_err=worst,
        tolerance=tolerance,
    )


def check_model_grad(
    model: torch.nn.Module,
    loss_fn,
    n_coords: int = 30,
    seed: int = 0,
    h: float = 1e-5,
) -> float:
    """Spot-check reverse-mode gradients of loss_fn(model) in float64.

    Samples n_coords parameter coordinates, central-differences each, and
    returns the norm-based relative error over the sampled subvector.

    The step must thread between two failure modes: piecewise-linear
    activations (ReLU) make large steps likely to straddle a kink, where
    central differences measure a chord across two linear pieces, while
    tiny steps lose the difference to float64 round-off. 1e-5 keeps both
    effects orders of magnitude below the audit tolerances.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss = loss_fn(model)
    loss.backward()
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.Generator(np.random.PCG64(seed))
    coords = rng.choice(total, size=min(n_coords, total), replace=False)
    analytic = np.zeros(len(coords))
    fd = np.zeros(len(coords))
    offsets = np.cumsum([0] + sizes)
    with torch.no_grad():
        for out_i, c in enumerate(coords):
            p_idx = int(np.searchsorted(offsets, c, side="right") - 1)
            flat_idx = int(c - offsets[p_idx])
            p = params[p_idx]
            grad = p.grad.reshape(-1)[flat_idx] if p.grad is not None else 0.0
            analytic[out_i] = float(grad)
            orig = float(p.reshape(-1)[flat_idx])
            hi = h * max(1.0, abs(orig))
            p.reshape(-1)[flat_idx] = orig + hi
            f_plus = float(loss_fn(model))
            p.reshape(-1)[flat_idx] = orig - hi
            f_minus = float(loss_fn(model))
            p.reshape(-1)[flat_idx] = orig
            fd[out_i] = (f_plus - f_minus) / (2.0 * hi)
    return relative_error(analytic, fd)


def audit_pyramid_model(
    n_instances: int = 5,
    seed: int = 0,
    n_coords: int = 30,
    tolerance: float = 1e-3,
) -> AuditResult:
    """End-to-end FD audit of the pyramid mixture loss on the audit preset."""
    from ..geometry import MAP_X_MAX, MAP_X_MIN, MAP_Y_MAX, MAP_Y_MIN
    from .pyramid import PyramidConfig, PyramidMixtureNet, pdpc_loss

    cfg = PyramidConfig.audit()
    worst = 0.0
    for i in range(n_instances):
        torch.manual_seed(seed + 1000 * i)
        model = PyramidMixtureNet(cfg).double()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i,))))
        b = 2
        layout = torch.from_numpy(rng.uniform(0.0, 1.0, size=(b, cfg.in_channels, *cfg.input_hw)))
        command = torch.from_numpy(rng.standard_normal((b, cfg.command_dim)))
        tx = rng.uniform(MAP_X_MIN, MAP_X_MAX, size=(b, 2))
        ty = rng.uniform(MAP_Y_MIN, MAP_Y_MAX, size=(b, 2))
        targets = torch.from_numpy(np.stack([tx, ty], axis=-1))
        mask = torch.from_numpy((rng.random((b, 2)) < 0.8).astype(np.float64))
        mask[:, 0] = 1.0

        def loss_fn(m):
            return pdpc_loss(m(layout, command), targets, mask)

        worst = max(worst, check_model_grad(model, loss_fn, n_coords=n_coords, seed=seed + i))
    return AuditResult(
        name="pyramid loss gradient vs central differences",
        n_instances=n_instances,
        max_rel_err=worst,
        tolerance=tolerance,
    )
