"""Fully connected CRF over control-point label distributions, solved by
unrolled mean-field iterations so it trains end to end.

The pairwise potential couples control-point displacements through a
Gaussian kernel with learnable per-pair filter weights and a learnable
label compatibility transform: two control points agree when they move
the same way, not when they move to the same place.  During message
passing the partner's displacement is taken to its current
probability-weighted (expected) endpoint, which keeps every stage
differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamStore
from .warp import LabelSpace, build_icosphere, soft_deform_tensor

OMEGA_INIT_SCALE = 0.2


@dataclass
class CrfConfig:
    iterations: int = 5
    gamma: float = 0.2
    lam_diag: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("mean-field iteration count must be >= 1")
        if self.gamma <= 0:
            raise ValueError("kernel bandwidth gamma must be positive")
        if any(d <= 0 for d in self.lam_diag):
            raise ValueError("kernel characterization matrix must be positive-definite")

    @property
    def lam(self) -> np.ndarray:
        return np.asarray(self.lam_diag, dtype=np.float64)


def init_crf_params(store: ParamStore, control_order: int, n_labels: int,
                    prefix: str = "crf") -> None:
    """Add the filter-weight and label-compatibility blocks to the store.

    Filter weights start from a geodesic Gaussian falloff; compatibility
    starts Potts-like (no cost for agreement, uniform otherwise).
    """
    points = build_icosphere(control_order).vertices
    geo = np.arccos(np.clip(points @ points.T, -1.0, 1.0))
    omega = np.exp(-(geo**2) / OMEGA_INIT_SCALE)
    mu = 1.0 - np.eye(n_labels)
    store.add(f"{prefix}.omega", omega)
    store.add(f"{prefix}.mu", mu)


def _offdiag(omega: Tensor) -> Tensor:
    n = omega.shape[0]
    return ad.where_const(~np.eye(n, dtype=bool), omega, 0.0)


def gaussian_message(q: Tensor, partner_endpoints: Tensor, labels: LabelSpace,
                     omega: Tensor, config: CrfConfig) -> Tensor:
    """Message passing: for each (control point, label), the filter-weighted
    sum over partners of kernel(label displacement, partner's current
    expected displacement) times the partner's probability of that label."""
    lam = config.lam
    n_c, n_l = labels.endpoints.shape[:2]
    centers = build_icosphere(labels.control_order).vertices
    disp = labels.endpoints - centers[:, None, :]  # (N_c, N_l, 3), constant
    lam_l = disp * lam
    a_const = (lam_l * disp).sum(axis=2)[:, :, None]  # (N_c, N_l, 1)
    partner_disp = partner_endpoints - centers
    b = ad.sum_((partner_disp * partner_disp) * lam, axis=1)  # (N_c,)
    cross = ad.reshape(lam_l.reshape(n_c * n_l, 3)
                       @ ad.transpose(partner_disp), (n_c, n_l, n_c))
    quad = (a_const + ad.reshape(b, (1, 1, -1))) - 2.0 * cross
    kernel = ad.exp(quad * (-1.0 / (2.0 * config.gamma**2)))
    qt = ad.reshape(ad.transpose(q), (1, n_l, -1))
    weighted = ad.reshape(_offdiag(omega), (n_c, n_c, 1))
    return ad.reshape(ad.bmm(kernel * qt, weighted), (n_c, n_l))


def compatibility_transform(messages: Tensor, mu: Tensor) -> Tensor:
    """Mix messages across labels with the learnable compatibility matrix."""
    return messages @ mu


def meanfield_step(u: Tensor, k1: Tensor, labels: LabelSpace, omega: Tensor,
                   mu: Tensor, config: CrfConfig) -> Tensor:
    """One full mean-field cycle; returns the next row-stochastic estimate."""
    endpoints = soft_deform_tensor(labels, k1)
    msg = gaussian_message(k1, endpoints, labels, omega, config)
    compat = compatibility_transform(msg, mu)
    updated = u - compat
    if not np.all(np.isfinite(updated.value)):
        raise FloatingPointError("non-finite values after the CRF update stage")
    return ad.softmax_rows(updated)


def crf_forward_tensor(u: Tensor, labels: LabelSpace, omega: Tensor,
                       mu: Tensor, config: CrfConfig):
    """Run the unrolled mean-field iterations.

    Returns the regularized probabilities and the deformed control grid
    they induce, both on the tape.
    """
    k = ad.softmax_rows(u)
    for _ in range(config.iterations):
        k = meanfield_step(u, k, labels, omega, mu, config)
    return k, soft_deform_tensor(labels, k)


def crf_forward(u: np.ndarray, labels: LabelSpace, store: ParamStore,
                config: CrfConfig, prefix: str = "crf"):
    q_bar, endpoints = crf_forward_tensor(
        ad.constant(u), labels, store[f"{prefix}.omega"],
        store[f"{prefix}.mu"], config,
    )
    return q_bar.value, endpoints.value


def crf_energy(assignment: np.ndarray, q: np.ndarray, labels: LabelSpace,
               omega: np.ndarray, mu: np.ndarray, config: CrfConfig) -> float:
    """Energy of a hard label assignment: negative log unaries plus the
    pairwise compatibility-weighted Gaussian kernel over assigned
    displacements."""
    n = len(assignment)
    idx = np.arange(n)
    energy = float(-np.log(q[idx, assignment]).sum())
    centers = build_icosphere(labels.control_order).vertices[:n]
    pts = labels.endpoints[idx, assignment] - centers  # (N_c, 3)
    lam = config.lam
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = pts[i] - pts[j]
            k_g = omega[i, j] * np.exp(-(d * lam * d).sum() / (2 * config.gamma**2))
            energy += mu[assignment[i], assignment[j]] * k_g
    return energy


def meanfield_reference(u: np.ndarray, labels: LabelSpace, omega: np.ndarray,
                        mu: np.ndarray, config: CrfConfig,
                        iterations: int | None = None):
    """Naive dense double-loop mean field, the oracle for the staged
    implementation.  Returns the per-iteration trace of estimates."""
    def softmax(x):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    t_total = config.iterations if iterations is None else iterations
    n_c, n_l = u.shape
    lam = config.lam
    centers = build_icosphere(labels.control_order).vertices
    k = softmax(u)
    trace = []
    for _ in range(t_total):
        # expected endpoints under the current estimate
        endpoints = np.empty((n_c, 3))
        for j in range(n_c):
            e = (k[j][:, None] * labels.endpoints[j]).sum(axis=0)
            norm = np.linalg.norm(e)
            if norm < 1e-6:
                e = labels.endpoints[j, np.argmax(k[j])]
                norm = 1.0
            endpoints[j] = e / norm
        msg = np.zeros((n_c, n_l))
        for i in range(n_c):
            for kk in range(n_l):
                total = 0.0
                for j in range(n_c):
                    if j == i:
                        continue
                    d = (labels.endpoints[i, kk] - centers[i]) \
                        - (endpoints[j] - centers[j])
                    g = np.exp(-(d * lam * d).sum() / (2 * config.gamma**2))
                    total += omega[i, j] * g * k[j, kk]
                msg[i, kk] = total
        compat = msg @ mu
        k = softmax(u - compat)
        trace.append(k.copy())
    return trace
