"""
Regularized maximum-likelihood estimation of transitions and policies.

Objective:
    L_fit + lambda_vol * R_vol + lambda_pol * R_pol + lambda_anchor * L_anchor

  L_fit     mean negative log-likelihood of the mixture
            sum_a pi(a | o, e) p(o' | o, a)
  R_vol     mean over data states of log det(G(o) + eps I), G the embedded
            Gram of the k model transitions at o
  R_pol     mean over data states of [tau - log det(Pi Pi^T + eps I)]_+
  L_anchor  mean negative log-probability of labeled actions

Two parameterizations share the policy logits: tabular next-state logits
for finite spaces, and a gaussian head (per-(o, a) means, shared log-sigma)
for continuous ones. Gradients are analytic except the gaussian-head R_vol
derivative in log-sigma, which uses central differences.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import log_softmax, logsumexp, softmax

from config import logger
from utils.errors import (
    DIMENSION_MISMATCH,
    DIVERGED,
    INCOMPATIBLE_KERNEL,
    INVALID_PARAMS,
    NUMERICAL_FAULT,
    ZERO_DENSITY,
    LatentActError,
)
from utils.rng import stream

from .align import (
    PermutationAssignment,
    StateGraph,
    StatewiseFactorization,
    align_statewise,
    apply_anchor,
    resolve_anchor,
)
from .embedding import Categorical, Gaussian, Kernel, gram_matrix, median_bandwidth
from .env_core import AnchorDataset, EnvShape, LatentEnv, TrajectoryBatch
from .nmf_minvol import all_permutations, best_permutation_error, permutation_tv_errors

_DENSITY_FLOOR = 1e-300
_FD_STEP = 1e-5


# ── parameters ──────────────────────────────────────────────────────────────


def _softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the gradient g w.r.t. p = softmax(logits)."""
    return p * (g - np.sum(p * g, axis=-1, keepdims=True))


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """logits[s, e, a]; pi(a | o_s, e) = softmax over a."""

    logits: np.ndarray
    states: tuple

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=float)
        if logits.ndim != 3 or logits.shape[0] != len(self.states):
            raise LatentActError(
                DIMENSION_MISMATCH, f"policy logits must be (S, m, k), got {logits.shape}"
            )
        object.__setattr__(self, "logits", logits)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    def matrix(self, state: int) -> np.ndarray:
        """Pi(o) as a (k x m) column-stochastic matrix."""
        return self.probs[self.states.index(state)].T

    def step(self, alpha: float, grad: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.logits + alpha * grad, self.states)


@dataclass(frozen=True, eq=False)
class TabularTransition:
    """logits[s, a, o']; p(o' | o_s, a) = softmax over o'."""

    logits: np.ndarray
    states: tuple

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=float)
        if logits.ndim != 3 or logits.shape[0] != len(self.states):
            raise LatentActError(
                DIMENSION_MISMATCH, f"transition logits must be (S, k, n), got {logits.shape}"
            )
        object.__setattr__(self, "logits", logits)

    @property
    def k(self) -> int:
        return self.logits.shape[1]

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    def matrix(self, state: int) -> np.ndarray:
        """T(o) as an (n x k) column-stochastic matrix."""
        return self.probs[self.states.index(state)].T

    def step(self, alpha: float, grad: np.ndarray) -> "TabularTransition":
        return TabularTransition(self.logits + alpha * grad, self.states)


@dataclass(frozen=True, eq=False)
class GaussianHead:
    """means[s, a] in R^d with shared isotropic sigma = exp(log_sigma)."""

    means: np.ndarray
    log_sigma: float
    states: tuple

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        if means.ndim != 3 or means.shape[0] != len(self.states):
            raise LatentActError(
                DIMENSION_MISMATCH, f"gaussian-head means must be (S, k, d), got {means.shape}"
            )
        if not np.isfinite(self.log_sigma):
            raise LatentActError(INVALID_PARAMS, "log_sigma must be finite")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "log_sigma", float(self.log_sigma))

    @property
    def k(self) -> int:
        return self.means.shape[1]

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    def distributions(self, state: int, deterministic: bool = False) -> list[Gaussian]:
        var = 0.0 if deterministic else self.sigma**2
        return [Gaussian(mu, var) for mu in self.means[self.states.index(state)]]

    def step(self, alpha: float, grad: tuple) -> "GaussianHead":
        d_means, d_log_sigma = grad
        return GaussianHead(
            self.means + alpha * d_means, self.log_sigma + alpha * d_log_sigma, self.states
        )


TransitionParams = TabularTransition | GaussianHead


# ── data ────────────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class TabularData:
    """counts[s, e, o'] aggregated from a finite-space batch."""

    counts: np.ndarray
    states: tuple

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def state_weights(self) -> np.ndarray:
        return self.counts.sum(axis=(1, 2)) / max(self.total, 1.0)


@dataclass(frozen=True, eq=False)
class GaussianData:
    s_idx: np.ndarray
    x: np.ndarray
    e: np.ndarray
    states: tuple
    m: int

    @property
    def total(self) -> float:
        return float(len(self.x))

    def state_weights(self) -> np.ndarray:
        return np.bincount(self.s_idx, minlength=len(self.states)) / max(self.total, 1.0)


def prepare_data(batch: TrajectoryBatch, shape: EnvShape):
    """Aggregate a batch into the form the matching parameterization consumes."""
    if len(batch) == 0:
        raise LatentActError(INVALID_PARAMS, "training data is empty")
    batch.validate(shape)
    index = {s: i for i, s in enumerate(shape.states)}
    s_idx = np.array([index[int(o)] for o in batch.o], dtype=int)
    if shape.kind == "finite":
        counts = np.zeros((len(shape.states), shape.m, shape.n))
        np.add.at(counts, (s_idx, batch.e, np.asarray(batch.o_next, dtype=int)), 1.0)
        return TabularData(counts, tuple(shape.states))
    x = np.asarray(batch.o_next, dtype=float).reshape(len(batch), -1)
    return GaussianData(s_idx, x, np.asarray(batch.e, dtype=int), tuple(shape.states), shape.m)


# ── hyperparameters and report ──────────────────────────────────────────────


@dataclass(frozen=True)
class HyperParams:
    k: int = 3
    lambda_vol: float = 1e-2
    lambda_pol: float = 1.0
    lambda_anchor: float = 0.01
    eps: float = 1e-6
    # None: k * log(1 / k) - 1
    tau: float | None = None
    step_size: float = 1.0
    max_iters: int = 500
    tol: float = 1e-10
    backtrack: float = 0.5
    max_backtracks: int = 40
    seed: int = 0
    kernel: str = "finite_delta"
    # gaussian kernel bandwidth; None: median heuristic on the data
    bandwidth: float | None = None
    deterministic_gram: bool = False
    init: str = "marginal"
    init_noise: float = 0.1
    freeze_theta: bool = False
    freeze_psi: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise LatentActError(INVALID_PARAMS, f"k must be >= 1, got {self.k}")
        for name in ("lambda_vol", "lambda_pol", "lambda_anchor"):
            if not getattr(self, name) >= 0:
                raise LatentActError(INVALID_PARAMS, f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.eps > 0:
            raise LatentActError(INVALID_PARAMS, f"eps must be > 0, got {self.eps}")
        if not self.step_size > 0:
            raise LatentActError(INVALID_PARAMS, "step_size must be > 0")
        if self.max_iters < 0 or self.max_backtracks < 1:
            raise LatentActError(INVALID_PARAMS, "iteration budgets must be >= 0")
        if not 0 < self.backtrack < 1:
            raise LatentActError(INVALID_PARAMS, "backtrack must lie in (0, 1)")
        if self.kernel not in ("finite_delta", "gaussian"):
            raise LatentActError(INVALID_PARAMS, f"unknown kernel {self.kernel!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise LatentActError(INVALID_PARAMS, "bandwidth must be > 0")
        if self.init != "marginal":
            raise LatentActError(INVALID_PARAMS, f"unknown init {self.init!r}")
        if self.init_noise < 0:
            raise LatentActError(INVALID_PARAMS, "init_noise must be >= 0")

    @property
    def resolved_tau(self) -> float:
        if self.tau is None:
            return self.k * np.log(1.0 / self.k) - 1.0
        return self.tau


@dataclass
class ObjectiveTerms:
    fit: float
    vol: float
    pol: float
    anchor: float
    total: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FitReport:
    initial: dict
    trace: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    iterations: int = 0
    converged: bool = False
    diverged: bool = False
    stop_reason: str = "budget"
    metrics: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        columns = ["step", "fit", "vol", "pol", "anchor", "total"]
        return pd.DataFrame(self.trace, columns=columns)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def to_dict(self) -> dict:
        return {
            "initial": self.initial,
            "final": self.final,
            "iterations": self.iterations,
            "converged": self.converged,
            "diverged": self.diverged,
            "stop_reason": self.stop_reason,
            "metrics": self.metrics,
        }


# ── objective terms ─────────────────────────────────────────────────────────


def _tabular_nll(theta: TabularTransition, psi: PolicyParams, data: TabularData, with_grad: bool):
    pi = psi.probs
    p = theta.probs
    q = np.einsum("sea,san->sen", pi, p)
    observed = data.counts > 0
    bad = observed & (q <= _DENSITY_FLOOR)
    if bad.any():
        s, e, o_next = (int(v[0]) for v in np.nonzero(bad))
        raise LatentActError(
            ZERO_DENSITY,
            f"mixture density underflows at (o={data.states[s]}, o'={o_next}, e={e})",
            triple=[data.states[s], o_next, e],
        )
    w = data.counts / data.total
    fit = -float(np.sum(w[observed] * np.log(q[observed])))
    if not with_grad:
        return fit, None, None
    ratio = np.where(observed, w / np.where(observed, q, 1.0), 0.0)
    A = np.einsum("sen,san->sea", ratio, p)
    g_psi = -pi * (A - w.sum(axis=2, keepdims=True))
    B = np.einsum("sen,sea->san", ratio, pi)
    g_theta = -p * (B - np.einsum("sea,sea->sa", pi, A)[:, :, None])
    return fit, g_theta, g_psi


def _gaussian_log_density(theta: GaussianHead, data: GaussianData):
    d = data.x.shape[1]
    var = theta.sigma**2
    diff = data.x[:, None, :] - theta.means[data.s_idx]
    sq = np.sum(diff**2, axis=2)
    return -0.5 * d * np.log(2.0 * np.pi * var) - sq / (2.0 * var), diff, sq


def _gaussian_nll(theta: GaussianHead, psi: PolicyParams, data: GaussianData, with_grad: bool):
    log_pi = log_softmax(psi.logits, axis=-1)[data.s_idx, data.e]
    log_p, diff, sq = _gaussian_log_density(theta, data)
    z = log_pi + log_p
    lq = logsumexp(z, axis=1)
    if not np.all(np.isfinite(lq)) or np.any(lq < np.log(_DENSITY_FLOOR)):
        i = int(np.flatnonzero(~np.isfinite(lq) | (lq < np.log(_DENSITY_FLOOR)))[0])
        raise LatentActError(
            ZERO_DENSITY,
            f"mixture density underflows at sample {i} (o={data.states[data.s_idx[i]]}, e={data.e[i]})",
            triple=[data.states[data.s_idx[i]], data.x[i].tolist(), int(data.e[i])],
        )
    N = data.total
    fit = -float(lq.mean())
    if not with_grad:
        return fit, None, None
    r = np.exp(z - lq[:, None])
    pi_i = np.exp(log_pi)
    g_psi = np.zeros_like(psi.logits)
    np.add.at(g_psi, (data.s_idx, data.e), -(r - pi_i) / N)
    var = theta.sigma**2
    g_means = np.zeros_like(theta.means)
    np.add.at(g_means, data.s_idx, -(r[:, :, None] * diff) / (N * var))
    d = data.x.shape[1]
    g_log_sigma = -float(np.sum(r * (sq / var - d)) / N)
    return fit, (g_means, g_log_sigma), g_psi


def nll_fit(theta: TransitionParams, psi: PolicyParams, data) -> float:
    """Mean negative log-likelihood of the mixture model on the data."""
    if data.total == 0:
        raise LatentActError(INVALID_PARAMS, "training data is empty")
    if isinstance(theta, TabularTransition):
        return _tabular_nll(theta, psi, data, with_grad=False)[0]
    return _gaussian_nll(theta, psi, data, with_grad=False)[0]


def _logdet(M: np.ndarray) -> float:
    sign, value = np.linalg.slogdet(M)
    if sign <= 0:
        raise LatentActError(NUMERICAL_FAULT, "regularized Gram is not positive definite")
    return float(value)


def model_kernel(theta: TransitionParams, data, hyper: HyperParams) -> Kernel:
    """Kernel the volume term embeds transitions with; the gaussian bandwidth
    falls back to the median heuristic on up to 1000 data points."""
    if isinstance(theta, TabularTransition):
        if hyper.kernel != "finite_delta":
            raise LatentActError(
                INCOMPATIBLE_KERNEL, "tabular transitions use the finite-delta kernel"
            )
        return Kernel.finite_delta(theta.logits.shape[2])
    if hyper.kernel != "gaussian":
        raise LatentActError(INCOMPATIBLE_KERNEL, "the gaussian head needs a gaussian kernel")
    bandwidth = hyper.bandwidth
    if bandwidth is None:
        sample = data.x[stream(hyper.seed, "bandwidth").permutation(len(data.x))[:1000]]
        bandwidth = median_bandwidth(sample)
    return Kernel.gaussian(bandwidth, theta.means.shape[2])


def _gaussian_vol_value(theta: GaussianHead, weights, kernel, eps, deterministic) -> float:
    k = theta.k
    value = 0.0
    for s_i, w in enumerate(weights):
        if w <= 0:
            continue
        G = gram_matrix(theta.distributions(theta.states[s_i], deterministic), kernel)
        value += w * _logdet(G + eps * np.eye(k))
    return value


def _reg_vol(theta: TransitionParams, data, kernel: Kernel, eps: float, deterministic: bool, with_grad: bool):
    weights = data.state_weights()
    k = theta.k
    eye = np.eye(k)
    if isinstance(theta, TabularTransition):
        p = theta.probs
        value = 0.0
        g_theta = np.zeros_like(theta.logits) if with_grad else None
        for s_i, w in enumerate(weights):
            if w <= 0:
                continue
            G = gram_matrix([Categorical(row) for row in p[s_i]], kernel)
            H = G + eps * eye
            value += w * _logdet(H)
            if with_grad:
                g_p = 2.0 * w * np.linalg.solve(H, p[s_i])
                g_theta[s_i] = _softmax_backward(p[s_i], g_p)
        return value, g_theta

    value = _gaussian_vol_value(theta, weights, kernel, eps, deterministic)
    if not with_grad:
        return value, None
    h2 = kernel.bandwidth**2
    s = h2 if deterministic else h2 + 2.0 * theta.sigma**2
    g_means = np.zeros_like(theta.means)
    for s_i, w in enumerate(weights):
        if w <= 0:
            continue
        mu = theta.means[s_i]
        G = gram_matrix(theta.distributions(theta.states[s_i], deterministic), kernel)
        M = np.linalg.inv(G + eps * eye)
        diff = mu[:, None, :] - mu[None, :, :]
        g_means[s_i] = -(2.0 * w / s) * np.einsum("ab,abd->ad", M * G, diff)
    if deterministic:
        g_log_sigma = 0.0
    else:
        up = GaussianHead(theta.means, theta.log_sigma + _FD_STEP, theta.states)
        down = GaussianHead(theta.means, theta.log_sigma - _FD_STEP, theta.states)
        g_log_sigma = (
            _gaussian_vol_value(up, weights, kernel, eps, False)
            - _gaussian_vol_value(down, weights, kernel, eps, False)
        ) / (2.0 * _FD_STEP)
    return value, (g_means, g_log_sigma)


def reg_vol(theta: TransitionParams, data, kernel: Kernel, eps: float, deterministic: bool = False) -> float:
    """Mean over data states of log det(G(o) + eps I)."""
    if not eps > 0:
        raise LatentActError(INVALID_PARAMS, f"eps must be > 0, got {eps}")
    return _reg_vol(theta, data, kernel, eps, deterministic, with_grad=False)[0]


def _reg_pol(psi: PolicyParams, weights: np.ndarray, eps: float, tau: float, with_grad: bool):
    pi = psi.probs
    k = pi.shape[2]
    value = 0.0
    g_psi = np.zeros_like(psi.logits) if with_grad else None
    for s_i, w in enumerate(weights):
        if w <= 0:
            continue
        Pi = pi[s_i].T
        H = Pi @ Pi.T + eps * np.eye(k)
        gap = tau - _logdet(H)
        if gap <= 0:
            continue
        value += w * gap
        if with_grad:
            g_Pi = -2.0 * w * np.linalg.solve(H, Pi)
            g_psi[s_i] = _softmax_backward(pi[s_i], g_Pi.T)
    return value, g_psi


def reg_pol(psi: PolicyParams, data, eps: float, tau: float) -> float:
    """Mean hinge [tau - log det(Pi Pi^T + eps I)]_+ over data states."""
    if not eps > 0:
        raise LatentActError(INVALID_PARAMS, f"eps must be > 0, got {eps}")
    if tau == -np.inf:
        return 0.0
    return _reg_pol(psi, data.state_weights(), eps, tau, with_grad=False)[0]


def policy_logdet(psi: PolicyParams, eps: float, weights=None) -> float:
    """Weighted mean of log det(Pi Pi^T + eps I) over states."""
    pi = psi.probs
    k = pi.shape[2]
    if weights is None:
        weights = np.full(len(psi.states), 1.0 / len(psi.states))
    return float(
        sum(w * _logdet(pi[i].T @ pi[i] + eps * np.eye(k)) for i, w in enumerate(weights) if w > 0)
    )


def anchor_loss(psi: PolicyParams, anchors: AnchorDataset, with_grad: bool = False):
    """-(1/r) sum_j log pi(a_j* | o_j, e_j); with_grad also returns d/dlogits."""
    if len(anchors) == 0:
        return (0.0, np.zeros_like(psi.logits)) if with_grad else 0.0
    index = {s: i for i, s in enumerate(psi.states)}
    try:
        s_idx = np.array([index[int(o)] for o in anchors.o], dtype=int)
    except KeyError as e:
        raise LatentActError(INVALID_PARAMS, f"anchor state {e} is not modeled") from e
    log_pi = log_softmax(psi.logits, axis=-1)
    r = len(anchors)
    loss = -float(log_pi[s_idx, anchors.e, anchors.a_star].mean())
    if not with_grad:
        return loss
    grad = np.zeros_like(psi.logits)
    pi = np.exp(log_pi[s_idx, anchors.e])
    onehot = np.eye(psi.logits.shape[2])[anchors.a_star]
    np.add.at(grad, (s_idx, anchors.e), -(onehot - pi) / r)
    return loss, grad


def objective(
    theta: TransitionParams,
    psi: PolicyParams,
    data,
    anchors: AnchorDataset,
    hyper: HyperParams,
    kernel: Kernel,
    with_grad: bool = False,
):
    """(terms, grad_theta, grad_psi) of the combined objective."""
    tabular = isinstance(theta, TabularTransition)
    nll = _tabular_nll if tabular else _gaussian_nll
    fit, g_theta, g_psi = nll(theta, psi, data, with_grad)
    vol, g_vol = (0.0, None)
    if hyper.lambda_vol > 0:
        vol, g_vol = _reg_vol(theta, data, kernel, hyper.eps, hyper.deterministic_gram, with_grad)
    pol, g_pol = (0.0, None)
    if hyper.lambda_pol > 0 and hyper.resolved_tau != -np.inf:
        pol, g_pol = _reg_pol(psi, data.state_weights(), hyper.eps, hyper.resolved_tau, with_grad)
    anchor, g_anchor = (0.0, None)
    if hyper.lambda_anchor > 0:
        anchor, g_anchor = anchor_loss(psi, anchors, with_grad=True)
    total = fit + hyper.lambda_vol * vol + hyper.lambda_pol * pol + hyper.lambda_anchor * anchor
    terms = ObjectiveTerms(fit=fit, vol=vol, pol=pol, anchor=anchor, total=float(total))
    if not with_grad:
        return terms, None, None
    if g_pol is not None:
        g_psi = g_psi + hyper.lambda_pol * g_pol
    if g_anchor is not None:
        g_psi = g_psi + hyper.lambda_anchor * g_anchor
    if g_vol is not None:
        if tabular:
            g_theta = g_theta + hyper.lambda_vol * g_vol
        else:
            g_theta = (
                g_theta[0] + hyper.lambda_vol * g_vol[0],
                g_theta[1] + hyper.lambda_vol * g_vol[1],
            )
    return terms, g_theta, g_psi


def gradient_check(
    theta: TabularTransition,
    psi: PolicyParams,
    data: TabularData,
    anchors: AnchorDataset,
    hyper: HyperParams,
    step: float = 1e-6,
) -> float:
    """Relative error |g - g_fd| / |g_fd| of the analytic tabular gradient
    against central differences of the total objective."""
    kernel = model_kernel(theta, data, hyper)
    _, g_theta, g_psi = objective(theta, psi, data, anchors, hyper, kernel, with_grad=True)
    analytic = np.concatenate([g_theta.ravel(), g_psi.ravel()])

    def total(theta_logits, psi_logits):
        t = TabularTransition(theta_logits, theta.states)
        p = PolicyParams(psi_logits, psi.states)
        return objective(t, p, data, anchors, hyper, kernel)[0].total

    numeric = np.empty_like(analytic)
    flat = np.concatenate([theta.logits.ravel(), psi.logits.ravel()])
    split = theta.logits.size
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += step
        down[i] -= step
        f_up = total(up[:split].reshape(theta.logits.shape), up[split:].reshape(psi.logits.shape))
        f_down = total(down[:split].reshape(theta.logits.shape), down[split:].reshape(psi.logits.shape))
        numeric[i] = (f_up - f_down) / (2.0 * step)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))


# ── training ────────────────────────────────────────────────────────────────


def initialize(data, hyper: HyperParams) -> tuple[TransitionParams, PolicyParams]:
    """Policy logits: small noise. Transitions: per-state empirical next-state
    marginal (tabular) or per-state sample mean and spread (gaussian head),
    plus noise."""
    rng = stream(hyper.seed, "estimator_init")
    S = len(data.states)
    k = hyper.k
    if isinstance(data, TabularData):
        m, n = data.counts.shape[1:]
        marginal = data.counts.sum(axis=1) + 1e-3
        marginal /= marginal.sum(axis=1, keepdims=True)
        logits = np.log(marginal)[:, None, :] + hyper.init_noise * rng.standard_normal((S, k, n))
        theta = TabularTransition(logits, data.states)
    else:
        m = data.m
        d = data.x.shape[1]
        means = np.zeros((S, k, d))
        spreads = []
        for s_i in range(S):
            x = data.x[data.s_idx == s_i]
            center = x.mean(axis=0) if len(x) else data.x.mean(axis=0)
            spread = x.std(axis=0).mean() if len(x) > 1 else data.x.std(axis=0).mean()
            spreads.append(max(float(spread), 1e-3))
            means[s_i] = center + spreads[-1] * rng.standard_normal((k, d))
        theta = GaussianHead(means, np.log(np.mean(spreads)), data.states)
    psi = PolicyParams(hyper.init_noise * rng.standard_normal((S, m, k)), data.states)
    return theta, psi


def _finite(grad) -> bool:
    if grad is None:
        return True
    if isinstance(grad, tuple):
        return all(np.all(np.isfinite(g)) for g in grad)
    return bool(np.all(np.isfinite(grad)))


def train(
    data,
    anchors: AnchorDataset | None,
    hyper: HyperParams,
    theta: TransitionParams | None = None,
    psi: PolicyParams | None = None,
) -> tuple[TransitionParams, PolicyParams, FitReport]:
    """Gradient descent on the combined objective with backtracking; an
    accepted step never increases the total."""
    anchors = anchors if anchors is not None else AnchorDataset([], [], [])
    if hyper.lambda_anchor > 0 and len(anchors) == 0:
        raise LatentActError(INVALID_PARAMS, "lambda_anchor > 0 needs a non-empty anchor set")
    if data.total == 0:
        raise LatentActError(INVALID_PARAMS, "training data is empty")
    theta0, psi0 = initialize(data, hyper)
    theta = theta if theta is not None else theta0
    psi = psi if psi is not None else psi0
    if theta.k != hyper.k or psi.logits.shape[2] != hyper.k:
        raise LatentActError(DIMENSION_MISMATCH, f"parameters do not have k = {hyper.k} actions")
    kernel = model_kernel(theta, data, hyper)

    terms, g_theta, g_psi = objective(theta, psi, data, anchors, hyper, kernel, with_grad=True)
    if not np.isfinite(terms.total):
        raise LatentActError(DIVERGED, "initial objective is not finite", terms=terms.to_dict())
    report = FitReport(initial=terms.to_dict())
    step = hyper.step_size
    max_step = 64.0 * hyper.step_size

    for it in range(1, hyper.max_iters + 1):
        if not (_finite(g_theta) and _finite(g_psi)):
            report.diverged = True
            report.stop_reason = "non-finite gradient"
            logger.warning(f"gradient became non-finite at step {it}; keeping last valid iterate")
            break
        t = step
        accepted = None
        for _ in range(hyper.max_backtracks):
            theta_try = theta if hyper.freeze_theta else theta.step(-t, g_theta)
            psi_try = psi if hyper.freeze_psi else psi.step(-t, g_psi)
            try:
                trial = objective(theta_try, psi_try, data, anchors, hyper, kernel, with_grad=True)
            except LatentActError as e:
                if e.code not in (ZERO_DENSITY, NUMERICAL_FAULT):
                    raise
                trial = None
            if trial is not None and np.isfinite(trial[0].total) and trial[0].total <= terms.total:
                accepted = (theta_try, psi_try, trial)
                break
            t *= hyper.backtrack
        if accepted is None:
            report.converged = True
            report.stop_reason = "no descent step"
            break
        theta, psi, (new_terms, g_theta, g_psi) = accepted
        decrease = terms.total - new_terms.total
        terms = new_terms
        report.iterations = it
        report.trace.append({"step": it, **terms.to_dict()})
        step = min(t / hyper.backtrack, max_step)
        if decrease <= hyper.tol * max(1.0, abs(terms.total)):
            report.converged = True
            report.stop_reason = "tolerance"
            break

    report.final = terms.to_dict()
    logger.info(
        f"training finished after {report.iterations} steps ({report.stop_reason}): "
        f"total={terms.total:.6f} fit={terms.fit:.6f}"
    )
    return theta, psi, report


# ── evaluation ──────────────────────────────────────────────────────────────


def _check_against(theta: TransitionParams, psi: PolicyParams, env: LatentEnv) -> bool:
    """Shape checks shared by both evaluations; returns whether the space is finite."""
    if tuple(env.states) != tuple(psi.states) or tuple(env.states) != tuple(theta.states):
        raise LatentActError(DIMENSION_MISMATCH, "parameter states differ from the environment's")
    if theta.k != env.k or psi.logits.shape[1:] != (env.m, env.k):
        raise LatentActError(
            DIMENSION_MISMATCH,
            f"parameters have k={theta.k}, policy {psi.logits.shape[1:]}; env k={env.k}, m={env.m}",
        )
    finite = env.space.is_finite
    if finite != isinstance(theta, TabularTransition):
        raise LatentActError(DIMENSION_MISMATCH, "parameterization does not match the observation space")
    return finite


def _factors(theta: TransitionParams, psi: PolicyParams, env: LatentEnv, finite: bool) -> dict:
    """state -> (T, T_ref, Pi, Pi_ref); gaussian heads compare means."""
    out = {}
    for s in env.states:
        if finite:
            T, T_ref = theta.matrix(s), env.T_star[s]
        else:
            T = theta.means[theta.states.index(s)].T
            T_ref = np.column_stack([d.mean for d in env.T_star[s]])
        out[s] = (T, T_ref, psi.matrix(s), env.Pi_star[s])
    return out


def evaluate(theta: TransitionParams, psi: PolicyParams, env: LatentEnv) -> dict:
    """Per-state best-permutation TV errors of the model's (T, Pi) against the
    environment, plus the errors under one shared permutation."""
    finite = _check_against(theta, psi, env)
    factors = _factors(theta, psi, env, finite)
    per_state = []
    for s, (T, T_ref, Pi, Pi_ref) in factors.items():
        perm, err = best_permutation_error(T, T_ref, Pi, Pi_ref)
        tv_T, tv_Pi = _errors(T, T_ref, Pi, Pi_ref, perm, finite)
        per_state.append({"state": s, "perm": list(perm), "max_abs": err, "tv_T": tv_T, "tv_Pi": tv_Pi})

    # one permutation for every state: the best by worst-case error
    best_global = None
    for perm in {tuple(row["perm"]) for row in per_state} | {tuple(range(env.k))}:
        errs = [_errors(*f, perm, finite) for f in factors.values()]
        worst = max(max(e) for e in errs)
        key = (worst, perm)
        if best_global is None or key < best_global[0]:
            best_global = (key, errs)
    (_, global_perm), errs = best_global
    metric = "tv_T" if finite else "mean_err_T"
    return {
        "per_state": per_state,
        "tv_T_max": max(row["tv_T"] for row in per_state),
        "tv_Pi_max": max(row["tv_Pi"] for row in per_state),
        "tv_T_mean": float(np.mean([row["tv_T"] for row in per_state])),
        "tv_Pi_mean": float(np.mean([row["tv_Pi"] for row in per_state])),
        "global_perm": list(global_perm),
        "tv_T_global": max(e[0] for e in errs),
        "tv_Pi_global": max(e[1] for e in errs),
        "T_metric": metric,
    }


def statewise_factorization(
    theta: TransitionParams, psi: PolicyParams, kernel: Kernel
) -> StatewiseFactorization:
    """The model's transitions and policy per state, as the alignment step
    consumes them."""
    if isinstance(theta, TabularTransition):
        transitions = {s: [Categorical(row) for row in theta.probs[i]] for i, s in enumerate(theta.states)}
    else:
        transitions = {s: theta.distributions(s) for s in theta.states}
    return StatewiseFactorization(
        transitions=transitions, Pi={s: psi.matrix(s) for s in psi.states}, kernel=kernel
    )


def evaluate_aligned(
    theta: TransitionParams,
    psi: PolicyParams,
    env: LatentEnv,
    anchors: AnchorDataset,
    graph: StateGraph,
    kernel: Kernel,
) -> dict:
    """TV errors after the model's labels are aligned across states over
    `graph` and pinned to the true actions by the anchors.

    Anchors are resolved per connected component. A component without anchors,
    or whose anchors leave permutations tied, keeps its root's labels; it is
    scored under its best shared permutation and counted as unresolved.
    Raises MARGIN_VIOLATION when an edge of the graph cannot be certified.
    """
    finite = _check_against(theta, psi, env)
    anchors.validate(env.k, env.m)
    factors = _factors(theta, psi, env, finite)
    facts = statewise_factorization(theta, psi, kernel)
    assignment = align_statewise(facts, graph)

    perms = {}
    components = []
    for comp, root in zip(assignment.components, assignment.roots):
        local = PermutationAssignment(
            perms={s: assignment.perms[s] for s in comp}, is_global=True, components=[comp], roots=[root]
        )
        mask = np.isin(anchors.o, comp)
        resolution = None
        if mask.any():
            subset = AnchorDataset(anchors.o[mask], anchors.e[mask], anchors.a_star[mask])
            resolution = resolve_anchor(facts, local, subset)
        resolved = resolution is not None and resolution.sigma is not None
        if resolved:
            local = apply_anchor(local, resolution.sigma, resolution.confidence)
        else:
            sigma = _closest_sigma(local, {s: factors[s] for s in comp}, finite)
            local = apply_anchor(local, sigma)
        perms.update(local.perms)
        components.append(
            {
                "states": comp,
                "root": root,
                "anchors": int(mask.sum()),
                "anchor_resolved": resolved,
                "sigma": list(local.sigma),
                "confidence": resolution.confidence if resolution is not None else None,
            }
        )

    per_state = []
    for s, f in factors.items():
        tv_T, tv_Pi = _errors(*f, perms[s], finite)
        per_state.append({"state": s, "perm": list(perms[s]), "tv_T": tv_T, "tv_Pi": tv_Pi})
    unresolved = sum(1 for c in components if not c["anchor_resolved"])
    if unresolved:
        logger.warning(f"{unresolved} component(s) scored without anchor resolution")
    return {
        "per_state": per_state,
        "tv_T_max": max(row["tv_T"] for row in per_state),
        "tv_Pi_max": max(row["tv_Pi"] for row in per_state),
        "components": components,
        "unresolved_components": unresolved,
        "inconsistent_edges": assignment.inconsistent_edges,
        "max_edge_cost": max((e["max_cost"] for e in assignment.edge_report), default=0.0),
        "T_metric": "tv_T" if finite else "mean_err_T",
    }


def _closest_sigma(assignment: PermutationAssignment, factors: dict, finite: bool) -> tuple:
    """Relabeling of a component's canonical labels that is closest to the
    truth over all its states."""
    best = None
    for sigma in all_permutations(len(next(iter(assignment.perms.values())))):
        worst = max(
            max(_errors(*f, np.asarray(assignment.perms[s])[sigma], finite)) for s, f in factors.items()
        )
        if best is None or worst < best[0]:
            best = (worst, tuple(int(x) for x in sigma))
    return best[1]


def _errors(T, T_ref, Pi, Pi_ref, perm, finite: bool) -> tuple[float, float]:
    if finite:
        return permutation_tv_errors(T, T_ref, Pi, Pi_ref, perm)
    perm = list(perm)
    mean_err = float(np.max(np.abs(T[:, perm] - T_ref)))
    tv_Pi = float(np.max(0.5 * np.abs(Pi[perm, :] - Pi_ref).sum(axis=0)))
    return mean_err, tv_Pi
