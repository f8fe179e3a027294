"""Fit orchestration: initialization, the iteration loop for both engines,
convergence handling, and prediction.

The federated engine runs the round-based protocol with a first-order
coefficient step; the oracle engine iterates the closed-form maximization on
pooled data. Both monitor the same loss (mean squared residual plus the
conditional-covariance corrections) and stop when successive losses differ
by less than the tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .centralized import (
    EStepCache,
    closed_form_m_step,
    estep,
    observed_loss,
    q_gradient_beta,
)
from .data import BlockLayout, ModelParameters, VerticalDataset, repair_psd
from .errors import (
    ConfigError,
    DegenerateVariance,
    InsufficientCompleteCases,
    InsufficientData,
)
from .federated import ClientAgent, ServerCoordinator
from .messages import WireSchema
from .transport import InProcessTransport, SocketTransport

ENGINES = ("federated", "oracle")
TRANSPORTS = ("inproc", "socket")
INIT_STRATEGIES = ("zeros", "cc-ols")


@dataclass
class FitConfig:
    max_iters: int = 2000
    tol: float = 1e-8
    learning_rate: Optional[float] = None   # None = plug-in spectral step
    init: Union[str, np.ndarray] = "zeros"
    seed: int = 0
    engine: str = "federated"
    transport: str = "inproc"
    trace_path: Optional[str] = None
    full_coupling: bool = False
    byte_accounting: bool = True
    beta_stall_tol: float = 1e-10
    divergence_patience: int = 10
    max_halvings: int = 8

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if not (self.tol > 0):
            raise ConfigError("tolerance must be positive")
        if self.learning_rate is not None and not (self.learning_rate > 0):
            raise ConfigError("learning rate must be positive")
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {ENGINES}")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"transport must be one of {TRANSPORTS}")
        if isinstance(self.init, str) and self.init not in INIT_STRATEGIES:
            raise ConfigError(f"init must be an array or one of {INIT_STRATEGIES}")


@dataclass
class FitResult:
    theta: ModelParameters
    loss_trace: np.ndarray
    iterations: int
    converged: bool
    reason: str
    beta_step_trace: np.ndarray
    eta: Optional[float]
    eta_halvings: int
    engine: str
    transport: Optional[str] = None
    comm: Optional[dict] = None

    def to_json_dict(self) -> dict:
        return {
            "engine": self.engine,
            "transport": self.transport,
            "converged": self.converged,
            "reason": self.reason,
            "iterations": self.iterations,
            "eta": self.eta,
            "eta_halvings": self.eta_halvings,
            "loss_trace": [float(v) for v in self.loss_trace],
            "beta_step_trace": [float(v) for v in self.beta_step_trace],
            "comm": self.comm,
            "theta": {
                "beta": self.theta.beta.tolist(),
                "mu": [m.tolist() for m in self.theta.mu],
                "sigma_blocks": [s.tolist() for s in self.theta.sigma_blocks],
                "sigma2": self.theta.sigma2,
            },
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "FitResult":
        th = obj["theta"]
        theta = ModelParameters(
            beta=np.asarray(th["beta"], dtype=float),
            mu=tuple(np.asarray(m, dtype=float) for m in th["mu"]),
            sigma_blocks=tuple(np.asarray(s, dtype=float) for s in th["sigma_blocks"]),
            sigma2=float(th["sigma2"]),
        )
        return cls(
            theta=theta,
            loss_trace=np.asarray(obj["loss_trace"], dtype=float),
            iterations=int(obj["iterations"]),
            converged=bool(obj["converged"]),
            reason=str(obj["reason"]),
            beta_step_trace=np.asarray(obj["beta_step_trace"], dtype=float),
            eta=None if obj["eta"] is None else float(obj["eta"]),
            eta_halvings=int(obj["eta_halvings"]),
            engine=str(obj["engine"]),
            transport=obj.get("transport"),
            comm=obj.get("comm"),
        )


@dataclass(frozen=True)
class IterationSnapshot:
    """Per-iteration internals exposed for lockstep verification."""

    t: int
    theta: ModelParameters           # iteration-start parameters
    x_tilde: np.ndarray
    e: np.ndarray
    alpha: dict                      # client -> (rows, (len(rows), p_k) array)
    grad: np.ndarray                 # exact objective gradient, length p
    sigma2_new: float
    loss: float


def initialize(data: VerticalDataset, cfg: FitConfig) -> ModelParameters:
    """Starting parameters: response variance, observed-row client moments
    (divisor m_k), and the configured coefficient start."""
    layout, mask = data.layout, data.mask
    if data.n < 2:
        raise InsufficientData("need at least two samples")

    mu0, sig0 = [], []
    for k in layout.clients():
        rows = mask.observed_rows(k)
        if rows.size < 2:
            raise InsufficientData(
                f"client {k} has {rows.size} observed rows; need at least 2")
        x_obs = data.view(k).x[rows]
        mu_k = x_obs.mean(axis=0)
        centered = x_obs - mu_k
        sig_k = centered.T @ centered / rows.size
        mu0.append(mu_k)
        sig0.append(repair_psd(sig_k))

    y = data.y
    sigma2_0 = float(np.mean((y - y.mean()) ** 2))
    if sigma2_0 <= 0.0:
        raise DegenerateVariance("response has zero variance")

    if isinstance(cfg.init, np.ndarray) or isinstance(cfg.init, (list, tuple)):
        beta0 = np.asarray(cfg.init, dtype=float)
        if beta0.shape != (layout.total_dim,):
            raise ConfigError("initial coefficients have the wrong length")
    elif cfg.init == "zeros":
        beta0 = np.zeros(layout.total_dim)
    else:  # complete-case least squares
        rows = mask.complete_rows()
        p = layout.total_dim
        if rows.size < p + 2:
            raise InsufficientCompleteCases(
                f"{rows.size} complete rows; need at least {p + 2}")
        x_cc = np.concatenate([data.view(k).x[rows] for k in layout.clients()],
                              axis=1)
        beta0, *_ = np.linalg.lstsq(x_cc, y[rows], rcond=None)

    return ModelParameters(beta=beta0, mu=tuple(mu0),
                           sigma_blocks=tuple(sig0), sigma2=sigma2_0)


def plug_in_learning_rate(theta0: ModelParameters) -> float:
    """2 / (largest + smallest eigenvalue) of the block-diagonal covariance."""
    eigs = np.concatenate([np.linalg.eigvalsh(s) for s in theta0.sigma_blocks])
    return float(2.0 / (eigs.max() + eigs.min()))


def _loss_quiet(loss: float, prev: Optional[float]) -> bool:
    # relative plateau check for the stagnation stop; the distributional
    # parameters keep settling after the coefficients freeze, so a frozen
    # coefficient step alone must not end the loop
    return prev is not None and abs(loss - prev) <= 1e-8 * max(1.0, abs(loss))


def _oracle_snapshot(t: int, theta: ModelParameters, cache: EStepCache,
                     data: VerticalDataset, loss: float) -> IterationSnapshot:
    layout = data.layout
    alpha: dict = {}
    for k in layout.clients():
        rows = data.mask.missing_rows(k)
        arr = np.zeros((rows.size, layout.dim(k)))
        for g in cache.patterns:
            if k in g.missing:
                off = sum(layout.dim(j) for j in g.missing if j < k)
                a_slice = cache.alpha(g)[off:off + layout.dim(k)]
                where = np.searchsorted(rows, g.rows)
                arr[where] = a_slice
        alpha[k] = (rows, arr)
    grad = q_gradient_beta(theta, data, cache)
    return IterationSnapshot(t=t, theta=theta, x_tilde=cache.x_tilde.copy(),
                             e=cache.e.copy(), alpha=alpha, grad=grad,
                             sigma2_new=loss, loss=loss)


def _fit_oracle(data: VerticalDataset, cfg: FitConfig, theta0: ModelParameters,
                inspect: Optional[Callable]) -> FitResult:
    theta = theta0
    losses: list[float] = []
    steps: list[float] = []
    prev: Optional[float] = None
    converged, reason = False, "max_iters"

    for t in range(cfg.max_iters):
        cache = estep(theta, data)
        loss = observed_loss(cache.e, cache.v4)
        if inspect is not None:
            inspect(_oracle_snapshot(t, theta, cache, data, loss))
        theta_new = closed_form_m_step(theta, data, cache)
        steps.append(float(np.linalg.norm(theta_new.beta - theta.beta)))
        theta = theta_new
        losses.append(loss)
        if prev is not None and abs(loss - prev) < cfg.tol:
            converged, reason = True, "loss"
            break
        if steps[-1] < cfg.beta_stall_tol and _loss_quiet(loss, prev):
            # frozen coefficients and a quiet loss: nothing left to move,
            # but the while-condition itself never fired
            converged, reason = False, "stalled"
            break
        prev = loss

    return FitResult(theta=theta, loss_trace=np.asarray(losses),
                     iterations=len(losses), converged=converged, reason=reason,
                     beta_step_trace=np.asarray(steps), eta=None,
                     eta_halvings=0, engine="oracle")


def _collect_theta(agents: dict, coord: ServerCoordinator,
                   layout: BlockLayout) -> ModelParameters:
    beta = np.concatenate([agents[k].beta for k in layout.clients()])
    mu = tuple(agents[k].mu.copy() for k in layout.clients())
    sig = tuple(agents[k].sigma.copy() for k in layout.clients())
    return ModelParameters(beta=beta, mu=mu, sigma_blocks=sig,
                           sigma2=coord.sigma2)


def _federated_snapshot(t: int, agents: dict, coord: ServerCoordinator,
                        layout: BlockLayout, loss: float) -> IterationSnapshot:
    beta_pre = np.concatenate([agents[k]._pre_update.beta for k in layout.clients()])
    mu_pre = tuple(agents[k]._pre_update.mu.copy() for k in layout.clients())
    sig_pre = tuple(agents[k]._pre_update.sigma.copy() for k in layout.clients())
    theta_pre = ModelParameters(beta=beta_pre, mu=mu_pre, sigma_blocks=sig_pre,
                                sigma2=coord._sigma2_pre)
    x_tilde = np.concatenate([agents[k].x_tilde for k in layout.clients()], axis=1)
    alpha = {k: (agents[k].mis_rows.copy(), agents[k].last_alpha.copy())
             for k in layout.clients()}
    grad_printed = np.concatenate([agents[k].last_gradient for k in layout.clients()])
    return IterationSnapshot(t=t, theta=theta_pre, x_tilde=x_tilde,
                             e=coord.last_residuals.copy(), alpha=alpha,
                             grad=grad_printed / coord._sigma2_pre,
                             sigma2_new=loss, loss=loss)


def _fit_federated(data: VerticalDataset, cfg: FitConfig, theta0: ModelParameters,
                   inspect: Optional[Callable]) -> FitResult:
    layout, mask = data.layout, data.mask
    eta = cfg.learning_rate if cfg.learning_rate is not None else plug_in_learning_rate(theta0)

    agents = {}
    for k in layout.clients():
        agent = ClientAgent(data.view(k), layout, mask, eta,
                            full_coupling=cfg.full_coupling)
        agent.load_params(theta0.beta_block(layout, k), theta0.mu[k - 1],
                          theta0.sigma_blocks[k - 1])
        agents[k] = agent

    schema = WireSchema(layout, mask, full_coupling=cfg.full_coupling)
    transport_cls = {"inproc": InProcessTransport, "socket": SocketTransport}[cfg.transport]
    transport = transport_cls(agents, schema, trace_path=cfg.trace_path,
                              byte_accounting=cfg.byte_accounting)
    coord = ServerCoordinator(data.y, layout, mask, theta0.sigma2, transport,
                              full_coupling=cfg.full_coupling)

    losses: list[float] = []
    steps: list[float] = []
    prev: Optional[float] = None
    best_loss = math.inf
    streak, halvings = 0, 0
    converged, reason = False, "max_iters"

    try:
        for t in range(cfg.max_iters):
            loss = coord.run_iteration()
            if inspect is not None:
                inspect(_federated_snapshot(t, agents, coord, layout, loss))
            losses.append(loss)
            steps.append(math.sqrt(sum(agents[k].last_beta_step ** 2
                                       for k in layout.clients())))

            finite = math.isfinite(loss)
            is_best = finite and loss < best_loss
            if is_best:
                best_loss = loss
            trigger = not finite
            if finite:
                streak = streak + 1 if (prev is not None and loss > prev) else 0
                trigger = streak >= cfg.divergence_patience

            stop = False
            restore, scale = False, None
            if trigger:
                restore = True
                if halvings < cfg.max_halvings:
                    halvings += 1
                    scale = 0.5
                    streak = 0
                else:
                    converged, reason, stop = False, "diverged", True
            elif prev is not None and abs(loss - prev) < cfg.tol:
                converged, reason, stop = True, "loss", True
            elif steps[-1] < cfg.beta_stall_tol and _loss_quiet(loss, prev):
                converged, reason, stop = False, "stalled", True

            coord.end_iteration(best=is_best, restore=restore, eta_scale=scale)
            if restore:
                prev = None
            else:
                prev = loss
            if stop:
                break
        coord.announce_convergence()
        theta = _collect_theta(agents, coord, layout)
        comm = transport.counters.snapshot()
    finally:
        transport.close()

    return FitResult(theta=theta, loss_trace=np.asarray(losses),
                     iterations=len(losses), converged=converged, reason=reason,
                     beta_step_trace=np.asarray(steps), eta=eta,
                     eta_halvings=halvings, engine="federated",
                     transport=cfg.transport, comm=comm)


def fit(data: VerticalDataset, cfg: FitConfig,
        inspect: Optional[Callable] = None) -> FitResult:
    """Run the configured engine to convergence and package the result."""
    theta0 = initialize(data, cfg)
    if cfg.engine == "oracle":
        return _fit_oracle(data, cfg, theta0, inspect)
    return _fit_federated(data, cfg, theta0, inspect)


@dataclass(frozen=True)
class PredictionResult:
    y_hat: np.ndarray
    mse: Optional[float]


def predict(theta: ModelParameters, data: VerticalDataset) -> PredictionResult:
    """Predict responses, filling missing blocks with their marginal means.

    Without the response there is no shrinkage information, and blocks are
    independent across clients, so the conditional mean of a missing block
    given the observed ones reduces to the client mean.
    """
    layout, mask = data.layout, data.mask
    y_hat = np.zeros(data.n)
    for k in layout.clients():
        bk = theta.beta_block(layout, k)
        contrib = np.full(data.n, float(theta.mu[k - 1] @ bk))
        rows = mask.observed_rows(k)
        contrib[rows] = data.view(k).x[rows] @ bk
        y_hat += contrib
    mse = None
    if data.clients[0].y is not None:
        mse = float(np.mean((data.y - y_hat) ** 2))
    return PredictionResult(y_hat=y_hat, mse=mse)
