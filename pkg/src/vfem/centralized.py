"""Centralized (single-machine) kernels: conditional moments, expected
complete-data objective, its coefficient gradient, and the closed-form
maximization step.

These serve two roles: they are the lossless oracle the federated rounds are
checked against, and they power the oracle engine that iterates the closed
form directly. Per-sample work is vectorized over missingness patterns (there
are at most 2^K of them).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    BlockLayout,
    ConditionalMoments,
    ModelParameters,
    VerticalDataset,
    repair_psd,
)
from .errors import DegenerateVariance, SingularCovariance, SingularSystem

_D_FLOOR = 1e-12
_COND_LIMIT = 1e14


def conditional_moments(theta: ModelParameters, layout: BlockLayout,
                        missing_clients, observed_blocks, y_i: float) -> ConditionalMoments:
    """Moments of the missing blocks of one sample given its observed part and y.

    mean  = mu_mis + u * (y - mu_y) / d
    cov   = blockdiag(Sigma_k) - outer(u, u) / d
    where u = blockdiag(Sigma_k) beta_mis and d = beta_mis' u + sigma2.
    """
    missing = tuple(sorted(int(k) for k in missing_clients))
    if len(missing) == 0:
        return ConditionalMoments((), np.zeros(0), np.zeros(0), float(theta.sigma2),
                                  (), float(theta.sigma2))

    blocks = tuple(theta.sigma_blocks[k - 1] for k in missing)
    beta_mis = np.concatenate([theta.beta_block(layout, k) for k in missing])
    mu_mis = np.concatenate([theta.mu[k - 1] for k in missing])
    u = np.concatenate([theta.sigma_blocks[k - 1] @ theta.beta_block(layout, k)
                        for k in missing])
    d = float(beta_mis @ u + theta.sigma2)
    if d <= _D_FLOOR:
        raise DegenerateVariance(f"conditional denominator {d:.3e} <= {_D_FLOOR}")

    mu_y = float(mu_mis @ beta_mis)
    for k in sorted(set(layout.clients()) - set(missing)):
        x_k = np.asarray(observed_blocks[k], dtype=float)
        mu_y += float(x_k @ theta.beta_block(layout, k))
    mean = mu_mis + u * ((float(y_i) - mu_y) / d)
    return ConditionalMoments(missing, mean, u, d, blocks, float(theta.sigma2))


@dataclass(frozen=True)
class PatternGroup:
    """All samples sharing one missing-client set."""

    missing: tuple[int, ...]
    rows: np.ndarray
    cols: np.ndarray          # stacked columns of the missing blocks
    u: np.ndarray             # (q,) coupling vector Sigma beta over missing blocks
    d: float                  # marginal response variance for this pattern
    v4: float                 # beta' Sigma_cond beta at the E-step coefficients

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def q(self) -> int:
        return self.cols.shape[0]


@dataclass(frozen=True)
class EStepCache:
    """Everything the maximization needs, computed at one parameter point."""

    theta: ModelParameters
    x_tilde: np.ndarray       # (n, p) pseudo-complete design
    r: np.ndarray             # (n,) y minus mean-imputed fit
    d: np.ndarray             # (n,) per-sample denominators (sigma2 if complete)
    e: np.ndarray             # (n,) y minus pseudo-complete fit
    v4: np.ndarray            # (n,) conditional-covariance quadratic forms
    corrections: np.ndarray   # (p, p) summed embedded conditional covariances
    patterns: tuple[PatternGroup, ...]

    def alpha(self, group: PatternGroup) -> np.ndarray:
        """Conditional covariance times the E-step coefficients, one pattern."""
        return group.u * (self.theta.sigma2 / group.d)


def estep(theta: ModelParameters, data: VerticalDataset) -> EStepCache:
    """Impute every missing block by its conditional mean; accumulate the
    conditional-covariance corrections used by the maximization step."""
    layout, mask = data.layout, data.mask
    n, p = data.n, layout.total_dim
    beta, sigma2 = theta.beta, theta.sigma2
    y = data.y

    u_blocks = [theta.sigma_blocks[k - 1] @ theta.beta_block(layout, k)
                for k in layout.clients()]
    v1 = np.array([float(theta.beta_block(layout, k) @ u_blocks[k - 1])
                   for k in layout.clients()])

    # mean-imputed fit per client, never touching masked entries
    fit_bar = np.zeros(n)
    x_tilde = np.empty((n, p))
    for k in layout.clients():
        view = data.view(k)
        cols = layout.block_slice(k)
        bk = theta.beta_block(layout, k)
        base = float(theta.mu[k - 1] @ bk)
        contrib = np.full(n, base)
        obs = mask.observed_rows(k)
        contrib[obs] = view.x[obs] @ bk
        fit_bar += contrib
        x_tilde[obs, cols] = view.x[obs]

    d = sigma2 + mask.indicators @ v1
    if d.size and d.min() <= _D_FLOOR:
        raise DegenerateVariance(f"conditional denominator {d.min():.3e} <= {_D_FLOOR}")
    r = y - fit_bar

    corrections = np.zeros((p, p))
    v4 = np.zeros(n)
    groups = []
    for missing, rows in mask.patterns():
        if not missing:
            groups.append(PatternGroup((), rows, np.empty(0, dtype=int),
                                       np.zeros(0), float(sigma2), 0.0))
            continue
        cols = layout.stack_columns(missing)
        u = np.concatenate([u_blocks[k - 1] for k in missing])
        d_g = float(sigma2 + sum(v1[k - 1] for k in missing))
        scale = r[rows] / d_g
        for k in missing:
            ksl = layout.block_slice(k)
            x_tilde[rows, ksl] = theta.mu[k - 1] + np.outer(scale, u_blocks[k - 1])
        # embedded conditional covariance, identical for every row of the pattern
        cond = -np.outer(u, u) / d_g
        off = 0
        for k in missing:
            m = layout.dim(k)
            cond[off:off + m, off:off + m] += theta.sigma_blocks[k - 1]
            off += m
        corrections[np.ix_(cols, cols)] += rows.size * cond
        quad = float(d_g - sigma2)            # beta' Sigma_mis beta
        v4_g = quad - quad * quad / d_g       # subtract rank-one part
        v4[rows] = v4_g
        groups.append(PatternGroup(tuple(missing), rows, cols, u, d_g, v4_g))

    e = y - x_tilde @ beta
    return EStepCache(theta, x_tilde, r, d, e, v4, corrections, tuple(groups))


def q_value(theta: ModelParameters, theta_t: ModelParameters,
            data: VerticalDataset) -> float:
    """Expected complete-data objective at `theta`, imputations at `theta_t`.

    Additive constants are dropped; the data-dependent terms are averaged
    over samples while the log-determinant terms appear once.
    """
    cache = estep(theta_t, data)
    n = data.n
    layout = data.layout
    beta, sigma2 = theta.beta, theta.sigma2

    logdets = 0.0
    for s in theta.sigma_blocks:
        sign, logdet = np.linalg.slogdet(s)
        if sign <= 0 or not np.isfinite(logdet):
            raise SingularCovariance("covariance block has no valid log-determinant")
        logdets += logdet

    resid = data.y - cache.x_tilde @ beta
    penalty = float(beta @ cache.corrections @ beta)
    value = -0.5 * np.log(sigma2) - 0.5 * logdets
    value -= (float(resid @ resid) + penalty) / (2.0 * n * sigma2)

    for k in layout.clients():
        centered = cache.x_tilde[:, layout.block_slice(k)] - theta.mu[k - 1]
        sol = np.linalg.solve(theta.sigma_blocks[k - 1], centered.T)
        value -= float(np.sum(centered.T * sol)) / (2.0 * n)

    # trace of Sigma_k^{-1} times each pattern's conditional diagonal block
    for g in cache.patterns:
        if not g.missing:
            continue
        off = 0
        for k in g.missing:
            m = layout.dim(k)
            u_k = g.u[off:off + m]
            off += m
            cond_blk = theta_t.sigma_blocks[k - 1] - np.outer(u_k, u_k) / g.d
            tr = float(np.trace(np.linalg.solve(theta.sigma_blocks[k - 1], cond_blk)))
            value -= g.count * tr / (2.0 * n)
    return float(value)


def q_gradient_beta(theta_t: ModelParameters, data: VerticalDataset,
                    cache: EStepCache | None = None) -> np.ndarray:
    """Exact coefficient gradient of the expected complete-data objective,
    evaluated at the expansion point itself:

        g = (X~' e - corrections @ beta) / (n sigma2).

    Matches central finite differences of `q_value`; the per-sample form is
    the average of e_i x~_i minus the embedded conditional-covariance terms,
    all divided by sigma2.
    """
    if cache is None:
        cache = estep(theta_t, data)
    n = data.n
    raw = cache.x_tilde.T @ cache.e - cache.corrections @ theta_t.beta
    return raw / (n * theta_t.sigma2)


def solve_normal_equations(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a x = b, retrying once with a trace-scaled ridge when
    ill-conditioned; give up past condition number 1e14."""
    cond = np.linalg.cond(a)
    if np.isfinite(cond) and cond <= _COND_LIMIT:
        return np.linalg.solve(a, b)
    lam = 1e-8 * np.trace(a) / a.shape[0]
    ridged = a + lam * np.eye(a.shape[0])
    cond = np.linalg.cond(ridged)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularSystem(f"normal equations condition number {cond:.3e}")
    return np.linalg.solve(ridged, b)


def closed_form_m_step(theta_t: ModelParameters, data: VerticalDataset,
                       cache: EStepCache | None = None) -> ModelParameters:
    """One full maximization step in closed form.

    Coefficients solve the corrected normal equations; client means are
    pseudo-complete column means; client covariances add the per-pattern
    conditional blocks; the noise variance averages squared residuals plus
    the conditional quadratic forms. All right-hand sides use the
    iteration-t parameters (Jacobi-style updates).
    """
    if cache is None:
        cache = estep(theta_t, data)
    layout, n = data.layout, data.n

    gram = cache.x_tilde.T @ cache.x_tilde + cache.corrections
    beta_new = solve_normal_equations(gram, cache.x_tilde.T @ data.y)

    mu_new, sig_new = [], []
    for k in layout.clients():
        block = cache.x_tilde[:, layout.block_slice(k)]
        mu_new.append(block.mean(axis=0))
        centered = block - theta_t.mu[k - 1]
        scatter = centered.T @ centered
        for g in cache.patterns:
            if k in g.missing:
                off = sum(layout.dim(j) for j in g.missing if j < k)
                u_k = g.u[off:off + layout.dim(k)]
                scatter += g.count * (theta_t.sigma_blocks[k - 1]
                                      - np.outer(u_k, u_k) / g.d)
        sig_new.append(repair_psd(scatter / n))

    sigma2_new = float(np.mean(cache.e ** 2 + cache.v4))
    return ModelParameters(beta=beta_new, mu=tuple(mu_new),
                           sigma_blocks=tuple(sig_new), sigma2=sigma2_new)


def observed_loss(residuals: np.ndarray, corrections: np.ndarray) -> float:
    """Convergence-monitoring loss: mean of e_i^2 plus the per-sample
    conditional quadratic forms (zero on fully observed samples)."""
    e = np.asarray(residuals, dtype=float)
    v4 = np.asarray(corrections, dtype=float)
    if e.shape != v4.shape:
        raise ValueError("residuals and corrections must align")
    return float(np.mean(e ** 2 + v4))


def em_map(theta: ModelParameters, data: VerticalDataset,
           nuisance_free: bool = False) -> ModelParameters:
    """One application of the EM fixed-point map.

    With `nuisance_free=True` only the coefficients move; means, covariances
    and the noise variance stay pinned (the known-nuisance setting).
    """
    new = closed_form_m_step(theta, data)
    if nuisance_free:
        return theta.replace(beta=new.beta)
    return new


def observed_loglik(theta: ModelParameters, data: VerticalDataset) -> float:
    """Exact observed-data log-likelihood.

    Because blocks are independent across clients, (x_obs, y) is jointly
    Gaussian with y | x_obs ~ N(x_obs' beta_obs + mu_mis' beta_mis, d); the
    marginal integrates out the missing blocks in closed form.
    """
    layout, mask = data.layout, data.mask
    total = 0.0
    log2pi = np.log(2.0 * np.pi)
    for missing, rows in mask.patterns():
        observed = sorted(set(layout.clients()) - set(missing))
        d_g = theta.sigma2 + sum(
            float(theta.beta_block(layout, k)
                  @ theta.sigma_blocks[k - 1] @ theta.beta_block(layout, k))
            for k in missing)
        mean_y = sum(float(theta.mu[k - 1] @ theta.beta_block(layout, k))
                     for k in missing) * np.ones(rows.size)
        for k in observed:
            x_k = data.view(k).x[rows]
            mean_y += x_k @ theta.beta_block(layout, k)
            centered = x_k - theta.mu[k - 1]
            sign, logdet = np.linalg.slogdet(theta.sigma_blocks[k - 1])
            if sign <= 0:
                raise SingularCovariance("covariance block has no valid log-determinant")
            sol = np.linalg.solve(theta.sigma_blocks[k - 1], centered.T)
            quad = np.sum(centered.T * sol, axis=0)
            total += float(np.sum(-0.5 * (layout.dim(k) * log2pi + logdet + quad)))
        resid_y = data.y[rows] - mean_y
        total += float(np.sum(-0.5 * (log2pi + np.log(d_g) + resid_y ** 2 / d_g)))
    return total
