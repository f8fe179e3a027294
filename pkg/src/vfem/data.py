"""Domain types: column layout, block-missing masks, client views, parameters.

Clients are indexed 1..K throughout the public API; the first client holds
the response vector and doubles as the coordinator. A sample is either fully
observed or fully missing within a client's column block, and masked entries
are stored as NaN so that any accidental read poisons the result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateVariance


@dataclass(frozen=True)
class BlockLayout:
    """Column partition of the p covariates across K clients."""

    client_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.client_dims)
        if len(dims) < 1:
            raise ValueError("need at least one client")
        if any(d < 1 for d in dims):
            raise ValueError("every client must hold at least one column")
        object.__setattr__(self, "client_dims", dims)

    @property
    def num_clients(self) -> int:
        return len(self.client_dims)

    @property
    def total_dim(self) -> int:
        return sum(self.client_dims)

    @property
    def server_client(self) -> int:
        # the response lives with the first client
        return 1

    @property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for d in self.client_dims:
            out.append(acc)
            acc += d
        return tuple(out)

    def dim(self, k: int) -> int:
        return self.client_dims[k - 1]

    def block_slice(self, k: int) -> slice:
        off = self.offsets[k - 1]
        return slice(off, off + self.client_dims[k - 1])

    def block_columns(self, k: int) -> np.ndarray:
        s = self.block_slice(k)
        return np.arange(s.start, s.stop)

    def split(self, vec: np.ndarray) -> list[np.ndarray]:
        """Split a length-p vector into per-client blocks."""
        vec = np.asarray(vec)
        if vec.shape[-1] != self.total_dim:
            raise ValueError(f"expected last dim {self.total_dim}, got {vec.shape}")
        return [vec[..., self.block_slice(k)] for k in self.clients()]

    def concat(self, blocks: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(b, dtype=float) for b in blocks], axis=-1)

    def clients(self) -> range:
        return range(1, self.num_clients + 1)

    def stack_columns(self, client_ids: Sequence[int]) -> np.ndarray:
        """Column indices of the given clients' blocks, in client order."""
        if len(client_ids) == 0:
            return np.empty(0, dtype=int)
        return np.concatenate([self.block_columns(k) for k in client_ids])


class MissingMask:
    """Per-sample, per-client block-missingness indicators (True = missing)."""

    def __init__(self, indicators: np.ndarray):
        m = np.asarray(indicators, dtype=bool)
        if m.ndim != 2:
            raise ValueError("mask must be (n, K)")
        m = m.copy()
        m.setflags(write=False)
        self.indicators = m

    @property
    def n(self) -> int:
        return self.indicators.shape[0]

    @property
    def num_clients(self) -> int:
        return self.indicators.shape[1]

    def missing_clients(self, i: int) -> tuple[int, ...]:
        return tuple(int(k) + 1 for k in np.flatnonzero(self.indicators[i]))

    def observed_clients(self, i: int) -> tuple[int, ...]:
        return tuple(int(k) + 1 for k in np.flatnonzero(~self.indicators[i]))

    def q(self, i: int, layout: BlockLayout) -> int:
        """Number of missing covariates for sample i."""
        return int(sum(layout.dim(k) for k in self.missing_clients(i)))

    def missing_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.indicators[:, k - 1])

    def observed_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(~self.indicators[:, k - 1])

    def complete_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.indicators.any(axis=1))

    def rate(self, k: int) -> float:
        return float(self.indicators[:, k - 1].mean())

    def patterns(self) -> list[tuple[tuple[int, ...], np.ndarray]]:
        """Group samples by their missing-client set.

        Returns (missing_ids, rows) pairs in a canonical (sorted) order; the
        empty pattern (fully observed rows) is included when present.
        """
        n, K = self.indicators.shape
        weights = 1 << np.arange(K)
        codes = self.indicators @ weights
        out = []
        for code in np.unique(codes):
            rows = np.flatnonzero(codes == code)
            key = tuple(int(k) + 1 for k in np.flatnonzero(self.indicators[rows[0]]))
            out.append((key, rows))
        out.sort(key=lambda kr: kr[0])
        return out


@dataclass(frozen=True)
class ClientView:
    """One client's slice of the data.

    `x` is (n, p_k) with NaN on masked rows; the first client additionally
    holds the fully observed response.
    """

    client_index: int
    x: np.ndarray
    observed: np.ndarray  # bool (n,)
    y: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        obs = np.asarray(self.observed, dtype=bool)
        if x.ndim != 2 or obs.shape != (x.shape[0],):
            raise ValueError("x must be (n, p_k) and observed (n,)")
        x[~obs] = np.nan  # sentinel-poison masked blocks
        if not np.all(np.isfinite(x[obs])):
            raise ValueError("observed rows must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        obs = obs.copy()
        obs.setflags(write=False)
        object.__setattr__(self, "observed", obs)
        if self.y is not None:
            y = np.array(self.y, dtype=float)
            if y.shape != (x.shape[0],) or not np.all(np.isfinite(y)):
                raise ValueError("response must be finite with one entry per sample")
            y.setflags(write=False)
            object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def observed_x(self) -> np.ndarray:
        return self.x[self.observed]


@dataclass(frozen=True)
class VerticalDataset:
    """Vertically partitioned dataset: aligned samples, disjoint columns."""

    layout: BlockLayout
    mask: MissingMask
    clients: tuple[ClientView, ...]

    def __post_init__(self):
        if len(self.clients) != self.layout.num_clients:
            raise ValueError("one view per client required")
        n = self.clients[0].n
        for k, view in zip(self.layout.clients(), self.clients):
            if view.client_index != k:
                raise ValueError("client views out of order")
            if view.n != n:
                raise ValueError("clients must hold the same samples")
            if view.dim != self.layout.dim(k):
                raise ValueError(f"client {k} dimension mismatch")
            if not np.array_equal(~view.observed, self.mask.indicators[:, k - 1]):
                raise ValueError(f"client {k} observed rows disagree with mask")
        if self.clients[0].y is None:
            raise ValueError("first client must hold the response")

    @property
    def n(self) -> int:
        return self.clients[0].n

    @property
    def y(self) -> np.ndarray:
        return self.clients[0].y

    def view(self, k: int) -> ClientView:
        return self.clients[k - 1]

    def full_design(self) -> np.ndarray:
        """Pooled (n, p) design; only defined when nothing is missing."""
        if self.mask.indicators.any():
            raise ValueError("full design undefined under missingness")
        return np.concatenate([v.x for v in self.clients], axis=1)

    def subset(self, rows: np.ndarray) -> "VerticalDataset":
        rows = np.asarray(rows)
        mask = MissingMask(self.mask.indicators[rows])
        views = tuple(
            ClientView(
                client_index=v.client_index,
                x=np.nan_to_num(v.x[rows], nan=0.0),
                observed=v.observed[rows],
                y=None if v.y is None else v.y[rows],
            )
            for v in self.clients
        )
        return VerticalDataset(self.layout, mask, views)


def make_dataset(layout: BlockLayout, x_blocks: Sequence[np.ndarray],
                 y: np.ndarray, mask_indicators: np.ndarray) -> VerticalDataset:
    """Assemble a dataset from per-client blocks, a response, and a mask."""
    mask = MissingMask(mask_indicators)
    views = []
    for k in layout.clients():
        obs = ~mask.indicators[:, k - 1]
        block = np.array(x_blocks[k - 1], dtype=float)
        if block.shape[0] != mask.n:
            raise ValueError(f"client {k} block has {block.shape[0]} rows, "
                             f"expected {mask.n}")
        block[~obs] = 0.0  # value irrelevant; ClientView re-poisons with NaN
        views.append(ClientView(
            client_index=k, x=block, observed=obs,
            y=np.asarray(y, dtype=float) if k == 1 else None,
        ))
    return VerticalDataset(layout, mask, tuple(views))


_SYM_TOL = 1e-12
_EIG_TOL = -1e-10


def repair_psd(mat: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """Symmetrize and clamp eigenvalues below `floor` up to `floor`."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() >= floor:
        return sym
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


@dataclass(frozen=True)
class ModelParameters:
    """Full parameter collection: coefficients, client means/covariances, noise."""

    beta: np.ndarray
    mu: tuple[np.ndarray, ...]
    sigma_blocks: tuple[np.ndarray, ...]
    sigma2: float

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        mus = []
        for m in self.mu:
            m = np.array(m, dtype=float)
            m.setflags(write=False)
            mus.append(m)
        object.__setattr__(self, "mu", tuple(mus))
        blocks = []
        for s in self.sigma_blocks:
            s = np.array(s, dtype=float)
            if s.ndim != 2 or s.shape[0] != s.shape[1]:
                raise ValueError("covariance blocks must be square")
            asym = np.abs(s - s.T).max() if s.size else 0.0
            if asym > _SYM_TOL * max(1.0, np.abs(s).max()):
                raise ValueError(f"covariance block not symmetric (dev {asym:.2e})")
            s = 0.5 * (s + s.T)
            vals = np.linalg.eigvalsh(s)
            if s.size and vals.min() < _EIG_TOL:
                raise ValueError(f"covariance block indefinite (min eig {vals.min():.2e})")
            if s.size and vals.min() < 0.0:
                s = repair_psd(s, floor=0.0)
            s.setflags(write=False)
            blocks.append(s)
        object.__setattr__(self, "sigma_blocks", tuple(blocks))
        if not np.isfinite(self.sigma2) or self.sigma2 <= 0.0:
            raise DegenerateVariance(f"noise variance must be positive, got {self.sigma2}")
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def num_clients(self) -> int:
        return len(self.mu)

    @property
    def total_dim(self) -> int:
        return self.beta.shape[0]

    def beta_block(self, layout: BlockLayout, k: int) -> np.ndarray:
        return self.beta[layout.block_slice(k)]

    def replace(self, **kwargs) -> "ModelParameters":
        data = {
            "beta": self.beta, "mu": self.mu,
            "sigma_blocks": self.sigma_blocks, "sigma2": self.sigma2,
        }
        data.update(kwargs)
        return ModelParameters(**data)

    def distance(self, other: "ModelParameters") -> float:
        """Max-norm distance across all components."""
        parts = [np.abs(self.beta - other.beta).max(initial=0.0),
                 abs(self.sigma2 - other.sigma2)]
        for a, b in zip(self.mu, other.mu):
            parts.append(np.abs(a - b).max(initial=0.0))
        for a, b in zip(self.sigma_blocks, other.sigma_blocks):
            parts.append(np.abs(a - b).max(initial=0.0))
        return float(max(parts))


@dataclass(frozen=True)
class ConditionalMoments:
    """Conditional distribution of a sample's missing blocks given the rest.

    The conditional covariance is kept in factored form: block-diagonal
    marginal blocks minus a rank-one coupling outer(u, u) / d, where
    u stacks each missing client's (Sigma_k beta_k) and d is the marginal
    response variance beta' Sigma beta + sigma2. Nothing is materialized
    densely unless asked.
    """

    missing_clients: tuple[int, ...]
    mean: np.ndarray              # (q,)
    u: np.ndarray                 # (q,)
    d: float
    marginal_blocks: tuple[np.ndarray, ...]  # per missing client, (p_k, p_k)
    sigma2: float

    @property
    def q(self) -> int:
        return self.mean.shape[0]

    def is_empty(self) -> bool:
        return self.q == 0

    def dense_cov(self) -> np.ndarray:
        """Materialize the q x q conditional covariance (tests/small q only)."""
        if self.q == 0:
            return np.zeros((0, 0))
        cov = _block_diag(self.marginal_blocks)
        return cov - np.outer(self.u, self.u) / self.d

    def dense_marginal_cov(self) -> np.ndarray:
        return _block_diag(self.marginal_blocks) if self.q else np.zeros((0, 0))

    def diagonal_block(self, k: int) -> np.ndarray:
        """Conditional covariance block of missing client k."""
        pos = self.missing_clients.index(k)
        off = sum(b.shape[0] for b in self.marginal_blocks[:pos])
        blk = self.marginal_blocks[pos]
        u_k = self.u[off:off + blk.shape[0]]
        return blk - np.outer(u_k, u_k) / self.d

    def alpha(self) -> np.ndarray:
        """Conditional covariance applied to the coefficients that built it.

        For the matched coefficients, Sigma_cond beta = u - u (u'beta)/d
        collapses to u * sigma2 / d because d = beta'u + sigma2.
        """
        if self.q == 0:
            return np.zeros(0)
        return self.u * (self.sigma2 / self.d)

    def apply(self, beta_mis: np.ndarray) -> np.ndarray:
        """Sigma_cond @ beta_mis for an arbitrary stacked coefficient vector."""
        if self.q == 0:
            return np.zeros(0)
        parts, off = [], 0
        for blk in self.marginal_blocks:
            m = blk.shape[0]
            parts.append(blk @ beta_mis[off:off + m])
            off += m
        marg = np.concatenate(parts)
        return marg - self.u * (self.u @ beta_mis / self.d)

    def quad_form(self, beta_mis: np.ndarray) -> float:
        """beta' Sigma_cond beta for an arbitrary stacked coefficient vector."""
        if self.q == 0:
            return 0.0
        return float(beta_mis @ self.apply(beta_mis))


def _block_diag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    q = sum(b.shape[0] for b in blocks)
    out = np.zeros((q, q))
    off = 0
    for b in blocks:
        m = b.shape[0]
        out[off:off + m, off:off + m] = b
        off += m
    return out
