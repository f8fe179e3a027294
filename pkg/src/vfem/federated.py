"""Round-based client/server state machines for the federated fit.

One iteration runs four logical rounds, mirroring the summary-statistic
exchange: an imputation round (per-client fits and quadratic forms up,
denominators and raw-fit residuals down), a residual round (pseudo-complete
fits up, residuals down), a coupling round (coupling vectors up, coupling
slices down, partial projections up, aggregated projections down), and a
variance round (per-sample scalars up). Clients update their coefficient
block with a first-order step and their distributional parameters in closed
form; the server owns the response, the noise variance, and the loss.

All updates within an iteration use the iteration-start snapshot. The
coordinator never stores covariate-dimensional raw data, only the enumerated
statistics; clients never see anything beyond the broadcast scalars.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import BlockLayout, ClientView, MissingMask, repair_psd
from .errors import DegenerateVariance, ProtocolDesync
from .messages import (
    CONTROL,
    ESTEP_BROADCAST,
    ESTEP_LOCAL_FIT,
    ESTEP_QUAD_FORM,
    MSTEP_AGGREGATED_PROJECTION,
    MSTEP_COUPLING_VEC,
    MSTEP_LOCAL_FIT,
    MSTEP_PARTIAL_PROJECTION,
    MSTEP_RESIDUAL_COUPLING,
    ROUND_CONTROL,
    ROUND_ESTEP,
    ROUND_MSTEP,
    ROUND_VARSTEP,
    SERVER_ID,
    VARSTEP_SCALAR,
    Message,
)

_D_FLOOR = 1e-12


@dataclass
class _Snapshot:
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


class ClientAgent:
    """Holds one client's covariate block and its local parameter estimates."""

    def __init__(self, view: ClientView, layout: BlockLayout, mask: MissingMask,
                 eta: float, full_coupling: bool = False):
        self.k = view.client_index
        self.layout = layout
        self.n = view.n
        self.eta = float(eta)
        self.full_coupling = full_coupling
        self.dim = view.dim

        self.obs_rows = mask.observed_rows(self.k)
        self.mis_rows = mask.missing_rows(self.k)
        self._x_obs = view.x[self.obs_rows]

        # public metadata: where my block sits inside each pattern's stack,
        # and the per-sample pattern membership of my missing rows
        self._stack_offset = np.zeros(self.n, dtype=int)
        self._pattern_id = np.full(self.n, -1, dtype=int)
        self._pattern_of_row: list[tuple[np.ndarray, int]] = []
        for missing, rows in mask.patterns():
            if self.k not in missing:
                continue
            off = sum(layout.dim(j) for j in missing if j < self.k)
            mine = rows  # every row of this pattern is missing on me
            self._stack_offset[mine] = off
            self._pattern_id[mine] = len(self._pattern_of_row)
            self._pattern_of_row.append((mine, off))

        self.beta: np.ndarray | None = None
        self.mu: np.ndarray | None = None
        self.sigma: np.ndarray | None = None
        self.x_tilde = np.zeros((self.n, self.dim))
        self.x_tilde[self.obs_rows] = self._x_obs

        self._u = np.zeros(self.dim)
        self._d: np.ndarray | None = None
        self._e: np.ndarray | None = None
        self.last_alpha = np.zeros((0, self.dim))
        self.last_gradient = np.zeros(self.dim)
        self.last_beta_step = 0.0
        self._pre_update: Optional[_Snapshot] = None
        self._best: Optional[_Snapshot] = None

        self._t = 0
        self._phase = "round_begin"

    def load_params(self, beta_k: np.ndarray, mu_k: np.ndarray,
                    sigma_k: np.ndarray) -> None:
        self.beta = np.array(beta_k, dtype=float)
        self.mu = np.array(mu_k, dtype=float)
        self.sigma = np.array(sigma_k, dtype=float)

    # -- message handling ---------------------------------------------------

    def _check(self, msg: Message, kind: str, phase: str) -> None:
        if self._phase != phase or msg.kind != kind or msg.t != self._t:
            raise ProtocolDesync(
                f"client {self.k} expected {phase!r} at t={self._t}, "
                f"got kind={msg.kind!r} t={msg.t}")

    def handle_message(self, msg: Message) -> list[Message]:
        if msg.kind == CONTROL:
            event = msg.payload.get("event")
            if event == "round_begin":
                self._check(msg, CONTROL, "round_begin")
                return self._begin_round()
            if event == "round_end":
                self._check(msg, CONTROL, "round_end")
                return self._end_round(msg)
            if event == "converged":
                self._phase = "done"
                return []
            raise ProtocolDesync(f"client {self.k}: unknown control event {event!r}")
        if msg.kind == ESTEP_BROADCAST:
            self._check(msg, ESTEP_BROADCAST, "estep_broadcast")
            return self._on_estep_broadcast(msg)
        if msg.kind == MSTEP_RESIDUAL_COUPLING:
            self._check(msg, MSTEP_RESIDUAL_COUPLING, "residual_coupling")
            return self._on_residual_coupling(msg)
        if msg.kind == MSTEP_AGGREGATED_PROJECTION:
            self._check(msg, MSTEP_AGGREGATED_PROJECTION, "aggregated_projection")
            return self._on_aggregated_projection(msg)
        raise ProtocolDesync(f"client {self.k}: unexpected kind {msg.kind!r}")

    def _begin_round(self) -> list[Message]:
        self._u = self.sigma @ self.beta
        v1 = float(self.beta @ self._u)
        fit_bar = np.full(self.n, float(self.mu @ self.beta))
        fit_bar[self.obs_rows] = self._x_obs @ self.beta
        self._phase = "estep_broadcast"
        return [
            Message(self._t, ROUND_ESTEP, self.k, ESTEP_LOCAL_FIT,
                    {"fit": fit_bar}),
            Message(self._t, ROUND_ESTEP, self.k, ESTEP_QUAD_FORM,
                    {"value": v1}),
        ]

    def _on_estep_broadcast(self, msg: Message) -> list[Message]:
        self._d = np.asarray(msg.payload["denom"], dtype=float)
        resid = np.asarray(msg.payload["resid"], dtype=float)
        if self.mis_rows.size:
            scale = resid[self.mis_rows] / self._d[self.mis_rows]
            self.x_tilde[self.mis_rows] = self.mu + np.outer(scale, self._u)
        fit = self.x_tilde @ self.beta
        self._phase = "residual_coupling"
        return [
            Message(self._t, ROUND_MSTEP, self.k, MSTEP_LOCAL_FIT, {"fit": fit}),
            Message(self._t, ROUND_MSTEP, self.k, MSTEP_COUPLING_VEC,
                    {"vec": self._u}),
        ]

    def _on_residual_coupling(self, msg: Message) -> list[Message]:
        if int(msg.payload["client"]) != self.k:
            raise ProtocolDesync(f"client {self.k} received a slice for another client")
        self._e = np.asarray(msg.payload["resid"], dtype=float)
        idx = np.asarray(msg.payload["idx"], dtype=int)
        slices = msg.payload["slices"]
        # the coupling slice and denominator are constant within a pattern;
        # compute each projection once and reuse the object
        per_pattern: dict[int, np.ndarray] = {}
        w_vecs = []
        for i, block in zip(idx, slices):
            pid = self._pattern_id[i]
            w = per_pattern.get(pid)
            if w is None:
                arr = np.asarray(block, dtype=float)
                if self.full_coupling:
                    off = self._stack_offset[i]
                    arr = arr[:, off:off + self.dim]
                w = arr @ self.beta / self._d[i]
                per_pattern[pid] = w
            w_vecs.append(w)
        self._phase = "aggregated_projection"
        return [Message(self._t, ROUND_MSTEP, self.k, MSTEP_PARTIAL_PROJECTION,
                        {"idx": idx, "vecs": w_vecs})]

    def _on_aggregated_projection(self, msg: Message) -> list[Message]:
        idx = np.asarray(msg.payload["idx"], dtype=int)
        vecs = msg.payload["vecs"]
        pos = {int(i): j for j, i in enumerate(idx)}
        per_pattern: dict[int, np.ndarray] = {}
        alpha = np.zeros((self.mis_rows.size, self.dim))
        for j, i in enumerate(self.mis_rows):
            pid = self._pattern_id[i]
            row = per_pattern.get(pid)
            if row is None:
                s_i = np.asarray(vecs[pos[int(i)]], dtype=float)
                off = self._stack_offset[i]
                row = self._u - s_i[off:off + self.dim]
                per_pattern[pid] = row
            alpha[j] = row
        self.last_alpha = alpha

        grad = (self.x_tilde.T @ self._e - alpha.sum(axis=0)) / self.n
        self.last_gradient = grad

        beta_old, mu_old, sigma_old = self.beta, self.mu, self.sigma
        self._pre_update = _Snapshot(beta_old.copy(), mu_old.copy(), sigma_old.copy())

        self.beta = beta_old + self.eta * grad
        self.last_beta_step = float(np.linalg.norm(self.beta - beta_old))

        mu_new = self.x_tilde.mean(axis=0)
        centered = self.x_tilde - mu_old
        scatter = centered.T @ centered
        for rows, _off in self._pattern_of_row:
            d_g = self._d[rows[0]]
            scatter += rows.size * (sigma_old - np.outer(self._u, self._u) / d_g)
        self.mu = mu_new
        self.sigma = repair_psd(scatter / self.n)

        v5 = alpha @ beta_old
        self._phase = "round_end"
        return [Message(self._t, ROUND_VARSTEP, self.k, VARSTEP_SCALAR,
                        {"idx": self.mis_rows, "vals": v5})]

    def _end_round(self, msg: Message) -> list[Message]:
        pay = msg.payload
        if pay.get("eta_scale") is not None:
            self.eta *= float(pay["eta_scale"])
        if pay.get("best"):
            self._best = self._pre_update
        if pay.get("restore"):
            snap = self._best or self._pre_update
            if snap is not None:
                self.beta = snap.beta.copy()
                self.mu = snap.mu.copy()
                self.sigma = snap.sigma.copy()
        self._t += 1
        self._phase = "round_begin"
        return []


class ServerCoordinator:
    """Owns the response vector, the noise variance, and round aggregation."""

    def __init__(self, y: np.ndarray, layout: BlockLayout, mask: MissingMask,
                 sigma2: float, transport, full_coupling: bool = False):
        self.y = np.asarray(y, dtype=float)
        self.layout = layout
        self.mask = mask
        self.sigma2 = float(sigma2)
        self.transport = transport
        self.full_coupling = full_coupling
        self.t = 0

        self.n = self.y.shape[0]
        self._mis_any = np.flatnonzero(mask.indicators.any(axis=1))
        self._patterns = [(missing, rows) for missing, rows in mask.patterns()
                          if missing]
        self._pattern_id = np.full(self.n, -1, dtype=int)
        self._pattern_q = []
        for pid, (missing, rows) in enumerate(self._patterns):
            self._pattern_id[rows] = pid
            self._pattern_q.append(sum(layout.dim(k) for k in missing))
        self.last_residuals: np.ndarray | None = None
        self.last_v4: np.ndarray | None = None
        self._sigma2_pre: float = self.sigma2
        self.best_sigma2: float = self.sigma2

    def _bcast(self, kind: str, round_name: str, payload: dict) -> None:
        for k in self.layout.clients():
            self.transport.send_to_client(
                k, Message(self.t, round_name, SERVER_ID, kind, dict(payload)))

    def _recv(self, k: int, kind: str) -> Message:
        msg = self.transport.recv_from_client(k)
        if msg.kind != kind or msg.t != self.t:
            raise ProtocolDesync(
                f"server expected {kind!r} t={self.t} from client {k}, "
                f"got {msg.kind!r} t={msg.t}")
        return msg

    def run_iteration(self) -> float:
        """Drive one full iteration; returns the new loss value."""
        K = self.layout.num_clients
        self._bcast(CONTROL, ROUND_CONTROL, {"event": "round_begin"})

        # imputation round: local fits + quadratic forms up, (d, r) down
        fit_bar = np.zeros(self.n)
        v1 = np.zeros(K)
        for k in self.layout.clients():
            fit_bar += np.asarray(self._recv(k, ESTEP_LOCAL_FIT).payload["fit"],
                                  dtype=float)
            v1[k - 1] = float(self._recv(k, ESTEP_QUAD_FORM).payload["value"])
        d = self.sigma2 + self.mask.indicators @ v1
        if d.size and d.min() <= _D_FLOOR:
            raise DegenerateVariance(f"conditional denominator {d.min():.3e}")
        r = self.y - fit_bar
        self._bcast(ESTEP_BROADCAST, ROUND_ESTEP, {"denom": d, "resid": r})

        # residual round: pseudo-complete fits + coupling vectors up
        fit = np.zeros(self.n)
        u_blocks: dict[int, np.ndarray] = {}
        for k in self.layout.clients():
            fit += np.asarray(self._recv(k, MSTEP_LOCAL_FIT).payload["fit"],
                              dtype=float)
            u_blocks[k] = np.asarray(
                self._recv(k, MSTEP_COUPLING_VEC).payload["vec"], dtype=float)
        e = self.y - fit

        # coupling round: slices of outer(U, U) down, projections up and back
        slices_per_client: dict[int, dict[int, np.ndarray]] = {
            k: {} for k in self.layout.clients()}
        coupling = {}
        for missing, rows in self._patterns:
            u_stack = np.concatenate([u_blocks[k] for k in missing])
            v_mat = np.outer(u_stack, u_stack)
            coupling[missing] = (rows, v_mat)
            off = 0
            for k in missing:
                width = self.layout.dim(k)
                block = v_mat if self.full_coupling else v_mat[:, off:off + width]
                for i in rows:
                    slices_per_client[k][int(i)] = block
                off += width
        for k in self.layout.clients():
            idx = self.mask.missing_rows(k)
            payload = {"client": k, "resid": e, "idx": idx,
                       "slices": [slices_per_client[k][int(i)] for i in idx]}
            self.transport.send_to_client(
                k, Message(self.t, ROUND_MSTEP, SERVER_ID,
                           MSTEP_RESIDUAL_COUPLING, payload))

        # partial projections are constant within a pattern; aggregate each
        # client's contribution once per pattern
        s_pat = [np.zeros(q) for q in self._pattern_q]
        for k in self.layout.clients():
            msg = self._recv(k, MSTEP_PARTIAL_PROJECTION)
            seen = set()
            for i, w in zip(msg.payload["idx"], msg.payload["vecs"]):
                pid = int(self._pattern_id[int(i)])
                if pid in seen:
                    continue
                seen.add(pid)
                s_pat[pid] += np.asarray(w, dtype=float)
        self._bcast(MSTEP_AGGREGATED_PROJECTION, ROUND_MSTEP,
                    {"idx": self._mis_any,
                     "vecs": [s_pat[self._pattern_id[int(i)]]
                              for i in self._mis_any]})

        # variance round: per-sample scalars up; new noise variance and loss
        v4 = np.zeros(self.n)
        for k in self.layout.clients():
            msg = self._recv(k, VARSTEP_SCALAR)
            iarr = np.asarray(msg.payload["idx"], dtype=int)
            if iarr.size:
                v4[iarr] += np.asarray(msg.payload["vals"], dtype=float)
        self.last_residuals = e
        self.last_v4 = v4
        self._sigma2_pre = self.sigma2
        loss = float(np.mean(e ** 2 + v4))
        self.sigma2 = loss
        return loss

    def end_iteration(self, best: bool = False, restore: bool = False,
                      eta_scale: float | None = None) -> None:
        if best:
            self.best_sigma2 = self._sigma2_pre
        if restore:
            self.sigma2 = self.best_sigma2
        payload: dict = {"event": "round_end", "loss": self.sigma2,
                         "best": bool(best), "restore": bool(restore)}
        if eta_scale is not None:
            payload["eta_scale"] = float(eta_scale)
        self._bcast(CONTROL, ROUND_CONTROL, payload)
        self.t += 1

    def announce_convergence(self) -> None:
        self._bcast(CONTROL, ROUND_CONTROL, {"event": "converged"})
