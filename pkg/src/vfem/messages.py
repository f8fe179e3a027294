"""Closed wire vocabulary for the federated rounds.

Every statistic that may cross a client boundary has exactly one message
kind here, and every kind has a shape validator tied to the (public)
layout and missingness pattern. Raw covariate blocks do not fit any
variant: sends are validated, so an attempt to smuggle an (n, p_k) block
fails before it reaches a channel.

Serialization is newline-delimited, self-describing text with a fixed key
order and 17-significant-digit floats, so records round-trip exactly and
traces are byte-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from .data import BlockLayout, MissingMask
from .errors import SchemaViolation

SERVER_ID = 0  # coordinator role of client 1

ESTEP_LOCAL_FIT = "estep_local_fit"
ESTEP_QUAD_FORM = "estep_quad_form"
ESTEP_BROADCAST = "estep_broadcast"
MSTEP_LOCAL_FIT = "mstep_local_fit"
MSTEP_COUPLING_VEC = "mstep_coupling_vec"
MSTEP_RESIDUAL_COUPLING = "mstep_residual_coupling"
MSTEP_PARTIAL_PROJECTION = "mstep_partial_projection"
MSTEP_AGGREGATED_PROJECTION = "mstep_aggregated_projection"
VARSTEP_SCALAR = "varstep_scalar"
CONTROL = "control"

MESSAGE_KINDS = frozenset({
    ESTEP_LOCAL_FIT, ESTEP_QUAD_FORM, ESTEP_BROADCAST,
    MSTEP_LOCAL_FIT, MSTEP_COUPLING_VEC, MSTEP_RESIDUAL_COUPLING,
    MSTEP_PARTIAL_PROJECTION, MSTEP_AGGREGATED_PROJECTION,
    VARSTEP_SCALAR, CONTROL,
})

CONTROL_EVENTS = frozenset({"round_begin", "round_end", "converged"})

ROUND_ESTEP = "estep"
ROUND_MSTEP = "mstep"
ROUND_VARSTEP = "varstep"
ROUND_CONTROL = "control"

_PAYLOAD_KEY_ORDER = {
    ESTEP_LOCAL_FIT: ("fit",),
    ESTEP_QUAD_FORM: ("value",),
    ESTEP_BROADCAST: ("denom", "resid"),
    MSTEP_LOCAL_FIT: ("fit",),
    MSTEP_COUPLING_VEC: ("vec",),
    MSTEP_RESIDUAL_COUPLING: ("client", "resid", "idx", "slices"),
    MSTEP_PARTIAL_PROJECTION: ("idx", "vecs"),
    MSTEP_AGGREGATED_PROJECTION: ("idx", "vecs"),
    VARSTEP_SCALAR: ("idx", "vals"),
    CONTROL: ("event", "loss", "best", "restore", "eta_scale"),
}


@dataclass(frozen=True)
class Message:
    t: int
    round: str
    sender: int
    kind: str
    payload: dict


def _fmt_float(v: float) -> str:
    if v != v or v in (float("inf"), float("-inf")):
        raise SchemaViolation("non-finite value in payload")
    return format(v, ".17g")


def _encode_array(arr: np.ndarray) -> str:
    # flat numeric vectors and matrices dominate traffic; format from
    # native floats (cheaper than numpy scalars)
    if arr.ndim == 1:
        if np.issubdtype(arr.dtype, np.integer):
            return "[" + ",".join(map(str, arr.tolist())) + "]"
        return "[" + ",".join(map(_fmt_float, arr.tolist())) + "]"
    if arr.ndim == 2 and np.issubdtype(arr.dtype, np.floating):
        return "[" + ",".join(
            "[" + ",".join(map(_fmt_float, row)) + "]"
            for row in arr.tolist()) + "]"
    return _encode_value(arr.tolist())


def _encode_value(value: Any, memo: dict | None = None) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return _fmt_float(float(value))
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, np.ndarray):
        return _encode_array(value)
    if isinstance(value, (list, tuple)):
        if memo is None:
            return "[" + ",".join(_encode_value(v) for v in value) + "]"
        # per-sample payload entries repeat the same array object across
        # samples of one missingness pattern; encode each object once
        parts = []
        for v in value:
            if isinstance(v, np.ndarray):
                key = id(v)
                text = memo.get(key)
                if text is None:
                    text = _encode_array(v)
                    memo[key] = text
                parts.append(text)
            else:
                parts.append(_encode_value(v, memo))
        return "[" + ",".join(parts) + "]"
    raise SchemaViolation(f"unserializable payload value of type {type(value)!r}")


def encode(msg: Message) -> str:
    """Canonical one-line encoding with a fixed key order."""
    keys = _PAYLOAD_KEY_ORDER.get(msg.kind)
    if keys is None:
        raise SchemaViolation(f"unknown message kind {msg.kind!r}")
    memo: dict = {}
    items = []
    for key in keys:
        if key in msg.payload:
            items.append(f'"{key}":{_encode_value(msg.payload[key], memo)}')
    extra = set(msg.payload) - set(keys)
    if extra:
        raise SchemaViolation(f"unexpected payload fields {sorted(extra)}")
    body = "{" + ",".join(items) + "}"
    return (f'{{"t":{int(msg.t)},"round":{json.dumps(msg.round)},'
            f'"from":{int(msg.sender)},"kind":{json.dumps(msg.kind)},'
            f'"payload":{body}}}\n')


def decode(line: str) -> Message:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as err:
        raise SchemaViolation(f"undecodable record: {err}") from None
    try:
        return Message(t=int(obj["t"]), round=str(obj["round"]),
                       sender=int(obj["from"]), kind=str(obj["kind"]),
                       payload=dict(obj["payload"]))
    except (KeyError, TypeError) as err:
        raise SchemaViolation(f"malformed record: {err}") from None


def _as_scalar_list(value, length, what) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 1 or (length is not None and arr.shape[0] != length):
        raise SchemaViolation(f"{what}: expected flat vector of length {length}, "
                              f"got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise SchemaViolation(f"{what}: non-finite entries")
    return arr


class WireSchema:
    """Shape validator for the closed message set, bound to public metadata.

    The layout and missingness pattern are common knowledge; covariate
    values are not. Every validator pins payload shapes to quantities
    derivable from that public metadata alone.
    """

    def __init__(self, layout: BlockLayout, mask: MissingMask,
                 full_coupling: bool = False):
        self.layout = layout
        self.mask = mask
        self.n = mask.n
        self.full_coupling = full_coupling
        self._q = np.array([mask.q(i, layout) for i in range(self.n)])
        self._any_missing = np.flatnonzero(mask.indicators.any(axis=1))

    def _require(self, cond: bool, what: str):
        if not cond:
            raise SchemaViolation(what)

    def _check_idx(self, idx, expected: np.ndarray, what: str) -> np.ndarray:
        arr = np.asarray(idx)
        self._require(arr.ndim == 1, f"{what}: index list must be flat")
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            if not np.all(arr == arr.astype(int)):
                raise SchemaViolation(f"{what}: non-integer sample index")
            arr = arr.astype(int)
        self._require(np.array_equal(arr, expected),
                      f"{what}: sample indices disagree with the public mask")
        return arr

    def validate(self, msg: Message) -> None:
        if msg.kind not in MESSAGE_KINDS:
            raise SchemaViolation(f"unknown kind {msg.kind!r}")
        pay = msg.payload
        K = self.layout.num_clients
        kind = msg.kind

        if kind in (ESTEP_LOCAL_FIT, MSTEP_LOCAL_FIT):
            self._require(1 <= msg.sender <= K, f"{kind}: bad sender")
            _as_scalar_list(pay.get("fit"), self.n, kind)
        elif kind == ESTEP_QUAD_FORM:
            self._require(1 <= msg.sender <= K, f"{kind}: bad sender")
            val = pay.get("value")
            self._require(np.isscalar(val) and np.isfinite(val),
                          f"{kind}: value must be a finite scalar")
        elif kind == ESTEP_BROADCAST:
            self._require(msg.sender == SERVER_ID, f"{kind}: server only")
            denom = _as_scalar_list(pay.get("denom"), self.n, kind)
            _as_scalar_list(pay.get("resid"), self.n, kind)
            self._require(bool(np.all(denom > 0)), f"{kind}: denominators must be positive")
        elif kind == MSTEP_COUPLING_VEC:
            self._require(1 <= msg.sender <= K, f"{kind}: bad sender")
            _as_scalar_list(pay.get("vec"), self.layout.dim(msg.sender), kind)
        elif kind == MSTEP_RESIDUAL_COUPLING:
            self._require(msg.sender == SERVER_ID, f"{kind}: server only")
            k = int(pay.get("client", -1))
            self._require(1 <= k <= K, f"{kind}: bad target client")
            _as_scalar_list(pay.get("resid"), self.n, kind)
            idx = self._check_idx(pay.get("idx"), self.mask.missing_rows(k), kind)
            slices = pay.get("slices")
            self._require(isinstance(slices, (list, tuple)) and len(slices) == idx.size,
                          f"{kind}: one coupling slice per missing sample")
            width = self.layout.dim(k)
            flats = []
            for i, block in zip(idx, slices):
                arr = np.asarray(block, dtype=float)
                q_i = self._q[i]
                cols = q_i if self.full_coupling else width
                self._require(arr.shape == (q_i, cols),
                              f"{kind}: slice for sample {i} must be ({q_i}, {cols})")
                flats.append(arr.ravel())
            if flats:
                self._require(bool(np.all(np.isfinite(np.concatenate(flats)))),
                              f"{kind}: non-finite coupling entries")
        elif kind in (MSTEP_PARTIAL_PROJECTION, MSTEP_AGGREGATED_PROJECTION):
            if kind == MSTEP_PARTIAL_PROJECTION:
                self._require(1 <= msg.sender <= K, f"{kind}: bad sender")
                expected = self.mask.missing_rows(msg.sender)
            else:
                self._require(msg.sender == SERVER_ID, f"{kind}: server only")
                expected = self._any_missing
            idx = self._check_idx(pay.get("idx"), expected, kind)
            vecs = pay.get("vecs")
            self._require(isinstance(vecs, (list, tuple)) and len(vecs) == idx.size,
                          f"{kind}: one vector per listed sample")
            flats = []
            for i, vec in zip(idx, vecs):
                arr = np.asarray(vec, dtype=float)
                self._require(arr.shape == (int(self._q[i]),),
                              f"{kind}: sample {i} vector must have length "
                              f"{self._q[i]}")
                flats.append(arr)
            if flats:
                self._require(bool(np.all(np.isfinite(np.concatenate(flats)))),
                              f"{kind}: non-finite entries")
        elif kind == VARSTEP_SCALAR:
            self._require(1 <= msg.sender <= K, f"{kind}: bad sender")
            idx = self._check_idx(pay.get("idx"), self.mask.missing_rows(msg.sender), kind)
            _as_scalar_list(pay.get("vals"), idx.size, kind)
        elif kind == CONTROL:
            self._require(msg.sender == SERVER_ID, f"{kind}: server only")
            event = pay.get("event")
            self._require(event in CONTROL_EVENTS, f"unknown control event {event!r}")
            for key in ("loss", "eta_scale"):
                if key in pay:
                    self._require(np.isscalar(pay[key]) and np.isfinite(pay[key]),
                                  f"{kind}: {key} must be a finite scalar")
            for key in ("best", "restore"):
                if key in pay:
                    self._require(isinstance(pay[key], (bool, np.bool_)),
                                  f"{kind}: {key} must be boolean")


def expected_round(kind: str) -> str:
    if kind in (ESTEP_LOCAL_FIT, ESTEP_QUAD_FORM, ESTEP_BROADCAST):
        return ROUND_ESTEP
    if kind in (MSTEP_LOCAL_FIT, MSTEP_COUPLING_VEC, MSTEP_RESIDUAL_COUPLING,
                MSTEP_PARTIAL_PROJECTION, MSTEP_AGGREGATED_PROJECTION):
        return ROUND_MSTEP
    if kind == VARSTEP_SCALAR:
        return ROUND_VARSTEP
    return ROUND_CONTROL
