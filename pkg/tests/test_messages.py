import numpy as np
import pytest

from vfem import BlockLayout, MissingMask
from vfem.errors import SchemaViolation
from vfem.messages import (
    CONTROL,
    ESTEP_BROADCAST,
    ESTEP_LOCAL_FIT,
    ESTEP_QUAD_FORM,
    MESSAGE_KINDS,
    MSTEP_AGGREGATED_PROJECTION,
    MSTEP_COUPLING_VEC,
    MSTEP_LOCAL_FIT,
    MSTEP_PARTIAL_PROJECTION,
    MSTEP_RESIDUAL_COUPLING,
    ROUND_ESTEP,
    ROUND_MSTEP,
    SERVER_ID,
    VARSTEP_SCALAR,
    Message,
    WireSchema,
    decode,
    encode,
)


@pytest.fixture
def schema():
    layout = BlockLayout((2, 3))
    mask = MissingMask(np.array([[0, 1], [0, 0], [1, 1], [0, 1]], dtype=bool))
    return WireSchema(layout, mask), layout, mask


def test_encode_decode_round_trip(schema):
    sch, layout, mask = schema
    msg = Message(3, ROUND_ESTEP, 1, ESTEP_LOCAL_FIT,
                  {"fit": np.array([0.1, -2.5e-17, 3.0, 1e300])})
    line = encode(msg)
    back = decode(line)
    assert back.t == 3 and back.sender == 1 and back.kind == ESTEP_LOCAL_FIT
    assert np.array_equal(np.asarray(back.payload["fit"], dtype=float),
                          np.asarray(msg.payload["fit"]))
    assert encode(back) == line  # canonical form is stable


def test_every_kind_is_enumerated():
    assert len(MESSAGE_KINDS) == 10
    assert CONTROL in MESSAGE_KINDS


def test_vector_payload_length_enforced(schema):
    sch, layout, mask = schema
    ok = Message(0, ROUND_ESTEP, 1, ESTEP_LOCAL_FIT, {"fit": np.zeros(4)})
    sch.validate(ok)
    with pytest.raises(SchemaViolation):
        sch.validate(Message(0, ROUND_ESTEP, 1, ESTEP_LOCAL_FIT,
                             {"fit": np.zeros(5)}))


def test_raw_covariate_block_rejected(schema):
    # an (n, p_k) matrix does not fit any per-sample statistic variant
    sch, layout, mask = schema
    raw_block = np.arange(12.0).reshape(4, 3)
    for kind, field in ((ESTEP_LOCAL_FIT, "fit"), (MSTEP_LOCAL_FIT, "fit"),
                        (MSTEP_COUPLING_VEC, "vec")):
        with pytest.raises(SchemaViolation):
            sch.validate(Message(0, ROUND_MSTEP, 2, kind, {field: raw_block}))
    with pytest.raises(SchemaViolation):
        sch.validate(Message(0, ROUND_MSTEP, 2, VARSTEP_SCALAR,
                             {"idx": mask.missing_rows(2), "vals": raw_block}))


def test_unknown_kind_and_fields_rejected(schema):
    sch, *_ = schema
    with pytest.raises(SchemaViolation):
        sch.validate(Message(0, "estep", 1, "covariate_dump", {"x": [1.0]}))
    with pytest.raises(SchemaViolation):
        encode(Message(0, ROUND_ESTEP, 1, ESTEP_QUAD_FORM,
                       {"value": 1.0, "extra": [1, 2]}))


def test_non_finite_payload_rejected(schema):
    sch, *_ = schema
    with pytest.raises(SchemaViolation):
        encode(Message(0, ROUND_ESTEP, 1, ESTEP_QUAD_FORM, {"value": np.inf}))
    with pytest.raises(SchemaViolation):
        sch.validate(Message(0, ROUND_ESTEP, 1, ESTEP_LOCAL_FIT,
                             {"fit": [np.nan, 0.0, 0.0, 0.0]}))


def test_coupling_slices_pinned_to_mask(schema):
    sch, layout, mask = schema
    idx = mask.missing_rows(2)          # rows 0, 2, 3
    q = {0: 3, 2: 5, 3: 3}
    slices = [np.zeros((q[int(i)], 3)) for i in idx]
    ok = Message(1, ROUND_MSTEP, SERVER_ID, MSTEP_RESIDUAL_COUPLING,
                 {"client": 2, "resid": np.zeros(4), "idx": idx,
                  "slices": slices})
    sch.validate(ok)
    bad = Message(1, ROUND_MSTEP, SERVER_ID, MSTEP_RESIDUAL_COUPLING,
                  {"client": 2, "resid": np.zeros(4), "idx": idx,
                   "slices": [np.zeros((4, 4)) for _ in idx]})
    with pytest.raises(SchemaViolation):
        sch.validate(bad)


def test_projection_indices_must_match_mask(schema):
    sch, layout, mask = schema
    with pytest.raises(SchemaViolation):
        sch.validate(Message(0, ROUND_MSTEP, 2, MSTEP_PARTIAL_PROJECTION,
                             {"idx": [1], "vecs": [[0.0, 0.0, 0.0]]}))


def test_broadcast_only_from_server(schema):
    sch, *_ = schema
    with pytest.raises(SchemaViolation):
        sch.validate(Message(0, ROUND_ESTEP, 1, ESTEP_BROADCAST,
                             {"denom": np.ones(4), "resid": np.zeros(4)}))
    with pytest.raises(SchemaViolation):
        sch.validate(Message(0, ROUND_MSTEP, 1, MSTEP_AGGREGATED_PROJECTION,
                             {"idx": [0, 2, 3], "vecs": [[0.0]] * 3}))


def test_control_events_closed(schema):
    sch, *_ = schema
    sch.validate(Message(0, "control", SERVER_ID, CONTROL,
                         {"event": "round_begin"}))
    with pytest.raises(SchemaViolation):
        sch.validate(Message(0, "control", SERVER_ID, CONTROL,
                             {"event": "upload_raw_data"}))
