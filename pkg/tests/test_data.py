import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from evoalign.data import (
    Dataset,
    Subject,
    TeacherSpec,
    datasets_equal,
    decode_tensor,
    default_teacher,
    encode_tensor,
    generate_synthetic,
    load_dataset,
    read_tensor,
    save_dataset,
    write_tensor,
)
from evoalign.errors import DimensionMismatch, FormatError, MissingRegion
from evoalign.genome import output_shape, validate
from evoalign.metrics import encoding_noise_ceiling
from conftest import SMALL_SHAPE, small_teacher

# [[1.0], [-2.0]] as float32, written out by hand
EVOT_2x1 = (
    b"EVOT" + bytes([1, 1, 2]) + bytes(7)
    + (2).to_bytes(8, "little") + (1).to_bytes(8, "little")
    + bytes([0x00, 0x00, 0x80, 0x3F]) + bytes([0x00, 0x00, 0x00, 0xC0])
)


def test_evot_byte_fixture():
    a = np.array([[1.0], [-2.0]], dtype=np.float32)
    assert encode_tensor(a) == EVOT_2x1
    np.testing.assert_array_equal(decode_tensor(EVOT_2x1), a)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(0, 4), min_size=0, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_roundtrip(a):
    buf = encode_tensor(a)
    b = decode_tensor(buf)
    assert b.shape == a.shape and b.tobytes() == a.tobytes()
    assert encode_tensor(b) == buf


def test_corrupted_tensor_names_file(tmp_path):
    f = tmp_path / "x.evot"
    write_tensor(f, np.zeros((2, 3)))
    raw = bytearray(f.read_bytes())
    raw[0] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="x.evot"):
        read_tensor(f)


@pytest.mark.parametrize("mutate, msg", [
    (lambda b: b[:10], "truncated header"),
    (lambda b: b[:4] + b"\x02" + b[5:], "version"),
    (lambda b: b[:5] + b"\x09" + b[6:], "dtype"),
    (lambda b: b[:8] + b"\x01" + b[9:], "reserved"),
    (lambda b: b[:-1], "payload"),
])
def test_malformed_headers(mutate, msg):
    with pytest.raises(FormatError, match=msg):
        decode_tensor(mutate(EVOT_2x1))


def _tiny_dataset(rng, n=12, regions=("V2", "IT")):
    stim = rng.standard_normal((n, 1, 4, 4)).astype(np.float32)
    subs = tuple(Subject(f"s{i}", {r: rng.standard_normal((n, 2, 3)).astype(np.float32) for r in regions})
                 for i in range(2))
    return Dataset(stim, subs, regions, {"kind": "test"})


def test_dataset_roundtrip(tmp_path, rng):
    ds = _tiny_dataset(rng)
    save_dataset(ds, tmp_path / "d")
    assert datasets_equal(load_dataset(tmp_path / "d"), ds)
    assert sorted(p.name for p in (tmp_path / "d" / "subjects" / "s0").iterdir()) == ["IT.evot", "V2.evot"]


def test_dataset_dimension_errors(tmp_path, rng):
    ds = _tiny_dataset(rng)
    save_dataset(ds, tmp_path / "d")
    write_tensor(tmp_path / "d" / "subjects" / "s1" / "IT.evot", np.zeros((11, 2, 3)))
    with pytest.raises(DimensionMismatch, match="axis 0"):
        load_dataset(tmp_path / "d")
    (tmp_path / "d" / "subjects" / "s1" / "IT.evot").unlink()
    with pytest.raises(MissingRegion, match="IT"):
        load_dataset(tmp_path / "d")
    with pytest.raises(MissingRegion):
        Dataset(ds.stimuli, (Subject("a", {"V2": ds.subjects[0].regions["V2"]}),), ("V2", "IT"))
    with pytest.raises(FormatError, match="meta.json"):
        load_dataset(tmp_path / "nowhere")


def test_bad_meta(tmp_path, rng):
    save_dataset(_tiny_dataset(rng), tmp_path / "d")
    meta = tmp_path / "d" / "meta.json"
    d = json.loads(meta.read_text())
    d["format_version"] = 9
    meta.write_text(json.dumps(d))
    with pytest.raises(FormatError, match="format_version"):
        load_dataset(tmp_path / "d")


def test_default_teacher_fits_small_input():
    t = default_teacher()
    assert t.depth == 6 and validate(t, (3, 32, 32)).ok
    assert [s[1] for s in output_shape(t, (3, 32, 32)).shapes] == [30, 15, 13, 6, 4, 2]


def test_noiseless_repeats_identical():
    spec = TeacherSpec(small_teacher(), (("V2", 0), ("IT", 2)), voxels=8, n_subjects=2, noise_sigma=0.0)
    ds = generate_synthetic(spec, n_stimuli=30, input_shape=SMALL_SHAPE)
    for subj in ds.subjects:
        for reg in ds.regions:
            y = subj.regions[reg]
            assert np.all(y == y[:, :1, :])
            np.testing.assert_allclose(encoding_noise_ceiling(y), 1.0, atol=1e-6)


def test_synthetic_determinism(small_spec):
    a = generate_synthetic(small_spec, n_stimuli=20, input_shape=SMALL_SHAPE, master_seed=5)
    b = generate_synthetic(small_spec, n_stimuli=20, input_shape=SMALL_SHAPE, master_seed=5)
    c = generate_synthetic(small_spec, n_stimuli=20, input_shape=SMALL_SHAPE, master_seed=6)
    assert datasets_equal(a, b)
    assert not datasets_equal(a, c)
    assert a.provenance["teacher_spec"] == small_spec.to_dict()


def test_spec_roundtrip_and_validation(small_spec):
    assert TeacherSpec.from_dict(small_spec.to_dict()) == small_spec
    with pytest.raises(ValueError):
        TeacherSpec(small_teacher(), (("IT", 7),))
    with pytest.raises(ValueError):
        TeacherSpec(small_teacher(), (("IT", 1),), spectral_power=-1.0)
