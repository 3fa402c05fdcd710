import json
import struct

import numpy as np
import pytest

from fmplan import io
from fmplan.config import ConfigError, config_from_dict, load_config
from fmplan.domain import Plan, Provenance
from fmplan.leafseq import sequence_plan


def test_checkpoint_round_trip_is_f32_exact(tmp_path, g):
    t = {"b.w": g.normal(size=(3, 4)), "a": np.arange(5.0), "scalar": np.array(2.5)}
    path = tmp_path / "m.fmpl"
    io.save_checkpoint(path, t, {"kind": "teacher", "step": 3})
    back, meta = io.load_checkpoint(path)
    assert meta == {"kind": "teacher", "step": 3}
    for k, v in t.items():
        assert back[k].dtype == np.float64 and back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v.astype(np.float32).astype(np.float64))


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "m.fmpl"
    io.save_checkpoint(path, {"x": np.array([1.0, -2.0])})
    raw = path.read_bytes()
    assert raw[:4] == b"FMPL" and struct.unpack("<I", raw[4:8])[0] == 1
    (n,) = struct.unpack("<Q", raw[8:16])
    head = json.loads(raw[16:16 + n])
    assert head["tensors"] == [{"name": "x", "shape": [2], "dtype": "f32", "offset": 0, "length": 2}]
    assert np.frombuffer(raw[16 + n:], "<f4").tolist() == [1.0, -2.0]


def test_checkpoint_is_byte_stable(tmp_path, g):
    t = {"w": g.normal(size=10), "b": g.normal(size=2)}
    io.save_checkpoint(tmp_path / "a", t, {"z": 1, "a": [1, 2]})
    io.save_checkpoint(tmp_path / "b", dict(reversed(list(t.items()))), {"a": [1, 2], "z": 1})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.mark.parametrize("blob", [b"", b"NOPE" + bytes(20), b"FMPL" + struct.pack("<I", 9) + bytes(8)])
def test_checkpoint_rejects_garbage(tmp_path, blob):
    p = tmp_path / "bad"
    p.write_bytes(blob)
    with pytest.raises(io.DataError):
        io.load_checkpoint(p)


def test_checkpoint_truncated_payload(tmp_path):
    p = tmp_path / "m"
    io.save_checkpoint(p, {"x": np.ones(8)})
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(io.DataError):
        io.load_checkpoint(p)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(io.DataError):
        io.load_checkpoint(tmp_path / "absent")


def test_checkpoint_refuses_nan(tmp_path):
    with pytest.raises(ValueError):
        io.save_checkpoint(tmp_path / "m", {"x": np.array([np.nan])})


def test_rle(g):
    a = (g.random((5, 6, 7)) > 0.7).astype(np.uint8)
    runs = io.rle_encode(a)
    assert sum(c for _, c in runs) == a.size
    assert all(runs[i][0] != runs[i + 1][0] for i in range(len(runs) - 1))
    np.testing.assert_array_equal(io.rle_decode(runs, a.shape, np.uint8), a)
    with pytest.raises(io.DataError):
        io.rle_decode(runs, (2, 2))


def test_case_round_trip(tmp_path, case):
    p = tmp_path / "c.json"
    io.save_case(p, case)
    back = io.load_case(p)
    assert back.case_id == case.case_id and back.attempts == case.attempts
    for name in ("mu", "body_mask", "ptv_mask"):
        np.testing.assert_array_equal(getattr(back.phantom, name), getattr(case.phantom, name))
    np.testing.assert_array_equal(back.reference_plan.fluence, case.reference_plan.fluence)
    assert back.target_dose.tobytes() == case.target_dose.tobytes()
    io.save_case(tmp_path / "again.json", back)
    assert (tmp_path / "again.json").read_bytes() == p.read_bytes()


def test_case_rejects_wrong_format(tmp_path, case):
    d = io.case_to_dict(case)
    d["format"] = "other"
    with pytest.raises(io.DataError):
        io.case_from_dict(d)
    d = io.case_to_dict(case)
    del d["phantom"]
    with pytest.raises(io.DataError):
        io.case_from_dict(d)
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(io.DataError):
        io.load_case(tmp_path / "x.json")


def test_plan_and_sequenced_round_trip(case):
    p = Plan(case.reference_plan.fluence, case.reference_plan.mu, Provenance.GENERATED)
    back = io.plan_from_dict(json.loads(json.dumps(io.plan_to_dict(p))))
    np.testing.assert_array_equal(back.fluence, p.fluence)
    assert back.provenance is Provenance.GENERATED and back.leaves is None
    sp = sequence_plan(case.reference_plan, case.constraints)
    sb = io.sequenced_from_dict(json.loads(json.dumps(io.sequenced_to_dict(sp))))
    np.testing.assert_array_equal(sb.f_ls, sp.f_ls)
    np.testing.assert_array_equal(sb.leaves, sp.leaves)


def test_pgm(tmp_path):
    img = np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 8.0]])
    p = tmp_path / "a.pgm"
    io.write_pgm(p, img)
    text = p.read_text().splitlines()
    assert text[:4] == ["P2", "# vmax=8.0", "3 2", "65535"]
    px, vmax = io.read_pgm(p)
    np.testing.assert_array_equal(px, np.rint(65535 * img / 8).astype(int))
    assert vmax == 8.0
    assert io.pgm_bytes(np.zeros((2, 2))).splitlines()[-1] == b"0 0"
    io.write_pgm(p, img, vmax=4.0)
    assert io.read_pgm(p)[0].max() == 65535


def test_dose_pgms_share_vmax(tmp_path, g):
    dose = g.random((4, 5, 3))
    paths = io.write_dose_pgms(tmp_path, dose)
    assert [q.name for q in paths] == ["dose_z00.pgm", "dose_z01.pgm", "dose_z02.pgm"]
    assert {io.read_pgm(q)[1] for q in paths} == {float(dose.max())}


def test_csv_formatting(tmp_path):
    p = tmp_path / "t.csv"
    io.write_csv(p, ["a", "b", "c"], [[1, 0.1, float("inf")], ["x", 1e-300, -2.5]])
    assert p.read_text() == "a,b,c\n1,0.1,inf\nx,1e-300,-2.5\n"


def test_config_defaults_and_strictness(tmp_path):
    cfg = load_config(None)
    assert cfg.l2plan.inner_steps == 20 and cfg.fmd.sigma_max == 10.0
    assert config_from_dict({"l2plan": {"meta_steps": 3}}).l2plan.meta_steps == 3
    with pytest.raises(ConfigError):
        config_from_dict({"l2plan": {"meta_step": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"fmd": {"lambda_gan": "big"}})
    with pytest.raises(ConfigError):
        config_from_dict({"fmd": {"sigma_min": 5.0, "sigma_max": 1.0}})
    (tmp_path / "c.json").write_text("[")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")
