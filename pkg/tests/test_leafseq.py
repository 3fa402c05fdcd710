import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmplan.domain import Arc, MachineConstraints, Plan, sample_deliverable_plan
from fmplan.leafseq import (Aperture, SequencedPlan, longest_run, reconstruct, relative_reconstruction_error,
                            sequence_cp, sequence_plan, validate_deliverability)

C = MachineConstraints()


def test_rectangular_profile_round_trip():
    f = np.zeros((16, 24))
    f[3:9, 5:12] = 2.5
    ap = sequence_cp(f, C)
    assert ap.intensity == 2.5
    assert ap.closed[:3].all() and ap.closed[9:].all() and not ap.closed[3:9].any()
    np.testing.assert_array_equal(ap.left[3:9], 5)
    np.testing.assert_array_equal(ap.right[3:9], 12)
    np.testing.assert_array_equal(reconstruct([ap], 24)[0], f)


def test_all_zero_map_closes_everything():
    ap = sequence_cp(np.zeros((16, 24)), C)
    assert ap.closed.all() and ap.intensity == 0.0


def test_bimodal_row_takes_leftmost_largest_run():
    row = np.zeros(24)
    row[2:5] = 1.0
    row[10:13] = 1.0
    row[18:20] = 1.0
    assert longest_run(row > 0.5) == (2, 5)
    f = np.zeros((16, 24))
    f[0] = row
    ap = sequence_cp(f, C)
    assert (ap.left[0], ap.right[0]) == (2, 5)


@given(st.lists(st.booleans(), min_size=1, max_size=30))
def test_longest_run_matches_enumeration(bits):
    mask = np.array(bits)
    runs = []
    i = 0
    while i < len(bits):
        if bits[i]:
            j = i
            while j < len(bits) and bits[j]:
                j += 1
            runs.append((i, j))
            i = j
        else:
            i += 1
    expected = max(runs, key=lambda r: (r[1] - r[0], -r[0])) if runs else None
    assert longest_run(mask) == expected


def test_travel_clipping_and_gap_repair():
    prev = Aperture(np.full(16, 4.0), np.full(16, 8.0), 1.0, np.zeros(16, bool))
    f = np.zeros((16, 24))
    f[:, 18:22] = 1.0
    ap = sequence_cp(f, C, prev)
    np.testing.assert_array_equal(ap.left, 7.0)
    np.testing.assert_array_equal(ap.right, 11.0)
    f = np.zeros((16, 24))
    f[:, 0:1] = 1.0
    ap = sequence_cp(f, C, Aperture(np.full(16, 10.0), np.full(16, 14.0), 1.0, np.zeros(16, bool)))
    assert (ap.right - ap.left >= C.min_gap).all()


@pytest.mark.parametrize("seed", range(6))
def test_aperture_plans_round_trip_exactly(seed):
    plan = sample_deliverable_plan(C, Arc(), seed, smooth=False)
    sp = sequence_plan(plan, C)
    np.testing.assert_array_equal(sp.f_ls, plan.fluence)
    np.testing.assert_array_equal(sp.mu, plan.mu)
    assert validate_deliverability(sp, C) == []


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_maps_always_deliverable(seed):
    g = np.random.default_rng(seed)
    f = g.gamma(0.5, size=(24, 16, 24)) * (g.random((24, 16, 24)) > 0.3)
    mu = g.uniform(-3, 14, size=24)
    sp = sequence_plan(Plan(f, mu), C)
    assert validate_deliverability(sp, C) == []


def _flat_plan(n_cp=3):
    aps = [Aperture(np.full(16, 5.0), np.full(16, 10.0), 1.0, np.zeros(16, bool)) for _ in range(n_cp)]
    return SequencedPlan(aps, np.full(n_cp, 5.0), reconstruct(aps, 24))


def test_validator_flags_each_violation_kind():
    sp = _flat_plan()
    assert validate_deliverability(sp, C) == []
    jump = _flat_plan()
    jump.apertures[1].left[4] += 2 * C.max_leaf_travel_per_cp
    jump.apertures[1].right[4] += 2 * C.max_leaf_travel_per_cp
    jump.apertures[2].left[4] += 2 * C.max_leaf_travel_per_cp
    jump.apertures[2].right[4] += 2 * C.max_leaf_travel_per_cp
    v = validate_deliverability(jump, C)
    assert [(x.kind, x.cp, x.row) for x in v] == [("travel", 1, 4)]
    gap = _flat_plan(1)
    gap.apertures[0].right[2] = gap.apertures[0].left[2] + 0.5
    assert [x.kind for x in validate_deliverability(gap, C)] == ["gap"]
    bounds = _flat_plan()
    bounds.apertures[0].right[0] = 25.0
    assert "bounds" in [x.kind for x in validate_deliverability(bounds, C)]
    mu = _flat_plan()
    mu.mu[:] = C.mu_max + 1
    assert {x.kind for x in validate_deliverability(mu, C)} == {"mu_bound"}
    dmu = _flat_plan()
    dmu.mu[2] = dmu.mu[1] + C.max_mu_delta_per_cp + 0.5
    assert [x.kind for x in validate_deliverability(dmu, C)] == ["mu_delta"]


def test_reconstruction_error_zero_when_identical(g):
    f = g.random((4, 3, 5))
    assert relative_reconstruction_error(f, f) == 0.0


def test_sequencing_deterministic(g):
    f = g.random((24, 16, 24))
    a = sequence_plan(Plan(f, np.full(24, 5.0)), C)
    b = sequence_plan(Plan(f.copy(), np.full(24, 5.0)), C)
    assert a.f_ls.tobytes() == b.f_ls.tobytes()
