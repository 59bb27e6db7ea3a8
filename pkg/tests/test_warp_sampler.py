import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from temporal_ssl import warp_sampler as ws
from temporal_ssl.warp_sampler import Tau


def playhead_oracle(kappa, s):
    """Simulate a playhead frame by frame: forward from 0 to s, then reverse.

    A frame is emitted every 2^kappa frames along each leg, with the backward
    leg counted from the turning point. Stops after 16 emitted frames, then
    shifts so the minimum is zero.
    """
    step = 2**kappa
    out, pos, direction, since_emit = [], 0, +1, 0
    out.append(pos)
    while len(out) < 16:
        if direction > 0 and pos == s:
            direction, since_emit = -1, 0
        pos += direction
        since_emit += 1
        if since_emit == step:
            out.append(pos)
            since_emit = 0
    lo = min(out)
    return [v - lo for v in out]


def global_subsample_reading(kappa, s):
    step = 2**kappa
    walk = list(range(0, s + 1)) + list(range(s - 1, 2 * s - 15 * step - 1, -1))
    sub = walk[::step]
    lo = min(sub)
    return [v - lo for v in sub]


def test_max_feasible_kappa_examples():
    brute = lambda L: max([k for k in range(4) if 15 * 2**k + 1 <= L], default=-1)
    assert ws.max_feasible_kappa(16) == 0 == brute(16)
    assert ws.max_feasible_kappa(121) == 3 == brute(121)
    assert ws.max_feasible_kappa(15) == -1
    for L in range(1, 300):
        assert ws.max_feasible_kappa(L) == brute(L)


def test_speed_examples():
    assert ws.sample_speed(16, 0, rho=0).indices == tuple(range(16))
    assert ws.sample_speed(70, 2, rho=5).indices == tuple(range(5, 66, 4))
    with pytest.raises(ws.InfeasibleVideoError) as err:
        ws.sample_speed(15, 0, np.random.default_rng(0))
    assert err.value.required_length == 16


def test_speed_rejects_infeasible_kappa():
    with pytest.raises(ws.InfeasibleVideoError) as err:
        ws.sample_speed(60, 2, np.random.default_rng(0))
    assert err.value.required_length == 61


def test_random_examples():
    seq = ws.sample_random(16, rho=0, permutation=list(range(15, -1, -1)))
    assert seq.indices == tuple(range(15, -1, -1))
    rng = np.random.default_rng(1)
    for _ in range(100):
        seq = ws.sample_random(40, rng)
        assert sorted(seq.indices) == list(range(seq.rho, seq.rho + 16))
        assert list(seq.indices) != sorted(seq.indices)


def test_random_start_uniform():
    rng = np.random.default_rng(2)
    n = 10_000
    rhos = np.array([ws.sample_random(32, rng).rho for _ in range(n)])
    counts = np.bincount(rhos, minlength=17)
    assert counts.size == 17
    p = 1 / 17
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 5 * sigma)


def test_periodic_examples():
    assert ws.sample_periodic(64, 0, s=8, extra_offset=0).indices == (
        0, 1, 2, 3, 4, 5, 6, 7, 8, 7, 6, 5, 4, 3, 2, 1)
    assert ws.sample_periodic(64, 1, s=9, extra_offset=0).indices == (
        13, 15, 17, 19, 21, 20, 18, 16, 14, 12, 10, 8, 6, 4, 2, 0)


def test_periodic_minimum_is_extra_offset_exhaustive():
    for kappa in range(4):
        for s in ws.switch_point_range(kappa):
            offsets, _ = ws.periodic_offsets(kappa, s)
            assert min(offsets) == 0
            assert len(offsets) == 16


def test_periodic_matches_playhead_oracle_exhaustive():
    for kappa in range(4):
        for s in ws.switch_point_range(kappa):
            offsets, _ = ws.periodic_offsets(kappa, s)
            assert offsets == playhead_oracle(kappa, s), (kappa, s)


def test_global_subsample_reading_agrees_only_on_aligned_switch_points():
    # sub-sampling the whole walk at one phase shifts the backward leg by delta
    for kappa in range(4):
        for s in ws.switch_point_range(kappa):
            offsets, _ = ws.periodic_offsets(kappa, s)
            same = offsets == global_subsample_reading(kappa, s)
            assert same == (s % 2**kappa == 0), (kappa, s)


def test_periodic_switch_point_bounds():
    with pytest.raises(ValueError):
        ws.periodic_offsets(1, 4)
    with pytest.raises(ValueError):
        ws.periodic_offsets(1, 26)
    assert list(ws.switch_point_range(0)) == list(range(3, 13))


def test_warp_examples():
    assert ws.sample_warp(40, skips=[0] * 15, rho=3).indices == tuple(range(3, 19))
    seq = ws.sample_warp(100, skips=[3, 0, 7, 1, 2, 0, 4, 5, 6, 0, 1, 2, 3, 0, 7], rho=2)
    assert seq.indices == (2, 6, 7, 15, 17, 20, 21, 26, 32, 39, 40, 42, 45, 49, 50, 58)


def test_warp_span_bounds_and_short_videos():
    rng = np.random.default_rng(3)
    for L in (16, 17, 31, 46, 100, 121, 200):
        for _ in range(200):
            seq = ws.sample_warp(L, rng)
            assert 15 <= seq.span <= 120
            assert max(seq.indices) < L
    with pytest.raises(ws.InfeasibleVideoError):
        ws.sample_warp(15, rng)


def test_speed0_equals_zero_skip_warp():
    a = ws.sample_speed(50, 0, rho=7)
    b = ws.sample_warp(50, skips=[0] * 15, rho=7)
    assert a.indices == b.indices


def test_transform_spec_invariants():
    with pytest.raises(ValueError):
        ws.TransformSpec(Tau.RANDOM, 1)
    with pytest.raises(ValueError):
        ws.TransformSpec(Tau.WARP, 2)
    with pytest.raises(ValueError):
        ws.TransformSpec(Tau.SPEED, 4)
    assert ws.TransformSpec(2, 3).tau is Tau.PERIODIC


def test_validate_reports_failures():
    seq = ws.sample_speed(100, 1, rho=0)
    broken = ws.IndexSequence(seq.indices[:5] + (seq.indices[5] + 1,) + seq.indices[6:], 0, seq.spec)
    report = ws.validate(broken, 100)
    assert not report.ok
    assert "non-constant gap" in report.failures()[0].reason

    report = ws.validate(seq, 20)
    assert [c.name for c in report.failures()] == ["range"]
    assert "out of range" in report.failures()[0].reason

    short = ws.IndexSequence(seq.indices[:15], 0, seq.spec)
    assert "length" in [c.name for c in ws.validate(short, 100).failures()]

    bad_perm = ws.IndexSequence((0,) * 16, 0, ws.TransformSpec(Tau.RANDOM))
    assert not ws.validate(bad_perm, 100).ok

    bad_warp = ws.IndexSequence(tuple(range(0, 160, 10)), 0, ws.TransformSpec(Tau.WARP))
    assert "warp-gaps" in [c.name for c in ws.validate(bad_warp, 200).failures()]

    per = ws.sample_periodic(64, 0, s=8, extra_offset=3)
    tampered = ws.IndexSequence(per.indices, per.rho, per.spec, {**per.params, "s": 9})
    assert not ws.validate(tampered, 64).ok
    assert ws.validate(per, 64).ok


@settings(max_examples=300, deadline=None)
@given(L=st.integers(16, 400), seed=st.integers(0, 2**32 - 1), tau=st.sampled_from(list(Tau)))
def test_every_sampler_output_validates(L, seed, tau):
    rng = np.random.default_rng(seed)
    kmax = ws.max_feasible_kappa(L)
    kappa = int(rng.integers(0, kmax + 1)) if tau in (Tau.SPEED, Tau.PERIODIC) else 0
    seq = ws.sample(tau, L, kappa, rng)
    report = ws.validate(seq, L)
    assert report.ok, str(report)


@settings(max_examples=50, deadline=None)
@given(L=st.integers(16, 300), seed=st.integers(0, 2**32 - 1))
def test_determinism_per_seed(L, seed):
    kappa = ws.max_feasible_kappa(L)
    for tau in Tau:
        k = kappa if tau in (Tau.SPEED, Tau.PERIODIC) else 0
        a = ws.sample(tau, L, k, np.random.default_rng(seed))
        b = ws.sample(tau, L, k, np.random.default_rng(seed))
        assert a == b


def _chi2_uniform_ok(values, support, alpha=0.01):
    counts = np.array([np.sum(values == v) for v in support])
    assert counts.sum() == len(values)
    return stats.chisquare(counts).pvalue > alpha


def test_distributions_uniform():
    rng = np.random.default_rng(20201)
    n = 10_000
    speed = np.array([ws.sample_speed(128, 3, rng).rho for _ in range(n)])
    assert _chi2_uniform_ok(speed, range(0, 128 - 120))

    per = [ws.sample_periodic(128, 1, rng) for _ in range(n)]
    s = np.array([p.params["s"] for p in per])
    assert _chi2_uniform_ok(s, ws.switch_point_range(1))

    skips = np.array([ws.sample_warp(128, rng).params["skips"] for _ in range(n)])
    for j in range(15):
        # family-wise 0.01 across the 15 skip positions
        assert _chi2_uniform_ok(skips[:, j], range(8), alpha=0.01 / 15)


def test_json_shape():
    seq = ws.sample_periodic(64, 0, s=8, extra_offset=0)
    doc = seq.to_json()
    assert set(doc) == {"tau", "kappa", "rho", "indices", "params"}
    assert doc["tau"] == 2 and doc["params"]["s"] == 8
