import json

import numpy as np
import pytest

from affine_oracle import ddim_affine
from c2fdiff.c2f import C2fPlan
from c2fdiff.oracle import AnalyticDenoiser, ResolutionFamily, blob_mixture
from c2fdiff.schedule import ContinuousSchedule, TimeStepSequence, uniform_sequence
from c2fdiff.trd import (
    C2fReference,
    CalibrationSet,
    PlainReference,
    TrdConfig,
    cache_key,
    cached_calibration,
    candidates,
    combined_init,
    evaluate_sequence,
    trd_search,
    trd_search_c2f,
)
from conftest import single_gaussian_8x8

SEQ = TimeStepSequence([800, 400, 100])


def test_candidates_interior_and_endpoints():
    assert candidates(SEQ, 1, 3) == [275.0, 450.0, 625.0]
    assert candidates(SEQ, 0, 3) == [500.0, 600.0, 700.0]
    assert candidates(SEQ, 2, 3) == [175.0, 250.0, 325.0]


def test_candidates_extended_endpoints():
    assert candidates(SEQ, 0, 3, t_max=1000, extended=True) == [550.0, 700.0, 850.0]
    assert candidates(SEQ, 2, 3, extended=True) == [200.0, 300.0]  # 100 is the incumbent


def test_candidates_skip_existing_and_degenerate():
    seq = TimeStepSequence([4, 3, 2])
    assert candidates(seq, 1, 1) == []  # midpoint is the incumbent itself
    assert candidates(TimeStepSequence([5.0]), 0, 3) == []
    assert candidates(TimeStepSequence([5.0]), 0, 1, t_max=9, extended=True) == [4.5]
    with pytest.raises(IndexError):
        candidates(SEQ, 3, 1)
    with pytest.raises(ValueError):
        candidates(SEQ, 0, 0)


@pytest.fixture(scope="module")
def gauss_setup(sched):
    den = AnalyticDenoiser(single_gaussian_8x8(), sched)
    calib = CalibrationSet.for_plain(den, PlainReference("ddim", 100), 16, 5, sched)
    return den, calib


def test_reference_has_zero_loss(gauss_setup, sched):
    den, calib = gauss_setup
    assert evaluate_sequence(uniform_sequence(100, 1000), den, "ddim", calib, sched) == 0.0


def test_loss_matches_closed_form(gauss_setup, sched):
    den, calib = gauss_setup
    gmm = single_gaussian_8x8()
    mu, v = gmm.means[0], gmm.variances[0]
    cand = [1000.0, 730.0, 420.0, 180.0, 40.0]
    ref = uniform_sequence(100, 1000).tolist()
    pc = np.array([ddim_affine(cand, m, s) for m, s in zip(mu, v)])
    pr = np.array([ddim_affine(ref, m, s) for m, s in zip(mu, v)])
    x = calib.init_noise.reshape(16, -1)
    diff = (pc[:, 0] - pr[:, 0]) * x + (pc[:, 1] - pr[:, 1])
    expect = float(np.mean(diff**2))
    got = evaluate_sequence(TimeStepSequence(cand), den, "ddim", calib, sched)
    assert got == pytest.approx(expect, rel=1e-8, abs=1e-10)


def test_evaluate_rejects_bad_inputs(gauss_setup, sched):
    den, calib = gauss_setup
    with pytest.raises(ValueError):
        evaluate_sequence(uniform_sequence(5, 1000), den, "ancestral", calib, sched)
    with pytest.raises(ValueError):
        evaluate_sequence((uniform_sequence(5, 1000), uniform_sequence(5, 500)), den, "ddim",
                          calib, sched)


def test_calibration_reuses_noise_per_seed(sched):
    den = AnalyticDenoiser(single_gaussian_8x8(), sched)
    a = CalibrationSet.for_plain(den, PlainReference("ddim", 20), 8, 7, sched)
    b = CalibrationSet.for_plain(den, PlainReference("ddim", 20), 8, 7, sched)
    c = CalibrationSet.for_plain(den, PlainReference("ddim", 20), 8, 8, sched)
    assert a.noise_digest == b.noise_digest != c.noise_digest
    assert not a.init_noise.flags.writeable


def test_search_zero_iterations(gauss_setup, sched):
    den, calib = gauss_setup
    init = uniform_sequence(5, 1000)
    seq, trace = trd_search(init, TrdConfig(max_iterations=0), den, calib, sched)
    assert seq == init and trace.records == [] and len(trace.loss_history) == 1


def test_search_never_increases_and_sequence_stays_valid(gauss_setup, sched):
    den, calib = gauss_setup
    init = uniform_sequence(5, 1000)
    seq, trace = trd_search(init, TrdConfig(n_candidates=4, max_iterations=3), den, calib, sched)
    hist = trace.loss_history
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    assert hist[-1] <= hist[0]
    assert len(seq) == 5 and seq[0] <= 1000
    assert all(x > y for x, y in zip(seq.tolist(), seq.tolist()[1:]))
    assert evaluate_sequence(seq, den, "ddim", calib, sched) == pytest.approx(hist[-1])


def test_search_accepts_post_hoc_argmin_and_ties_keep_incumbent(gauss_setup, sched):
    den, calib = gauss_setup
    seq, trace = trd_search(uniform_sequence(4, 1000), TrdConfig(n_candidates=3, max_iterations=2),
                            den, calib, sched)
    for r in trace.records:
        if r["accepted"] is not None:
            i = int(np.argmin(r["losses"]))
            assert r["accepted"] == r["candidates"][i]
            assert r["losses"][i] < r["incumbent_loss"]
        elif r["losses"]:
            assert min(r["losses"]) >= r["incumbent_loss"]


def test_search_positions_visited_largest_time_first(gauss_setup, sched):
    den, calib = gauss_setup
    _, trace = trd_search(uniform_sequence(4, 1000), TrdConfig(max_iterations=1), den, calib, sched)
    assert [r["position"] for r in trace.records] == [0, 1, 2, 3]


def test_search_stops_at_fixed_point(sched):
    # with integer-rounded times only finitely many distinct losses exist,
    # so strict improvement must terminate
    sched = ContinuousSchedule(sched.base, round_times=True)
    den = AnalyticDenoiser(single_gaussian_8x8(), sched)
    calib = CalibrationSet.for_plain(den, PlainReference("ddim", 100), 16, 5, sched)
    seq, trace = trd_search(uniform_sequence(3, 1000), TrdConfig(n_candidates=2, max_iterations=50),
                            den, calib, sched)
    assert trace.iterations < 50
    last = [r for r in trace.records if r["iteration"] == trace.iterations - 1]
    assert all(r["accepted"] is None for r in last)
    again, t2 = trd_search(seq, TrdConfig(n_candidates=2, max_iterations=5), den, calib, sched)
    assert again == seq and t2.substitutions == []


def test_search_deterministic_and_threads_agree(gauss_setup, sched):
    den, calib = gauss_setup
    cfg = TrdConfig(n_candidates=3, max_iterations=2)
    a, ta = trd_search(uniform_sequence(4, 1000), cfg, den, calib, sched)
    b, tb = trd_search(uniform_sequence(4, 1000), cfg, den, calib, sched, threads=3)
    assert a == b and ta.loss_history == tb.loss_history
    assert json.loads(ta.to_json())["records"] == json.loads(tb.to_json())["records"]
    lines = ta.loss_history_csv().splitlines()
    assert lines[0] == "event,loss" and len(lines) == len(ta.loss_history) + 1


def test_calibration_cache_round_trip(tmp_path, sched):
    den = AnalyticDenoiser(single_gaussian_8x8(), sched)
    ref = PlainReference("ddim", 10)
    key = cache_key(reference=ref.to_dict(), seed=1, n=4)
    assert key == cache_key(n=4, seed=1, reference=ref.to_dict())
    assert key != cache_key(reference=ref.to_dict(), seed=2, n=4)
    build = lambda: CalibrationSet.for_plain(den, ref, 4, 1, sched)  # noqa: E731
    a, hit_a = cached_calibration(tmp_path, key, build, ref)
    b, hit_b = cached_calibration(tmp_path, key, build, ref)
    assert (hit_a, hit_b) == (False, True)
    assert np.array_equal(a.reference_outputs, b.reference_outputs)
    assert a.noise_digest == b.noise_digest


def test_combined_init_examples():
    low, high = combined_init(10, 5, 1000, 565)
    assert high.tolist() == [565.0, 452.0, 339.0, 226.0, 113.0]
    assert low.tolist() == [1000.0 - 100 * i for i in range(10)]
    with pytest.raises(ValueError):
        combined_init(10, 5, 1000, 0)


@pytest.fixture(scope="module")
def c2f_setup(sched):
    fam = ResolutionFamily(blob_mixture(2, (1, 8, 8), seed=3))
    ref = C2fReference.uniform(2, 500.0, 1000, 40, 40)
    calib = CalibrationSet.for_c2f(fam, ref, 8, 2, sched)
    return fam, ref, calib


def test_c2f_reference_zero_loss(c2f_setup, sched):
    fam, ref, calib = c2f_setup
    pair = (ref.plan.low_sequence, ref.plan.high_sequence)
    assert evaluate_sequence(pair, fam, "ddim", calib, sched) == 0.0
    assert calib.renoise_noise is not None


def test_c2f_search_low_first_and_capped(c2f_setup, sched):
    fam, ref, calib = c2f_setup
    low, high = combined_init(4, 3, 1000, 500.0)
    cfg = TrdConfig(n_candidates=3, max_iterations=2, extended=True)
    low2, high2, trace = trd_search_c2f(low, high, cfg, fam, calib, sched)
    first = [r["stage"] for r in trace.records if r["iteration"] == 0]
    assert first == ["low"] * 4 + ["high"] * 3
    assert high2[0] <= 500.0 and low2[0] <= 1000.0
    for r in trace.records:
        if r["stage"] == "high":
            assert all(c <= 500.0 for c in r["candidates"])
    hist = trace.loss_history
    assert hist[-1] <= hist[0]
    with pytest.raises(ValueError):
        trd_search_c2f(low, high, cfg, fam, CalibrationSet(0, np.zeros((1, 1, 8, 8)),
                                                             np.zeros((1, 1, 8, 8))), sched)


def test_config_validation():
    with pytest.raises(ValueError):
        TrdConfig(n_candidates=0)
    with pytest.raises(ValueError):
        TrdConfig(max_iterations=-1)
    with pytest.raises(ValueError):
        PlainReference("ancestral", 100)
    assert isinstance(C2fReference.uniform(4, 565.0, 1000).plan, C2fPlan)
