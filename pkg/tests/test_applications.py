import numpy as np
import pytest

from handqa.applications import (
    ApplicationError,
    DetectionRecord,
    auc_from_scores,
    fuse_detection,
    fusion_sweep,
    improve_hand,
    quality_loss,
    read_detection_records,
    roc_from_scores,
    roc_metrics,
    stub_detector,
    total_loss,
    write_detection_records,
)
from handqa.forge import plan_degradation, sample_clean_hand
from handqa.model import ScorerParams


def brute_auc(pos, neg):
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_quality_loss_examples():
    assert quality_loss([5, 5]) == 0.0
    assert quality_loss([3]) == 4.0
    assert quality_loss([1, 5]) == 8.0
    assert total_loss(1.0, 4.0, 0.1) == pytest.approx(1.4, abs=1e-15)
    with pytest.raises(ApplicationError):
        quality_loss([])
    with pytest.raises(ApplicationError):
        total_loss(1.0, 1.0, -0.1)


def test_fuse_examples():
    assert fuse_detection(0.6, 5.0, 0.2) == pytest.approx(0.48)
    assert fuse_detection(0.6, 1.0, 0.2) == pytest.approx(0.68)
    assert fuse_detection(0.4, 3.0, 0.0) == 0.4
    assert fuse_detection(0.4, 3.0, 1.0) == 0.5
    for bad in [(1.2, 3.0, 0.2), (0.5, 0.5, 0.2), (0.5, 3.0, 1.5), (np.nan, 3.0, 0.2)]:
        with pytest.raises(ApplicationError):
            fuse_detection(*bad)


def test_fuse_monotone_and_bounded(rng):
    p = rng.uniform(size=1000)
    s = rng.uniform(1, 5, 1000)
    a = rng.uniform(size=1000)
    for pi, si, ai in zip(p, s, a):
        f = fuse_detection(pi, si, ai)
        assert 0.0 <= f <= 1.0
        assert fuse_detection(pi, min(5.0, si + 0.1), ai) <= f + 1e-15
        assert fuse_detection(min(1.0, pi + 0.1), si, ai) >= f - 1e-15


def test_auc_examples_and_oracle(rng):
    assert auc_from_scores([0.9, 0.4], [0.5, 0.1]) == 0.75
    assert auc_from_scores([2, 3], [0, 1]) == 1.0
    assert auc_from_scores([0, 1], [2, 3]) == 0.0
    for _ in range(30):
        pos = rng.integers(0, 6, int(rng.integers(1, 20))).astype(float)
        neg = rng.integers(0, 6, int(rng.integers(1, 20))).astype(float)
        assert auc_from_scores(pos, neg) == pytest.approx(brute_auc(pos, neg), abs=1e-12)
    with pytest.raises(ApplicationError):
        auc_from_scores([], [1.0])


def test_roc_perfect_separation():
    rep = roc_from_scores([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1])
    assert rep.auc == 1.0 and rep.eer == 0.0 and rep.acc_at_eer == 1.0


def test_roc_shuffled_labels_near_chance(rng):
    y = rng.integers(0, 2, 10_000)
    rep = roc_from_scores(y, rng.uniform(size=10_000))
    assert abs(rep.auc - 0.5) < 0.02
    assert abs(rep.eer - 0.5) < 0.02


def test_eer_interpolates_between_thresholds():
    # fpr/fnr cross strictly between two thresholds
    rep = roc_from_scores([1, 1, 1, 0, 0, 0], [0.9, 0.7, 0.3, 0.8, 0.2, 0.1])
    assert 0.0 < rep.eer < 1.0
    assert rep.eer == pytest.approx(1 / 3, abs=1e-12)
    with pytest.raises(ApplicationError):
        roc_from_scores([1, 1], [0.1, 0.2])


def test_stub_detector_targets(rng):
    y = np.repeat([0, 1], 500)
    for target in (0.99, 0.51, 0.6):
        p = stub_detector(y, target, seed=0)
        assert abs(auc_from_scores(p[y == 1], p[y == 0]) - target) <= 0.02
        assert np.all((p >= 0) & (p <= 1))
    assert np.array_equal(stub_detector(y, 0.7, 3), stub_detector(y, 0.7, 3))
    with pytest.raises(ApplicationError):
        stub_detector(y, 1.0, 0)
    with pytest.raises(ApplicationError):
        stub_detector(np.ones(10), 0.7, 0)


def _records(rng, n=200):
    y = np.repeat([0, 1], n // 2)
    p = stub_detector(y, 0.7, 1)
    s = np.clip(4.0 - 2.0 * y + rng.normal(0, 0.5, n), 1, 5)
    return [DetectionRecord(f"r{i}", "fake" if y[i] else "real", float(p[i]), float(s[i])) for i in range(n)]


def test_sweep_endpoints(rng):
    recs = _records(rng)
    rows = fusion_sweep(recs, [0.0, 1.0])
    raw = roc_metrics(recs, use_fused=False)
    assert rows[0].report.auc == raw.auc
    y = [r.label == "fake" for r in recs]
    assert rows[1].report.auc == pytest.approx(roc_from_scores(y, [(5 - r.s_hand) / 4 for r in recs]).auc)
    fused = [r.fused(0.2) for r in recs]
    assert roc_metrics(fused).auc == fusion_sweep(recs, [0.2])[0].report.auc


def test_detection_records_round_trip(tmp_path, rng):
    recs = _records(rng, 10)
    write_detection_records(recs, tmp_path / "d.jsonl")
    back = read_detection_records(tmp_path / "d.jsonl")
    assert [(r.image_id, r.label, r.p_detector, r.s_hand) for r in back] == \
        [(r.image_id, r.label, r.p_detector, r.s_hand) for r in recs]
    (tmp_path / "bad.jsonl").write_text('{"id": "a", "label": "real", "p_detector": 0.1, "s_hand": 3}\n{"id": 1}\n')
    with pytest.raises(ApplicationError, match=":2:"):
        read_detection_records(tmp_path / "bad.jsonl")
    with pytest.raises(ApplicationError):
        DetectionRecord("x", "unknown", 0.5, 3.0)


@pytest.fixture
def deformed():
    rng = np.random.default_rng([0, 0])
    clean = sample_clean_hand(rng, False)
    return clean, plan_degradation(clean, 0.4, ("deformation",), rng)


def test_improve_zero_steps_and_zero_step_size(deformed):
    clean, plan = deformed
    params = ScorerParams.init(1)
    traj, mags = improve_hand(clean, plan, params, steps=0)
    assert len(traj) == 1 and mags == {"deformation": 1.0}
    traj, mags = improve_hand(clean, plan, params, steps=4, step_size=0.0)
    assert len(traj) == 5 and len(set(traj)) == 1 and mags == {"deformation": 1.0}


def test_improve_runs_and_stays_in_range(deformed):
    clean, plan = deformed
    traj, mags = improve_hand(clean, plan, ScorerParams.init(1), steps=3)
    assert len(traj) == 4
    assert all(1.0 <= s <= 5.0 for s in traj)
    assert 0.0 <= mags["deformation"] <= 1.0
    again, _ = improve_hand(clean, plan, ScorerParams.init(1), steps=3)
    assert again == traj


def test_improve_errors(deformed):
    clean, plan = deformed
    params = ScorerParams.init(1)
    with pytest.raises(ApplicationError):
        improve_hand(clean, plan, params, free=("missing",))
    with pytest.raises(ApplicationError):
        improve_hand(clean, plan, params, free=("fusion",))
    with pytest.raises(ApplicationError):
        improve_hand(clean, plan, params, steps=-1)


def test_stub_detector_at_2000():
    y = np.repeat([0, 1], 1000)
    p = stub_detector(y, 0.99, seed=4)
    assert 0.97 <= auc_from_scores(p[y == 1], p[y == 0]) <= 1.0
    p = stub_detector(y, 0.51, seed=4)
    assert 0.5 <= auc_from_scores(p[y == 1], p[y == 0]) <= 0.55


def test_accuracy_at_eer_tracks_one_minus_eer(rng):
    for _ in range(50):
        n = int(rng.integers(20, 400))
        y = np.r_[np.zeros(n // 2), np.ones(n - n // 2)]
        s = y * rng.uniform(0, 2) + rng.normal(size=n)
        rep = roc_from_scores(y, s)
        assert abs(rep.acc_at_eer - (1 - rep.eer)) <= 1.0 / min(n // 2, n - n // 2) + 1e-12


def test_weak_detector_gains_from_strong_hand_scores(rng):
    recs = _records(rng, 1000)
    rows = fusion_sweep(recs, np.linspace(0, 1, 11))
    assert max(r.report.auc for r in rows) > roc_metrics(recs, use_fused=False).auc
