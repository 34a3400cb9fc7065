import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latency_atlas.bench import Dataset, TimingSample
from latency_atlas.errors import LayoutMismatchError, ValidationError
from latency_atlas.features import featurize
from latency_atlas.metrics import evaluate_bundle, mae, mape, r2, rmse
from latency_atlas.netspec import Scenario, dense

from support import (FIG3_STUB, brute_mae, brute_mape, brute_r2, brute_rmse, constant_bundle,
                     oracle_dataset)


def test_perfect_prediction():
    y = np.array([0.5, 1.0, 3.0])
    assert (mape(y, y), mae(y, y), rmse(y, y), r2(y, y)) == (0.0, 0.0, 0.0, 1.0)


def test_single_sample():
    assert (mape([2.0], [1.0]), mae([2.0], [1.0]), rmse([2.0], [1.0])) == (100.0, 1.0, 1.0)


def test_mean_prediction_r2_zero():
    y = np.array([1.0, 2.0, 6.0])
    assert r2(np.full(3, y.mean()), y) == pytest.approx(0.0, abs=1e-15)


def test_errors():
    with pytest.raises(ValidationError):
        mae([1.0], [1.0, 2.0])
    with pytest.raises(ValidationError):
        rmse([], [])
    with pytest.raises(ValidationError):
        mape([1.0], [0.0])
    with pytest.raises(ValidationError):
        r2([1.0, 2.0], [3.0, 3.0])


def test_brute_force_agreement():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        y = rng.uniform(0.01, 50, n)
        y_hat = y * rng.uniform(0.2, 3, n)
        assert mape(y_hat, y) == pytest.approx(brute_mape(y_hat, y), rel=1e-12, abs=1e-12)
        assert mae(y_hat, y) == pytest.approx(brute_mae(y_hat, y), rel=1e-12, abs=1e-12)
        assert rmse(y_hat, y) == pytest.approx(brute_rmse(y_hat, y), rel=1e-12, abs=1e-12)
        if n > 1:
            assert r2(y_hat, y) == pytest.approx(brute_r2(y_hat, y), rel=1e-12, abs=1e-12)


vectors = st.integers(2, 30).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.01, 100), min_size=n, max_size=n),
    st.lists(st.floats(0.01, 100), min_size=n, max_size=n)))


@settings(max_examples=200, deadline=None)
@given(vectors, st.randoms(), st.floats(0.1, 10))
def test_metric_properties(pair, rnd, scale):
    y_hat, y = map(np.array, pair)
    assert rmse(y_hat, y) >= mae(y_hat, y) - 1e-12
    order = list(range(len(y)))
    rnd.shuffle(order)
    assert mae(y_hat[order], y[order]) == pytest.approx(mae(y_hat, y), rel=1e-12)
    assert rmse(y_hat[order], y[order]) == pytest.approx(rmse(y_hat, y), rel=1e-12)
    assert mape(y_hat[order], y[order]) == pytest.approx(mape(y_hat, y), rel=1e-12)
    assert mae(scale * y_hat, scale * y) == pytest.approx(scale * mae(y_hat, y), rel=1e-9)
    assert rmse(scale * y_hat, scale * y) == pytest.approx(scale * rmse(y_hat, y), rel=1e-9)
    assert mape(scale * y_hat, scale * y) == pytest.approx(mape(y_hat, y), rel=1e-9)
    if np.ptp(y) > 1e-6:
        assert r2(y_hat[order], y[order]) == pytest.approx(r2(y_hat, y), rel=1e-9, abs=1e-9)
        assert r2(scale * y_hat, scale * y) == pytest.approx(r2(y_hat, y), rel=1e-9, abs=1e-9)


def test_shuffled_predictions_have_poor_r2():
    y = np.random.default_rng(4).uniform(0.1, 10, 500)
    shuffled = np.random.default_rng(5).permutation(y)
    assert r2(shuffled, y) < 0.1


def test_memorized_single_sample():
    fv = featurize(dense(1, 4, 4), Scenario())
    sample = TimingSample(fv, FIG3_STUB[("dense", "pre")], FIG3_STUB[("dense", "exe")],
                          FIG3_STUB[("dense", "post")], 1, "P1000")
    report = evaluate_bundle(constant_bundle(), Dataset(fv.layout_id, [sample]))
    row = report.breakdown["dense/exe"]
    assert row.mape_percent == pytest.approx(0.0, abs=1e-9)
    assert row.r_squared is None and "constant" in row.note
    assert report.breakdown["conv2d/exe"] is None


def test_partial_data_and_json():
    conv = oracle_dataset("conv2d", 20)
    report = evaluate_bundle(constant_bundle(), conv)
    present = [k for k, v in report.breakdown.items() if v is not None]
    assert present == ["conv2d/pre", "conv2d/exe", "conv2d/post"]
    assert report.n == 60
    doc = json.loads(json.dumps(report.to_dict()))
    assert doc["breakdown"]["dense/exe"] is None
    assert "absent" in report.render()


def test_layout_mismatch_names_columns():
    data = oracle_dataset("dense", 5, task="training")
    with pytest.raises(LayoutMismatchError):
        evaluate_bundle(constant_bundle(), data)
    unseen = oracle_dataset("dense", 5).to_unseen()
    with pytest.raises(LayoutMismatchError, match="basic_clock_mhz") as info:
        evaluate_bundle(constant_bundle(), unseen)
    assert "expected columns" in str(info.value)
