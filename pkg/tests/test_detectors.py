import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mald2gan import container, data, detectors
from mald2gan.dataset import DatasetError, LabeledDataset
from mald2gan.detectors.neighbors import nearest

FAST = {"RF": {"n_estimators": 20}, "MLP": {"epochs": 10}}


@pytest.fixture(scope="module")
def small():
    spec = data.default_synthetic_spec(M=40, n=3000)
    return data.split(data.synth_generate(spec, seed=11), 0.8, seed=12)


@pytest.fixture(scope="module")
def fitted(small):
    train, _ = small
    return {k: detectors.fit(k, train, FAST.get(k), seed=1) for k in detectors.KINDS}


def brute_force_knn_proba(train_X, train_y, queries, k):
    out = []
    for q in queries:
        d = [(int(np.sum(q != t)), i) for i, t in enumerate(train_X)]
        d.sort()
        out.append(np.mean([train_y[i] for _, i in d[:k]]))
    return np.array(out)


def unique_rows(rng, n, M):
    X = np.unique((rng.random((n * 2, M)) < 0.5).astype(np.uint8), axis=0)
    return X[rng.permutation(len(X))[:n]]


# ---------------------------------------------------------------- fit

def test_decision_tree_fits_consistent_data_exactly():
    rng = np.random.default_rng(0)
    X = unique_rows(rng, 300, 12)
    y = rng.integers(0, 2, len(X))
    m = detectors.fit("DT", LabeledDataset(X, y))
    assert np.array_equal(m.predict(X), y)


def test_one_nn_fits_duplicate_free_data_exactly():
    rng = np.random.default_rng(1)
    X = unique_rows(rng, 200, 10)
    y = rng.integers(0, 2, len(X))
    m = detectors.fit("KNN", LabeledDataset(X, y), {"k": 1})
    assert np.array_equal(m.predict(X), y)


@pytest.mark.parametrize("kind", detectors.KINDS)
def test_reasonable_tpr_on_small_synthetic(kind, fitted, small):
    _, test = small
    assert detectors.true_positive_rate(fitted[kind], test.malware) >= 0.9


def test_fit_rejects_single_class():
    X = np.zeros((5, 3), dtype=np.uint8)
    with pytest.raises(DatasetError, match="both"):
        detectors.fit("LR", LabeledDataset(X, np.ones(5)))


def test_fit_rejects_non_binary_features():
    with pytest.raises(DatasetError, match="non-binary"):
        detectors.fit("LR", LabeledDataset(np.array([[0, 2], [1, 0]]), np.array([0, 1])))


def test_unknown_kind_and_hyperparameter():
    with pytest.raises(ValueError, match="unknown detector"):
        detectors.model_class("XGB")
    with pytest.raises(ValueError, match="unknown hyperparameters"):
        detectors.RandomForest({"n_trees": 3})


# ---------------------------------------------------------------- predict_proba / predict

def test_knn_duplicates_vote_unanimously():
    X = np.array([[1, 0, 1]] * 5 + [[0, 1, 0]] * 5, dtype=np.uint8)
    y = np.array([1] * 5 + [0] * 5)
    m = detectors.fit("KNN", LabeledDataset(X, y))
    assert m.predict_proba(np.array([[1, 0, 1]]))[0] == 1.0


def test_forest_all_benign_votes():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 400)
    X = np.stack([y, np.zeros_like(y)], axis=1)
    m = detectors.fit("RF", LabeledDataset(X, y), {"n_estimators": 15})
    assert m.predict_proba(np.array([[0, 0]]))[0] == 0.0
    assert m.predict_proba(np.array([[1, 0]]))[0] == 1.0


def test_knn_matches_brute_force_scan():
    rng = np.random.default_rng(3)
    X = (rng.random((50, 16)) < 0.3).astype(np.uint8)
    y = rng.integers(0, 2, 50)
    m = detectors.fit("KNN", LabeledDataset(X, y))
    Q = (rng.random((80, 16)) < 0.3).astype(np.uint8)
    assert np.array_equal(m.predict_proba(Q), brute_force_knn_proba(X, y, Q, 5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 200), st.integers(1, 9), st.integers(1, 12))
def test_knn_equivalence_property(seed, n, k, M):
    rng = np.random.default_rng(seed)
    X = (rng.random((n, M)) < 0.5).astype(np.uint8)
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    Q = (rng.random((20, M)) < 0.5).astype(np.uint8)
    m = detectors.fit("KNN", LabeledDataset(X, y), {"k": k})
    assert np.array_equal(m.predict_proba(Q), brute_force_knn_proba(X, y, Q, min(k, n)))


def test_knn_ties_go_to_lower_index():
    T = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.uint8)
    # query [0,0] is at distance 1 from rows 0 and 1
    assert nearest(np.array([[0, 0]], dtype=np.uint8), T, 1)[0, 0] == 0


def test_predict_threshold_is_strict():
    lr = detectors.LogisticRegression()
    lr.n_features = 2
    lr.coef_ = np.zeros(2)
    lr.intercept_ = float(np.log(0.51 / 0.49))
    assert lr.predict(np.zeros((1, 2)))[0] == 1
    knn = detectors.fit("KNN", LabeledDataset(np.array([[0, 0], [1, 1]]), np.array([0, 1])),
                        {"k": 2})
    assert knn.predict_proba(np.array([[1, 0]]))[0] == 0.5
    assert knn.predict(np.array([[1, 0]]))[0] == 0


@pytest.mark.parametrize("kind", detectors.KINDS)
def test_labels_agree_with_thresholded_proba(kind, fitted, small):
    _, test = small
    m = fitted[kind]
    p = detectors.predict_proba(m, test.X)
    assert np.all((p >= 0) & (p <= 1))
    assert np.array_equal(detectors.predict(m, test.X), (p > 0.5).astype(np.uint8))


def test_predict_rejects_width_mismatch(fitted):
    with pytest.raises(DatasetError, match="features"):
        fitted["LR"].predict(np.zeros((2, 7)))


# ---------------------------------------------------------------- TPR

class _Constant:
    def __init__(self, label):
        self.label = label

    def predict(self, X):
        return np.full(len(X), self.label, dtype=np.uint8)


def test_true_positive_rate_extremes():
    X = np.ones((7, 3))
    assert detectors.true_positive_rate(_Constant(1), X) == 1.0
    assert detectors.true_positive_rate(_Constant(0), X) == 0.0
    with pytest.raises(DatasetError):
        detectors.true_positive_rate(_Constant(1), np.zeros((0, 3)))


# ---------------------------------------------------------------- persistence

@pytest.mark.parametrize("kind", detectors.KINDS)
def test_save_load_round_trip(kind, fitted, tmp_path):
    m = fitted[kind]
    path = tmp_path / f"{kind}.bin"
    detectors.save_model(m, path)
    loaded = detectors.load_model(path)
    probes = (np.random.default_rng(4).random((1000, m.n_features)) < 0.4).astype(np.uint8)
    assert np.array_equal(loaded.predict(probes), m.predict(probes))
    assert np.array_equal(loaded.predict_proba(probes), m.predict_proba(probes))


def test_load_rejects_bad_files(fitted, tmp_path):
    path = tmp_path / "m.bin"
    detectors.save_model(fitted["GB"], path)
    raw = path.read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"NOTMODEL" + raw[8:])
    with pytest.raises(container.ContainerError, match="magic"):
        detectors.load_model(tmp_path / "magic.bin")
    (tmp_path / "empty.bin").write_bytes(b"")
    with pytest.raises(container.ContainerError, match="empty"):
        detectors.load_model(tmp_path / "empty.bin")
    (tmp_path / "trunc.bin").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(container.ContainerError, match="truncated"):
        detectors.load_model(tmp_path / "trunc.bin")
    flipped = bytearray(raw)
    flipped[-10] ^= 0xFF
    (tmp_path / "crc.bin").write_bytes(bytes(flipped))
    with pytest.raises(container.ContainerError, match="checksum"):
        detectors.load_model(tmp_path / "crc.bin")


# ---------------------------------------------------------------- invariants

def test_ensemble_probability_bounds_and_finite_stumps(fitted, small):
    _, test = small
    rng = np.random.default_rng(5)
    X = np.vstack([test.X, (rng.random((500, test.n_features)) < 0.5).astype(np.uint8)])
    for kind in ("RF", "AB", "GB"):
        p = fitted[kind].predict_proba(X)
        assert np.all((p >= 0) & (p <= 1)), kind
    assert np.all(np.isfinite(fitted["AB"].alpha_))


def test_adaboost_perfect_stump_weight_is_finite():
    y = np.array([0, 1] * 20)
    X = np.stack([y, 1 - y], axis=1)
    m = detectors.fit("AB", LabeledDataset(X, y))
    assert np.all(np.isfinite(m.alpha_))
    assert np.array_equal(m.predict(X), y)


def test_decision_tree_superset_never_loses_training_accuracy():
    rng = np.random.default_rng(6)
    X = unique_rows(rng, 400, 14)
    y = rng.integers(0, 2, len(X))
    for n in (100, 200, 400):
        m = detectors.fit("DT", LabeledDataset(X[:n], y[:n]))
        assert np.mean(m.predict(X[:n]) == y[:n]) == 1.0


@pytest.mark.parametrize("kind", detectors.KINDS)
def test_same_seed_same_model(kind, small):
    train, _ = small
    a = detectors.fit(kind, train, FAST.get(kind), seed=9)
    b = detectors.fit(kind, train, FAST.get(kind), seed=9)
    pa, pb = a.payload()[1], b.payload()[1]
    assert pa.keys() == pb.keys()
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
