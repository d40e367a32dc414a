"""End-to-end acceptance checks, one test group per criterion.

Run with ``pytest tests/test_acceptance.py``; the terminal summary lists
one PASS/FAIL line per criterion.
"""

import time

import numpy as np
import pytest

from namecraft.cli import main
from namecraft.cnn import CnnConfig, CnnModel, encode_batch, grad_check, train_cnn
from namecraft.corpus import (
    class_weights,
    default_profile,
    generate_synthetic,
    household_profile,
    split_dataset,
    write_dataset_csv,
)
from namecraft.evaluation import bootstrap_se, cohen_kappa, confusion, prf
from namecraft.featurizer import fit_vocab
from namecraft.linear import binary_objective, train_linear
from namecraft.lrp import correctly_classified, lrp_batch, ngram_relevance
from namecraft.n2c import aggregate_certainty, certainty_from_counts, coverage
from namecraft.pipeline import train_pipeline
from namecraft.twostage import boundary_grid

from conftest import or_grid, or_model, random_ids, random_model
from oracles import binomial_se, cvx_objective, naive_tfidf


def _random_corpus(rng):
    letters = np.array(list("ABCDEFGHIJKLMNOPQRSTUVWXYZ"))
    corpus = []
    for _ in range(int(rng.integers(1, 21))):
        parts = ["".join(rng.choice(letters, size=int(rng.integers(1, 7)))) for _ in range(rng.integers(1, 4))]
        corpus.append("".join("{" + p + "}" for p in parts))
    return corpus


# --- 1. TF-IDF -----------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_c1_tfidf_oracle(record_property):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        corpus = _random_corpus(rng)
        max_n = int(rng.integers(1, 4))
        space = fit_vocab(corpus, max_n)
        vocab, expected = naive_tfidf(corpus, max_n)
        assert set(space.tokens) == vocab
        X = space.transform(corpus).toarray()
        col = {t: j for j, t in enumerate(space.tokens)}
        for i, row in enumerate(expected):
            dense = np.zeros(len(col))
            for t, v in row.items():
                dense[col[t]] = v
            worst = max(worst, float(np.abs(X[i] - dense).max()))
            norm = np.linalg.norm(X[i])
            if norm:
                assert abs(norm - 1.0) <= 1e-9
    elapsed = time.perf_counter() - t0
    record_property("max_abs_diff", f"{worst:.1e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert worst <= 1e-12
    assert elapsed < 10


# --- 2. linear solvers ---------------------------------------------------------------


@pytest.mark.criterion(2)
def test_c2_linear_objective(record_property):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        n = int(rng.integers(10, 61))
        d = int(rng.integers(2, 31))
        X = rng.normal(size=(n, d)) * (rng.random((n, d)) < 0.6)
        y = rng.integers(0, 2, size=n)
        y[:2] = [0, 1]
        C = float(rng.choice([0.1, 1.0, 10.0]))
        w = class_weights(y, 2)
        m = np.array([w[c] for c in y])
        ypm = np.where(y == 0, 1.0, -1.0)
        for kind in ("lr", "svm"):
            model = train_linear(kind, X, y, C, weights=w)
            ours = binary_objective(kind, model.weights[0], model.bias[0], X, ypm, m, C)
            ref = cvx_objective(kind, X, ypm, m, C)
            worst = max(worst, abs(ours - ref) / max(1.0, abs(ref)))
    elapsed = time.perf_counter() - t0
    record_property("max_rel_gap", f"{worst:.1e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert worst <= 1e-6
    assert elapsed < 60


@pytest.mark.criterion(2)
@pytest.mark.parametrize("kind", ["lr", "svm"])
def test_c2_balanced_minority_recall(kind):
    rng = np.random.default_rng(0)
    maj = np.c_[rng.uniform(0.05, 1.0, 180), rng.normal(size=180)]
    mino = np.c_[rng.uniform(-1.0, -0.05, 20), rng.normal(size=20)]
    X = np.r_[maj, mino]
    y = np.r_[np.zeros(180, int), np.ones(20, int)]
    plain = train_linear(kind, X, y, 0.05)
    balanced = train_linear(kind, X, y, 0.05, weights=class_weights(y, 2))
    rec = lambda mdl: float((mdl.predict_batch(X)[y == 1] == 1).mean())
    assert rec(balanced) >= rec(plain)


# --- 3. gradient check ---------------------------------------------------------------


@pytest.mark.criterion(3)
def test_c3_grad_check(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        model = random_model(seed, k=int(1 + seed % 3),
                             conv_activation=("tanh", "elu", "relu", "sigmoid")[seed % 4])
        rng = np.random.default_rng(500 + seed)
        x = random_ids(rng, 6, 10)
        y = rng.integers(0, model.n_classes, size=6)
        worst = max(worst, grad_check(model, x, y, n_params=10**6, seed=seed))
    elapsed = time.perf_counter() - t0
    record_property("max_rel_err", f"{worst:.1e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert worst <= 1e-4
    assert elapsed < 60


# --- 4. LRP conservation -------------------------------------------------------------


@pytest.fixture(scope="module")
def small_cnn(synthetic_3k):
    tr, va, _ = split_dataset(synthetic_3k, seed=0)
    cfg = CnnConfig(embed_dim=16, kernel_sizes=(1, 2, 3), filters=(24, 24, 24), dense_units=32,
                    batch_size=64, epochs=4, dropout_embed=0.0, dropout_post=0.1)
    model, _ = train_cnn(cfg, tr, va, class_weights(tr.labels, 2), seed=0, dtype=np.float64)
    return model


@pytest.mark.criterion(4)
def test_c4_conservation_and_routing(small_cnn, record_property):
    names = generate_synthetic(default_profile(), 1000, seed=404).names
    x = encode_batch(names, small_cnn.config.max_len, truncate=True)
    t0 = time.perf_counter()
    worst, violations = 0.0, 0
    _, cache = small_cnn.forward(x)
    for target in range(small_cnn.n_classes):
        res = lrp_batch(small_cnn, x, target, keep_conv=True)
        err = np.abs(res["relevance"].sum(axis=(1, 2)) + res["absorbed_bias"] - res["logit"])
        tol = np.maximum(1e-6, 1e-2 * np.abs(res["logit"]))
        worst = max(worst, float((err / tol).max()))
        violations += int((err > tol).sum())
        for k, r in res["conv"].items():
            mask = np.zeros_like(r, dtype=bool)
            np.put_along_axis(mask, cache[f"conv{k}"]["idx"][:, None, :], True, axis=1)
            assert np.all(r[~mask] == 0.0)
    elapsed = time.perf_counter() - t0
    record_property("violations", f"{violations}/{2 * len(names)}")
    record_property("max_err_over_tol", f"{worst:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert worst <= 1.0
    assert elapsed < 60


@pytest.mark.criterion(4)
def test_c4_linear_reduction():
    rng = np.random.default_rng(3)
    for _ in range(50):
        d = int(rng.integers(1, 8))
        W = rng.normal(size=d)
        cfg = CnnConfig(alphabet="AB", max_len=1, embed_dim=d, kernel_sizes=(1,), filters=(1,),
                        dense_units=0, batch_norm=False, conv_activation="linear")
        params = {
            "embedding": np.r_[np.zeros((1, d)), rng.normal(size=(2, d))],
            "conv1.W": W.reshape(1, d, 1),
            "conv1.b": np.zeros(1),
            "out.W": np.ones((1, 1)),
            "out.b": np.zeros(1),
        }
        model = CnnModel(cfg, ["x"], params, {})
        for tok in (1, 2):
            res = lrp_batch(model, np.array([[tok]]), 0, eps=0.0)
            expected = params["embedding"][tok] * W
            assert np.abs(res["relevance"][0, 0] - expected).max() <= 1e-9


# --- 5 / 6. synthetic separability and LRP recovery -----------------------------------


@pytest.fixture(scope="module")
def separability():
    t0 = time.perf_counter()
    ds = generate_synthetic(default_profile(), 10_000, seed=1)
    out = {"ds": ds}
    for kind in ("lr", "svm"):
        out[kind] = train_pipeline(kind, "single", ds, seed=1)
    out["cnn"] = train_pipeline("cnn", "single", ds, seed=1, cnn_config=CnnConfig(epochs=8), dtype=np.float32)
    out["n2c"] = train_pipeline("n2c", "single", ds, seed=1)
    out["seconds"] = time.perf_counter() - t0
    return out


@pytest.mark.slow
@pytest.mark.criterion(5)
def test_c5_separability(separability, record_property):
    test = separability["lr"].test
    for kind in ("lr", "svm", "cnn"):
        assert np.array_equal(separability[kind].test.labels, test.labels)
        preds = separability[kind].pipeline.predict(test.names)
        cm = confusion(preds, test.labels, 2)
        f1 = prf(cm).macro_f1
        record_property(f"{kind}_macro_f1", f"{f1:.4f}")
        assert cm.coverage == 1.0
        assert f1 >= 0.95
    n2c_cov = coverage(separability["n2c"].pipeline.predict(separability["n2c"].test.names))
    record_property("n2c_coverage", f"{n2c_cov:.4f}")
    record_property("seconds", f"{separability['seconds']:.0f}")
    assert n2c_cov < 1.0
    assert separability["seconds"] < 15 * 60


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_c6_lrp_letters(separability, record_property):
    model = separability["cnn"].pipeline.model
    test = separability["cnn"].test
    keep = correctly_classified(model, test.names, test.labels)
    tops = []
    for c in (0, 1):
        names = [test.names[i] for i in keep if test.labels[i] == c]
        top = ngram_relevance(model, names, 1, c, min_count=25).top(10)
        record_property(f"top10_{test.class_names[c]}", "".join(top))
        tops.append(set(top))
    assert {"F", "Q", "Z"} <= tops[0]
    assert len({"P", "V", "W"} & tops[1]) >= 2


# --- 7. two-stage ---------------------------------------------------------------------


@pytest.mark.criterion(7)
def test_c7_or_semantics(record_property):
    model = or_model()
    pairs, labels = or_grid(101)
    acc = float((model.predict(pairs[:, 0], pairs[:, 1]) == labels).mean())
    record_property("grid_accuracy", f"{acc:.4f}")
    record_property("features", ",".join(model.pool.active))
    assert acc >= 0.98
    assert model.predict(0.00, 0.99) == 1
    assert model.predict(0.21, 0.09) == 0
    _, _, s = boundary_grid(model, 101)
    assert (s > 0).any() and (s <= 0).any()


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_c7_household_recall(record_property):
    hh = generate_synthetic(household_profile(), 4000, seed=2)
    res = train_pipeline("two_stage", "single", hh, seed=2)
    pipe, test = res.pipeline, res.test
    pos = pipe.positive
    rel = [r.relative_name for r in test.records]
    minority = test.labels == pos
    two = float((pipe.predict(test.names, rel)[minority] == pos).mean())
    single = float((pipe.stage1.predict(test.names)[minority] == pos).mean())
    record_property("two_stage_recall", f"{two:.3f}")
    record_property("single_name_recall", f"{single:.3f}")
    assert two >= single


# --- 8. dictionary-classifier certainty formulas --------------------------------------


@pytest.mark.criterion(8)
def test_c8_certainty_examples():
    assert certainty_from_counts(3, 3, 5, 5, 0.7, 0.4) == pytest.approx(0.7 * 0.4, abs=0)
    assert certainty_from_counts(3, 0, 5, 0, 0.7, 0.4) == 0.0
    assert certainty_from_counts(2, 1, 2, 1, 1.0, 1.0) == 0.75
    assert aggregate_certainty([(1.0, 1.0)]) == 1.0
    assert aggregate_certainty([(1.0, 0.0), (1.0, 0.0)]) == 0.0
    assert aggregate_certainty([(2.0, 1.0), (1.0, 0.0)]) == 0.5


@pytest.mark.criterion(8)
def test_c8_monotone():
    rng = np.random.default_rng(8)
    for _ in range(10_000):
        s_x, p_x = (int(v) for v in rng.integers(1, 50, size=2))
        s_xy = int(rng.integers(0, s_x))
        p_xy = int(rng.integers(0, p_x + 1))
        q_s, q_p = rng.random(2)
        base = certainty_from_counts(s_x, s_xy, p_x, p_xy, q_s, q_p)
        assert 0.0 <= base <= 1.0
        assert certainty_from_counts(s_x, s_xy + 1, p_x, p_xy, q_s, q_p) >= base


# --- 9. throughput --------------------------------------------------------------------


def _throughput(pipe, names, repeat=3):
    pipe.predict(names[:1000])
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        pipe.predict(names)
        times.append(time.perf_counter() - t0)
    return len(names) / float(np.median(times))


@pytest.mark.slow
@pytest.mark.criterion(9)
def test_c9_throughput(separability, record_property):
    names = generate_synthetic(default_profile(), 100_000, seed=9).names
    linear = _throughput(separability["lr"].pipeline, names)
    dictionary = _throughput(separability["n2c"].pipeline, names, repeat=1)
    record_property("lr_names_per_s", f"{linear:,.0f}")
    record_property("n2c_names_per_s", f"{dictionary:,.0f}")
    assert linear >= 50_000
    assert dictionary < linear


# --- 10. determinism ------------------------------------------------------------------


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory, synthetic_small):
    root = tmp_path_factory.mktemp("determinism")
    write_dataset_csv(synthetic_small, root / "names.csv")
    write_dataset_csv(generate_synthetic(household_profile(), 500, seed=4), root / "households.csv")
    return root


TRAIN_FLAGS = {
    "lr": ["--C", "10", "--max-n", "4"],
    "svm": ["--C", "10", "--max-n", "4"],
    "cnn": ["--epochs", "2", "--embed-dim", "8", "--filters", "8,8,8", "--dense-units", "8"],
    "n2c": [],
    "two-stage": ["--C", "10", "--max-n", "3"],
}


@pytest.mark.criterion(10)
@pytest.mark.parametrize("kind", list(TRAIN_FLAGS))
def test_c10_train_byte_identical(kind, cli_data, tmp_path, capsys):
    data = cli_data / ("households.csv" if kind == "two-stage" else "names.csv")
    blobs = []
    for i in range(2):
        out = tmp_path / f"{i}.json"
        assert main(["train", "--model", kind, "--data", str(data), "--out", str(out), "--seed", "3",
                     "--bootstrap", "100", *TRAIN_FLAGS[kind]]) == 0
        blobs.append(out.read_bytes())
    capsys.readouterr()
    assert blobs[0] == blobs[1]


@pytest.mark.criterion(10)
def test_c10_explain_byte_identical(cli_data, tmp_path, capsys):
    model = tmp_path / "cnn.json"
    assert main(["train", "--model", "cnn", "--data", str(cli_data / "names.csv"), "--out", str(model),
                 "--bootstrap", "100", *TRAIN_FLAGS["cnn"]]) == 0
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert main(["explain", "--model-file", str(model), "--data", str(cli_data / "names.csv"),
                     "--target-class", "Muslim", "--out-dir", str(d), "--min-count", "3"]) == 0
    capsys.readouterr()
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(dirs[1]) for p in dirs[1].rglob("*") if p.is_file())
    for f in files:
        assert (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes()


# --- 11. metrics ----------------------------------------------------------------------


@pytest.mark.criterion(11)
def test_c11_metric_examples():
    assert cohen_kappa(list("ABBA"), list("ABBA")) == 1.0
    other = np.random.default_rng(0).choice(["A", "B"], size=5000)
    assert abs(cohen_kappa(["A"] * 5000, other)) <= 1e-12
    a = ["M"] * 50 + ["N"] * 50
    b = ["M"] * 45 + ["N"] * 5 + ["M"] * 5 + ["N"] * 45
    assert cohen_kappa(a, b) == pytest.approx(0.8)

    r = prf(np.diag([4, 7]))
    assert r.macro_f1 == 1.0 and (r.precision == 1).all() and (r.recall == 1).all()
    r = prf(np.array([[5, 0], [3, 0]]))
    assert r.precision[1] == 0 and r.recall[1] == 0 and 1 in r.undefined_precision
    r = prf(np.array([[8, 2], [1, 9]]))
    assert np.allclose(r.precision, [8 / 9, 9 / 11]) and np.allclose(r.recall, [0.8, 0.9])

    truth = np.arange(200) % 2
    assert bootstrap_se(truth, truth, 2, B=1000, seed=0)["accuracy"] == 0.0
    noisy = np.where(np.arange(200) % 7 == 0, 1 - truth, truth)
    s1 = bootstrap_se(noisy, truth, 2, B=500, seed=5)
    s2 = bootstrap_se(noisy, truth, 2, B=500, seed=5)
    assert s1["accuracy"] == s2["accuracy"] and np.array_equal(s1["precision"], s2["precision"])


@pytest.mark.criterion(11)
def test_c11_bootstrap_binomial(record_property):
    rng = np.random.default_rng(11)
    truth = rng.integers(0, 2, size=1000)
    preds = np.where(rng.random(1000) < 0.9, truth, 1 - truth)
    se = bootstrap_se(preds, truth, 2, B=1000, seed=0)["accuracy"]
    ref = binomial_se(0.9, 1000)
    record_property("bootstrap_se", f"{se:.5f}")
    record_property("binomial_se", f"{ref:.5f}")
    assert abs(se - ref) <= 0.2 * ref
