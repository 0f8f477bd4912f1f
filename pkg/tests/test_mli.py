import numpy as np
import pytest

from stare import encoder as enc
from stare import mli
from stare.corpus import Corpus, Record

from oracles import jacobi_svd_top_right


@pytest.fixture(scope="module")
def probe_cfg():
    return mli.ProbeConfig(epochs=200, lr=0.5, l2=1e-4)


class TestLabelCorpus:
    def test_default_label_sets(self):
        pos = mli.default_label_set("POS")
        deps = mli.default_label_set("DEPS")
        pt = mli.default_label_set("PT")
        assert "NOUN" in pos and len(pos) == 17
        assert "NSUBJ" in deps and "ROOT" in deps and len(deps) == 25
        assert "NP" in pt and len(pt) == 27

    def test_tsv_round_trip(self, tmp_path):
        path = tmp_path / "labels.tsv"
        path.write_text("hello\tNOUN\nworld\tNOUN\n\n!\tPUNCT\n", encoding="utf-8")
        corpus = mli.load_token_label_corpus(path, "POS")
        assert corpus.sentences == [(["hello", "world"], ["NOUN", "NOUN"]),
                                    (["!"], ["PUNCT"])]

    def test_unknown_label_named(self, tmp_path):
        path = tmp_path / "labels.tsv"
        path.write_text("hello\tBOGUS\n", encoding="utf-8")
        with pytest.raises(mli.LabelSetMismatch, match="BOGUS"):
            mli.load_token_label_corpus(path, "POS")

    def test_length_mismatch(self):
        with pytest.raises(mli.LabelSetMismatch):
            mli.TokenLabelCorpus([(["a", "b"], ["NOUN"])], ["NOUN"], "POS")

    def test_empty_sentence(self):
        with pytest.raises(mli.EmptySentence):
            mli.TokenLabelCorpus([([], [])], ["NOUN"], "POS")

    def test_malformed_line_numbered(self, tmp_path):
        path = tmp_path / "labels.tsv"
        path.write_text("token-without-tab\n", encoding="utf-8")
        with pytest.raises(ValueError, match=":1"):
            mli.load_token_label_corpus(path, "POS")


class TestCollectStates:
    def _cfg(self):
        vocab = enc.build_vocab(["alpha beta gamma delta epsilon"])
        return enc.EncoderConfig(vocab=vocab, d=8, layers=3, heads=2, max_len=4, seed=2)

    def test_row_count(self):
        cfg = self._cfg()
        params = enc.init_params(cfg)
        corpus = mli.TokenLabelCorpus(
            [(["alpha", "beta", "gamma"], ["NOUN", "VERB", "NOUN"])],
            ["NOUN", "VERB"], "POS")
        X, y = mli.collect_states(corpus, params, cfg, layer=2)
        assert X.shape == (3, cfg.d)
        assert list(y) == [0, 1, 0]

    def test_deterministic(self):
        cfg = self._cfg()
        params = enc.init_params(cfg)
        corpus = mli.TokenLabelCorpus([(["alpha", "beta"], ["NOUN", "VERB"])],
                                      ["NOUN", "VERB"], "POS")
        X1, _ = mli.collect_states(corpus, params, cfg, 1)
        X2, _ = mli.collect_states(corpus, params, cfg, 1)
        assert np.array_equal(X1, X2)

    def test_truncation_consistent(self):
        cfg = self._cfg()  # max_len 4
        params = enc.init_params(cfg)
        tokens = ["alpha", "beta", "gamma", "delta", "epsilon"]
        corpus = mli.TokenLabelCorpus([(tokens, ["NOUN"] * 5)], ["NOUN", "VERB"], "POS")
        X, y = mli.collect_states(corpus, params, cfg, 1)
        assert X.shape[0] == 4 == len(y)

    def test_layer_bounds(self):
        cfg = self._cfg()
        params = enc.init_params(cfg)
        corpus = mli.TokenLabelCorpus([(["alpha"], ["NOUN"])], ["NOUN", "VERB"], "POS")
        with pytest.raises(enc.LayerOutOfRange):
            mli.collect_states(corpus, params, cfg, 0)


class TestTrainProbe:
    def test_separable_blobs(self, probe_cfg):
        rng = np.random.default_rng(0)
        X = np.vstack([rng.standard_normal((60, 8)) * 0.1 + [4, 0, 0, 0, 0, 0, 0, 0],
                       rng.standard_normal((60, 8)) * 0.1 - [4, 0, 0, 0, 0, 0, 0, 0]])
        y = np.array([0] * 60 + [1] * 60)
        probe = mli.train_probe(X, y, layer=2, prop="POS", n_labels=2, config=probe_cfg)
        assert probe.training_accuracy >= 0.99

    def test_chance_level_on_random_labels(self, probe_cfg):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((400, 8))
        y = rng.integers(0, 4, size=400)
        probe = mli.train_probe(X, y, 1, "POS", 4, probe_cfg)
        assert abs(probe.training_accuracy - 0.25) <= 0.1

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((30, 8))
        y = rng.integers(0, 3, size=30)
        W = rng.standard_normal((3, 8)) * 0.5
        b = rng.standard_normal(3) * 0.1
        _, dW, db = mli.probe_loss_and_grads(W, b, X, y, l2=1e-3)
        eps = 1e-5
        worst = 0.0
        for arr, grad in ((W, dW), (b, db)):
            flat, gflat = arr.reshape(-1), grad.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + eps
                lp = mli.probe_loss_and_grads(W, b, X, y, 1e-3)[0]
                flat[idx] = orig - eps
                lm = mli.probe_loss_and_grads(W, b, X, y, 1e-3)[0]
                flat[idx] = orig
                fd = (lp - lm) / (2 * eps)
                worst = max(worst, abs(gflat[idx] - fd) / max(1e-8, abs(gflat[idx]) + abs(fd)))
        assert worst <= 1e-4

    def test_loss_curve_monotone(self, probe_cfg):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((100, 6))
        y = rng.integers(0, 3, size=100)
        probe = mli.train_probe(X, y, 1, "POS", 3, probe_cfg)
        curve = probe.loss_curve
        assert all(b <= a + 1e-12 for a, b in zip(curve, curve[1:]))

    def test_degenerate_labels(self, probe_cfg):
        X = np.ones((10, 4))
        y = np.zeros(10, dtype=int)
        with pytest.raises(mli.DegenerateLabels):
            mli.train_probe(X, y, 1, "POS", 2, probe_cfg)


class TestExtractDirection:
    def _probe(self, W):
        return mli.Probe(W=W, b=np.zeros(W.shape[0]), layer=2, prop="POS",
                         training_accuracy=0.0)

    def test_rank_one(self):
        v = np.array([0.0, 3.0, -4.0, 0.0])
        W = np.zeros((3, 4))
        W[1] = v
        u = mli.extract_direction(self._probe(W)).u
        expected = v / np.linalg.norm(v)
        if expected[np.flatnonzero(expected)[0]] < 0:
            expected = -expected
        assert np.abs(u - expected).max() <= 1e-9

    def test_diagonal(self):
        W = np.zeros((2, 5))
        W[0, 0], W[1, 1] = 3.0, 1.0
        u = mli.extract_direction(self._probe(W)).u
        assert abs(u[0] - 1.0) <= 1e-9
        assert np.abs(u[1:]).max() <= 1e-9

    def test_against_jacobi_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            k, d = int(rng.integers(2, 12)), int(rng.integers(4, 40))
            W = rng.standard_normal((k, d))
            u = mli.extract_direction(self._probe(W)).u
            oracle = jacobi_svd_top_right(W)
            assert abs(float(u @ oracle)) >= 0.999

    def test_unit_norm_and_sign(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            W = rng.standard_normal((4, 9))
            u = mli.extract_direction(self._probe(W)).u
            assert abs(np.linalg.norm(u) - 1.0) <= 1e-9
            assert u[np.flatnonzero(u)[0]] > 0

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        W = rng.standard_normal((5, 12))
        u1 = mli.extract_direction(self._probe(W)).u
        u2 = mli.extract_direction(self._probe(2.5 * W)).u
        assert np.allclose(u1, u2, atol=1e-9)

    def test_zero_matrix(self):
        with pytest.raises(mli.ZeroMatrix):
            mli.extract_direction(self._probe(np.zeros((3, 4))))

    def test_layer_and_property_carried(self):
        rng = np.random.default_rng(7)
        direction = mli.extract_direction(self._probe(rng.standard_normal((3, 6))))
        assert direction.layer == 2
        assert direction.prop == "POS"
        assert direction.lam == 0.0


def test_jacobi_oracle_self_check():
    rng = np.random.default_rng(8)
    for _ in range(10):
        W = rng.standard_normal((int(rng.integers(2, 10)), int(rng.integers(3, 20))))
        _, _, vt = np.linalg.svd(W)
        assert abs(float(jacobi_svd_top_right(W) @ vt[0])) >= 0.999999


class TestSweep:
    def _setup(self):
        records = [Record(f"r{i}", f"token{i} alpha beta", f"[A{i % 2} x{i} ]")
                   for i in range(8)]
        bank = Corpus(records, "bracketed")
        vocab = enc.build_vocab([r.utterance for r in records])
        cfg = enc.EncoderConfig(vocab=vocab, d=8, layers=2, heads=2, max_len=8, seed=0)
        params = enc.init_params(cfg)
        sentences = [([f"token{i}", "alpha", "beta"], ["NOUN", "VERB", "NOUN"])
                     for i in range(8)]
        corpora = {"POS": mli.TokenLabelCorpus(sentences, ["NOUN", "VERB"], "POS")}
        dev = [("token1 alpha beta", "[A1 x1 ]")]
        return dev, bank, params, cfg, corpora

    def test_lambda_zero_rows_equal_baseline(self):
        dev, bank, params, cfg, corpora = self._setup()
        grid = mli.SweepGrid(layers=[1, 2], properties=["POS"], lambdas=[0.0])
        result = mli.sweep(dev, bank, params, cfg, corpora, grid, k=2)
        assert result.best is None
        assert result.best_score == result.baseline_score
        for row in result.rows:
            if row.prop:
                assert row.score == result.baseline_score

    def test_baseline_always_first_row(self):
        dev, bank, params, cfg, corpora = self._setup()
        grid = mli.SweepGrid(layers=[1], properties=["POS"], lambdas=[1.0])
        result = mli.sweep(dev, bank, params, cfg, corpora, grid, k=2)
        assert result.rows[0].prop == ""
        assert result.rows[0].score == result.baseline_score
        assert result.best_score >= result.baseline_score

    def test_missing_label_corpus_recorded_not_fatal(self):
        dev, bank, params, cfg, corpora = self._setup()
        grid = mli.SweepGrid(layers=[1], properties=["POS", "PT"], lambdas=[1.0])
        result = mli.sweep(dev, bank, params, cfg, corpora, grid, k=2)
        errors = [row for row in result.rows if row.error]
        assert any(row.prop == "PT" for row in errors)

    def test_default_layers(self):
        assert mli.default_sweep_layers(4) == [2, 3, 4]
        assert mli.default_sweep_layers(12) == [4, 8, 12]


class TestDirectionPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        u = rng.standard_normal(16)
        u /= np.linalg.norm(u)
        direction = enc.InjectionDirection(u=u, layer=3, lam=2.5, prop="DEPS")
        path = tmp_path / "direction.json"
        mli.save_direction(direction, path)
        loaded = mli.load_direction(path)
        assert np.array_equal(loaded.u, u)
        assert (loaded.layer, loaded.lam, loaded.prop) == (3, 2.5, "DEPS")


def test_fixture_sweep_rise_then_decline(sweep_result):
    """At least one property curve improves on its baseline then falls back."""
    from collections import defaultdict

    curves = defaultdict(list)
    for row in sweep_result.rows:
        if row.prop and not row.error:
            curves[(row.prop, row.layer)].append((row.lam, row.score))
    baseline = sweep_result.baseline_score
    found = False
    for values in curves.values():
        values.sort()
        scores = [s for _, s in values]
        peak = max(scores)
        peak_idx = scores.index(peak)
        if peak > baseline and min(scores[peak_idx:]) < peak:
            found = True
            break
    assert found


def test_fixture_probes_beat_chance(sweep_result, label_corpora):
    for (prop, _layer), probe in sweep_result.probes.items():
        chance = 1.0 / len(label_corpora[prop].label_set)
        assert probe.training_accuracy > chance + 0.2
