import json

import numpy as np
import pandas as pd
import pytest

from copyspace import io as cio
from copyspace import rng as rngmod
from copyspace.demand import ConsumerDraws
from copyspace.geometry import fit_pca, normalize
from copyspace.synth import SyntheticConfig, generate_market


@pytest.fixture(scope="module")
def dataset():
    return generate_market(SyntheticConfig(seed=5, n_firms=8, n_products=40, n_periods=3, n_draws=10))


class TestEmbeddings:
    def test_csv_round_trip_exact(self, tmp_path, rng):
        emb = normalize(rng.normal(size=(20, 7)))
        ids = np.arange(100, 120)
        cio.write_embeddings_csv(tmp_path / "e.csv", ids, emb)
        ids2, emb2 = cio.read_embeddings_csv(tmp_path / "e.csv")
        np.testing.assert_array_equal(ids2, ids)
        np.testing.assert_array_equal(emb2, emb)

    def test_binary_layout(self, tmp_path, rng):
        emb = rng.normal(size=(3, 2))
        ids = np.array([7, 8, 9])
        path = cio.write_embeddings_bin(tmp_path / "e.emb1", ids, emb)
        raw = path.read_bytes()
        assert raw[:4] == b"EMB1"
        assert int.from_bytes(raw[4:8], "little") == 2
        assert int.from_bytes(raw[8:16], "little") == 3
        assert np.frombuffer(raw[40:64], "<f8").tolist() == emb[:, 0].tolist()
        ids2, emb2 = cio.read_embeddings_bin(path)
        np.testing.assert_array_equal(emb2, emb)
        np.testing.assert_array_equal(ids2, ids)

    def test_binary_errors(self, tmp_path):
        (tmp_path / "bad.emb1").write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(cio.DataIOError):
            cio.read_embeddings_bin(tmp_path / "bad.emb1")
        cio.write_embeddings_bin(tmp_path / "t.emb1", [1], np.ones((1, 2)))
        (tmp_path / "t.emb1").write_bytes((tmp_path / "t.emb1").read_bytes()[:-1])
        with pytest.raises(cio.DataIOError):
            cio.read_embeddings_bin(tmp_path / "t.emb1")
        with pytest.raises(cio.DataIOError):
            cio.read_embeddings_bin(tmp_path / "missing.emb1")


class TestRoundTrips:
    def test_json_nan_and_sorted(self, tmp_path):
        cio.write_json(tmp_path / "a.json", {"b": np.nan, "a": np.float64(1.5), "c": np.arange(2)})
        text = (tmp_path / "a.json").read_text()
        assert json.loads(text) == {"a": 1.5, "b": None, "c": [0, 1]}
        assert text.index('"a"') < text.index('"b"')

    def test_pca_round_trip(self, tmp_path, rng):
        r = fit_pca(rng.normal(size=(30, 5)), 2)
        cio.write_pca(tmp_path / "p.json", r)
        r2 = cio.read_pca(tmp_path / "p.json")
        x = rng.normal(size=(4, 5))
        np.testing.assert_array_equal(r2.transform(x), r.transform(x))

    def test_draws_round_trip(self, tmp_path):
        d = ConsumerDraws.halton(9, 3, 2)
        cio.write_draws_csv(tmp_path / "d.csv", d)
        d2 = cio.read_draws_csv(tmp_path / "d.csv")
        np.testing.assert_array_equal(d2.z, d.z)

    def test_dataset_round_trip(self, tmp_path, dataset):
        cio.save_dataset(dataset, tmp_path)
        data = cio.load_dataset(tmp_path)
        markets, shifter = dataset.market_list()
        assert len(data.markets) == len(markets)
        for a, b in zip(markets, data.markets):
            np.testing.assert_array_equal(a.product_ids, b.product_ids)
            np.testing.assert_array_equal(a.prices, b.prices)
            np.testing.assert_array_equal(a.shares, b.shares)
            np.testing.assert_array_equal(a.x_emb, b.x_emb)
            np.testing.assert_array_equal(a.x_full, b.x_full)
        np.testing.assert_array_equal(data.shifter, shifter)
        assert data.true_params.to_dict() == dataset.params.to_dict()
        snap = data.snapshot()
        assert [m.country for m in snap] == sorted(m.country for m in snap)

    def test_missing_files(self, tmp_path):
        with pytest.raises(cio.DataIOError):
            cio.load_dataset(tmp_path / "nope")
        with pytest.raises(OSError):
            cio.load_dataset(tmp_path)

    def test_missing_columns(self, tmp_path):
        pd.DataFrame({"market_id": [0]}).to_csv(tmp_path / "m.csv", index=False)
        with pytest.raises(cio.DataIOError, match="lacks columns"):
            cio.read_markets_csv(tmp_path / "m.csv", ConsumerDraws.single(1))


class TestManifestAndSeeds:
    def test_config_hash_canonical(self):
        assert cio.config_hash({"a": 1, "b": [1, 2]}) == cio.config_hash({"b": [1, 2], "a": 1})
        assert cio.config_hash({"a": 1}) != cio.config_hash({"a": 2})

    def test_streams_independent_and_reproducible(self):
        a = rngmod.stream(1, "x").random(5)
        np.testing.assert_array_equal(a, rngmod.stream(1, "x").random(5))
        assert not np.array_equal(a, rngmod.stream(1, "y").random(5))
        assert not np.array_equal(a, rngmod.stream(1, "x", 1).random(5))
        with pytest.raises(ValueError):
            rngmod.stream(None, "x")

    def test_env_threads(self, monkeypatch):
        monkeypatch.setenv("CML_THREADS", "3")
        assert cio.env_threads() == 3
        monkeypatch.setenv("CML_THREADS", "zero")
        with pytest.raises(ValueError):
            cio.env_threads()


class TestSynth:
    def test_deterministic(self, dataset):
        again = generate_market(SyntheticConfig(seed=5, n_firms=8, n_products=40, n_periods=3, n_draws=10))
        pd.testing.assert_frame_equal(again.panel, dataset.panel)
        np.testing.assert_array_equal(again.embeddings, dataset.embeddings)

    def test_internally_consistent(self, dataset):
        from copyspace.demand import compute_shares
        from copyspace.supply import foc_residual

        for m in dataset.market_list()[0]:
            s, _ = compute_shares(m, dataset.params)
            np.testing.assert_allclose(s, m.shares, rtol=1e-12)
            assert np.max(np.abs(foc_residual(m, dataset.params))) < 1e-8
            np.testing.assert_allclose(np.linalg.norm(m.x_full, axis=1), 1.0, atol=1e-12)

    def test_monopoly(self):
        ds = generate_market(SyntheticConfig(seed=2, n_firms=1, n_products=1, n_periods=1, n_countries=1, n_draws=5, market_sizes=(1000.0,)))
        (m,) = ds.market_list()[0]
        assert m.n_products == 1 and 0 < m.shares[0] < 1
