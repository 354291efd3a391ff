from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajstyle.pairing import (EmbeddingSet, ZeroNormError, embed_dataset, export_embeddings, gini, match,
                               read_embeddings, similarity_matrix)
from trajstyle.vae import VAE, VaeArch


def _set(z, tag="source"):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    return EmbeddingSet(tag, [(f"{tag}{i}", i) for i in range(len(z))], z)


def test_hand_computed_similarities():
    S = similarity_matrix(_set([[1, 2, 2]]), _set([[2, 1, 2], [1, 2, 2], [-2, 1, 0]]))
    assert S[0, 0] == pytest.approx(8 / 9, abs=1e-15)
    assert S[0, 1] == 1.0
    assert S[0, 2] == pytest.approx(0.0, abs=1e-15)


def test_zero_norm_names_window():
    with pytest.raises(ZeroNormError, match="style3"):
        similarity_matrix(_set([[1.0, 0.0]]), _set([[1, 1], [0, 1], [1, 0], [0, 0]], "style"))


def test_self_matching_and_duplicates():
    z = np.random.default_rng(0).normal(size=(12, 5))
    res = match(_set(z), _set(z, "target"))
    np.testing.assert_array_equal(res.matches, np.arange(12))
    dup = np.vstack([z[:3], z[:1]])
    res2 = match(_set(dup), _set(dup, "target"))
    assert res2.matches[3] == 0


def test_single_style_window_covers_everything():
    res = match(_set(np.random.default_rng(1).normal(size=(6, 4))), _set([[1.0, 0, 0, 0]], "target"))
    assert np.all(res.matches == 0) and res.coverage == 1.0
    assert res.histogram() == {6: 1}


def test_gini_values():
    assert gini([3, 3, 3]) == pytest.approx(0.0, abs=1e-15)
    assert gini([0, 0, 0, 9]) == pytest.approx(0.75)
    assert gini([]) == 0.0


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        match(_set(np.zeros((0, 3))), _set([[1.0, 0, 0]]))


def test_embed_dataset_uses_posterior_means():
    arch = VaeArch(n_channels=3, window=16, latent_dim=4, channels=(4, 5, 6))
    vae = VAE(arch, seed=2)
    W = np.random.default_rng(0).normal(size=(5, 16, 3))
    W[4] = W[1]
    es = embed_dataset(W, vae, batch=2)
    np.testing.assert_allclose(es.embeddings, vae.encode_batch(W)[0], rtol=1e-12, atol=1e-12)
    assert es.embeddings.tobytes() == embed_dataset(W, vae, batch=2).embeddings.tobytes()
    assert es.embeddings[4].tobytes() == es.embeddings[1].tobytes()
    assert len(embed_dataset(np.zeros((0, 16, 3)), vae)) == 0


def test_export_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    c, s = _set(rng.normal(size=(7, 3))), _set(rng.normal(size=(4, 3)), "target")
    res = match(c, s)
    export_embeddings(c, s, res, tmp_path / "e.csv")
    rows = read_embeddings(tmp_path / "e.csv")
    assert len(rows) == 11
    style_counts = [r["match_count"] for r in rows if r["domain"] == "target"]
    assert style_counts == res.counts.tolist()
    assert float(rows[0]["z0"]) == c.embeddings[0, 0]
    export_embeddings(c, s, None, tmp_path / "h.csv")
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 1


def test_pairing_json(tmp_path):
    res = match(_set(np.eye(3)), _set(np.eye(3) + 0.1, "target"))
    res.save(tmp_path / "p.json")
    d = json.loads((tmp_path / "p.json").read_text())
    assert [p["style_idx"] for p in d["pairs"]] == [0, 1, 2]
    assert set(d) >= {"pairs", "coverage", "gini", "match_histogram"}


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_scale_and_permutation_laws(seed, scale):
    rng = np.random.default_rng(seed)
    c, s = rng.normal(size=(9, 6)), rng.normal(size=(7, 6))
    base = match(_set(c), _set(s, "target"))
    row_scale = rng.uniform(0.1, 10.0, size=(9, 1)) * scale
    scaled = match(_set(c * row_scale), _set(s * scale, "target"))
    np.testing.assert_array_equal(scaled.matches, base.matches)
    perm = rng.permutation(7)
    permuted = match(_set(c), _set(s[perm], "target"))
    np.testing.assert_array_equal(perm[permuted.matches], base.matches)
    S = similarity_matrix(_set(c), _set(s, "target"))
    assert np.all(np.abs(S) <= 1.0)
    assert base.counts.sum() == 9
    assert sum(k * n for k, n in base.histogram().items()) == 9
