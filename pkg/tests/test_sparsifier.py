import math

import numpy as np
import pytest

from nsgrid import numerics as nx
from nsgrid import sparsifier as sp
from nsgrid.perceive import Featurizer
from nsgrid.plan import PAD, Primitive, PrimitiveOp
from nsgrid.vocab import ENTITY_INDEX


@pytest.fixture
def params(rng):
    return sp.init_params(8, 4, 6, 5, rng)


BOOK_IN_BASKET = Primitive(PrimitiveOp.PLACE_IN, "book", "basket")


def test_query_determinism_and_object_sensitivity(params):
    a = sp.embed_primitive(params, [BOOK_IN_BASKET, BOOK_IN_BASKET]).data
    assert np.array_equal(a[0], a[1])
    b = sp.embed_primitive(params, [Primitive(PrimitiveOp.PLACE_IN, "butter", "basket")]).data
    assert not np.allclose(a[0], b[0])


def test_null_support_does_not_enter_query(params):
    pick = [Primitive(PrimitiveOp.PICK, "book")]
    before = sp.embed_primitive(params, pick).data
    params["emb_rel"].data += 3.0
    params["emb_ent"].data[[-1]] += 3.0      # the stove, not referenced
    assert np.array_equal(before, sp.embed_primitive(params, pick).data)


def test_pad_rejected(params):
    with pytest.raises(ValueError):
        sp.embed_primitive(params, [PAD])


def test_relevance_examples(params, rng):
    z = rng.standard_normal((2, 7, 8))
    assert np.array_equal(sp.relevance(params, nx.tensor(np.zeros((2, 6))), z).data, np.zeros((2, 7)))
    q = rng.standard_normal((2, 6))
    a = sp.relevance(params, nx.tensor(q), z).data
    assert np.allclose(sp.relevance(params, nx.tensor(2.5 * q), z).data, 2.5 * a, atol=1e-12)
    wk = params["w_k"].data
    oracle = np.array([[q[t] @ wk @ z[t, i] / math.sqrt(8) for i in range(7)] for t in range(2)])
    assert np.abs(a - oracle).max() <= 1e-12


def test_gate_at_threshold_is_half():
    assert sp.topk_threshold(np.array([[3.0, 1.0, 2.0, 0.0]]), 2)[0] == 1.5
    tied = sp.soft_topk_gate(nx.tensor(np.array([[3.0, 1.0, 1.0, 0.0]])), 2, 0.1).data
    assert tied[0, 1] == tied[0, 2] == 0.5
    full = sp.soft_topk_gate(nx.tensor(np.array([[3.0, 1.0, 2.0, 0.0]])), 4, 0.1).data
    assert full[0, 3] == 0.5


def test_gate_sharpens_with_small_temperature():
    alpha = nx.tensor(np.array([[2.0, 0.5, 1.7, -1.0, 0.0]]))
    g = sp.soft_topk_gate(alpha, 2, 1e-4).data[0]
    assert np.all(g[[0, 2]] > 1 - 1e-6) and np.all(g[[1, 3, 4]] < 1e-6)


@pytest.fixture
def frozen_threshold(monkeypatch):
    """Central differences with the K-th-score cut held at its unperturbed value."""
    cache = {}
    real = sp.topk_threshold

    def fixed(alpha, k):
        return cache.setdefault((alpha.shape, k), real(alpha, k))
    monkeypatch.setattr(sp, "topk_threshold", fixed)
    return cache


def test_gate_gradient_ignores_threshold(rng, frozen_threshold):
    for _ in range(10):
        frozen_threshold.clear()
        a0 = rng.standard_normal((2, 6))
        assert nx.grad_check(lambda a: (sp.soft_topk_gate(a, 3, 0.7) * np.arange(6.0)).sum(), a0) <= 1e-4


def test_threshold_path_is_cut(rng):
    a = nx.param(rng.standard_normal((1, 6)))
    (g,) = nx.backward(sp.soft_topk_gate(a, 3, 0.5).sum(), [a])
    s = sp.soft_topk_gate(a, 3, 0.5).data
    assert np.allclose(g, s * (1 - s) / 0.5)


def test_gate_monotone_in_own_score(frozen_threshold):
    base = np.array([[0.3, -0.2, 1.0, 0.8]])
    sp.topk_threshold(base, 2)
    vals = []
    for x in np.linspace(-2, 2, 50):
        a = base.copy()
        a[0, 1] = x
        vals.append(sp.soft_topk_gate(nx.tensor(a), 2, 0.3).data[0, 1])
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_hard_topk_examples():
    assert sp.hard_topk(np.array([3.0, 1.0, 2.0]), 2).tolist() == [0, 2]
    assert sp.hard_topk(np.zeros(5), 2).tolist() == [0, 1]
    assert sp.hard_topk(np.arange(4.0), 4).tolist() == [0, 1, 2, 3]


def test_fuse_hard_single_token(params, rng):
    z = rng.standard_normal((1, 7, 8))
    alpha = nx.tensor(rng.standard_normal((1, 7)))
    idx = sp.hard_topk(alpha.data, 1)
    c, w = sp.fuse_hard(params, alpha, idx, z)
    assert np.allclose(c.data[0], z[0, idx[0, 0]] @ params["w_v"].data)
    assert w.data[0, 0] == 1.0


def test_fuse_hard_uniform_scores(params, rng):
    z = rng.standard_normal((1, 7, 8))
    _, w = sp.fuse_hard(params, nx.tensor(np.zeros((1, 7))), sp.hard_topk(np.zeros((1, 7)), 3), z)
    assert np.allclose(w.data, 1 / 3)


def test_soft_weights_normalized(params, rng):
    z = rng.standard_normal((3, 7, 8))
    alpha = nx.tensor(rng.standard_normal((3, 7)) * 5)
    _, w = sp.fuse_soft(params, alpha, sp.soft_topk_gate(alpha, 2, 0.1), z)
    assert np.allclose(w.data.sum(axis=1), 1, atol=1e-12)


def test_hard_context_ignores_unselected(params, rng):
    q = sp.embed_primitive(params, [BOOK_IN_BASKET])
    key = (q @ params["w_k"]).data[0]
    key = key / np.linalg.norm(key)
    for _ in range(20):
        z = rng.standard_normal((1, 7, 8))
        c, info = sp.sparsify(params, q, z, "hard", 3)
        rest = np.setdiff1d(np.arange(7), info["index"][0])
        noise = rng.standard_normal((len(rest), 8)) * 5
        noise -= np.outer(noise @ key + rng.uniform(0, 3, len(rest)), key)   # scores only drop
        z2 = z.copy()
        z2[0, rest] += noise
        assert np.array_equal(sp.sparsify(params, q, z2, "hard", 3)[0].data, c.data)


def test_end_to_end_gradient(params, rng, frozen_threshold):
    z = rng.standard_normal((2, 7, 8))
    prims = [BOOK_IN_BASKET, Primitive(PrimitiveOp.PICK, "butter")]

    def f():
        c, _ = sp.sparsify(params, sp.embed_primitive(params, prims), z, "soft", 3, 0.5)
        return (c * c).sum()
    assert nx.grad_check_params(f, params) <= 1e-4


def test_grounding_prior_scores_the_referenced_entity():
    feat = Featurizer()
    params = sp.init_params(32, 16, 32, 32, np.random.default_rng(0), feat.entity_directions(), 5.0)
    q = sp.embed_primitive(params, [Primitive(PrimitiveOp.PICK, "book")])
    basis = feat.entity_directions()
    scores = (q.data @ params["w_k"].data @ basis.T)[0] / math.sqrt(32)
    assert np.argmax(scores) == ENTITY_INDEX["book"]


def test_attention_csv(tmp_path, params, rng):
    z = rng.standard_normal((2, 7, 8))
    _, info = sp.sparsify(params, sp.embed_primitive(params, [BOOK_IN_BASKET] * 2), z, "hard", 3)
    path = tmp_path / "att.csv"
    sp.dump_attention_csv(path, info["alpha"], info["index"], info["weights"])
    lines = path.read_text().splitlines()
    assert lines[0] == "decision,token,alpha,selected,weight"
    assert len(lines) == 1 + 2 * 7
    assert sum(int(line.split(",")[3]) for line in lines[1:]) == 6
