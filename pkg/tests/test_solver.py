import math

import numpy as np
import pytest

from nsgrid import numerics as nx
from nsgrid import solver

SHAPE = solver.SolverShape(d_in=6, d_model=8, n_layers=2, n_heads=2, horizon=2, a_dim=4)


@pytest.fixture
def params(rng):
    return solver.init_params(SHAPE, rng, init_log_std=-0.5)


def test_causal_outputs(params, rng):
    e = rng.standard_normal((1, 5, 6))
    full = solver.chunk_means(params, SHAPE, nx.tensor(e)).data
    for t in range(1, 5):
        part = solver.chunk_means(params, SHAPE, nx.tensor(e[:, :t])).data
        assert np.allclose(part, full[:, :t], atol=1e-12)
    e2 = e.copy()
    e2[0, 3:] += 10.0
    assert np.array_equal(solver.chunk_means(params, SHAPE, nx.tensor(e2)).data[0, :3], full[0, :3])


def test_chunk_dist_reads_last_position(params, rng):
    e = rng.standard_normal((4, 6))
    a, b = solver.chunk_dist(params, SHAPE, e), solver.chunk_dist(params, SHAPE, e)
    assert np.array_equal(a.mean, b.mean)
    assert np.array_equal(a.mean, solver.chunk_means(params, SHAPE, nx.tensor(e[None])).data[0, -1])
    with pytest.raises(ValueError):
        solver.chunk_dist(params, SHAPE, np.zeros((0, 6)))


def test_log_prob_at_mean_unit_std():
    lp = solver.chunk_log_prob(nx.tensor(np.zeros(8)), nx.tensor(np.zeros(8)), np.zeros(8))
    assert lp.item() == pytest.approx(-4 * math.log(2 * math.pi), abs=1e-12)
    assert lp.item() == pytest.approx(-7.3515, abs=1e-4)


def test_log_prob_grows_as_std_shrinks():
    mean = nx.tensor(np.zeros(8))
    vals = [solver.chunk_log_prob(mean, nx.tensor(np.full(8, s)), np.zeros(8)).item()
            for s in (0.5, 0.0, -1.0)]
    assert vals[0] < vals[1] < vals[2]


def test_sample_mean_matches(rng):
    dist = solver.ChunkDist(rng.standard_normal(8), np.full(8, -0.3))
    n = 100_000
    samples = np.stack([solver.sample_chunk(dist, rng) for _ in range(2000)])
    big = dist.mean + dist.std * rng.standard_normal((n, 8))
    for s in (samples, big):
        tol = 3 * dist.std / math.sqrt(len(s))
        assert np.all(np.abs(s.mean(axis=0) - dist.mean) < tol)


def test_density_integrates_to_one():
    xs = np.linspace(-8, 8, 4001)
    mean, ls = nx.tensor(np.array([[0.4]])), nx.tensor(np.array([-0.2]))
    dens = np.exp([solver.chunk_log_prob(mean, ls, np.array([[x]])).item() for x in xs])
    assert abs(np.trapezoid(dens, xs) - 1) < 0.01


def test_kl_closed_form(rng):
    m = nx.tensor(rng.standard_normal(8))
    ls = nx.tensor(np.full(8, -0.7))
    assert solver.chunk_kl(m, ls, m.data, ls.data).item() == 0.0
    shifted = m.data.copy()
    shifted[2] += 0.3
    sigma = math.exp(-0.7)
    assert solver.chunk_kl(m, ls, shifted, ls.data).item() == pytest.approx(0.09 / (2 * sigma ** 2))
    for _ in range(50):
        a = solver.chunk_kl(nx.tensor(rng.standard_normal(8)), nx.tensor(rng.uniform(-2, 1, 8)),
                            rng.standard_normal(8), rng.uniform(-2, 1, 8)).item()
        assert a >= 0


def test_bc_loss_examples(rng):
    tgt = rng.standard_normal((3, 8))
    mask = np.ones((3, 8))
    assert solver.bc_loss(nx.tensor(tgt), tgt, mask).item() == 0.0
    assert solver.bc_loss(nx.tensor(tgt + 0.2), tgt, mask).item() == pytest.approx(0.04)
    mask[2, 4:] = 0
    noisy = tgt.copy()
    noisy[2, 4:] += 100
    assert solver.bc_loss(nx.tensor(noisy), tgt, mask).item() == 0.0


def test_action_blocks_pad_last_block():
    acts = np.arange(20.0).reshape(5, 4)
    blocks, mask = solver.action_blocks(acts, 2, offset=0)
    assert blocks.shape == (3, 8)
    assert mask[2].tolist() == [1] * 4 + [0] * 4
    assert np.array_equal(blocks[2, 4:], np.zeros(4))
    blocks1, _ = solver.action_blocks(acts, 2, offset=1)
    assert np.array_equal(blocks1[0], acts[1:3].ravel())


def test_log_std_clamped(params):
    params["log_std"].data[:] = -9.0
    assert np.all(solver.log_std(params).data == solver.LOG_STD_MIN)


def test_gradients(params, rng):
    e = rng.standard_normal((2, 3, 6))
    acts = rng.standard_normal((2, 3, 8))
    sub = {k: params[k] for k in ("w_in", "l1.wq", "l0.w2", "w_out", "log_std")}

    def logp():
        return solver.chunk_log_prob(solver.chunk_means(params, SHAPE, nx.tensor(e)),
                                     solver.log_std(params), acts).sum()

    def bc():
        m = solver.chunk_means(params, SHAPE, nx.tensor(e)).reshape(6, 8)
        return solver.bc_loss(m, acts.reshape(6, 8), np.ones((6, 8)))
    assert nx.grad_check_params(logp, sub, n_coords=6, rng=rng) <= 1e-4
    assert nx.grad_check_params(bc, sub, n_coords=6, rng=rng) <= 1e-4


def test_depth_and_heads_validated():
    with pytest.raises(ValueError):
        solver.SolverShape(d_in=4, d_model=10, n_heads=3)
