import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from nsgrid.env import ManipGrid, Task
from nsgrid.perceive import Featurizer, pool, word_hash

FEAT = Featurizer()
INSTR = "put the alphabet soup in the basket"


def scene(seed=11):
    env = ManipGrid()
    return env, env.reset(Task.from_instruction(INSTR, seed=seed))


def test_one_cell_change_touches_one_token():
    env, obs = scene()
    a = FEAT.encode_tokens(obs, INSTR)
    soup = env.state.objects["alphabet_soup"]
    x, y = soup.position
    free = next((i, j) for i in range(8) for j in range(8)
                if not obs.image_features[i, j].any())
    soup.position = free
    b = FEAT.encode_tokens(env.observe(), INSTR)
    changed = np.flatnonzero(np.any(a != b, axis=1))
    assert sorted(changed.tolist()) == sorted([x * 8 + y, free[0] * 8 + free[1]])


def test_tokens_deterministic():
    _, obs = scene()
    assert np.array_equal(FEAT.encode_tokens(obs, INSTR), Featurizer().encode_tokens(obs, INSTR))


def test_instruction_only_touches_its_slice():
    _, obs = scene()
    a = FEAT.encode_tokens(obs, INSTR)
    b = FEAT.encode_tokens(obs, "open the microwave")
    d = FEAT.d_psi - FEAT.d_instr
    assert np.array_equal(a[:, :d], b[:, :d])
    assert np.all(np.any(a[:, d:] != b[:, d:], axis=1))
    assert a.shape == (65, 32)


def test_word_hash_is_fixed():
    assert word_hash("basket", 1234) == word_hash("basket", 1234)
    assert word_hash("basket", 1234) != word_hash("basket", 1235)


def test_pool_of_constant_tokens_is_zero():
    assert np.abs(pool(np.full((5, 8), 2.5))).max() < 1e-9
    z = np.tile(np.arange(8.0), (5, 1))
    assert np.allclose(pool(z), pool(z[:1]))


@given(st.randoms(use_true_random=False))
def test_pool_exactly_permutation_invariant(r):
    z = np.random.default_rng(r.randint(0, 10**6)).standard_normal((65, 32))
    perm = np.random.default_rng(r.randint(0, 10**6)).permutation(65)
    assert np.array_equal(pool(z), pool(z[perm]))


def test_pool_single_token_is_layer_norm():
    z = np.array([[1.0, 2.0, 4.0]])
    x = z[0] - z[0].mean()
    assert np.allclose(pool(z), x / np.sqrt((x * x).mean() + 1e-5))


def test_shaping_latent_range_and_determinism():
    _, obs = scene()
    a, b = FEAT.shaping_encode(obs), FEAT.shaping_encode(obs)
    assert np.array_equal(a, b) and a.shape == (16,)
    assert np.all(np.abs(a) < 1)


def test_shaping_latent_sees_gripper_position():
    rng = np.random.default_rng(0)
    for seed in range(20):
        env, obs = scene(seed)
        env.step(np.array([rng.uniform(0.6, 1), rng.uniform(0.6, 1), 0, 0]))
        assert not np.array_equal(FEAT.shaping_encode(obs), FEAT.shaping_encode(env.observe()))


def test_featurizer_has_no_trainable_state():
    before = {k: v.copy() for k, v in vars(FEAT).items() if isinstance(v, np.ndarray)}
    _, obs = scene()
    for _ in range(3):
        FEAT.encode_tokens(obs, INSTR)
        FEAT.shaping_encode(obs)
    assert all(np.array_equal(before[k], getattr(FEAT, k)) for k in before)
