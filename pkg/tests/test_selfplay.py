import numpy as np
import pytest

from spars.autodiff import Adam
from spars.data import Case
from spars.errors import NumericalError, ParameterError
from spars.selfplay import (ObservationCache, PolicyNet, RLConfig, build_batch, compute_returns,
                            evaluate_against_random, policy_update, run_episodes, sample_from,
                            surrogate_objective, train_policy)

DIMS = (16, 16, 8)
EXT = (8, 8, 4)
SMALL = dict(channels=(2, 2, 2, 2), fc_widths=(8, 8, 8, 8))


class CornerScorer:
    """Score rises with the window's x corner, so moving +x wins."""

    def __init__(self, case):
        self.case, self.case_id = case, case.id

    def scores(self, windows):
        return np.array([w.corner[0] / 8.0 for w in windows])


def make_case(cid="c0", seed=0):
    vol = np.random.default_rng(seed).random(DIMS).astype(np.float32)
    return Case(cid, vol, np.zeros(DIMS, np.uint8), 1)


def small_cfg(**kw):
    base = dict(T=5, episodes_per_update=3, updates=2, epochs_per_update=1, minibatch_size=8,
                extents=EXT, step=4, seed=0)
    base.update(kw)
    return RLConfig(**base)


def small_policy(seed=0):
    return PolicyNet((8, 8, 4), seed=seed, **SMALL)


def test_returns_worked_example():
    assert compute_returns([1, -1, 1], 0.9)[0] == pytest.approx(0.91, abs=1e-12)


def test_returns_identity_random():
    r = np.random.default_rng(0)
    for _ in range(200):
        rew = r.choice([-1.0, 1.0], size=r.integers(1, 40))
        g = r.uniform(0.0, 0.999)
        G = compute_returns(rew, g)
        direct = [sum(g ** (k - t) * rew[k] for k in range(t, len(rew))) for t in range(len(rew))]
        np.testing.assert_allclose(G, direct, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(G[:-1], rew[:-1] + g * G[1:], rtol=1e-12)


def test_returns_rejects_bad_gamma():
    with pytest.raises(ParameterError):
        compute_returns([1], 1.0)


def test_sample_from_matches_probabilities():
    rng = np.random.default_rng(0)
    p = np.array([0.1, 0.0, 0.5, 0.4, 0.0, 0.0])
    draws = sample_from(np.tile(p, (20000, 1)), rng)
    freq = np.bincount(draws, minlength=6) / len(draws)
    np.testing.assert_allclose(freq, p, atol=0.015)
    assert freq[1] == 0 and freq[4] == 0


def test_config_validation():
    with pytest.raises(ParameterError):
        RLConfig(gamma=1.0)
    with pytest.raises(ParameterError):
        RLConfig(T=0)


def test_episodes_have_t_plus_one_triplets_and_zero_sum_rewards():
    case = make_case()
    cfg = small_cfg()
    pairs = run_episodes((small_policy(), None), [CornerScorer(case)] * 2, cfg, np.random.default_rng(1))
    for tm, tn in pairs:
        assert len(tm) == len(tn) == cfg.T + 1
        assert all(a + b == 0 for a, b in zip(tm.rewards, tn.rewards))
        assert len(tm.inputs) == cfg.T + 1 and tm.inputs[0].shape == (8, 8, 4)
        for s in tm.states + tn.states:
            assert s.window.fits(DIMS)


def test_observation_cache_matches_direct_crop():
    case = make_case()
    cache = ObservationCache((8, 8, 4))
    cfg = small_cfg()
    a = run_episodes((small_policy(), small_policy()), [CornerScorer(case)], cfg,
                     np.random.default_rng(3), obs_cache=cache)
    b = run_episodes((small_policy(), small_policy()), [CornerScorer(case)], cfg,
                     np.random.default_rng(3))
    assert a[0][0].actions == b[0][0].actions
    assert len(cache.store) > 0


def test_batch_advantages_are_centred():
    case = make_case()
    pairs = run_episodes((small_policy(), small_policy()), [CornerScorer(case)] * 3, small_cfg(),
                         np.random.default_rng(2))
    batch = build_batch([p[0] for p in pairs], 0.9)
    assert batch["inputs"].shape[0] == 3 * 6
    assert abs(batch["advantages"].mean()) < 1e-6
    with pytest.raises(ParameterError):
        build_batch([], 0.9)


def test_update_improves_surrogate():
    case = make_case()
    cfg = small_cfg(epochs_per_update=3)
    pol = small_policy()
    pairs = run_episodes((pol, pol), [CornerScorer(case)] * 4, cfg, np.random.default_rng(4))
    batch = build_batch([p[0] for p in pairs], cfg.gamma)
    before = surrogate_objective(pol, batch, cfg.clip_ratio)
    policy_update(pol, batch, dataclass_replace(cfg, entropy_weight=0.0), Adam(pol.params, lr=1e-2),
                  np.random.default_rng(0))
    assert surrogate_objective(pol, batch, cfg.clip_ratio) > before


def dataclass_replace(cfg, **kw):
    import dataclasses
    return dataclasses.replace(cfg, **kw)


def test_non_finite_update_leaves_parameters():
    case = make_case()
    cfg = small_cfg()
    pol = small_policy()
    pairs = run_episodes((pol, pol), [CornerScorer(case)], cfg, np.random.default_rng(5))
    batch = build_batch([p[0] for p in pairs], cfg.gamma)
    batch["advantages"] = batch["advantages"].copy()
    batch["advantages"][0] = np.nan
    before = {k: v.copy() for k, v in pol.params.arrays().items()}
    with pytest.raises(NumericalError):
        policy_update(pol, batch, cfg, Adam(pol.params, lr=1e-2), np.random.default_rng(0))
    for k, v in pol.params.arrays().items():
        assert np.array_equal(v, before[k])


def test_training_is_deterministic():
    cases = [make_case("a", 0), make_case("b", 1)]
    scorers = {c.id: CornerScorer(c) for c in cases}
    runs = [train_policy(None, cases, small_cfg(), policy=small_policy(), scorers=scorers) for _ in range(2)]
    (pa, ha), (pb, hb) = runs
    assert ha == hb and len(ha) == 2
    assert set(ha[0]) >= {"update", "mean_return_m", "mean_return_n", "policy_loss", "entropy"}
    for k, v in pa.params.arrays().items():
        assert np.array_equal(v, pb.params.arrays()[k])


class RecordingScorer(CornerScorer):
    def __init__(self, case):
        super().__init__(case)
        self.seen = []

    def scores(self, windows):
        self.seen.append(tuple(w.corner for w in windows))
        return super().scores(windows)


def test_paired_evaluation_shares_starts():
    case = make_case()
    cfg = small_cfg(T=1)
    a, b = RecordingScorer(case), RecordingScorer(case)
    evaluate_against_random(None, [a], cfg, 5, seed=9)
    evaluate_against_random(small_policy(), [b], cfg, 5, seed=9)
    # step 0 of every episode comes first, in episode order
    assert a.seen[:5] == b.seen[:5]
