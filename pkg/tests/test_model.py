import numpy as np
import pytest
import torch

from prefopt.data import History, all_pairs
from prefopt.model import (
    VAR_FLOOR,
    GaussianPrediction,
    ModelConfig,
    PolicyDistribution,
    PreferencePolicy,
    build_mask,
)


# --- mask ------------------------------------------------------------------


def test_mask_small_case_by_hand():
    # 2 context duels, 3 query points: context block fully connected, each
    # query row sees the context plus itself only.
    m = build_mask(2, 3)
    expected = torch.tensor(
        [
            [1, 1, 0, 0, 0],
            [1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 1, 0, 1, 0],
            [1, 1, 0, 0, 1],
        ],
        dtype=torch.bool,
    )
    assert torch.equal(m, expected)


def test_mask_no_context():
    assert torch.equal(build_mask(0, 4), torch.eye(4, dtype=torch.bool))


def test_mask_rejects_empty_query():
    with pytest.raises(ValueError):
        build_mask(2, 0)


def test_query_tokens_cannot_see_each_other(tiny_model):
    # Changing one query point must leave every other query output untouched.
    rng = np.random.default_rng(0)
    ctx = tiny_model.embed_duel(
        rng.uniform(-1, 1, (3, 1)), rng.uniform(-1, 1, (3, 1)), np.array([0, 1, 0])
    )
    q = rng.uniform(-1, 1, (5, 1))
    with torch.no_grad():
        base = tiny_model.encode_query(ctx, tiny_model.embed_point(q))
        q2 = q.copy()
        q2[0] = -q2[0] + 0.1
        bumped = tiny_model.encode_query(ctx, tiny_model.embed_point(q2))
    assert not torch.allclose(base[0], bumped[0])
    assert torch.allclose(base[1:], bumped[1:])


# --- config ----------------------------------------------------------------


def test_config_head_divisibility():
    with pytest.raises(ValueError):
        ModelConfig(dimension=1, embed_dim=10, heads=4)


def test_config_round_trip():
    cfg = ModelConfig(dimension=3, embed_dim=32, layers=2, heads=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# --- policy distribution ---------------------------------------------------


def test_policy_distribution_probabilities_sum_to_one():
    logits = torch.tensor([0.1, -0.5, 2.0])
    dist = PolicyDistribution(pairs=all_pairs(3), logits=logits)
    assert float(dist.probs.sum()) == pytest.approx(1.0)
    assert dist.argmax() == 2


def test_policy_distribution_rejects_degenerate():
    with pytest.raises(ValueError):
        PolicyDistribution(pairs=np.zeros((0, 2), int), logits=torch.zeros(0))
    with pytest.raises(ValueError):
        PolicyDistribution(
            pairs=all_pairs(2), logits=torch.tensor([float("-inf")])
        )


def test_policy_sample_is_seedable():
    dist = PolicyDistribution(pairs=all_pairs(4), logits=torch.randn(6))
    g1 = torch.Generator()
    g1.manual_seed(3)
    g2 = torch.Generator()
    g2.manual_seed(3)
    assert [dist.sample(g1) for _ in range(10)] == [dist.sample(g2) for _ in range(10)]


# --- permutation invariance ------------------------------------------------


def test_history_permutation_invariance(tiny_model):
    # The history is a set: shuffling duels must leave the policy and the
    # per-point predictions unchanged.
    rng = np.random.default_rng(42)
    h = History(dimension=1, budget=8)
    for _ in range(6):
        h.append(rng.uniform(-1, 1, 1), rng.uniform(-1, 1, 1), int(rng.integers(2)))
    q = rng.uniform(-1, 1, (6, 1))
    pairs = all_pairs(6)
    with torch.no_grad():
        base = tiny_model.forward_acquisition(h, q, pairs, 3, 8).probs

        perm = rng.permutation(6)
        h2 = History(dimension=1, budget=8)
        for k in perm:
            h2.append(h.x1[k], h.x2[k], h.labels[k])
        shuffled = tiny_model.forward_acquisition(h2, q, pairs, 3, 8).probs
    assert torch.allclose(base, shuffled, atol=1e-3)


# --- heads -----------------------------------------------------------------


def test_acquisition_scores_use_time_feature(tiny_model):
    rng = np.random.default_rng(1)
    lam = torch.randn(5, tiny_model.cfg.embed_dim)
    pairs = all_pairs(5)
    s1 = tiny_model.acquisition_scores(lam, pairs, 1, 10)
    s2 = tiny_model.acquisition_scores(lam, pairs, 9, 10)
    assert not torch.allclose(s1, s2)
    with pytest.raises(ValueError):
        tiny_model.acquisition_scores(lam, pairs, 11, 10)


def test_acquisition_scores_ignore_time_when_disabled():
    torch.manual_seed(0)
    m = PreferencePolicy(
        ModelConfig(dimension=1, embed_dim=16, ff_dim=32, layers=1, heads=2,
                    use_time_features=False)
    )
    lam = torch.randn(4, 16)
    pairs = all_pairs(4)
    assert torch.allclose(
        m.acquisition_scores(lam, pairs, 1, 10),
        m.acquisition_scores(lam, pairs, 10, 10),
    )


def test_predict_gaussian_variance_floor(tiny_model):
    lam = torch.randn(100, tiny_model.cfg.embed_dim) * 10
    pred = tiny_model.predict_gaussian(lam)
    assert torch.all(pred.var >= VAR_FLOOR)


def test_preference_probability_closed_form():
    # Equal sampled utilities -> 1/2; a large gap saturates toward 1.
    pred = GaussianPrediction(
        mean=torch.tensor([0.0, 0.0, 10.0]), var=torch.full((3,), VAR_FLOOR)
    )
    pairs = torch.tensor([[0, 1], [0, 2]])
    p = PreferencePolicy.preference_probability(pred, pairs, torch.zeros(3))
    assert float(p[0]) == pytest.approx(0.5, abs=1e-6)
    assert float(p[1]) > 0.99


def test_forward_prediction_requires_context(tiny_model, rng):
    from prefopt.data import DataConfig, build_meta_task, split_prediction_set
    from prefopt.tasks import sample_gp_function, sample_kernel

    fn = sample_gp_function(sample_kernel(rng, 1), 1, rng)
    task = build_meta_task(
        fn, "continuous",
        DataConfig(query_size=10, pair_count=10, prediction_size=8), rng,
    )
    split = split_prediction_set(task, rng)
    lbar, pred = tiny_model.forward_prediction(split, noise=torch.zeros(
        split.tar_points.shape[0]))
    assert lbar.shape == (split.n_tar_pairs,)
    assert torch.all((lbar > 0) & (lbar < 1))

    split_empty = type(split)(
        ctx_x1=np.zeros((0, 1)), ctx_x2=np.zeros((0, 1)),
        ctx_labels=np.zeros(0, int), tar_points=split.tar_points,
        tar_pairs=split.tar_pairs, tar_labels=split.tar_labels,
    )
    with pytest.raises(ValueError):
        tiny_model.forward_prediction(split_empty)


def test_embedding_dimension_checks(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.embed_point(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        tiny_model.embed_duel(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3))


def test_batched_encode_matches_single(tiny_model):
    # A batch of identical inputs must reproduce the unbatched forward.
    rng = np.random.default_rng(2)
    ctx_x1 = rng.uniform(-1, 1, (4, 1))
    ctx_x2 = rng.uniform(-1, 1, (4, 1))
    labels = rng.integers(0, 2, 4)
    q = rng.uniform(-1, 1, (7, 1))
    with torch.no_grad():
        ctx = tiny_model.embed_duel(ctx_x1, ctx_x2, labels)
        qtok = tiny_model.embed_point(q)
        single = tiny_model.encode_query(ctx, qtok)
        batched = tiny_model.encode_query(
            ctx.unsqueeze(0).expand(3, -1, -1), qtok.unsqueeze(0).expand(3, -1, -1)
        )
    for b in range(3):
        assert torch.allclose(single, batched[b], atol=1e-6)
