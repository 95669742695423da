import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score, f1_score

from ctxvlp import data, evaluation
from ctxvlp.evaluation import EvalConfig
from ctxvlp.model import ModelConfig, VideoTextModel


@pytest.fixture(scope="module")
def world():
    spec = data.SyntheticProcedureSpec(num_train=2, num_eval=3, feature_dim=8, seed=2)
    g = data.generate_corpus(spec)
    cfg = ModelConfig(feature_dim=8, vocab_size=50, max_tokens=6, dim=8, heads=2, encoder_layers=1,
                      context_layers=1, context_heads=2, mme_blocks=1, head_hidden=8, clips=3, frames=2)
    model = VideoTextModel(cfg, seed=0)
    r = np.random.default_rng(4)
    for p in model.parameters().values():     # non-trivial context encoders
        p.values[...] += r.standard_normal(p.shape) * 0.2
    return g, model


# ---------------------------------------------------------------- windows

def test_partition_examples():
    assert evaluation.partition_windows(10, 4) == [(0, 4), (4, 8), (8, 10)]
    assert evaluation.partition_windows(3, 1) == [(0, 1), (1, 2), (2, 3)]
    with pytest.raises(ValueError):
        evaluation.partition_windows(0, 4)


def test_short_video_gives_one_truncated_window(caplog):
    assert evaluation.partition_windows(3, 4) == [(0, 3)]
    assert "shorter" in caplog.text


def test_window_majority_and_tie_rule():
    labels = np.array([1, 2, 2, 2, 3, 3, 1, 1, 2, 3])
    wins = evaluation.partition_windows(10, 4)
    # windows: [1,2,2,2] -> 2; [3,3,1,1] tie -> 3 appears first; [2,3] tie -> 2
    np.testing.assert_array_equal(evaluation.window_labels(labels, wins), [2, 3, 2])


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(window=0)
    with pytest.raises(ValueError):
        EvalConfig(fusion="max")
    with pytest.raises(ValueError):
        EvalConfig(task="ranking")


# ---------------------------------------------------------------- metrics

def test_macro_f1_hand_examples():
    assert evaluation.per_video_macro_f1([1, 2, 3], [1, 2, 3]) == 1.0
    # all predicted class 1, truth half 1 / half 2 -> (2/3 + 0) / 2
    assert evaluation.per_video_macro_f1([1, 1, 1, 1], [1, 1, 2, 2]) == pytest.approx(1 / 3, abs=1e-12)
    with pytest.raises(ValueError):
        evaluation.per_video_macro_f1([], [])


def test_dataset_f1_is_mean_of_videos():
    assert evaluation.dataset_f1([0.5, 0.7]) == pytest.approx(0.6, abs=1e-15)
    assert evaluation.dataset_f1({"a": 0.5, "b": 0.7, "c": 0.9}) == pytest.approx(0.7, abs=1e-15)
    with pytest.raises(ValueError):
        evaluation.dataset_f1([])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=30))
def test_macro_f1_matches_sklearn(pairs):
    pred, true = map(np.array, zip(*pairs))
    ref = f1_score(true, pred, labels=np.union1d(pred, true), average="macro", zero_division=0)
    assert evaluation.per_video_macro_f1(pred, true) == pytest.approx(ref, abs=1e-12)


def test_average_precision_hand_examples():
    assert evaluation.average_precision([0.9, 0.1], [1, 0]) == 1.0
    assert evaluation.average_precision([0.9, 0.1], [0, 1]) == 0.5
    ap = evaluation.average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    assert ap == pytest.approx((1 + 2 / 3) / 2, abs=1e-9)
    with pytest.raises(ValueError):
        evaluation.average_precision([0.1], [0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 25))
def test_average_precision_matches_sklearn_without_ties(seed, n):
    r = np.random.default_rng(seed)
    scores = r.permutation(n).astype(float)
    pos = r.random(n) < 0.4
    pos[r.integers(n)] = True
    assert evaluation.average_precision(scores, pos) == pytest.approx(average_precision_score(pos, scores),
                                                                      abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_map_bracketed_by_reversed_and_perfect_rankings(seed):
    r = np.random.default_rng(seed)
    labels = r.random((12, 3)) < 0.4
    labels[0] = True
    scores = r.standard_normal((12, 3))
    perfect = labels.astype(float) + np.linspace(0, 0.1, 12)[:, None]
    reverse = -perfect
    m, _ = evaluation.multilabel_map(scores, labels)
    assert evaluation.multilabel_map(reverse, labels)[0] <= m <= evaluation.multilabel_map(perfect, labels)[0]
    assert evaluation.multilabel_map(perfect, labels)[0] == 1.0


def test_map_skips_classes_without_positives():
    labels = np.array([[1, 0], [0, 0], [1, 0]])
    m, per = evaluation.multilabel_map(np.array([[0.9, 0.1], [0.2, 0.3], [0.5, 0.4]]), labels)
    assert list(per) == [0] and m == 1.0


# ---------------------------------------------------------------- scoring and fusion

def test_averaged_fusion_with_equal_scores_is_base():
    base = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_allclose(evaluation.fuse_scores(base, base.copy(), "averaged"), base, atol=1e-12)
    with pytest.raises(ValueError):
        evaluation.fuse_scores(base, None, "contextual")


def test_argmax_ignores_constant_shift():
    s = np.random.default_rng(1).standard_normal((6, 4))
    np.testing.assert_array_equal((s + 3.7).argmax(1), s.argmax(1))


def test_scores_shape_and_window_one(world):
    g, model = world
    emb = evaluation.encode_prompts(g.prompts, model)
    frames, _ = g.eval.videos[0].frame_stream()
    scores = evaluation.score_video(model, frames, emb.base[0], emb.contextual[0], 1)
    assert scores.shape == (len(frames), 5)
    scores4 = evaluation.score_video(model, frames, emb.base[0], emb.contextual[0], 4)
    assert scores4.shape == (-(-len(frames) // 4), 5)


def test_prompt_embedding_shapes_duplicates_and_equivariance(world):
    g, model = world
    emb = evaluation.encode_prompts(g.prompts, model)
    assert emb.base.shape == (4, 5, 8) and emb.contextual.shape == (4, 5, 8)
    dup = data.PromptSet({1: g.prompts.prompts[1], 2: g.prompts.prompts[1]})
    e2 = evaluation.encode_prompts(dup, model)
    np.testing.assert_allclose(e2.base[:, 0], e2.base[:, 1], atol=0)
    # relabelling permutes the class order; contextual outputs follow
    perm = {1: 3, 2: 5, 3: 1, 4: 2, 5: 4}
    shuffled = data.PromptSet({perm[k]: v for k, v in g.prompts.prompts.items()})
    e3 = evaluation.encode_prompts(shuffled, model)
    moved = [perm[k] - 1 for k in range(1, 6)]
    np.testing.assert_allclose(e3.contextual[:, moved], emb.contextual, atol=1e-12)


def test_base_fusion_ignores_context_encoders(world):
    g, model = world
    before = evaluation.evaluate(model, g.eval, g.prompts, EvalConfig(fusion="base"))
    ctx_params = {k: p for k, p in model.parameters().items() if "_context" in k}
    saved = {k: p.values.copy() for k, p in ctx_params.items()}
    try:
        for p in ctx_params.values():
            p.values[...] = np.random.default_rng(9).standard_normal(p.shape)
        after = evaluation.evaluate(model, g.eval, g.prompts, EvalConfig(fusion="base"))
    finally:
        for k, p in ctx_params.items():
            p.values[...] = saved[k]
    assert after.variant_f1 == before.variant_f1 and after.variant_map == before.variant_map


def test_prompt_average_is_mean_of_four_full_evaluations(world):
    g, model = world
    rep = evaluation.evaluate(model, g.eval, g.prompts, EvalConfig())
    emb = evaluation.encode_prompts(g.prompts, model)
    singles = [evaluation.evaluate_variant(model, g.eval, emb, k, EvalConfig())[1] for k in range(4)]
    assert rep.variant_f1 == singles
    assert rep.f1 == pytest.approx(np.mean(singles), abs=1e-15)
    assert 0 <= rep.f1 <= 1 and 0 <= rep.map <= 1
    assert "prompt-averaged" in rep.summary()


def test_sweep_equals_individual_evaluations(world):
    g, model = world
    rows, _ = evaluation.temporal_window_sweep(model, g.eval, g.prompts, windows=(1, 4))
    assert [r["window"] for r in rows] == [1, 4]
    assert set(rows[0]) == {"window", "dataset", "f1", "map"}
    for r in rows:
        rep = evaluation.evaluate(model, g.eval, g.prompts, EvalConfig(window=r["window"]))
        assert r["f1"] == rep.f1 and r["map"] == rep.map


def test_oracle_embeddings_improve_with_wider_windows():
    # frame embeddings = class direction + heavy noise; averaging over wider windows denoises
    protos = np.eye(5, 16)
    labels = np.repeat(np.arange(5), 64)
    f1s = []
    for w in evaluation.SWEEP_WINDOWS:
        per_video = []
        for v in range(6):
            frames = protos[labels] + 1.2 * np.random.default_rng(v).standard_normal((len(labels), 16))
            wins = evaluation.partition_windows(len(frames), w)
            scores = evaluation.window_scores(frames, wins, protos, 1.0)
            truth = evaluation.window_labels(labels, wins)
            per_video.append(evaluation.per_video_macro_f1(scores.argmax(1), truth))
        f1s.append(np.mean(per_video))
    assert all(b >= a for a, b in zip(f1s, f1s[1:])), f1s


def test_cop_accuracy_in_unit_interval(world):
    g, model = world
    clip_acc, text_acc = evaluation.cop_accuracy(model, g.eval, data.BatchSpec(2, 3, 2), batches=2)
    assert 0 <= clip_acc <= 1 and 0 <= text_acc <= 1
