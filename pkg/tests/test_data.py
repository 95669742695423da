import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxvlp import data
from ctxvlp.data import BatchSpec, SamplerSchedule, SyntheticProcedureSpec


@pytest.fixture(scope="module")
def generated():
    return data.generate_corpus(SyntheticProcedureSpec())


def small_spec(**kw):
    base = dict(num_train=6, num_eval=2, feature_dim=8, seed=3)
    base.update(kw)
    return SyntheticProcedureSpec(**base)


# ---------------------------------------------------------------- generator

def test_default_corpus_shape(generated):
    assert len(generated.train.videos) == 40 and len(generated.eval.videos) == 10
    assert generated.train.phases() == {1, 2, 3, 4, 5}
    v = generated.train.videos[0]
    assert v.frames.shape[1:] == (8, 32)
    assert v.caption_a.shape[1] == 6


def test_generation_is_deterministic():
    a, b = data.generate_corpus(small_spec()), data.generate_corpus(small_spec())
    for va, vb in zip(a.train.videos + a.eval.videos, b.train.videos + b.eval.videos):
        np.testing.assert_array_equal(va.frames, vb.frames)
        np.testing.assert_array_equal(va.caption_b, vb.caption_b)
    c = data.generate_corpus(small_spec(seed=4))
    assert not np.array_equal(a.train.videos[0].frames[:1], c.train.videos[0].frames[:1])


def test_clip_invariants(generated):
    spec = generated.train.spec
    for v in generated.train.videos:
        assert np.all(np.diff(v.start_times) == spec.clip_seconds)
        assert np.all(np.diff(v.phase_labels) >= 0)                 # phases in procedural order
        np.testing.assert_array_equal(np.unique(v.phase_labels), np.arange(1, 6))
        counts = np.bincount(v.phase_labels)[1:] * spec.clip_seconds
        assert counts.min() >= 180 and counts.max() <= 540


def test_clean_captions_use_phase_vocabulary(generated):
    spec = generated.train.spec
    for v in generated.train.videos[:5]:
        for cap, ph in zip(v.caption_a, v.phase_labels):
            assert set(cap) <= set(spec.vocab_block(ph))


def test_noisy_caption_substitution_rate(generated):
    a = np.concatenate([v.caption_a for v in generated.train.videos])
    b = np.concatenate([v.caption_b for v in generated.train.videos])
    # a substituted token equals the original with probability 1/V
    rate = (a != b).mean() / (1 - 1 / generated.train.spec.vocab_size)
    assert abs(rate - 0.2) < 0.02


def test_zero_noise_leaves_prototype_plus_drift():
    g = data.generate_corpus(small_spec(noise_scale=0.0, drift_scale=0.0))
    v = g.train.videos[0]
    for ph in np.unique(v.phase_labels):
        clips = v.frames[v.phase_labels == ph].reshape(-1, v.frames.shape[-1])
        np.testing.assert_allclose(clips, np.broadcast_to(clips[0], clips.shape), atol=1e-12)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticProcedureSpec(num_phases=10, vocab_size=50, caption_length=6)
    with pytest.raises(ValueError):
        SyntheticProcedureSpec(phase_duration=(30.0, 40.0))
    with pytest.raises(ValueError):
        SyntheticProcedureSpec(noise_scale=-1.0)
    with pytest.raises(ValueError):
        SyntheticProcedureSpec.from_dict({"bogus": 1})


def test_prompt_set_needs_four_nonempty_variants():
    with pytest.raises(ValueError, match="variants"):
        data.PromptSet({1: [[1], [2], [3]]})
    with pytest.raises(ValueError, match="empty"):
        data.PromptSet({1: [[1], [2], [3], []]})


def test_frame_stream_labels(generated):
    frames, labels = generated.eval.videos[0].frame_stream()
    v = generated.eval.videos[0]
    assert frames.shape == (v.num_clips * 8, 32)
    np.testing.assert_array_equal(labels[::8], v.phase_labels)


# ---------------------------------------------------------------- persistence

def test_corpus_round_trip_is_exact(tmp_path):
    g = data.generate_corpus(small_spec())
    data.save_generated(g, tmp_path)
    manifest = data.load_manifest(tmp_path)
    assert manifest["seed"] == 3 and manifest["splits"]["train"]["videos"] == 6
    back = data.load_split(tmp_path, "train")
    assert back.spec == g.train.spec
    for a, b in zip(g.train.videos, back.videos):
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.start_times, b.start_times)
        np.testing.assert_array_equal(a.phase_labels, b.phase_labels)
    assert data.load_prompts(tmp_path / "prompts.json") == g.prompts


def test_saved_records_have_the_expected_fields(tmp_path):
    data.save_generated(data.generate_corpus(small_spec()), tmp_path)
    rec = json.loads((tmp_path / "train.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"video_id", "clip_index", "start_time_s", "frame_features", "caption_a",
                        "caption_b", "phase_label"}


def test_same_spec_writes_identical_files(tmp_path):
    for sub in ("a", "b"):
        data.save_generated(data.generate_corpus(small_spec()), tmp_path / sub)
    for name in ("train.jsonl", "eval.jsonl", "prompts.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_malformed_record_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"video_id": "x"\n')
    with pytest.raises(ValueError, match=":1:"):
        data.read_corpus(path, small_spec())


# ---------------------------------------------------------------- schedule and sampler

def test_window_schedule_endpoints():
    assert data.window(0, 21, 3000.0) == 900.0
    assert data.window(10, 21, 3000.0) == pytest.approx(1950.0)
    assert data.window(20, 21, 3000.0) == math.inf
    assert data.window(0, 21, 3000.0, progressive=False) == math.inf
    with pytest.raises(ValueError):
        data.window(0, 1, 3000.0)
    with pytest.raises(ValueError):
        data.window(21, 21, 3000.0)


def test_t_max_is_longest_span(generated):
    assert generated.train.t_max == max(v.start_times[-1] - v.start_times[0] for v in generated.train.videos)


def test_evenly_spaced_frames():
    np.testing.assert_array_equal(data.evenly_spaced(8, 4), [1, 3, 5, 7])
    np.testing.assert_array_equal(data.evenly_spaced(8, 2), [2, 6])
    np.testing.assert_array_equal(data.evenly_spaced(8, 8), np.arange(8))


def test_batch_shapes_and_ordering(generated):
    rng = np.random.default_rng(0)
    sched = SamplerSchedule(21, generated.train.t_max)
    batch = data.sample_batch(generated.train, 0, rng, BatchSpec(), sched)
    assert batch.frames.shape == (32, 8, 4, 32) and batch.tokens.shape == (32, 8, 6)
    assert np.all(np.diff(batch.start_time, axis=1) > 0)
    np.testing.assert_array_equal(batch.positions, np.arange(32))
    assert batch.anchor_offsets.max() <= 900


def test_caption_source_selection(generated):
    rng = np.random.default_rng(1)
    sched = SamplerSchedule(2, generated.train.t_max)
    batch = data.sample_batch(generated.train, 0, rng, BatchSpec(8, 4, 2), sched, caption_source="a")
    v = generated.train.videos[batch.video_index[0]]
    np.testing.assert_array_equal(batch.tokens[0], v.caption_a[batch.clip_index[0]])
    assert not batch.caption_source.any()
    with pytest.raises(ValueError):
        data.sample_batch(generated.train, 0, rng, BatchSpec(), sched, caption_source="c")


def test_alternating_captions_are_balanced(generated):
    rng = np.random.default_rng(2)
    sched = SamplerSchedule(2, generated.train.t_max)
    src = np.concatenate([data.sample_batch(generated.train, 0, rng, BatchSpec(), sched).caption_source.ravel()
                          for _ in range(20)])
    assert abs(src.mean() - 0.5) < 0.03


def test_widening_is_logged_and_counted(caplog):
    g = data.generate_corpus(small_spec(num_phases=2, phase_duration=(90.0, 90.0)))
    # 4 clips per video spaced 45 s apart; a 50 s window never holds 4 of them
    sched = SamplerSchedule(3, g.train.t_max, initial_window=50.0)
    with caplog.at_level(logging.WARNING, logger="ctxvlp.data"):
        batch = data.sample_batch(g.train, 0, np.random.default_rng(0), BatchSpec(3, 4, 2), sched)
    assert batch.widened == 3
    assert "widened" in caplog.text


def test_too_short_video_is_an_error():
    g = data.generate_corpus(small_spec(num_phases=2, phase_duration=(90.0, 90.0)))
    with pytest.raises(ValueError, match="fewer than"):
        data.sample_batch(g.train, 0, np.random.default_rng(0), BatchSpec(2, 5, 2),
                          SamplerSchedule(2, g.train.t_max))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 12), st.integers(2, 6))
def test_cop_permutations_are_valid(seed, videos, clips):
    sh = data.shuffle_for_cop(videos, clips, np.random.default_rng(seed))
    for perm in (sh.clip_perm, sh.text_perm):
        np.testing.assert_array_equal(np.sort(perm, axis=1), np.tile(np.arange(clips), (videos, 1)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 19))
def test_offsets_respect_window(seed, epoch):
    g = data.generate_corpus(small_spec())
    sched = SamplerSchedule(20, g.train.t_max)
    batch = data.sample_batch(g.train, epoch, np.random.default_rng(seed), BatchSpec(6, 4, 2), sched)
    if batch.widened == 0:
        assert batch.anchor_offsets.max() <= sched.window(epoch)
    assert np.all(batch.anchor_offsets[np.arange(6), batch.anchor_slot] == 0)
