"""Synthetic long-form procedure corpus, progressive context sampling and
the label/shuffle helpers used by the temporal objectives.

A video is a fixed sequence of ``K`` phases.  It is cut into 45 s clips; each
clip stores a few evenly spaced frame feature vectors (phase prototype plus a
within-phase linear drift plus Gaussian noise, all shifted by a per-video
appearance offset) and two token captions drawn
from the phase's private vocabulary block: a clean one and a noisy one with
random token substitutions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

CORPUS_FORMAT = "ctxvlp-corpus"
CORPUS_VERSION = 1
PROMPT_VARIANTS = 4


@dataclass(frozen=True)
class SyntheticProcedureSpec:
    num_phases: int = 5
    phase_duration: tuple[float, float] = (180.0, 540.0)
    clip_seconds: float = 45.0
    frames_per_clip: int = 8
    feature_dim: int = 32
    vocab_size: int = 50
    caption_length: int = 6
    prototype_scale: float = 1.0
    drift_scale: float = 3.0
    noise_scale: float = 0.1
    video_offset_scale: float = 0.25
    caption_noise: float = 0.2
    num_train: int = 40
    num_eval: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phase_duration", tuple(float(x) for x in self.phase_duration))
        lo, hi = self.phase_duration
        if self.num_phases < 2:
            raise ValueError("need at least two phases")
        if self.num_phases > self.vocab_size / self.caption_length:
            raise ValueError(f"vocabulary of {self.vocab_size} too small for {self.num_phases} phases "
                             f"with {self.caption_length}-token captions")
        if self.num_phases > self.feature_dim:
            raise ValueError("feature_dim must be at least num_phases for orthogonal prototypes")
        if not (0 < lo <= hi) or hi < self.clip_seconds:
            raise ValueError(f"bad phase duration range {self.phase_duration}")
        if self.frames_per_clip < 1 or self.caption_length < 1:
            raise ValueError("frames_per_clip and caption_length must be positive")
        if self.noise_scale < 0 or self.video_offset_scale < 0 or not (0 <= self.caption_noise <= 1):
            raise ValueError("noise scales out of range")
        if self.num_train < 1 or self.num_eval < 0:
            raise ValueError("bad split sizes")

    @property
    def block_size(self) -> int:
        return self.vocab_size // self.num_phases

    def vocab_block(self, phase: int) -> np.ndarray:
        """Token ids reserved for 1-based ``phase``."""
        start = (phase - 1) * self.block_size
        return np.arange(start, start + self.block_size)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticProcedureSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown corpus spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase_duration"] = list(self.phase_duration)
        return d


@dataclass
class ClipRecord:
    video_id: str
    clip_index: int
    start_time: float
    frames: np.ndarray
    caption_a: np.ndarray
    caption_b: np.ndarray
    phase_label: int


@dataclass
class Video:
    """Array view over the clips of one video (clip axis first)."""

    video_id: str
    start_times: np.ndarray
    frames: np.ndarray
    caption_a: np.ndarray
    caption_b: np.ndarray
    phase_labels: np.ndarray

    @property
    def num_clips(self) -> int:
        return len(self.start_times)

    @property
    def span(self) -> float:
        return float(self.start_times[-1] - self.start_times[0])

    def clips(self) -> Iterator[ClipRecord]:
        for i in range(self.num_clips):
            yield ClipRecord(self.video_id, i, float(self.start_times[i]), self.frames[i],
                             self.caption_a[i], self.caption_b[i], int(self.phase_labels[i]))

    def frame_stream(self) -> tuple[np.ndarray, np.ndarray]:
        """All stored frames in time order with their phase labels (evaluation view)."""
        n, s, d = self.frames.shape
        return self.frames.reshape(n * s, d), np.repeat(self.phase_labels, s)


@dataclass
class Corpus:
    spec: SyntheticProcedureSpec
    videos: list[Video]
    name: str = "synthetic"

    @property
    def t_max(self) -> float:
        """Longest start-to-start span of any video."""
        return max(v.span for v in self.videos)

    def clips(self) -> Iterator[ClipRecord]:
        for v in self.videos:
            yield from v.clips()

    @property
    def num_clips(self) -> int:
        return sum(v.num_clips for v in self.videos)

    def phases(self) -> set[int]:
        return {int(p) for v in self.videos for p in v.phase_labels}


@dataclass
class PromptSet:
    """Per class label (1-based), exactly four token-id prompt variants."""

    prompts: dict[int, list[list[int]]]

    def __post_init__(self):
        for label, variants in self.prompts.items():
            if len(variants) != PROMPT_VARIANTS:
                raise ValueError(f"class {label} has {len(variants)} prompt variants, "
                                 f"expected {PROMPT_VARIANTS}")
            if any(len(v) == 0 for v in variants):
                raise ValueError(f"class {label} has an empty prompt")

    @property
    def labels(self) -> list[int]:
        return sorted(self.prompts)

    def variant(self, k: int) -> list[list[int]]:
        """The k-th prompt of every class, in label order."""
        return [self.prompts[label][k] for label in self.labels]

    def to_json(self) -> str:
        payload = {"variants_per_class": PROMPT_VARIANTS,
                   "classes": [{"label": label, "variants": self.prompts[label]} for label in self.labels]}
        return json.dumps(payload, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PromptSet":
        payload = json.loads(text)
        return cls({int(c["label"]): [list(map(int, v)) for v in c["variants"]]
                    for c in payload["classes"]})


@dataclass
class GeneratedData:
    train: Corpus
    eval: Corpus
    prompts: PromptSet


# ---------------------------------------------------------------- generation

def _prototypes(spec: SyntheticProcedureSpec, rng: np.random.Generator):
    q, _ = np.linalg.qr(rng.standard_normal((spec.feature_dim, spec.feature_dim)))
    protos = q[:, :spec.num_phases].T * spec.prototype_scale
    drift = rng.standard_normal((spec.num_phases, spec.feature_dim))
    drift /= np.linalg.norm(drift, axis=1, keepdims=True)
    return protos, drift


def _make_video(spec, video_id, protos, drift, rng: np.random.Generator) -> Video:
    lo = max(1, math.ceil(spec.phase_duration[0] / spec.clip_seconds))
    hi = max(lo, math.floor(spec.phase_duration[1] / spec.clip_seconds))
    counts = rng.integers(lo, hi + 1, size=spec.num_phases)
    # scene appearance shared by every frame of the video
    offset = spec.video_offset_scale * rng.standard_normal(spec.feature_dim)
    labels = np.repeat(np.arange(1, spec.num_phases + 1), counts)
    n = len(labels)
    s, d, length = spec.frames_per_clip, spec.feature_dim, spec.caption_length
    starts = np.arange(n) * spec.clip_seconds
    # progress within the phase for every stored frame, in [0, 1]
    phase_start = np.repeat(np.concatenate([[0], np.cumsum(counts)[:-1]]), counts) * spec.clip_seconds
    phase_len = np.repeat(counts, counts) * spec.clip_seconds
    frame_times = starts[:, None] + (np.arange(s)[None, :] + 0.5) * spec.clip_seconds / s
    progress = (frame_times - phase_start[:, None]) / phase_len[:, None]
    k = labels - 1
    frames = (offset + protos[k][:, None, :]
              + spec.drift_scale * (progress - 0.5)[:, :, None] * drift[k][:, None, :]
              + spec.noise_scale * rng.standard_normal((n, s, d)))
    block = spec.block_size
    cap_a = k[:, None] * block + rng.integers(0, block, size=(n, length))
    swap = rng.random((n, length)) < spec.caption_noise
    cap_b = np.where(swap, rng.integers(0, spec.vocab_size, size=(n, length)), cap_a)
    return Video(video_id, starts.astype(np.float64), frames, cap_a.astype(np.int64),
                 cap_b.astype(np.int64), labels.astype(np.int64))


def _make_prompts(spec, rng: np.random.Generator) -> PromptSet:
    prompts = {}
    for phase in range(1, spec.num_phases + 1):
        block = spec.vocab_block(phase)
        prompts[phase] = [rng.choice(block, size=spec.caption_length).tolist()
                          for _ in range(PROMPT_VARIANTS)]
    return PromptSet(prompts)


def generate_corpus(spec: SyntheticProcedureSpec) -> GeneratedData:
    """Deterministic function of ``spec`` (including its seed).

    Every video draws from its own child seed, so videos are independent of
    generation order.
    """
    root = np.random.SeedSequence(spec.seed)
    proto_seq, prompt_seq, video_seq = root.spawn(3)
    protos, drift = _prototypes(spec, np.random.default_rng(proto_seq))
    children = video_seq.spawn(spec.num_train + spec.num_eval)
    ids = ([f"train-{i:03d}" for i in range(spec.num_train)]
           + [f"eval-{i:03d}" for i in range(spec.num_eval)])
    videos = [_make_video(spec, vid, protos, drift, np.random.default_rng(child))
              for vid, child in zip(ids, children)]
    return GeneratedData(Corpus(spec, videos[:spec.num_train], "train"),
                         Corpus(spec, videos[spec.num_train:], "eval"),
                         _make_prompts(spec, np.random.default_rng(prompt_seq)))


# ---------------------------------------------------------------- persistence

def _clip_line(rec: ClipRecord) -> str:
    return json.dumps({
        "video_id": rec.video_id,
        "clip_index": rec.clip_index,
        "start_time_s": rec.start_time,
        "frame_features": rec.frames.tolist(),
        "caption_a": rec.caption_a.tolist(),
        "caption_b": rec.caption_b.tolist(),
        "phase_label": rec.phase_label,
    }, separators=(",", ":"))


def write_corpus(corpus: Corpus, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in corpus.clips():
            fh.write(_clip_line(rec) + "\n")


def read_corpus(path: Path, spec: SyntheticProcedureSpec, name: str | None = None) -> Corpus:
    by_video: dict[str, list[dict]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
            by_video.setdefault(rec["video_id"], []).append(rec)
    videos = []
    for vid, recs in by_video.items():
        recs.sort(key=lambda r: r["clip_index"])
        videos.append(Video(
            vid,
            np.array([r["start_time_s"] for r in recs], dtype=np.float64),
            np.array([r["frame_features"] for r in recs], dtype=np.float64),
            np.array([r["caption_a"] for r in recs], dtype=np.int64),
            np.array([r["caption_b"] for r in recs], dtype=np.int64),
            np.array([r["phase_label"] for r in recs], dtype=np.int64)))
    return Corpus(spec, videos, name or Path(path).stem)


def save_generated(data: GeneratedData, out_dir: Path) -> Path:
    """Write train/eval corpora, prompts and a manifest into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_corpus(data.train, out_dir / "train.jsonl")
    write_corpus(data.eval, out_dir / "eval.jsonl")
    (out_dir / "prompts.json").write_text(data.prompts.to_json(), encoding="utf-8")
    manifest = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "seed": data.train.spec.seed,
        "spec": data.train.spec.to_dict(),
        "splits": {c.name: {"file": f"{c.name}.jsonl", "videos": len(c.videos), "clips": c.num_clips}
                   for c in (data.train, data.eval)},
        "prompts": "prompts.json",
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def load_manifest(corpus_dir: Path) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != CORPUS_FORMAT or manifest.get("version") != CORPUS_VERSION:
        raise ValueError(f"{path}: not a version-{CORPUS_VERSION} corpus manifest")
    return manifest


def load_split(corpus_dir: Path, split: str) -> Corpus:
    manifest = load_manifest(corpus_dir)
    spec = SyntheticProcedureSpec.from_dict(manifest["spec"])
    return read_corpus(Path(corpus_dir) / manifest["splits"][split]["file"], spec, split)


def load_prompts(path: Path) -> PromptSet:
    return PromptSet.from_json(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class BatchSpec:
    videos: int = 32
    clips: int = 8
    frames: int = 4

    def __post_init__(self):
        if min(self.videos, self.clips, self.frames) < 1:
            raise ValueError("batch extents must be positive")


@dataclass(frozen=True)
class SamplerSchedule:
    """Context window that grows linearly from ``initial_window`` to unbounded."""

    epochs: int
    t_max: float
    initial_window: float = 900.0
    progressive: bool = True

    def window(self, epoch: int) -> float:
        return window(epoch, self.epochs, self.t_max, self.initial_window, self.progressive)


def window(epoch: int, epochs: int, t_max: float, initial: float = 900.0,
           progressive: bool = True) -> float:
    """Largest allowed anchor offset (seconds) at ``epoch``; ``inf`` at the final epoch."""
    if epochs < 2:
        raise ValueError("the window schedule needs at least two epochs")
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    if not progressive or epoch == epochs - 1:
        return math.inf
    return initial + (epoch / (epochs - 1)) * (t_max - initial)


def evenly_spaced(stored: int, wanted: int) -> np.ndarray:
    """Indices of ``wanted`` evenly spaced frames among ``stored``."""
    return np.floor((np.arange(wanted) + 0.5) * stored / wanted).astype(np.int64)


@dataclass
class Batch:
    video_index: np.ndarray      # (B,)
    clip_index: np.ndarray       # (B, C), ascending start time within a video
    start_time: np.ndarray       # (B, C)
    frames: np.ndarray           # (B, C, F, D_in)
    tokens: np.ndarray           # (B, C, L)
    caption_source: np.ndarray   # (B, C); 0 clean caption, 1 noisy caption
    phase: np.ndarray            # (B, C)
    window: float
    widened: int = 0
    anchor_slot: np.ndarray | None = None   # (B,) slot of each video's anchor clip

    @property
    def anchor_offsets(self) -> np.ndarray:
        """``|start - anchor start|`` for every sampled clip, ``(B, C)``."""
        rows = np.arange(len(self.start_time))
        return np.abs(self.start_time - self.start_time[rows, self.anchor_slot][:, None])

    @property
    def shape(self) -> tuple[int, int, int]:
        b, c, f, _ = self.frames.shape
        return b, c, f

    @property
    def positions(self) -> np.ndarray:
        """Frame positions fed to the video context encoder: ``clip_slot * F + frame``."""
        _, c, f = self.shape
        return np.arange(c * f)


def _pick_context(video: Video, anchor: int, span: float, need: int, rng) -> np.ndarray | None:
    offsets = np.abs(video.start_times - video.start_times[anchor])
    pool = np.flatnonzero(offsets <= span)
    pool = pool[pool != anchor]
    if len(pool) < need:
        return None
    chosen = rng.choice(pool, size=need, replace=False) if need else np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate([[anchor], chosen]).astype(np.int64))


def sample_batch(corpus: Corpus, epoch: int, rng: np.random.Generator, spec: BatchSpec,
                 schedule: SamplerSchedule, caption_source: str = "alternate",
                 retries: int = 3) -> Batch:
    """Draw ``B`` videos and, per video, an anchor plus ``C - 1`` clips within the window.

    When a video has too few clips in the window another video is tried up to
    ``retries`` times; after that the window is doubled (capped at ``t_max``)
    and the widening is logged and counted on the batch.
    """
    if caption_source not in ("alternate", "a", "b"):
        raise ValueError(f"caption_source must be alternate, a or b, not {caption_source!r}")
    span = schedule.window(epoch)
    n = len(corpus.videos)
    b_, c_, f_ = spec.videos, spec.clips, spec.frames
    video_idx = rng.choice(n, size=b_, replace=b_ > n)
    clip_idx = np.empty((b_, c_), dtype=np.int64)
    anchor_slot = np.empty(b_, dtype=np.int64)
    widened = 0
    for b in range(b_):
        chosen = None
        for attempt in range(retries + 1):
            video = corpus.videos[video_idx[b]]
            anchor = int(rng.integers(video.num_clips))
            chosen = _pick_context(video, anchor, span, c_ - 1, rng)
            if chosen is not None:
                break
            if attempt < retries:
                video_idx[b] = rng.integers(n)
        if chosen is None:
            if video.num_clips < c_:
                raise ValueError(f"video {video.video_id} has {video.num_clips} clips, fewer than C={c_}")
            wider = span
            anchor = int(rng.integers(video.num_clips))
            while chosen is None:
                wider = min(wider * 2, corpus.t_max) if wider < corpus.t_max else math.inf
                chosen = _pick_context(video, anchor, wider, c_ - 1, rng)
            widened += 1
            log.warning("widened context window to %.0f s for %s at epoch %d",
                        wider, video.video_id, epoch)
        clip_idx[b] = chosen
        anchor_slot[b] = int(np.searchsorted(chosen, anchor))
    frame_idx = evenly_spaced(corpus.spec.frames_per_clip, f_)
    frames = np.empty((b_, c_, f_, corpus.spec.feature_dim))
    tokens = np.empty((b_, c_, corpus.spec.caption_length), dtype=np.int64)
    starts = np.empty((b_, c_))
    phase = np.empty((b_, c_), dtype=np.int64)
    if caption_source == "alternate":
        source = (rng.random((b_, c_)) < 0.5).astype(np.int64)
    else:
        source = np.full((b_, c_), 0 if caption_source == "a" else 1, dtype=np.int64)
    for b in range(b_):
        video = corpus.videos[video_idx[b]]
        ci = clip_idx[b]
        frames[b] = video.frames[ci][:, frame_idx]
        tokens[b] = np.where(source[b][:, None] == 0, video.caption_a[ci], video.caption_b[ci])
        starts[b] = video.start_times[ci]
        phase[b] = video.phase_labels[ci]
    return Batch(video_idx, clip_idx, starts, frames, tokens, source, phase, span, widened, anchor_slot)


def build_ftm_labels(clips: int, frames: int) -> np.ndarray:
    """Row ``i`` marks the ``frames`` slots of clip ``i`` among ``clips * frames``."""
    if clips < 1 or frames < 1:
        raise ValueError("clips and frames must be positive")
    return np.repeat(np.eye(clips), frames, axis=1)


@dataclass
class CopShuffle:
    """Per-video slot orders; ``clip_perm[b, j]`` is the original index now at slot ``j``.

    The permutations double as the classification targets.
    """

    clip_perm: np.ndarray
    text_perm: np.ndarray

    @property
    def clip_targets(self) -> np.ndarray:
        return self.clip_perm

    @property
    def text_targets(self) -> np.ndarray:
        return self.text_perm


def shuffle_for_cop(videos: int, clips: int, rng: np.random.Generator) -> CopShuffle:
    """Independent uniform permutations for clip and text slots of every video."""
    if clips < 2:
        raise ValueError("order prediction needs at least two clips")
    clip_perm = np.stack([rng.permutation(clips) for _ in range(videos)])
    text_perm = np.stack([rng.permutation(clips) for _ in range(videos)])
    return CopShuffle(clip_perm, text_perm)
