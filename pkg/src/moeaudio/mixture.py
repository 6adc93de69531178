"""Task templates and the staged multi-task sampling schedule.

Stage ratios are per-example sampling probabilities. Audio-text mapping is one
row of the pretraining table but two sequence layouts (ASR and TTS); its weight
is split evenly between them. Audio and text data are balanced 1:1 by token
count when an epoch is planned.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .adapter import ConfigError
from .backbone import Sequence, Stage


class DataError(ValueError):
    pass


class TaskKind(enum.Enum):
    AUDIO_UNIMODAL = "audio_unimodal"
    TEXT_UNIMODAL = "text_unimodal"
    ASR = "asr"
    TTS = "tts"
    INTERLEAVING = "interleaving"
    CAPTIONING = "captioning"
    SFT_ASR = "sft_asr"
    SFT_PARALINGUISTIC = "sft_paralinguistic"
    SFT_SEMANTIC = "sft_semantic"
    SFT_DENSE_CAPTION = "sft_dense_caption"

    @property
    def category(self) -> str:
        """The row of the stage table this kind is drawn under."""
        return _CATEGORY.get(self, self.value)

    @property
    def modality(self) -> str:
        return "text" if self is TaskKind.TEXT_UNIMODAL else "audio"


_CATEGORY = {TaskKind.ASR: "audio_text_mapping", TaskKind.TTS: "audio_text_mapping"}

# payload fields each kind needs; a tuple inside means "any one of"
_REQUIRED = {
    TaskKind.AUDIO_UNIMODAL: ("audio_ids",),
    TaskKind.TEXT_UNIMODAL: ("text_ids",),
    TaskKind.ASR: ("frames", "text_ids"),
    TaskKind.TTS: ("text_ids", "audio_ids"),
    TaskKind.INTERLEAVING: ("audio_ids", "text_ids"),
    TaskKind.CAPTIONING: ("frames", "caption_ids"),
    TaskKind.SFT_ASR: ("frames", "text_ids"),
    TaskKind.SFT_PARALINGUISTIC: ("frames", "instruction_ids", "target_ids"),
    TaskKind.SFT_SEMANTIC: ("frames", "instruction_ids", "target_ids"),
    TaskKind.SFT_DENSE_CAPTION: ("frames", "instruction_ids", "target_ids"),
}

STAGE_CATEGORY_WEIGHTS = {
    Stage.ALIGN: {"audio_unimodal": 0.2, "audio_text_mapping": 0.45, "interleaving": 0.35, "captioning": 0.0},
    Stage.JOINT_PRETRAIN: {"audio_unimodal": 0.03, "audio_text_mapping": 0.56, "interleaving": 0.07,
                           "captioning": 0.34},
    Stage.SFT: {"sft_asr": 0.6, "sft_paralinguistic": 0.1, "sft_semantic": 0.2, "sft_dense_caption": 0.1},
}


@dataclass
class MixtureSpec:
    stage: Stage
    weights: dict[TaskKind, float]
    audio_ratio: float = 1.0
    text_ratio: float = 1.0

    def __post_init__(self):
        if any(w < 0 or not np.isfinite(w) for w in self.weights.values()):
            raise ConfigError("task weights must be finite and non-negative")
        s = sum(self.weights.values())
        if s == 0:
            raise ConfigError("mixture has no task with positive weight")
        if abs(s - 1.0) > 1e-9:
            raise ConfigError(f"task weights sum to {s}, not 1")
        if TaskKind.TEXT_UNIMODAL in self.weights:
            raise ConfigError("text-only data is balanced through text_ratio, not a task weight")
        if self.audio_ratio <= 0 or self.text_ratio < 0:
            raise ConfigError("audio_ratio must be > 0 and text_ratio >= 0")

    @classmethod
    def for_stage(cls, stage: Stage | str) -> "MixtureSpec":
        stage = parse_stage(stage)
        table = STAGE_CATEGORY_WEIGHTS[stage]
        if stage is Stage.SFT:
            weights = {TaskKind(k): v for k, v in table.items()}
        else:
            half = table["audio_text_mapping"] / 2
            weights = {
                TaskKind.AUDIO_UNIMODAL: table["audio_unimodal"],
                TaskKind.ASR: half,
                TaskKind.TTS: half,
                TaskKind.INTERLEAVING: table["interleaving"],
                TaskKind.CAPTIONING: table["captioning"],
            }
        return cls(stage, weights)

    def active(self) -> list[tuple[TaskKind, float]]:
        return [(k, w) for k, w in self.weights.items() if w > 0]

    def category_weights(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for kind, w in self.weights.items():
            out[kind.category] = out.get(kind.category, 0.0) + w
        return out

    def to_kv(self) -> dict[str, str]:
        kv = {"stage": self.stage.value, "audio_ratio": repr(self.audio_ratio), "text_ratio": repr(self.text_ratio)}
        kv.update({f"weight.{k.value}": repr(w) for k, w in self.weights.items()})
        return kv

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "MixtureSpec":
        weights = {TaskKind(k[len("weight."):]): float(v) for k, v in kv.items() if k.startswith("weight.")}
        return cls(parse_stage(kv["stage"]), weights,
                   float(kv.get("audio_ratio", 1.0)), float(kv.get("text_ratio", 1.0)))


def parse_stage(stage: Stage | str | int) -> Stage:
    if isinstance(stage, Stage):
        return stage
    aliases = {"1": Stage.ALIGN, "2": Stage.JOINT_PRETRAIN, "3": Stage.SFT, "sft": Stage.SFT,
               "align": Stage.ALIGN, "joint_pretrain": Stage.JOINT_PRETRAIN, "joint": Stage.JOINT_PRETRAIN}
    key = str(stage).lower()
    if key not in aliases:
        raise ConfigError(f"unknown stage {stage!r}")
    return aliases[key]


def sample_task(spec: MixtureSpec, rng: np.random.Generator) -> TaskKind:
    kinds, weights = zip(*spec.active())
    return kinds[rng.choice(len(kinds), p=np.asarray(weights) / sum(weights))]


def sample_tasks(spec: MixtureSpec, rng: np.random.Generator, n: int) -> list[TaskKind]:
    kinds, weights = zip(*spec.active())
    idx = rng.choice(len(kinds), size=n, p=np.asarray(weights) / sum(weights))
    return [kinds[i] for i in idx]


@dataclass
class CorpusRecord:
    id: str
    tasks: frozenset[TaskKind]
    frames: np.ndarray | None = None
    text_ids: list[int] | None = None
    audio_ids: list[int] | None = None
    caption_ids: list[int] | None = None
    instruction_ids: list[int] | None = None
    target_ids: list[int] | None = None

    def __post_init__(self):
        self.tasks = frozenset(TaskKind(t) for t in self.tasks)
        for task in self.tasks:
            missing = self.missing_payloads(task)
            if missing:
                raise DataError(f"record {self.id} is tagged {task.value} but lacks {', '.join(missing)}")

    def missing_payloads(self, task: TaskKind) -> list[str]:
        return [name for name in _REQUIRED[task] if _empty(getattr(self, name))]


def _empty(value) -> bool:
    return value is None or len(value) == 0


@dataclass(frozen=True)
class SequenceConfig:
    interleave_chunk: int = 16
    separator_id: int | None = None
    interleave_with_frames: bool = True

    def __post_init__(self):
        if self.interleave_chunk < 1:
            raise ConfigError("interleave_chunk must be >= 1")


class _Builder:
    def __init__(self, config: SequenceConfig):
        self.config = config
        self.ids: list[int] = []
        self.mask: list[bool] = []
        self.segments: list[tuple[str, int]] = []
        self.frames = None

    def add_frames(self, frames):
        self.frames = np.asarray(frames, dtype=np.float64)
        self.segments.append(("frames", len(frames)))

    def add(self, kind: str, ids, supervised: bool):
        if self.segments and self.config.separator_id is not None:
            self.ids.append(self.config.separator_id)
            self.mask.append(False)
            self.segments.append(("sep", 1))
        ids = [int(i) for i in ids]
        self.ids.extend(ids)
        has_context = self.frames is not None
        for j in range(len(ids)):
            # a token needs something before it to be predicted from
            self.mask.append(supervised and (has_context or len(self.mask) > 0))
        self.segments.append((kind, len(ids)))

    def build(self, task: TaskKind) -> Sequence:
        return Sequence(np.asarray(self.ids, dtype=np.int64), np.asarray(self.mask, dtype=bool),
                        frames=self.frames, task=task.value, segments=tuple(self.segments))


def build_sequence(task: TaskKind, record: CorpusRecord, config: SequenceConfig = SequenceConfig()) -> Sequence:
    """Lay out one training sequence of ``task`` from ``record``'s payloads."""
    task = TaskKind(task)
    if task not in record.tasks:
        raise DataError(f"record {record.id} is not eligible for task {task.value}")
    missing = record.missing_payloads(task)
    if missing:
        raise DataError(f"record {record.id} lacks {', '.join(missing)} for task {task.value}")
    b = _Builder(config)
    if task is TaskKind.AUDIO_UNIMODAL:
        b.add("audio", record.audio_ids, True)
    elif task is TaskKind.TEXT_UNIMODAL:
        b.add("text", record.text_ids, True)
    elif task is TaskKind.ASR:
        b.add_frames(record.frames)
        b.add("text", record.text_ids, True)
    elif task is TaskKind.TTS:
        b.add("text", record.text_ids, False)
        b.add("audio", record.audio_ids, True)
    elif task is TaskKind.INTERLEAVING:
        if config.interleave_with_frames and not _empty(record.frames):
            b.add_frames(record.frames)
        c = config.interleave_chunk
        audio, text = list(record.audio_ids), list(record.text_ids)
        i = 0
        while i * c < max(len(audio), len(text)):
            for kind, stream in (("audio", audio), ("text", text)):
                chunk = stream[i * c:(i + 1) * c]
                if chunk:
                    b.add(kind, chunk, True)
            i += 1
    else:
        b.add_frames(record.frames)
        if not _empty(record.instruction_ids):
            b.add("instruction", record.instruction_ids, False)
        target = {
            TaskKind.CAPTIONING: record.caption_ids,
            TaskKind.SFT_ASR: record.text_ids,
        }.get(task, record.target_ids)
        b.add("target", target, True)
    return b.build(task)


@dataclass
class PlanEntry:
    task: TaskKind
    record_id: str
    tokens: int

    @property
    def modality(self) -> str:
        return self.task.modality


@dataclass
class EpochPlan:
    entries: list[PlanEntry]
    batches: list[list[int]] = field(default_factory=list)

    @property
    def total_tokens(self) -> int:
        return sum(e.tokens for e in self.entries)

    def modality_token_shares(self) -> dict[str, float]:
        return _shares((e.modality, e.tokens) for e in self.entries)

    def task_token_shares(self) -> dict[TaskKind, float]:
        return _shares((e.task, e.tokens) for e in self.entries if e.modality == "audio")

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for b, members in enumerate(self.batches):
                for i in members:
                    e = self.entries[i]
                    fh.write(json.dumps({"batch": b, "task": e.task.value, "record": e.record_id,
                                         "tokens": e.tokens}) + "\n")


def _shares(pairs: Iterable[tuple]) -> dict:
    counts: dict = {}
    for key, n in pairs:
        counts[key] = counts.get(key, 0) + n
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items()} if total else {}


def plan_epoch(spec: MixtureSpec, corpus: list[CorpusRecord], token_budget: int, seed: int = 0,
               batch_size: int = 8, config: SequenceConfig = SequenceConfig()) -> EpochPlan:
    """Draw examples until ``token_budget`` is filled, keeping audio:text token counts at the spec ratio."""
    if not corpus:
        raise ConfigError("corpus is empty")
    if token_budget < 1:
        raise ConfigError("token_budget must be positive")
    rng = np.random.default_rng(seed)
    pools = {kind: [r for r in corpus if kind in r.tasks] for kind, _ in spec.active()}
    empty = [k.value for k, pool in pools.items() if not pool]
    if empty:
        raise ConfigError(f"corpus has no records for positive-weight tasks: {', '.join(empty)}")
    use_text = spec.text_ratio > 0
    text_pool = [r for r in corpus if TaskKind.TEXT_UNIMODAL in r.tasks]
    if use_text and not text_pool:
        raise ConfigError("corpus has no text-only records to balance the audio data against")

    lengths: dict[tuple[str, TaskKind], int] = {}

    def length(record, kind):
        key = (record.id, kind)
        if key not in lengths:
            lengths[key] = len(build_sequence(kind, record, config))
        return lengths[key]

    entries: list[PlanEntry] = []
    used = {"audio": 0, "text": 0}
    total = 0
    while True:
        text_turn = use_text and used["text"] / spec.text_ratio < used["audio"] / spec.audio_ratio
        if text_turn:
            kind, pool = TaskKind.TEXT_UNIMODAL, text_pool
        else:
            kind = sample_task(spec, rng)
            pool = pools[kind]
        record = pool[rng.integers(len(pool))]
        n = length(record, kind)
        if total + n > token_budget:
            break
        entries.append(PlanEntry(kind, record.id, n))
        used[kind.modality] += n
        total += n
    batches = [list(range(i, min(i + batch_size, len(entries)))) for i in range(0, len(entries), batch_size)]
    return EpochPlan(entries, batches)


# -- synthetic desk-scale corpus ----------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    d_in: int = 6
    text_vocab: int = 12
    audio_vocab: int = 8
    frames_per_token: int = 2
    min_words: int = 3
    max_words: int = 5
    noise: float = 0.05


def _prototypes(cfg: SynthConfig) -> np.ndarray:
    return np.random.default_rng(12345).normal(size=(cfg.text_vocab, cfg.d_in))


def synth_record(rid: str, rng: np.random.Generator, cfg: SynthConfig,
                 tasks: Iterable[TaskKind] = (TaskKind.ASR,)) -> CorpusRecord:
    """A record whose frames are a smooth trajectory through per-word prototype vectors.

    Text id 0 is left free for use as a separator.
    """
    tasks = frozenset(tasks)
    n = int(rng.integers(cfg.min_words, cfg.max_words + 1))
    words = rng.integers(1, cfg.text_vocab, size=n)
    protos = _prototypes(cfg)
    frames = np.repeat(protos[words], cfg.frames_per_token, axis=0)
    drift = np.cumsum(rng.normal(0.0, cfg.noise, size=frames.shape), axis=0)
    frames = frames + drift
    audio = (cfg.text_vocab + (words[:, None] * 3 + np.arange(cfg.frames_per_token)) % cfg.audio_vocab).reshape(-1)
    rec = dict(frames=frames, text_ids=words.tolist(), audio_ids=audio.tolist())
    if tasks & {TaskKind.CAPTIONING, TaskKind.SFT_PARALINGUISTIC, TaskKind.SFT_SEMANTIC, TaskKind.SFT_DENSE_CAPTION}:
        rec["caption_ids"] = rng.integers(1, cfg.text_vocab, size=n + 1).tolist()
        rec["instruction_ids"] = [1, 2]
        rec["target_ids"] = rng.integers(1, cfg.text_vocab, size=2).tolist()
    if tasks == {TaskKind.TEXT_UNIMODAL}:
        rec = dict(text_ids=rng.integers(1, cfg.text_vocab, size=len(audio)).tolist())
    return CorpusRecord(rid, tasks, **rec)


def synth_corpus(n_audio: int, n_text: int = 0, seed: int = 0, cfg: SynthConfig = SynthConfig(),
                 tasks: Iterable[TaskKind] | None = None) -> list[CorpusRecord]:
    rng = np.random.default_rng(seed)
    if tasks is None:
        tasks = [k for k in TaskKind if k is not TaskKind.TEXT_UNIMODAL]
    tasks = frozenset(tasks)
    records = [synth_record(f"a{i:05d}", rng, cfg, tasks) for i in range(n_audio)]
    records += [synth_record(f"t{i:05d}", rng, cfg, {TaskKind.TEXT_UNIMODAL}) for i in range(n_text)]
    return records


# -- manifests ----------------------------------------------------------------

_ID_FIELDS = ("text_ids", "audio_ids", "caption_ids", "instruction_ids", "target_ids")


def save_corpus(records: list[CorpusRecord], directory) -> Path:
    """Write a line-delimited manifest; frames go to ``frames/<id>.npy`` next to it."""
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    manifest = directory / "corpus.jsonl"
    with open(manifest, "w") as fh:
        for r in records:
            row = {"id": r.id, "tasks": sorted(t.value for t in r.tasks)}
            if r.frames is not None:
                rel = f"frames/{r.id}.npy"
                np.save(directory / rel, r.frames)
                row["frames"] = rel
            for name in _ID_FIELDS:
                if getattr(r, name) is not None:
                    row[name] = list(getattr(r, name))
            fh.write(json.dumps(row) + "\n")
    return manifest


def load_corpus(manifest) -> list[CorpusRecord]:
    manifest = Path(manifest)
    records = []
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                frames = np.load(manifest.parent / row["frames"]) if row.get("frames") else None
                records.append(CorpusRecord(row["id"], frozenset(row["tasks"]), frames=frames,
                                            **{k: row.get(k) for k in _ID_FIELDS}))
            except (KeyError, ValueError, OSError) as exc:
                raise DataError(f"{manifest}:{lineno}: {exc}") from exc
    return records
