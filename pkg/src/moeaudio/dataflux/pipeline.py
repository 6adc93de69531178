"""Caption -> query/choice generation -> two-model answering -> judged filtering.

Every state change of a record is appended to a per-state JSONL file and to an
index, so a killed run resumes from the last persisted state of each record.
A record is kept when at least one of its questions survives the judge.
"""

from __future__ import annotations

import enum
import json
import logging
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from ..gateway import AudioAttachment, ChatRequest, GatewayError, ModelClient
from .schema import (
    Consistency,
    FinalAction,
    GenerationResult,
    JudgeVerdict,
    SchemaError,
    Winner,
    check_question,
    extract_answer,
    parse_generation,
    parse_verdict,
)
from .taxonomy import Taxonomy, TaxonomyError, TaxonomyPath
from .templates import ANSWER_VERIFICATION, DENSE_CAPTION, FEW_SHOTS_DEFAULT, QUERY_CHOICES, bundled_rules

logger = logging.getLogger(__name__)

CATEGORY_MISMATCH = "category mismatch"
SCHEMA_FAILURE = "schema failure"
NO_VALID_ANSWERS = "no valid answers"
JUDGE_SCHEMA_FAILURE = "judge schema failure"
JUDGE_DISCARD = "judge discard"
CAPTION_CONFLICT = "caption conflict"
NOT_STRONG_MATCH = "not strong match"
WINNER_INVALID = "winner trace invalid"
AUDIO_UNREADABLE = "audio unreadable"
BAD_TAXONOMY = "taxonomy unresolvable"
EMPTY_CAPTION = "empty caption"

ANSWER_INSTRUCTION = 'Reason step by step, then finish with a final line of the form "Answer: <letter>".'
INVALID_ANSWER = "INVALID (no option letter found)"


class State(enum.Enum):
    PENDING = "pending"
    CAPTIONED = "captioned"
    QUERIES_GENERATED = "queries_generated"
    ANSWERED = "answered"
    JUDGED = "judged"
    KEPT = "kept"
    DISCARDED = "discarded"

    @property
    def rank(self) -> int:
        return _RANK[self]

    @property
    def terminal(self) -> bool:
        return self in (State.KEPT, State.DISCARDED)


_RANK = {State.PENDING: 0, State.CAPTIONED: 1, State.QUERIES_GENERATED: 2, State.ANSWERED: 3,
         State.JUDGED: 4, State.KEPT: 5, State.DISCARDED: 5}


class LifecycleError(RuntimeError):
    pass


@dataclass
class AnswerTrace:
    raw: str
    cot: str = ""
    answer: str | None = None

    @property
    def valid(self) -> bool:
        return self.answer is not None

    @classmethod
    def from_reply(cls, text: str) -> "AnswerTrace":
        found = extract_answer(text)
        if found is None:
            return cls(text, text.strip(), None)
        return cls(text, found.cot, found.answer)


@dataclass
class QuestionItem:
    text: str
    traces: dict[str, AnswerTrace] = field(default_factory=dict)
    verdict: JudgeVerdict | None = None
    kept: bool = False
    winner: str | None = None
    reason: str | None = None

    def winner_trace(self) -> AnswerTrace | None:
        return self.traces.get(self.winner) if self.winner else None

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "traces": {k: vars(t).copy() for k, t in self.traces.items()},
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "kept": self.kept,
            "winner": self.winner,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuestionItem":
        return cls(d["text"], {k: AnswerTrace(**t) for k, t in d.get("traces", {}).items()},
                   JudgeVerdict.from_dict(d["verdict"]) if d.get("verdict") else None,
                   d.get("kept", False), d.get("winner"), d.get("reason"))


@dataclass
class FluxRecord:
    id: str
    audio: str
    taxonomy: str
    caption: str | None = None
    state: State = State.PENDING
    questions: list[QuestionItem] = field(default_factory=list)
    discard_reason: str | None = None
    discard_detail: str | None = None
    parked: str | None = None

    def __post_init__(self):
        self.state = State(self.state)
        if self.state is State.PENDING and self.caption:
            self.state = State.CAPTIONED

    def advance(self, new: State) -> None:
        if self.state.terminal or new.rank <= self.state.rank:
            raise LifecycleError(f"record {self.id}: cannot move from {self.state.value} to {new.value}")
        self.state = new

    def discard(self, reason: str, detail: str | None = None) -> None:
        self.advance(State.DISCARDED)
        self.discard_reason, self.discard_detail = reason, detail

    def kept_questions(self) -> list[QuestionItem]:
        return [q for q in self.questions if q.kept]

    def to_dict(self) -> dict:
        return {
            "id": self.id, "audio": self.audio, "taxonomy": self.taxonomy, "caption": self.caption,
            "state": self.state.value, "questions": [q.to_dict() for q in self.questions],
            "discard_reason": self.discard_reason, "discard_detail": self.discard_detail, "parked": self.parked,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FluxRecord":
        taxonomy = d["taxonomy"]
        if isinstance(taxonomy, list):
            taxonomy = " > ".join(taxonomy)
        return cls(str(d["id"]), d["audio"], taxonomy, d.get("caption"), State(d.get("state", "pending")),
                   [QuestionItem.from_dict(q) for q in d.get("questions", [])],
                   d.get("discard_reason"), d.get("discard_detail"), d.get("parked"))


Persist = Callable[[FluxRecord], None]


def _noop(record: FluxRecord) -> None:
    pass


def _attachment(record: FluxRecord, audio_root: Path | None) -> AudioAttachment:
    path = Path(record.audio)
    if audio_root is not None and not path.is_absolute():
        path = audio_root / path
    return AudioAttachment.from_path(path)


def _ask_until_valid(client: ModelClient, prompt: str, parse, retries: int):
    last: SchemaError | None = None
    for _ in range(retries + 1):
        reply = client.complete(ChatRequest.user(prompt))
        try:
            return parse(reply.text), None
        except SchemaError as exc:
            logger.info("%s reply rejected: %s", client.role.value, exc)
            last = exc
    return None, last


def step1_generate_queries(record: FluxRecord, captioner: ModelClient, generator: ModelClient,
                           taxonomy: Taxonomy, few_shots: str = FEW_SHOTS_DEFAULT, parse_retries: int = 2,
                           audio_root: Path | None = None, persist: Persist = _noop) -> GenerationResult | None:
    """Caption the audio if needed, then turn the caption into five four-option questions."""
    if record.state not in (State.PENDING, State.CAPTIONED):
        raise LifecycleError(f"record {record.id}: step 1 needs a pending or captioned record")
    try:
        path = taxonomy.resolve(record.taxonomy)
    except TaxonomyError as exc:
        record.discard(BAD_TAXONOMY, str(exc))
        return None
    if record.state is State.PENDING:
        try:
            audio = _attachment(record, audio_root)
        except OSError as exc:
            record.discard(AUDIO_UNREADABLE, str(exc))
            return None
        caption = captioner.complete(ChatRequest.user(DENSE_CAPTION.render(), audio)).text.strip()
        if not caption:
            record.discard(EMPTY_CAPTION)
            return None
        record.caption = caption
        record.advance(State.CAPTIONED)
        persist(record)
    prompt = QUERY_CHOICES.render(HIERARCHY_BLOCK=path.hierarchy_block(), AUDIO_CAPTION=record.caption,
                                  FEW_SHOT_CONTENT=few_shots)
    result, error = _ask_until_valid(generator, prompt, parse_generation, parse_retries)
    if result is None:
        record.discard(SCHEMA_FAILURE, error.code)
        return None
    if not result.is_success:
        record.discard(CATEGORY_MISMATCH)
        return result
    record.questions = [QuestionItem(q) for q in result.questions]
    record.advance(State.QUERIES_GENERATED)
    return result


def answer_prompt(question: str) -> str:
    return f"{question}\n\n{ANSWER_INSTRUCTION}"


def step2_answer(record: FluxRecord, answerer_a: ModelClient, answerer_b: ModelClient,
                 audio_root: Path | None = None) -> FluxRecord:
    """Ask both answer models every question with the audio attached."""
    if record.state is not State.QUERIES_GENERATED:
        raise LifecycleError(f"record {record.id}: step 2 needs generated queries")
    try:
        audio = _attachment(record, audio_root)
    except OSError as exc:
        record.discard(AUDIO_UNREADABLE, str(exc))
        return record
    for q in record.questions:
        q.traces = {}
        for label, client in (("MODEL_A", answerer_a), ("MODEL_B", answerer_b)):
            reply = client.complete(ChatRequest.user(answer_prompt(q.text), audio))
            q.traces[label] = AnswerTrace.from_reply(reply.text)
        if not any(t.valid for t in q.traces.values()):
            q.reason = NO_VALID_ANSWERS
    if all(q.reason == NO_VALID_ANSWERS for q in record.questions):
        record.discard(NO_VALID_ANSWERS)
    else:
        record.advance(State.ANSWERED)
    return record


def keep_predicate(verdict: JudgeVerdict, strict: bool = False) -> bool:
    if verdict.final_action is not FinalAction.KEEP_USING_WINNER:
        return False
    if strict:
        return verdict.consistency_with_caption is Consistency.STRONG_MATCH
    return verdict.consistency_with_caption is not Consistency.CONFLICT


def decide(verdict: JudgeVerdict, traces: dict[str, AnswerTrace], strict: bool = False) -> tuple[str | None, str | None]:
    """(winning trace label, None) for a kept question, else (None, discard reason)."""
    if verdict.final_action is FinalAction.DISCARD:
        return None, JUDGE_DISCARD
    if verdict.consistency_with_caption is Consistency.CONFLICT:
        return None, CAPTION_CONFLICT
    if not keep_predicate(verdict, strict):
        return None, NOT_STRONG_MATCH
    label = verdict.winner.value
    if verdict.winner is Winner.TIE:
        a = traces.get("MODEL_A")
        label = "MODEL_A" if a is not None and a.valid else "MODEL_B"
    trace = traces.get(label)
    if trace is None or not trace.valid:
        return None, WINNER_INVALID
    return label, None


def render_judge_prompt(record: FluxRecord, question: QuestionItem, rules: str) -> str:
    path = TaxonomyPath.parse(record.taxonomy)
    values = {f"L{i}": path.level(i) for i in range(3)}

    def side(label):
        t = question.traces.get(label)
        if t is None or not t.valid:
            return (t.cot if t else ""), INVALID_ANSWER
        return t.cot, t.answer

    a_cot, a_ans = side("MODEL_A")
    b_cot, b_ans = side("MODEL_B")
    return ANSWER_VERIFICATION.render(caption=record.caption or "", query=question.text,
                                      model_a_cot=a_cot, model_a_response=a_ans,
                                      model_b_cot=b_cot, model_b_response=b_ans,
                                      INJECTION_RULES=rules, **values)


def step3_judge(record: FluxRecord, judge: ModelClient, rules: str, strict: bool = False,
                parse_retries: int = 2, persist: Persist = _noop) -> list[JudgeVerdict | None]:
    """Judge every answered question, then keep or discard the record."""
    if record.state is not State.ANSWERED:
        raise LifecycleError(f"record {record.id}: step 3 needs answered questions")
    verdicts: list[JudgeVerdict | None] = []
    for q in record.questions:
        if q.reason is not None:
            verdicts.append(None)
            continue
        verdict, error = _ask_until_valid(judge, render_judge_prompt(record, q, rules), parse_verdict, parse_retries)
        q.verdict = verdict
        if verdict is None:
            q.reason = JUDGE_SCHEMA_FAILURE
        else:
            q.winner, q.reason = decide(verdict, q.traces, strict)
            q.kept = q.reason is None
        verdicts.append(verdict)
    record.advance(State.JUDGED)
    persist(record)
    if record.kept_questions():
        record.advance(State.KEPT)
    else:
        reasons = Counter(q.reason for q in record.questions)
        record.discard(reasons.most_common(1)[0][0])
    return verdicts


# -- persistence ----------------------------------------------------------------

class RecordStore:
    """Append-only JSONL snapshots, one file per state, plus an index of transitions."""

    INDEX = "index.jsonl"
    PARKED = "parked.jsonl"

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _file_for(self, record: FluxRecord) -> str:
        return self.PARKED if record.parked else f"{record.state.value}.jsonl"

    def save(self, record: FluxRecord) -> None:
        fname = self._file_for(record)
        snapshot = json.dumps(record.to_dict(), sort_keys=True)
        entry = json.dumps({"id": record.id, "state": record.state.value, "file": fname,
                            "parked": record.parked}, sort_keys=True)
        with self._lock:
            with open(self.dir / fname, "a") as fh:
                fh.write(snapshot + "\n")
            with open(self.dir / self.INDEX, "a") as fh:
                fh.write(entry + "\n")

    @staticmethod
    def _read_jsonl(path: Path) -> list[dict]:
        rows = []
        if not path.exists():
            return rows
        with open(path) as fh:
            for line in fh:
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError:
                    continue  # torn write at a crash point
        return rows

    def load(self) -> dict[str, FluxRecord]:
        latest = {row["id"]: row for row in self._read_jsonl(self.dir / self.INDEX)}
        snapshots: dict[str, dict[str, dict]] = {}
        for fname in {row["file"] for row in latest.values()}:
            snapshots[fname] = {row["id"]: row for row in self._read_jsonl(self.dir / fname)}
        return {rid: FluxRecord.from_dict(snapshots[row["file"]][rid]) for rid, row in latest.items()
                if rid in snapshots[row["file"]]}


# -- driver -----------------------------------------------------------------------

@dataclass
class DataFluxModels:
    captioner: ModelClient
    generator: ModelClient
    answerer_a: ModelClient
    answerer_b: ModelClient
    judge: ModelClient


@dataclass
class DataFluxConfig:
    steps: frozenset[int] = frozenset({1, 2, 3})
    parallelism: int = 4
    strict: bool = False
    parse_retries: int = 2
    few_shots: str = FEW_SHOTS_DEFAULT
    rules_dir: Path | None = None
    taxonomy: Taxonomy = field(default_factory=Taxonomy.bundled)
    audio_root: Path | None = None

    def rules_for(self, taxonomy_path: str) -> str:
        l0 = taxonomy_path.split(">")[0].strip()
        slug = re.sub(r"[^a-z0-9]+", "_", l0.lower()).strip("_")
        for directory in filter(None, [self.rules_dir]):
            for name in (slug, "default"):
                candidate = Path(directory) / f"{name}.txt"
                if candidate.exists():
                    return candidate.read_text().rstrip("\n")
        try:
            return bundled_rules(slug)
        except FileNotFoundError:
            return bundled_rules("default")


@dataclass
class Summary:
    total: int
    kept: int
    discarded: dict[str, int]
    parked: int
    parked_reasons: dict[str, int]
    kept_samples: int

    def reconciles(self) -> bool:
        return self.kept + sum(self.discarded.values()) + self.parked == self.total

    def to_dict(self) -> dict:
        return {"total": self.total, "kept": self.kept, "discarded": dict(sorted(self.discarded.items())),
                "parked": self.parked, "parked_reasons": dict(sorted(self.parked_reasons.items())),
                "kept_samples": self.kept_samples}


def process_record(record: FluxRecord, models: DataFluxModels, config: DataFluxConfig, persist: Persist) -> FluxRecord:
    if record.state.terminal:
        return record
    record.parked = None
    try:
        if record.state in (State.PENDING, State.CAPTIONED) and 1 in config.steps:
            step1_generate_queries(record, models.captioner, models.generator, config.taxonomy, config.few_shots,
                                   config.parse_retries, config.audio_root, persist)
            persist(record)
        if record.state is State.QUERIES_GENERATED and 2 in config.steps:
            step2_answer(record, models.answerer_a, models.answerer_b, config.audio_root)
            persist(record)
        if record.state is State.ANSWERED and 3 in config.steps:
            step3_judge(record, models.judge, config.rules_for(record.taxonomy), config.strict,
                        config.parse_retries, persist)
            persist(record)
    except GatewayError as exc:
        logger.warning("parking %s at %s: %s", record.id, record.state.value, exc)
        record.parked = f"{type(exc).__name__}: {exc}"
        persist(record)
    return record


def summarize(records: list[FluxRecord]) -> Summary:
    discarded = Counter(r.discard_reason for r in records if r.state is State.DISCARDED)
    open_records = [r for r in records if not r.state.terminal]
    parked_reasons = Counter("transport" if r.parked else f"stopped at {r.state.value}" for r in open_records)
    kept = [r for r in records if r.state is State.KEPT]
    return Summary(len(records), len(kept), dict(discarded), len(open_records), dict(parked_reasons),
                   sum(len(r.kept_questions()) for r in kept))


def export_dataset(records: list[FluxRecord], path) -> int:
    """Write one line per kept question with the winning trace; returns the line count."""
    n = 0
    with open(path, "w") as fh:
        for r in records:
            if r.state is not State.KEPT:
                continue
            for i, q in enumerate(r.questions):
                if not q.kept:
                    continue
                trace = q.winner_trace()
                fh.write(json.dumps({
                    "id": f"{r.id}-q{i}", "record_id": r.id, "audio": r.audio, "taxonomy": r.taxonomy,
                    "caption": r.caption, "question": q.text, "answer": trace.answer, "cot": trace.cot,
                    "winner": q.winner, "verdict": q.verdict.to_dict(),
                }, sort_keys=True) + "\n")
                n += 1
    return n


def run_pipeline(records: list[FluxRecord], models: DataFluxModels, out_dir,
                 config: DataFluxConfig = DataFluxConfig()) -> Summary:
    """Run (or resume) every record through the configured steps; state lives under ``out_dir``."""
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique")
    store = RecordStore(out_dir)
    stored = store.load()
    work = [stored.get(r.id, r) for r in records]
    for r in work:
        if r.id not in stored:
            store.save(r)

    with ThreadPoolExecutor(max_workers=max(1, config.parallelism)) as pool:
        futures = [pool.submit(process_record, r, models, config, store.save) for r in work if not r.state.terminal]
        try:
            for f in futures:
                f.result()
        except BaseException:
            for f in futures:
                f.cancel()
            raise

    summary = summarize(work)
    out = Path(out_dir)
    export_dataset(work, out / "dataset.jsonl")
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    return summary


def load_manifest(path) -> list[FluxRecord]:
    """Read ``{id, audio, taxonomy, caption?}`` lines."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                records.append(FluxRecord.from_dict(row))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from exc
    return records


def valid_kept_question(q: QuestionItem) -> bool:
    try:
        check_question(q.text)
    except SchemaError:
        return False
    return True
