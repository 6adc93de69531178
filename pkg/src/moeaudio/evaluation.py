"""WER/CER by edit-distance alignment and the caption-then-answer multiple-choice harness."""

from __future__ import annotations

import json
import re
import unicodedata
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dataflux.schema import OPTION_LETTERS, extract_answer
from .dataflux.templates import CAPTION_QA, DENSE_CAPTION
from .gateway import AudioAttachment, ChatRequest, ModelClient


class ReconciliationError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    lowercase: bool = True
    strip_punctuation: bool = True
    collapse_whitespace: bool = True

    def apply(self, text: str) -> str:
        if self.lowercase:
            text = text.lower()
        if self.strip_punctuation:
            text = "".join(" " if unicodedata.category(ch).startswith("P") else ch for ch in text)
        if self.collapse_whitespace:
            text = " ".join(text.split())
        return text


RAW = Normalization(False, False, False)


@dataclass(frozen=True)
class EditOps:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int
    empty_reference: bool = False

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / max(1, self.ref_len)


def align(ref: list, hyp: list) -> EditOps:
    """Levenshtein alignment with unit costs; ties prefer substitution, then deletion."""
    n, m = len(ref), len(hyp)
    # each cell holds (cost, S, I, D) for the prefix pair
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            if ref[i - 1] == hyp[j - 1]:
                best = prev[j - 1]
            else:
                c, s, ins, d = prev[j - 1]
                best = (c + 1, s + 1, ins, d)
            c, s, ins, d = prev[j]
            if c + 1 < best[0]:
                best = (c + 1, s, ins, d + 1)
            c, s, ins, d = cur[j - 1]
            if c + 1 < best[0]:
                best = (c + 1, s, ins + 1, d)
            cur.append(best)
        prev = cur
    _, s, ins, d = prev[m]
    return EditOps(s, ins, d, n, empty_reference=(n == 0))


def wer(reference: str, hypothesis: str, norm: Normalization = Normalization()) -> tuple[float, EditOps]:
    ops = align(norm.apply(reference).split(), norm.apply(hypothesis).split())
    return ops.rate, ops


def cer(reference: str, hypothesis: str, norm: Normalization = Normalization(),
        drop_whitespace: bool = True) -> tuple[float, EditOps]:
    ref, hyp = norm.apply(reference), norm.apply(hypothesis)
    if drop_whitespace:
        ref, hyp = re.sub(r"\s+", "", ref), re.sub(r"\s+", "", hyp)
    ops = align(list(ref), list(hyp))
    return ops.rate, ops


def corpus_rate(pairs, unit: str = "word", norm: Normalization = Normalization()) -> dict:
    """Pooled error rate over (reference, hypothesis) pairs: total edits / total reference length."""
    fn = wer if unit == "word" else cer
    totals = {"substitutions": 0, "insertions": 0, "deletions": 0, "ref_len": 0, "utterances": 0}
    for ref, hyp in pairs:
        _, ops = fn(ref, hyp, norm)
        totals["substitutions"] += ops.substitutions
        totals["insertions"] += ops.insertions
        totals["deletions"] += ops.deletions
        totals["ref_len"] += ops.ref_len
        totals["utterances"] += 1
    errors = totals["substitutions"] + totals["insertions"] + totals["deletions"]
    totals["rate"] = errors / max(1, totals["ref_len"])
    return totals


# -- multiple-choice items ------------------------------------------------------

@dataclass(frozen=True)
class EvalItem:
    id: str
    audio: str
    question: str
    choices: tuple[str, str, str, str]
    gold: str
    transcript: str | None = None
    category: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        if len(self.choices) != 4:
            raise ValueError(f"item {self.id}: expected 4 choices, got {len(self.choices)}")
        if self.gold not in OPTION_LETTERS:
            raise ValueError(f"item {self.id}: gold {self.gold!r} is not one of A-D")

    def question_block(self) -> str:
        """The question with its lettered options on the following lines."""
        lines = [self.question] + [f"{letter}. {c}" for letter, c in zip(OPTION_LETTERS, self.choices)]
        return "\n".join(lines)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalItem":
        return cls(str(d["id"]), d.get("audio", ""), d["question"], tuple(d["choices"]), d["gold"],
                   d.get("transcript"), d.get("category"))


def load_items(path) -> list[EvalItem]:
    items = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    items.append(EvalItem.from_dict(json.loads(line)))
                except (KeyError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return items


@dataclass
class QAResult:
    id: str
    caption: str
    answer: str | None
    correct: bool
    unextractable: bool = False
    raw: str = ""


def caption_then_answer(item: EvalItem, captioner: ModelClient, qa_reader: ModelClient,
                        audio: AudioAttachment | None = None, audio_root: Path | None = None) -> QAResult:
    """Caption the audio, then let a text-only reader answer from the caption alone."""
    if audio is None and item.audio:
        path = Path(item.audio)
        if audio_root is not None and not path.is_absolute():
            path = audio_root / path
        audio = AudioAttachment.from_path(path)
    caption = captioner.complete(ChatRequest.user(DENSE_CAPTION.render(), audio)).text.strip()
    prompt = CAPTION_QA.render(caption=caption, question=item.question_block())
    raw = qa_reader.complete(ChatRequest.user(prompt)).text
    found = extract_answer(raw)
    if found is None:
        return QAResult(item.id, caption, None, False, True, raw)
    return QAResult(item.id, caption, found.answer, found.answer == item.gold, False, raw)


@dataclass
class Report:
    total: int
    correct: int
    unextractable: int
    by_category: dict[str, dict] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {"total": self.total, "correct": self.correct, "accuracy": self.accuracy,
                "unextractable": self.unextractable, "by_category": self.by_category}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        rows = [("category", "n", "correct", "accuracy")]
        for name, c in self.by_category.items():
            rows.append((name, str(c["total"]), str(c["correct"]), f"{c['accuracy']:.4f}"))
        rows.append(("ALL", str(self.total), str(self.correct), f"{self.accuracy:.4f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def score_set(items: list[EvalItem], results: list[QAResult]) -> Report:
    by_id = {r.id: r for r in results}
    item_ids = {it.id for it in items}
    if len(by_id) != len(results) or set(by_id) != item_ids or len(item_ids) != len(items):
        missing = sorted(item_ids - set(by_id))
        extra = sorted(set(by_id) - item_ids)
        raise ReconciliationError(f"items and results disagree: missing={missing[:5]} extra={extra[:5]}")
    cats: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    correct = unextractable = 0
    for it in items:
        r = by_id[it.id]
        correct += r.correct
        unextractable += r.unextractable
        if it.category is not None:
            cats[it.category][0] += 1
            cats[it.category][1] += r.correct
    by_category = {k: {"total": n, "correct": c, "accuracy": c / n} for k, (n, c) in sorted(cats.items())}
    return Report(len(items), correct, unextractable, by_category)


def write_results(results: list[QAResult], path) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_results(path) -> list[QAResult]:
    with open(path) as fh:
        return [QAResult(**json.loads(line)) for line in fh if line.strip()]
