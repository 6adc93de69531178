"""Strict parsers for generator and judge replies, and the tolerant answer-letter extractor."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass

OPTION_LETTERS = ("A", "B", "C", "D")
QUESTIONS_PER_RECORD = 5


class SchemaError(ValueError):
    """A reply that does not satisfy its schema. ``code`` names the violated rule."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class Consistency(enum.Enum):
    STRONG_MATCH = "STRONG_MATCH"
    WEAK_MATCH = "WEAK_MATCH"
    CONFLICT = "CONFLICT"


class Winner(enum.Enum):
    MODEL_A = "MODEL_A"
    MODEL_B = "MODEL_B"
    TIE = "TIE"
    NONE = "NONE"


class FinalAction(enum.Enum):
    KEEP_USING_WINNER = "KEEP_USING_WINNER"
    DISCARD = "DISCARD"


@dataclass(frozen=True)
class GenerationResult:
    is_success: bool
    questions: tuple[str, ...]

    def __post_init__(self):
        if self.is_success and len(self.questions) != QUESTIONS_PER_RECORD:
            raise SchemaError("bad_cardinality", f"expected {QUESTIONS_PER_RECORD} questions, got {len(self.questions)}")
        if not self.is_success and self.questions:
            raise SchemaError("inconsistent_result", "is_success is false but questions is not empty")


@dataclass(frozen=True)
class JudgeVerdict:
    consensus: bool
    consistency_with_caption: Consistency
    winner: Winner
    reasoning: str
    final_action: FinalAction

    def __post_init__(self):
        if self.final_action is FinalAction.KEEP_USING_WINNER and self.winner is Winner.NONE:
            raise SchemaError("inconsistent_verdict", "KEEP_USING_WINNER with winner NONE")

    def to_dict(self) -> dict:
        return {
            "consensus": self.consensus,
            "consistency_with_caption": self.consistency_with_caption.value,
            "winner": self.winner.value,
            "reasoning": self.reasoning,
            "final_action": self.final_action.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JudgeVerdict":
        return _verdict_from_obj(d)


def _no_duplicates(pairs):
    keys = [k for k, _ in pairs]
    dupes = {k for k in keys if keys.count(k) > 1}
    if dupes:
        raise SchemaError("duplicate_field", f"fields repeated: {sorted(dupes)}")
    return dict(pairs)


def _load_object(text: str) -> dict:
    try:
        obj = json.loads(text.strip(), object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise SchemaError("not_json", str(exc)) from exc
    if not isinstance(obj, dict):
        raise SchemaError("not_object", f"top-level JSON value is {type(obj).__name__}")
    return obj


def _require_fields(obj: dict, fields: tuple[str, ...]) -> None:
    missing = [f for f in fields if f not in obj]
    if missing:
        raise SchemaError("missing_field", f"missing {missing}")
    extra = sorted(set(obj) - set(fields))
    if extra:
        raise SchemaError("unknown_field", f"unexpected {extra}")


def check_question(question: str) -> tuple[str, dict[str, str]]:
    """Split a question string into its stem and its four options, or raise."""
    if not isinstance(question, str):
        raise SchemaError("wrong_type", "question is not a string")
    lines = question.split("\n")
    if len(lines) != 1 + len(OPTION_LETTERS):
        raise SchemaError("bad_question_format", f"expected a question line and 4 options, got {len(lines)} lines")
    stem, option_lines = lines[0].strip(), lines[1:]
    if not stem:
        raise SchemaError("bad_question_format", "empty question line")
    options = {}
    for letter, line in zip(OPTION_LETTERS, option_lines):
        if not line.startswith(f"{letter}. ") or not line[3:].strip():
            raise SchemaError("bad_question_format", f"option line {line!r} should start with '{letter}. '")
        options[letter] = line[3:].strip()
    return stem, options


def parse_generation(text: str) -> GenerationResult:
    obj = _load_object(text)
    _require_fields(obj, ("is_success", "questions"))
    if not isinstance(obj["is_success"], bool):
        raise SchemaError("wrong_type", "is_success must be a boolean")
    questions = obj["questions"]
    if not isinstance(questions, list) or not all(isinstance(q, str) for q in questions):
        raise SchemaError("wrong_type", "questions must be a list of strings")
    if obj["is_success"]:
        if len(questions) != QUESTIONS_PER_RECORD:
            raise SchemaError("bad_cardinality", f"expected {QUESTIONS_PER_RECORD} questions, got {len(questions)}")
        for q in questions:
            check_question(q)
        if len(set(questions)) != len(questions):
            raise SchemaError("duplicate_question", "questions are not distinct")
    return GenerationResult(obj["is_success"], tuple(questions))


def _enum_field(obj: dict, name: str, kind: type[enum.Enum]):
    value = obj[name]
    if not isinstance(value, str):
        raise SchemaError("wrong_type", f"{name} must be a string")
    try:
        return kind(value)
    except ValueError:
        raise SchemaError("bad_enum", f"{name}={value!r} not in {[m.value for m in kind]}") from None


def _verdict_from_obj(obj: dict) -> JudgeVerdict:
    _require_fields(obj, ("consensus", "consistency_with_caption", "winner", "reasoning", "final_action"))
    if not isinstance(obj["consensus"], bool):
        raise SchemaError("wrong_type", "consensus must be a boolean")
    if not isinstance(obj["reasoning"], str):
        raise SchemaError("wrong_type", "reasoning must be a string")
    return JudgeVerdict(
        consensus=obj["consensus"],
        consistency_with_caption=_enum_field(obj, "consistency_with_caption", Consistency),
        winner=_enum_field(obj, "winner", Winner),
        reasoning=obj["reasoning"],
        final_action=_enum_field(obj, "final_action", FinalAction),
    )


def parse_verdict(text: str) -> JudgeVerdict:
    return _verdict_from_obj(_load_object(text))


# -- answer extraction --------------------------------------------------------

_ONLY_LETTER = re.compile(r"^\s*\(?([A-Da-d])\)?\.?\s*$")
_LETTER = r"([A-D](?![A-Za-z])|[a-d](?![A-Za-z])(?![ \t]+[A-Za-z]))"
_ANSWER_CUE = re.compile(r"(?i:(?:final\s+)?answer)\s*(?:(?i:is)|:|=|-)?\s*(?:(?i:option)\s+)?[\(\[\*]*" + _LETTER)
_OPTION_CUE = re.compile(r"\b(?i:option)\s+\(?" + _LETTER)
_OPTION_LINE = re.compile(r"^\s*[\(\[\*]*([A-D])[\)\]\*]*(?:[.:)]\s*.*)?$")
_BARE_LETTER = re.compile(r"(?<![A-Za-z'])([A-D])(?![A-Za-z'])(?!\s+[a-z])")


@dataclass(frozen=True)
class Extraction:
    cot: str
    answer: str


def extract_answer(text: str) -> Extraction | None:
    """Find the final chosen option letter in a free-form reply.

    Tried in order: the whole reply is a letter; the last "Answer: X" style cue;
    the last "option X"; the last line that is an option letter; the last
    standalone capital A-D not followed by a lowercase word. The chain of thought
    is everything before the matched cue.
    """
    if text is None:
        return None
    m = _ONLY_LETTER.match(text)
    if m:
        return Extraction("", m.group(1).upper())
    for pattern in (_ANSWER_CUE, _OPTION_CUE):
        matches = list(pattern.finditer(text))
        if matches:
            last = matches[-1]
            return Extraction(text[:last.start()].strip(), last.group(1).upper())
    lines = text.split("\n")
    for i in range(len(lines) - 1, -1, -1):
        m = _OPTION_LINE.match(lines[i])
        if m and lines[i].strip():
            return Extraction("\n".join(lines[:i]).strip(), m.group(1))
    matches = list(_BARE_LETTER.finditer(text))
    if matches:
        last = matches[-1]
        return Extraction(text[:last.start()].strip(), last.group(1))
    return None
