"""Prompt templates shipped as text files, rendered strictly.

Two placeholder syntaxes occur in the bundled prompts. ``mustache`` templates use
``{{NAME}}`` and leave single braces alone (their JSON examples are literal).
``format`` templates use ``{name}`` with ``{{``/``}}`` as escaped braces.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from importlib import resources


class TemplateError(KeyError):
    pass


_MUSTACHE = re.compile(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}")


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    text: str
    style: str = "format"

    def placeholders(self) -> list[str]:
        if self.style == "mustache":
            return list(dict.fromkeys(_MUSTACHE.findall(self.text)))
        if self.style == "plain":
            return []
        names = [f for _, f, _, _ in string.Formatter().parse(self.text) if f is not None]
        return list(dict.fromkeys(names))

    def render(self, **values: str) -> str:
        missing = [p for p in self.placeholders() if p not in values]
        if missing:
            raise TemplateError(f"template {self.id}: unresolved placeholders {missing}")
        if self.style == "plain":
            return self.text
        if self.style == "mustache":
            return _MUSTACHE.sub(lambda m: str(values[m.group(1)]), self.text)
        return self.text.format_map({k: str(v) for k, v in values.items()})


def load_template(template_id: str, style: str) -> PromptTemplate:
    raw = resources.files("moeaudio.dataflux").joinpath("prompts", f"{template_id}.txt").read_text(encoding="utf-8")
    return PromptTemplate(template_id, raw.rstrip("\n"), style)


QUERY_CHOICES = load_template("query_choices", "mustache")
ANSWER_VERIFICATION = load_template("answer_verification", "format")
DENSE_CAPTION = load_template("dense_caption", "plain")
CAPTION_QA = load_template("caption_qa", "format")
FEW_SHOTS_DEFAULT = resources.files("moeaudio.dataflux").joinpath("prompts", "few_shots_default.txt") \
    .read_text(encoding="utf-8").rstrip("\n")


def bundled_rules(name: str = "default") -> str:
    return resources.files("moeaudio.dataflux").joinpath("rules", f"{name}.txt").read_text(encoding="utf-8").rstrip("\n")
