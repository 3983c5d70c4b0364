"""Instruction templates and prompt rendering.

The four templates are fixed text with ``{question}``, ``{options}``,
``{answers}`` and ``{reference}`` placeholders. Rendering is pure: the same
inputs always produce the same bytes. Templates can be overridden from a
directory of ``<name>.txt`` files for experimentation; the embedded bodies
are the canonical ones and golden-file tests pin them byte-for-byte.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from .data import TaskRecord
from .errors import TemplateError, ValidationError

TEMPLATE_NAMES = ("multiple_choice", "free_form", "self_justify", "icl_preamble")
_PLACEHOLDER_RE = re.compile(r"\{(question|options|answers|reference)\}")

MULTIPLE_CHOICE_TEMPLATE = """\
Answer the multiple-choice question.
Your response should be in the format: 'Answer: LETTER' (without quotes).

Question:
{question}

Options:
{options}
"""

FREE_FORM_TEMPLATE = """\
Answer the following question.
Output the value in the format: 'Answer: VALUE' (without quotes).

Question:
{question}

Options:
{options}

Provide your answer on a new line after 'Answer:', without using a \\boxed command.
"""

SELF_JUSTIFY_TEMPLATE = """\
Here are the multiple answers to the question.
Please consider them thoroughly and give me the correct answer. Your response should be in the following format:
'Answer: LETTER' (without quotes).

Question:
{question}

Options:
{options}

Multiple Answers:
{answers}

Now, please give me the final correct answer:
"""

ICL_PREAMBLE_TEMPLATE = """\
You are an expert in the question answering. Below are some examples of questions and their corresponding answer.

{reference}
"""


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    def render(self, **values: str) -> str:
        """Substitute placeholders; every placeholder in the body must be filled."""
        declared = set(_PLACEHOLDER_RE.findall(self.body))
        missing = declared - set(values)
        if missing:
            raise TemplateError(
                f"template {self.name!r} has unfilled placeholders: {sorted(missing)}"
            )
        return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], self.body)


@dataclass(frozen=True)
class TemplateSet:
    multiple_choice: PromptTemplate
    free_form: PromptTemplate
    self_justify: PromptTemplate
    icl_preamble: PromptTemplate

    @classmethod
    def default(cls) -> "TemplateSet":
        return cls(
            multiple_choice=PromptTemplate("multiple_choice", MULTIPLE_CHOICE_TEMPLATE),
            free_form=PromptTemplate("free_form", FREE_FORM_TEMPLATE),
            self_justify=PromptTemplate("self_justify", SELF_JUSTIFY_TEMPLATE),
            icl_preamble=PromptTemplate("icl_preamble", ICL_PREAMBLE_TEMPLATE),
        )

    @classmethod
    def load(cls, directory: str | Path) -> "TemplateSet":
        """Read overrides from ``<name>.txt`` files; absent files keep the default."""
        directory = Path(directory)
        defaults = cls.default()
        bodies = {}
        for name in TEMPLATE_NAMES:
            path = directory / f"{name}.txt"
            if path.exists():
                bodies[name] = PromptTemplate(name, path.read_text(encoding="utf-8"))
            else:
                bodies[name] = getattr(defaults, name)
        return cls(**bodies)


def render_options(record: TaskRecord) -> str:
    return "\n".join(f"{letter}. {text}" for letter, text in record.options)


def render_reference(record: TaskRecord) -> str:
    """Question, options and gold answer as one in-context example block."""
    if record.gold is None:
        raise ValidationError(f"record {record.id!r} has no gold answer to render as reference")
    parts = [f"Question:\n{record.question}"]
    if record.options:
        parts.append(f"Options:\n{render_options(record)}")
    parts.append(f"Answer: {record.gold.canonical()}")
    return "\n\n".join(parts)


def render_task(
    record: TaskRecord,
    refs: list[str] | tuple[str, ...] = (),
    templates: TemplateSet | None = None,
) -> list[dict[str, str]]:
    """Build the chat messages for one task.

    With references, the in-context preamble (references joined by blank
    lines) goes into the system message; the user message carries the task
    in the multiple-choice or free-form template.
    """
    templates = templates or TemplateSet.default()
    template = templates.multiple_choice if record.options else templates.free_form
    user = template.render(question=record.question, options=render_options(record))
    messages = []
    if refs:
        system = templates.icl_preamble.render(reference="\n\n".join(refs))
        messages.append({"role": "system", "content": system})
    messages.append({"role": "user", "content": user})
    return messages


def render_self_justify(
    record: TaskRecord,
    answers: list[tuple[int, str]],
    templates: TemplateSet | None = None,
) -> list[dict[str, str]]:
    """Build the arbitration prompt listing the collaborators' answers.

    ``answers`` holds (collaborator index, answer text) pairs; the list is
    rendered in collaborator-index order as numbered lines. Fewer than two
    answers is a precondition error: arbitration degenerates.
    """
    if len(answers) < 2:
        raise ValidationError("self-justify needs at least 2 collaborator answers")
    templates = templates or TemplateSet.default()
    ordered = sorted(answers, key=lambda pair: pair[0])
    numbered = "\n".join(f"{i}. {text}" for i, (_, text) in enumerate(ordered, start=1))
    user = templates.self_justify.render(
        question=record.question,
        options=render_options(record),
        answers=numbered,
    )
    return [{"role": "user", "content": user}]
