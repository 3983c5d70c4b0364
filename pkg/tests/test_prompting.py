from __future__ import annotations

from pathlib import Path

import pytest

from semievol_forge.data import Answer, TaskRecord
from semievol_forge.errors import TemplateError, ValidationError
from semievol_forge.prompting import (
    PromptTemplate,
    TemplateSet,
    render_reference,
    render_self_justify,
    render_task,
)

from conftest import make_mc_record

GOLDEN = Path(__file__).parent / "golden"


def golden(name: str) -> str:
    return (GOLDEN / name).read_text(encoding="utf-8")


def ref_record(record_id, question, options, gold):
    return TaskRecord(
        id=record_id,
        question=question,
        options=options,
        gold=Answer(kind="choice", choice=gold),
    )


class TestGoldenRenders:
    def test_multiple_choice_no_refs(self, mc_record):
        messages = render_task(mc_record)
        assert len(messages) == 1
        assert messages[0]["role"] == "user"
        assert messages[0]["content"] == golden("mc_user.golden.txt")
        assert "Your response should be in the format: 'Answer: LETTER'" in messages[0]["content"]

    def test_free_form(self, numeric_record):
        messages = render_task(numeric_record)
        assert len(messages) == 1
        assert messages[0]["content"] == golden("free_form_user.golden.txt")
        assert "Answer: VALUE" in messages[0]["content"]
        assert "Provide your answer on a new line after 'Answer:'" in messages[0]["content"]

    def test_icl_preamble_system_message(self, mc_record):
        refs = [
            render_reference(
                ref_record(
                    "r-1",
                    "Which gas do plants absorb?",
                    (("A", "oxygen"), ("B", "carbon dioxide")),
                    "B",
                )
            ),
            render_reference(
                ref_record(
                    "r-2",
                    "How many continents are there?",
                    (("A", "five"), ("B", "seven")),
                    "B",
                )
            ),
        ]
        messages = render_task(mc_record, refs)
        assert [m["role"] for m in messages] == ["system", "user"]
        assert messages[0]["content"] == golden("icl_system.golden.txt")
        # the task message is identical with or without references
        assert messages[1]["content"] == golden("mc_user.golden.txt")

    def test_self_justify(self, mc_record):
        messages = render_self_justify(mc_record, [(1, "A"), (2, "B"), (3, "A")])
        assert len(messages) == 1
        content = messages[0]["content"]
        assert content == golden("self_justify_user.golden.txt")
        assert "Please consider them thoroughly" in content
        assert content.rstrip("\n").endswith("Now, please give me the final correct answer:")


class TestRenderRules:
    def test_refs_kept_in_retrieval_order(self, mc_record):
        refs = [f"Question:\nref number {i}?\n\nAnswer: A" for i in range(3)]
        system = render_task(mc_record, refs)[0]["content"]
        positions = [system.index(f"ref number {i}?") for i in range(3)]
        assert positions == sorted(positions)

    def test_answers_numbered_in_collaborator_order(self, mc_record):
        content = render_self_justify(mc_record, [(3, "C"), (1, "A"), (2, "B")])[0]["content"]
        block = content.split("Multiple Answers:\n", 1)[1]
        assert block.startswith("1. A\n2. B\n3. C")

    def test_single_answer_is_precondition_error(self, mc_record):
        with pytest.raises(ValidationError):
            render_self_justify(mc_record, [(1, "A")])

    def test_rendering_is_pure(self, mc_record):
        a = render_task(mc_record, ["Question:\nx?\n\nAnswer: A"])
        b = render_task(mc_record, ["Question:\nx?\n\nAnswer: A"])
        assert a == b

    def test_unfilled_placeholder_is_error(self):
        template = PromptTemplate("custom", "{question} and {answers}")
        with pytest.raises(TemplateError) as err:
            template.render(question="q")
        assert "answers" in str(err.value)

    def test_reference_requires_gold(self):
        record = make_mc_record(gold=None)
        with pytest.raises(ValidationError):
            render_reference(record)

    def test_reference_renders_answer_line(self):
        ref = render_reference(make_mc_record())
        assert ref.endswith("Answer: B")

    def test_template_directory_override(self, tmp_path, mc_record):
        (tmp_path / "multiple_choice.txt").write_text(
            "Custom instruction.\n{question}\n{options}\n", encoding="utf-8"
        )
        templates = TemplateSet.load(tmp_path)
        content = render_task(mc_record, templates=templates)[0]["content"]
        assert content.startswith("Custom instruction.")
        # unoverridden templates keep the canonical bodies
        assert templates.self_justify.body == TemplateSet.default().self_justify.body
