from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semievol_forge.collab import PseudoResponse
from semievol_forge.data import Answer, Dataset
from semievol_forge.errors import CapabilityError, ValidationError
from semievol_forge.selection import (
    entropy,
    percentile_threshold,
    score_pseudo,
    select,
)
from semievol_forge.backends.types import ModelRef

from conftest import ScriptedBackend, make_mc_record


def make_pseudo(task_id, answer="B", score=None, logprobs=None):
    return PseudoResponse(
        task_id=task_id,
        per_collaborator=[],
        justified_text=f"Answer: {answer}",
        justified_answer=Answer(kind="choice", choice=answer),
        justified_logprobs=logprobs,
        entropy=score,
    )


class TestEntropy:
    def test_probability_one_tokens(self):
        assert entropy([0.0, 0.0, 0.0]) == 0.0

    def test_direct_arithmetic(self):
        # -(1/2) * (-0.5 + -1.5) = 1.0
        assert entropy([-0.5, -1.5]) == pytest.approx(1.0)

    def test_rejects_nan(self):
        with pytest.raises(ValidationError):
            entropy([-0.2, float("nan")])

    def test_rejects_positive(self):
        with pytest.raises(ValidationError):
            entropy([-0.2, 0.1])

    def test_rejects_empty(self):
        with pytest.raises(ValidationError):
            entropy([])

    @given(st.lists(st.floats(min_value=-20, max_value=0, allow_nan=False), min_size=1, max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_duplication_invariance(self, logprobs):
        assert entropy(logprobs + logprobs) == pytest.approx(entropy(logprobs), rel=1e-12, abs=1e-12)


class TestPercentileThreshold:
    def test_nearest_rank_by_hand(self):
        # index ceil(0.5 * 4) = 2 (1-based) of the ascending sort
        assert percentile_threshold([0.1, 0.2, 0.3, 0.4], 50) == pytest.approx(0.2)

    def test_singleton(self):
        assert percentile_threshold([0.7], 13) == pytest.approx(0.7)
        assert percentile_threshold([0.7], 100) == pytest.approx(0.7)

    def test_theta_100_is_max(self):
        values = [0.5, 0.1, 0.9, 0.3]
        assert percentile_threshold(values, 100) == pytest.approx(0.9)

    def test_order_independent(self):
        assert percentile_threshold([0.4, 0.1, 0.3, 0.2], 50) == pytest.approx(0.2)

    def test_theta_range(self):
        with pytest.raises(ValidationError):
            percentile_threshold([0.1], 0)
        with pytest.raises(ValidationError):
            percentile_threshold([0.1], 150)

    def test_empty(self):
        with pytest.raises(ValidationError):
            percentile_threshold([], 50)


class TestScorePseudo:
    def test_echo_scoring_constant_prob(self, mc_record):
        # every token at probability e^-1 gives entropy 1.0 regardless of length
        backend = ScriptedBackend(score_probs=lambda completion: [math.exp(-1)] * 50)
        warm = ModelRef(name="w", role="warm")
        pseudo = make_pseudo(mc_record.id)
        score = score_pseudo(pseudo, mc_record, warm, backend)
        assert score.entropy == pytest.approx(1.0)
        assert score.source == "echo_scored"
        long_pseudo = make_pseudo(mc_record.id)
        long_pseudo.justified_text = "one two three four five six Answer: B"
        assert score_pseudo(long_pseudo, mc_record, warm, backend).entropy == pytest.approx(1.0)

    def test_scripted_probs_match_ln(self, mc_record):
        backend = ScriptedBackend(score_probs=[0.5, 0.25])
        warm = ModelRef(name="w", role="warm")
        score = score_pseudo(make_pseudo(mc_record.id), mc_record, warm, backend)
        # "Answer: B" is two tokens: ln 0.5 and ln 0.25
        assert score.token_count == 2
        assert score.entropy == pytest.approx(-(math.log(0.5) + math.log(0.25)) / 2)

    def test_generation_fallback_when_no_echo(self, mc_record):
        backend = ScriptedBackend(caps=("chat", "embed"))
        warm = ModelRef(name="w", role="warm")
        pseudo = make_pseudo(mc_record.id, logprobs=(-0.5, -1.5))
        score = score_pseudo(pseudo, mc_record, warm, backend)
        assert score.source == "generation_logprobs"
        assert score.entropy == pytest.approx(1.0)

    def test_no_source_is_capability_error(self, mc_record):
        backend = ScriptedBackend(caps=("chat", "embed"))
        warm = ModelRef(name="w", role="warm")
        with pytest.raises(CapabilityError):
            score_pseudo(make_pseudo(mc_record.id), mc_record, warm, backend)

    def test_empty_text_rejected(self, mc_record):
        backend = ScriptedBackend()
        warm = ModelRef(name="w", role="warm")
        pseudo = make_pseudo(mc_record.id)
        pseudo.justified_text = ""
        with pytest.raises(ValidationError):
            score_pseudo(pseudo, mc_record, warm, backend)


class TestSelect:
    def _tasks(self, ids):
        return Dataset(tuple(make_mc_record(i) for i in ids), provenance="u")

    def test_keeps_at_most_tau(self):
        ids = ["t-1", "t-2", "t-3", "t-4"]
        pseudos = [make_pseudo(i, score=s) for i, s in zip(ids, [0.1, 0.2, 0.3, 0.4])]
        selected, report = select(pseudos, 0.2, self._tasks(ids), theta=50)
        assert selected.ids() == ["t-1", "t-2"]
        assert report.kept_ids == ["t-1", "t-2"]
        assert report.dropped_ids == ["t-3", "t-4"]

    def test_tau_below_floor_keeps_nothing(self):
        ids = ["t-1", "t-2"]
        pseudos = [make_pseudo(i, score=s) for i, s in zip(ids, [0.5, 0.6])]
        selected, report = select(pseudos, 0.01, self._tasks(ids), theta=50)
        assert len(selected) == 0
        assert report.dropped_ids == ids

    def test_threshold_is_inclusive(self):
        ids = ["t-1", "t-2", "t-3"]
        pseudos = [make_pseudo(i, score=0.25) for i in ids]
        selected, _ = select(pseudos, 0.25, self._tasks(ids), theta=50)
        assert selected.ids() == ids

    def test_selected_records_carry_pseudo_gold(self):
        ids = ["t-1"]
        pseudos = [make_pseudo("t-1", answer="C", score=0.1)]
        selected, _ = select(pseudos, 1.0, self._tasks(ids), theta=50)
        assert selected.records[0].gold == Answer(kind="choice", choice="C")

    def test_unscored_pseudo_is_error(self):
        pseudos = [make_pseudo("t-1", score=None)]
        with pytest.raises(ValidationError) as err:
            select(pseudos, 1.0, self._tasks(["t-1"]), theta=50)
        assert "t-1" in str(err.value)

    def test_report_totals_consistent_and_histogram_shape(self):
        rng = random.Random(4)
        ids = [f"t-{i:03d}" for i in range(40)]
        pseudos = [make_pseudo(i, score=rng.uniform(0, 2)) for i in ids]
        tau = percentile_threshold([p.entropy for p in pseudos], 50)
        selected, report = select(pseudos, tau, self._tasks(ids), theta=50)
        assert len(report.kept_ids) + len(report.dropped_ids) == 40
        assert len(report.histogram["counts"]) == 20
        assert len(report.histogram["bin_edges"]) == 21
        assert sum(report.histogram["counts"]) == 40
        assert selected.ids() == sorted(selected.ids())

    @given(
        scores=st.lists(st.floats(min_value=0, max_value=5, allow_nan=False), min_size=1, max_size=50),
        theta1=st.floats(min_value=1, max_value=100),
        theta2=st.floats(min_value=1, max_value=100),
    )
    @settings(max_examples=80, deadline=None)
    def test_monotonicity_in_theta(self, scores, theta1, theta2):
        lo, hi = sorted([theta1, theta2])
        ids = [f"t-{i:03d}" for i in range(len(scores))]
        pseudos = [make_pseudo(i, score=s) for i, s in zip(ids, scores)]
        tasks = self._tasks(ids)
        kept_lo, _ = select(pseudos, percentile_threshold(scores, lo), tasks, theta=lo)
        kept_hi, _ = select(pseudos, percentile_threshold(scores, hi), tasks, theta=hi)
        assert set(kept_lo.ids()) <= set(kept_hi.ids())

    @given(
        scores=st.lists(
            st.floats(min_value=0, max_value=5, allow_nan=False),
            min_size=1,
            max_size=60,
            unique=True,
        ),
        theta=st.floats(min_value=1, max_value=100),
    )
    @settings(max_examples=80, deadline=None)
    def test_cardinality_with_distinct_scores(self, scores, theta):
        ids = [f"t-{i:03d}" for i in range(len(scores))]
        pseudos = [make_pseudo(i, score=s) for i, s in zip(ids, scores)]
        tau = percentile_threshold(scores, theta)
        selected, _ = select(pseudos, tau, self._tasks(ids), theta=theta)
        assert len(selected) == math.ceil((theta / 100) * len(scores))


class TestSelectionEfficacy:
    """Oracle lab: wrong answers scripted to carry strictly higher mean NLL
    plus bounded independent noise; filtering must concentrate correctness."""

    N = 10_000

    def _scripted_pool(self, correct_rate=0.75, seed=13):
        rng = random.Random(seed)
        ids = [f"t-{i:05d}" for i in range(self.N)]
        tasks = Dataset(tuple(make_mc_record(i) for i in ids), provenance="lab")
        pseudos = []
        truth = {}
        for task_id in ids:
            is_correct = rng.random() < correct_rate
            truth[task_id] = is_correct
            base_nll = 0.4 if is_correct else 1.0
            score = base_nll + rng.uniform(0.0, 0.3)
            pseudos.append(make_pseudo(task_id, answer="B", score=score))
        return tasks, pseudos, truth

    def test_kept_accuracy_beats_dropped_with_significance(self):
        tasks, pseudos, truth = self._scripted_pool()
        tau = percentile_threshold([p.entropy for p in pseudos], 50)
        _, report = select(pseudos, tau, tasks, theta=50)
        kept = [truth[i] for i in report.kept_ids]
        dropped = [truth[i] for i in report.dropped_ids]
        acc_kept = sum(kept) / len(kept)
        acc_dropped = sum(dropped) / len(dropped)
        # two-proportion z-test
        pooled = (sum(kept) + sum(dropped)) / (len(kept) + len(dropped))
        z = (acc_kept - acc_dropped) / math.sqrt(
            pooled * (1 - pooled) * (1 / len(kept) + 1 / len(dropped))
        )
        assert acc_kept > acc_dropped
        assert z > 3.0
