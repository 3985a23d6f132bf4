import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualvcr.document import Action, Operation, OpType
from dualvcr.evaluation import (
    EmptyOutcomes,
    EvalReport,
    GroundTruthRanker,
    Pipeline,
    StepOutcome,
    element_accuracy,
    evaluate,
    format_comparison,
    format_report,
    operation_f1,
    recall_at_k,
    step_op_f1,
    step_success_rate,
    token_f1,
)
from dualvcr.predictor import GroundTruthChooser, OracleOpHead

DATA = Path(__file__).parent / "data"
CLICK = Operation(OpType.CLICK)


def act(eid, op=OpType.CLICK, arg=None):
    return Action(eid, Operation(op, arg))


def golden_outcomes():
    ranked = tuple(f"x{i}" for i in range(8))
    return [
        # right element, right op
        StepOutcome("t1", 0, ("a",) + ranked, act("a"), act("a")),
        # right element, TYPE argument missing two of five words: p = 1, r = 2/3, F1 = 0.8
        StepOutcome("t1", 1, ("q", "b") + ranked, act("b", OpType.TYPE, "new york city"), act("b", OpType.TYPE, "new york city center now")),
        # ground truth only at rank 9, nothing predicted
        StepOutcome("t2", 0, ranked + ("z",), None, act("z")),
    ]


def test_golden_report():
    got = EvalReport.from_outcomes(golden_outcomes())
    assert got == EvalReport.from_json((DATA / "report_golden.json").read_text())


def test_recall_example():
    gt = act("g")
    outs = [StepOutcome("t", i, r, None, gt) for i, r in enumerate([("g",), ("a", "b", "c", "d", "g"), ("a", "b", "c", "d", "e", "g"), ("a", "g")])]
    assert recall_at_k(outs, 5) == 0.75
    assert recall_at_k(outs, 1) == 0.25
    with pytest.raises(ValueError):
        recall_at_k(outs, 0)


def test_element_accuracy_two_of_five():
    outs = [StepOutcome("t", i, (), act("g" if i < 2 else "w"), act("g")) for i in range(5)]
    assert element_accuracy(outs) == 0.4


@pytest.mark.parametrize(
    "pred, gold, f1",
    [
        (act("a"), act("a"), 1.0),
        (act("a", OpType.TYPE, "new york"), act("a", OpType.TYPE, "new york"), 1.0),
        (act("a", OpType.TYPE, "new york city"), act("a", OpType.TYPE, "new york city center now"), 0.8),
        (act("a"), act("a", OpType.TYPE, "x"), 0.0),  # op tokens differ, no overlap
        (act("a", OpType.SELECT, "x"), act("a", OpType.TYPE, "x"), 0.5),
        (act("a", OpType.TYPE, "boston"), act("a"), 0.0),
        (None, act("a"), 0.0),
    ],
)
def test_op_f1_cases(pred, gold, f1):
    assert step_op_f1(StepOutcome("t", 0, (), pred, gold)) == pytest.approx(f1, abs=1e-15)


def test_token_f1_multiset():
    assert token_f1(["a", "a"], ["a"]) == pytest.approx(2 / 3)
    assert token_f1([], []) == 1.0 and token_f1(["a"], []) == 0.0


def test_step_success_cases():
    gold = act("a", OpType.TYPE, "new york")
    cases = [
        (act("a", OpType.TYPE, "new york"), 1.0),
        (act("b", OpType.TYPE, "new york"), 0.0),  # right op, wrong element
        (act("a", OpType.TYPE, "new"), 0.0),  # right element, partial op
        (None, 0.0),
    ]
    for pred, sr in cases:
        assert step_success_rate([StepOutcome("t", 0, (), pred, gold)]) == sr


def test_empty_outcomes_rejected():
    for fn in (element_accuracy, operation_f1, step_success_rate, lambda o: recall_at_k(o, 1), EvalReport.from_outcomes):
        with pytest.raises(EmptyOutcomes):
            fn([])


def test_duplicate_ranked_ids_rejected():
    with pytest.raises(ValueError):
        StepOutcome("t", 0, ("a", "a"), None, act("a"))


ids = st.sampled_from(list("abcdefgh"))
ops = st.sampled_from([None, "a b", "c", "a a c"])


@st.composite
def outcome(draw):
    ranked = tuple(draw(st.permutations(list("abcdefgh")))[: draw(st.integers(0, 8))])
    gold_arg = draw(ops)
    gold = act(draw(ids), OpType.TYPE if gold_arg else OpType.CLICK, gold_arg)
    if draw(st.booleans()):
        pred_arg = draw(ops)
        pred = act(draw(ids), OpType.TYPE if pred_arg else OpType.CLICK, pred_arg)
    else:
        pred = None
    return StepOutcome(draw(st.sampled_from(["t1", "t2", "t3"])), draw(st.integers(0, 3)), ranked, pred, gold)


@settings(max_examples=300, deadline=None)
@given(st.lists(outcome(), min_size=1, max_size=20), st.randoms(use_true_random=False))
def test_metric_properties(outs, rnd):
    rec = [recall_at_k(outs, k) for k in range(1, 10)]
    assert rec == sorted(rec)
    exact_op = sum(step_op_f1(o) == 1.0 for o in outs) / len(outs)
    assert step_success_rate(outs) <= min(element_accuracy(outs), exact_op) + 1e-15
    shuffled = list(outs)
    rnd.shuffle(shuffled)
    assert EvalReport.from_outcomes(shuffled) == EvalReport.from_outcomes(outs)
    r = EvalReport.from_outcomes(outs)
    assert all(0.0 <= v <= 1.0 for v in [*r.recall_at.values(), r.element_accuracy, r.operation_f1, r.step_success_rate])


def test_json_round_trip_fixed_keys():
    r = EvalReport.from_outcomes(golden_outcomes())
    text = r.to_json()
    assert list(json.loads(text)) == ["recall_at", "element_accuracy", "operation_f1", "step_success_rate", "steps", "tasks"]
    assert EvalReport.from_json(text) == r
    with pytest.raises(ValueError):
        EvalReport.from_json(json.dumps({"steps": 1}))


def test_format_report_and_comparison():
    r = EvalReport.from_outcomes(golden_outcomes())
    text = format_report(r, "golden")
    assert text.splitlines()[0] == "golden"
    assert "Op. F1 60.00" in [" ".join(ln.split()) for ln in text.splitlines()]
    cmp = format_comparison(r, r, ("a", "b"))
    assert cmp.splitlines()[-1].split()[-1] == "+0.00"


def test_oracle_pipeline_scores_one(small_synth):
    r = evaluate(small_synth.test, Pipeline(GroundTruthRanker(), GroundTruthChooser(), OracleOpHead()))
    assert r.element_accuracy == r.operation_f1 == r.step_success_rate == 1.0
    assert all(v == 1.0 for v in r.recall_at.values())


def test_abstaining_pipeline_scores_zero(small_synth):
    class Never:
        def choose(self, instruction, history_text, snippet):
            return None

    r = evaluate(small_synth.test, Pipeline(GroundTruthRanker(), Never(), OracleOpHead()))
    assert r.element_accuracy == r.operation_f1 == r.step_success_rate == 0.0
