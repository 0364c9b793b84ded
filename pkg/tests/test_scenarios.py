import json

import pytest

from intentflow.cli import main
from intentflow.lm_gateway import UnscriptedPrompt
from intentflow.scenario import NoLearningPair, ScenarioError, load_scenario, replay_learning, run_scenario

from conftest import SCENARIOS

NAMES = ["fig2-preference-recall", "fig3-high-urgency", "fig4-low-urgency", "learning-loop"]


def path(name):
    return SCENARIOS / f"{name}.json"


def variant(tmp_path, name, edit_scenario=None, edit_fixture=None):
    """Copy a bundled scenario into tmp_path, optionally editing either file."""
    scenario = json.loads(path(name).read_text())
    fixture = json.loads((SCENARIOS / scenario["backend_fixture"]).read_text())
    if edit_scenario:
        edit_scenario(scenario)
    if edit_fixture:
        edit_fixture(fixture)
    (tmp_path / scenario["backend_fixture"]).write_text(json.dumps(fixture))
    out = tmp_path / f"{name}.json"
    out.write_text(json.dumps(scenario))
    return out


@pytest.mark.parametrize("name", NAMES)
def test_ledger_matches_expected_calls(name):
    report = run_scenario(path(name))
    expected = load_scenario(path(name)).expected_calls
    assert report.data["ledger"]["counts"] == expected
    assert report.data["ledger"]["total"] == sum(expected.values())
    assert report.data["pending"] == [] and report.data["expired"] == []


def test_high_urgency_scenario():
    data = run_scenario(path("fig3-high-urgency")).data
    [item] = data["intents"]
    assert (item["urgency"], item["lm_call_count"], item["hierarchy_depth"]) == ("high", 2, 2)
    assert [(c["room"], c["field"]) for c in item["commands"]] == [("PK253", "booking"), ("PK253", "temperature")]
    [event] = data["monitoring"]["events"]
    assert (event["action"], event["magnitude"]) == ("decrease", 2.0)


def test_low_urgency_scenario():
    item = run_scenario(path("fig4-low-urgency")).data["intents"][0]
    assert item["pareto_front"] == ["S2", "S3"] and item["selected"] == "S2"
    assert item["best_similarity"] == pytest.approx(0.813125)


def test_preference_recall_scenario():
    items = {i["id"]: i for i in run_scenario(path("fig2-preference-recall")).data["intents"]}
    assert items["meet-1600"]["preference_source"] == "recalled"
    assert items["meet-1600"]["recalled_case"] == "meet-1500"
    assert items["meet-1600"]["preferences"] == items["meet-1500"]["preferences"]


def test_replay_learning_gain():
    replay = replay_learning(path("learning-loop"))
    assert replay.before["hints"] == [] and replay.after["hints"]
    assert replay.best_similarity_before == pytest.approx(0.70014)
    assert replay.best_similarity_after == pytest.approx(0.792118)
    assert replay.similarity_gain >= 0.05


def test_identical_intent_recalls_at_similarity_one(tmp_path):
    def same_text(s):
        s["intents"][1]["text"] = s["intents"][0]["text"]
    replay = replay_learning(variant(tmp_path, "learning-loop", same_text))
    assert replay.after["hint_similarity"] == pytest.approx(1.0)


def test_dissimilar_intents_have_no_learning_pair(tmp_path):
    def unrelated(s):
        s["intents"][1]["text"] = "Order lunch for the visiting delegation at 17:00"

    def unhinted(f):
        for e in list(f["responses"]):
            if e["key"].endswith("+hints"):
                f["responses"].append({**e, "key": e["key"][: -len("+hints")]})
    scenario = variant(tmp_path, "learning-loop", unrelated, unhinted)
    with pytest.raises(NoLearningPair):
        replay_learning(scenario)


def test_missing_fixture_entry_is_reported(tmp_path):
    def drop_eval(f):
        f["responses"] = [e for e in f["responses"] if e["role"] != "evaluator"]
    with pytest.raises(UnscriptedPrompt, match="evaluator/"):
        run_scenario(variant(tmp_path, "fig4-low-urgency", edit_fixture=drop_eval))


def test_malformed_scenario_names_line(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "format": "intentflow-scenario/1",\n  "name": oops\n}\n')
    with pytest.raises(ScenarioError, match=r"bad\.json:3:"):
        load_scenario(bad)
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"format": "something-else/2"}))
    with pytest.raises(ScenarioError):
        load_scenario(wrong)


def test_reports_are_byte_identical(tmp_path):
    a = run_scenario(path("fig4-low-urgency")).write(tmp_path / "a")
    b = run_scenario(path("fig4-low-urgency")).write(tmp_path / "b")
    for name in ("report.txt", "dispatch.log", "monitor.log", "pareto.tsv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


# -- CLI -------------------------------------------------------------------------------

def test_cli_run_and_report(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", str(path("fig3-high-urgency")), "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"report.txt", "dispatch.log", "monitor.log", "pareto.tsv"}
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert "meeting-1500: urgency=high" in capsys.readouterr().out


def test_cli_replay_learning(tmp_path, capsys):
    out = tmp_path / "learn"
    assert main(["replay-learning", str(path("learning-loop")), "--out", str(out)]) == 0
    summary = json.loads((out / "learning.txt").read_text())
    assert summary["relative_gain"] == pytest.approx(0.131371)
    assert json.loads(capsys.readouterr().out) == summary


def test_cli_overrides(tmp_path):
    out = tmp_path / "s7"
    assert main(["run", str(path("fig3-high-urgency")), "--out", str(out), "--seed", "7"]) == 0
    assert json.loads((out / "report.txt").read_text())["campus_seed"] == 7
    # A larger urgency threshold routes the low-urgency intent to the unscripted high path.
    assert main(["run", str(path("fig4-low-urgency")), "--out", str(tmp_path / "x"), "--theta1", "30000"]) == 2


def test_cli_errors(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    assert "error:" in capsys.readouterr().err
    with pytest.raises(NoLearningPair):
        replay_learning(path("fig3-high-urgency"))
    assert main(["replay-learning", str(path("fig3-high-urgency"))]) == 2
