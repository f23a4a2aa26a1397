import csv
import json

import pytest
import yaml

from masattrib.cli import main

from stub_server import StubServer, completion


def additive_doc(**extra):
    doc = {
        "game": {
            "agents": ["a", "b", "c"],
            "topology": {"kind": "decentralized"},
            "synthetic": {"family": "additive", "profile": [
                {"skill": 0.3, "substitute_skill": 0.1, "token_cost": 10},
                {"skill": 0.2, "substitute_skill": 0.1, "token_cost": 20},
                {"skill": 0.5, "substitute_skill": 0.1, "token_cost": 30}]},
        },
        "protocol": "ablation",
        "kernel": {"kind": "loo"},
        "seeds": [0],
    }
    doc.update(extra)
    return doc


def orchestrated_doc(protocol="ablation", **extra):
    profile = [{"skill": 0.1, "substitute_skill": 0.05, "token_cost": 300}] + [
        {"skill": 0.2, "substitute_skill": 0.1, "token_cost": 50 + i} for i in range(3)]
    doc = {
        "game": {"agents": ["orchestrator", "w1", "w2", "w3"],
                 "topology": {"kind": "centralized", "hub": "orchestrator"},
                 "synthetic": {"family": "orchestrated", "bonus": 0.3, "profile": profile}},
        "protocol": protocol,
        "kernel": {"kind": "shapley_exact"},
        "seeds": [0, 1],
    }
    doc.update(extra)
    return doc


def write(tmp_path, doc, name="q.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def invoke(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    stats = json.loads(out.strip().splitlines()[-1]) if code == 0 else None
    return code, stats, err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_attribute_writes_reports(tmp_path, capsys):
    cfg = write(tmp_path, additive_doc())
    code, stats, _ = invoke(capsys, "attribute", "--config", cfg, "--out", str(tmp_path / "r"))
    assert code == 0
    out = tmp_path / "r" / stats["query_digest"]
    rows = read_csv(out / "attribution.csv")
    assert [r["agent"] for r in rows] == ["a", "b", "c"]
    assert [float(r["score"]) for r in rows] == pytest.approx([0.3, 0.2, 0.5])
    assert [r["rank"] for r in rows] == ["2", "3", "1"]
    report = json.loads((out / "attribution.json").read_text())
    assert report["result"]["coalition_evaluations"] == 4
    assert report["cost_summary"] == {"tokens": 60 + 40 + 50 + 30, "cost": 0.0}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["files"] == ["attribution.csv", "attribution.json", "manifest.json"]
    assert manifest["effective_config"]["kernel"]["kind"] == "loo"
    assert stats["evaluator_calls"] == 4


def test_warm_rerun_is_byte_identical(tmp_path, capsys):
    cfg = write(tmp_path, orchestrated_doc())
    args = ["attribute", "--config", cfg, "--out", str(tmp_path / "r"), "--cache", str(tmp_path / "c.log")]
    code, cold, _ = invoke(capsys, *args)
    out = tmp_path / "r" / cold["query_digest"]
    snapshot = {p.name: p.read_bytes() for p in out.iterdir()}
    code2, warm, _ = invoke(capsys, *args)
    assert code == code2 == 0
    assert cold["evaluator_calls"] > 0 and warm["evaluator_calls"] == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == snapshot


def test_jobs_do_not_change_results(tmp_path, capsys):
    cfg = write(tmp_path, orchestrated_doc())
    _, a, _ = invoke(capsys, "attribute", "--config", cfg, "--out", str(tmp_path / "a"))
    _, b, _ = invoke(capsys, "attribute", "--config", cfg, "--out", str(tmp_path / "b"), "--jobs", "4")
    read = lambda root, s: (root / s["query_digest"] / "attribution.csv").read_bytes()  # noqa: E731
    assert read(tmp_path / "a", a) == read(tmp_path / "b", b)


def test_seed_override_changes_query(tmp_path, capsys):
    cfg = write(tmp_path, orchestrated_doc())
    _, a, _ = invoke(capsys, "attribute", "--config", cfg, "--out", str(tmp_path))
    _, b, _ = invoke(capsys, "attribute", "--config", cfg, "--out", str(tmp_path), "--seed-override", "4,5,6")
    assert a["query_digest"] != b["query_digest"]
    manifest = json.loads((tmp_path / b["query_digest"] / "manifest.json").read_text())
    assert manifest["seeds"]["evaluation"] == [4, 5, 6]
    code, _, err = invoke(capsys, "attribute", "--config", cfg, "--seed-override", "x")
    assert code == 2 and "--seed-override" in err


def test_myerson_without_graph_is_a_config_error(tmp_path, capsys):
    cfg = write(tmp_path, additive_doc(kernel={"kind": "myerson"}))
    code, _, err = invoke(capsys, "attribute", "--config", cfg)
    assert code == 2 and "`kernel.graph`" in err


@pytest.mark.parametrize("doc, field", [
    (additive_doc(kernel={"kind": "owen"}), "kernel.groups"),
    (additive_doc(kernel={"kind": "shapley_sampled", "budget": 0}), "kernel.budget"),
    (additive_doc(colour="red"), "colour"),
    (additive_doc(protocol={"kind": "introspective", "judge": {"constant": 1, "endpoint": {}}}), "protocol.judge"),
    (additive_doc(protocol={"kind": "introspective", "judge": {"model": "gpt", "endpoint": {"base_url": "http://x"}}}),
     "pricing"),
    (additive_doc(kernel={"kind": "owen", "groups": [["a"], ["b"]]}), "kernel.groups"),
])
def test_config_errors_name_the_field(tmp_path, capsys, doc, field):
    code, _, err = invoke(capsys, "attribute", "--config", write(tmp_path, doc))
    assert code == 2 and f"`{field}" in err


def test_missing_config_file(tmp_path, capsys):
    code, _, err = invoke(capsys, "attribute", "--config", str(tmp_path / "nope.yaml"))
    assert code == 2


def test_skip_with_error_policy_exits_3(tmp_path, capsys):
    cfg = write(tmp_path, orchestrated_doc(executability={"mode": "skip_with_error"}))
    code, _, err = invoke(capsys, "attribute", "--config", cfg)
    assert code == 3 and "evaluation error" in err


def test_delete_curve_under_ablation_collapses(tmp_path, capsys):
    cfg = write(tmp_path, orchestrated_doc())
    code, stats, _ = invoke(capsys, "delete-curve", "--config", cfg, "--out", str(tmp_path), "--k-max", "4")
    assert code == 0
    out = tmp_path / stats["query_digest"]
    rows = read_csv(out / "curve.csv")
    assert [r["k"] for r in rows] == ["0", "1", "2", "3", "4"]
    curve = json.loads((out / "curve.json").read_text())
    hub_step = curve["order"].index(0) + 1
    assert float(rows[hub_step]["utility"]) == 0.0


def test_delete_curve_under_replacement_bills_less(tmp_path, capsys):
    doc = orchestrated_doc({"kind": "replacement", "substitute": "small"})
    doc["game"]["empty_value"] = "evaluate"
    code, stats, _ = invoke(capsys, "delete-curve", "--config", write(tmp_path, doc), "--out", str(tmp_path))
    rows = read_csv(tmp_path / stats["query_digest"] / "curve.csv")
    assert all(float(r["utility"]) > 0 for r in rows)
    tokens = [int(r["tokens"]) for r in rows]
    assert all(a > b for a, b in zip(tokens, tokens[1:]))


def test_delete_curve_k_max_out_of_range(tmp_path, capsys):
    cfg = write(tmp_path, orchestrated_doc())
    assert invoke(capsys, "delete-curve", "--config", cfg, "--k-max", "5")[0] == 2
    assert invoke(capsys, "delete-curve", "--config", cfg, "--k-max", "-1")[0] == 2


def test_compare_protocol_with_itself(tmp_path, capsys):
    cfg = write(tmp_path, additive_doc(compare={"protocols": ["ablation", "ablation"]}))
    code, stats, _ = invoke(capsys, "compare-protocols", "--config", cfg, "--out", str(tmp_path))
    assert code == 0
    rep = json.loads((tmp_path / stats["query_digest"] / "agreement.json").read_text())
    assert rep["agreement"]["r_squared"] == 1.0 and rep["agreement"]["spearman_rho"] == 1.0
    assert rep["flags"] == [] and len(rep["coalitions"]) == 4
    assert [row["normalized_entropy"] for row in rep["entropy"]][0] == pytest.approx(
        rep["entropy"][1]["normalized_entropy"])


def test_compare_constant_judge_is_flagged(tmp_path, capsys):
    doc = additive_doc(compare={"protocols": ["ablation", {"kind": "introspective", "judge": {"constant": 1}}]},
                       kernel={"kind": "shapley_exact"})
    code, stats, _ = invoke(capsys, "compare-protocols", "--config", write(tmp_path, doc), "--out", str(tmp_path))
    assert code == 0
    rep = json.loads((tmp_path / stats["query_digest"] / "agreement.json").read_text())
    assert rep["agreement"]["r_squared"] < 0
    assert "r_squared_negative" in rep["flags"] and "spearman_undefined" in rep["flags"]
    assert len(rep["coalitions"]) == 7


def test_compare_needs_two_protocols(tmp_path, capsys):
    cfg = write(tmp_path, additive_doc(compare={"protocols": ["ablation"]}))
    code, _, err = invoke(capsys, "compare-protocols", "--config", cfg)
    assert code == 2 and "compare.protocols" in err
    code, _, err = invoke(capsys, "compare-protocols", "--config", write(tmp_path, additive_doc(), "p.yaml"))
    assert code == 2


def test_introspective_run_against_stub_endpoint(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("STUB_KEY", "k")
    transcripts = {"task0": {"a": "x", "b": "y", "c": "z"}}
    (tmp_path / "tr.json").write_text(json.dumps(transcripts))
    reply = json.dumps({"success": 1, "reasoning": "fine"})
    with StubServer([completion(reply, 100, 20)]) as srv:
        doc = {
            "game": {"agents": ["a", "b", "c"], "topology": {"kind": "decentralized"}},
            "protocol": {"kind": "introspective",
                         "judge": {"model": "stub-model", "transcripts": "tr.json",
                                   "endpoint": {"base_url": srv.base_url, "api_key_env": "STUB_KEY"}}},
            "pricing": {"stub-model": {"prompt": 0.5, "completion": 1.0}},
            "kernel": {"kind": "loo"},
            "seeds": [0],
        }
        code, stats, err = invoke(capsys, "attribute", "--config", write(tmp_path, doc), "--out", str(tmp_path))
    assert code == 0, err
    assert len(srv.requests) == 4
    report = json.loads((tmp_path / stats["query_digest"] / "attribution.json").read_text())
    assert report["result"]["scores"] == [0.0, 0.0, 0.0]
    assert report["cost_summary"]["tokens"] == 4 * 120
    assert report["cost_summary"]["cost"] == pytest.approx(4 * (100 * 0.5 + 20 * 1.0) / 1000)


def test_ablation_needs_runnable_game(tmp_path, capsys):
    doc = {"game": {"agents": ["a", "b"], "topology": {"kind": "decentralized"}}, "protocol": "ablation"}
    code, _, err = invoke(capsys, "attribute", "--config", write(tmp_path, doc))
    assert code == 2 and "game.synthetic" in err
