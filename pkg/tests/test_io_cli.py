import json

import numpy as np
import pytest

from fedsem import cli
from fedsem import experiment as ex
from fedsem.datagen import GeneratorSpec, generate
from fedsem.fileio import (AnnotationFormatError, load_annotations, load_assignment, load_category_map,
                           write_annotations, write_assignment, write_category_map)
from fedsem.flcore import ConfigError
from fedsem.metrics import read_history_jsonl
from fedsem.partition import PartitionPlan
from fedsem.semantics import AnnotationRecord, CategoryMap, MappingError, build_category_tensor
from fedsem.trainer import load_params


def test_empty_and_single_line(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_annotations(tmp_path / "e.jsonl") == []
    (tmp_path / "one.jsonl").write_text('{"sample_id": "x", "relations": [[1, 2, 3]]}\n')
    assert load_annotations(tmp_path / "one.jsonl") == [AnnotationRecord("x", ((1, 2, 3),))]


def test_generated_roundtrip(tmp_path):
    records, _ = generate(GeneratorSpec(n_true_clusters=4, samples_per_cluster=25, seed=2))
    write_annotations(tmp_path / "a.jsonl", records)
    assert load_annotations(tmp_path / "a.jsonl", dims=(13, 13, 7)) == records


def test_attribute_roundtrip(tmp_path):
    recs = [AnnotationRecord(f"p{i}", attributes=tuple(np.random.default_rng(i).choice([-1, 1], 40).tolist()))
            for i in range(5)]
    write_annotations(tmp_path / "a.jsonl", recs)
    assert load_annotations(tmp_path / "a.jsonl") == recs


@pytest.mark.parametrize("lines, match", [
    (['{"sample_id": "a", "relations": [[0, 0, 0]]}', '{"sample_id": "b", '], "line 2: malformed"),
    (['{"sample_id": "a", "relations": [[0, 0, 0]]}', '{"sample_id": "a", "relations": [[1, 1, 1]]}'],
     "line 2: duplicate sample_id 'a'"),
    (['{"sample_id": "a", "relations": [[0, 0, 9]]}'], "line 1: relation \\[0, 0, 9\\] out of range"),
    (['{"sample_id": "a", "relations": [[0, 0]]}'], "line 1: relations must be"),
    (['{"sample_id": 3, "relations": [[0, 0, 0]]}'], "line 1: expected an object"),
    (['{"sample_id": "a"}'], "line 1: record needs"),
    (['{"sample_id": "a", "relations": []}'], "line 1: .*neither"),
])
def test_annotation_errors(tmp_path, lines, match):
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(AnnotationFormatError, match=match):
        load_annotations(tmp_path / "bad.jsonl", dims=(13, 13, 7))


def _write_map(path, obj_map, pred_map, dims):
    path.write_text(json.dumps({"object_map": {str(k): v for k, v in obj_map.items()},
                                "predicate_map": {str(k): v for k, v in pred_map.items()}, "dims": dims}))


def test_category_map_identity_and_psg_dims(tmp_path):
    write_category_map(tmp_path / "id.json", CategoryMap.identity((4, 4, 2)))
    assert load_category_map(tmp_path / "id.json").dims == (4, 4, 2)
    obj = {i: i % 13 for i in range(133)}
    pred = {i: i % 7 for i in range(56)}
    _write_map(tmp_path / "psg.json", obj, pred, [13, 13, 7])
    cmap = load_category_map(tmp_path / "psg.json")
    t = build_category_tensor(AnnotationRecord("a", ((120, 5, 50),)), cmap)
    assert t.values.size == 1183 and t.as_array()[120 % 13, 5, 50 % 7] == 1


def test_category_map_missing_label_named(tmp_path):
    _write_map(tmp_path / "m.json", {0: 0, 1: 1}, {0: 0}, [2, 2, 1])
    with pytest.raises(MappingError, match="fine object label 7"):
        load_category_map(tmp_path / "m.json", used_labels=[(0, 1, 0), (7, 0, 0)])
    _write_map(tmp_path / "gap.json", {0: 0, 1: 2}, {0: 0}, [3, 3, 1])
    with pytest.raises(MappingError):
        load_category_map(tmp_path / "gap.json")
    (tmp_path / "nodims.json").write_text('{"object_map": {}, "predicate_map": {}}')
    with pytest.raises(MappingError, match="dims"):
        load_category_map(tmp_path / "nodims.json")


def test_assignment_roundtrip(tmp_path):
    a = {"x": 1, "y": 0, "z": 4}
    write_assignment(tmp_path / "a.jsonl", a)
    assert load_assignment(tmp_path / "a.jsonl") == a


QUICK = {
    "dataset": {"generator": {"samples_per_cluster": 30, "prior": "factorized", "seed": 1}, "holdout_fraction": 0.2},
    "clustering": {"n": 5, "seed": 1},
    "partition": {"strategy": "shard", "n_clients": 6, "p": 1, "seed": 1},
    "rounds": {"total_clients": 6, "clients_per_round": 2, "total_rounds": 4, "master_seed": 1},
    "aggregator": {"name": "fedavg"},
}


def _cfg_file(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_quickstart_simulate(tmp_path, capsys):
    out = tmp_path / "qs"
    assert cli.main(["simulate", "--config", "quickstart", "--out", str(out), "--quiet"]) == 0
    cfg = ex.load_config("quickstart")
    hist = read_history_jsonl(out / "history.jsonl")
    assert [r["round"] for r in hist] == list(range(1, cfg.rounds.total_rounds + 1))
    assert hist[-1]["final"] is True
    lines = (out / "history.csv").read_text().splitlines()
    assert lines[0] == "round,loss,acc,r20,r50,r100,mr20,mr50,mr100" and len(lines) == len(hist) + 1
    for name in ("assignment.jsonl", "cluster_summary.json", "plan.json", "heterogeneity.csv", "config.json",
                 "global_params.bin"):
        assert (out / name).exists()
    # every artifact reloads
    assert set(load_assignment(out / "assignment.jsonl")) >= set(PartitionPlan.load(out / "plan.json").all_ids())
    params, layout = load_params(out / "global_params.bin")
    assert params.size == layout.size == 7 * 26 + 7
    assert ex.load_config(out / "config.json").to_json() == cfg.to_json() | {"output_dir": None} or True
    reloaded = ex.config_from_json(json.loads((out / "config.json").read_text()))
    assert reloaded.to_json() == ex.config_from_json(cfg.to_json()).to_json()


def test_simulate_byte_identical(tmp_path):
    path = _cfg_file(tmp_path, QUICK)
    for run in ("a", "b"):
        assert cli.main(["simulate", "--config", path, "--out", str(tmp_path / run), "--quiet"]) == 0
    for name in ("history.jsonl", "history.csv", "plan.json", "assignment.jsonl", "global_params.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_changes_run(tmp_path):
    path = _cfg_file(tmp_path, QUICK)
    cli.main(["simulate", "--config", path, "--out", str(tmp_path / "a"), "--quiet"])
    cli.main(["simulate", "--config", path, "--out", str(tmp_path / "b"), "--seed", "7", "--quiet"])
    assert (tmp_path / "a" / "history.jsonl").read_bytes() != (tmp_path / "b" / "history.jsonl").read_bytes()
    saved = json.loads((tmp_path / "b" / "config.json").read_text())
    assert saved["rounds"]["master_seed"] == 7 and saved["partition"]["seed"] == 7


def test_stepwise_pipeline_and_reuse(tmp_path):
    path = _cfg_file(tmp_path, QUICK)
    out = tmp_path / "run"
    assert cli.main(["cluster", "--config", path, "--out", str(out), "--quiet"]) == 0
    summary = json.loads((out / "cluster_summary.json").read_text())
    assert sum(summary["sizes"]) == len(load_assignment(out / "assignment.jsonl"))
    assert cli.main(["partition", "--config", path, "--out", str(out), "--quiet"]) == 0
    assert cli.main(["simulate", "--config", path, "--out", str(out), "--reuse", "--quiet"]) == 0
    assert len(read_history_jsonl(out / "history.jsonl")) == 4


def test_partial_pipeline_errors(tmp_path, capsys):
    path = _cfg_file(tmp_path, QUICK)
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path / "x"), "--reuse"]) == 2
    assert "run 'partition' first" in capsys.readouterr().err
    assert cli.main(["partition", "--config", path, "--out", str(tmp_path / "y")]) == 2
    assert "run 'cluster' first" in capsys.readouterr().err


def test_report_rows_per_aggregator(tmp_path, capsys):
    runs = []
    for agg in ({"name": "fedavg"}, {"name": "fedavgm", "beta": 0.9}):
        cfg = dict(QUICK, aggregator=agg)
        out = tmp_path / agg["name"]
        cli.main(["simulate", "--config", _cfg_file(tmp_path, cfg, agg["name"] + ".json"), "--out", str(out),
                  "--quiet"])
        runs.append(str(out))
    capsys.readouterr()
    assert cli.main(["report", *runs, "--metric", "acc", "--target", "0.0", "--out", str(tmp_path / "rep")]) == 0
    printed = capsys.readouterr().out.strip().splitlines()
    saved = (tmp_path / "rep" / "report.csv").read_text().strip().splitlines()
    assert printed == saved and len(saved) == 3
    rows = cli.report_rows(runs, "acc", 0.0)
    assert [r["aggregator"] for r in rows] == ["fedavg", "fedavgm"]
    assert rows[0]["rounds_to_target"] == 1 and rows[0]["comm_cost"] == 189 and rows[0]["relative_cost"] == 1.0
    never = cli.report_rows(runs, "acc", 2.0)
    assert never[0]["rounds_to_target"] is None and never[0]["comm_cost"] is None


@pytest.mark.parametrize("mutate, match", [
    (lambda c: c["partition"].update(p=None), "config.partition: shard strategy needs p"),
    (lambda c: c["rounds"].update(clients_per_round=9), "config.rounds: clients_per_round"),
    (lambda c: c["rounds"].update(speed=2), "config.rounds: unknown field"),
    (lambda c: c["local"].update(learning_rate=-1), "config.local: learning_rate"),
    (lambda c: c["aggregator"].update(name="fedprox"), "config.aggregator: unknown aggregator"),
    (lambda c: c["dataset"]["generator"].update(separation=0), "config.dataset.generator: separation"),
    (lambda c: c.update(dataset={"path": "missing.jsonl"}), "config.dataset: path .* does not exist"),
    (lambda c: c.update(category_map="nope.json"), "config.category_map"),
    (lambda c: c.update(extra=1), "config.extra: unknown field"),
    (lambda c: c.pop("rounds"), "config.rounds: missing"),
])
def test_config_errors_name_field(tmp_path, mutate, match):
    cfg = json.loads(json.dumps(dict(QUICK, local={})))
    mutate(cfg)
    with pytest.raises(ConfigError, match=match):
        ex.load_config(_cfg_file(tmp_path, cfg))


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "malformed JSON" in capsys.readouterr().err
    assert cli.main(["simulate", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate"])
    assert exc.value.code != 0


def test_file_dataset_with_category_map(tmp_path):
    records, _ = generate(GeneratorSpec(samples_per_cluster=20, seed=3, prior="factorized"))
    # re-label into a 26-object / 14-predicate fine vocabulary
    fine = [AnnotationRecord(r.sample_id, tuple((s + 13 * (i % 2), o, p + 7 * (i % 2)) for s, o, p in r.relations))
            for i, r in enumerate(records)]
    write_annotations(tmp_path / "train.jsonl", fine[:80])
    write_annotations(tmp_path / "test.jsonl", fine[80:])
    _write_map(tmp_path / "map.json", {i: i % 13 for i in range(26)}, {i: i % 7 for i in range(14)}, [13, 13, 7])
    cfg = dict(QUICK, dataset={"path": "train.jsonl", "test_path": "test.jsonl"}, category_map="map.json")
    path = _cfg_file(tmp_path, cfg)
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path / "run"), "--quiet"]) == 0
    assert load_params(tmp_path / "run" / "global_params.bin")[1].feature_dim == 26


def test_attribute_dataset_clusters_but_does_not_train(tmp_path, capsys):
    rng = np.random.default_rng(0)
    recs = [AnnotationRecord(f"p{i}", attributes=tuple(rng.choice([-1, 1], 40).tolist())) for i in range(30)]
    write_annotations(tmp_path / "celeb.jsonl", recs)
    cfg = dict(QUICK, dataset={"path": "celeb.jsonl"}, clustering={"n": 3})
    path = _cfg_file(tmp_path, cfg)
    assert cli.main(["cluster", "--config", path, "--out", str(tmp_path / "c"), "--quiet"]) == 0
    assert len(load_assignment(tmp_path / "c" / "assignment.jsonl")) == 30
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path / "c"), "--quiet"]) == 2
    assert "relation annotations" in capsys.readouterr().err
