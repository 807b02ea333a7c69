import csv
import io
import json

import pytest

from nnsplit.cli import main
from nnsplit.modelgraph import dumps_profile, load_profile, profile

from conftest import chain_graph


@pytest.fixture
def out(tmp_path, monkeypatch):
    root = tmp_path / "out"
    monkeypatch.setenv("NNSPLIT_OUT", str(root))
    return root


def scenario(tmp_path, **kw):
    data = {"profile_ref": "fixture:convtasnet", "delta": 2, "hops": 5, "name": "demo", **kw}
    path = tmp_path / f"{data['name']}.json"
    path.write_text(json.dumps(data))
    return path


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_profile_fixture(tmp_path, capsys):
    path = tmp_path / "p.json"
    assert main(["profile", "--fixture", "convtasnet", "-o", str(path)]) == 0
    assert "separation_share=98.764%" in capsys.readouterr().err
    assert profile(load_profile(path)).total_params == 662_552


def test_profile_toy(capsys):
    assert main(["profile", "--toy", "C=2,N=4,L=4,S=8,T=64"]) == 0
    assert len(json.loads(capsys.readouterr().out)["layers"]) == 12


def test_profile_invalid_config(capsys):
    assert main(["profile", "--toy", "C=2,L=3"]) == 2
    err = capsys.readouterr().err
    assert "kernel" in err


@pytest.mark.parametrize("hops,delta,server", [(5, 2, 1), (3, 4, 1), (3, 1, 7)])
def test_plan_fixture(hops, delta, server, capsys):
    assert main(["plan", "--hops", str(hops), "--delta", str(delta)]) == 0
    data = json.loads(capsys.readouterr().out)
    assert len(data["blocks"]) == 10
    assert list(data["placement"].values()).count("SERVER") == server


def test_plan_no_skip_model(tmp_path, capsys):
    path = tmp_path / "chain.json"
    path.write_text(dumps_profile(chain_graph([4, 3, 2, 1])))
    assert main(["plan", "--profile", str(path), "--hops", "1", "--delta", "1"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert len(data["blocks"]) == 2


def test_plan_missing_profile(tmp_path, capsys):
    assert main(["plan", "--profile", str(tmp_path / "nope.json"), "--hops", "1", "--delta", "1"]) == 1


def test_simulate_layout(tmp_path, out, capsys):
    assert main(["simulate", str(scenario(tmp_path)), "--trace", "--json"]) == 0
    target = out / "demo"
    assert {p.name for p in target.iterdir()} == {"plan.json", "metrics.csv", "trace.csv", "metrics.json"}
    assert (target / "trace.csv").read_text().startswith("time_ns,kind,node,id\n")
    assert rows(capsys.readouterr().out)[0]["name"] == "demo"


def test_simulate_delta_zero_overlap(tmp_path, out, capsys):
    assert main(["simulate", str(scenario(tmp_path, delta=0, name="base"))]) == 0
    assert float(rows(capsys.readouterr().out)[0]["overlap_s"]) == 0.0


def test_simulate_ablation_pair(tmp_path, out, capsys):
    assert main(["simulate", str(scenario(tmp_path)), "--ablate", "principle3"]) == 0
    got = rows(capsys.readouterr().out)
    assert [r["name"] for r in got] == ["demo_principle3_on", "demo_principle3_off", "compare_principle3"]
    assert float(got[2]["server_cache_s"]) > 2.5


def test_simulate_table(tmp_path, out, capsys):
    assert main(["simulate", str(scenario(tmp_path)), "--sweep", "table"]) == 0
    table = rows(capsys.readouterr().out)
    assert len(table) == 10
    assert [int(r["server_blocks"]) for r in table] == [10, 7, 5, 3, 1, 10, 5, 1, 1, 1]
    assert len(rows((out / "demo" / "metrics.csv").read_text())) == 10


def test_simulate_repeat(tmp_path, out, capsys):
    assert main(["simulate", str(scenario(tmp_path)), "--repeat", "3"]) == 0
    got = rows(capsys.readouterr().out)
    assert len(got) == 3
    assert len({tuple(r.values())[1:] for r in got}) == 1


def test_simulate_bad_scenario(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"profile_ref": "fixture:convtasnet", "delta": 1, "hops": 0}))
    assert main(["simulate", str(path)]) == 2
    assert "hops" in capsys.readouterr().err
    path.write_text(json.dumps({"profile_ref": "fixture:convtasnet", "delta": 1, "hops": 2, "colour": 1}))
    assert main(["simulate", str(path)]) == 2
    path.write_text("{")
    assert main(["simulate", str(path)]) == 2


def test_simulate_outputs_stable(tmp_path, monkeypatch, capsys):
    path = scenario(tmp_path)
    texts = []
    for run in ("a", "b"):
        monkeypatch.setenv("NNSPLIT_OUT", str(tmp_path / run))
        assert main(["simulate", str(path), "--trace"]) == 0
        texts.append([(tmp_path / run / "demo" / f).read_bytes() for f in ("plan.json", "metrics.csv", "trace.csv")])
    assert texts[0] == texts[1]


@pytest.mark.parametrize("plan", ["staged", "single", "maximal", "random"])
def test_verify_passes(plan, capsys):
    assert main(["verify", "--plan", plan, "--seed", "42"]) == 0
    assert capsys.readouterr().out.startswith("PASS")


def test_verify_staged_plan_shape(capsys):
    assert main(["verify"]) == 0
    assert "blocks=10" in capsys.readouterr().out


def test_verify_corrupted_block(capsys):
    assert main(["verify", "--corrupt-block", "4"]) == 1
    line = capsys.readouterr().out.splitlines()[0]
    assert line.startswith("FAIL") and "offending_block=4" in line


def test_verify_plan_file(tmp_path, capsys):
    assert main(["plan", "--toy", "C=2,N=4,L=4,S=8,T=64", "--hops", "3", "--delta", "2", "-o", str(tmp_path / "p.json")]) == 0
    assert main(["verify", "--plan", str(tmp_path / "p.json")]) == 0


def test_sweep_ordered(tmp_path, out, capsys):
    paths = [str(scenario(tmp_path, delta=d, name=f"s{d}")) for d in (4, 0, 2)]
    assert main(["sweep", *paths, "--jobs", "2"]) == 0
    assert [r["name"] for r in rows(capsys.readouterr().out)] == ["s4", "s0", "s2"]
    assert (out / "s0" / "metrics.csv").exists()


def test_sweep_table_serial_matches_parallel(tmp_path, out, capsys):
    path = str(scenario(tmp_path))
    assert main(["sweep", path, "--table"]) == 0
    serial = capsys.readouterr().out
    assert main(["sweep", path, "--table", "--jobs", "3"]) == 0
    assert capsys.readouterr().out == serial
    assert len(rows(serial)) == 10
