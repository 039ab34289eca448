import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from mdlkit.analysis import count_connections, count_params
from mdlkit.cli import UsageError, load_config, run
from mdlkit.graph import apply_scheme, build_resnet26, load_graph

MICRO_DATA = "synthetic:classes=3,size=16,n=48,seed=1"


def call(capsys, *argv):
    code = run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(csv_text):
    return {r["Method"]: r for r in csv.DictReader(io.StringIO(csv_text))}


# --------------------------------------------------------------------------
# analyze


def test_analyze_default_table(capsys):
    code, out, _ = call(capsys, "analyze", "--input", "3x72x72", "--classes", "47")
    assert code == 0
    table = rows(out)
    assert list(table) == ["finetune", "final-conv", "parallel-adapters", "spatial-attention", "adaptive-attention"]
    base = build_resnet26(47)
    for name, row in table.items():
        g = apply_scheme(base, name)
        p = count_params(g)
        assert int(row["Total"]) == p.total and int(row["Train."]) == p.trainable
        assert int(row["Conn.s"]) == count_connections(g).connections
    assert table["finetune"]["Train. %"] == "100.00"
    assert int(table["finetune"]["Total"]) - int(table["finetune"]["Total w/o FC"]) == 256 * 47 + 47


def test_analyze_head_only_json(capsys, tmp_path):
    out_file = tmp_path / "t.json"
    code, out, _ = call(capsys, "analyze", "--scheme", "head-only", "--format", "json", "--output", str(out_file))
    assert code == 0 and out == ""
    row = json.loads(out_file.read_text())["rows"][0]
    # only the 256 -> 47 head trains; the boundary is the pooled 256-vector
    assert row["trainable"] == 256 * 47 + 47
    assert row["connections"] == 256


def test_unknown_scheme_is_usage_error(capsys):
    code, out, err = call(capsys, "analyze", "--scheme", "bogus")
    assert code == 2 and out == ""
    assert "adaptive-attention" in err and "finetune" in err


def test_missing_subcommand_and_bad_flag(capsys):
    assert call(capsys)[0] == 2
    assert call(capsys, "analyze", "--input", "3x72")[0] == 2
    assert call(capsys, "train", "--dataset", MICRO_DATA)[0] == 2  # --out is required
    assert call(capsys, "train", "--dataset", "synthetic:colour=1", "--out", "x")[0] == 2


def test_help_exits_zero(capsys):
    assert call(capsys, "--help")[0] == 0


def test_analyze_is_byte_deterministic(tmp_path):
    outs = []
    for i in range(2):
        path = tmp_path / f"{i}.csv"
        subprocess.run([sys.executable, "-m", "mdlkit.cli", "analyze", "--output", str(path)], check=True)
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


# --------------------------------------------------------------------------
# config


def test_empty_config_means_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("")
    assert load_config(p) == {"train": {}, "scheme": {}}
    p.write_text("{}")
    assert load_config(p) == {"train": {}, "scheme": {}}


def test_malformed_config_reports_position(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "epochs": 3,\n  "lr" 0.1\n}\n')
    with pytest.raises(UsageError, match=r"c\.json:3:8: malformed JSON"):
        load_config(p)


@pytest.mark.parametrize("doc, field", [({"epochs": "3"}, "epochs"), ({"lerning_rate": 0.1}, "lerning_rate"),
                                        ({"scheme": {"k": 2.5}}, "scheme.k"), ({"momentum": True}, "momentum")])
def test_config_schema_names_field(tmp_path, doc, field):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(UsageError, match=field.replace(".", r"\.")):
        load_config(p)


def test_flags_override_config_override_defaults(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 2, "learning_rate": 0.3, "batch_size": 16, "scheme": {"k": 5}}))
    out = tmp_path / "run"
    code, _, err = call(capsys, "train", "--backbone", "micro", "--dataset", MICRO_DATA, "--scheme",
                        "adaptive-attention", "--config", str(cfg), "--lr", "0.05", "--out", str(out))
    assert code == 0, err
    man = json.loads((out / "history.json").read_text())
    assert man["train_config"]["learning_rate"] == 0.05  # flag
    assert man["train_config"]["epochs"] == 2 and man["train_config"]["batch_size"] == 16  # file
    assert man["train_config"]["momentum"] == 0.9  # default
    assert man["scheme"]["k"] == 5


def test_bad_config_exits_two(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("[1, 2")
    code, out, err = call(capsys, "analyze", "--config", str(cfg))
    assert code == 2 and out == "" and "malformed JSON" in err


# --------------------------------------------------------------------------
# train / experiment / export


def test_train_outputs_reload_and_repeat(tmp_path, capsys):
    argv = ["train", "--backbone", "micro", "--dataset", MICRO_DATA, "--scheme", "head-only", "--epochs", "2",
            "--lr", "0.1", "--test-dataset", "synthetic:classes=3,size=16,n=30,seed=9"]
    assert call(capsys, *argv, "--out", str(tmp_path / "a"))[0] == 0
    assert call(capsys, *argv, "--out", str(tmp_path / "b"))[0] == 0
    for name in ("graph.json", "weights.bin", "history.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "history.timing.json").exists()
    man = json.loads((tmp_path / "a" / "history.json").read_text())
    assert man["datasets"]["train"]["spec"]["n"] == 48 and man["datasets"]["val"]["spec"]["seed"] == 1001
    assert man["history"]["checkpoint"] == "graph.json"
    g = load_graph(tmp_path / "a" / "graph.json", tmp_path / "a" / "weights.bin")
    assert g.head().hyper["out_features"] == 3 and 0 <= man["final"]["test_acc"] <= 1


def test_train_rejects_two_schemes(tmp_path, capsys):
    code, _, _ = call(capsys, "train", "--backbone", "micro", "--dataset", MICRO_DATA, "--scheme",
                      "head-only,finetune", "--out", str(tmp_path))
    assert code == 2


def test_experiment_writes_table(tmp_path, capsys):
    code, out, err = call(capsys, "experiment", "--kind", "noise", "--backbone", "micro", "--dataset", MICRO_DATA,
                          "--scheme", "head-only", "--seeds", "0", "--grid", "0,25", "--epochs", "1", "--workers",
                          "1", "--out", str(tmp_path))
    assert code == 0, err
    dat = (tmp_path / "noise.dat").read_text()
    assert dat == out and dat.splitlines()[0] == "x y1"
    assert [ln.split()[0] for ln in dat.splitlines()[1:]] == ["0", "25"]
    man = json.loads((tmp_path / "noise.json").read_text())
    assert man["columns"] == {"y1": "head-only"} and man["datasets"]["test"]["spec"]["seed"] == 2001


def test_export_graph_round_trip(tmp_path, capsys):
    gj, wb = tmp_path / "g.json", tmp_path / "w.bin"
    code, _, _ = call(capsys, "export-graph", "--backbone", "micro", "--classes", "5", "--scheme", "cbam", "--r", "4",
                      "--output", str(gj), "--weights", str(wb))
    assert code == 0
    g = load_graph(gj, wb)
    assert any(n.kind == "attention-block" for n in g.nodes)
    assert count_params(g).total == count_params(g.copy()).total
    code, out, _ = call(capsys, "export-graph", "--backbone", "micro", "--classes", "5")
    assert code == 0 and json.loads(out)["nodes"]


def test_gradcheck_command(capsys):
    code, out, _ = call(capsys, "gradcheck", "--seed", "7", "--shapes", "1")
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 23 and lines[-1].startswith("max relative error")
    assert float(lines[-1].split()[3]) < 1e-5
    assert np.all([float(ln.split()[1]) < 1e-5 for ln in lines[:-1]])
