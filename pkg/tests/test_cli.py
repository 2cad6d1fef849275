import hashlib
import json
import shutil

import pytest

from artikit.cli import main
from artikit.io import load_object, parse_mobility_urdf

from conftest import FIXTURES

URDF = FIXTURES / "urdf"
RECORDINGS = FIXTURES / "provider" / "recordings.json"

SMALL_MODEL = {"model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "expert_hidden": 16},
               "train": {"T": 20}}


def digest(path):
    """Digest of a file, or of every file under a directory (relative names included)."""
    if path.is_file():
        return hashlib.sha256(path.read_bytes()).hexdigest()
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def write_config(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


@pytest.fixture
def toy_set(tmp_path):
    out = tmp_path / "toy"
    assert main(["-q", "make-toy-set", "--out", str(out), "--features"]) == 0
    return out


# --- ingest / validate -------------------------------------------------------------------------

def test_ingest_ok_and_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["ingest", "--in", str(URDF / "cabinet"), "--out", str(tmp_path / name / "o.akj")]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert load_object(tmp_path / "a" / "o.akj") == parse_mobility_urdf(URDF / "cabinet")[0]
    assert main(["validate", "--obj", str(tmp_path / "a" / "o.akj")]) == 0


def test_ingest_missing_urdf_is_io_error(tmp_path, capsys):
    assert main(["ingest", "--in", str(URDF / "empty_dir"), "--out", str(tmp_path / "o.akj")]) == 3
    assert main(["ingest", "--in", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o.akj")]) == 3
    assert not (tmp_path / "o.akj").exists()
    assert capsys.readouterr().out == ""


def test_ingest_loop_names_cycle(tmp_path, capsys):
    assert main(["ingest", "--in", str(URDF / "loop"), "--out", str(tmp_path / "o.akj")]) == 2
    err = capsys.readouterr().err
    assert "loop" in err and "->" in err


@pytest.mark.parametrize("name", ["unsupported", "missing_limit"])
def test_ingest_parse_errors(tmp_path, name):
    assert main(["ingest", "--in", str(URDF / name), "--out", str(tmp_path / "o.akj")]) == 2


def test_validate_rejects_bad_state(tmp_path, toy_set):
    doc = json.loads((toy_set / "cabinet.akj").read_text())
    doc["parts"][1]["state"] = 1.2
    bad = tmp_path / "bad.akj"
    bad.write_text(json.dumps(doc))
    assert main(["validate", "--obj", str(bad)]) == 2
    assert main(["validate", "--obj", str(tmp_path / "missing.akj")]) == 3


# --- sample-states -----------------------------------------------------------------------------------

def test_sample_states_endpoints(tmp_path, toy_set):
    out = tmp_path / "inst"
    assert main(["sample-states", "--obj", str(toy_set / "cabinet.akj"), "--m", "2",
                 "--strategy", "endpoints", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    states = [e["states"] for e in manifest["instances"]]
    assert len(states) == 2
    assert set(states[0]) == {0.0} and set(states[1]) == {1.0}
    assert sorted(p.name for p in out.glob("*.akj")) == ["instance_000.akj", "instance_001.akj"]
    doc = json.loads((out / "instance_001.akj").read_text())
    assert doc["frame"] == "posed"


def test_sample_states_repeatable(tmp_path, toy_set):
    for name in ("a", "b"):
        assert main(["sample-states", "--obj", str(toy_set / "drawer_chest.akj"), "--m", "4", "--seed", "7",
                     "--out", str(tmp_path / name)]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_sample_states_zero_rejected(tmp_path, toy_set, capsys):
    assert main(["sample-states", "--obj", str(toy_set / "cabinet.akj"), "--m", "0",
                 "--out", str(tmp_path / "inst")]) == 2
    assert capsys.readouterr().out == ""


# --- evaluate -------------------------------------------------------------------------------------------

def test_evaluate_copy_and_cache(tmp_path, toy_set, capsys):
    subset = tmp_path / "ref"
    subset.mkdir()
    for name in ("cabinet", "drawer_chest", "laptop"):
        shutil.copy(toy_set / f"{name}.akj", subset)
    shutil.copytree(toy_set / "meshes", subset / "meshes")
    gen = tmp_path / "gen"
    shutil.copytree(subset, gen)
    flags = ["evaluate", "--gen", str(gen), "--ref", str(subset), "--m", "2", "--points", "128",
             "--por-resolution", "16"]
    assert main(flags + ["--out", str(tmp_path / "r1.json")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "POR MMD COV 1-NNA"
    report = json.loads((tmp_path / "r1.json").read_text())
    assert (report["mmd"], report["cov"], report["one_nna"]) == (0.0, 1.0, 0.0)
    assert main(flags + ["--out", str(tmp_path / "r2.json")]) == 0
    assert "cache hit" in capsys.readouterr().err
    assert digest(tmp_path / "r1.json") == digest(tmp_path / "r2.json")


def test_evaluate_empty_set(tmp_path, toy_set):
    (tmp_path / "empty").mkdir()
    assert main(["evaluate", "--gen", str(tmp_path / "empty"), "--ref", str(toy_set),
                 "--out", str(tmp_path / "r.json")]) == 2
    assert not (tmp_path / "r.json").exists()


# --- train / generate -----------------------------------------------------------------------------------

def test_train_and_generate_deterministic(tmp_path, toy_set):
    cfg = write_config(tmp_path, SMALL_MODEL)
    for name in ("a", "b"):
        assert main(["-q", "train-toy", "--config", cfg, "--out", str(tmp_path / name), "--steps", "3",
                     "--lr", "0.05"]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["checkpoint.ckpt", "trace.csv"]

    graph = tmp_path / "graph.json"
    assert main(["infer-graph", "--mock-file", str(RECORDINGS), "--text", "a microwave with one door",
                 "--out", str(graph)]) == 0
    outs = []
    for name in ("g1.akj", "g2.akj"):
        outs.append(tmp_path / name)
        assert main(["generate", "--config", cfg, "--checkpoint", str(tmp_path / "a" / "checkpoint.ckpt"),
                     "--graph", str(graph), "--features", str(toy_set / "microwave.akft"),
                     "--seed", "5", "--out", str(outs[-1])]) == 0
    assert digest(outs[0]) == digest(outs[1])
    assert main(["validate", "--obj", str(outs[0])]) == 0


def test_train_on_directory(tmp_path, toy_set):
    cfg = write_config(tmp_path, SMALL_MODEL)
    assert main(["-q", "train-toy", "--config", cfg, "--data", str(toy_set), "--out", str(tmp_path / "m"),
                 "--steps", "2"]) == 0


def test_generate_errors(tmp_path):
    graph = tmp_path / "graph.json"
    graph.write_text('{"root": 0, "nodes": [{"id": 0, "label": "a", "joint_type": "revolute"}], "edges": []}')
    assert main(["generate", "--checkpoint", str(tmp_path / "none.ckpt"), "--graph", str(graph),
                 "--out", str(tmp_path / "o.akj")]) == 3
    cfg = write_config(tmp_path, SMALL_MODEL)
    assert main(["-q", "train-toy", "--config", cfg, "--out", str(tmp_path / "m"), "--steps", "0"]) == 0
    assert main(["generate", "--config", cfg, "--checkpoint", str(tmp_path / "m" / "checkpoint.ckpt"),
                 "--graph", str(graph), "--out", str(tmp_path / "o.akj")]) == 2
    assert not (tmp_path / "o.akj").exists()


# --- infer-graph ------------------------------------------------------------------------------------------

def test_infer_graph_mock(tmp_path):
    outs = [tmp_path / "a.json", tmp_path / "b.json"]
    for out in outs:
        assert main(["infer-graph", "--provider", "mock", "--mock-file", str(RECORDINGS),
                     "--text", "a wooden cabinet with one door", "--out", str(out)]) == 0
    doc = json.loads(outs[0].read_text())
    assert [n["label"] for n in doc["nodes"]] == ["base", "door"]
    assert digest(outs[0]) == digest(outs[1])
    assert main(["infer-graph", "--mock-file", str(RECORDINGS), "--image",
                 str(FIXTURES / "provider" / "cabinet.png"), "--out", str(tmp_path / "img.json")]) == 0


@pytest.mark.parametrize("text", ["a chair", "a hinged box", "a spaceship"])
def test_infer_graph_provider_failures(tmp_path, text):
    assert main(["infer-graph", "--mock-file", str(RECORDINGS), "--text", text,
                 "--out", str(tmp_path / "g.json")]) == 4
    assert not (tmp_path / "g.json").exists()


def test_infer_graph_unreachable_http(tmp_path):
    assert main(["infer-graph", "--provider", "http", "--endpoint", "http://127.0.0.1:9/chat",
                 "--timeout", "0.5", "--max-retries", "0", "--text", "a box", "--out", str(tmp_path / "g.json")]) == 4


def test_infer_graph_usage_errors(tmp_path):
    assert main(["infer-graph", "--text", "a box", "--out", str(tmp_path / "g.json")]) == 2
    assert main(["infer-graph", "--mock-file", str(RECORDINGS), "--image", str(tmp_path / "none.png"),
                 "--out", str(tmp_path / "g.json")]) == 3


# --- config ---------------------------------------------------------------------------------------------------

def test_config_unknown_key(tmp_path, capsys):
    cfg = write_config(tmp_path, {"metrics": {"M": 2, "colour": "red"}})
    assert main(["validate", "--config", cfg, "--obj", "x.akj"]) == 2
    assert "metrics.colour" in capsys.readouterr().err
    cfg = write_config(tmp_path, {"optimizer": {}})
    assert main(["validate", "--config", cfg, "--obj", "x.akj"]) == 2


def test_config_relative_paths(tmp_path):
    (tmp_path / "sub").mkdir()
    shutil.copy(RECORDINGS, tmp_path / "sub" / "rec.json")
    cfg = write_config(tmp_path / "sub", {"provider": {"kind": "mock", "mock_file": "rec.json"}})
    assert main(["infer-graph", "--config", cfg, "--text", "a microwave with one door",
                 "--out", str(tmp_path / "g.json")]) == 0


def test_flags_override_config_seed(tmp_path, toy_set):
    cfg = write_config(tmp_path, {"seed": 1})
    args = ["sample-states", "--config", cfg, "--obj", str(toy_set / "cabinet.akj"), "--m", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--seed", "1", "--out", str(tmp_path / "b")]) == 0
    assert main(args + ["--seed", "2", "--out", str(tmp_path / "c")]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b") != digest(tmp_path / "c")
