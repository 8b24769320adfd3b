import json
import os
import struct
import subprocess
import sys

import numpy as np
import pytest

from qroar import cli
from qroar.attention import Objective, score
from qroar.config import RunConfig, load_config
from qroar.diagnostics import interpolation_pressure, phase_deviation
from qroar.exceptions import ConfigError, DataError
from qroar.io import (decode_qtensor, encode_qtensor, read_csv, read_json, read_length_scores,
                      read_qtensor, sha256_file, write_csv, write_qtensor)
from qroar.search import BandScales, apply_band_scales, partition_bands

SMALL = {
    "model": {"d_model": 64, "n_heads": 2, "d_h": 16},
    "scheme": {"kind": "yarn", "L0": 64, "L": 128},
    "quant": {"bits": 4, "group_size": 32},
    "search": {"B": 4, "K": 3},
    "devset": {"lengths": [64, 128], "calibration_samples": 10000},
    "diagnose": {"logit_trials": 200, "n_positions": 8},
    "seed": 7,
}


def write_config(path, cfg=SMALL, **overrides):
    d = json.loads(json.dumps(cfg))
    for k, v in overrides.items():
        d[k] = v
    path.write_text(json.dumps(d))
    return path


def run(*args):
    return cli.main([str(a) for a in args])


# QTensor

def test_qtensor_byte_layout():
    a = np.array([[1.0, -2.0, 3.5]])
    blob = encode_qtensor(a, name="w")
    header = b'{"dims":[1,3],"dtype":"f64","format_version":1,"layout":"row-major","name":"w"}\n'
    assert blob[:len(header)] == header
    assert blob[len(header):] == struct.pack("<3d", 1.0, -2.0, 3.5)
    blob32 = encode_qtensor(np.array([1, -2], dtype=np.int64))
    assert blob32.endswith(struct.pack("<2i", 1, -2))
    assert b'"dtype":"i32"' in blob32


@pytest.mark.parametrize("dtype,arr", [
    ("f64", np.random.default_rng(0).standard_normal((3, 4, 5))),
    ("f32", np.random.default_rng(1).standard_normal(7).astype(np.float32)),
    ("i32", np.arange(-6, 6, dtype=np.int32).reshape(3, 4)),
    ("f64", np.zeros((0, 3)))])
def test_qtensor_round_trip(tmp_path, dtype, arr):
    path = write_qtensor(tmp_path / "t.qt", arr, dtype=dtype)
    back, header = read_qtensor(path)
    assert header["dims"] == list(arr.shape) and header["dtype"] == dtype
    assert back.dtype.str in ("<f8", "<f4", "<i4")
    np.testing.assert_array_equal(back, arr)
    assert encode_qtensor(back, "t", dtype) == path.read_bytes()


def test_qtensor_corrupt():
    blob = encode_qtensor(np.ones(4))
    with pytest.raises(DataError):
        decode_qtensor(blob[:-1])
    with pytest.raises(DataError):
        decode_qtensor(b"not json\n")
    with pytest.raises(DataError):
        decode_qtensor(b'{"dims":[1]}\n' + bytes(8))
    with pytest.raises(DataError):
        decode_qtensor(b'{"dims":[1],"dtype":"f16","layout":"row-major"}\n' + bytes(2))


def test_atomic_write_leaves_no_temp(tmp_path):
    write_qtensor(tmp_path / "a.qt", np.ones(3))
    write_qtensor(tmp_path / "a.qt", np.zeros(3))
    assert sorted(os.listdir(tmp_path)) == ["a.qt"]
    np.testing.assert_array_equal(read_qtensor(tmp_path / "a.qt")[0], 0.0)


def test_csv_and_length_scores(tmp_path):
    write_csv(tmp_path / "s.csv", ["length", "score"], [[512, 0.1], [1024, 1 / 3]])
    assert read_length_scores(tmp_path / "s.csv") == {512: 0.1, 1024: 1 / 3}
    assert read_csv(tmp_path / "s.csv")[1]["score"] == repr(1 / 3)
    write_csv(tmp_path / "bad.csv", ["length", "ppl"], [[512, 1.0]])
    with pytest.raises(DataError):
        read_length_scores(tmp_path / "bad.csv")


# config

def test_config_canonical_round_trip(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.json"))
    again = RunConfig.from_dict(json.loads(cfg.canonical()), base_dir=tmp_path)
    assert again.canonical() == cfg.canonical()
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    assert RunConfig().to_dict() == RunConfig.from_dict({}).to_dict()


@pytest.mark.parametrize("bad", [
    {"bogus": 1}, {"model": {"d_model": 64, "color": "red"}}, {"scheme": {"kind": "rope9"}},
    {"quant": {"bits": 1}}, {"search": {"kappa": 2.0}}, {"devset": {"lengths": []}},
    {"format_version": 99}, {"objective": {"kind": "ppl"}}, {"model": {"source": "files"}},
    {"seed": "x"}, {"scheme": {"kind": "yarn", "L0": 512, "L": 128}}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_config_missing_files(tmp_path):
    cfg = RunConfig.from_dict({"devset": {"manifest": "nope.json"}}, base_dir=tmp_path)
    with pytest.raises(ConfigError):
        cfg.validate_files()


# CLI

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json")
    assert run("gen-data", "--config", cfg) == 0
    assert run("search", "--config", cfg) == 0
    return root, cfg


def test_gen_data_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "again") == 0
    manifest = read_json(root / "out/data/manifest.json")
    again = read_json(tmp_path / "again/data/manifest.json")
    assert [e["sha256"] for e in manifest["items"]] == [e["sha256"] for e in again["items"]]
    for e in manifest["items"]:
        assert sha256_file(root / "out/data" / e["file"]) == e["sha256"]
        assert (root / "out/data" / e["file"]).read_bytes() == \
            (tmp_path / "again/data" / e["file"]).read_bytes()
    dims = sorted(e["dims"] for e in manifest["items"])
    assert dims == [[64, 64], [128, 64]]
    assert manifest["seed"] == 7 and manifest["config"]["seed"] == 7


def test_manifest_reload_and_tamper(workspace, tmp_path):
    root, cfg = workspace
    files = dict(SMALL["model"], source="files", w_q="out/data/w_q.qt", w_k="out/data/w_k.qt")
    devset = dict(SMALL["devset"], manifest="out/data/manifest.json")
    cfg2 = write_config(root / "cfg_files.json", model=files, devset=devset)
    out = tmp_path / "files"
    assert run("search", "--config", cfg2, "--out", out) == 0
    a = read_json(root / "out/search/band_scales.json")
    b = read_json(out / "search/band_scales.json")
    assert a["J_final"] == b["J_final"] and a["g"] == b["g"]
    # corrupt one sequence file: checksum mismatch is a data error
    bad = tmp_path / "bad"
    bad.mkdir()
    for name in os.listdir(root / "out/data"):
        (bad / name).write_bytes((root / "out/data" / name).read_bytes())
    blob = bytearray((bad / "h_64_0.qt").read_bytes())
    blob[-1] ^= 1
    (bad / "h_64_0.qt").write_bytes(bytes(blob))
    cfg3 = write_config(tmp_path / "cfg_bad.json", devset=dict(devset, manifest=str(bad / "manifest.json")))
    assert run("eval", "--config", cfg3, "--out", tmp_path / "x") == 3


def test_diagnose_matches_library(workspace, tmp_path):
    root, cfg = workspace
    assert run("diagnose", "--config", cfg, "--out", tmp_path) == 0
    rep = read_json(tmp_path / "diagnose/diagnostics.json")
    c = load_config(cfg)
    c.output_dir = str(tmp_path.resolve())
    scheme = c.build_scheme()
    sched = cli.load_weights(c).schedule()
    assert len(rep["phase"]) == 8
    for row in rep["phase"]:
        i = row["pair"]
        assert row["deviation_at_D"] == phase_deviation(scheme, sched, i, 128, 64)
        assert row["pressure"] == interpolation_pressure(scheme, sched, i, 128)
    assert rep["seed"] == 7 and rep["config"] == c.to_dict()
    assert rep["logit_bound"]["violations"] == 0
    assert len(read_csv(tmp_path / "diagnose/phase.csv")) == 8
    assert len(read_csv(tmp_path / "diagnose/channels.csv")) == 2 * 2 * 16
    assert len(read_csv(tmp_path / "diagnose/bands.csv")) == 4
    report, _ = cli.diagnostics_report(c)
    assert json.loads(json.dumps(report)) == json.loads(
        (tmp_path / "diagnose/diagnostics.json").read_text())


def test_diagnose_identity_scheme(tmp_path):
    cfg = write_config(tmp_path / "c.json", scheme={"kind": "none"})
    assert run("diagnose", "--config", cfg) == 0
    rep = read_json(tmp_path / "out/diagnose/diagnostics.json")
    assert all(r["deviation_at_D0"] == 0.0 for r in rep["phase"])


def test_quantize_outputs(tmp_path):
    cfg = write_config(tmp_path / "c.json", quant={"bits": 16, "group_size": 128})
    assert run("quantize", "--config", cfg) == 0
    c = load_config(cfg)
    w = cli.load_weights(c)
    deq = read_qtensor(tmp_path / "out/quant/w_q_dequant.qt")[0]
    assert np.max(np.abs(deq - w.w_q)) <= 1e-3 * np.max(np.abs(w.w_q))
    codes = read_qtensor(tmp_path / "out/quant/w_q_codes.qt")[0]
    summary = read_json(tmp_path / "out/quant/quant_summary.json")
    assert summary["w_q"]["error_spectral_norm"] >= 0
    # quantizing the dequantized weights reproduces the codes
    from qroar.quant import quantize_minmax
    np.testing.assert_array_equal(quantize_minmax(deq, c.quant).codes, codes)


def test_search_eval_round_trip(workspace, tmp_path):
    root, cfg = workspace
    scales = root / "out/search/band_scales.json"
    doc = read_json(scales)
    assert len(doc["audit"]["evaluations"]) == 2 * 4 * 3
    assert doc["partition"]["bands"] == [[0, 1], [2, 3], [4, 5], [6, 7]]
    assert run("eval", "--config", cfg, "--scales", scales, "--out", tmp_path) == 0
    summary = read_json(tmp_path / "eval/eval.json")
    assert summary["J_quant_rescaled"] == doc["J_final"]
    assert summary["J_quant"] == doc["J_baseline"]
    rows = read_csv(tmp_path / "eval/scores.csv")
    assert list(rows[0]) == ["length", "weight", "score_baseline_fp", "score_quant",
                             "score_quant_rescaled"]
    J = sum(float(r["weight"]) * float(r["score_quant_rescaled"]) for r in rows)
    assert abs(J - summary["J_quant_rescaled"]) <= 1e-12
    # library-level scoring of the written scales agrees
    c = load_config(cfg)
    w = cli.load_weights(c)
    dev = cli.load_devset(c, w.d_model)
    scheme = c.build_scheme()
    obj = Objective("logit_mse", w, scheme, dev)
    bs = BandScales.from_dict(doc)
    rescaled = apply_band_scales(w, partition_bands(w.schedule(), 4), bs)
    assert score(obj, rescaled, scheme, c.quant, dev)[0] == doc["J_final"]
    resc = read_qtensor(root / "out/search/w_q_rescaled.qt")[0]
    np.testing.assert_array_equal(resc, rescaled.w_q)


def test_eval_without_quant(tmp_path):
    cfg = write_config(tmp_path / "c.json", quant=None)
    assert run("eval", "--config", cfg) == 0
    for r in read_csv(tmp_path / "out/eval/scores.csv"):
        assert r["score_baseline_fp"] == r["score_quant"] == r["score_quant_rescaled"] == "0.0"


def test_external_objective_cli(tmp_path):
    write_csv(tmp_path / "ppl.csv", ["length", "score"], [[64, 7.5], [128, 9.0]])
    cfg = write_config(tmp_path / "c.json",
                       objective={"kind": "external", "external_scores": "ppl.csv"})
    assert run("eval", "--config", cfg) == 0
    summary = read_json(tmp_path / "out/eval/eval.json")
    assert summary["J_quant"] == pytest.approx(7.5 / 3 + 9.0 * 2 / 3)


def test_seed_override(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert run("gen-data", "--config", cfg, "--seed", "8", "--out", tmp_path / "s8") == 0
    assert read_json(tmp_path / "s8/data/manifest.json")["seed"] == 8
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "s7") == 0
    assert (tmp_path / "s8/data/h_64_0.qt").read_bytes() != \
        (tmp_path / "s7/data/h_64_0.qt").read_bytes()


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"bogus": 1}')
    assert run("search", "--config", bad) == 2
    bad.write_text("{not json")
    assert run("search", "--config", bad) == 2
    assert run("search", "--config", tmp_path / "missing.json") == 4
    empty = write_config(tmp_path / "empty.json", devset={"lengths": []})
    assert run("search", "--config", empty) == 2
    few = write_config(tmp_path / "few.json", devset={"lengths": [64, 128],
                                                      "calibration_samples": 500})
    assert run("search", "--config", few) == 3
    assert run("diagnose", "--config", few) == 3
    cfg = write_config(tmp_path / "ok.json")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("gen-data", "--config", cfg, "--out", blocker / "sub") == 4
    assert run("search", "--config", cfg, "--threads", "0") == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["unknown"])
    assert exc.value.code == 2


def test_threads_identical(workspace, tmp_path):
    root, cfg = workspace
    rels = ("search/band_scales.json", "search/w_q_rescaled.qt", "eval/scores.csv",
            "eval/eval.json")
    outputs = []
    for t in (1, 8):
        # same --out both times: reports embed the resolved output directory
        assert run("search", "--config", cfg, "--threads", t, "--out", tmp_path) == 0
        assert run("eval", "--config", cfg, "--threads", t, "--out", tmp_path,
                   "--scales", tmp_path / "search/band_scales.json") == 0
        outputs.append([(tmp_path / rel).read_bytes() for rel in rels])
    assert outputs[0] == outputs[1]


def test_entry_point(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    proc = subprocess.run([sys.executable, "-m", "qroar.cli", "quantize", "--config", str(cfg)],
                          capture_output=True, text=True, env=dict(os.environ, QROAR_LOG="INFO"))
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip().endswith("quant_summary.json")
