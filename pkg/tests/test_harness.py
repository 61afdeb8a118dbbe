import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rehyat.attention import feature_map_apply, load_feature_map
from rehyat.cli import main
from rehyat.config import ConfigError, ExperimentConfig, config_from_dict, load_config


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


# --- config ----------------------------------------------------------------

def test_default_roundtrip(tmp_path):
    cfg = ExperimentConfig().validate()
    p = tmp_path / "c.json"
    p.write_text(cfg.dumps())
    again = load_config(p)
    assert again == cfg and again.dumps() == cfg.dumps()


@given(st.integers(1, 4), st.integers(0, 2**64 - 1), st.sampled_from(["single", "double"]),
       st.sampled_from(["tanh", "softplus", "identity"]), st.booleans())
def test_roundtrip_property(heads, seed, precision, activation, causal):
    data = {"layout": {"D_model": 4 * heads, "heads": heads, "causal": causal}, "seed": seed,
            "precision": precision, "phi": {"activation": activation, "D_e": 8},
            "sweep": {"durations": [3, 6]}, "fault": None}
    cfg = config_from_dict(data)
    assert config_from_dict(json.loads(cfg.dumps())) == cfg


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"layout": {"Tx": 3}},
    {"distill": {"learning_rate": 0.1}},
    {"layout": {"D_model": 15}},
    {"layout": {"Tc": 2, "To": 3}},
    {"layout": {"T": 0}},
    {"layout": {"T": 2.5}},
    {"layout": {"causal": "yes"}},
    {"precision": "half"},
    {"phi": {"P": 3}},
    {"phi": {"nonneg_mode": "relu"}},
    {"distill": {"lr": -1.0}},
    {"sweep": {"durations": []}},
    {"sweep": {"variants": ["flash"]}},
    {"fault": "nope"},
    {"layout": [1, 2]},
])
def test_config_rejections(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


# --- commands and exit codes -----------------------------------------------

def test_verify_default(capsys):
    code, out, _ = run(capsys, "verify")
    assert code == 0
    assert out.count("PASS") == 17 and "FAIL" not in out


def test_verify_fault_injection(tmp_path, capsys):
    code, out, _ = run(capsys, "verify", "--config", write(tmp_path, {"fault": "linear_partial_sign"}))
    assert code == 1
    assert "FAIL  attention.linear_vs_loop" in out
    assert "failed:" in out


def test_verify_json(tmp_path, capsys):
    code, out, _ = run(capsys, "verify", "--json", "--seed", "3")
    report = json.loads(out)
    assert code == 0 and report["passed"] and report["seed"] == 3
    assert len(report["properties"]) == 17
    assert all({"name", "passed", "detail"} <= set(p) for p in report["properties"])


def test_usage_errors(tmp_path, capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "verify", "--precision", "half")[0] == 2
    assert run(capsys, "verify", "--seed", str(2**64))[0] == 2
    code, _, err = run(capsys, "verify", "--config", write(tmp_path, {"layout": {"Tx": 1}}))
    assert code == 2 and "unknown key" in err


def test_equivalence_double_and_single(capsys):
    code, out, _ = run(capsys, "equivalence", "--json")
    r = json.loads(out)
    assert code == 0 and r["max_abs_diff"] <= 1e-9 and r["instances"] >= 100
    code, out, _ = run(capsys, "equivalence", "--json", "--precision", "single")
    r = json.loads(out)
    assert code == 0 and r["max_abs_diff"] <= 1e-4 and r["threshold"] == 1e-4


def test_equivalence_single_chunk_exact(tmp_path, capsys):
    cfg = write(tmp_path, {"layout": {"T": 4, "Tc": 4, "To": 0}, "equivalence": {"instances": 2}})
    code, out, _ = run(capsys, "equivalence", "--json", "--config", cfg)
    assert code == 0 and json.loads(out)["config_layout_diff"] == 0.0


def test_equivalence_needs_causal(tmp_path, capsys):
    assert run(capsys, "equivalence", "--config", write(tmp_path, {"layout": {"causal": False}}))[0] == 2


def test_equivalence_fault_fails(tmp_path, capsys):
    # stream and batch share the faulty readout, so the fault is invisible here; the verifier catches it
    cfg = write(tmp_path, {"fault": "linear_partial_sign", "equivalence": {"instances": 5}})
    assert run(capsys, "equivalence", "--config", cfg)[0] == 0


def test_bench_outputs_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "bench", "--out", str(a))[0] == 0
    assert run(capsys, "bench", "--out", str(b))[0] == 0
    for name in ("bench.csv", "bench_summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    lines = (a / "bench.csv").read_text().splitlines()
    assert lines[0].startswith("# flop_convention=") and "precision=double" in lines[0]
    assert lines[1] == "variant,T,H,W,D,heads,Tc,To,Dprime,flops,flops_scores,flops_linear,flops_phi,peak_bytes,state_bytes"
    summary = json.loads((a / "bench_summary.json").read_text())
    assert summary["ratio_T21"] >= 2 and set(summary["dprime_sensitivity"]) == {"64", "128", "256", "512", "1024"}


def test_stream_small(tmp_path, capsys):
    cfg = write(tmp_path, {"stream": {"durations": [3, 6, 12]}})
    code, out, _ = run(capsys, "stream", "--json", "--config", cfg, "--out", str(tmp_path / "o"))
    r = json.loads(out)
    assert code == 0 and r["state_constant"] and r["output_linear"]
    assert len({row["peak_state_bytes"] for row in r["rows"]}) == 1
    assert (tmp_path / "o" / "stream.csv").read_text().startswith("# precision=double\n")


def test_distill_artifacts(tmp_path, capsys):
    cfg = {"distill": {"steps": 5, "n_heldout": 2, "eval_every": 5},
           "layout": {"T": 4, "H": 2, "W": 1, "D_model": 8, "heads": 2, "Tc": 2, "To": 1}}
    p = write(tmp_path, cfg)
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "distill", "--json", "--config", p, "--out", str(tmp_path / name))
        assert code == 0
        outs.append(json.loads(out))
    assert outs[0]["initial_heldout"] == outs[1]["initial_heldout"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "distill_loss.csv").read_bytes() == (b / "distill_loss.csv").read_bytes()
    for f in sorted((a / "phi").iterdir()):
        assert f.read_bytes() == (b / "phi" / f.name).read_bytes()
    fm = load_feature_map(a / "phi" / "phi_q_head0")
    assert fm.in_dim == 4 and fm.out_dim == 8
    assert np.all(feature_map_apply(fm, np.ones((2, 4))) > 0)


def test_distill_divergence_exit(tmp_path, capsys, monkeypatch):
    from rehyat import cli
    from rehyat.errors import DivergenceError

    def boom(*_args, **_kw):
        raise DivergenceError(2, "loss became non-finite")

    monkeypatch.setattr(cli, "train_distill", boom)
    code, out, _ = run(capsys, "distill", "--out", str(tmp_path))
    assert code == 1 and "step 2" in out


def test_gradcheck_cmd(tmp_path, capsys):
    cfg = write(tmp_path, {"gradcheck": {"instances": 2, "params_per_instance": 5}})
    code, out, _ = run(capsys, "gradcheck", "--config", cfg, "--out", str(tmp_path / "g"))
    assert code == 0 and "PASS  worst relative error" in out
    lines = (tmp_path / "g" / "gradcheck.csv").read_text().splitlines()
    assert len(lines) == 2 + 10
    assert run(capsys, "gradcheck", "--precision", "single")[0] == 2


def test_gradcheck_fault_fails(tmp_path, capsys):
    cfg = write(tmp_path, {"fault": "linear_partial_sign", "gradcheck": {"instances": 1, "params_per_instance": 10}})
    assert run(capsys, "gradcheck", "--config", cfg, "--out", str(tmp_path))[0] == 1
