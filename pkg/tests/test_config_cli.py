import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from gkhyper.cli import main, read_csv, read_theta_star
from gkhyper.config import ConfigError, config_from_dict, load_config


SMALL_HEAT = {
    "problem": {"name": "heat1d", "n": 64, "noise_level": 0.02},
    "estimate": {
        "k": 10,
        "theta0": [1e-4, 0.5, 0.1],
        "bounds": [[1e-10, 1.0], [1e-3, 10.0], [5e-3, 0.5]],
        "max_iters": 60,
    },
    "monitor": {"k_max": 12, "n_mc": 5, "theta": [1e-5, 0.4, 0.08]},
    "benchmark": {"sizes": [48, 64], "k": 8, "repeats": 2,
                  "theta": [1e-5, 0.4, 0.08]},
    "reconstruct": {"theta": [1e-5, 0.4, 0.08], "k": 10},
    "seed": 0,
}


def write_config(tmp_path, payload, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(payload))
    return path


# --- configuration schema


def test_defaults_roundtrip():
    cfg = config_from_dict({})
    assert cfg.problem.name == "heat1d"
    assert cfg.estimate.k == 22
    cfg.validate()


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError, match="unknown top-level"):
        config_from_dict({"probem": {}})


def test_unknown_nested_key_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"problem": {"name": "heat1d", "bogus": 1}})


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"problem": {"name": "wave"}})
    with pytest.raises(ConfigError):
        config_from_dict({"estimate": {"k": 0}})
    with pytest.raises(ConfigError):
        config_from_dict({"estimate": {"theta0": [1.0, -1.0, 1.0]}})
    with pytest.raises(ConfigError):
        config_from_dict({"hyperprior": {"kind": "gamma", "gamma": -2.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"seed": "abc"})


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_yaml_parse_error(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("problem: [unclosed")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(path)


# --- CLI workflows


def test_estimate_writes_outputs(tmp_path):
    cfg = write_config(tmp_path, SMALL_HEAT)
    out = tmp_path / "out"
    assert main(["estimate", "--config", str(cfg), "--out", str(out)]) == 0
    summary = read_theta_star(out / "theta_star.json")
    assert summary["converged"]
    assert len(summary["theta_star"]) == 3
    rec = read_csv(out / "reconstruction.csv")
    assert set(rec) == {"s_true", "s_hat", "re"}
    assert len(rec["s_true"]) == 64
    iterates = read_csv(out / "iterates.csv")
    assert len(iterates["eval"]) == summary["func_count"]
    # the recorded objective matches the trace minimum
    assert np.isclose(min(iterates["objective"]), summary["objective"])


def test_estimate_noiseless_pipeline(tmp_path):
    payload = dict(SMALL_HEAT)
    payload["problem"] = {"name": "heat1d", "n": 64, "noise_level": 0.0}
    payload["estimate"] = dict(SMALL_HEAT["estimate"],
                               bounds=[[1e-14, 1.0], [1e-3, 10.0], [5e-3, 0.5]])
    cfg = write_config(tmp_path, payload)
    out = tmp_path / "out"
    assert main(["estimate", "--config", str(cfg), "--out", str(out)]) == 0
    rec = read_csv(out / "reconstruction.csv")
    # without noise the recovery is markedly better than the noisy band
    assert rec["re"][0] < 0.10


def test_malformed_config_exits_one_without_outputs(tmp_path):
    cfg = write_config(tmp_path, {"problem": {"name": "heat1d", "bogus_key": 3}})
    out = tmp_path / "out"
    assert main(["estimate", "--config", str(cfg), "--out", str(out)]) == 1
    assert not out.exists()


def test_negative_cli_seed_rejected(tmp_path):
    cfg = write_config(tmp_path, SMALL_HEAT)
    out = tmp_path / "out"
    assert main(["estimate", "--config", str(cfg), "--out", str(out),
                 "--seed", "-3"]) == 1
    assert not out.exists()


def test_monitor_outputs_and_bound_column(tmp_path):
    cfg = write_config(tmp_path, SMALL_HEAT)
    out = tmp_path / "mon"
    assert main(["monitor", "--config", str(cfg), "--out", str(out)]) == 0
    table = read_csv(out / "error_vs_k.csv")
    assert len(table["k"]) == 12
    assert np.all(table["prop2_bound"] >= table["abs_err_objective"] - 1e-12)
    assert np.all(np.isfinite(table["err_mc"]))
    assert np.all(table["err_mc"] >= 0)


def test_monitor_single_row(tmp_path):
    payload = dict(SMALL_HEAT)
    payload["monitor"] = {"k_max": 1, "n_mc": 4, "theta": [1e-5, 0.4, 0.08]}
    cfg = write_config(tmp_path, payload)
    out = tmp_path / "mon1"
    assert main(["monitor", "--config", str(cfg), "--out", str(out)]) == 0
    table = read_csv(out / "error_vs_k.csv")
    assert len(table["k"]) == 1


def test_benchmark_small_sizes(tmp_path):
    cfg = write_config(tmp_path, SMALL_HEAT)
    out = tmp_path / "bench"
    assert main(["benchmark", "--config", str(cfg), "--out", str(out)]) == 0
    table = read_csv(out / "timing.csv")
    assert list(table["n"]) == [48.0, 64.0]
    # both paths complete; the speedup column is present even if modest
    assert np.all(np.isfinite(table["exact_seconds"]))
    assert np.all(np.isfinite(table["gengk_seconds"]))
    assert np.all(np.isfinite(table["speedup"]))


def test_benchmark_requires_heat(tmp_path):
    payload = dict(SMALL_HEAT)
    payload["problem"] = {"name": "ray_tomo", "grid": 8, "n_rays": 20}
    cfg = write_config(tmp_path, payload)
    assert main(["benchmark", "--config", str(cfg), "--out",
                 str(tmp_path / "x")]) == 1


def test_reconstruct_command(tmp_path):
    cfg = write_config(tmp_path, SMALL_HEAT)
    out = tmp_path / "rec"
    assert main(["reconstruct", "--config", str(cfg), "--out", str(out)]) == 0
    rec = read_csv(out / "reconstruction.csv")
    assert len(rec["s_hat"]) == 64


def test_ray_tomo_estimate_smoke(tmp_path):
    payload = {
        "problem": {"name": "ray_tomo", "grid": 10, "n_rays": 80,
                    "noise_level": 0.02, "prior_std": 0.8, "ell": 0.1},
        "hyperprior": {"kind": "gamma", "gamma": 1e-4},
        "estimate": {"k": 30, "theta0": [1e-4, 0.5, 0.1],
                     "bounds": [[1e-10, 1.0], [1e-3, 10.0], [2e-2, 0.3]],
                     "max_iters": 40},
        "seed": 1,
    }
    cfg = write_config(tmp_path, payload)
    out = tmp_path / "tomo"
    assert main(["estimate", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "theta_star.json").exists()


def test_seed_override_changes_noise(tmp_path):
    cfg = write_config(tmp_path, SMALL_HEAT)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["reconstruct", "--config", str(cfg), "--out", str(out_a)]) == 0
    assert main(["reconstruct", "--config", str(cfg), "--out", str(out_b),
                 "--seed", "9"]) == 0
    rec_a = read_csv(out_a / "reconstruction.csv")
    rec_b = read_csv(out_b / "reconstruction.csv")
    assert not np.allclose(rec_a["s_hat"], rec_b["s_hat"])
