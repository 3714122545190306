import csv
import json

import pytest

from fedpc.cli import main
from fedpc.config import (
    ConfigErrors,
    config_hash,
    load_experiment_dict,
    resolve_experiment,
    run_config_from_dict,
    run_config_to_dict,
)
from fedpc.errors import ConfigError

SMALL = """\
output_dir: {out}
seeds: [0]
federation:
  num_vehicles: 2
  drivers_per_vehicle: 3
  classes: 3
  feature_dim: 6
  samples_per_client_per_class: 10
defaults:
  rounds: 2
  local_epochs: 1
  batch_size: 16
  hidden: [8, 8]
  lr: 0.001
  personalization_steps: 2
runs:
  fedpc: {{algorithm: fedpc}}
"""


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text(SMALL.format(out=tmp_path / "runs"))
    return p


def _table(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- config --------------------------------------------------------------------


def test_resolve_cross_product(config_file):
    raw = load_experiment_dict(config_file)
    raw["runs"]["ring"] = {"algorithm": "ring"}
    exp = resolve_experiment(raw, seeds=[0, 1, 2])
    assert [(r.name, r.seed) for r in exp.runs] == [
        ("fedpc", 0), ("fedpc", 1), ("fedpc", 2), ("ring", 0), ("ring", 1), ("ring", 2),
    ]
    assert exp.runs[1].config.federation.seed == 1


def test_resolve_overrides(config_file):
    raw = load_experiment_dict(config_file)
    exp = resolve_experiment(raw, {"mu": "0", "federation.noise_sigma": "0.25", "hidden": "4,5"})
    cfg = exp.runs[0].config
    assert cfg.loss.mu == 0.0
    assert cfg.federation.noise_sigma == 0.25
    assert cfg.model.layer_sizes == (6, 4, 5, 3)


def test_resolve_collects_every_problem(config_file):
    raw = load_experiment_dict(config_file)
    raw["defaults"]["rounds"] = "many"
    raw["runs"]["fedpc"]["colour"] = "red"
    with pytest.raises(ConfigErrors) as info:
        resolve_experiment(raw, {"nonsense": 1})
    text = " ".join(info.value.problems)
    assert "defaults.rounds" in text and "colour" in text and "nonsense" in text


def test_duplicate_keys_rejected(tmp_path):
    p = tmp_path / "dup.yaml"
    p.write_text("seeds: [0]\nseeds: [1]\n")
    with pytest.raises(ConfigError, match="duplicate"):
        load_experiment_dict(p)


def test_config_dict_round_trip(config_file):
    cfg = resolve_experiment(load_experiment_dict(config_file)).runs[0].config
    d = run_config_to_dict(cfg)
    assert run_config_from_dict(json.loads(json.dumps(d))) == cfg
    assert config_hash(d) == config_hash(run_config_to_dict(cfg))


def test_line_forces_single_round(config_file):
    raw = load_experiment_dict(config_file)
    raw["runs"] = {"line": {"algorithm": "line"}}
    assert resolve_experiment(raw).runs[0].config.rounds == 1


# -- verbs --------------------------------------------------------------------


def test_run_writes_artifacts_and_is_deterministic(config_file, tmp_path, capsys):
    assert main(["run", str(config_file), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", str(config_file), "--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a" / "fedpc" / "seed-0", tmp_path / "b" / "fedpc" / "seed-0"
    for name in ("metrics.json", "metrics.csv", "ledger.csv", "schedule.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["config_hash"] == config_hash(manifest["config"])
    assert main(["replay", str(a / "manifest.json")]) == 0
    assert "identical" in capsys.readouterr().out


def test_replay_detects_edited_manifest(config_file, tmp_path):
    main(["run", str(config_file), "--out", str(tmp_path)])
    path = tmp_path / "fedpc" / "seed-0" / "manifest.json"
    m = json.loads(path.read_text())
    m["config"]["mu"] = 3.0
    path.write_text(json.dumps(m))
    assert main(["replay", str(path)]) == 1


def test_fedprox_mu_zero_matches_fedavg_tables(config_file, tmp_path):
    main(["run", str(config_file), "--out", str(tmp_path / "p"), "--algorithm", "fedprox", "--mu", "0"])
    main(["run", str(config_file), "--out", str(tmp_path / "a"), "--algorithm", "fedavg"])
    for name in ("metrics.csv", "ledger.csv"):
        p = (tmp_path / "p" / "fedpc" / "seed-0" / name).read_bytes()
        a = (tmp_path / "a" / "fedpc" / "seed-0" / name).read_bytes()
        assert p == a


def test_invalid_config_exits_before_training(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("output_dir: {}\nruns:\n  x: {{algorithm: star, rounds: -1}}\n".format(tmp_path / "o"))
    assert main(["run", str(p)]) == 1
    err = capsys.readouterr().err
    assert "config error:" in err and "algorithm" in err
    assert not (tmp_path / "o").exists()


def test_sweep_partial_failure_completes_remaining(config_file, tmp_path, capsys, monkeypatch):
    import fedpc.cli as cli

    real = cli.run

    def flaky(cfg):
        if cfg.seed == 1:
            raise RuntimeError("boom")
        return real(cfg)

    monkeypatch.setattr(cli, "run", flaky)
    code = main(["run", str(config_file), "--out", str(tmp_path / "s"), "--seed", "1", "--seed", "2"])
    assert code == 1
    assert "boom" in capsys.readouterr().err
    assert (tmp_path / "s" / "fedpc" / "seed-2" / "metrics.json").exists()


def test_workers_flag_matches_serial(config_file, tmp_path):
    main(["run", str(config_file), "--out", str(tmp_path / "w"), "--seed", "0", "--seed", "1", "--workers", "2"])
    main(["run", str(config_file), "--out", str(tmp_path / "s"), "--seed", "0", "--seed", "1"])
    for seed in (0, 1):
        rel = f"fedpc/seed-{seed}/metrics.json"
        assert (tmp_path / "w" / rel).read_bytes() == (tmp_path / "s" / rel).read_bytes()


def test_compare_identical_reports(config_file, tmp_path, capsys):
    main(["run", str(config_file), "--out", str(tmp_path)])
    report = str(tmp_path / "fedpc" / "seed-0" / "metrics.json")
    out_csv = tmp_path / "cmp.csv"
    assert main(["compare", report, report, "--csv", str(out_csv)]) == 0
    rows = _table(out_csv)
    for row in rows[1:]:
        assert row[2:4] == row[4:6]


def test_compare_missing_and_mismatched(tmp_path, config_file, capsys):
    main(["run", str(config_file), "--out", str(tmp_path)])
    report = tmp_path / "fedpc" / "seed-0" / "metrics.json"
    missing = tmp_path / "nope.json"
    assert main(["compare", str(report), str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err
    other = tmp_path / "old.json"
    d = json.loads(report.read_text())
    d["schema_version"] = 0
    other.write_text(json.dumps(d))
    assert main(["compare", str(report), str(other)]) == 1
    assert str(other) in capsys.readouterr().err


def test_gen_data_and_validate(config_file, tmp_path, capsys):
    out = tmp_path / "fed.csv"
    assert main(["gen-data", str(config_file), "--out", str(out)]) == 0
    assert out.read_text().startswith("client_id,label,f0,")
    assert main(["validate", str(config_file)]) == 0
    assert "valid" in capsys.readouterr().out


def test_feature_table_federation(tmp_path, config_file):
    table = tmp_path / "fed.csv"
    main(["gen-data", str(config_file), "--out", str(table)])
    exp = tmp_path / "t.yaml"
    exp.write_text(
        f"output_dir: {tmp_path / 'r'}\nfederation: {{path: {table}}}\n"
        "defaults: {rounds: 1, local_epochs: 1, batch_size: 16, hidden: [4, 4], personalization_steps: 1}\n"
    )
    assert main(["run", str(exp)]) == 0
    assert (tmp_path / "r" / "default" / "seed-0" / "metrics.json").exists()
