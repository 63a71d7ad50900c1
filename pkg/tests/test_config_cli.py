import textwrap

import numpy as np
import pytest
import yaml

from fvduality.cli import main
from fvduality.config import ConfigError, build_config, parse_config

MINIMAL = """
model:
  n_types: 2
  fitness: [0.0, 1.0]
  mutation_matrix: [[0.6, 0.4], [0.3, 0.7]]
  mutation_rate: 0.5
  resampling: 1.0
  selection: 0.2
geography:
  mode: island
  order: 2
experiment:
  kind: duality
  moran_pop_size: 80
  master_seed: 99
  checks:
    - name: demo
      sites: [0, 0]
      masks: [2, 1]
      t: 0.5
      kind: plus
      forward_replicas: 300
      dual_replicas: 500
output:
  directory: out
"""


def write_config(tmp_path, text):
    p = tmp_path / "config.yaml"
    p.write_text(textwrap.dedent(text))
    return p


class TestParseConfig:
    def test_minimal_valid(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, MINIMAL))
        assert cfg.kind == "duality"
        assert len(cfg.pairings) == 1
        assert cfg.pairings[0].masks == (2, 1)
        assert cfg.master_seed == 99

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="no such file"):
            parse_config(tmp_path / "absent.yaml")

    def test_fitness_normalization_error_named(self, tmp_path):
        text = MINIMAL.replace("[0.0, 1.0]", "[0.0, 0.8]")
        with pytest.raises(ConfigError, match="maximum must be 1"):
            parse_config(write_config(tmp_path, text))

    def test_dominance_violation_cites_condition(self, tmp_path):
        tree = yaml.safe_load(textwrap.dedent(MINIMAL))
        tree["model"]["state_independent_rate"] = 1.2
        tree["model"]["base_measure"] = [0.5, 0.5]
        with pytest.raises(ConfigError, match="m\\*M >= mbar\\*rho"):
            build_config(tree)

    def test_all_errors_collected(self, tmp_path):
        tree = yaml.safe_load(textwrap.dedent(MINIMAL))
        tree["model"]["fitness"] = [0.2, 0.9]
        tree["experiment"]["kind"] = "bogus"
        tree["experiment"]["checks"][0]["masks"] = [9, 1]
        try:
            build_config(tree)
        except ConfigError as exc:
            joined = "\n".join(exc.errors)
            assert "fitness" in joined
            assert "experiment.kind" in joined
            assert "masks" in joined
            assert len(exc.errors) >= 3
        else:
            pytest.fail("expected a ConfigError")

    def test_bad_site_index(self, tmp_path):
        tree = yaml.safe_load(textwrap.dedent(MINIMAL))
        tree["experiment"]["checks"][0]["sites"] = [0, 5]
        with pytest.raises(ConfigError, match="site index"):
            build_config(tree)

    def test_ergodic_requires_positive_mutation(self, tmp_path):
        tree = yaml.safe_load(textwrap.dedent(MINIMAL))
        tree["experiment"]["kind"] = "ergodic"
        tree["experiment"]["initial_b"] = [0.9, 0.1]
        tree["model"]["mutation_rate"] = 0.0
        with pytest.raises(ConfigError, match="positive"):
            build_config(tree)


class TestCli:
    def test_list_experiments(self, capsys):
        assert main(["--list-experiments"]) == 0
        out = capsys.readouterr().out
        for kind in ("battery", "duality", "ergodic", "decoupling", "markov_set_dual"):
            assert kind in out

    def test_run_writes_reports_and_exit_status(self, tmp_path, capsys):
        cfg = write_config(tmp_path, MINIMAL)
        out = tmp_path / "out"
        status = main(["run", str(cfg), "--output-dir", str(out), "--no-plots"])
        assert status == 0
        records = (out / "records.csv").read_text().splitlines()
        assert records[0].startswith("experiment,check,kind,")
        assert len(records) == 2  # header + one check
        assert "demo" in records[1]
        summary = (out / "summary.txt").read_text()
        assert "version" in summary and "demo" in summary
        assert (out / "timings.csv").exists()

    def test_rerun_bit_identical_reports(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        main(["run", str(cfg), "--output-dir", str(out1), "--plots"])
        main(["run", str(cfg), "--output-dir", str(out2), "--plots"])
        for name in ("records.csv", "summary.txt", "report.png"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_seed_override_changes_records(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL)
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        main(["run", str(cfg), "--output-dir", str(out1), "--no-plots"])
        main(["run", str(cfg), "--output-dir", str(out2), "--no-plots", "--seed", "123"])
        assert (out1 / "records.csv").read_text() != (out2 / "records.csv").read_text()

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        cfg = write_config(tmp_path, MINIMAL.replace("[0.0, 1.0]", "[0.3, 1.0]"))
        assert main(["run", str(cfg)]) == 2
        assert "configuration errors" in capsys.readouterr().err

    def test_filter_selects_checks(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL)
        out = tmp_path / "filtered"
        main(["run", str(cfg), "--output-dir", str(out), "--no-plots", "--filter", "nomatch"])
        records = (out / "records.csv").read_text().splitlines()
        assert len(records) == 1  # header only

    def test_markov_experiment_runs(self, tmp_path):
        text = """
        model:
          n_types: 2
          fitness: [0.0, 1.0]
          mutation_matrix: [[0.5, 0.5], [0.5, 0.5]]
        geography: {mode: island, order: 2}
        experiment:
          kind: markov_set_dual
          master_seed: 7
          chain_replicas: 3000
        """
        cfg = write_config(tmp_path, text)
        out = tmp_path / "mk"
        status = main(["run", str(cfg), "--output-dir", str(out), "--plots"])
        assert status == 0
        assert (out / "report.png").exists()
        records = (out / "records.csv").read_text().splitlines()
        # 2-state rows plus the 5-generator grid of 3 starts x 4 times x 3 states
        assert len(records) > 100
