"""Command-line front end: config validation, runs, resume, verify, bench."""

import csv
import json
import os

import numpy as np
import pytest

from blockpeps import cli
from blockpeps.cli import (EXIT_BAD_CONFIG, EXIT_CAPACITY, EXIT_OK,
                           EXIT_SNAPSHOT, ConfigError, parse_config_text,
                           serialize_config)


def config_text(**overrides):
    base = {
        "kind": "tfi", "lx": 2, "ly": 2, "g": 3.5,
        "p": 2, "chi": 4, "eta": 8, "tau": 0.1, "iterations": 4,
        "seed": 1, "checkpoint_period": 2, "directory": "out",
    }
    base.update(overrides)
    return (
        "[model]\n"
        f"kind = {base['kind']}\n"
        f"lx = {base['lx']}\n"
        f"ly = {base['ly']}\n"
        f"g = {base['g']}\n"
        "[run]\n"
        f"p = {base['p']}\n"
        f"chi = {base['chi']}\n"
        f"eta = {base['eta']}\n"
        f"tau = {base['tau']}\n"
        f"iterations = {base['iterations']}\n"
        f"seed = {base['seed']}\n"
        f"checkpoint_period = {base['checkpoint_period']}\n"
        "[output]\n"
        f"directory = {base['directory']}\n"
    )


def write_config(tmp_path, name="cfg.ini", **overrides):
    path = tmp_path / name
    path.write_text(config_text(**overrides))
    return str(path)


def read_trace(out_dir):
    with open(os.path.join(out_dir, "trace.csv"), newline="") as fh:
        return list(csv.reader(fh))


def read_summary(out_dir):
    with open(os.path.join(out_dir, "summary.json")) as fh:
        return json.load(fh)


class TestConfigParsing:
    def test_round_trips_through_serializer(self):
        cfg = parse_config_text(config_text())
        again = parse_config_text(serialize_config(cfg))
        assert again.run == cfg.run
        assert again.formats == cfg.formats

    def test_unknown_key_reports_line_number(self):
        text = config_text() + "typo_key = 1\n"
        with pytest.raises(ConfigError, match=r"line \d+.*typo_key"):
            parse_config_text(text)

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config_text(config_text() + "[extra]\nx = 1\n")

    def test_missing_required_key_rejected(self):
        text = config_text().replace("iterations = 4\n", "")
        with pytest.raises(ConfigError, match="iterations"):
            parse_config_text(text)

    def test_bad_value_reports_line(self):
        text = config_text().replace("chi = 4", "chi = four")
        with pytest.raises(ConfigError, match=r"line \d+.*chi"):
            parse_config_text(text)

    def test_bad_model_kind_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text(config_text(kind="xy"))

    def test_bad_output_format_rejected(self):
        with pytest.raises(ConfigError, match="format"):
            parse_config_text(config_text() + "formats = csv,xml\n")

    def test_boolean_parsing(self):
        cfg = parse_config_text(config_text() + "oracle = off\n")
        assert cfg.oracle is False
        with pytest.raises(ConfigError):
            parse_config_text(config_text() + "oracle = maybe\n")


class TestOverrides:
    def test_env_overrides_file_and_flags_override_env(self, tmp_path,
                                                       monkeypatch):
        path = write_config(tmp_path)
        monkeypatch.setenv("BLOCKPEPS_SEED", "77")
        monkeypatch.setenv("BLOCKPEPS_OUT", str(tmp_path / "env_out"))
        cfg = cli.load_config(path)
        assert cfg.run.seed == 77
        assert cfg.out_dir == str(tmp_path / "env_out")

        class Args:
            out = str(tmp_path / "flag_out")
            seed = 5
            deterministic = True
            oracle_cap = 1000

        cfg = cli.load_config(path, Args())
        assert cfg.run.seed == 5
        assert cfg.out_dir == str(tmp_path / "flag_out")
        assert cfg.deterministic is True
        assert cfg.oracle_cap == 1000

    def test_missing_file_is_config_error(self):
        with pytest.raises(ConfigError):
            cli.load_config("/nonexistent/cfg.ini")


class TestRunCommand:
    def test_end_to_end_outputs(self, tmp_path):
        out = str(tmp_path / "out")
        path = write_config(tmp_path, directory=out)
        assert cli.main(["run", "--config", path]) == EXIT_OK

        rows = read_trace(out)
        assert rows[0] == ["iteration", "alpha", "energy", "norm",
                           "cum_discard", "wall_ms"]
        assert len(rows) == 1 + 4 * 2  # header + iterations * block size

        summary = read_summary(out)
        assert len(summary["final_energies"]) == 2
        assert summary["reference_energies"] is not None
        assert max(summary["relative_errors"]) < 0.2
        assert summary["versions"]["blockpeps"]
        # checkpoints at iterations 1 and 3 (period 2) including the last
        assert os.path.exists(os.path.join(out, "checkpoint_000001.state"))
        assert os.path.exists(os.path.join(out, "checkpoint_000003.state"))
        assert not os.path.exists(os.path.join(out, ".lock"))

    def test_bad_config_exit_code(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[model]\nkind = tfi\n")
        assert cli.main(["run", "--config", str(path)]) == EXIT_BAD_CONFIG

    def test_missing_config_flag(self, monkeypatch, capsys):
        monkeypatch.delenv("BLOCKPEPS_CONFIG", raising=False)
        assert cli.main(["run"]) == EXIT_BAD_CONFIG

    def test_locked_output_directory(self, tmp_path):
        out = tmp_path / "out"
        out.mkdir()
        (out / ".lock").write_text("123")
        path = write_config(tmp_path, directory=str(out))
        assert cli.main(["run", "--config", path]) == EXIT_BAD_CONFIG


class TestResumeCommand:
    def run_split_and_full(self, tmp_path):
        full_out = str(tmp_path / "full")
        path_full = write_config(tmp_path, "full.ini", iterations=6,
                                 directory=full_out)
        assert cli.main(["run", "--config", path_full]) == EXIT_OK

        part_out = str(tmp_path / "part")
        path_part = write_config(tmp_path, "part.ini", iterations=3,
                                 directory=part_out)
        assert cli.main(["run", "--config", path_part]) == EXIT_OK
        ckpt = os.path.join(part_out, "checkpoint_000002.state")
        assert cli.main(["resume", ckpt, "3"]) == EXIT_OK
        return full_out, part_out

    def test_split_run_equals_single_run(self, tmp_path):
        full_out, part_out = self.run_split_and_full(tmp_path)
        e_full = read_summary(full_out)["final_energies"]
        e_part = read_summary(part_out)["final_energies"]
        assert np.allclose(e_full, e_part, rtol=1e-12, atol=1e-12)
        # the appended trace covers all six iterations
        full_rows = read_trace(full_out)
        part_rows = read_trace(part_out)
        assert len(part_rows) == len(full_rows)
        for a, b in zip(full_rows[1:], part_rows[1:]):
            assert a[0] == b[0] and a[1] == b[1]
            if a[2] and b[2]:
                assert abs(float(a[2]) - float(b[2])) \
                    <= 1e-12 * max(1.0, abs(float(a[2])))

    def test_zero_extra_iterations_is_noop(self, tmp_path):
        out = str(tmp_path / "out")
        path = write_config(tmp_path, directory=out)
        assert cli.main(["run", "--config", path]) == EXIT_OK
        ckpt = os.path.join(out, "checkpoint_000003.state")
        assert cli.main(["resume", ckpt, "0"]) == EXIT_OK

    def test_corrupt_snapshot_exit_code(self, tmp_path):
        out = str(tmp_path / "out")
        path = write_config(tmp_path, directory=out)
        assert cli.main(["run", "--config", path]) == EXIT_OK
        ckpt = os.path.join(out, "checkpoint_000003.state")
        raw = open(ckpt, "rb").read()
        with open(ckpt, "wb") as fh:
            fh.write(raw[:40])
        assert cli.main(["resume", ckpt, "2"]) == EXIT_SNAPSHOT

    def test_missing_sidecar_exit_code(self, tmp_path):
        out = str(tmp_path / "out")
        path = write_config(tmp_path, directory=out)
        assert cli.main(["run", "--config", path]) == EXIT_OK
        ckpt = os.path.join(out, "checkpoint_000003.state")
        os.remove(os.path.join(out, "checkpoint_000003.json"))
        assert cli.main(["resume", ckpt, "2"]) == EXIT_SNAPSHOT


class TestVerifyCommand:
    def test_all_checks_pass(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert cli.main(["verify", "--config", path]) == EXIT_OK
        lines = [l for l in capsys.readouterr().out.splitlines() if l]
        assert len(lines) >= 4
        assert all(l.startswith("PASS") for l in lines)

    def test_capacity_exit_code(self, tmp_path):
        path = write_config(tmp_path, lx=4, ly=4)
        assert cli.main(["verify", "--config", path,
                         "--oracle-cap", "100"]) == EXIT_CAPACITY


class TestBenchCommand:
    def test_prints_timing_row(self, tmp_path, capsys):
        path = write_config(tmp_path, iterations=1)
        assert cli.main(["bench", "--config", path]) == EXIT_OK
        out = capsys.readouterr().out
        assert "seconds/iter" in out
