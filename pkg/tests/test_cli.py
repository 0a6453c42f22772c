import csv

import numpy as np
import pytest

from pomfg import cli
from pomfg.config import parse_config
from pomfg.errors import ConfigError, NumericalError


def write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestConfig:
    def test_defaults(self):
        cfg = parse_config()
        assert cfg.preset == "linear-gaussian" and cfg.model.dt == 1e-3
        assert cfg.model.grid.k == 2 and cfg.mode == "innovation" and cfg.filter_kind == "grid"

    def test_benes_keeps_own_step(self):
        cfg = parse_config(text="[run]\npreset = benes-quadratic\n")
        assert cfg.is_benes and cfg.model.dt == 0.01

    def test_unknown_key_cites_line(self, tmp_path):
        path = write(tmp_path, "[run]\nseed = 1\n\n[model]\nsigma = 1.0\nbogus = 2\n")
        with pytest.raises(ConfigError, match=r"run\.ini:6: unknown key 'bogus' in \[model\]"):
            parse_config(path)

    def test_sigma_positive(self, tmp_path):
        with pytest.raises(ConfigError, match=r":3: sigma must be positive"):
            parse_config(write(tmp_path, "[model]\nT = 1\nsigma = 0\n"))

    def test_cfl(self):
        with pytest.raises(ConfigError, match="CFL"):
            parse_config(text="[model]\ndt = 0.1\n")
        assert parse_config(text="[model]\ndt = 0.1\n[filter]\nkind = none\n").model.dt == 0.1

    @pytest.mark.parametrize("text", ["[nope]\na = 1\n", "[filter]\nkind = kalman\n", "[run]\npreset = x\n",
                                      "[experiment]\ndamping = 0\n", "[experiment]\nreplications = abc\n",
                                      "[run]\npreset = benes-quadratic\n[grid]\nn_nodes = 10\n"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text=text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "absent.ini")

    def test_hash_survives_round_trip(self):
        cfg = parse_config(text="[run]\npreset = mean-reversion-coupled\nseed = 4\n[experiment]\nn_values = 8,16\n")
        again = parse_config(text=cfg.to_ini())
        assert again.hash == cfg.hash and again.experiment["n_values"] == (8, 16)

    def test_seed_override_changes_hash(self):
        cfg = parse_config()
        other = cfg.with_seed(9)
        assert other.seed == 9 and other.model.seed == 9 and other.hash != cfg.hash


class TestMain:
    def test_filter_demo_tracks_kalman(self, tmp_path):
        cfg = write(tmp_path, "[model]\nT = 0.5\n[filter]\nsnapshots = 2\n")
        assert cli.main(["filter-demo", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        with open(tmp_path / "o" / "filter.csv") as fh:
            last = list(csv.DictReader(fh))[-1]
        assert float(last["filter_mean"]) == pytest.approx(float(last["kb_mean"]), rel=0.02)
        assert float(last["filter_var"]) == pytest.approx(float(last["kb_var"]), rel=0.02)

    def test_manifest_lists_existing_files(self, tmp_path):
        cfg = write(tmp_path, "[model]\nT = 0.05\n")
        cli.main(["filter-demo", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "3"])
        man = cli.RunManifest.read(tmp_path / "o" / cli.MANIFEST)
        assert man.seed == 3 and "config.ini" in man.files
        assert all((tmp_path / "o" / f).is_file() for f in man.files)
        assert parse_config(tmp_path / "o" / "config.ini").hash == man.config_hash

    def test_solve_mfg_coupling_free(self, tmp_path):
        cfg = write(tmp_path, "[run]\npreset = benes-quadratic\n[model]\ngamma = 0\nt = 0.3\n"
                              "[experiment]\nm = 100\n")
        assert cli.main(["solve-mfg", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        rows = (tmp_path / "o" / "fixed_point.csv").read_text().splitlines()
        assert len(rows) == 2 and float(rows[1].split(",")[1]) == 0.0

    def test_exit_code_config(self, tmp_path, capsys):
        cfg = write(tmp_path, "[model]\nbogus = 1\n")
        assert cli.main(["filter-demo", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_exit_code_wrong_preset(self, tmp_path):
        assert cli.main(["benes-demo", "--out", str(tmp_path / "o")]) == 2

    def test_exit_code_blowup(self, tmp_path):
        cfg = write(tmp_path, "[model]\nm0 = 9.5\nT = 0.05\n")
        assert cli.main(["filter-demo", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4

    def test_exit_code_numerical(self, tmp_path, monkeypatch):
        def boom(cfg, out):
            raise NumericalError("non-finite")
        monkeypatch.setitem(cli.RUNNERS, "distances", boom)
        assert cli.main(["distances", "--out", str(tmp_path / "o")]) == 3

    def test_threads_do_not_change_output(self, tmp_path):
        cfg = write(tmp_path, "[model]\nT = 0.05\n")
        for n in (1, 4):
            cli.main(["filter-demo", "--config", str(cfg), "--out", str(tmp_path / f"o{n}"), "--threads", str(n)])
        a, b = (np.loadtxt(tmp_path / f"o{n}" / "filter.csv", delimiter=",", skiprows=1) for n in (1, 4))
        assert np.array_equal(a, b)
