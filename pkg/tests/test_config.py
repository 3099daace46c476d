from pathlib import Path

import pytest

from popcluster import config
from popcluster.config import ConfigError


def write_cfg(tmp_path, text):
    (tmp_path / "m.csv").write_text("trial_id,f0\na,1\nb,2\n")
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


BASE = "seed = 3\nsubjects = P1\nsubject.P1.matrix = m.csv\n"


class TestParseText:
    def test_comments_and_whitespace(self):
        entries = config.parse_text("# header\n\n a.b = 1  # trailing\nc=x y\n")
        assert entries == {"a.b": "1", "c": "x y"}

    @pytest.mark.parametrize("text,msg", [("novalue\n", "expected"), ("a = 1\na = 2\n", "duplicate"), ("9x = 1\n", "invalid key")])
    def test_errors_carry_line(self, text, msg):
        with pytest.raises(ConfigError, match=msg):
            config.parse_text(text, "f.cfg")

    def test_format_roundtrip(self):
        entries = {"seed": "1", "sweep.k_max": "12"}
        assert config.parse_text(config.format_text(entries)) == entries


def test_int_list_ranges():
    assert config._int_list("100:2000:100") == tuple(range(100, 2001, 100))
    assert config._int_list("1, 5, 7:9:1") == (1, 5, 7, 8, 9)
    with pytest.raises(ConfigError):
        config._int_list("1:5")


class TestLoad:
    def test_defaults(self, tmp_path):
        cfg = config.load(write_cfg(tmp_path, BASE))
        assert (cfg.k_min, cfg.k_max, cfg.n_init, cfg.n_refit) == (1, 30, 100, 10)
        assert cfg.variance_threshold == 0.95 and cfg.shared_d_mode == "max"
        assert cfg.gmm.max_iter == 200 and cfg.gmm.tol == 1e-4 and cfg.gmm.reg_covar == 1e-6
        assert cfg.diagnostics.sample_sizes == (200, 500, 1000, 1500, 2000)
        assert cfg.diagnostics.seed == 3
        assert cfg.subjects[0].matrix == tmp_path / "m.csv"
        assert cfg.output_dir == tmp_path / "out"

    def test_overrides_win(self, tmp_path):
        cfg = config.load(write_cfg(tmp_path, BASE + "sweep.k_max = 4\n"), {"seed": "9", "sweep.k_max": "5"})
        assert cfg.seed == 9 and cfg.k_max == 5
        assert cfg.echo()["seed"] == "9"

    def test_ratings_and_column_kinds(self, tmp_path):
        (tmp_path / "r.csv").write_text("trial_id,x\na,1\n")
        text = BASE + "ratings = emo\nrating.emo.path = r.csv\nrating.emo.kind = continuous 0 100\nrating.emo.column.x = discrete\n"
        cfg = config.load(write_cfg(tmp_path, text))
        (r,) = cfg.ratings
        assert r.default_kind.hi == 100 and r.kinds["x"].kind == "discrete"

    def test_d_rule_int_or_float(self, tmp_path):
        assert config.load(write_cfg(tmp_path, BASE + "diagnostics.d_rule = 3\n")).diagnostics.d_rule == 3
        assert config.load(write_cfg(tmp_path, BASE + "diagnostics.d_rule = 0.9\n")).diagnostics.d_rule == 0.9

    @pytest.mark.parametrize(
        "extra,msg",
        [
            ("bogus = 1\n", "unknown keys"),
            ("sweep.k_min = 0\n", "K grid"),
            ("pca.variance_threshold = 1.5\n", "variance_threshold"),
            ("pca.shared_d_mode = median\n", "shared_d_mode"),
            ("stability.n_refit = 1\n", "n_refit"),
            ("threads = 0\n", "threads"),
            ("interpret.regions = V1\n", "region_file"),
            ("gmm.tol = abc\n", "abc"),
        ],
    )
    def test_invalid(self, tmp_path, extra, msg):
        with pytest.raises(ConfigError, match=msg):
            config.load(write_cfg(tmp_path, BASE + extra))

    def test_seed_mandatory(self, tmp_path):
        with pytest.raises(ConfigError, match="seed"):
            config.load(write_cfg(tmp_path, "subjects = P1\nsubject.P1.matrix = m.csv\n"))

    def test_missing_files(self, tmp_path):
        with pytest.raises(ConfigError, match="missing input files"):
            config.load(write_cfg(tmp_path, BASE.replace("m.csv", "nope.csv")))
        cfg = config.load(write_cfg(tmp_path, BASE.replace("m.csv", "nope.csv")), check_paths=False)
        assert cfg.subjects[0].matrix == Path(tmp_path / "nope.csv")

    def test_unreadable_config(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            config.load(tmp_path / "absent.cfg")
