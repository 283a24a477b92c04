import configparser

import pytest

from chl.config import KEY_DOCS, RunConfig, config_help, load_config, parse_config, to_parser
from chl.errors import ConfigError


class TestLoadConfig:
    def test_defaults(self):
        cfg = load_config(apply_env=False)
        assert cfg.loss.tau == 0.01
        assert cfg.loss.lambda_neg == 2.0
        assert cfg.finetune.eta == 0.5
        assert cfg.relax_threshold == 0.5

    def test_tiny_file(self, tiny_config, tiny_manifest):
        cfg = load_config(tiny_config(), apply_env=False)
        assert cfg.encoder.channels == (4, 8)
        assert cfg.pretrain.epochs == 2
        assert cfg.finetune.hidden == (8, 4)
        assert cfg.stain_iterations == 5
        assert cfg.manifest == str(tiny_manifest)

    def test_relative_manifest_resolved_from_config_dir(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[run]\nmanifest = data/m.csv\n")
        assert load_config(path, apply_env=False).manifest == str(tmp_path / "data/m.csv")

    def test_unknown_key(self, tiny_config):
        with pytest.raises(ConfigError, match=r"unknown config key \[extra\] temperature"):
            load_config(tiny_config("[extra]\ntemperature = 0.1\n"), apply_env=False)

    def test_bad_values(self):
        for text in ("[loss]\ntau = -1\n", "[run]\nrelax_threshold = 1.0\n", "[augment]\np_blur = 2\n",
                     "[run]\nskip_relax = maybe\n", "[run]\nfolds = 7\n", "[encoder]\nchannels = x\n"):
            parser = configparser.ConfigParser()
            parser.read_string(text)
            with pytest.raises(ConfigError):
                parse_config(parser)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.ini")


class TestSeedOverride:
    def test_environment_seed(self, tiny_config, monkeypatch):
        monkeypatch.setenv("CHL_SEED", "17")
        cfg = load_config(tiny_config())
        assert cfg.seed == 17
        assert cfg.pretrain.rng_seed == cfg.relax.rng_seed == cfg.finetune.rng_seed == 17

    def test_bad_environment_seed(self, tiny_config, monkeypatch):
        monkeypatch.setenv("CHL_SEED", "abc")
        with pytest.raises(ConfigError, match="CHL_SEED"):
            load_config(tiny_config())


class TestResolvedConfig:
    def test_every_key_written_and_round_trips(self, tiny_config):
        cfg = load_config(tiny_config(), apply_env=False)
        parser = to_parser(cfg)
        written = {(s, k) for s in parser.sections() for k in parser[s]}
        assert written == set(KEY_DOCS)
        again = to_parser(parse_config(parser))
        assert {s: dict(again[s]) for s in again.sections()} == {s: dict(parser[s]) for s in parser.sections()}

    def test_help_lists_every_key(self):
        text = config_help()
        for _, key in KEY_DOCS:
            assert key in text

    def test_pipeline_matches_probabilities(self):
        cfg = RunConfig(augment_probs={"crop": 0.1, "jitter": 0.2, "blur": 0.3, "geometric": 0.4, "hed": 0.0})
        assert [s.probability for s in cfg.pipeline().steps] == [0.1, 0.2, 0.3, 0.4, 0.0]
