from pathlib import Path

import pytest

from modrl_ta import config
from modrl_ta.config import ConfigError, ExperimentConfig

ROOT = Path(__file__).resolve().parents[1]


class TestDefaults:
    def test_paper_hyperparameters(self):
        cfg = ExperimentConfig()
        assert cfg.training.gamma == 0.999
        assert cfg.training.sync_period == 200
        assert (cfg.cem.population, cfg.cem.elite, cfg.cem.generations) == (100, 10, 50)
        assert [f for _, f in cfg.pda.mix_stages] == [0.0, 0.1, 0.3, 0.6, 1.0]

    def test_env_config(self):
        ec = ExperimentConfig().env_config
        assert ec.n_positions == 10 and ec.gamma == 0.999 and ec.objective_ids == ["click", "order"]


class TestParsing:
    def test_roundtrip(self):
        cfg = ExperimentConfig().replace(
            experiment={"seed": 42, "label": "x"},
            ablation={"metric_weights": {"click": 1.0, "order": 2.5}, "use_cem": False},
            pda={"mix_stages": ((0, 0.0), (5, 0.25), (9, 1.0))},
        )
        assert config.loads(config.dumps(cfg)) == cfg

    def test_partial_file(self):
        cfg = config.loads("[training]\nlr = 0.01\n[cem]\nfitness = rollout\n")
        assert cfg.training.lr == 0.01 and cfg.cem.fitness == "rollout"
        assert cfg.training.gamma == 0.999

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            config.loads("[training]\nlearning_rate = 0.1\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            config.loads("[optim]\nlr = 0.1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            config.loads("[training]\nbatch_size = many\n")

    @pytest.mark.parametrize(
        "text",
        [
            "[training]\ngamma = 1.5\n",
            "[cem]\nelite = 200\n",
            "[cem]\ntarget = gmv\n",
            "[ablation]\ndata_mode = mixed\n",
            "[ablation]\nfixed_weights = click:1\n",
            "[env]\nn_positions = 40\n",
            "[pda]\nmix_stages = 0:0.5, 10:1.0\n",
        ],
    )
    def test_range_checks(self, text):
        with pytest.raises(ConfigError):
            config.loads(text)

    def test_bundled_scenario(self):
        cfg = config.load(ROOT / "configs" / "ablation.ini")
        assert cfg.cem.fitness == "rollout" and cfg.env.fatigue == 0.1

    def test_replace_unknown(self):
        with pytest.raises(ConfigError):
            ExperimentConfig().replace(optim={"lr": 1})
