import json

import pytest

from dcss.config import ExperimentConfig
from dcss.errors import ValidationError


def test_defaults_honor_documented_values():
    c = ExperimentConfig()
    assert c.tau == 0.3 and c.M == 30 and c.m == 6 and c.wd == 0.05 and c.lr_power == 0.9
    assert c.epochs == 5 and c.batch_size == 8 and c.seed == 3
    assert (c.gamma_pos, c.gamma_neg, c.asl_weight) == (0.0, 2.0, 1.0)
    assert c.binarize_threshold == 0.5 and c.background_in_miou


def test_unknown_keys_listed():
    with pytest.raises(ValidationError, match=r"\['foo', 'zeta'\]"):
        ExperimentConfig.from_dict({"foo": 1, "zeta": 2, "tau": 0.2})


def test_all_problems_reported():
    with pytest.raises(ValidationError) as e:
        ExperimentConfig(tau=1.5, rank=0, lr=-1.0, epochs="5")
    msg = str(e.value)
    for key in ("tau", "rank", "lr", "epochs"):
        assert key in msg


def test_rank_bounded_by_d():
    with pytest.raises(ValidationError, match="rank"):
        ExperimentConfig(rank=64)


def test_json_round_trip(tmp_path):
    c = ExperimentConfig(tau=0.2, schedule="4-1", scaling=0.5)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(c.to_dict()))
    assert ExperimentConfig.from_json(p) == c
    p.write_text("{nope")
    with pytest.raises(ValidationError):
        ExperimentConfig.from_json(p)
    p.write_text("[1, 2]")
    with pytest.raises(ValidationError):
        ExperimentConfig.from_json(p)
