from pathlib import Path

import pytest

from hybridmap.config import RunConfig, load_config, parse_config
from hybridmap.errors import FormatError, InputError

DEFAULT_INI = Path(__file__).resolve().parents[1] / "configs" / "default.ini"


def test_default_file_matches_defaults():
    assert load_config(DEFAULT_INI) == RunConfig()


def test_overrides_and_types():
    cfg = parse_config("""
[model]
log2_table_size = 12
dtype = float64
[train]
max_iters = 3
use_priors = no
early_stop = off
[optimizer]
lr_geo_mlp = 5e-4
beta2 = 0.999
[run]
seed = 7
""")
    assert cfg.model.log2_table_size == 12 and cfg.model.dtype == "float64"
    assert cfg.train.max_iters == 3 and cfg.train.use_priors is False and cfg.train.early_stop == "off"
    assert cfg.optimizer.lr["geo_mlp"] == 5e-4 and cfg.optimizer.lr["vertex_sdf"] == 1e-2
    assert cfg.optimizer.beta2 == 0.999 and cfg.seed == 7


def test_truncation_shared():
    cfg = parse_config("[model]\ntruncation = 0.08\n")
    assert cfg.train.truncation == 0.08
    cfg = parse_config("[train]\ntruncation = 0.03\n")
    assert cfg.model.truncation == 0.03
    with pytest.raises(InputError):
        parse_config("[model]\ntruncation = 0.03\n[train]\ntruncation = 0.04\n")


@pytest.mark.parametrize("text", [
    "[model]\nbogus = 1\n",
    "[nope]\nx = 1\n",
    "[train]\nmax_iters = many\n",
    "[train]\nuse_priors = maybe\n",
    "[optimizer]\nlr_unknown = 1\n",
    "[optimizer]\nmomentum = 1\n",
    "[run]\nname = x\n",
    "not an ini",
])
def test_rejects(text):
    with pytest.raises(FormatError):
        parse_config(text)


def test_invalid_value_rejected_by_dataclass():
    with pytest.raises(InputError):
        parse_config("[train]\nkeyframes_per_iter = 0\n")


def test_missing_file(tmp_path):
    with pytest.raises(InputError):
        load_config(tmp_path / "none.ini")
