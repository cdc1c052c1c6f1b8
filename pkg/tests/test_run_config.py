import textwrap

import pytest

from errors import ConfigError
from run_config import RunConfig, apply_overrides, dump_run_config, load_run_config


def _write(tmp_path, text):
    path = tmp_path / "run.yaml"
    path.write_text(textwrap.dedent(text))
    return str(path)


def test_defaults_are_valid():
    config = load_run_config(environ={})
    assert config.method == "gasnitrom"
    assert config.train.adam.weight_decay == pytest.approx(1e-2)
    assert config.train.penalty.weight == pytest.approx(1e-3)


def test_yaml_file(tmp_path):
    path = _write(tmp_path, """
        method: nitrom
        r: 3
        data:
          fom: "toy:nu=20"
          amplitudes: [0.1, 0.2]
        train:
          horizons: [5, 10]
          blocks:
            - [projection, 4]
            - {joint: 8}
          lbfgs: {memory: 4}
          penalty: {weight: 1.0e-2}
        test:
          protocol: sine
          amplitudes: [0.5]
    """)
    config = load_run_config(path, environ={})
    assert config.method == "nitrom" and config.r == 3
    assert config.data.amplitudes == [0.1, 0.2]
    assert config.train.horizons == [5.0, 10.0]
    assert config.train.blocks == [("projection", 4), ("joint", 8)]
    assert config.train.lbfgs.memory == 4
    assert config.train.penalty.weight == pytest.approx(1e-2)
    assert config.test.protocol == "sine"


@pytest.mark.parametrize("text, field", [
    ("train:\n  foo: 1\n", "train.foo"),
    ("r: two\n", "r"),
    ("train:\n  blocks: [[joint]]\n", "train.blocks"),
    ("data:\n  binary: 3\n", "data.binary"),
])
def test_bad_fields_are_named(tmp_path, text, field):
    with pytest.raises(ConfigError) as info:
        load_run_config(_write(tmp_path, text), environ={})
    assert info.value.field == field


def test_invalid_yaml(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(_write(tmp_path, "train: [unclosed\n"), environ={})


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_run_config(str(tmp_path / "absent.yaml"), environ={})


def test_environment_then_flags(tmp_path):
    environ = {"STABLEROM_OUTPUT_DIR": str(tmp_path / "env"), "STABLEROM_THREADS": "3"}
    config = load_run_config(environ=environ)
    assert config.output_dir == str(tmp_path / "env")
    assert config.threads == 3 and config.train.threads == 3

    config = load_run_config(overrides={"threads": 2, "output_dir": None}, environ=environ)
    assert config.threads == 2
    assert config.output_dir == str(tmp_path / "env")


def test_bad_environment_threads():
    with pytest.raises(ConfigError):
        load_run_config(environ={"STABLEROM_THREADS": "many"})


def test_unknown_override():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"train.nothing": 1})


@pytest.mark.parametrize("overrides", [
    {"method": "dmd"},
    {"r": 0},
    {"threads": 0},
    {"method": "pod-galerkin"},
    {"data.protocol": "chirp"},
    {"data.samples": 1},
    {"data.preproject": 1, "r": 2},
    {"opinf.reg": -1.0},
    {"opinf.init_route": "cholesky"},
    {"train.optimizer": "sgd"},
])
def test_validation(overrides):
    with pytest.raises(ConfigError):
        load_run_config(overrides=overrides, environ={})


def test_dump_and_reload(tmp_path):
    config = load_run_config(overrides={"method": "nitrom", "r": 3, "threads": 2}, environ={})
    path = str(tmp_path / "config.yaml")
    dump_run_config(config, path)
    assert load_run_config(path, environ={}) == config
