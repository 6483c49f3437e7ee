import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from stochplatoon.config import bundled_configs, config_hash, evaluate_coefficient, load_config, parse_config
from stochplatoon.errors import ConfigError
from stochplatoon.lti import evaluate
from stochplatoon.platoon import LeaderKind, NoiseDistribution

from conftest import lead_controller


def _doc(**changes):
    doc = load_config("paper_h3.2").normalized()
    doc.update(changes)
    return doc


def test_bundled_configs_present():
    assert {"paper_h3.2", "paper_h2.4"} <= set(bundled_configs())


@pytest.mark.parametrize("name, h", [("paper_h3.2", 3.2), ("paper_h2.4", 2.4)])
def test_bundled_config_builds_example(name, h):
    cfg = load_config(name)
    spec = cfg.build_spec()
    assert spec.h == h and spec.N == 20 and spec.P_d == 0.6
    assert spec.noise_distribution is NoiseDistribution.GAUSSIAN
    assert spec.leader.kind is LeaderKind.PIECEWISE
    z = np.exp(1j * np.linspace(0.1, 3.0, 5))
    assert np.allclose(evaluate(spec.K, z), evaluate(lead_controller(h), z), rtol=1e-14)
    assert cfg.monte_carlo_spec().N == 5


def test_load_from_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(_doc(headway=4.0)))
    assert load_config(path).headway == 4.0
    with pytest.raises(ConfigError, match="bundled"):
        load_config(tmp_path / "missing.yaml")
    path.write_text("plant: [1, 2\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(path)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="extra_key"):
        parse_config(_doc(extra_key=1))
    doc = _doc()
    doc["noise"]["colour"] = "white"
    with pytest.raises(ConfigError, match="noise.colour"):
        parse_config(doc)


def test_nonpositive_headway_message():
    with pytest.raises(ConfigError, match="h > 0 is the time headway constant"):
        parse_config(_doc(headway=0.0))
    with pytest.raises(ConfigError, match="h > 0 is the time headway constant"):
        load_config("paper_h3.2").build_spec(h=-1.0)


def test_bad_field_values_name_their_location():
    with pytest.raises(ConfigError, match="noise.variance"):
        parse_config(_doc(noise={"variance": -1.0}))
    with pytest.raises(ConfigError, match="followers"):
        parse_config(_doc(followers=0))
    with pytest.raises(ConfigError, match="mapping"):
        parse_config([1, 2])


@pytest.mark.parametrize(
    "expr, value",
    [(2, 2.0), ("1.35/(1+h)", 1.35 / 4.2), ("-h**2 + 0.5*h", -3.2**2 + 1.6), ("(h - 1) / 2", 1.1)],
)
def test_coefficient_expressions(expr, value):
    assert abs(evaluate_coefficient(expr, 3.2) - value) < 1e-14


@pytest.mark.parametrize(
    "expr",
    ["__import__('os')", "h.real", "abs(h)", "[1][0]", "x + 1", "1/(h-3.2)", "1e308*10", "lambda: 1", True],
)
def test_coefficient_expressions_rejected(expr):
    with pytest.raises(ConfigError):
        evaluate_coefficient(expr, 3.2)


def test_round_trip_and_hash():
    cfg = load_config("paper_h3.2")
    again = parse_config(yaml.safe_load(yaml.safe_dump(cfg.normalized())))
    assert again.normalized() == cfg.normalized()
    assert config_hash(again) == config_hash(cfg)
    assert config_hash(cfg.with_overrides(headway=3.3)) != config_hash(cfg)
    assert len(config_hash(cfg)) == 64


def test_dotted_overrides():
    cfg = load_config("paper_h3.2").with_overrides(**{"monte_carlo.seed": 5, "noise.variance": 0.1})
    assert cfg.monte_carlo.seed == 5 and cfg.build_spec().P_d == 0.1


def test_initial_condition_forms():
    base = load_config("paper_h3.2").with_overrides(followers=2)
    n = 3
    cfg = base.with_overrides(initial_condition={"mu": 0.5, "P": 0.1})
    init = cfg.build_spec().initial_condition()
    assert np.allclose(init.mu_xi0, 0.5) and np.allclose(init.P_xi0, 0.1 * np.eye(2 * n))
    # a prefix keeps the leading blocks
    sub = cfg.build_spec(N=1).initial_condition()
    assert sub.mu_xi0.size == n
    explicit = base.with_overrides(initial_condition={"mu": list(range(2 * n)), "P": "zero"})
    assert np.array_equal(explicit.build_spec().initial_condition().mu_xi0, np.arange(2 * n))
    with pytest.raises(ConfigError, match="n\\*N"):
        base.with_overrides(initial_condition={"mu": [1.0, 2.0]}).build_spec()
    with pytest.raises(ConfigError, match="initial_condition"):
        base.with_overrides(initial_condition={"P": [[1.0, 0.0], [0.0, 1.0]]}).build_spec()
    with pytest.raises(ConfigError, match="beyond"):
        cfg.build_spec(N=3)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(0.0, 5.0), st.integers(1, 50), st.integers(0, 2**64 - 1))
def test_round_trip_is_idempotent(h, P_d, N, seed):
    cfg = load_config("paper_h3.2").with_overrides(
        headway=h, followers=N, **{"noise.variance": P_d, "monte_carlo.seed": seed}
    )
    once = parse_config(cfg.normalized())
    assert once.normalized() == cfg.normalized()
    assert config_hash(once) == config_hash(cfg)
