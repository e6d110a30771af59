import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfsmp.config import ExperimentConfig, config_fields, parse_config, serialize_config
from mfsmp.errors import ConfigurationError
from mfsmp.presets import PRESETS

MINIMAL = "[experiment]\npreset = smp-reference\n"


def test_minimal_config_has_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg == ExperimentConfig(preset="smp-reference")
    assert (cfg.T, cfg.K, cfg.M_outer, cfg.N_inner, cfg.seed) == (1.0, 64, 64, 128, 7)
    assert cfg.eps_ladder == (0.2, 0.1, 0.05, 0.025)
    assert cfg.picard_tol == 1e-3 and cfg.tol_smp == 0.02 and cfg.ridge == 1e-8
    assert cfg.mode == "conditional-law" and cfg.experiment_id == "smp-reference"


def test_negative_count():
    with pytest.raises(ConfigurationError, match="positive"):
        parse_config(MINIMAL + "[grid]\nK = -4\n")


def test_malformed_number_has_line():
    with pytest.raises(ConfigurationError, match=r"line 6: ensemble.N_inner: malformed number"):
        parse_config(MINIMAL + "\n[ensemble]\nseed = 7\nN_inner = 12x\n")


def test_missing_required_key():
    with pytest.raises(ConfigurationError, match="experiment.preset"):
        parse_config("[grid]\nK = 8\n")


@pytest.mark.parametrize(
    "extra, message",
    [
        ("[grid]\nsteps = 8\n", "unknown key grid.steps"),
        ("[plotting]\ndpi = 3\n", "unknown section"),
        ("[spike]\neps_ladder = 0.1, 0.2\n", "strictly decreasing"),
        ("[experiment]\nmode = other\n", "mode"),
        ("[control]\npolicy = 0.5\n", "U_set"),
        ("[spike]\nt0 = 1.5\n", "t0"),
        ("[tolerances]\nscheme = rk4\n", "scheme"),
    ],
)
def test_rejections(extra, message):
    text = MINIMAL + extra if not extra.startswith("[experiment]") else extra.replace("]\n", "]\npreset = zero-h\n", 1)
    with pytest.raises(ConfigurationError, match=message):
        parse_config(text)


def test_unknown_preset():
    with pytest.raises(ConfigurationError, match="unknown preset"):
        parse_config("[experiment]\npreset = nope\n")


def test_comments_and_echo():
    cfg = parse_config("# c\n[experiment]\npreset = zero-h  ; inline\nid = run1\n[output]\nout = /tmp/x\n")
    assert cfg.experiment_id == "run1"
    echo = cfg.echo()
    assert "out" not in echo and echo["U_set"] == [0.0, 1.0]
    assert set(echo) == set(config_fields()) - {"out"}


floats = st.floats(0.01, 50, allow_nan=False, allow_infinity=False)


@st.composite
def configs(draw):
    T = draw(floats)
    ladder = sorted(draw(st.lists(floats, min_size=1, max_size=5, unique=True)), reverse=True)
    U = tuple(sorted(set(draw(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=4)))))
    return ExperimentConfig(
        preset=draw(st.sampled_from(PRESETS)),
        mode=draw(st.sampled_from(["conditional-law", "state-functional"])),
        id=draw(st.sampled_from(["", "a", "run-7"])),
        kappa=draw(st.none() | floats),
        T=T,
        K=draw(st.integers(1, 512)),
        M_outer=draw(st.integers(1, 256)),
        N_inner=draw(st.integers(1, 512)),
        seed=draw(st.integers(0, 2**40)),
        U_set=U,
        blocks=draw(st.integers(1, 8)),
        policy=(draw(st.sampled_from(U)),),
        t0=draw(st.floats(0, 0.99, allow_nan=False)) * T,
        alt=draw(st.sampled_from(U)),
        eps_ladder=tuple(ladder),
        duality_eps=draw(floats),
        picard_tol=draw(floats),
        n_stderr=draw(floats),
        scheme=draw(st.sampled_from(["log", "euler"])),
    )


@settings(max_examples=80, deadline=None)
@given(configs())
def test_roundtrip(cfg):
    once = parse_config(serialize_config(cfg))
    assert once == cfg
    assert parse_config(serialize_config(once)) == once
