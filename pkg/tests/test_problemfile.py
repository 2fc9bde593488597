import numpy as np
import pytest

from klcontrol import problemfile
from klcontrol.errors import ValidationError

CHAIN = """\
kind: chain
horizon: 2
start: 1
kernel:
  - [0.9, 0.1]
  - [0.2, 0.8]
state_cost: [0.0, 1.0]
"""


def test_chain_broadcasts_kernel_and_cost():
    prob, start = problemfile.build_chain(problemfile.parse(CHAIN))
    assert start == 1
    assert prob.kernel.shape == (2, 2, 2)
    assert prob.state_cost.shape == (3, 2)
    np.testing.assert_array_equal(prob.kernel[1], [[0.9, 0.1], [0.2, 0.8]])


def test_unknown_field_strict_names_line():
    with pytest.raises(ValidationError, match=r"colour \(line 3\): unknown field"):
        problemfile.parse("kind: chain\nhorizon: 1\ncolour: red\nstart: 0\nkernel: [[1]]\nstate_cost: [0]\n")


def test_unknown_field_lenient_warns():
    pf = problemfile.parse(CHAIN + "colour: red\n", strict=False)
    assert len(pf.warnings) == 1 and "colour" in pf.warnings[0] and "line 8" in pf.warnings[0]


def test_unknown_nested_field():
    text = "kind: blocks\nn: 2\nm: 2\nhorizon: 1\nstrength: 1\ninitial_state: [1, 1]\ncvm:\n  tolerance: 1\n"
    with pytest.raises(ValidationError, match=r"cvm/tolerance \(line 8\)"):
        problemfile.parse(text)


def test_missing_required_field():
    with pytest.raises(ValidationError, match="horizon"):
        problemfile.parse("kind: chain\nstart: 0\nkernel: [[1]]\nstate_cost: [0]\n")


@pytest.mark.parametrize("text", ["kind: nope\n", "- 1\n- 2\n", "kind: [unclosed\n"])
def test_bad_documents(text):
    with pytest.raises(ValidationError):
        problemfile.parse(text)


def test_nonstochastic_row_is_named():
    text = CHAIN.replace("[0.2, 0.8]", "[0.2, 0.7]")
    with pytest.raises(ValidationError, match=r"kernel.*row 1"):
        problemfile.build_chain(problemfile.parse(text))


def test_bad_start():
    with pytest.raises(ValidationError, match="start"):
        problemfile.build_chain(problemfile.parse(CHAIN.replace("start: 1", "start: 5")))


def test_non_integer_horizon():
    with pytest.raises(ValidationError, match=r"horizon \(line 2\)"):
        problemfile.build_chain(problemfile.parse(CHAIN.replace("horizon: 2", "horizon: two")))


def test_blocks_symmetric_and_cvm_options():
    text = ("kind: blocks\nn: 6\nm: 4\nhorizon: 3\nstrength: 10\ninitial_state: symmetric\nsolver: cvm\n"
            "cvm:\n  outer_tolerance: 1e-5\n  inner_iterations: 20\n")
    cfg = problemfile.build_blocks(problemfile.parse(text))
    assert cfg.initial_state == (2, 0, 0, 2, 0, 0)
    assert cfg.solver == "cvm"
    assert cfg.cvm_options.outer_tolerance == 1e-5
    assert cfg.cvm_options.inner_iterations == 20


def test_blocks_solver_flag_overrides_file():
    text = "kind: blocks\nn: 4\nm: 2\nhorizon: 3\nstrength: 10\ninitial_state: [1, 0, 1, 0]\nsolver: cvm\n"
    assert problemfile.build_blocks(problemfile.parse(text), "exact").solver == "exact"


def test_factored_file():
    pf = problemfile.load("problems/factored_two_agents.yaml")
    prob = problemfile.build_factored(pf)
    assert prob.horizon >= 1
    assert len(prob.names) == 2


def test_path_integral_file():
    setup = problemfile.build_path_integral(problemfile.load("problems/path_integral_quadratic.yaml"), seed=3)
    assert setup.seed == 3
    assert setup.dynamics.dimension == setup.x0.size


def test_path_integral_unknown_builtin():
    text = "kind: path-integral\nhorizon: 1\nnoise_covariance: [[1]]\nx0: [0]\ndrift:\n  type: cubic\n"
    with pytest.raises(ValidationError, match="drift/type"):
        problemfile.build_path_integral(problemfile.parse(text))


def test_digest_tracks_content():
    a, b = problemfile.parse(CHAIN), problemfile.parse(CHAIN + "# comment\n")
    assert a.digest != b.digest
    assert a.digest == problemfile.parse(CHAIN).digest
