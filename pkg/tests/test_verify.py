import numpy as np
import pytest

from dehazekit import verify
from dehazekit.verify import Check, SuiteResult, failures, format_table, primitive_cases, run_suites

PRIMITIVES = {
    "add", "sub", "mul", "div", "maximum", "clip", "sum", "mean", "amax", "matmul", "conv2d", "conv2d_strided",
    "patch_project", "max_pool", "avg_pool", "relu", "sigmoid", "softmax", "layernorm", "batchnorm2d",
    "reshape", "transpose", "concat", "slice", "upsample_bilinear",
}


def test_every_primitive_is_covered():
    assert set(primitive_cases(np.random.default_rng(0))) == PRIMITIVES


def test_model_gradient_errors():
    errs = verify.model_grad_errors(per_tensor=2)
    assert any(n.startswith("attn.") for n in errs)
    assert max(errs.values()) <= verify.GRAD_TOL


@pytest.mark.parametrize("suite", ["scattering", "metrics", "transformer", "checkpoint"])
def test_fast_suites_pass(suite):
    (result,) = run_suites([suite])
    assert result.passed, format_table([result])
    assert result.seconds >= 0


def test_crashing_suite_is_reported(monkeypatch):
    def boom():
        raise RuntimeError("kaput")

    monkeypatch.setitem(verify.SUITES, "boom", boom)
    (result,) = run_suites(["boom"])
    assert not result.passed
    assert failures([result]) == ["boom:error"]
    assert "kaput" in format_table([result])


def test_table_layout():
    results = [
        SuiteResult("a", (Check("a:one", True, "ok"),), 0.5),
        SuiteResult("b", (Check("b:two", False, "bad"),), 1.25),
    ]
    table = format_table(results).splitlines()
    assert table[0] == "[PASS] suite a (0.50 s)"
    assert table[2] == "[FAIL] suite b (1.25 s)"
    assert "FAIL  b:two" in table[3]
    assert failures(results) == ["b:two"]
