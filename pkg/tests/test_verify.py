import numpy as np
import pytest

from hybrid_asr import verify


@pytest.fixture(scope="module")
def invariances():
    return verify.run("invariances")


def test_invariance_suite_passes(invariances):
    failed = [r.name for r in invariances if not r.passed]
    assert not failed


def test_gradient_suite_passes():
    results = verify.run("gradients")
    assert len(results) > 30
    assert all(r.passed for r in results), [r.name for r in results if not r.passed]


def test_fusion_suite_passes_and_fault_injection_fails():
    clean = verify.suite_fusion(encoder_inputs=2)
    assert all(r.passed for r in clean)
    broken = {r.name: r.passed for r in verify.suite_fusion(fault_inject=True, encoder_inputs=2)}
    assert not any(v for k, v in broken.items() if "train vs fused" in k)


def test_unknown_suite():
    with pytest.raises(ValueError):
        verify.run("nope")


def test_result_pass_rule():
    assert verify.PropertyResult("s", "p", 1e-6, 1e-5).passed
    assert verify.PropertyResult("s", "p", 0.0, 0).passed
    assert not verify.PropertyResult("s", "p", 2e-5, 1e-5).passed
    assert not verify.PropertyResult("s", "p", np.nan, 1e-5).passed


def test_report_lines(invariances):
    text = verify.format_report(invariances)
    lines = text.splitlines()
    assert len(lines) == len(invariances) + 1
    assert all(line.startswith("PASS") for line in lines[:-1])
    assert "worst=" in lines[0] and "tol=" in lines[0]
    assert lines[-1] == f"{len(invariances)}/{len(invariances)} properties passed"
