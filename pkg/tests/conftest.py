from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gti_lab.lm import ModelConfig, ModelParams, init_params
from gti_lab.vocab import Vocabulary

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run slow tests (per-step freeze checks)")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: opt-in via --runslow")
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def small_model(n_rows: int | None = None, seed: int = 0, layers: int = 2, d_model: int = 16,
                heads: int = 2, context: int = 32, std: float = 0.3,
                vocab: Vocabulary | None = None) -> ModelParams:
    """Random model; ``n_rows`` truncates the embedding to a small vocabulary."""
    cfg = ModelConfig(n_layers=layers, n_heads=heads, d_model=d_model, d_ff=2 * d_model,
                      context=context)
    params = init_params(cfg, vocab or Vocabulary(), seed, std=std)
    rng = np.random.default_rng(seed + 1)
    for name, t in params.tensors.items():
        if name.endswith(("_g", "_b", "b_qkv", "b_o", "b_fc", "b_proj")):
            t += rng.normal(0, 0.1, t.shape)
    if n_rows is not None:
        params.tensors["wte"] = params.tensors["wte"][:n_rows].copy()
    return params


TINY_SPEC = Path(__file__).parent / "data" / "tiny.yaml"


ACCEPTANCE: dict[int, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    status = ("FAIL" if report.failed else "SKIP" if report.skipped
              else "PASS" if report.when == "call" else None)
    prev, _, elapsed = ACCEPTANCE.get(number, (None, title, 0.0))
    if prev == "FAIL":
        status = "FAIL"
    ACCEPTANCE[number] = (status or prev or "RUN", title, elapsed + report.duration)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, elapsed = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}  ({elapsed:.1f} s)")
