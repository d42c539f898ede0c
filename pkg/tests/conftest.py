import numpy as np
import pytest

from tsfm_lens.model import ModelConfig, PatchConfig, TokenizerConfig, init_weights
from tsfm_lens.numerics import Rng
from tsfm_lens.synthdata import gen_seasonal

_ACCEPTANCE = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n = marker.args[0]
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        ok = call.excinfo is None
        _ACCEPTANCE.setdefault(n, []).append((item.name, ok))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        results = _ACCEPTANCE[n]
        ok = all(r for _, r in results)
        failed = [name for name, r in results if not r]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} ({len(results)} checks)"
        if failed:
            line += " failing: " + ", ".join(failed)
        terminalreporter.write_line(line)


SMALL = dict(n_layers=2, n_heads=2, d_model=16, d_head=8, d_ff=32, context_len=32, horizon=8)


@pytest.fixture
def enc_dec():
    cfg = ModelConfig(arch="encoder_decoder", tokenizer=TokenizerConfig(vocab_size=32), **SMALL)
    return init_weights(cfg, Rng(11))


@pytest.fixture
def dec_only():
    cfg = ModelConfig(arch="decoder_only", patch=PatchConfig(4), **SMALL)
    return init_weights(cfg, Rng(12))


@pytest.fixture
def dec_quantile():
    cfg = ModelConfig(arch="decoder_only", patch=PatchConfig(4), quantile_head=True, **SMALL)
    return init_weights(cfg, Rng(13))


@pytest.fixture
def seasonal_data():
    rng = Rng(5)
    return [gen_seasonal(rng, 160, [(12, 1.0, 0.2 * i), (5, 0.3, 1.0)], 0.05, f"s{i}") for i in range(3)]


def ctx_series(n=32, seed=3):
    rng = Rng(seed)
    t = np.arange(n)
    return np.sin(2 * np.pi * t / 12) + 0.1 * rng.normal(n)


def scaled_up(bundle, factor=25.0):
    """Larger weights so that ablations visibly change forecasts."""
    return bundle.with_weights({k: v * factor for k, v in bundle.weights.items()
                                if not k.endswith("norm") and k != "embed"})
