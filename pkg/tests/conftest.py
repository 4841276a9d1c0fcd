import numpy as np
import pytest

from qfl import qformer as Q
from qfl.corpus import CorpusConfig
from qfl.dataset import prepare


def random_params(cfg: Q.QFormerConfig, seed: int = 0, scale: float = 0.3) -> dict[str, np.ndarray]:
    """float64 parameters with every array (gains and biases too) randomly perturbed."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in Q.param_shapes(cfg).items():
        base = 1.0 if name.endswith("_g") else 0.0
        out[name] = base + rng.normal(0, scale, size=shape)
    out["log_temperature"] = np.asarray(np.log(0.07))
    return out


def tiny_config(**kw) -> Q.QFormerConfig:
    base = dict(n_blocks=1, hidden_dim=4, n_heads=1, n_queries=3, image_feature_dim=5,
                vocab_size=11, max_text_len=8, ffn_mult=2)
    return Q.QFormerConfig(**{**base, **kw})


@pytest.fixture(scope="session")
def small_dataset():
    return prepare(CorpusConfig(n_cases=40, seed=5, feature_dim=24))


_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, [title, "PASS"])
    if rep.failed:
        entry[1] = "FAIL"
    elif rep.skipped and entry[1] == "PASS":
        entry[1] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}  {status}  {title}")
