import numpy as np
import pytest

from smdim import synth
from smdim.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    # small enough for finite differences over the whole network
    return ModelConfig(vocab_size=12, L_in=8, D_emb=8, D=8, N=4, heads=2, n_blocks=1,
                       mamba_layers_per_block=1, stride=2, T=8)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    synth.write_corpus(out, 8, 1)
    return out


# acceptance reporting ---------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion")
    config._acceptance = {}


@pytest.fixture
def detail(request):
    """Callable that attaches measured values to the criterion's report line."""
    notes = []
    request.node._acceptance_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = mark.args
    notes = "; ".join(getattr(item, "_acceptance_notes", []))
    item.config._acceptance[number] = (title, rep.passed, notes)


def pytest_terminal_summary(terminalreporter, config):
    results = config._acceptance
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, notes = results[number]
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" ({notes})" if notes else ""))
