import numpy as np
import pytest

from specemo import audio_io
from specemo.features import ImageLoader


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """The seeded 4-class x 5-speaker x 2-clip synthetic corpus (40 clips)."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = audio_io.synth_dataset(audio_io.SynthSpec(classes=4, speakers=5, clips=2, seed=7), root)
    return manifest


@pytest.fixture(scope="session")
def corpus_images(corpus):
    loader = ImageLoader()
    x = np.stack([loader(corpus.resolve(s)) for s in corpus.samples])
    return x, corpus.label_indices()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store one pass/fail line per acceptance criterion (sub-checks are ANDed)."""
    prev = ACCEPTANCE.get(criterion)
    if prev is not None:
        ok = ok and prev[0]
        detail = prev[1] + "; " + detail
    ACCEPTANCE[criterion] = (ok, detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}")
