import os
from pathlib import Path

import numpy as np
import pytest

from avcompress.cli import run
from avcompress.features import LoadedUtterance, SynthesisConfig, SyntheticWorld, synthesize_utterance

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
_CRITERIA: list[tuple[str, bool, str]] = []


def synth_items(n, split="train", cfg=None, start=0):
    """In-memory utterances, identical to what gen-data would write."""
    cfg = cfg or SynthesisConfig()
    world = SyntheticWorld.from_config(cfg)
    return [LoadedUtterance(*synthesize_utterance(cfg, world, split, i)) for i in range(start, start + n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """``check(name, ok, detail)`` records a pass/fail line, then asserts."""

    def check(name, ok, detail):
        _CRITERIA.append((name, bool(ok), detail))
        assert ok, f"{name}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


# -- desk-scale runs shared by the acceptance suite ------------------------------------


def _cli(*argv):
    code, out = run([str(a) for a in argv])
    assert code == 0, f"avcompress {' '.join(map(str, argv))} exited with {code}"
    return out


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    root = os.environ.get("AVC_ACCEPTANCE_DIR")
    return Path(root) if root else tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="session")
def desk_base(desk_root):
    return ["--config", CONFIGS / "desk.yaml", "--runs", desk_root, "--seed", 0]


@pytest.fixture(scope="session")
def desk_corpus(desk_base):
    return _cli("gen-data", *desk_base)


@pytest.fixture(scope="session")
def desk_srp(desk_base, desk_corpus):
    return _cli("train-srp", *desk_base, "--corpus", desk_corpus)


@pytest.fixture(scope="session")
def desk_srp_visual(desk_base, desk_corpus):
    return _cli("train-srp", *desk_base, "--corpus", desk_corpus, "--modality", "visual")


@pytest.fixture(scope="session")
def desk_sweep(desk_base, desk_corpus):
    return _cli("sweep", *desk_base, "--corpus", desk_corpus, "--f-q", "1,2,3,4,5")


@pytest.fixture(scope="session")
def desk_rate_aware(desk_base, desk_corpus, desk_srp):
    train = _cli("train", *desk_base, "--corpus", desk_corpus, "--srp", desk_srp, "--use-rate", "--f-q", 2)
    return train, _cli("eval", *desk_base, "--checkpoint", train, "--snr", "inf")


@pytest.fixture(scope="session")
def desk_noise(desk_base, desk_corpus, desk_sweep):
    audio_only = _cli("train", *desk_base, "--corpus", desk_corpus, "--f-q", 3, "--audio-only")
    return {
        "av": _cli("eval", *desk_base, "--checkpoint", desk_sweep / "fq-3", "--snr", "inf,-5"),
        "audio_only": _cli("eval", *desk_base, "--checkpoint", audio_only, "--snr", "inf,-5"),
    }
