import time
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import pytest

from crclip import tensor as T
from crclip.metrics import RetrievalReport, evaluate
from crclip.model import tta_embed_dataset
from crclip.synthdata import generate, split
from crclip.trainer import TrainConfig, TrainLog, evaluate_split, train
from crclip.tta import TtaConfig

# toy benchmark: seeded data, 256 samples over 4 verbs x 6 nouns, 200 epochs
BENCH_DATA_SEED = 7
BENCH_SAMPLES = 256
BENCH_EPOCHS = 200

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@dataclass
class Arm:
    cfg: TrainConfig
    params: object
    log: TrainLog
    seconds: float
    reports: Dict[str, RetrievalReport] = field(default_factory=dict)


@dataclass
class Ablation:
    dataset: object
    arms: Dict[str, Arm]
    seconds: float


ARMS = {
    "sms+cmcr": dict(loss_kind="sms", use_cmcr=True),
    "sms": dict(loss_kind="sms", use_cmcr=False),
    "mimm": dict(loss_kind="mimm", use_cmcr=False),
}

TTA_MODES = {
    "base": TtaConfig(enable_flip=False, scales=(1.0,)),
    "flip": TtaConfig(enable_flip=True, scales=(1.0,)),
    "flip+scale": TtaConfig(enable_flip=True, scales=(0.875, 1.0, 1.125)),
}


@pytest.fixture(scope="session")
def ablation() -> Ablation:
    """Train the three ablation arms once and evaluate them on the test split."""
    start = time.perf_counter()
    ds = generate(BENCH_DATA_SEED, BENCH_SAMPLES, 4, 6)
    arms = {}
    for name, overrides in ARMS.items():
        cfg = TrainConfig(epochs=BENCH_EPOCHS, **overrides)
        t0 = time.perf_counter()
        params, log = train(cfg, ds)
        arm = Arm(cfg, params, log, time.perf_counter() - t0)
        mcfg = cfg.model_config(ds)
        _, test = split(ds, cfg.train_fraction, cfg.seed)
        arm.reports["plain"] = evaluate_split(params, mcfg, test)
        for mode, tta in TTA_MODES.items():
            v, t = tta_embed_dataset(params, mcfg, test.clips, test.captions, tta)
            arm.reports[mode] = evaluate(v @ t.T, test.relevance)
        arms[name] = arm
    return Ablation(ds, arms, time.perf_counter() - start)


@pytest.fixture(autouse=True)
def clean_tape():
    # every test starts and ends with an empty, enabled tape
    tape = T.get_tape()
    tape.clear()
    tape.enabled = True
    yield
    tape.clear()
    tape.enabled = True


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker
        prev = _ACCEPTANCE.get(number, (title, True))
        _ACCEPTANCE[number] = (title, prev[1] and report.outcome == "passed")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("acceptance")
    if mark is not None:
        outcome.get_result().acceptance = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}")
