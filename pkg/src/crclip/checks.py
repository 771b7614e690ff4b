"""Self-check routine: metric and loss oracles plus file round-trips."""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from . import oracles
from .formats import (ChecksumError, load_checkpoint, read_dataset, read_matrix,
                      save_checkpoint, write_dataset, write_matrix)
from .losses import SmsConfig, sms_loss
from .metrics import evaluate
from .synthdata import Geometry, generate
from .tensor import Tensor

METRIC_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}\t{self.name}\t{self.detail}"


def random_instance(rng, max_size: int = 8):
    nv, nt = rng.integers(1, max_size + 1, size=2)
    S = rng.uniform(-1, 1, size=(nv, nt))
    C = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=(nv, nt))
    return S, C


def metric_oracle_check(cases: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        S, C = random_instance(rng)
        got = evaluate(S, C).as_dict()
        ref = oracles.evaluate(S, C)
        worst = max(worst, max(abs(got[k] - ref[k]) for k in ref))
    return CheckResult("metric_oracle", worst <= METRIC_TOL,
                       f"{cases} cases, max |diff| {worst:.3e}")


def sms_oracle_check(cases: int = 50, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    cfg = SmsConfig()
    for _ in range(cases):
        b = int(rng.integers(1, 7))
        S = rng.uniform(-1, 1, size=(b, b))
        C = rng.choice([0.0, 0.5, 1.0], size=(b, b))
        got = sms_loss(Tensor(S), C, cfg).item()
        worst = max(worst, abs(got - oracles.sms_loss(S, C, cfg.tau, cfg.gamma)))
    return CheckResult("sms_oracle", worst <= METRIC_TOL, f"{cases} cases, max |diff| {worst:.3e}")


def io_roundtrip_check(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    problems = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        m = rng.normal(size=(33, 17))
        write_matrix(tmp / "m.crmx", m)
        if not np.array_equal(read_matrix(tmp / "m.crmx"), m):
            problems.append("matrix")
        named = {"a": rng.normal(size=(3, 4)), "b.c": rng.normal(size=(5,)),
                 "s": np.array(2.5)}
        save_checkpoint(tmp / "c.crck", named)
        back = load_checkpoint(tmp / "c.crck")
        if set(back) != set(named) or any(not np.array_equal(back[k], v) for k, v in named.items()):
            problems.append("checkpoint")
        raw = bytearray((tmp / "c.crck").read_bytes())
        raw[-5] ^= 0xFF  # last payload byte, just before the trailer
        (tmp / "bad.crck").write_bytes(bytes(raw))
        try:
            load_checkpoint(tmp / "bad.crck")
            problems.append("corruption undetected")
        except ChecksumError:
            pass
        ds = generate(seed, 12, 2, 3, Geometry(1, 8, 8, 1, 4), caption_length=5)
        write_dataset(tmp / "ds", ds)
        back_ds = read_dataset(tmp / "ds")
        for field in ("clips", "captions", "labels", "relevance"):
            if not np.array_equal(getattr(ds, field), getattr(back_ds, field)):
                problems.append(f"dataset.{field}")
    return CheckResult("io_roundtrip", not problems, ", ".join(problems) or "bitwise equal")


def run_selfcheck(seed: int = 0) -> List[CheckResult]:
    return [metric_oracle_check(seed=seed), sms_oracle_check(seed=seed),
            io_roundtrip_check(seed=seed)]
