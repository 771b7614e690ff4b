"""
Toy end-to-end training: Adam over every model parameter, seeded batching,
per-epoch logging and checkpoint output.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, NonFiniteError
from .formats import save_checkpoint, write_json
from .losses import SmsConfig, mimm_loss, similarity_matrix, sms_loss
from .metrics import RetrievalReport, evaluate, truncate_percent
from .model import (CRClipParams, ModelConfig, embed_dataset, forward, init_model,
                    state_dict)
from .nn import parameters
from .synthdata import SynthDataset, split
from .tensor import Tensor
from .tta import TtaConfig, tta_variants

log = logging.getLogger(__name__)

LOSS_KINDS = ("sms", "mimm")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    loss_kind: str = "sms"
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    use_cmcr: bool = True
    margin: float = 0.2
    train_fraction: float = 0.75
    eval_every: int = 0
    augment: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    sms: SmsConfig = field(default_factory=SmsConfig)
    tta: TtaConfig = field(default_factory=TtaConfig)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 for in-batch negatives")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigurationError("epochs must be >= 0 and lr > 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must lie in (0, 1)")

    def model_config(self, dataset: Optional[SynthDataset] = None) -> ModelConfig:
        """Model config with CMCR usage and data geometry filled in."""
        updates = {"use_cmcr": self.use_cmcr}
        if dataset is not None:
            g = dataset.geometry
            updates.update(frames=g.frames, height=g.height, width=g.width,
                           channels=g.channels, patch=g.patch, vocab=dataset.vocab_size,
                           max_len=dataset.captions.shape[1])
        return dataclasses.replace(self.model, **updates)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["tta"]["scales"] = list(self.tta.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "sms" in d:
            d["sms"] = SmsConfig(**d["sms"])
        if "tta" in d:
            d["tta"] = TtaConfig(**d["tta"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    report: Optional[RetrievalReport] = None

    def line(self) -> str:
        cols = [str(self.epoch), f"{self.loss:.6f}"]
        if self.report is not None:
            cols += [truncate_percent(self.report.map_avg), truncate_percent(self.report.ndcg_avg)]
        return "\t".join(cols)


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ContractError("epochs must increase monotonically")
        if not math.isfinite(rec.loss):
            raise NonFiniteError(f"epoch {rec.epoch}: loss is not finite")
        self.records.append(rec)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def to_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update; parameter arrays are replaced, not mutated."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("params, grads and optimiser state differ in length")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ContractError(f"shape mismatch for parameter {i}: {p.shape} vs {g.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def batch_loss(S: Tensor, C: np.ndarray, cfg: TrainConfig) -> Tensor:
    if cfg.loss_kind == "sms":
        return sms_loss(S, C, cfg.sms)
    return mimm_loss(S, cfg.margin)


def _augmented_clips(clips: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    # every flip x scale variant of each clip, shape (N, V, T, H, W, C)
    aug = TtaConfig(enable_flip=True, scales=cfg.tta.scales)
    return np.stack([np.stack(tta_variants(c, aug)) for c in clips])


def evaluate_split(params: CRClipParams, mcfg: ModelConfig, ds: SynthDataset,
                   threshold: float = 0.0) -> RetrievalReport:
    v, t = embed_dataset(params, mcfg, ds.clips, ds.captions)
    return evaluate(v @ t.T, ds.relevance, threshold)


def train(cfg: TrainConfig, dataset: SynthDataset,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None
          ) -> Tuple[CRClipParams, TrainLog]:
    """Train on the seeded train split of ``dataset``; returns (params, log)."""
    if len(dataset) < 2:
        raise ContractError("dataset needs at least two samples")
    mcfg = cfg.model_config(dataset)
    params = init_model(mcfg, cfg.seed)
    train_ds, test_ds = split(dataset, cfg.train_fraction, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    plist = parameters(params)
    state = AdamState.zeros_like(plist)
    history = TrainLog()
    aug = _augmented_clips(train_ds.clips, cfg) if cfg.augment and cfg.epochs else None
    n = len(train_ds)

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(perm[start:start + cfg.batch_size])
            if len(idx) < 2:
                continue
            if aug is not None:
                clips = aug[idx, rng.integers(aug.shape[1], size=len(idx))]
            else:
                clips = train_ds.clips[idx]
            v, t = forward(params, mcfg, clips, train_ds.captions[idx], training=True, rng=rng)
            loss = batch_loss(similarity_matrix(v, t), train_ds.relevance[np.ix_(idx, idx)], cfg)
            if not np.isfinite(loss.item()):
                where = T.first_non_finite() or "loss"
                T.get_tape().clear()
                raise NonFiniteError(f"epoch {epoch}: non-finite values first appear in {where}")
            for p in plist:
                p.zero_grad()
            T.backward(loss)
            adam_step(plist, [p.grad for p in plist], state, cfg.lr, cfg.betas, cfg.eps)
            losses.append(loss.item())

        report = None
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            report = evaluate_split(params, mcfg, test_ds)
        rec = EpochRecord(epoch, float(np.mean(losses)), report)
        history.append(rec)
        log.debug("epoch %s", rec.line())
        if on_epoch is not None:
            on_epoch(rec)
    return params, history


def save_run(out_dir, params: CRClipParams, cfg: TrainConfig, history: TrainLog,
             mcfg: ModelConfig) -> Path:
    """Write checkpoint, resolved config and log into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.crck", state_dict(params))
    resolved = dataclasses.replace(cfg, model=mcfg)
    write_json(out / "config.json", resolved.to_dict())
    (out / "train_log.tsv").write_text(history.to_text(), encoding="utf-8")
    return out
