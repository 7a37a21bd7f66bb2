"""Pipeline phases: backbone pretraining, grounding, optional unfreeze, fine-tuning."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .init_strategies import InitStrategy, ScopeViolation, batch_stream, ground
from .lm import ModelParams, backward, extend_vocabulary, init_params

log = logging.getLogger(__name__)

PHASES = ("pretrain", "ground", "unfreeze_ground", "sft")
SCOPES = ("all", "new-embeddings-only")

ARM_LABELS = {
    "mi_vanilla": "MI+Vanilla SFT (Baseline)",
    "mi_multitask": "MI+Multi-task SFT (LC-Rec)",
    "gti_vanilla": "GTI+Vanilla SFT",
    "gti_multitask": "GTI+Multi-task SFT",
    "ri_vanilla": "RI+Vanilla SFT",
    "ri_multitask": "RI+Multi-task SFT",
}
STRATEGY_PREFIX = {"mean": "mi", "gti": "gti", "random": "ri"}


class Divergence(RuntimeError):
    """Non-finite loss; ``record`` holds the losses up to the failing step."""

    def __init__(self, message: str, record: RunRecord | None = None):
        super().__init__(message)
        self.record = record


def derive_seed(base: int, *keys: str) -> int:
    """Stable integer seed for a named sub-stream of ``base``."""
    words = [int(base)] + [int.from_bytes(k.encode()[:8].ljust(8, b"\0"), "little") for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class TrainConfig:
    phase: str
    steps: int
    batch_size: int = 32
    lr: float = 0.1
    seed: int = 0
    scope: str = "all"
    momentum: float = 0.9
    clip: float = 1.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.phase == "ground":
            self.scope = "new-embeddings-only"


@dataclass
class RunRecord:
    phase: str
    losses: list = field(default_factory=list)
    boundaries: list = field(default_factory=list)   # [phase, first_step] pairs
    checksums: dict = field(default_factory=dict)    # phase -> {"frozen_before", "frozen_after", ...}
    checkpoint: str | None = None

    def extend(self, other: RunRecord) -> RunRecord:
        start = len(self.losses)
        self.boundaries += [[p, s + start] for p, s in other.boundaries]
        self.losses += other.losses
        self.checksums.update(other.checksums)
        return self

    def step_lines(self) -> list[str]:
        phase_at = {}
        for p, s in self.boundaries:
            phase_at[s] = p
        lines, current = [], self.phase
        for i, loss in enumerate(self.losses):
            current = phase_at.get(i, current)
            lines.append(json.dumps({"step": i, "phase": current, "loss": loss.hex()
                                     if isinstance(loss, float) else loss}))
        return lines

    def summary(self) -> dict:
        return {"phase": self.phase, "n_steps": len(self.losses), "boundaries": self.boundaries,
                "checksums": self.checksums, "checkpoint": self.checkpoint,
                "first_loss": self.losses[0] if self.losses else None,
                "final_loss": self.losses[-1] if self.losses else None}


def _sgd_momentum(params: ModelParams, corpus, cfg: TrainConfig, record: RunRecord,
                  names, step_hook=None) -> ModelParams:
    params = params.copy()
    velocity = {n: np.zeros_like(params.tensors[n]) for n in names}
    mask = None
    if cfg.scope == "new-embeddings-only":
        mask = params.new_row_mask[:, None].astype(np.float64)
    stream = batch_stream(len(corpus), cfg.batch_size, cfg.steps, cfg.seed)
    for step, batch in enumerate(stream):
        try:
            with np.errstate(invalid="ignore", over="ignore"):
                grads, fwd = backward(params, [corpus[i] for i in batch], only=names)
        except FloatingPointError:
            raise Divergence(f"{cfg.phase}: non-finite loss at step {step}", record) from None
        if mask is not None:
            grads["wte"] = grads["wte"] * mask
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = min(1.0, cfg.clip / norm) if cfg.clip and norm > 0 else 1.0
        for n in names:
            velocity[n] = cfg.momentum * velocity[n] + scale * grads[n]
            params.tensors[n] -= cfg.lr * velocity[n]
        record.losses.append(fwd.loss)
        if step_hook is not None:
            step_hook(step, params)
    return params


def run_phase(params: ModelParams, corpus, cfg: TrainConfig, step_hook=None,
              check_every_step: bool = False) -> tuple[ModelParams, RunRecord]:
    """Run one phase honoring its parameter scope.

    ``ground`` is masked plain SGD on the new rows; ``unfreeze_ground``,
    ``pretrain`` and ``sft`` use SGD with momentum and gradient clipping.
    Frozen-partition checksums are recorded before and after; a mismatch under
    the ``new-embeddings-only`` scope raises :class:`ScopeViolation`.
    ``step_hook(step, params)`` runs after every update.
    """
    record = RunRecord(cfg.phase, boundaries=[[cfg.phase, 0]])
    frozen_before = params.frozen_checksum()
    if cfg.phase == "pretrain" and params.vocab.n_new:
        raise ValueError("pretraining runs before vocabulary extension")
    if cfg.phase == "ground":
        strat = InitStrategy("gti", seed=cfg.seed, steps=cfg.steps, lr=cfg.lr,
                             batch_size=cfg.batch_size)
        out, curve = ground(params, corpus, strat, check_every_step, step_hook)
        record.losses += curve.losses
        if check_every_step:
            record.checksums["ground_checked_steps"] = len(curve.frozen_checksums) - 2
    else:
        names = ["wte"] if cfg.scope == "new-embeddings-only" else list(params.tensors)
        out = _sgd_momentum(params, corpus, cfg, record, names, step_hook)
    frozen_after = out.frozen_checksum()
    record.checksums[cfg.phase] = {"frozen_before": frozen_before, "frozen_after": frozen_after,
                                   "all_after": out.checksum()}
    if cfg.scope == "new-embeddings-only" and frozen_after != frozen_before:
        raise ScopeViolation(f"{cfg.phase}: frozen partition changed")
    out.lineage = params.lineage + [[cfg.phase, int(cfg.seed), int(cfg.steps)]]
    return out, record


def pretrain(params: ModelParams, corpus, cfg: TrainConfig) -> tuple[ModelParams, RunRecord]:
    """Next-token training of the text-only backbone."""
    if cfg.phase != "pretrain":
        raise ValueError("pretrain needs a pretrain-phase config")
    return run_phase(params, corpus, cfg)


# --- experiment grid -------------------------------------------------------

@dataclass
class Arm:
    name: str
    strategy: str
    sft_mode: str
    seed: int
    params: ModelParams
    record: RunRecord
    init_params: ModelParams  # after extension (and grounding), before SFT

    @property
    def label(self) -> str:
        return ARM_LABELS.get(self.name, self.name)


def arm_name(strategy: str, mode: str) -> str:
    return f"{STRATEGY_PREFIX[strategy]}_{mode}"


def build_backbone(spec, pre_corpus, seed: int) -> tuple[ModelParams, RunRecord]:
    from .vocab import Vocabulary

    params = init_params(spec.model, Vocabulary(), derive_seed(seed, "init"))
    cfg = TrainConfig("pretrain", spec.pretrain.steps, spec.pretrain.batch_size,
                      spec.pretrain.lr, derive_seed(seed, "pretrain"),
                      momentum=spec.pretrain.momentum, clip=spec.pretrain.clip)
    return pretrain(params, pre_corpus, cfg)


def extend_arm(spec, backbone: ModelParams, strategy: str, seed: int,
               n_suffix: int = 0) -> ModelParams:
    """Vocabulary extension with the strategy's starting rows (GTI starts from
    ``spec.ground.start``)."""
    g = spec.ground
    init = InitStrategy(strategy, seed=derive_seed(seed, "extend"), steps=g.steps, lr=g.lr,
                        batch_size=g.batch_size, start=g.start)
    return extend_vocabulary(backbone, spec.rq.levels, spec.rq.size, init, n_suffix)


def ground_arm(spec, params: ModelParams, ground_corpus, seed: int) -> tuple[ModelParams, RunRecord]:
    """Grounding, then the optional all-parameter ``unfreeze_ground`` phase."""
    g = spec.ground
    record = RunRecord("ground", boundaries=[])
    cfg = TrainConfig("ground", g.steps, g.batch_size, g.lr, derive_seed(seed, "ground"))
    params, rec = run_phase(params, ground_corpus, cfg)
    record.extend(rec)
    if g.unfreeze_steps:
        cfg = TrainConfig("unfreeze_ground", g.unfreeze_steps, g.batch_size, g.unfreeze_lr,
                          derive_seed(seed, "unfreeze"))
        params, rec = run_phase(params, ground_corpus, cfg)
        record.extend(rec)
    return params, record


def initialize_arm(spec, backbone: ModelParams, strategy: str, ground_corpus, seed: int,
                   n_suffix: int = 0) -> tuple[ModelParams, RunRecord]:
    """Extend the vocabulary and, for GTI, ground (plus optional unfreeze)."""
    params = extend_arm(spec, backbone, strategy, seed, n_suffix)
    if strategy != "gti":
        return params, RunRecord("extend", boundaries=[])
    return ground_arm(spec, params, ground_corpus, seed)


def finetune(spec, params: ModelParams, sft_corpus, seed: int) -> tuple[ModelParams, RunRecord]:
    cfg = TrainConfig("sft", spec.sft.steps, spec.sft.batch_size, spec.sft.lr,
                      derive_seed(seed, "sft"), momentum=spec.sft.momentum, clip=spec.sft.clip)
    return run_phase(params, sft_corpus, cfg)


def run_experiment(spec, data, on_arm=None) -> list[Arm]:
    """Run every strategy x SFT-mode arm for every seed.

    ``data`` is a :class:`~gti_lab.pipeline.PreparedData`. Within a seed all
    arms share one pretrained backbone; arms with the same strategy share the
    extended (and grounded) starting point.
    """
    arms = []
    for seed in spec.seeds:
        backbone, pre_rec = build_backbone(spec, data.pretrain_corpus, seed)
        log.info(json.dumps({"event": "pretrained", "seed": seed, **_loss_span(pre_rec)}))
        for strategy in spec.strategies:
            start, init_rec = initialize_arm(spec, backbone, strategy, data.ground_corpus,
                                             seed, data.n_suffix)
            for mode in spec.sft_modes:
                tuned, sft_rec = finetune(spec, start, data.sft_corpus[mode], seed)
                record = RunRecord("arm", boundaries=[])
                record.extend(pre_rec).extend(init_rec).extend(sft_rec)
                arm = Arm(arm_name(strategy, mode), strategy, mode, seed, tuned, record, start)
                log.info(json.dumps({"event": "arm", "arm": arm.name, "seed": seed,
                                     **_loss_span(sft_rec)}))
                if on_arm is not None:
                    on_arm(arm)
                arms.append(arm)
    return arms


def _loss_span(rec: RunRecord) -> dict:
    if not rec.losses:
        return {}
    return {"first_loss": round(rec.losses[0], 4), "final_loss": round(rec.losses[-1], 4)}
