"""Initialization of new-token rows: random, mean-of-vocabulary, and grounded (GTI)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lm import ModelParams, backward, forward
from .numerics import make_rng

KINDS = ("random", "mean", "gti")


class ScopeViolation(RuntimeError):
    """A parameter outside the trainable scope changed."""


@dataclass(frozen=True)
class InitStrategy:
    kind: str = "mean"
    seed: int = 0
    steps: int = 500
    lr: float = 0.5
    batch_size: int = 32
    start: str = "mean"  # starting rows for gti: "mean" or "random"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown init kind {self.kind!r}; expected one of {KINDS}")
        if self.start not in ("mean", "random"):
            raise ValueError(f"gti start must be 'mean' or 'random', got {self.start!r}")


def mean_init(E_text) -> np.ndarray:
    E_text = np.asarray(E_text, dtype=np.float64)
    if len(E_text) == 0:
        raise ValueError("empty text embedding matrix")
    return E_text.mean(axis=0)


def random_init(D: int, count: int, seed: int, target_norm: float = 1.0) -> np.ndarray:
    """Gaussian rows rescaled so their mean norm equals ``target_norm``."""
    rows = make_rng(seed, 23).normal(size=(count, D))
    if count:
        rows *= target_norm / np.linalg.norm(rows, axis=1).mean()
    return rows


def initial_rows(init: InitStrategy, E_text, count: int) -> np.ndarray:
    E_text = np.asarray(E_text, dtype=np.float64)
    kind = init.start if init.kind == "gti" else init.kind
    if kind == "mean":
        return np.tile(mean_init(E_text), (count, 1))
    norm = float(np.linalg.norm(E_text, axis=1).mean())
    return random_init(E_text.shape[1], count, init.seed, norm)


@dataclass
class GroundingCurve:
    losses: list[float] = field(default_factory=list)
    frozen_checksums: list[str] = field(default_factory=list)


def ground(params: ModelParams, examples, cfg: InitStrategy, check_every_step: bool = False,
           step_hook=None):
    """Masked SGD on the new-token rows of ``E`` only.

    Each step applies ``E <- E - lr * (grad_E * M)`` where ``M`` selects the new
    rows; every other tensor and every text row stays bit-identical. Batches are
    drawn without replacement, reshuffled each epoch, from a seeded stream.
    ``step_hook(step, params)`` runs after every update (before the per-step
    freeze check). Returns ``(params, curve)``.
    """
    params = params.copy()
    curve = GroundingCurve()
    if not params.vocab.n_new:
        raise ValueError("vocabulary has no new tokens to ground")
    valid = np.zeros(len(params.vocab), dtype=bool)
    valid[: params.vocab.n_text] = True
    valid[params.vocab.new_range.start: params.vocab.new_range.stop] = True
    for ex in examples:
        ids = np.asarray(ex.ids)
        if ids.max() >= len(params.vocab) or not valid[ids].all():
            raise ValueError("grounding corpus references tokens outside the vocabulary")
    if not examples or cfg.steps == 0:
        return params, curve
    mask = params.new_row_mask[:, None].astype(np.float64)  # m ⊗ 1_D
    frozen = params.frozen_checksum()
    curve.frozen_checksums.append(frozen)
    for batch in batch_stream(len(examples), cfg.batch_size, cfg.steps, cfg.seed):
        grads, fwd = backward(params, [examples[i] for i in batch], only=("wte",))
        curve.losses.append(fwd.loss)
        params.tensors["wte"] -= cfg.lr * (grads["wte"] * mask)
        if step_hook is not None:
            step_hook(len(curve.losses) - 1, params)
        if check_every_step:
            now = params.frozen_checksum()
            if now != frozen:
                raise ScopeViolation(f"grounding changed a frozen parameter at step "
                                     f"{len(curve.losses) - 1}")
            curve.frozen_checksums.append(now)
    curve.frozen_checksums.append(params.frozen_checksum())
    params.lineage = params.lineage + [["ground", int(cfg.seed), int(cfg.steps)]]
    return params, curve


def batch_stream(n: int, batch_size: int, steps: int, seed: int, stream: int = 0):
    """Deterministic epoch-shuffled mini-batch indices."""
    rng = make_rng(seed, 31, stream)
    order, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos + batch_size > n:
            take = order[pos:]
            order, pos = rng.permutation(n), 0
            need = batch_size - len(take)
            if need > n:
                need = n
            take = np.concatenate([take, order[:need]])
            pos = need
        else:
            take = order[pos:pos + batch_size]
            pos += batch_size
        yield take.tolist()
