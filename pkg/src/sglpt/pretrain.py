"""Masked-reconstruction + momentum-contrast pre-training.

One step: mask node features, encode with the online encoder, decode with
re-masking and score reconstruction by scaled cosine error; encode an
augmented view with the target encoder and contrast pooled, projected
embeddings against the batch and a FIFO queue of past target embeddings.
The online side is trained with Adam, the target side follows by EMA.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import PretrainConfig
from .gnn import ModelState, decode, readout
from .graph import Graph, GraphBatch, MaskPlan, augment_with_rng, plan_mask
from .optim import Adam, ContractViolation, ema_update

log = logging.getLogger(__name__)


class NumericAbort(RuntimeError):
    def __init__(self, message: str, seed: int, batch_id: str):
        super().__init__(f"{message} (seed={seed}, batch={batch_id})")
        self.seed, self.batch_id = seed, batch_id


# -- losses -------------------------------------------------------------------

def scaled_cosine_error(x_true, x_rec: Tensor, gamma: float) -> Tensor:
    """Mean over rows of (1 - cos(x_i, x~_i)) ** gamma; 0 for no rows."""
    x_true, x_rec = ad.as_tensor(x_true), ad.as_tensor(x_rec)
    if x_true.shape != x_rec.shape:
        raise ValueError(f"row mismatch: {x_true.shape} vs {x_rec.shape}")
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if x_true.shape[0] == 0:
        return Tensor(np.array(0.0))
    cos = ad.cosine_rows(x_true, x_rec)
    # relu guards 1 - cos against a -1e-16 rounding dip
    err = ad.relu(ad.sub(1.0, cos))
    return ad.mean(ad.power(err, gamma))


def _contrast(anchors: Tensor, keys: Tensor, tau: float, reduction: str = "mean") -> Tensor:
    logits = ad.scale(ad.cosine_matrix(anchors, keys), 1.0 / tau)
    b = anchors.shape[0]
    eye = np.zeros(logits.shape)
    eye[np.arange(b), np.arange(b)] = 1.0
    positives = ad.sum(ad.mul(logits, eye), axis=1)
    per_anchor = ad.sub(ad.logsumexp_rows(logits), positives)
    if reduction == "none":
        return per_anchor
    if reduction != "mean":
        raise ValueError(f"reduction must be 'mean' or 'none', got {reduction!r}")
    return ad.mean(per_anchor)


def nt_xent(z1: Tensor, z2: Tensor, tau: float, reduction: str = "mean") -> Tensor:
    """Batch contrast with view-1 anchors; the positive sits in its own denominator."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if z1.shape != z2.shape or z1.shape[0] < 1:
        raise ValueError(f"views must share a nonempty shape, got {z1.shape} and {z2.shape}")
    return _contrast(z1, z2, tau, reduction)


def nt_xent_with_queue(z1: Tensor, z2: Tensor, queue: "DynamicQueue | np.ndarray | None", tau: float,
                       reduction: str = "mean") -> Tensor:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if z1.shape != z2.shape or z1.shape[0] < 1:
        raise ValueError(f"views must share a nonempty shape, got {z1.shape} and {z2.shape}")
    rows = queue.rows if isinstance(queue, DynamicQueue) else queue
    if rows is None or len(rows) == 0:
        return _contrast(z1, z2, tau, reduction)
    if rows.shape[1] != z1.shape[1]:
        raise ValueError(f"queue width {rows.shape[1]} != embedding width {z1.shape[1]}")
    return _contrast(z1, ad.concat_rows([z2, Tensor(rows)]), tau, reduction)


@dataclass
class DynamicQueue:
    """FIFO of detached embedding rows; the oldest rows fall out past ``capacity``."""

    capacity: int
    width: int | None = None
    rows: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("queue capacity must be nonnegative")
        if self.rows is None:
            self.rows = np.zeros((0, self.width or 0))

    def __len__(self) -> int:
        return len(self.rows)

    def push(self, z) -> "DynamicQueue":
        z = np.array(z.data if isinstance(z, Tensor) else z, dtype=np.float64, copy=True)
        if z.ndim != 2:
            raise ContractViolation(f"queue rows must be 2-D, got shape {z.shape}")
        if self.width is None:
            self.width = z.shape[1]
            self.rows = np.zeros((0, self.width))
        if z.shape[1] != self.width:
            raise ContractViolation(f"queue width {self.width} != pushed width {z.shape[1]}")
        if self.capacity == 0:
            return self
        self.rows = np.concatenate([self.rows, z], axis=0)[-self.capacity:]
        return self

    def reset(self) -> None:
        self.rows = np.zeros((0, self.width or 0))


def queue_push(queue: DynamicQueue, z2_detached) -> DynamicQueue:
    return queue.push(z2_detached)


# -- one batch ------------------------------------------------------------------

@dataclass
class StepResult:
    loss: Tensor
    local: float
    global_: float
    excluded_rows: int
    z2: np.ndarray


def masked_input(model: ModelState, batch: GraphBatch, plan: MaskPlan, source_x: np.ndarray) -> Tensor:
    """Batch features with replaced rows copied from ``source_x`` and token rows set to the mask token."""
    x = batch.x.copy()
    x[plan.replaced_nodes] = source_x[plan.replace_sources]
    xt = Tensor(x)
    if len(plan.token_nodes):
        xt = ad.where_rows(xt, plan.token_nodes, model.mask_token)
    return xt


def batch_mask_plan(batch: GraphBatch, rate: float, replace_rate: float, rng: np.random.Generator,
                    skip_first: bool = False) -> MaskPlan:
    plans = []
    for g, off in zip(batch.graphs, batch.node_offsets[:-1]):
        cand = np.arange(1, g.num_nodes) if skip_first else None
        plans.append(plan_mask(g.num_nodes, rate, replace_rate, rng, candidates=cand).shifted(int(off)))
    return MaskPlan.concat(plans)


def local_loss(x_true: np.ndarray, x_rec: Tensor, masked: np.ndarray, gamma: float) -> tuple[Tensor, int]:
    """Reconstruction loss over masked rows; rows whose true features are all zero are skipped."""
    rows = x_true[masked]
    keep = np.linalg.norm(rows, axis=1) > 0
    idx = masked[keep]
    loss = scaled_cosine_error(x_true[idx], ad.gather_rows(x_rec, idx), gamma)
    return loss, int((~keep).sum())


def pretrain_step(model: ModelState, graphs: Sequence[Graph], cfg: PretrainConfig,
                  queue: DynamicQueue, rng: np.random.Generator) -> StepResult:
    orig = GraphBatch(list(graphs))
    view1 = GraphBatch([augment_with_rng(g, cfg.aug1, rng) for g in graphs])
    plan = batch_mask_plan(view1, cfg.local.masking_rate, cfg.local.replace_rate, rng)
    x1 = masked_input(model, view1, plan, orig.x)
    h1 = model.encoder(view1, x1)
    x_rec = decode(model.decoder, h1, view1, plan.masked_nodes)
    l_local, excluded = local_loss(orig.x, x_rec, plan.masked_nodes, cfg.local.gamma)

    view2 = GraphBatch([augment_with_rng(g, cfg.aug2, rng) for g in graphs])
    with ad.no_grad():
        h2 = model.target_encoder(view2)
        z2 = model.target_projector(readout(h2, view2, model.readout_kind))
    z1 = model.projector(readout(h1, view1, model.readout_kind))
    l_global = nt_xent_with_queue(z1, z2, queue, cfg.global_.temperature)

    lam = cfg.lambda_pre
    loss = ad.add(ad.scale(l_local, lam), ad.scale(l_global, 1.0 - lam))
    return StepResult(loss, float(l_local.data), float(l_global.data), excluded, z2.data)


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    return base * 0.5 * (1 + math.cos(epoch * math.pi / epochs))


@dataclass
class PretrainState:
    optimizer: Adam
    queue: DynamicQueue
    epoch: int = 0


def init_pretrain_state(model: ModelState, cfg: PretrainConfig) -> PretrainState:
    return PretrainState(Adam(lr=cfg.lr, weight_decay=cfg.weight_decay),
                         DynamicQueue(cfg.global_.queue_size, model.hidden))


def pretrain_epoch(model: ModelState, graphs: Sequence[Graph], cfg: PretrainConfig,
                   state: PretrainState) -> dict[str, float]:
    """One pass over ``graphs`` in a seeded shuffled order. Returns epoch metrics."""
    epoch = state.epoch
    order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(len(graphs))
    params = model.pretrain_params()
    target, online = model.target_pairs()
    if cfg.scheduler:
        state.optimizer.lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
    model.train()
    sums = {"local": 0.0, "global": 0.0, "pre": 0.0, "grad_norm": 0.0}
    n_batches, excluded = 0, 0
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        rng = np.random.default_rng([cfg.seed, epoch, b + 1])
        step = pretrain_step(model, [graphs[i] for i in idx], cfg, state.queue, rng)
        value = float(step.loss.data)
        if not math.isfinite(value):
            raise NumericAbort("non-finite pre-training loss", cfg.seed, f"{epoch}:{b}")
        grads = ad.backward(step.loss, params)
        state.optimizer.step(params, grads)
        ema_update(target, online, cfg.momentum)
        state.queue.push(step.z2)
        sums["local"] += step.local
        sums["global"] += step.global_
        sums["pre"] += value
        sums["grad_norm"] += math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        excluded += step.excluded_rows
        n_batches += 1
    state.epoch += 1
    metrics = {f"loss_{k}" if k != "grad_norm" else k: v / n_batches for k, v in sums.items()}
    metrics.update(queue_fill=float(len(state.queue)), excluded_rows=float(excluded))
    log.debug("epoch %d %s", epoch, metrics)
    return metrics


def pretrain(model: ModelState, graphs: Sequence[Graph], cfg: PretrainConfig,
             callback=None) -> list[dict[str, float]]:
    """Run ``cfg.epochs`` epochs; the queue starts empty and persists across epochs."""
    state = init_pretrain_state(model, cfg)
    history = []
    for _ in range(cfg.epochs):
        m = pretrain_epoch(model, graphs, cfg, state)
        history.append(m)
        if callback is not None:
            callback(state.epoch - 1, m)
    return history
