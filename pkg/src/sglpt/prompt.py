"""Prompt tuning with a masked super node and learnable class prototypes."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateInputError, Tensor
from .config import PromptConfig
from .gnn import ModelState, ProjectionHead, decode, param
from .graph import Graph, GraphBatch, add_prompt_supernode
from .optim import Adam, ContractViolation
from .pretrain import NumericAbort, batch_mask_plan, local_loss, masked_input


@dataclass
class PrototypeBank:
    prototypes: Tensor

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @classmethod
    def init(cls, num_classes: int, dim: int, seed: int = 0) -> "PrototypeBank":
        p = np.random.default_rng(seed).normal(size=(num_classes, dim))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        return cls(param(p))


def spcl_terms(z: Tensor, labels, prototypes: Tensor, tau: float,
               class_scaled_sums: bool = False) -> tuple[Tensor, Tensor]:
    """(instance-instance, instance-prototype) terms of the prototype contrastive loss."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = z.shape[0], prototypes.shape[0]
    if b < 1:
        raise ValueError("prototype loss needs at least one sample")
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")

    pairs = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(pairs, 0.0)
    n_pairs = pairs.sum()
    if n_pairs > 0:
        s = ad.scale(ad.cosine_matrix(z, z), 1.0 / tau)
        no_self = np.zeros((b, b))
        np.fill_diagonal(no_self, -np.inf)
        lse = ad.reshape(ad.logsumexp_rows(ad.add(s, no_self)), (-1, 1))
        total = ad.sum(ad.mul(pairs, ad.sub(lse, s)))
        inst = ad.scale(total, 1.0 / (c * c * b * b) if class_scaled_sums else 1.0 / n_pairs)
    else:
        inst = Tensor(np.array(0.0))

    t = ad.scale(ad.cosine_matrix(z, prototypes), 1.0 / tau)
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    per = ad.sub(ad.logsumexp_rows(t), ad.sum(ad.mul(t, onehot), axis=1))
    proto = ad.scale(ad.sum(per), 1.0 / (c * c * b) if class_scaled_sums else 1.0 / b)
    return inst, proto


def spcl_loss(z: Tensor, labels, bank: PrototypeBank | Tensor, tau: float,
              class_scaled_sums: bool = False) -> Tensor:
    p = bank.prototypes if isinstance(bank, PrototypeBank) else bank
    inst, proto = spcl_terms(z, labels, p, tau, class_scaled_sums)
    return ad.add(inst, proto)


def class_probabilities(g_sup, prototypes) -> np.ndarray:
    """Softmax over plain cosine similarities (no temperature), one row per embedding."""
    g = np.atleast_2d(np.asarray(getattr(g_sup, "data", g_sup), dtype=np.float64))
    p = np.asarray(getattr(prototypes, "data", prototypes), dtype=np.float64)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    if np.any(gn == 0):
        raise DegenerateInputError("zero-norm super-node embedding")
    sims = (g / gn) @ (p / np.linalg.norm(p, axis=1, keepdims=True)).T
    e = np.exp(sims - sims.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict_from_embedding(g_sup, prototypes) -> tuple[np.ndarray, np.ndarray]:
    probs = class_probabilities(g_sup, prototypes)
    return probs, probs.argmax(axis=1)


# -- model plumbing ---------------------------------------------------------------

def prompt_batch(model: ModelState, graphs: Sequence[Graph]) -> tuple[GraphBatch, Tensor]:
    """Batch of super-node graphs; node 0 of every graph carries the learnable mask token."""
    placeholder = np.zeros(model.in_dim)
    batch = GraphBatch([add_prompt_supernode(g, placeholder) for g in graphs])
    return batch, ad.where_rows(Tensor(batch.x), batch.node_offsets[:-1], model.mask_token)


def prompt_head(model: ModelState) -> ProjectionHead:
    return model.head if model.head is not None else model.projector


def supernode_embedding(model: ModelState, graphs: Sequence[Graph]) -> np.ndarray:
    """Projected super-node representation per graph (eval mode, no masking)."""
    if graphs and graphs[0].feature_dim != model.in_dim:
        raise ContractViolation(f"graph feature dim {graphs[0].feature_dim} != model input dim {model.in_dim}")
    model.eval()
    with ad.no_grad():
        batch, x = prompt_batch(model, graphs)
        h = model.encoder(batch, x)
        z = prompt_head(model)(ad.gather_rows(h, batch.node_offsets[:-1]))
    return z.data


def predict(model: ModelState, graphs: Sequence[Graph], bank: PrototypeBank | None = None):
    """Class probabilities and predicted classes by super-node/prototype similarity."""
    p = bank.prototypes if bank is not None else model.prototypes
    if p is None:
        raise ContractViolation("model has no trained prototypes")
    return predict_from_embedding(supernode_embedding(model, graphs), p)


def setup_prompt(model: ModelState, num_classes: int, cfg: PromptConfig) -> PrototypeBank:
    if model.prototypes is None or model.prototypes.shape != (num_classes, model.hidden):
        model.prototypes = PrototypeBank.init(num_classes, model.hidden, cfg.seed).prototypes
    if cfg.fresh_head and model.head is None:
        model.head = ProjectionHead(model.hidden, model.hidden, np.random.default_rng([cfg.seed, 1]),
                                    model.activation)
    return PrototypeBank(model.prototypes)


def trainable_params(model: ModelState, cfg: PromptConfig) -> dict[str, Tensor]:
    out = {"prototypes": model.prototypes}
    if model.head is not None:
        out.update({f"head.{k}": v for k, v in model.head.named_parameters().items()})
    if cfg.mode == "full":
        out.update(model.online_params())
        out.update(model.decoder_params())
        if model.head is None:
            out.update(model.projector_params())
    return out


def prompt_step(model: ModelState, graphs: Sequence[Graph], cfg: PromptConfig,
                rng: np.random.Generator):
    if any(g.label is None for g in graphs):
        raise ContractViolation("prompt tuning needs labelled graphs")
    labels = np.array([g.label for g in graphs])
    placeholder = np.zeros(model.in_dim)
    batch = GraphBatch([add_prompt_supernode(g, placeholder) for g in graphs])
    plan = batch_mask_plan(batch, cfg.masking_rate, cfg.replace_rate, rng, skip_first=True)
    x = masked_input(model, batch, plan, batch.x)
    x = ad.where_rows(x, batch.node_offsets[:-1], model.mask_token)
    h = model.encoder(batch, x)
    x_rec = decode(model.decoder, h, batch, plan.masked_nodes)
    l_local, _ = local_loss(batch.x, x_rec, plan.masked_nodes, cfg.gamma)
    z = prompt_head(model)(ad.gather_rows(h, batch.node_offsets[:-1]))
    l_proto = spcl_loss(z, labels, model.prototypes, cfg.temperature, cfg.class_scaled_sums)
    lam = cfg.lambda_prompt
    loss = ad.add(ad.scale(l_local, lam), ad.scale(l_proto, 1.0 - lam))
    _, pred = predict_from_embedding(z.data, model.prototypes.data)
    return loss, float(l_local.data), float(l_proto.data), float(np.mean(pred == labels))


def prompt_tune_epoch(model: ModelState, graphs: Sequence[Graph], cfg: PromptConfig,
                      optimizer: Adam, epoch: int) -> dict[str, float]:
    params = trainable_params(model, cfg)
    # frozen mode keeps batch-norm running statistics untouched as well
    model.train(cfg.mode == "full")
    order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(len(graphs))
    sums = np.zeros(4)
    n = 0
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        rng = np.random.default_rng([cfg.seed, epoch, b + 1, 7])
        loss, l_local, l_proto, acc = prompt_step(model, [graphs[i] for i in idx], cfg, rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericAbort("non-finite prompt loss", cfg.seed, f"{epoch}:{b}")
        optimizer.step(params, ad.backward(loss, params))
        sums += (l_local, l_proto, value, acc)
        n += 1
    sums /= max(n, 1)
    return {"loss_local": sums[0], "loss_proto": sums[1], "loss_prompt": sums[2], "train_acc": sums[3]}


def prompt_tune(model: ModelState, graphs: Sequence[Graph], num_classes: int, cfg: PromptConfig,
                callback=None) -> tuple[PrototypeBank, list[dict[str, float]]]:
    bank = setup_prompt(model, num_classes, cfg)
    optimizer = Adam(lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        m = prompt_tune_epoch(model, graphs, cfg, optimizer, epoch)
        history.append(m)
        if callback is not None:
            callback(epoch, m)
    model.eval()
    return bank, history
