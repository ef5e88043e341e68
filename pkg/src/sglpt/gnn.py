"""GIN encoder/decoder stacks, projection heads, readout and the model state."""
from __future__ import annotations

import copy

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphBatch
from .optim import ParameterSet


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        out.update(m.named_parameters(f"{name}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, np.ndarray) and key.startswith("running_"):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_buffers(name + "."))
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        out.update(m.named_buffers(f"{name}.{i}."))
        return out

    def children(self):
        for val in vars(self).values():
            if isinstance(val, Module):
                yield val
            elif isinstance(val, list):
                yield from (m for m in val if isinstance(m, Module))

    def train(self, mode: bool = True):
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def parameter_set(self, role: str) -> ParameterSet:
        return ParameterSet(self.named_parameters(), role=role)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Identity(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return x


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(glorot(rng, in_dim, out_dim))
        self.bias = param(np.zeros(out_dim)) if bias else None
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_dim:
            raise ValueError(f"Linear expects width {self.in_dim}, got {x.shape[1]}")
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


class BatchNorm(Module):
    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias, self.eps)


class PReLU(Module):
    def __init__(self, init: float = 0.25):
        self.slope = param(init)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.prelu(x, self.slope)


class ReLU(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(x)


def make_norm(kind: str | None, dim: int) -> Module:
    if kind in (None, "none"):
        return Identity()
    if kind.lower() in ("bn", "batchnorm"):
        return BatchNorm(dim)
    if kind.lower() in ("ln", "layernorm"):
        return LayerNorm(dim)
    raise ValueError(f"unknown norm {kind!r}")


def make_activation(kind: str | None) -> Module:
    if kind in (None, "none"):
        return Identity()
    if kind == "prelu":
        return PReLU()
    if kind == "relu":
        return ReLU()
    raise ValueError(f"unknown activation {kind!r}")


class MLP(Module):
    """linear -> norm -> activation -> linear"""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator,
                 norm: str | None = "bn", activation: str | None = "prelu"):
        self.lin1 = Linear(in_dim, hidden, rng)
        self.norm = make_norm(norm, hidden)
        self.act = make_activation(activation)
        self.lin2 = Linear(hidden, out_dim, rng)
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.act(self.norm(self.lin1(x))))


class GinLayer(Module):
    def __init__(self, mlp: Module, eps: float = 0.0, learn_eps: bool = True):
        self.mlp = mlp
        self.eps = Tensor(np.array(eps), requires_grad=learn_eps)

    def __call__(self, batch: GraphBatch, h: Tensor) -> Tensor:
        agg = ad.add(ad.mul(h, ad.add(1.0, self.eps)), ad.spmm(batch.adj, h))
        return self.mlp(agg)


class EncoderStack(Module):
    """GIN layers, each followed by norm and activation."""

    def __init__(self, in_dim: int, hidden: int, num_layers: int, rng: np.random.Generator,
                 activation: str = "prelu", norm: str = "bn"):
        self.in_dim, self.hidden = in_dim, hidden
        self.layers: list[GinLayer] = []
        self.norms: list[Module] = []
        self.acts: list[Module] = []
        for i in range(num_layers):
            d = in_dim if i == 0 else hidden
            self.layers.append(GinLayer(MLP(d, hidden, hidden, rng, norm, activation)))
            self.norms.append(make_norm(norm, hidden))
            self.acts.append(make_activation(activation))

    def __call__(self, batch: GraphBatch, x: Tensor | None = None) -> Tensor:
        return gin_forward(self, batch, x)


def gin_forward(stack: EncoderStack, batch: GraphBatch, x: Tensor | None = None) -> Tensor:
    h = Tensor(batch.x) if x is None else x
    if h.shape[1] != stack.in_dim:
        raise ValueError(f"encoder expects feature dim {stack.in_dim}, got {h.shape[1]}")
    if h.shape[0] != batch.num_nodes:
        raise ValueError(f"feature rows {h.shape[0]} != batch nodes {batch.num_nodes}")
    for layer, norm, act in zip(stack.layers, stack.norms, stack.acts):
        h = act(norm(layer(batch, h)))
    return h


class Decoder(Module):
    """Linear re-projection, re-mask with a learnable token, one GIN layer to feature space."""

    def __init__(self, hidden: int, out_dim: int, rng: np.random.Generator,
                 activation: str = "prelu", norm: str = "bn"):
        self.reproject = Linear(hidden, hidden, rng, bias=False)
        self.remask_token = param(np.zeros(hidden))
        self.gin = GinLayer(MLP(hidden, hidden, out_dim, rng, norm, activation))
        self.hidden, self.out_dim = hidden, out_dim

    def __call__(self, h: Tensor, batch: GraphBatch, masked_nodes) -> Tensor:
        return decode(self, h, batch, masked_nodes)


def decode(decoder: Decoder, h: Tensor, batch: GraphBatch, masked_nodes) -> Tensor:
    if h.shape[1] != decoder.hidden:
        raise ValueError(f"decoder expects width {decoder.hidden}, got {h.shape[1]}")
    r = decoder.reproject(h)
    masked_nodes = np.asarray(masked_nodes, dtype=np.int64)
    if len(masked_nodes):
        r = ad.where_rows(r, masked_nodes, decoder.remask_token)
    return decoder.gin(batch, r)


class ProjectionHead(Module):
    """linear -> activation -> linear"""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, activation: str = "prelu"):
        self.lin1 = Linear(in_dim, out_dim, rng)
        self.act = make_activation(activation)
        self.lin2 = Linear(out_dim, out_dim, rng)

    def __call__(self, g: Tensor) -> Tensor:
        return self.lin2(self.act(self.lin1(g)))


def project(head: ProjectionHead, g: Tensor) -> Tensor:
    return head(g)


READOUTS = ("mean", "max", "sum")


def readout(h: Tensor, batch: GraphBatch, kind: str = "mean") -> Tensor:
    if kind not in READOUTS:
        raise ValueError(f"unknown readout {kind!r}; expected one of {READOUTS}")
    if kind == "max":
        return ad.segment_max(h, batch.node_offsets[:-1])
    return ad.spmm(batch.pool_matrix(kind), h)


class ModelState:
    """Online/target encoders and projectors, decoder, input mask token, prototypes."""

    def __init__(self, in_dim: int, hidden: int, num_layers: int, seed: int = 0,
                 activation: str = "prelu", norm: str = "bn", readout: str = "mean"):
        rng = np.random.default_rng(seed)
        self.in_dim, self.hidden, self.num_layers = in_dim, hidden, num_layers
        self.activation, self.norm, self.readout_kind = activation, norm, readout
        self.encoder = EncoderStack(in_dim, hidden, num_layers, rng, activation, norm)
        self.decoder = Decoder(hidden, in_dim, rng, activation, norm)
        self.projector = ProjectionHead(hidden, hidden, rng, activation)
        self.mask_token = param(np.zeros(in_dim))
        self.target_encoder = copy.deepcopy(self.encoder)
        self.target_projector = copy.deepcopy(self.projector)
        for t in list(self.target_encoder.named_parameters().values()) + \
                list(self.target_projector.named_parameters().values()):
            t.requires_grad = False
        self.prototypes: Tensor | None = None
        self.head: ProjectionHead | None = None
        self.classifier: Linear | None = None

    # parameter groups --------------------------------------------------
    def online_params(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.named_parameters().items()}
        out["mask_token"] = self.mask_token
        return out

    def decoder_params(self) -> dict[str, Tensor]:
        return {f"decoder.{k}": v for k, v in self.decoder.named_parameters().items()}

    def projector_params(self) -> dict[str, Tensor]:
        return {f"projector.{k}": v for k, v in self.projector.named_parameters().items()}

    def pretrain_params(self) -> dict[str, Tensor]:
        return {**self.online_params(), **self.decoder_params(), **self.projector_params()}

    def target_pairs(self) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        """(target, online) maps with identical names, covering encoder and projector."""
        tgt = {f"encoder.{k}": self._all_tensors(self.target_encoder)[k]
               for k in self._all_tensors(self.encoder)}
        tgt.update({f"projector.{k}": v for k, v in self._all_tensors(self.target_projector).items()})
        onl = {f"encoder.{k}": v for k, v in self._all_tensors(self.encoder).items()}
        onl.update({f"projector.{k}": v for k, v in self._all_tensors(self.projector).items()})
        return tgt, onl

    @staticmethod
    def _all_tensors(m: Module) -> dict[str, Tensor]:
        # includes frozen tensors so target and online stay name-aligned
        out = {}
        for key, val in vars(m).items():
            if isinstance(val, Tensor):
                out[key] = val
            elif isinstance(val, Module):
                out.update({f"{key}.{k}": v for k, v in ModelState._all_tensors(val).items()})
            elif isinstance(val, list):
                for i, c in enumerate(val):
                    if isinstance(c, Module):
                        out.update({f"{key}.{i}.{k}": v for k, v in ModelState._all_tensors(c).items()})
        return out

    def modules(self) -> dict[str, Module]:
        mods = {"encoder": self.encoder, "decoder": self.decoder, "projector": self.projector,
                "target_encoder": self.target_encoder, "target_projector": self.target_projector}
        if self.head is not None:
            mods["head"] = self.head
        if self.classifier is not None:
            mods["classifier"] = self.classifier
        return mods

    def train(self, mode: bool = True):
        for m in self.modules().values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    # serialization -----------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, m in self.modules().items():
            for k, v in self._all_tensors(m).items():
                out[f"{prefix}.{k}"] = v.data
            for k, v in m.named_buffers().items():
                out[f"{prefix}.{k}"] = v
        out["mask_token"] = self.mask_token.data
        if self.prototypes is not None:
            out["prototypes"] = self.prototypes.data
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if "prototypes" in state and self.prototypes is None:
            self.prototypes = param(np.zeros_like(state["prototypes"]))
        if any(k.startswith("head.") for k in state) and self.head is None:
            self.head = ProjectionHead(self.hidden, self.hidden, np.random.default_rng(0), self.activation)
        if any(k.startswith("classifier.") for k in state) and self.classifier is None:
            w = state["classifier.weight"]
            self.classifier = Linear(w.shape[0], w.shape[1], np.random.default_rng(0))
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")
        for name, arr in own.items():
            if arr.shape != state[name].shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model shape {arr.shape}")
            arr[...] = state[name]

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)
