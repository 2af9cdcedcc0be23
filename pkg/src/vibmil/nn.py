"""Instance encoder, information-bottleneck gate, MIL heads and the VIB loss.

Parameters are :class:`~vibmil.autodiff.Tensor` objects; a frozen parameter is
simply one with ``requires_grad=False``, which keeps it out of both the
backward pass and the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = ("tanh", "relu", "identity")
HEAD_VARIANTS = ("attention", "mean", "max")
KL_CLAMP = 1e-7
NORM_EPS = 1e-5


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# ----------------------------------------------------------------------------
# encoder


@dataclass
class Norm:
    """Feature standardisation with running statistics (batch-norm without affine terms)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    stats_frozen: bool = True
    momentum: float = 0.1

    def __call__(self, h: Tensor, training: bool) -> Tensor:
        n, d = h.shape
        if training and not self.stats_frozen:
            mu = ad.mean(h, axis=0)
            centred = h - ad.tile_rows(mu, n)
            var = ad.mean(centred * centred, axis=0)
            inv = ad.exp(ad.scale(ad.log(var + NORM_EPS), -0.5))
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data
            self.running_var = (1 - m) * self.running_var + m * var.data * n / max(n - 1, 1)
            return centred * ad.tile_rows(inv, n)
        inv = 1.0 / np.sqrt(self.running_var + NORM_EPS)
        return (h - ad.tile_rows(Tensor(self.running_mean), n)) * ad.tile_rows(Tensor(inv), n)


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    activation: str = "tanh"
    norm: Norm | None = None
    frozen: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.set_frozen(self.frozen)

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = bool(frozen)
        self.weight.requires_grad = not self.frozen
        self.bias.requires_grad = not self.frozen

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


class EncoderModel:
    """Layered perceptron ``h(x; theta1)`` with per-layer freeze flags."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("encoder needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = layers
        self.training = False
        self.instances_forwarded = 0

    @classmethod
    def build(cls, dims: list[int], activations: list[str] | str = "tanh", norm: bool = False,
              seed: int = 0) -> "EncoderModel":
        """Randomly initialised encoder with layer widths ``dims`` (input first)."""
        n = len(dims) - 1
        acts = [activations] * n if isinstance(activations, str) else list(activations)
        rng = np.random.default_rng([seed, 0xE7C0])
        layers = []
        for i in range(n):
            layers.append(Layer(
                weight=ad.parameter(_glorot(rng, dims[i], dims[i + 1]), f"enc{i}.w"),
                bias=ad.parameter(np.zeros(dims[i + 1]), f"enc{i}.b"),
                activation=acts[i],
                norm=Norm(np.zeros(dims[i + 1]), np.ones(dims[i + 1])) if norm else None,
            ))
        return cls(layers)

    @classmethod
    def identity(cls, dim: int) -> "EncoderModel":
        return cls([Layer(ad.parameter(np.eye(dim), "enc0.w"), ad.parameter(np.zeros(dim), "enc0.b"),
                          "identity")])

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def freeze(self, n_layers: int | None = None) -> None:
        """Freeze the first ``n_layers`` layers (all when ``None``) and unfreeze the rest."""
        n = len(self.layers) if n_layers is None else n_layers
        for i, layer in enumerate(self.layers):
            layer.set_frozen(i < n)

    def freeze_stats(self, frozen: bool = True) -> None:
        for layer in self.layers:
            if layer.norm is not None:
                layer.norm.stats_frozen = frozen

    def calibrate(self, instances: np.ndarray) -> None:
        """Set every normalisation layer's running statistics from ``instances`` in one pass."""
        h = np.asarray(instances, dtype=float)
        for layer in self.layers:
            z = h @ layer.weight.data + layer.bias.data
            if layer.norm is not None:
                layer.norm.running_mean = z.mean(axis=0)
                layer.norm.running_var = z.var(axis=0)
                z = (z - layer.norm.running_mean) / np.sqrt(layer.norm.running_var + NORM_EPS)
            h = _activate_np(z, layer.activation)

    def parameters(self, trainable_only: bool = False) -> list[Tensor]:
        out = []
        for layer in self.layers:
            if trainable_only and layer.frozen:
                continue
            out += [layer.weight, layer.bias]
        return out

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"enc{i}.w"] = layer.weight.data
            out[f"enc{i}.b"] = layer.bias.data
            if layer.norm is not None:
                out[f"enc{i}.norm_mean"] = layer.norm.running_mean
                out[f"enc{i}.norm_var"] = layer.norm.running_var
        return out

    def copy(self) -> "EncoderModel":
        layers = []
        for layer in self.layers:
            norm = None
            if layer.norm is not None:
                norm = Norm(layer.norm.running_mean.copy(), layer.norm.running_var.copy(),
                            layer.norm.stats_frozen, layer.norm.momentum)
            layers.append(Layer(ad.Tensor(layer.weight.data.copy(), name=layer.weight.name),
                                ad.Tensor(layer.bias.data.copy(), name=layer.bias.name),
                                layer.activation, norm, layer.frozen))
        return EncoderModel(layers)


def _activate(x: Tensor, act: str) -> Tensor:
    if act == "tanh":
        return ad.tanh(x)
    if act == "relu":
        return ad.relu(x)
    return x


def _activate_np(x: np.ndarray, act: str) -> np.ndarray:
    if act == "tanh":
        return np.tanh(x)
    if act == "relu":
        return np.maximum(x, 0.0)
    return x


def encode(encoder: EncoderModel, instances) -> Tensor:
    """Apply the encoder row-wise: ``N x D_raw -> N x D_feat``."""
    x = ad.as_tensor(instances)
    if x.data.ndim != 2 or x.shape[1] != encoder.in_dim:
        raise ValueError(f"encoder expects N x {encoder.in_dim} input, got {x.shape}")
    n = x.shape[0]
    encoder.instances_forwarded += n
    h = x
    for layer in encoder.layers:
        z = h @ layer.weight + ad.tile_rows(layer.bias, n)
        if layer.norm is not None:
            z = layer.norm(z, encoder.training)
        h = _activate(z, layer.activation)
    return h


def encode_array(encoder: EncoderModel, instances: np.ndarray) -> np.ndarray:
    """Gradient-free forward pass returning a plain array."""
    with ad.no_grad():
        return encode(encoder, instances).data


# ----------------------------------------------------------------------------
# information-bottleneck gate


@dataclass
class IBGate:
    weight: Tensor  # D_feat x 1
    bias: Tensor  # scalar
    prior_rate: float = 0.05
    beta: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.prior_rate < 1.0:
            raise ValueError(f"prior_rate must lie in (0, 1), got {self.prior_rate}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    @classmethod
    def build(cls, dim: int, prior_rate: float = 0.05, beta: float = 0.1, seed: int = 0) -> "IBGate":
        rng = np.random.default_rng([seed, 0x6A7E])
        w = rng.normal(0.0, 0.01, size=(dim, 1))
        return cls(ad.parameter(w, "gate.w"), ad.parameter(0.0, "gate.b"), prior_rate, beta)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def state(self) -> dict[str, np.ndarray]:
        return {"gate.w": self.weight.data, "gate.b": self.bias.data}


def gate_probs(gate: IBGate, features) -> Tensor:
    """Keep-probabilities ``sigmoid(w . z_i + b)``, one per instance."""
    z = ad.as_tensor(features)
    if z.data.ndim != 2 or z.shape[1] != gate.weight.shape[0]:
        raise ValueError(f"gate expects N x {gate.weight.shape[0]} features, got {z.shape}")
    scores = ad.reshape(z @ gate.weight, (z.shape[0],)) + gate.bias
    return ad.sigmoid(scores)


def sample_mask(probs: Tensor, rng: np.random.Generator | int) -> tuple[np.ndarray, Tensor]:
    """Draw ``hard ~ Bernoulli(probs)`` and return ``(hard, (probs + hard) / 2)``.

    The hard sample enters as a constant, so the blended mask has derivative
    exactly 0.5 with respect to each probability.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    hard = (rng.random(probs.shape) < probs.data).astype(np.float64)
    return hard, ad.scale(probs + Tensor(hard), 0.5)


def apply_mask(features, mask) -> Tensor:
    """Scale row ``i`` of ``features`` by ``mask[i]``."""
    z, m = ad.as_tensor(features), ad.as_tensor(mask)
    if m.data.ndim != 1 or m.shape[0] != z.shape[0]:
        raise ValueError(f"mask length {m.shape} does not match {z.shape[0]} instances")
    return z * ad.tile_cols(m, z.shape[1])


def kl_bernoulli(probs, prior_rate: float) -> Tensor:
    """Mean over instances of KL(Bernoulli(p_i) || Bernoulli(prior_rate)), in nats."""
    if not 0.0 < prior_rate < 1.0:
        raise ValueError("prior_rate must lie in (0, 1)")
    p = ad.clip(ad.as_tensor(probs), KL_CLAMP, 1.0 - KL_CLAMP)
    q = 1.0 - p
    kl = p * (ad.log(p) - np.log(prior_rate)) + q * (ad.log(q) - np.log(1.0 - prior_rate))
    return ad.mean(kl)


def top_k_select(probs, k: int) -> np.ndarray:
    """Indices of the ``k`` largest probabilities, descending; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=float)
    order = np.argsort(-p, kind="stable")
    return order[:k]


# ----------------------------------------------------------------------------
# MIL heads


@dataclass
class MILHead:
    variant: str
    classifier_w: Tensor  # D_feat x C
    classifier_b: Tensor  # C
    attn_v: Tensor | None = None  # D_feat x d_a
    attn_u: Tensor | None = None  # D_feat x d_a
    attn_w: Tensor | None = None  # d_a x 1
    config: dict = field(default_factory=dict)

    @classmethod
    def build(cls, variant: str, dim: int, n_classes: int = 2, attn_dim: int = 16, seed: int = 0) -> "MILHead":
        if variant not in HEAD_VARIANTS:
            raise ValueError(f"unknown head variant {variant!r}; expected one of {HEAD_VARIANTS}")
        rng = np.random.default_rng([seed, 0x4EAD])
        head = cls(variant, ad.parameter(_glorot(rng, dim, n_classes), "head.cls_w"),
                   ad.parameter(np.zeros(n_classes), "head.cls_b"),
                   config={"variant": variant, "dim": dim, "n_classes": n_classes, "attn_dim": attn_dim})
        if variant == "attention":
            head.attn_v = ad.parameter(_glorot(rng, dim, attn_dim), "head.attn_v")
            head.attn_u = ad.parameter(_glorot(rng, dim, attn_dim), "head.attn_u")
            head.attn_w = ad.parameter(_glorot(rng, attn_dim, 1), "head.attn_w")
        return head

    @property
    def in_dim(self) -> int:
        return self.classifier_w.shape[0]

    @property
    def n_classes(self) -> int:
        return self.classifier_w.shape[1]

    def parameters(self) -> list[Tensor]:
        ps = [self.classifier_w, self.classifier_b]
        if self.variant == "attention":
            ps += [self.attn_v, self.attn_u, self.attn_w]
        return ps

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}


def _classify(head: MILHead, rows: Tensor) -> Tensor:
    return rows @ head.classifier_w + ad.tile_rows(head.classifier_b, rows.shape[0])


def mil_forward(head: MILHead, features) -> tuple[Tensor, Tensor | None]:
    """Bag logits (length C) and, for the attention head, the attention weights."""
    z = ad.as_tensor(features)
    if z.data.ndim != 2 or z.shape[0] < 1:
        raise ValueError("mil_forward needs a non-empty N x D bag")
    if z.shape[1] != head.in_dim:
        raise ValueError(f"head expects {head.in_dim}-dim features, got {z.shape[1]}")
    n, c = z.shape[0], head.n_classes
    if head.variant == "mean":
        emb = ad.reshape(ad.mean(z, axis=0), (1, z.shape[1]))
        return ad.reshape(_classify(head, emb), (c,)), None
    if head.variant == "max":
        return ad.max(_classify(head, z), axis=0), None
    gated = ad.tanh(z @ head.attn_v) * ad.sigmoid(z @ head.attn_u)
    attn = ad.softmax(ad.reshape(gated @ head.attn_w, (n,)), axis=0)
    emb = ad.reshape(attn, (1, n)) @ z
    return ad.reshape(_classify(head, emb), (c,)), attn


def vib_loss(bag_logits: Tensor, bag_label: int, probs, gate: IBGate) -> Tensor:
    """Bag cross-entropy plus ``beta`` times the Bernoulli KL to the prior."""
    task = ad.cross_entropy(bag_logits, bag_label)
    if gate.beta == 0:
        return task
    return task + ad.scale(kl_bernoulli(probs, gate.prior_rate), gate.beta)


def iter_parameters(*modules) -> Iterator[Tensor]:
    for m in modules:
        yield from m.parameters()
