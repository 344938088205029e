"""Frozen layered backbone with bottleneck adapters and per-layer heads.

Every layer applies its backbone transform then a residual bottleneck
adapter.  Backbone and embedding parameters are permanently frozen; only
adapters, local heads, and the final head are ever trainable.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeMismatch,
    Tensor,
    add,
    bias_add,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    swap_last2,
    tanh,
)

ADAPTER_ACTIVATIONS = {"gelu": gelu, "relu": relu, "tanh": tanh, "identity": None}


@dataclass
class AdapterParams:
    """Residual bottleneck adapter: h + f(h @ down) @ up."""

    down: Tensor  # [u, v]
    up: Tensor  # [v, u]
    activation: str = "gelu"


def init_adapter(u: int, v: int, seed, activation: str = "gelu") -> AdapterParams:
    """Identity-start init: down ~ U(+-1/sqrt(u)), up = 0."""
    if not 1 <= v < u:
        raise ValueError(f"adapter bottleneck must satisfy 1 <= v < u, got u={u}, v={v}")
    if activation not in ADAPTER_ACTIVATIONS:
        raise ValueError(f"unknown adapter activation {activation!r}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(u)
    down = Tensor(rng.uniform(-bound, bound, size=(u, v)))
    up = Tensor(np.zeros((v, u)))
    return AdapterParams(down, up, activation)


def adapter_forward(h: Tensor, adapter: AdapterParams) -> Tensor:
    u = adapter.down.shape[0]
    if h.shape[-1] != u:
        raise ShapeMismatch(f"adapter width {u} does not match hidden {h.shape}")
    h2 = reshape(h, (-1, u)) if h.ndim == 3 else h
    z = matmul(h2, adapter.down)
    f = ADAPTER_ACTIVATIONS[adapter.activation]
    if f is not None:
        z = f(z)
    out = add(h2, matmul(z, adapter.up))
    return reshape(out, h.shape) if h.ndim == 3 else out


def _uniform(rng, shape, fan_in, scale):
    bound = scale / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


class MlpLayer:
    """Pre-norm residual feed-forward block: x + W2 gelu(W1 LN(x) + b1) + b2."""

    kind = "mlp"

    def __init__(self, u: int, ffn: int, seed, scale: float = 1.0, identity: bool = False, eps: float = 1e-5):
        rng = np.random.default_rng(seed)
        self.u, self.ffn, self.eps = u, ffn, eps
        self.ln_gain = Tensor(np.ones(u))
        self.ln_bias = Tensor(np.zeros(u))
        self.w1 = _uniform(rng, (u, ffn), u, scale)
        self.b1 = Tensor(np.zeros(ffn))
        self.w2 = Tensor(np.zeros((ffn, u))) if identity else _uniform(rng, (ffn, u), ffn, scale)
        self.b2 = Tensor(np.zeros(u))

    def params(self) -> dict[str, Tensor]:
        return {
            "ln.gain": self.ln_gain,
            "ln.bias": self.ln_bias,
            "fc1.W": self.w1,
            "fc1.b": self.b1,
            "fc2.W": self.w2,
            "fc2.b": self.b2,
        }

    def forward(self, x: Tensor) -> Tensor:
        b, t, u = x.shape
        x2 = reshape(x, (b * t, u))
        z = layer_norm(x2, self.ln_gain, self.ln_bias, self.eps)
        hid = gelu(bias_add(matmul(z, self.w1), self.b1))
        out = add(x2, bias_add(matmul(hid, self.w2), self.b2))
        return reshape(out, (b, t, u))


class AttnLiteLayer:
    """Single-head self-attention plus feed-forward, both pre-norm residual."""

    kind = "attn-lite"

    def __init__(self, u: int, ffn: int, seed, scale: float = 1.0, identity: bool = False, eps: float = 1e-5):
        rng = np.random.default_rng(seed)
        self.u, self.ffn, self.eps = u, ffn, eps
        self.ln1_gain = Tensor(np.ones(u))
        self.ln1_bias = Tensor(np.zeros(u))
        self.wq = _uniform(rng, (u, u), u, scale)
        self.wk = _uniform(rng, (u, u), u, scale)
        self.wv = _uniform(rng, (u, u), u, scale)
        self.wo = Tensor(np.zeros((u, u))) if identity else _uniform(rng, (u, u), u, scale)
        self.ln2_gain = Tensor(np.ones(u))
        self.ln2_bias = Tensor(np.zeros(u))
        self.w1 = _uniform(rng, (u, ffn), u, scale)
        self.b1 = Tensor(np.zeros(ffn))
        self.w2 = Tensor(np.zeros((ffn, u))) if identity else _uniform(rng, (ffn, u), ffn, scale)
        self.b2 = Tensor(np.zeros(u))

    def params(self) -> dict[str, Tensor]:
        return {
            "ln1.gain": self.ln1_gain,
            "ln1.bias": self.ln1_bias,
            "attn.wq": self.wq,
            "attn.wk": self.wk,
            "attn.wv": self.wv,
            "attn.wo": self.wo,
            "ln2.gain": self.ln2_gain,
            "ln2.bias": self.ln2_bias,
            "fc1.W": self.w1,
            "fc1.b": self.b1,
            "fc2.W": self.w2,
            "fc2.b": self.b2,
        }

    def forward(self, x: Tensor) -> Tensor:
        b, t, u = x.shape
        x2 = reshape(x, (b * t, u))
        z = layer_norm(x2, self.ln1_gain, self.ln1_bias, self.eps)
        q = reshape(matmul(z, self.wq), (b, t, u))
        k = reshape(matmul(z, self.wk), (b, t, u))
        v = reshape(matmul(z, self.wv), (b, t, u))
        scores = mul(matmul(q, swap_last2(k)), 1.0 / math.sqrt(u))
        ctx = matmul(softmax(scores), v)
        attn = matmul(reshape(ctx, (b * t, u)), self.wo)
        a2 = add(x2, attn)
        z2 = layer_norm(a2, self.ln2_gain, self.ln2_bias, self.eps)
        hid = gelu(bias_add(matmul(z2, self.w1), self.b1))
        out = add(a2, bias_add(matmul(hid, self.w2), self.b2))
        return reshape(out, (b, t, u))


BACKBONE_KINDS = {"mlp": MlpLayer, "attn-lite": AttnLiteLayer}


class LocalHead:
    """Mean-pool over tokens followed by an affine readout."""

    def __init__(self, u: int, n_classes: int, seed=None):
        self.u, self.n_classes = u, n_classes
        if seed is None:
            w = np.zeros((u, n_classes))
        else:
            rng = np.random.default_rng(seed)
            w = rng.uniform(-1.0, 1.0, size=(u, n_classes)) / math.sqrt(u)
        self.W = Tensor(w)
        self.b = Tensor(np.zeros(n_classes))

    def logits(self, hidden: Tensor) -> Tensor:
        if hidden.ndim != 3:
            raise ShapeMismatch(f"head expects [batch, tokens, u], got {hidden.shape}")
        pooled = mean(hidden, axis=1)
        return bias_add(matmul(pooled, self.W), self.b)


class TokenEmbedding:
    def __init__(self, vocab: int, u: int, seed):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.table = Tensor(rng.standard_normal((vocab, u)))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
            raise ShapeMismatch(f"token batch must be integer [batch, tokens], got {ids.shape} {ids.dtype}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise ValueError(f"token id out of range for vocab {self.vocab}")
        return Tensor(self.table.data[ids])


class FeatureEmbedding:
    """Projects dense feature rows to width u, as a length-1 token sequence."""

    def __init__(self, feature_dim: int, u: int, seed):
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.proj = Tensor(rng.standard_normal((feature_dim, u)) / math.sqrt(feature_dim))

    def __call__(self, feats) -> Tensor:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.feature_dim:
            raise ShapeMismatch(f"feature batch must be [batch, {self.feature_dim}], got {feats.shape}")
        return Tensor((feats @ self.proj.data)[:, None, :])


@dataclass(frozen=True)
class StackDims:
    L: int
    u: int
    v: int
    C: int
    kind: str = "mlp"
    ffn: int = 0  # 0 means 2*u
    vocab: int | None = None
    feature_dim: int | None = None

    def __post_init__(self):
        if self.L < 1 or self.u < 2 or self.C < 2:
            raise ValueError(f"bad stack dims L={self.L}, u={self.u}, C={self.C}")
        if not 1 <= self.v < self.u:
            raise ValueError(f"adapter bottleneck must satisfy 1 <= v < u, got {self.v} vs {self.u}")
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if (self.vocab is None) == (self.feature_dim is None):
            raise ValueError("exactly one of vocab / feature_dim must be set")

    @property
    def ffn_dim(self) -> int:
        return self.ffn if self.ffn else 2 * self.u


@dataclass
class LayerUnit:
    backbone: object
    adapter: AdapterParams
    head: LocalHead


class ModelStack:
    def __init__(self, dims: StackDims, embed, units: list[LayerUnit], final_head: LocalHead,
                 adapter_activation: str = "gelu", eps: float = 1e-5):
        self.dims = dims
        self.embed = embed
        self.units = units
        self.final_head = final_head
        self.adapter_activation = adapter_activation
        self.eps = eps

    @property
    def L(self) -> int:
        return len(self.units)


def build_stack(dims: StackDims, seed: int = 0, init_scale: float = 1.0,
                adapter_activation: str = "gelu", identity_backbone: bool = False,
                eps: float = 1e-5) -> ModelStack:
    """Deterministically initialize a full stack from one master seed."""
    entropy = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = entropy.spawn(3 * dims.L + 2)
    it = iter(children)
    if dims.vocab is not None:
        embed = TokenEmbedding(dims.vocab, dims.u, next(it))
    else:
        embed = FeatureEmbedding(dims.feature_dim, dims.u, next(it))
    layer_cls = BACKBONE_KINDS[dims.kind]
    units = []
    for _ in range(dims.L):
        backbone = layer_cls(dims.u, dims.ffn_dim, next(it), scale=init_scale,
                             identity=identity_backbone, eps=eps)
        adapter = init_adapter(dims.u, dims.v, next(it), adapter_activation)
        head = LocalHead(dims.u, dims.C, next(it))
        units.append(LayerUnit(backbone, adapter, head))
    final_head = LocalHead(dims.u, dims.C, next(it))
    return ModelStack(dims, embed, units, final_head, adapter_activation, eps)


def forward_through(stack: ModelStack, x, upto: int | None = None,
                    active_set=()) -> tuple[Tensor, list[int]]:
    """Apply layers 1..upto, each as backbone-then-adapter.

    Layers outside active_set run gradient-free when nothing upstream
    requires grad; those layer indices are returned as the released-memory
    trace (their activations are releasable immediately after consumption).
    """
    L = stack.L
    upto = L if upto is None else upto
    if not 0 <= upto <= L:
        raise ValueError(f"upto must lie in [0, {L}], got {upto}")
    active = set(active_set)
    if not active <= set(range(1, upto + 1)):
        raise ValueError(f"active_set {sorted(active)} not within layers 1..{upto}")
    h = stack.embed(x)
    releasable: list[int] = []
    for i in range(1, upto + 1):
        unit = stack.units[i - 1]
        if i in active or h.requires_grad:
            h = adapter_forward(unit.backbone.forward(h), unit.adapter)
        else:
            with no_grad():
                h = adapter_forward(unit.backbone.forward(h), unit.adapter)
            releasable.append(i)
    return h, releasable


def local_loss(stack: ModelStack, hidden: Tensor, layer_idx: int, labels) -> Tensor:
    """Cross-entropy of layer layer_idx's local head on its output hidden."""
    if not 1 <= layer_idx <= stack.L:
        raise ValueError(f"layer index {layer_idx} out of range 1..{stack.L}")
    return softmax_cross_entropy(stack.units[layer_idx - 1].head.logits(hidden), labels)


def aux_branch_forward(stack: ModelStack, hidden: Tensor, from_layer: int, labels) -> Tensor:
    """Lightweight global branch: subsequent adapters only, then the final head.

    Backbones after from_layer are skipped entirely; gradients flow through
    the (frozen) subsequent adapters back into the window.
    """
    if not 1 <= from_layer <= stack.L:
        raise ValueError(f"layer index {from_layer} out of range 1..{stack.L}")
    if from_layer == stack.L:
        raise ValueError("aux branch undefined at the final layer; use the end-to-end loss")
    h = hidden
    for j in range(from_layer + 1, stack.L + 1):
        h = adapter_forward(h, stack.units[j - 1].adapter)
    return softmax_cross_entropy(stack.final_head.logits(h), labels)


def end_to_end_loss(stack: ModelStack, hidden: Tensor, labels) -> Tensor:
    return softmax_cross_entropy(stack.final_head.logits(hidden), labels)


def predict_logits(stack: ModelStack, x) -> np.ndarray:
    with no_grad():
        h, _ = forward_through(stack, x)
        return stack.final_head.logits(h).data


def evaluate_accuracy(stack: ModelStack, x, labels) -> float:
    pred = predict_logits(stack, x).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


def named_parameters(stack: ModelStack) -> dict[str, Tensor]:
    """Stable 1-based naming used by checkpoints, deltas, and aggregation."""
    params: dict[str, Tensor] = {}
    params["embed"] = stack.embed.table if isinstance(stack.embed, TokenEmbedding) else stack.embed.proj
    for i, unit in enumerate(stack.units, start=1):
        for key, t in unit.backbone.params().items():
            params[f"backbone.{i}.{key}"] = t
        params[f"layer.{i}.adapter.down"] = unit.adapter.down
        params[f"layer.{i}.adapter.up"] = unit.adapter.up
        params[f"layer.{i}.head.W"] = unit.head.W
        params[f"layer.{i}.head.b"] = unit.head.b
    params["final_head.W"] = stack.final_head.W
    params["final_head.b"] = stack.final_head.b
    return params


def backbone_fingerprint(stack: ModelStack) -> str:
    """SHA-256 over all permanently frozen tensors (embedding and backbones)."""
    digest = hashlib.sha256()
    for name, t in named_parameters(stack).items():
        if name == "embed" or name.startswith("backbone."):
            digest.update(name.encode())
            digest.update(t.data.tobytes())
    return digest.hexdigest()


TRAINABLE_SCHEMES = ("window", "all_adapters", "final_only")


def mark_trainable(stack: ModelStack, window: tuple[int, int] | None = None,
                   scheme: str = "window") -> dict[str, Tensor]:
    """Set requires_grad flags for one training stage; returns the trainable map."""
    if scheme not in TRAINABLE_SCHEMES:
        raise ValueError(f"unknown trainable scheme {scheme!r}")
    for i, unit in enumerate(stack.units, start=1):
        for t in (unit.adapter.down, unit.adapter.up, unit.head.W, unit.head.b):
            t.requires_grad = False
            t.grad = None
    for t in (stack.final_head.W, stack.final_head.b):
        t.requires_grad = False
        t.grad = None

    trainable: dict[str, Tensor] = {}
    if scheme == "window":
        if window is None:
            raise ValueError("window scheme needs a (lo, hi) window")
        lo, hi = window
        if not 1 <= lo <= hi <= stack.L:
            raise ValueError(f"window {window} out of range 1..{stack.L}")
        for i in range(lo, hi + 1):
            unit = stack.units[i - 1]
            trainable[f"layer.{i}.adapter.down"] = unit.adapter.down
            trainable[f"layer.{i}.adapter.up"] = unit.adapter.up
            trainable[f"layer.{i}.head.W"] = unit.head.W
            trainable[f"layer.{i}.head.b"] = unit.head.b
    elif scheme == "all_adapters":
        for i, unit in enumerate(stack.units, start=1):
            trainable[f"layer.{i}.adapter.down"] = unit.adapter.down
            trainable[f"layer.{i}.adapter.up"] = unit.adapter.up
    trainable["final_head.W"] = stack.final_head.W
    trainable["final_head.b"] = stack.final_head.b
    for t in trainable.values():
        t.requires_grad = True
    return trainable
