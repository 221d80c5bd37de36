"""Desk-scale Vision Transformer with block reweighting, top-down pruning and LoRA."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .tensor import Tensor


@dataclass
class VitConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    d_embed: int = 32
    d_mlp: int = 64
    n_heads: int = 2
    n_layers: int = 4
    n_classes: int = 10

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ParameterError(f"VitConfig.{k} must be a positive integer, got {v!r}")
        if self.image_size % self.patch_size:
            raise ParameterError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.d_embed % self.n_heads:
            raise ParameterError(f"n_heads {self.n_heads} does not divide d_embed {self.d_embed}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


@dataclass
class ReMemConfig:
    """Block interventions. The default is the unmodified network."""

    alpha_mlp: float = 1.0
    alpha_attn: float = 1.0
    prune_mlp_top_k: int = 0
    prune_attn_top_k: int = 0

    def validate(self, n_layers: int) -> None:
        for name in ("alpha_mlp", "alpha_attn"):
            a = getattr(self, name)
            if not 0.0 <= a <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {a}")
        for name in ("prune_mlp_top_k", "prune_attn_top_k"):
            k = getattr(self, name)
            if not 0 <= k <= n_layers:
                raise ParameterError(f"{name} must lie in [0, {n_layers}], got {k}")

    def mlp_pruned(self, layer: int, n_layers: int) -> bool:
        return layer >= n_layers - self.prune_mlp_top_k

    def attn_pruned(self, layer: int, n_layers: int) -> bool:
        return layer >= n_layers - self.prune_attn_top_k


@dataclass
class LoraConfig:
    rank: int = 32
    alpha: float = 32.0
    targets: tuple[str, ...] = field(default=("q", "v"))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class ForwardOutput(NamedTuple):
    logits: Tensor
    cls_embedding: Tensor
    mlp_activations: list
    residual_cls: Tensor


def effective_weight(alpha: float, layer: int, l_tot: int) -> float:
    """Multiplier a layer-``layer`` MLP output carries to the network output (layers 1-based)."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if not 1 <= layer <= l_tot:
        raise ParameterError(f"layer {layer} outside 1..{l_tot}")
    return alpha * (2.0 - alpha) ** (l_tot - layer)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., d_in] @ w[d_in, d_out] + b``."""
    lead = x.shape[:-1]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    y = T.matmul(x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x, w)
    if b is not None:
        y = y + T.expand(b, y.shape)
    return y.reshape(*lead, w.shape[1]) if x.ndim != 2 else y


def lora_forward(x: Tensor, w: Tensor, b: Tensor | None, lora_a: Tensor, lora_b: Tensor,
                 scaling: float) -> Tensor:
    """Base projection plus the low-rank update ``scaling * x (BA)^T``.

    ``lora_a`` is ``r x d_in`` and ``lora_b`` is ``d_out x r`` (column-vector
    orientation), while ``w`` is stored ``d_in x d_out`` for row inputs.
    """
    r = lora_a.shape[0]
    if lora_a.shape != (r, w.shape[0]) or lora_b.shape != (w.shape[1], r):
        raise ShapeError(f"lora: A {lora_a.shape}, B {lora_b.shape} inconsistent with W {w.shape}")
    base = linear(x, w, b)
    low = linear(linear(x, lora_a.T), lora_b.T)
    return base + low * scaling


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``b x c x h x w`` -> ``b x n_patches x (c * patch * patch)``, patches in row-major order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // patch) * (w // patch), c * patch * patch)


class VitModel:
    """Parameters of a pre-layernorm ViT, stored as named leaf tensors."""

    def __init__(self, config: VitConfig, seed: int = 0, dtype=None):
        self.config = config
        self.lora: LoraConfig | None = None
        rng = np.random.default_rng(seed)
        c = config
        d, m = c.d_embed, c.d_mlp
        dt = dtype or T.default_dtype()

        def p(name, arr):
            self.params[name] = Tensor(arr, requires_grad=True, name=name, dtype=dt)

        self.params: dict[str, Tensor] = {}
        p("patch.w", trunc_normal(rng, (c.patch_dim, d)))
        p("patch.b", np.zeros(d))
        p("cls", trunc_normal(rng, (d,)))
        p("pos", trunc_normal(rng, (c.n_tokens, d)))
        for l in range(c.n_layers):
            pre = f"layers.{l}."
            p(pre + "ln1.g", np.ones(d))
            p(pre + "ln1.b", np.zeros(d))
            for proj in ("q", "k", "v", "o"):
                p(pre + f"attn.{proj}.w", trunc_normal(rng, (d, d)))
                p(pre + f"attn.{proj}.b", np.zeros(d))
            p(pre + "ln2.g", np.ones(d))
            p(pre + "ln2.b", np.zeros(d))
            p(pre + "mlp.w1", trunc_normal(rng, (d, m)))
            p(pre + "mlp.b1", np.zeros(m))
            p(pre + "mlp.w2", trunc_normal(rng, (m, d)))
            p(pre + "mlp.b2", np.zeros(d))
        p("final_ln.g", np.ones(d))
        p("final_ln.b", np.zeros(d))
        p("head.w", trunc_normal(rng, (d, c.n_classes)))
        p("head.b", np.zeros(c.n_classes))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        """Trainable tensors: everything, or only the LoRA factors when LoRA is attached."""
        if self.lora is not None:
            return [t for n, t in self.params.items() if ".lora_" in n]
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for n, t in self.params.items() if ".lora_" not in n)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            self.params[n].data = np.array(arr, dtype=self.params[n].data.dtype)

    def copy(self) -> VitModel:
        new = copy.copy(self)
        new.params = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n, dtype=t.data.dtype)
                      for n, t in self.params.items()}
        new.lora = copy.deepcopy(self.lora)
        return new

    def astype(self, dtype) -> VitModel:
        new = self.copy()
        for t in new.params.values():
            t.data = t.data.astype(dtype)
        return new

    # -- LoRA ----------------------------------------------------------
    def attach_lora(self, cfg: LoraConfig, seed: int = 0) -> None:
        d = self.config.d_embed
        if not 1 <= cfg.rank <= d:
            raise ParameterError(f"LoRA rank {cfg.rank} must lie in [1, {d}]")
        rng = np.random.default_rng(seed)
        self.lora = cfg
        dt = self.params["patch.w"].data.dtype
        for l in range(self.config.n_layers):
            for proj in cfg.targets:
                pre = f"layers.{l}.attn.{proj}"
                self.params[pre + ".lora_a"] = Tensor(rng.normal(0.0, 0.01, (cfg.rank, d)), True, pre + ".lora_a", dt)
                self.params[pre + ".lora_b"] = Tensor(np.zeros((d, cfg.rank)), True, pre + ".lora_b", dt)

    def merge_lora(self) -> None:
        """Fold ``W <- W + (alpha/r) (BA)^T`` and detach the adapters."""
        if self.lora is None:
            return
        s = self.lora.scaling
        for l in range(self.config.n_layers):
            for proj in self.lora.targets:
                pre = f"layers.{l}.attn.{proj}"
                a = self.params.pop(pre + ".lora_a").data
                b = self.params.pop(pre + ".lora_b").data
                w = self.params[pre + ".w"]
                w.data = (w.data + s * (b @ a).T).astype(w.data.dtype)
        self.lora = None


def _project(model: VitModel, h: Tensor, pre: str, proj: str) -> Tensor:
    w, b = model.params[f"{pre}.{proj}.w"], model.params[f"{pre}.{proj}.b"]
    if model.lora is not None and proj in model.lora.targets:
        return lora_forward(h, w, b, model.params[f"{pre}.{proj}.lora_a"],
                            model.params[f"{pre}.{proj}.lora_b"], model.lora.scaling)
    return linear(h, w, b)


def attention(model: VitModel, h: Tensor, layer: int) -> Tensor:
    c = model.config
    bsz, t, d = h.shape
    nh, dh = c.n_heads, d // c.n_heads
    pre = f"layers.{layer}.attn"

    def heads(x):
        return x.reshape(bsz, t, nh, dh).transpose(0, 2, 1, 3)

    q = heads(_project(model, h, pre, "q"))
    k = heads(_project(model, h, pre, "k"))
    v = heads(_project(model, h, pre, "v"))
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    o = T.matmul(T.softmax(scores), v)
    o = o.transpose(0, 2, 1, 3).reshape(bsz, t, d)
    return linear(o, model.params[pre + ".o.w"], model.params[pre + ".o.b"])


def forward(model: VitModel, remem: ReMemConfig | None, images, neuron_mask: dict | None = None) -> ForwardOutput:
    """Run the network.

    Layer update: ``x~ = (2-a_attn) x + a_attn Attn(LN(x))`` and
    ``x' = (2-a_mlp) x~ + a_mlp MLP(LN(x~))``; a pruned block is a plain
    identity. ``neuron_mask`` maps a layer index to a ``d_mlp`` vector that
    multiplies that layer's post-ReLU activations.
    """
    c = model.config
    remem = remem or ReMemConfig()
    remem.validate(c.n_layers)
    images = images.data if isinstance(images, Tensor) else np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (c.channels, c.image_size, c.image_size):
        raise ShapeError(f"forward: images {images.shape} do not match config "
                         f"{(c.channels, c.image_size, c.image_size)}")
    P = model.params
    dt = P["patch.w"].data.dtype
    bsz = images.shape[0]
    d = c.d_embed

    patches = Tensor(patchify(images, c.patch_size), dtype=dt)
    x = linear(patches, P["patch.w"], P["patch.b"])
    cls = T.expand(P["cls"].reshape(1, 1, d), (bsz, 1, d))
    x = T.concat([cls, x], axis=1)
    x = x + T.expand(P["pos"].reshape(1, c.n_tokens, d), x.shape)

    acts: list = []
    for l in range(c.n_layers):
        pre = f"layers.{l}."
        if not remem.attn_pruned(l, c.n_layers):
            a = attention(model, T.layernorm(x, P[pre + "ln1.g"], P[pre + "ln1.b"]), l)
            x = _reweight(x, a, remem.alpha_attn)
        if remem.mlp_pruned(l, c.n_layers):
            acts.append(None)
            continue
        h = T.layernorm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        h = T.relu(linear(h, P[pre + "mlp.w1"], P[pre + "mlp.b1"]))
        if neuron_mask is not None and l in neuron_mask:
            mask = np.broadcast_to(np.asarray(neuron_mask[l], dtype=dt), h.shape)
            h = h * Tensor(mask, dtype=dt)
        acts.append(h)
        x = _reweight(x, linear(h, P[pre + "mlp.w2"], P[pre + "mlp.b2"]), remem.alpha_mlp)

    resid_cls = x[:, 0, :]
    cls_emb = T.layernorm(resid_cls, P["final_ln.g"], P["final_ln.b"])
    logits = linear(cls_emb, P["head.w"], P["head.b"])
    return ForwardOutput(logits, cls_emb, acts, resid_cls)


def _reweight(x: Tensor, block_out: Tensor, alpha: float) -> Tensor:
    if alpha == 1.0:
        return x + block_out
    return x * (2.0 - alpha) + block_out * alpha


def predict(model: VitModel, remem: ReMemConfig | None, images: np.ndarray, batch_size: int = 256,
            what: str = "logits") -> np.ndarray:
    """Gradient-free batched forward returning ``logits`` or ``cls_embedding`` as numpy."""
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out = forward(model, remem, images[i:i + batch_size])
            outs.append(getattr(out, what).data)
    return np.concatenate(outs, axis=0)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((np.argmax(logits, axis=1) == labels).mean())
