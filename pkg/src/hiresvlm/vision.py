"""Multi-patch vision encoder.

An image is encoded as one global view (the whole image resized to the ViT's
base resolution) plus a grid of local tiles cut from a resize to the target
resolution.  A single frozen ViT encodes every sub-image; one LoRA adapter set
modulates it for the global view and another for the tiles.  Global and local
outputs get their own LayerNorm, then a learned per-position embedding is
added over the concatenated sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError
from .tensor import (
    MulLedger,
    Rng,
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    mul,
    softmax_rows,
    transpose,
)

LINEARS = ("q", "k", "v", "o", "fc1", "fc2")


@dataclass(frozen=True)
class VitGeometry:
    base_resolution: int = 28
    patch_size: int = 14
    d_vit: int = 16
    layers: int = 2
    heads: int = 2
    target_resolution: int = 56
    channels: int = 3

    def __post_init__(self):
        for name in ("base_resolution", "patch_size", "d_vit", "layers", "heads", "target_resolution", "channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.base_resolution % self.patch_size:
            raise ConfigurationError("base_resolution must be divisible by patch_size")
        if self.target_resolution % self.base_resolution:
            raise ConfigurationError("target_resolution must be a multiple of base_resolution")
        if self.d_vit % self.heads:
            raise ConfigurationError("d_vit must be divisible by heads")

    @property
    def grid(self) -> int:
        """Tiles per side of the local grid."""
        return self.target_resolution // self.base_resolution

    @property
    def patches_per_side(self) -> int:
        return self.base_resolution // self.patch_size

    @property
    def tokens_per_image(self) -> int:
        """N': patches of one sub-image plus its [CLS] token."""
        return self.patches_per_side**2 + 1

    @property
    def num_subimages(self) -> int:
        """P: one global view plus grid**2 tiles (just the global view when grid == 1)."""
        return 1 if self.grid == 1 else self.grid**2 + 1

    @property
    def num_locals(self) -> int:
        return self.num_subimages - 1

    @property
    def total_tokens(self) -> int:
        return self.num_subimages * self.tokens_per_image

    @property
    def full_resolution_tokens(self) -> int:
        """N for a single ViT run over the target resolution at the same patch size."""
        return (self.target_resolution // self.patch_size) ** 2 + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def linear_shapes(self) -> dict[str, tuple[int, int]]:
        d = self.d_vit
        shapes = {"patch": (self.patch_dim, d)}
        for i in range(self.layers):
            shapes.update({
                f"layers.{i}.q": (d, d),
                f"layers.{i}.k": (d, d),
                f"layers.{i}.v": (d, d),
                f"layers.{i}.o": (d, d),
                f"layers.{i}.fc1": (d, 4 * d),
                f"layers.{i}.fc2": (4 * d, d),
            })
        return shapes


# images


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres; same-size resizes are exact copies."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]

    def axis_weights(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis_weights(h, height)
    c0, c1, fc = axis_weights(w, width)
    rows = img[r0] * (1 - fr)[:, None, None] + img[r1] * fr[:, None, None]
    return rows[:, c0] * (1 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]


@dataclass
class SubImages:
    global_view: np.ndarray
    locals: list[np.ndarray]


def split_image(image: np.ndarray, geom: VitGeometry) -> SubImages:
    """Global resize plus row-major tiles of the target-resolution resize."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or min(image.shape) <= 0:
        raise InputError(f"expected a non-empty H x W x C image, got shape {image.shape}")
    if image.shape[2] != geom.channels:
        raise InputError(f"expected {geom.channels} channels, got {image.shape[2]}")
    if image.shape[0] < geom.base_resolution or image.shape[1] < geom.base_resolution:
        raise InputError(f"image {image.shape[:2]} smaller than base resolution {geom.base_resolution}")
    b = geom.base_resolution
    global_view = resize_bilinear(image, b, b)
    if geom.grid == 1:
        return SubImages(global_view, [])
    big = resize_bilinear(image, geom.target_resolution, geom.target_resolution)
    tiles = [
        big[r * b:(r + 1) * b, c * b:(c + 1) * b]
        for r in range(geom.grid)
        for c in range(geom.grid)
    ]
    return SubImages(global_view, tiles)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, C) -> (H/p * W/p, p*p*C), patches in row-major order."""
    h, w, c = image.shape
    g_h, g_w = h // patch, w // patch
    x = image.reshape(g_h, patch, g_w, patch, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(g_h * g_w, patch * patch * c)


# LoRA


@dataclass
class LoraLayer:
    A: Tensor
    B: Tensor
    alpha: float = 16.0
    dropout_p: float = 0.05

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraAdapter:
    """One adapter set: a LoRA pair for every linear layer of the ViT."""

    layers: dict[str, LoraLayer]
    rank: int = 8
    alpha: float = 16.0
    dropout_p: float = 0.05

    @classmethod
    def create(cls, geom: VitGeometry, rng: Rng, rank: int = 8, alpha: float = 16.0,
               dropout_p: float = 0.05) -> "LoraAdapter":
        if rank < 1:
            raise ConfigurationError("LoRA rank must be positive")
        layers = {}
        for name, (d_in, d_out) in geom.linear_shapes().items():
            A = Tensor(rng.normal((d_in, rank), std=1.0 / np.sqrt(d_in)), requires_grad=True)
            B = Tensor(np.zeros((rank, d_out)), requires_grad=True)
            layers[name] = LoraLayer(A, B, alpha, dropout_p)
        return cls(layers, rank, alpha, dropout_p)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers.items():
            out[f"{prefix}{name}.A"] = layer.A
            out[f"{prefix}{name}.B"] = layer.B
        return out

    def check(self, geom: VitGeometry) -> None:
        shapes = geom.linear_shapes()
        if set(shapes) != set(self.layers):
            raise ConfigurationError("adapter layers do not match the ViT geometry")
        for name, (d_in, d_out) in shapes.items():
            layer = self.layers[name]
            if layer.A.shape[0] != d_in or layer.B.shape[1] != d_out or layer.B.shape[0] != layer.rank:
                raise ConfigurationError(f"adapter {name} has shapes {layer.A.shape}/{layer.B.shape}")


def lora_apply(x: Tensor, frozen_W: Tensor, frozen_b: Tensor | None, adapter_layer: LoraLayer | None,
               train_mode: bool = False, *, category: str = "projection",
               ledger: MulLedger | None = None, rng: Rng | None = None) -> Tensor:
    """Frozen affine map plus ``(alpha / rank) * (x A) B``.

    Dropout hits only the adapter branch input and only in ``train_mode``.
    Adapter products are booked under ``other``.
    """
    out = matmul(x, frozen_W, category, ledger)
    if frozen_b is not None:
        out = add(out, frozen_b)
    if adapter_layer is None:
        return out
    if adapter_layer.rank < 1:
        raise ConfigurationError("LoRA rank must be positive")
    branch = x
    p = adapter_layer.dropout_p
    if train_mode and p > 0.0:
        if rng is None:
            raise ConfigurationError("train-mode dropout needs an rng")
        keep = (rng.uniform(x.shape) >= p).astype(np.float64) / (1.0 - p)
        branch = mul(x, Tensor(keep))
    delta = matmul(matmul(branch, adapter_layer.A, "other", ledger), adapter_layer.B, "other", ledger)
    return add(out, mul(delta, adapter_layer.scale))


# attention shared by encoder and decoder


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, ledger: MulLedger | None = None,
                         mask: np.ndarray | None = None, probs_out: list | None = None) -> Tensor:
    """Scaled dot-product attention split over ``heads`` column blocks.

    Scores book ``N_q * N_k * D`` under ``attention_scores`` (heads cancel) and
    the weighted sum of values the same amount under ``attention_values``.
    """
    d = q.shape[1]
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    outs = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        scores = mul(matmul(q[:, cols], transpose(k[:, cols]), "attention_scores", ledger), scale)
        p = softmax_rows(scores, mask)
        if probs_out is not None:
            probs_out.append(p.data)
        outs.append(matmul(p, v[:, cols], "attention_values", ledger))
    return outs[0] if heads == 1 else concat(outs, axis=1)


# frozen ViT


def _ln_params(d: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.ones(d)), Tensor(np.zeros(d))


class VisionTransformer:
    """Frozen pre-norm ViT with randomly initialised weights."""

    def __init__(self, geom: VitGeometry, rng: Rng):
        self.geom = geom
        d = geom.d_vit
        p: dict[str, Tensor] = {}
        for name, (d_in, d_out) in geom.linear_shapes().items():
            p[f"{name}.w"] = Tensor(rng.normal((d_in, d_out), std=1.0 / np.sqrt(d_in)))
            p[f"{name}.b"] = Tensor(rng.normal((d_out,), std=0.02))
        p["cls"] = Tensor(rng.normal((1, d), std=0.5))
        p["pos"] = Tensor(rng.normal((geom.tokens_per_image, d), std=0.1))
        for i in range(geom.layers):
            for ln in ("ln1", "ln2"):
                p[f"layers.{i}.{ln}.g"], p[f"layers.{i}.{ln}.b"] = _ln_params(d)
        self.params = p

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self.params.items()}

    def _linear(self, x, name, adapter, category, ledger, train_mode, rng):
        layer = adapter.layers[name] if adapter is not None else None
        return lora_apply(x, self.params[f"{name}.w"], self.params[f"{name}.b"], layer, train_mode,
                          category=category, ledger=ledger, rng=rng)

    def forward(self, image: np.ndarray, adapter: LoraAdapter | None = None, ledger: MulLedger | None = None,
                train_mode: bool = False, rng: Rng | None = None) -> Tensor:
        g = self.geom
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (g.base_resolution, g.base_resolution, g.channels):
            raise InputError(f"ViT expects {(g.base_resolution, g.base_resolution, g.channels)}, got {image.shape}")
        lin = lambda x, name, cat: self._linear(x, name, adapter, cat, ledger, train_mode, rng)  # noqa: E731
        P = self.params

        x = lin(Tensor(patchify(image, g.patch_size)), "patch", "other")
        x = add(concat([P["cls"], x], axis=0), P["pos"])
        for i in range(g.layers):
            pre = f"layers.{i}"
            a = layer_norm(x, P[f"{pre}.ln1.g"], P[f"{pre}.ln1.b"])
            q = lin(a, f"{pre}.q", "projection")
            k = lin(a, f"{pre}.k", "projection")
            v = lin(a, f"{pre}.v", "projection")
            att = multi_head_attention(q, k, v, g.heads, ledger)
            x = add(x, lin(att, f"{pre}.o", "projection"))
            m = layer_norm(x, P[f"{pre}.ln2.g"], P[f"{pre}.ln2.b"])
            m = gelu(lin(m, f"{pre}.fc1", "feedforward"))
            x = add(x, lin(m, f"{pre}.fc2", "feedforward"))
        return x


def vit_forward(vit: VisionTransformer, img: np.ndarray, adapter: LoraAdapter | None,
                ledger: MulLedger | None = None, train_mode: bool = False, rng: Rng | None = None) -> Tensor:
    return vit.forward(img, adapter, ledger, train_mode, rng)


# encoder


@dataclass
class VisionTokens:
    tokens: Tensor
    origin: np.ndarray  # -1 for global tokens, i for local tile i
    tokens_per_image: int

    @property
    def counts(self) -> tuple[int, int]:
        n_global = int((self.origin < 0).sum())
        return n_global, len(self.origin) - n_global

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def zeros_like(self) -> "VisionTokens":
        return VisionTokens(Tensor(np.zeros(self.tokens.shape)), self.origin.copy(), self.tokens_per_image)


@dataclass
class EncoderNorms:
    global_gain: Tensor
    global_bias: Tensor
    local_gain: Tensor
    local_bias: Tensor

    @classmethod
    def create(cls, d: int) -> "EncoderNorms":
        return cls(*(Tensor(np.full(d, v), requires_grad=True) for v in (1.0, 0.0, 1.0, 0.0)))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}global.g": self.global_gain,
            f"{prefix}global.b": self.global_bias,
            f"{prefix}local.g": self.local_gain,
            f"{prefix}local.b": self.local_bias,
        }


def encode(image: np.ndarray, geom: VitGeometry, global_adapter: LoraAdapter, local_adapter: LoraAdapter,
           norms: EncoderNorms, pos_embed: Tensor, vit: VisionTransformer, ledger: MulLedger | None = None,
           train_mode: bool = False, rng: Rng | None = None) -> VisionTokens:
    if vit.geom != geom:
        raise ConfigurationError("ViT geometry differs from the encoder geometry")
    global_adapter.check(geom)
    local_adapter.check(geom)
    n = geom.tokens_per_image
    if pos_embed.shape != (geom.total_tokens, geom.d_vit):
        raise ConfigurationError(f"positional embedding {pos_embed.shape} != {(geom.total_tokens, geom.d_vit)}")

    views = split_image(image, geom)
    parts = [layer_norm(vit.forward(views.global_view, global_adapter, ledger, train_mode, rng),
                        norms.global_gain, norms.global_bias)]
    origin = [np.full(n, -1)]
    for i, tile in enumerate(views.locals):
        out = vit.forward(tile, local_adapter, ledger, train_mode, rng)
        parts.append(layer_norm(out, norms.local_gain, norms.local_bias))
        origin.append(np.full(n, i))
    tokens = add(concat(parts, axis=0), pos_embed)
    return VisionTokens(tokens, np.concatenate(origin), n)


@dataclass
class VisionEncoder:
    geom: VitGeometry
    vit: VisionTransformer
    global_adapter: LoraAdapter
    local_adapter: LoraAdapter
    norms: EncoderNorms
    pos_embed: Tensor = field(repr=False)

    @classmethod
    def create(cls, geom: VitGeometry, rng: Rng, rank: int = 8, alpha: float = 16.0,
               dropout_p: float = 0.05) -> "VisionEncoder":
        vit = VisionTransformer(geom, rng.spawn(1))
        g_ad = LoraAdapter.create(geom, rng.spawn(2), rank, alpha, dropout_p)
        l_ad = LoraAdapter.create(geom, rng.spawn(3), rank, alpha, dropout_p)
        pos = Tensor(np.zeros((geom.total_tokens, geom.d_vit)), requires_grad=True)
        return cls(geom, vit, g_ad, l_ad, EncoderNorms.create(geom.d_vit), pos)

    def encode(self, image: np.ndarray, ledger: MulLedger | None = None, train_mode: bool = False,
               rng: Rng | None = None) -> VisionTokens:
        return encode(image, self.geom, self.global_adapter, self.local_adapter, self.norms, self.pos_embed,
                      self.vit, ledger, train_mode, rng)

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.global_adapter.named_parameters("lora.global."))
        out.update(self.local_adapter.named_parameters("lora.local."))
        out.update(self.norms.named_parameters("norm."))
        out["pos_embed"] = self.pos_embed
        return out

    def frozen_parameters(self) -> dict[str, Tensor]:
        return self.vit.named_parameters("vit.")
