"""Frozen causal decoder conditioned through dense cross-attention blocks.

A trainable block (cross-attention followed by a feed-forward, both residual)
sits before decoder layers ``0, I, 2I, ...``.  Its output projections start
from a near-zero normal, so at initialisation the decoder behaves like the
frozen language model alone.  ``llava_forward`` runs the concatenation
baseline through the same frozen stack for cost comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .tensor import (
    MulLedger,
    Rng,
    Tensor,
    add,
    concat,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
)
from .vision import VisionEncoder, VisionTokens, VitGeometry, multi_head_attention

# Activation of the cross block's feed-forward; the frozen decoder uses the same one.
CROSS_FF_ACTIVATION = gelu
DEFAULT_OUT_STD = 1e-6


@dataclass(frozen=True)
class DecoderGeometry:
    d: int = 16
    layers: int = 4
    heads: int = 2
    vocab_size: int = 32
    interval: int = 2
    max_text_len: int = 16

    def __post_init__(self):
        for name in ("d", "layers", "heads", "vocab_size", "max_text_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.interval < 1:
            raise ConfigurationError("cross-attention interval must be at least 1")
        if self.interval > self.layers:
            raise ConfigurationError(f"interval {self.interval} exceeds layer count {self.layers}")
        if self.d % self.heads:
            raise ConfigurationError("d must be divisible by heads")

    @property
    def cross_layer_indices(self) -> tuple[int, ...]:
        return tuple(range(0, self.layers, self.interval))

    @property
    def num_cross_blocks(self) -> int:
        return math.ceil(self.layers / self.interval)


def _linear(x: Tensor, p: dict[str, Tensor], name: str, category: str, ledger) -> Tensor:
    return add(matmul(x, p[f"{name}.w"], category, ledger), p[f"{name}.b"])


class DenseCrossAttentionBlock:
    """Text queries attend to vision keys/values, then a 4x-wide feed-forward.

    Keys and values are projected straight from the vision width ``d_vit``.
    ``o`` and ``fc2`` are drawn from N(0, out_std**2); ``out_std=0`` gives
    exact zeros.
    """

    def __init__(self, d: int, d_vit: int, heads: int, rng: Rng, out_std: float = DEFAULT_OUT_STD):
        self.d, self.d_vit, self.heads = d, d_vit, heads

        def w(shape, std):
            return Tensor(rng.normal(shape, std=std) if std > 0 else np.zeros(shape), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "ln_attn.g": Tensor(np.ones(d), requires_grad=True),
            "ln_attn.b": zeros(d),
            "q.w": w((d, d), 1 / math.sqrt(d)), "q.b": zeros(d),
            "k.w": w((d_vit, d), 1 / math.sqrt(d_vit)), "k.b": zeros(d),
            "v.w": w((d_vit, d), 1 / math.sqrt(d_vit)), "v.b": zeros(d),
            "o.w": w((d, d), out_std), "o.b": zeros(d),
            "ln_ff.g": Tensor(np.ones(d), requires_grad=True),
            "ln_ff.b": zeros(d),
            "fc1.w": w((d, 4 * d), 1 / math.sqrt(d)), "fc1.b": zeros(4 * d),
            "fc2.w": w((4 * d, d), out_std), "fc2.b": zeros(d),
        }

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self.params.items()}


def cross_attend(block: DenseCrossAttentionBlock, hidden: Tensor, vision: Tensor,
                 ledger: MulLedger | None = None, probs_out: list | None = None) -> Tensor:
    """Unmasked cross-attention from ``hidden`` (N_T, D) to ``vision`` (N_I, D_ViT).

    ``probs_out``, when given, receives one (N_T, N_I) probability array per head.
    """
    if vision.shape[0] == 0:
        raise InputError("cross-attention needs at least one vision token")
    if hidden.shape[1] != block.d or vision.shape[1] != block.d_vit:
        raise InputError(f"cross block expects widths {block.d}/{block.d_vit}, got {hidden.shape}/{vision.shape}")
    p = block.params
    a = layer_norm(hidden, p["ln_attn.g"], p["ln_attn.b"])
    q = _linear(a, p, "q", "projection", ledger)
    k = _linear(vision, p, "k", "projection", ledger)
    v = _linear(vision, p, "v", "projection", ledger)
    att = multi_head_attention(q, k, v, block.heads, ledger, probs_out=probs_out)
    h = add(hidden, _linear(att, p, "o", "projection", ledger))
    m = layer_norm(h, p["ln_ff.g"], p["ln_ff.b"])
    m = CROSS_FF_ACTIVATION(_linear(m, p, "fc1", "feedforward", ledger))
    return add(h, _linear(m, p, "fc2", "feedforward", ledger))


class FrozenDecoder:
    """Seeded stand-in for a pre-trained causal language model."""

    def __init__(self, geom: DecoderGeometry, rng: Rng):
        self.geom = geom
        d, V = geom.d, geom.vocab_size
        p: dict[str, Tensor] = {
            "tok_emb": Tensor(rng.normal((V, d), std=1.0)),
            "pos_emb": Tensor(rng.normal((geom.max_text_len, d), std=0.1)),
            "ln_f.g": Tensor(np.ones(d)),
            "ln_f.b": Tensor(np.zeros(d)),
            "unembed": Tensor(rng.normal((d, V), std=1 / math.sqrt(d))),
        }
        for i in range(geom.layers):
            pre = f"layers.{i}"
            for name, (d_in, d_out) in {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
                                        "fc1": (d, 4 * d), "fc2": (4 * d, d)}.items():
                p[f"{pre}.{name}.w"] = Tensor(rng.normal((d_in, d_out), std=1 / math.sqrt(d_in)))
                p[f"{pre}.{name}.b"] = Tensor(rng.normal((d_out,), std=0.02))
            for ln in ("ln1", "ln2"):
                p[f"{pre}.{ln}.g"] = Tensor(np.ones(d))
                p[f"{pre}.{ln}.b"] = Tensor(np.zeros(d))
        self.params = p

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self.params.items()}

    def embed(self, ids: np.ndarray) -> Tensor:
        return add(gather_rows(self.params["tok_emb"], ids), self.params["pos_emb"][: len(ids)])

    def layer(self, h: Tensor, i: int, ledger: MulLedger | None) -> Tensor:
        p = self.params
        pre = f"layers.{i}"
        n = h.shape[0]
        a = layer_norm(h, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        q = _linear(a, p, f"{pre}.q", "projection", ledger)
        k = _linear(a, p, f"{pre}.k", "projection", ledger)
        v = _linear(a, p, f"{pre}.v", "projection", ledger)
        att = multi_head_attention(q, k, v, self.geom.heads, ledger, mask=np.tril(np.ones((n, n), dtype=bool)))
        h = add(h, _linear(att, p, f"{pre}.o", "projection", ledger))
        m = layer_norm(h, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        m = gelu(_linear(m, p, f"{pre}.fc1", "feedforward", ledger))
        return add(h, _linear(m, p, f"{pre}.fc2", "feedforward", ledger))

    def head(self, h: Tensor, ledger: MulLedger | None) -> Tensor:
        h = layer_norm(h, self.params["ln_f.g"], self.params["ln_f.b"])
        return matmul(h, self.params["unembed"], "other", ledger)


@dataclass
class Model:
    dg: DecoderGeometry
    vg: VitGeometry
    decoder: FrozenDecoder
    encoder: VisionEncoder
    cross_blocks: dict[int, DenseCrossAttentionBlock] = field(default_factory=dict)
    seed: int = 0

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = self.encoder.trainable_parameters()
        out = {f"encoder.{k}": v for k, v in out.items()}
        for i, block in self.cross_blocks.items():
            out.update(block.named_parameters(f"cross.{i}."))
        return out

    def frozen_parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.frozen_parameters().items()}
        out.update(self.decoder.named_parameters("decoder."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in {**self.frozen_parameters(), **self.trainable_parameters()}.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {**self.frozen_parameters(), **self.trainable_parameters()}
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ConfigurationError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for k, t in params.items():
            t.data = state[k]

    def frozen_checksums(self) -> dict[str, str]:
        return {k: v.checksum() for k, v in self.frozen_parameters().items()}

    def encode(self, image: np.ndarray, ledger: MulLedger | None = None, train_mode: bool = False,
               rng: Rng | None = None) -> VisionTokens:
        return self.encoder.encode(image, ledger, train_mode, rng)


def build_model(dg: DecoderGeometry, vg: VitGeometry, seed: int = 0, out_std: float = DEFAULT_OUT_STD,
                lora_rank: int = 8, lora_alpha: float = 16.0, lora_dropout: float = 0.05) -> Model:
    if dg.interval > dg.layers:
        raise ConfigurationError("at least one cross-attention block is required")
    rng = Rng(seed)
    decoder = FrozenDecoder(dg, rng.spawn(10))
    encoder = VisionEncoder.create(vg, rng.spawn(20), lora_rank, lora_alpha, lora_dropout)
    blocks = {
        i: DenseCrossAttentionBlock(dg.d, vg.d_vit, dg.heads, rng.spawn(100 + i), out_std)
        for i in dg.cross_layer_indices
    }
    return Model(dg, vg, decoder, encoder, blocks, seed)


def _check_ids(model: Model, ids: Sequence[int], limit: int | None = None) -> np.ndarray:
    arr = np.asarray(ids)
    if arr.ndim != 1 or len(arr) == 0:
        raise InputError("text ids must be a non-empty sequence")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InputError("text ids must be integers")
    if arr.min() < 0 or arr.max() >= model.dg.vocab_size:
        raise InputError(f"token id outside vocabulary [0, {model.dg.vocab_size})")
    limit = model.dg.max_text_len if limit is None else limit
    if len(arr) > limit:
        raise InputError(f"text length {len(arr)} exceeds {limit}")
    return arr.astype(np.int64)


def _vision_tensor(vision) -> Tensor | None:
    if vision is None:
        return None
    return vision.tokens if isinstance(vision, VisionTokens) else vision


def forward(model: Model, text_ids: Sequence[int], vision: VisionTokens | Tensor | None,
            ledger: MulLedger | None = None, attention_maps: dict[int, list] | None = None) -> Tensor:
    """Logits (N_T, vocab).  ``vision=None`` runs the frozen decoder alone."""
    ids = _check_ids(model, text_ids)
    v = _vision_tensor(vision)
    dec = model.decoder
    h = dec.embed(ids)
    for i in range(model.dg.layers):
        if v is not None and i in model.cross_blocks:
            sink = None
            if attention_maps is not None:
                sink = attention_maps.setdefault(i, [])
            h = cross_attend(model.cross_blocks[i], h, v, ledger, sink)
        h = dec.layer(h, i, ledger)
    return dec.head(h, ledger)


def project_vision(tokens: Tensor, weight: Tensor, ledger: MulLedger | None = None) -> Tensor:
    """Linear map of vision tokens to the decoder width (LLaVA-style connector)."""
    return matmul(tokens, weight, "other", ledger)


def llava_forward(model: Model, text_ids: Sequence[int], vision_projected: Tensor | None,
                  ledger: MulLedger | None = None) -> Tensor:
    """Concatenation baseline: vision tokens prefix the text through the plain decoder.

    Text positions get the decoder's positional embeddings; vision tokens are
    used as given.  Returns logits for the text positions.
    """
    ids = _check_ids(model, text_ids)
    dec = model.decoder
    h = dec.embed(ids)
    n_i = 0 if vision_projected is None else vision_projected.shape[0]
    if n_i:
        if vision_projected.shape[1] != model.dg.d:
            raise InputError(f"projected vision width {vision_projected.shape[1]} != {model.dg.d}")
        h = concat([vision_projected, h], axis=0)
    for i in range(model.dg.layers):
        h = dec.layer(h, i, ledger)
    if n_i:
        h = h[n_i:]
    return dec.head(h, ledger)


@dataclass
class GenerationOutput:
    token_ids: list[int]
    logits: Tensor
    cross_attention_maps: list[np.ndarray]  # per block: (steps, heads, N_I)
    block_layers: tuple[int, ...] = ()


def generate(model: Model, prompt_ids: Sequence[int], vision: VisionTokens | Tensor, max_new: int,
             decoding: str = "greedy", ledger: MulLedger | None = None) -> GenerationOutput:
    if decoding != "greedy":
        raise ConfigurationError(f"unsupported decoding {decoding!r}")
    if max_new < 1:
        raise InputError("max_new must be at least 1")
    ids = list(_check_ids(model, prompt_ids, model.dg.max_text_len - max_new + 1))
    v = _vision_tensor(vision)
    blocks = tuple(sorted(model.cross_blocks))
    step_logits, new = [], []
    maps: dict[int, list[np.ndarray]] = {i: [] for i in blocks}
    for _ in range(max_new):
        sink: dict[int, list] = {}
        logits = forward(model, ids, v, ledger, sink)
        last = logits.data[-1]
        step_logits.append(last)
        for i in blocks:
            maps[i].append(np.stack([head[-1] for head in sink[i]]))
        tok = int(np.argmax(last))
        new.append(tok)
        ids.append(tok)
    return GenerationOutput(
        token_ids=new,
        logits=Tensor(np.stack(step_logits)),
        cross_attention_maps=[np.stack(maps[i]) for i in blocks],
        block_layers=blocks,
    )
