"""File formats: flat key=value model config, versioned binary weights, images."""

from __future__ import annotations

import configparser
import io
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import BinaryIO

import numpy as np
from PIL import Image, UnidentifiedImageError

from .decoder import DecoderGeometry, Model, build_model
from .errors import ConfigurationError, InputError
from .vision import VitGeometry

_SECTION = "model"


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a toy model deterministically.

    On disk this is one ``key = value`` per line; ``#`` starts a comment and
    omitted keys take the defaults below.
    """

    seed: int = 0
    base_resolution: int = 28
    patch_size: int = 14
    d_vit: int = 16
    vit_layers: int = 1
    vit_heads: int = 2
    target_resolution: int = 56
    d: int = 16
    layers: int = 2
    heads: int = 2
    vocab_size: int = 32
    interval: int = 1
    max_text_len: int = 8
    out_std: float = 1e-6
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05

    def __post_init__(self):
        self.vit_geometry()
        self.decoder_geometry()
        if self.out_std < 0:
            raise ConfigurationError("out_std must be non-negative")

    def vit_geometry(self) -> VitGeometry:
        return VitGeometry(self.base_resolution, self.patch_size, self.d_vit, self.vit_layers, self.vit_heads,
                           self.target_resolution)

    def decoder_geometry(self) -> DecoderGeometry:
        return DecoderGeometry(self.d, self.layers, self.heads, self.vocab_size, self.interval, self.max_text_len)

    def build(self) -> Model:
        return build_model(self.decoder_geometry(), self.vit_geometry(), self.seed, self.out_std,
                           self.lora_rank, self.lora_alpha, self.lora_dropout)

    def dumps(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in asdict(self).items())


def parse_config(text: str) -> ModelConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    types = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for key, raw in parser[_SECTION].items():
        if key not in types:
            raise ConfigurationError(f"unknown config key {key!r}")
        cast = float if types[key] in (float, "float") else int
        try:
            values[key] = cast(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{key}: cannot parse {raw!r}") from exc
    return ModelConfig(**values)


def load_config(path: str | Path) -> ModelConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# weights: magic, u32 version, u32 count, then per array
#   u16 name length, utf-8 name, u8 ndim, ndim x u64 dims, float64 little-endian data

WEIGHTS_MAGIC = b"HRVW"
WEIGHTS_VERSION = 1


def write_weights(f: BinaryIO, arrays: dict[str, np.ndarray]) -> None:
    f.write(WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(arrays)))
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8")
        key = name.encode()
        f.write(struct.pack("<H", len(key)) + key)
        f.write(struct.pack(f"<B{a.ndim}Q", a.ndim, *a.shape))
        f.write(np.ascontiguousarray(a).tobytes())


def _read(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise InputError("truncated weights file")
    return b


def read_weights(f: BinaryIO) -> dict[str, np.ndarray]:
    if _read(f, 4) != WEIGHTS_MAGIC:
        raise InputError("not a weights file")
    version, count = struct.unpack("<II", _read(f, 8))
    if version != WEIGHTS_VERSION:
        raise InputError(f"unsupported weights version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read(f, 2))
        name = _read(f, n).decode()
        (ndim,) = struct.unpack("<B", _read(f, 1))
        shape = struct.unpack(f"<{ndim}Q", _read(f, 8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(_read(f, 8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if f.read(1):
        raise InputError("trailing bytes after weights")
    return out


def save_weights(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        write_weights(f, arrays)


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return read_weights(f)


def dumps_weights(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_weights(buf, arrays)
    return buf.getvalue()


def decode_image(data: bytes) -> np.ndarray:
    """PPM/PNG (or anything Pillow reads) to an (H, W, 3) float64 array in [0, 1]."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise InputError(f"cannot decode image: {exc}") from exc
    return rgb / 255.0


def load_image(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return decode_image(data)
