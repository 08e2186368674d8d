"""Fine-detail tertile analysis and global/local attention aggregation.

Samples are ranked by the relative area of the region most related to their
answers, split into thirds, and per-third accuracies of a low- and a
high-resolution model are compared.  Cross-attention maps recorded during
generation are reduced to the mean attention mass on global-view tokens.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, InputError

TERTILES = ("bottom", "middle", "top")

# string similarity


def _longest_match(a: str, b: str, alo: int, ahi: int, blo: int, bhi: int) -> tuple[int, int, int]:
    """Longest common block in a[alo:ahi], b[blo:bhi]; earliest in ``a``, then in ``b``."""
    best_i, best_j, best_k = alo, blo, 0
    prev = [0] * (bhi - blo + 1)
    for i in range(alo, ahi):
        cur = [0] * (bhi - blo + 1)
        ai = a[i]
        for j in range(blo, bhi):
            if ai == b[j]:
                k = prev[j - blo] + 1
                cur[j - blo + 1] = k
                start_i, start_j = i - k + 1, j - k + 1
                if k > best_k or (k == best_k and (start_i, start_j) < (best_i, best_j)):
                    best_i, best_j, best_k = start_i, start_j, k
        prev = cur
    return best_i, best_j, best_k


def matching_characters(a: str, b: str) -> int:
    """Characters matched by the Ratcliff/Obershelp recursion."""
    total = 0
    stack = [(0, len(a), 0, len(b))]
    while stack:
        alo, ahi, blo, bhi = stack.pop()
        i, j, k = _longest_match(a, b, alo, ahi, blo, bhi)
        if k == 0:
            continue
        total += k
        stack.append((alo, i, blo, j))
        stack.append((i + k, ahi, j + k, bhi))
    return total


def string_similarity(a: str, b: str) -> float:
    """Gestalt ratio 2M / (|a| + |b|) on case-folded strings; two empty strings score 1."""
    a, b = a.casefold(), b.casefold()
    if not a and not b:
        return 1.0
    return 2.0 * matching_characters(a, b) / (len(a) + len(b))


# samples


@dataclass(frozen=True)
class Region:
    label: str
    area: float


@dataclass
class AnnotatedSample:
    id: str
    image_area: float
    regions: list[Region]
    answers: list[str]
    question: str = ""
    correct: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.regions:
            raise InputError(f"sample {self.id}: at least one region required")
        if not self.answers:
            raise InputError(f"sample {self.id}: at least one answer required")
        if self.image_area <= 0:
            raise InputError(f"sample {self.id}: image area must be positive")
        for r in self.regions:
            if not 0 < r.area <= self.image_area:
                raise InputError(f"sample {self.id}: region {r.label!r} area {r.area} outside (0, image_area]")

    @classmethod
    def from_dict(cls, d: Mapping) -> "AnnotatedSample":
        regions = [Region(str(r["label"]), r["area"]) for r in d["regions"]]
        correct = {str(k): float(v) for k, v in d.get("correct", {}).items()}
        return cls(str(d["id"]), d["image_area"], regions, [str(a) for a in d["answers"]],
                   str(d.get("question", "")), correct)


def load_samples(lines: Iterable[str]) -> list[AnnotatedSample]:
    out = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(AnnotatedSample.from_dict(json.loads(line)))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise InputError(f"line {n}: malformed sample ({exc})") from exc
    return out


_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)$")


def is_closed_answer_set(answers: Sequence[str]) -> bool:
    """True when every answer is yes/no, or every answer is numeric."""
    norm = [a.strip().casefold() for a in answers]
    return all(a in ("yes", "no") for a in norm) or all(_NUMBER.match(a) for a in norm)


def select_region(sample: AnnotatedSample) -> Region:
    """Region whose label best matches the answers (the question, for yes/no or numeric answers)."""
    refs = [sample.question] if is_closed_answer_set(sample.answers) else sample.answers
    best, best_key = None, None
    for pos, region in enumerate(sample.regions):
        score = math.fsum(string_similarity(region.label, r) for r in refs) / len(refs)
        key = (score, region.area, -pos)
        if best_key is None or key > best_key:
            best, best_key = region, key
    return best


def relative_area(region_area, image_area) -> Fraction:
    if image_area <= 0:
        raise InputError("image area must be positive")
    if region_area <= 0:
        raise InputError("region area must be positive")
    s = Fraction(region_area) / Fraction(image_area)
    if s > 1:
        raise InputError("region larger than the image")
    return s


@dataclass
class TertilePartition:
    bottom: list[str]
    middle: list[str]
    top: list[str]
    boundaries: tuple[Fraction, Fraction]

    def groups(self) -> dict[str, list[str]]:
        return {"bottom": self.bottom, "middle": self.middle, "top": self.top}

    def tertile_of(self) -> dict[str, str]:
        return {sid: name for name, ids in self.groups().items() for sid in ids}


def tertile_partition(items: Sequence[tuple[str, Fraction | float]]) -> TertilePartition:
    """Stable ascending sort by S, split at ceil(n/3) and ceil(2n/3)."""
    n = len(items)
    if n < 3:
        raise InputError("tertile partition needs at least 3 samples")
    ordered = sorted(items, key=lambda it: it[1])
    a, b = -(-n // 3), -(-2 * n // 3)
    ids = [sid for sid, _ in ordered]
    return TertilePartition(ids[:a], ids[a:b], ids[b:], (ordered[a - 1][1], ordered[b - 1][1]))


def partition_samples(samples: Sequence[AnnotatedSample]) -> TertilePartition:
    return tertile_partition([(s.id, relative_area(select_region(s).area, s.image_area)) for s in samples])


def _exact(x) -> Fraction:
    return Fraction(Decimal(str(x))) if isinstance(x, float) else Fraction(x)


def relative_change(acc_low, acc_high) -> Fraction | None:
    """100 (high - low) / low as an exact rational; ``None`` when low is zero."""
    low, high = _exact(acc_low), _exact(acc_high)
    for v in (low, high):
        if not 0 <= v <= 100:
            raise InputError(f"accuracy {float(v)} outside [0, 100]")
    if low == 0:
        return None
    return 100 * (high - low) / low


def format_delta(x: Fraction | None, places: int = 2) -> str:
    if x is None:
        return "undefined"
    scale = 10**places
    mag = abs(x) * scale
    q, r = divmod(mag.numerator, mag.denominator)
    if 2 * r >= mag.denominator:
        q += 1
    sign = "-" if x < 0 and q else "+"
    return f"{sign}{q // scale}.{q % scale:0{places}d}"


def tertile_accuracy_delta(low: Sequence, high: Sequence) -> list[str]:
    """Per-tertile %change from the low- to the high-resolution accuracies."""
    if len(low) != len(high):
        raise InputError("accuracy rows differ in length")
    return [format_delta(relative_change(lo, hi)) for lo, hi in zip(low, high)]


def tertile_accuracies(samples: Sequence[AnnotatedSample], partition: TertilePartition, model: str) -> list[float]:
    by_id = {s.id: s for s in samples}
    out = []
    for ids in (partition.bottom, partition.middle, partition.top):
        try:
            vals = [by_id[i].correct[model] for i in ids]
        except KeyError as exc:
            raise InputError(f"missing correctness flag for model {model!r}") from exc
        out.append(100.0 * math.fsum(vals) / len(vals))
    return out


def tertile_table(samples: Sequence[AnnotatedSample], low_model: str, high_model: str) -> list[list[str]]:
    partition = partition_samples(samples)
    # deltas use the unrounded accuracies
    low = tertile_accuracies(samples, partition, low_model)
    high = tertile_accuracies(samples, partition, high_model)
    return [
        ["model", *TERTILES],
        [low_model, *(f"{v:.2f}" for v in low)],
        [high_model, *(f"{v:.2f}" for v in high)],
        ["%delta", *tertile_accuracy_delta(low, high)],
        ["n", str(len(partition.bottom)), str(len(partition.middle)), str(len(partition.top))],
    ]


def rows_to_csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


# attention aggregation


@dataclass
class AttentionRecord:
    """Cross-attention maps of one generated output: per block, (steps, heads, tokens)."""

    sample_id: str
    cross_attention_maps: list[np.ndarray]
    block_layers: tuple[int, ...] = ()
    global_count: int | None = None
    local_count: int | None = None
    tertile: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttentionRecord":
        maps = [np.asarray(m, dtype=np.float64) for m in d["maps"]]
        for m in maps:
            if m.ndim != 3:
                raise InputError("each layer's maps must be steps x heads x tokens")
        layers = tuple(int(x) for x in d.get("layers", range(len(maps))))
        return cls(str(d.get("sample_id", "")), maps, layers, d.get("global_count"), d.get("local_count"),
                   d.get("tertile"))

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "global_count": self.global_count,
            "local_count": self.local_count,
            "layers": list(self.block_layers),
            "maps": [m.tolist() for m in self.cross_attention_maps],
            **({"tertile": self.tertile} if self.tertile else {}),
        }


def load_attention_records(lines: Iterable[str]) -> list[AttentionRecord]:
    out = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(AttentionRecord.from_dict(json.loads(line)))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise InputError(f"line {n}: malformed attention record ({exc})") from exc
    return out


@dataclass
class AttentionSummary:
    layers: tuple[int, ...]
    global_mass: list[float]
    per_tertile: dict[str, list[float]] = field(default_factory=dict)

    @property
    def local_mass(self) -> list[float]:
        return [1.0 - g for g in self.global_mass]

    def rows(self) -> list[list[str]]:
        groups = [t for t in TERTILES if t in self.per_tertile]
        header = ["layer", "global", "local"] + [f"global_{t}" for t in groups]
        out = [header]
        for i, layer in enumerate(self.layers):
            row = [str(layer), f"{self.global_mass[i]:.6f}", f"{self.local_mass[i]:.6f}"]
            row += [f"{self.per_tertile[t][i]:.6f}" for t in groups]
            out.append(row)
        return out


def _global_masses(outputs: Sequence, n_global: int, total: int, layer: int) -> list[float]:
    vals: list[float] = []
    for out in outputs:
        m = np.asarray(out.cross_attention_maps[layer])
        if m.shape[-1] != total:
            raise ContractError(f"attention map over {m.shape[-1]} tokens, expected {total}")
        vals.extend(m[..., :n_global].sum(axis=-1).ravel().tolist())
    return vals


def attention_aggregate(outputs: Sequence, counts: tuple[int, int],
                        groups: Mapping[str, Sequence[int]] | None = None) -> AttentionSummary:
    """Mean global-token attention mass per cross-attention layer.

    Every (sample, step, head) row carries equal weight.  Global tokens are
    the first ``counts[0]`` of each map.  ``groups`` maps a tertile name to
    indices into ``outputs`` for the per-tertile breakdown.
    """
    if not outputs:
        raise InputError("no attention records")
    n_global, n_local = counts
    total = n_global + n_local
    n_layers = len(outputs[0].cross_attention_maps)
    if any(len(o.cross_attention_maps) != n_layers for o in outputs):
        raise ContractError("records disagree on the number of cross-attention layers")
    layers = tuple(getattr(outputs[0], "block_layers", ()) or range(n_layers))

    def mean_mass(subset) -> list[float]:
        res = []
        for layer in range(n_layers):
            vals = _global_masses(subset, n_global, total, layer)
            res.append(math.fsum(vals) / len(vals))
        return res

    per_tertile = {}
    for name, idx in (groups or {}).items():
        if idx:
            per_tertile[name] = mean_mass([outputs[i] for i in idx])
    return AttentionSummary(layers, mean_mass(outputs), per_tertile)
