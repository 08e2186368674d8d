"""Exact multiplication counts for the encoder and decoder variants.

Per-layer counts follow the ``(n x o) x d`` rule for an ``(n, d) @ (d, o)``
product and cover QKVO projections, one attention term and a 4x-wide
feed-forward.  Everything is integer or :class:`fractions.Fraction`
arithmetic; floats never enter the totals or the ratios.

The second half of the module runs the toy models with a
:class:`~hiresvlm.tensor.MulLedger` attached and reconciles the tallies with
the formulas.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, ContractError, InputError
from .tensor import MulLedger, Rng, Tensor

SCHEMA = "hiresvlm.cost_report/1"
STANDARD_CATEGORIES = ("projection", "attention_scores", "feedforward")
FULL_CATEGORIES = ("projection", "attention_scores", "attention_values", "feedforward")


def _positive(**kwargs) -> None:
    for name, v in kwargs.items():
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise InputError(f"{name} must be a positive integer, got {v!r}")


def _non_negative(**kwargs) -> None:
    for name, v in kwargs.items():
        if not isinstance(v, (int, np.integer)) or v < 0:
            raise InputError(f"{name} must be a non-negative integer, got {v!r}")


# per-layer breakdowns: projection, attention (score term only), feedforward


def vit_breakdown(n: int, d: int) -> dict[str, int]:
    _positive(n=n, d=d)
    return {"projection": 4 * n * d * d, "attention": d * n * n, "feedforward": 8 * n * d * d}


def vit_cost(n: int, d: int) -> int:
    """One ViT layer over ``n`` tokens of width ``d``: 12 n d^2 + d n^2."""
    return sum(vit_breakdown(n, d).values())


def pheye_vit_breakdown(n_prime: int, d: int, p: int) -> dict[str, int]:
    _positive(p=p)
    return {k: v * p for k, v in vit_breakdown(n_prime, d).items()}


def pheye_vit_cost(n_prime: int, d: int, p: int) -> int:
    """One layer applied independently to ``p`` sub-images of ``n_prime`` tokens."""
    return sum(pheye_vit_breakdown(n_prime, d, p).values())


def llava_lm_breakdown(n_t: int, n_i: int, d: int) -> dict[str, int]:
    _positive(n_t=n_t, d=d)
    _non_negative(n_i=n_i)
    s = n_t + n_i
    return {"projection": 4 * s * d * d, "attention": d * s * s, "feedforward": 8 * s * d * d}


def llava_lm_cost(n_t: int, n_i: int, d: int) -> int:
    """Decoder layer over the concatenated vision + text sequence."""
    return sum(llava_lm_breakdown(n_t, n_i, d).values())


def pheye_lm_breakdown(n_t: int, n_i: int, d: int, d_vit: int, interval: int) -> dict[str, Fraction]:
    if interval == 0:
        raise ConfigurationError("cross-attention interval must be positive")
    _positive(n_t=n_t, d=d, d_vit=d_vit, interval=interval)
    _non_negative(n_i=n_i)
    I = Fraction(interval)
    return {
        "projection": 4 * n_t * d * d + (2 * n_i * d_vit * d + 2 * n_t * d * d) / I,
        "attention": d * n_t * n_t + Fraction(d * n_t * n_i) / I,
        "feedforward": 8 * n_t * d * d + Fraction(8 * n_t * d * d) / I,
    }


def pheye_lm_cost(n_t: int, n_i: int, d: int, d_vit: int, interval: int) -> Fraction:
    """Average per-layer cost with a cross-attention block every ``interval`` layers."""
    return sum(pheye_lm_breakdown(n_t, n_i, d, d_vit, interval).values(), Fraction(0))


def render_fraction(x: Fraction, places: int) -> str:
    """Half-up decimal rendering of a non-negative rational."""
    x = Fraction(x)
    if x < 0:
        raise ValueError("only non-negative values are rendered")
    scale = 10**places
    q, r = divmod(x.numerator * scale, x.denominator)
    if 2 * r >= x.denominator:
        q += 1
    whole, frac = divmod(q, scale)
    return f"{whole}.{frac:0{places}d}" if places else str(whole)


def efficiency_ratio(baseline: int | Fraction, method: int | Fraction, places: int = 2) -> str:
    if method == 0:
        raise ZeroDivisionError("method cost is zero")
    if method < 0 or baseline < 0:
        raise InputError("costs are non-negative")
    return render_fraction(Fraction(baseline) / Fraction(method), places)


def exact_str(x: int | Fraction) -> str:
    return str(Fraction(x))


# reports


@dataclass(frozen=True)
class CostInputs:
    n_t: int
    n_i: int
    d: int
    d_vit: int
    interval: int
    n: int | None = None
    n_prime: int | None = None
    p: int | None = None

    def __post_init__(self):
        _positive(n_t=self.n_t, d=self.d, d_vit=self.d_vit)
        _non_negative(n_i=self.n_i)
        if self.interval < 1:
            raise ConfigurationError("cross-attention interval must be positive")
        for name in ("n", "n_prime", "p"):
            v = getattr(self, name)
            if v is not None:
                _positive(**{name: v})
        if self.n is not None and self.n_prime is not None and self.p is not None and self.p > 1:
            if Fraction(self.n - 1, self.p - 1) + 1 != self.n_prime:
                raise InputError(f"N'={self.n_prime} inconsistent with N={self.n}, P={self.p}")

    @classmethod
    def derive(cls, n_t: int, n_i: int, d: int, d_vit: int, interval: int, p: int = 10,
               n_prime: int | None = None) -> "CostInputs":
        """Vision side defaults: N = N_I, and N' from N = (N' - 1)(P - 1) + 1."""
        n = n_i
        if n_prime is None:
            if p < 2 or (n - 1) % (p - 1):
                raise InputError(f"N'={n}-1 over P-1={p - 1} is not an integer; pass n_prime explicitly")
            n_prime = (n - 1) // (p - 1) + 1
        return cls(n_t, n_i, d, d_vit, interval, n, n_prime, p)


@dataclass
class CostReport:
    inputs: CostInputs
    totals: dict[str, Fraction]
    breakdowns: dict[str, dict[str, Fraction]]
    ratios: dict[str, Fraction] = field(default_factory=dict)

    def ratio_str(self, name: str, places: int = 2) -> str:
        return render_fraction(self.ratios[name], places)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "inputs": asdict(self.inputs),
            "formulas": {
                name: {
                    "total": exact_str(total),
                    "breakdown": {k: exact_str(v) for k, v in self.breakdowns[name].items()},
                }
                for name, total in self.totals.items()
            },
            "ratios": {
                name: {
                    "ratio": render_fraction(r, 2),
                    "ratio_4dp": render_fraction(r, 4),
                    "exact": exact_str(r),
                }
                for name, r in self.ratios.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "name", "component", "value"])
        for name, total in self.totals.items():
            for k, v in self.breakdowns[name].items():
                w.writerow(["formula", name, k, exact_str(v)])
            w.writerow(["formula", name, "total", exact_str(total)])
        for name, r in self.ratios.items():
            w.writerow(["ratio", name, "ratio", render_fraction(r, 2)])
            w.writerow(["ratio", name, "ratio_4dp", render_fraction(r, 4)])
            w.writerow(["ratio", name, "exact", exact_str(r)])
        return buf.getvalue()


def cost_report(inputs: CostInputs) -> CostReport:
    c = inputs
    breakdowns: dict[str, dict[str, Fraction]] = {}
    if c.n is not None and c.n_prime is not None and c.p is not None:
        breakdowns["vit_baseline"] = {k: Fraction(v) for k, v in vit_breakdown(c.n, c.d_vit).items()}
        breakdowns["vit_multipatch"] = {k: Fraction(v) for k, v in pheye_vit_breakdown(c.n_prime, c.d_vit, c.p).items()}
    breakdowns["lm_concat"] = {k: Fraction(v) for k, v in llava_lm_breakdown(c.n_t, c.n_i, c.d).items()}
    breakdowns["lm_cross"] = pheye_lm_breakdown(c.n_t, c.n_i, c.d, c.d_vit, c.interval)
    totals = {k: sum(v.values(), Fraction(0)) for k, v in breakdowns.items()}
    ratios = {}
    if "vit_baseline" in totals:
        ratios["vision"] = totals["vit_baseline"] / totals["vit_multipatch"]
    ratios["language"] = totals["lm_concat"] / totals["lm_cross"]
    return CostReport(c, totals, breakdowns, ratios)


# instrumented reconciliation

SCOPES = ("vit_baseline", "vit_multipatch", "lm_concat", "lm_cross")
_CATEGORY_OF = {"projection": "projection", "attention": "attention_scores", "feedforward": "feedforward"}


@dataclass
class InstrumentedRun:
    """Ledger of one toy execution, tagged with the geometry it ran under."""

    scope: str
    inputs: CostInputs
    layers: int
    ledger: MulLedger


@dataclass
class ReconciliationRow:
    category: str
    analytic: Fraction
    counted: int

    @property
    def delta(self) -> Fraction:
        return self.counted - self.analytic


@dataclass
class Reconciliation:
    scope: str
    accounting: str
    rows: list[ReconciliationRow]
    excluded: dict[str, int]

    @property
    def analytic_total(self) -> Fraction:
        return sum((r.analytic for r in self.rows), Fraction(0))

    @property
    def counted_total(self) -> int:
        return sum(r.counted for r in self.rows)

    @property
    def delta(self) -> Fraction:
        return self.counted_total - self.analytic_total

    @property
    def ok(self) -> bool:
        return all(r.delta == 0 for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "accounting": self.accounting,
            "rows": [
                {"category": r.category, "analytic": exact_str(r.analytic), "counted": r.counted,
                 "delta": exact_str(r.delta)}
                for r in self.rows
            ],
            "analytic_total": exact_str(self.analytic_total),
            "counted_total": self.counted_total,
            "delta": exact_str(self.delta),
            "excluded": self.excluded,
        }


_SCOPE_FIELDS = {
    "vit_baseline": ("n", "d_vit"),
    "vit_multipatch": ("n_prime", "p", "d_vit"),
    "lm_concat": ("n_t", "n_i", "d"),
    "lm_cross": ("n_t", "n_i", "d", "d_vit", "interval"),
}


def reconcile(analytic: CostReport, run: InstrumentedRun, accounting: str = "standard") -> Reconciliation:
    """Compare ``layers`` x per-layer formula counts with an instrumented ledger.

    ``standard`` accounting counts projections, the attention score products and
    the feed-forward.  ``full`` adds the attention-value products, for which
    the analytic side mirrors the score term.  Products outside the formulas
    (patch embedding, LoRA branches, connector, unembedding; category
    ``other``) are listed under ``excluded`` in both modes.
    """
    if accounting not in ("standard", "full"):
        raise ConfigurationError(f"unknown accounting {accounting!r}")
    if run.scope not in analytic.breakdowns:
        raise ContractError(f"report has no {run.scope!r} formula")
    for name in _SCOPE_FIELDS[run.scope]:
        if getattr(analytic.inputs, name) != getattr(run.inputs, name):
            raise ContractError(
                f"geometry mismatch on {name}: report {getattr(analytic.inputs, name)} vs run {getattr(run.inputs, name)}"
            )
    per_layer = analytic.breakdowns[run.scope]
    expected = {_CATEGORY_OF[k]: v * run.layers for k, v in per_layer.items()}
    cats = STANDARD_CATEGORIES if accounting == "standard" else FULL_CATEGORIES
    if accounting == "full":
        expected["attention_values"] = expected["attention_scores"]
    rows = [ReconciliationRow(c, expected[c], run.ledger[c]) for c in cats]
    excluded = {c: run.ledger[c] for c in ("attention_values", "other") if c not in cats}
    return Reconciliation(run.scope, accounting, rows, excluded)


# toy sweep


@dataclass(frozen=True)
class ToyGeometry:
    base_resolution: int
    patch_size: int
    grid: int
    d_vit: int
    d: int
    layers: int
    interval: int
    n_t: int
    vit_layers: int = 1
    heads: int = 2

    @property
    def label(self) -> str:
        n_prime = (self.base_resolution // self.patch_size) ** 2 + 1
        return f"N'={n_prime},P={self.grid**2 + 1},Dvit={self.d_vit},D={self.d},L={self.layers},I={self.interval}"


TOY_SWEEP = (
    ToyGeometry(28, 14, 2, 8, 8, 4, 2, 3),
    ToyGeometry(28, 14, 2, 16, 16, 4, 4, 5),
    ToyGeometry(42, 14, 2, 8, 16, 4, 1, 4),
    ToyGeometry(56, 14, 2, 16, 8, 6, 3, 6),
    ToyGeometry(28, 7, 3, 8, 16, 4, 2, 7),
)


def instrumented_runs(geom: ToyGeometry, seed: int = 0) -> tuple[CostInputs, list[InstrumentedRun]]:
    """Run the full-resolution ViT, the multi-patch encoder, the concatenation
    decoder and the cross-attention decoder once each, every run on its own ledger."""
    from .decoder import DecoderGeometry, build_model, forward, llava_forward
    from .vision import VisionTransformer, VitGeometry, vit_forward

    target = geom.grid * geom.base_resolution
    vg = VitGeometry(geom.base_resolution, geom.patch_size, geom.d_vit, geom.vit_layers, geom.heads, target)
    dg = DecoderGeometry(geom.d, geom.layers, geom.heads, 32, geom.interval, max(geom.n_t, 8))
    model = build_model(dg, vg, seed, out_std=0.02)
    rng = Rng(seed + 1)
    image = rng.uniform((target, target, 3))
    ids = [int(i) for i in rng.integers(0, 32, geom.n_t)]

    full = VitGeometry(target, geom.patch_size, geom.d_vit, geom.vit_layers, geom.heads, target)
    inputs = CostInputs(geom.n_t, vg.full_resolution_tokens, geom.d, geom.d_vit, geom.interval,
                        vg.full_resolution_tokens, vg.tokens_per_image, vg.num_subimages)
    cross_inputs = CostInputs(geom.n_t, vg.total_tokens, geom.d, geom.d_vit, geom.interval)

    runs = []
    led = MulLedger()
    vit_forward(VisionTransformer(full, rng.spawn(1)), image, None, led)
    runs.append(InstrumentedRun("vit_baseline", inputs, geom.vit_layers, led))

    led = MulLedger()
    tokens = model.encode(image, led)
    runs.append(InstrumentedRun("vit_multipatch", inputs, geom.vit_layers, led))

    led = MulLedger()
    projected = Tensor(rng.normal((inputs.n_i, geom.d)))
    llava_forward(model, ids, projected, led)
    runs.append(InstrumentedRun("lm_concat", inputs, geom.layers, led))

    led = MulLedger()
    forward(model, ids, tokens, led)
    runs.append(InstrumentedRun("lm_cross", cross_inputs, geom.layers, led))
    return inputs, runs


def verify_sweep(geometries: Iterable[ToyGeometry] = TOY_SWEEP,
                 accounting: str = "standard") -> list[tuple[ToyGeometry, Reconciliation]]:
    results = []
    for geom in geometries:
        inputs, runs = instrumented_runs(geom)
        for run in runs:
            report = cost_report(run.inputs if run.scope == "lm_cross" else inputs)
            results.append((geom, reconcile(report, run, accounting)))
    return results
