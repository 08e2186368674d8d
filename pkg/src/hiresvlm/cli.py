"""Command-line entry point.

Exit codes: 0 success, 1 contract violation (JSON error object on stderr),
2 bad flags.  ``HIRESVLM_SEED`` sets the default seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, cost, io, training
from .decoder import forward, generate
from .errors import HiresError, InputError
from .tensor import MulLedger

TRAIN_LOG_SCHEMA = "hiresvlm.train_log/1"
DEMO_SCHEMA = "hiresvlm.demo_forward/1"


def default_seed() -> int:
    raw = os.environ.get("HIRESVLM_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"HIRESVLM_SEED must be an integer, got {raw!r}") from None


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _read_lines(path: str) -> list[str]:
    try:
        return Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _ids(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise InputError(f"token ids must be comma-separated integers, got {text!r}") from None


def cmd_cost(args, out) -> int:
    if args.n is not None or args.n_prime is not None:
        inputs = cost.CostInputs(args.nt, args.ni, args.d, args.dvit, args.i, n=args.n, n_prime=args.n_prime,
                                 p=args.p)
    else:
        inputs = cost.CostInputs.derive(args.nt, args.ni, args.d, args.dvit, args.i, p=args.p)
    report = cost.cost_report(inputs)
    out.write(report.to_csv() if args.csv else report.to_json() + "\n")
    return 0


def cmd_verify(args, out) -> int:
    results = cost.verify_sweep(accounting=args.accounting)
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["geometry", "scope", "analytic", "counted", "delta"])
    bad = 0
    for geom, rec in results:
        writer.writerow([geom.label, rec.scope, rec.analytic_total, rec.counted_total, rec.delta])
        bad += rec.delta != 0
    return 1 if bad else 0


def cmd_demo_forward(args, out) -> int:
    cfg = io.load_config(args.config)
    model = cfg.build()
    if args.weights:
        model.load_state_dict(io.load_weights(args.weights))
    image = io.load_image(args.image)
    prompt = _ids(args.prompt)
    enc_ledger, dec_ledger = MulLedger(), MulLedger()
    vision = model.encode(image, enc_ledger)
    logits = forward(model, prompt, vision, dec_ledger)
    n_global, n_local = vision.counts
    result = {
        "schema": DEMO_SCHEMA,
        "tokens": {"global": n_global, "local": n_local, "total": len(vision), "text": len(prompt)},
        "logits_shape": list(logits.shape),
        "logits_sha256": hashlib.sha256(np.ascontiguousarray(logits.data, "<f8").tobytes()).hexdigest(),
        "ledger": {"encoder": enc_ledger.as_dict(), "decoder": dec_ledger.as_dict()},
    }
    if args.maps_out:
        gen = generate(model, prompt, vision, args.max_new)
        result["generated"] = [int(t) for t in gen.token_ids]
        record = analysis.AttentionRecord(Path(args.image).stem, gen.cross_attention_maps, gen.block_layers,
                                          n_global, n_local)
        Path(args.maps_out).write_text(_dumps(record.to_dict()) + "\n")
    out.write(json.dumps(result, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_train_toy(args, out) -> int:
    seed = default_seed() if args.seed is None else args.seed
    model = training.toy_model(seed)
    task = training.SyntheticTask.for_geometry(model.vg, seed)
    cfg = training.toy_config(args.stage, args.steps, seed, args.batch, args.micro_batch)

    def emit(record):
        out.write(_dumps({"schema": TRAIN_LOG_SCHEMA, "event": "step", "stage": args.stage, **record}) + "\n")

    log = training.train(model, task, cfg, ablate_vision=args.ablate_vision, on_step=emit)
    changed = sorted(k for k in log.frozen_start if log.frozen_start[k] != log.frozen_end[k])
    out.write(_dumps({"schema": TRAIN_LOG_SCHEMA, "event": "end", "steps": len(log.records),
                      "frozen_unchanged": not changed, "frozen_changed": changed}) + "\n")
    if args.save_weights:
        io.save_weights(args.save_weights, model.state_dict())
    return 0


def cmd_analyze_tertiles(args, out) -> int:
    samples = analysis.load_samples(_read_lines(args.samples))
    out.write(analysis.rows_to_csv(analysis.tertile_table(samples, args.low, args.high)))
    return 0


def _record_counts(records, args) -> tuple[int, int]:
    if args.global_count is not None and args.local_count is not None:
        return args.global_count, args.local_count
    counts = {(r.global_count, r.local_count) for r in records}
    if len(counts) != 1 or None in next(iter(counts)):
        raise InputError("records need consistent global_count/local_count, or pass --global-count/--local-count")
    return next(iter(counts))


def cmd_analyze_attention(args, out) -> int:
    records = analysis.load_attention_records(_read_lines(args.maps))
    counts = _record_counts(records, args)
    if args.samples:
        tertile_of = analysis.partition_samples(analysis.load_samples(_read_lines(args.samples))).tertile_of()
        labels = [tertile_of.get(r.sample_id) for r in records]
    else:
        labels = [r.tertile for r in records]
    groups: dict[str, list[int]] = {}
    for i, label in enumerate(labels):
        if label is not None:
            groups.setdefault(label, []).append(i)
    ordered = {t: groups[t] for t in analysis.TERTILES if t in groups}
    ordered.update({t: v for t, v in sorted(groups.items()) if t not in ordered})
    summary = analysis.attention_aggregate(records, counts, ordered)
    out.write(analysis.rows_to_csv(summary.rows()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiresvlm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cost", help="analytic multiplication counts and efficiency ratios")
    p.add_argument("--nt", type=int, required=True, help="text tokens N_T")
    p.add_argument("--ni", type=int, required=True, help="vision tokens N_I")
    p.add_argument("--d", type=int, required=True, help="decoder width")
    p.add_argument("--dvit", type=int, required=True, help="vision encoder width")
    p.add_argument("--i", type=int, required=True, help="cross-attention interval")
    p.add_argument("--p", type=int, default=10, help="sub-image count (default 10)")
    p.add_argument("--n", type=int, help="full-resolution tokens N (default N_I)")
    p.add_argument("--n-prime", type=int, help="tokens per sub-image (default derived)")
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true", help="JSON output (default)")
    fmt.add_argument("--csv", action="store_true", help="CSV output")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("verify", help="reconcile instrumented counts with the analytic model")
    p.add_argument("--accounting", choices=("standard", "full"), default="standard")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("demo-forward", help="encode an image and run one forward pass")
    p.add_argument("--config", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--weights")
    p.add_argument("--prompt", default="1,3", help="comma-separated prompt ids")
    p.add_argument("--maps-out", help="also generate greedily and write attention maps (JSON-lines)")
    p.add_argument("--max-new", type=int, default=3)
    p.set_defaults(func=cmd_demo_forward)

    p = sub.add_parser("train-toy", help="train on the synthetic rectangle task")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, help="default: $HIRESVLM_SEED or 0")
    p.add_argument("--batch", type=int, default=training.TOY_EFFECTIVE_BATCH, help="effective batch")
    p.add_argument("--micro-batch", type=int, default=8)
    p.add_argument("--ablate-vision", action="store_true", help="zero the vision tokens")
    p.add_argument("--save-weights")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("analyze", help="evaluation analyses")
    asub = p.add_subparsers(dest="analysis", required=True)
    a = asub.add_parser("tertiles", help="accuracy by relative-area tertile")
    a.add_argument("--samples", required=True)
    a.add_argument("--low", default="low")
    a.add_argument("--high", default="high")
    a.set_defaults(func=cmd_analyze_tertiles)
    a = asub.add_parser("attention", help="per-layer global attention mass")
    a.add_argument("--maps", required=True)
    a.add_argument("--samples", help="annotated samples for per-tertile columns")
    a.add_argument("--global-count", type=int)
    a.add_argument("--local-count", type=int)
    a.set_defaults(func=cmd_analyze_attention)
    return parser


def main(argv: list[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out)
    except (HiresError, ZeroDivisionError) as exc:
        err.write(_dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
