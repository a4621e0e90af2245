"""``qxkit`` command line.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import codecs, container, evaluation, selector
from ._backend import BACKEND, max_threads
from .codebook import DEFAULT_BINS, build_codebook
from .errors import InvariantError, QxError
from .tensor import WeightMatrix, compute_stats, load_manifest, save_manifest

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
CODEC_CHOICES = ("fp32", "q40", "q4k", "q4x")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit_json(doc, dest):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if dest in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(dest, "w", encoding="utf-8") as fh:
            fh.write(text)


def _tensor_error(name, exc):
    return QxError(f"tensor {name!r}: {exc}")


def _map_tensors(fn, items):
    """Apply ``fn`` per tensor; output order follows input order."""
    workers = min(max_threads(), max(1, len(items)))
    if workers == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _parse_overrides(pairs):
    overrides = {}
    for raw in pairs or ():
        name, sep, codec = raw.rpartition("=")
        if not sep or not name:
            raise UsageError(f"--tensor expects NAME=CODEC, got {raw!r}")
        if codec not in CODEC_CHOICES:
            raise UsageError(f"--tensor {raw!r}: codec must be one of {', '.join(CODEC_CHOICES)}")
        if name in overrides and overrides[name] != codec:
            raise UsageError(f"conflicting codecs for tensor {name!r}: {overrides[name]} vs {codec}")
        overrides[name] = codec
    return overrides


def _load_calib(path):
    if path is None:
        return None
    try:
        arr = np.load(path)
    except (OSError, ValueError) as exc:
        raise QxError(f"{path}: cannot read calibration activations ({exc})") from exc
    if arr.ndim != 2:
        raise QxError(f"{path}: calibration activations must be 2-D [tokens, channels]")
    return arr.astype(np.float64)


def _policy(name):
    if name not in selector.POLICIES:
        raise UsageError(f"unknown policy {name!r}; available: {', '.join(selector.POLICIES)}")
    return selector.POLICIES[name]


def _selection(args, matrices):
    return selector.select_model(
        matrices, calib=_load_calib(args.calib), heads=args.heads, policy=_policy(args.policy),
        seed=args.seed, tokens=args.tokens, causal=args.causal,
        act_quant=args.act_quant == "int8-rtn", migrate_alpha=args.migrate)


# --- commands --------------------------------------------------------------------------

def cmd_quantize(args):
    overrides = _parse_overrides(args.tensor)
    matrices = load_manifest(args.manifest)
    names = {m.name for m in matrices}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise QxError(f"--tensor names not in manifest: {', '.join(unknown)}")

    decisions = []
    chosen = {}
    if args.codec == "auto":
        result = _selection(args, matrices)
        decisions = [d.to_dict() for d in result.decisions]
        chosen = {d.name: d.codec for d in result.decisions}
    for m in matrices:
        chosen[m.name] = overrides.get(m.name, chosen.get(m.name, args.codec))

    def work(m):
        try:
            if chosen[m.name] == "q4x":
                fit = build_codebook(m, bins=args.bins, seed=args.seed)
                qt = codecs.q4x_encode(m, fit.codebook, fit.assignment)
                out = selector.outlier_score(m, fit.codebook, fit.assignment).to_dict()
            else:
                qt = codecs.encode(m, chosen[m.name], seed=args.seed)
                out = None
            rec = container.record_from_quantized(m.name, m.rows, m.cols, qt)
            return rec, evaluation.tensor_entry(m, qt, out)
        except QxError as exc:
            raise _tensor_error(m.name, exc) from exc

    results = _map_tensors(work, matrices)
    records = [r for r, _ in results]
    nbytes = container.write_container(args.output, records)
    report = evaluation.QuantReport([e for _, e in results], decisions, nbytes,
                                    {"command": "quantize", "codec": args.codec, "seed": args.seed})
    expected = report.total_bytes + container.header_overhead(records)
    if expected != nbytes:
        raise InvariantError(f"byte accounting mismatch: report {expected} vs file {nbytes}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    if args.json:
        _emit_json(report.to_dict(), args.json)
    else:
        sys.stdout.write(evaluation.format_table(report.tensors))
        sys.stdout.write(f"wrote {nbytes} bytes to {args.output} "
                         f"({report.weighted_bpw:.5f} BPW over {report.total_elements} weights)\n")
    return EXIT_OK


def cmd_dequantize(args):
    records = container.read_container(args.container)
    matrices = []
    for rec in records:
        try:
            values = rec.to_quantized().dequantize()
        except QxError as exc:
            raise _tensor_error(rec.name, exc) from exc
        matrices.append(WeightMatrix.from_flat(rec.name, rec.rows, rec.cols, values))
    save_manifest(args.output, matrices)
    doc = {"manifest": args.output, "tensors": [r.name for r in records]}
    if args.json:
        _emit_json(doc, args.json)
    else:
        print(f"wrote {len(matrices)} tensors to {args.output}")
    return EXIT_OK


def _layout_formula(codec, n):
    if codec == "fp32":
        return f"{n} x 4"
    if codec == "q40":
        return f"{n}/32 x 18"
    if codec == "q4k":
        return f"{n}/256 x 144"
    g = n // 64
    return f"128 + 4 + {g} x 34 + ceil({g}/4)"


def cmd_inspect(args):
    with open(args.container, "rb") as fh:
        blob = fh.read()
    records, flags = container.parse_with_flags(blob)
    rows = []
    for rec in records:
        qt = rec.to_quantized()
        expected = container.expected_payload_len(rec.codec, rec.n)
        rows.append({
            "name": rec.name, "rows": rec.rows, "cols": rec.cols, "codec": rec.codec,
            "payload_len": len(rec.payload), "layout": _layout_formula(rec.codec, rec.n),
            "layout_bytes": expected, "ok": expected == len(rec.payload),
            "bpw_steady_state": qt.steady_state_bpw, "bpw_effective": qt.effective_bpw,
        })
    doc = {"magic": container.MAGIC.decode(), "version": container.VERSION, "flags": flags,
           "tensor_count": len(records), "file_bytes": len(blob), "tensors": rows}
    if args.json:
        _emit_json(doc, args.json)
        return EXIT_OK
    print(f"{doc['magic']} v{doc['version']}  tensors={len(records)}  flags={flags}  bytes={len(blob)}")
    for r in rows:
        print(f"  {r['name']}  {r['rows']}x{r['cols']}  {r['codec']}  payload_len={r['payload_len']}  "
              f"layout: {r['layout']} = {r['layout_bytes']}  {'ok' if r['ok'] else 'MISMATCH'}  "
              f"bpw={r['bpw_steady_state']:.6g} (effective {r['bpw_effective']:.5f})")
    return EXIT_OK


def cmd_stats(args):
    matrices = load_manifest(args.manifest)
    out = []
    for m in matrices:
        st = compute_stats(m, bins=args.bins)
        out.append({"name": m.name, "rows": m.rows, "cols": m.cols, "role": m.role, **st.to_dict()})
    if args.json:
        _emit_json({"tensors": out}, args.json)
        return EXIT_OK
    width = max([len(t["name"]) for t in out] + [6])
    print(f"{'tensor'.ljust(width)}  {'mean':>11}  {'variance':>11}  {'absmax':>9}  {'zero frac':>9}")
    for t in out:
        print(f"{t['name'].ljust(width)}  {t['mean']:11.4e}  {t['variance']:11.4e}  "
              f"{t['absmax']:9.4g}  {t['zero_fraction']:9.4f}")
    return EXIT_OK


def cmd_codebook(args):
    matrices = {m.name: m for m in load_manifest(args.manifest)}
    if args.tensor not in matrices:
        raise QxError(f"tensor {args.tensor!r} not in manifest")
    fit = build_codebook(matrices[args.tensor], bins=args.bins, seed=args.seed)
    cb = fit.codebook
    counts = np.bincount(fit.assignment, minlength=cb.centroids.shape[0])
    doc = {"tensor": args.tensor, "bins": args.bins, "seed": args.seed,
           "centroids": cb.centroids.tolist(), "fp16": cb.fp16.astype(float).tolist(),
           "group_counts": counts.tolist(), "warning": cb.warning,
           "learned_histograms": [h.bins.tolist() for h in cb.learned]}
    if args.json:
        _emit_json(doc, args.json)
        return EXIT_OK
    print(f"codebook for {args.tensor} (bins={args.bins}, seed={args.seed})")
    for i, row in enumerate(cb.centroids):
        print(f"  [{i}] groups={counts[i]:>6}  " + " ".join(f"{v:+.4f}" for v in row))
    if cb.warning:
        print(f"  warning: {cb.warning}")
    return EXIT_OK


def cmd_select(args):
    matrices = load_manifest(args.manifest)
    result = _selection(args, matrices)
    doc = {"schema": evaluation.SCHEMA, "policy": args.policy, "seed": args.seed, **result.to_dict()}
    if args.report:
        _emit_json(doc, args.report)
    if args.json:
        _emit_json(doc, args.json)
        return EXIT_OK
    for d in result.decisions:
        print(f"{d.name}: {d.scheme} ({d.codec})  role={d.role}  rule: {d.rule}")
    return EXIT_OK


def cmd_compare(args):
    codec_list = [c.strip() for c in args.codecs.split(",") if c.strip()]
    bad = [c for c in codec_list if c not in CODEC_CHOICES]
    if bad:
        raise UsageError(f"unknown codecs: {', '.join(bad)}")
    matrices = load_manifest(args.manifest)

    def work(m):
        try:
            return evaluation.compare_codecs(m, codec_list, seed=args.seed)
        except QxError as exc:
            raise _tensor_error(m.name, exc) from exc

    per_tensor = _map_tensors(work, matrices)
    totals = {}
    for rows in per_tensor:
        for r in rows:
            t = totals.setdefault(r.codec, {"bytes": 0, "elements": 0})
            t["bytes"] += r.bytes
            t["elements"] += r.rows * r.cols
    summary = sorted(
        ({"codec": c, "bytes": t["bytes"], "mib": t["bytes"] / 2 ** 20,
          "weighted_bpw": 8.0 * t["bytes"] / t["elements"],
          "bpw_steady_state": codecs.steady_state_bpw(c)} for c, t in totals.items()),
        key=lambda s: (s["bpw_steady_state"], s["weighted_bpw"], evaluation._codec_rank(s["codec"])))
    doc = {"schema": evaluation.SCHEMA, "tensors": [[r.to_dict() for r in rows] for rows in per_tensor],
           "summary": summary}
    if args.json:
        _emit_json(doc, args.json)
        return EXIT_OK
    for rows in per_tensor:
        sys.stdout.write(evaluation.format_table(rows))
        sys.stdout.write("\n")
    print("model totals")
    for s in summary:
        print(f"  {s['codec'].upper():5s} BPW {s['bpw_steady_state']:.6g}  "
              f"effective {s['weighted_bpw']:.5f}  size {s['mib']:.4f} MiB")
    return EXIT_OK


def cmd_toy(args):
    cfg = evaluation.ToyModelConfig(layers=args.layers, d_model=args.d_model, heads=args.heads,
                                    d_ff=args.d_ff, vocab=args.vocab, seed=args.seed)
    weights = evaluation.init_toy_weights(cfg)
    tokens = evaluation.toy_tokens(cfg, args.tokens)
    act = args.act_quant == "int8-rtn"
    doc = {"config": cfg.__dict__, "act_quant": args.act_quant, "codecs": {}}
    for codec in [c.strip() for c in args.codecs.split(",") if c.strip()]:
        if codec not in CODEC_CHOICES:
            raise UsageError(f"unknown codec {codec!r}")
        q = evaluation.quantize_toy_weights(cfg, weights, codec, seed=args.seed)
        doc["codecs"][codec] = evaluation.logit_delta(cfg, weights, q, tokens, act_quant=act)
    if args.levels_sweep:
        doc["levels_sweep"] = evaluation.levels_sweep(cfg, weights, tokens, seed=args.seed)
    if args.json:
        _emit_json(doc, args.json)
        return EXIT_OK
    for codec, delta in doc["codecs"].items():
        print(f"{codec.upper():5s} mean |logit delta| = {delta:.6g}")
    for levels, delta in doc.get("levels_sweep", {}).items():
        print(f"codebook levels {levels:2d}: mean |logit delta| = {delta:.6g}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------

def _json_flag(p):
    p.add_argument("--json", nargs="?", const="-", metavar="PATH",
                   help="machine-readable output to PATH (stdout when omitted)")


def _selection_flags(p):
    p.add_argument("--calib", help=".npy file with calibration activations [tokens, channels]")
    p.add_argument("--policy", default="default")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--tokens", type=int, default=32, help="synthetic calibration tokens")
    p.add_argument("--causal", action="store_true")
    p.add_argument("--act-quant", choices=["none", "int8-rtn"], default="none")
    p.add_argument("--migrate", type=float, metavar="ALPHA")


def build_parser():
    parser = _Parser(prog="qxkit", description="Group-wise 4-bit weight quantization toolkit.")
    parser.add_argument("--version", action="version", version=f"qxkit 0.1.0 ({BACKEND} kernels)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("quantize", help="quantize a manifest into a .qxt container")
    p.add_argument("manifest")
    p.add_argument("--codec", choices=CODEC_CHOICES + ("auto",), default="q4x")
    p.add_argument("--tensor", action="append", metavar="NAME=CODEC", help="per-tensor codec override")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--report")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    _selection_flags(p)
    _json_flag(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("dequantize", help="expand a container back to fp32 blobs and a manifest")
    p.add_argument("container")
    p.add_argument("-o", "--output", required=True, help="manifest path to write")
    _json_flag(p)
    p.set_defaults(func=cmd_dequantize)

    p = sub.add_parser("inspect", help="print container header and per-tensor layout arithmetic")
    p.add_argument("container")
    _json_flag(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("stats", help="per-tensor distribution statistics")
    p.add_argument("manifest")
    p.add_argument("--bins", type=int, default=64)
    _json_flag(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("codebook", help="learn and dump the Q4X codebook of one tensor")
    p.add_argument("manifest")
    p.add_argument("--tensor", required=True)
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--seed", type=int, default=0)
    _json_flag(p)
    p.set_defaults(func=cmd_codebook)

    p = sub.add_parser("select", help="choose uniform or non-uniform quantization per tensor")
    p.add_argument("manifest")
    p.add_argument("--report")
    p.add_argument("--seed", type=int, default=0)
    _selection_flags(p)
    _json_flag(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("compare", help="compare codecs per tensor (BPW, size, error)")
    p.add_argument("manifest")
    p.add_argument("--codecs", default="q40,q4k,q4x")
    p.add_argument("--seed", type=int, default=0)
    _json_flag(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("toy", help="logit fidelity of a small seeded transformer")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--tokens", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--codecs", default="q40,q4k,q4x")
    p.add_argument("--levels-sweep", action="store_true")
    p.add_argument("--act-quant", choices=["none", "int8-rtn"], default="none")
    _json_flag(p)
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "migrate", None) is not None and not 0.0 <= args.migrate <= 1.0:
            raise UsageError("--migrate ALPHA must lie in [0, 1]")
        if getattr(args, "tensor", None) and args.command == "quantize":
            _parse_overrides(args.tensor)
        return args.func(args)
    except UsageError as exc:
        print(f"qxkit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantError, AssertionError) as exc:
        print(f"qxkit: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (QxError, OSError, ValueError) as exc:
        print(f"qxkit: error: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # anything else is a bug, not bad input
        print(f"qxkit: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
