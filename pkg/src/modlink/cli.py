"""Command-line workflow: gen, assemble, sweep, reduce, search, compare.

Exit codes: 0 on success, 1 for validation problems (bad manifest, bad
arguments, missing files), 2 for numerical failures (singular solves,
non-convergent factorizations).
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import mor
from .cache import FrfCache
from .core import frf_eval
from .errors import ModlinkError, ValidationError
from .interconnect import block_frf, lft_assemble, posdep_k11, static_k11
from .manifest import (
    bench_to_manifest_files,
    build_model,
    frequency_grid,
    load_manifest,
    write_matrix_file,
)
from .models import StageModelConfig, make_two_stage_bench

logger = logging.getLogger(__name__)


def parse_freq(text):
    """Parse 'min:max:count[:log|linear]' into a frequency grid spec."""
    parts = text.split(":")
    if len(parts) not in (3, 4):
        raise ValidationError(f"--freq expects min:max:count[:spacing], got {text!r}")
    spec = {"min": float(parts[0]), "max": float(parts[1]),
            "count": int(parts[2]),
            "spacing": parts[3] if len(parts) == 4 else "log"}
    if spec["spacing"] not in ("log", "linear"):
        raise ValidationError(f"unknown spacing {spec['spacing']!r}")
    return spec


def parse_assignments(text, cast=str):
    """Parse 'a=x,b=y' (or a single bare value applying to all) into a dict."""
    if "=" not in text:
        return {"*": cast(text)}
    out = {}
    for item in text.split(","):
        key, _, value = item.partition("=")
        if not key or not value:
            raise ValidationError(f"bad assignment {item!r}")
        out[key.strip()] = cast(value.strip())
    return out


def assignment_for(assignments, name, what):
    if name in assignments:
        return assignments[name]
    if "*" in assignments:
        return assignments["*"]
    raise ValidationError(f"no {what} given for subsystem {name!r}")


def _load_ops_file(path, interface_ids):
    from .interconnect import OperatingPoint
    from .manifest import operating_points

    spec = json.loads(Path(path).read_text())
    return list(operating_points(spec, interface_ids))


def _resolve_ops(model, args):
    if getattr(args, "ops", None):
        return _load_ops_file(args.ops, [i.id for i in model.interfaces])
    if getattr(args, "op", None):
        pairs = parse_assignments(args.op, float)
        from .interconnect import OperatingPoint

        return [OperatingPoint(pairs)]
    return list(model.op_list)


def _resolve_omega(model, args):
    if getattr(args, "freq", None):
        return frequency_grid(parse_freq(args.freq))
    return model.omega


def _block_sweep(model, omega, cache):
    sweeps = []
    for desc, digest in zip(model.descriptors, model.digests):
        if cache is None:
            sweeps.append(frf_eval(desc, omega))
        else:
            sweeps.append(cache.get_or_compute(
                digest, omega, lambda d=desc: frf_eval(d, omega)
            ))
    return block_frf(model.block, omega, sweeps)


def write_sweep_csv(path, sweeps, op_list, out_labels, in_labels, normalize=None):
    """One row per (operating point, frequency); fixed column order, C locale."""
    entries = [(i, j) for i in range(len(out_labels)) for j in range(len(in_labels))]
    header = ["omega"]
    if normalize:
        header.append("omega_norm")
    header.append("op_index")
    for i, j in entries:
        tag = f"{out_labels[i]}_{in_labels[j]}"
        header += [f"mag_{tag}", f"phase_{tag}"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for op_idx, sweep in enumerate(sweeps):
            for k, w in enumerate(sweep.frequencies):
                row = [f"{w:.16e}"]
                if normalize:
                    row.append(f"{w / normalize:.16e}")
                row.append(str(op_idx))
                for i, j in entries:
                    g = sweep.data[k, i, j]
                    row += [f"{abs(g):.16e}", f"{np.angle(g):.16e}"]
                writer.writerow(row)


def cmd_gen(args):
    if args.model != "two-stage":
        raise ValidationError(f"unknown generator {args.model!r}")
    cfg = StageModelConfig(
        n_v=args.n_v,
        stiffness_scale=args.stiffness_scale,
        port_set=args.port_set,
    )
    bench = make_two_stage_bench(cfg)
    manifest_path = bench_to_manifest_files(bench, args.out)
    print(f"wrote {manifest_path}")
    return 0


def cmd_assemble(args):
    model = build_model(load_manifest(args.manifest))
    omega = _resolve_omega(model, args)
    ops = _resolve_ops(model, args)[:1]
    cache = FrfCache(args.cache_dir) if args.cache_dir else None
    gb = _block_sweep(model, omega, cache)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweeps = []
    for op in ops:
        if model.interfaces:
            k11 = (static_k11 if args.static else posdep_k11)(
                model.interfaces, op, model.block
            )
            k = model.k_outer.with_k11(k11)
        else:
            k = model.k_outer
        write_matrix_file(out / "k11.mtx", k.k11)
        sweeps.append(lft_assemble(
            gb, k,
            input_labels=model.external_input_labels,
            output_labels=model.external_output_labels,
        ))
    write_sweep_csv(out / "frf.csv", sweeps, ops,
                    model.external_output_labels, model.external_input_labels,
                    normalize=args.normalize)
    index = {
        "manifest": str(args.manifest),
        "files": {"frf": "frf.csv", "k11": "k11.mtx"},
        "operating_points": [op.as_dict() for op in ops],
        "n_frequencies": int(omega.size),
        "normalize": args.normalize,
        "coupling": "static" if args.static else "position-dependent",
    }
    (out / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    print(f"wrote {out / 'frf.csv'}")
    return 0


def cmd_sweep(args):
    model = build_model(load_manifest(args.manifest))
    omega = _resolve_omega(model, args)
    ops = _resolve_ops(model, args)
    cache = FrfCache(args.cache_dir) if args.cache_dir else None
    gb = _block_sweep(model, omega, cache)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweeps = []
    for op in ops:
        k11 = posdep_k11(model.interfaces, op, model.block) if model.interfaces \
            else model.k_outer.k11
        sweeps.append(lft_assemble(
            gb, model.k_outer.with_k11(k11),
            input_labels=model.external_input_labels,
            output_labels=model.external_output_labels,
        ))
    write_sweep_csv(out / "sweep.csv", sweeps, ops,
                    model.external_output_labels, model.external_input_labels,
                    normalize=args.normalize)
    index = {
        "manifest": str(args.manifest),
        "files": {"sweep": "sweep.csv"},
        "operating_points": [op.as_dict() for op in ops],
        "n_frequencies": int(omega.size),
        "normalize": args.normalize,
        "cache": cache.stats if cache else None,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    if cache:
        print(f"cache: {cache.stats}")
    print(f"wrote {out / 'sweep.csv'} ({len(ops)} operating points)")
    return 0


def _reduce_one(model, name, method, order):
    idx = model.names.index(name)
    sys = model.systems[idx]
    boundary = sorted(
        {d for d, _ in sys.input_map} | {d for d, _, _ in sys.output_map}
    )
    if method == mor.BT:
        return mor.reduce_bt(model.descriptors[idx], order)
    if method == mor.CB:
        return mor.reduce_cb(sys, boundary, order)
    if method == mor.HH:
        return mor.reduce_hh(sys, boundary, order)
    raise ValidationError(f"unknown method {method!r} (expected bt, cb or hh)")


def cmd_reduce(args):
    model = build_model(load_manifest(args.manifest))
    methods = parse_assignments(args.method)
    orders = parse_assignments(args.order, int)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name in model.names:
        method = assignment_for(methods, name, "method").lower()
        order = assignment_for(orders, name, "order")
        reduced, basis = _reduce_one(model, name, method, order)
        write_matrix_file(out / f"{name}_V.mtx", basis.V)
        meta = {
            "method": basis.method,
            "r": basis.r,
            "boundary": list(basis.boundary),
            **{k: (v.tolist() if isinstance(v, np.ndarray) else v)
               for k, v in basis.metadata.items()},
        }
        (out / f"{name}_basis.json").write_text(json.dumps(meta, indent=2) + "\n")
        if method == mor.BT:
            write_matrix_file(out / f"{name}_Ar.mtx", reduced.A_dense)
            write_matrix_file(out / f"{name}_Br.mtx", reduced.B)
            write_matrix_file(out / f"{name}_Cr.mtx", reduced.C)
        else:
            write_matrix_file(out / f"{name}_Mr.mtx", reduced.M, symmetry="symmetric")
            write_matrix_file(out / f"{name}_Dr.mtx", reduced.D, symmetry="symmetric")
            write_matrix_file(out / f"{name}_Kr.mtx", reduced.K, symmetry="symmetric")
        summary[name] = {"method": method, "r": basis.r}
        print(f"{name}: {method} -> r = {basis.r} states")
    (out / "reduce.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_search(args):
    model = build_model(load_manifest(args.manifest))
    omega = _resolve_omega(model, args)
    ops = _resolve_ops(model, args)
    methods = parse_assignments(args.method)
    method_list = [assignment_for(methods, n, "method").lower() for n in model.names]
    result = mor.minimal_order_search(
        list(model.systems), method_list, model.interfaces, ops, omega,
        model.k_outer, threshold=args.threshold, names=list(model.names),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_op = result.table_per_op()
    final = result.table_final()
    with open(out / "orders_per_op.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["subsystem", "method", "op_index", "r"])
        writer.writeheader()
        writer.writerows(per_op)
    with open(out / "orders_final.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["subsystem", "method", "n", "r", "reduction_pct"]
        )
        writer.writeheader()
        writer.writerows(final)
    payload = {
        "threshold": result.threshold,
        "per_op": per_op,
        "final": final,
        "reduction_pct_formula": "100 * (1 - r / n)",
        "witnesses": {
            name: (None if w is None else {
                "order": w.order, "op_index": w.op_index,
                "max_rel_error": w.max_rel_error,
            })
            for name, w in result.witnesses.items()
        },
        "n_evaluations": result.n_evaluations,
    }
    (out / "search.json").write_text(json.dumps(payload, indent=2) + "\n")
    for row in final:
        print(f"{row['subsystem']:>12s}  {row['method']:>3s}  n={row['n']:<6d} "
              f"r={row['r']:<6d} reduction={row['reduction_pct']:.1f}%")
    return 0


def cmd_compare(args):
    model = build_model(load_manifest(args.manifest))
    omega = _resolve_omega(model, args)
    ops = _resolve_ops(model, args)
    methods = parse_assignments(args.method)
    orders = parse_assignments(args.order, int)
    reduced = []
    for name in model.names:
        method = assignment_for(methods, name, "method").lower()
        order = assignment_for(orders, name, "order")
        red, _ = _reduce_one(model, name, method, order)
        reduced.append(red)
    gb_full = block_frf(model.block, omega)
    reports = []
    for op_idx, op in enumerate(ops):
        k11 = posdep_k11(model.interfaces, op, model.block) if model.interfaces \
            else model.k_outer.k11
        k = model.k_outer.with_k11(k11)
        full = lft_assemble(gb_full, k)
        red = mor.assemble_reduced(
            reduced, k, omega, names=list(model.names),
            reference_block=model.block,
        )
        reports.append(mor.relative_error(
            full, red, threshold=args.threshold, op_index=op_idx
        ))
    report = mor.ErrorReport.combine(reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save_csv(out / "error_report.csv")
    report.save_json(out / "error_report.json")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: max relative error {report.max_rel_error:.4g} "
          f"(threshold {report.threshold})")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(
        prog="modlink",
        description="Modular models with translating interfaces: assembly, "
                    "operating-point sweeps, and modular model reduction.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a test model (manifest + matrices)")
    p.add_argument("model", choices=["two-stage"])
    p.add_argument("--out", required=True)
    p.add_argument("--n-v", type=int, default=5)
    p.add_argument("--stiffness-scale", type=float, default=1.0)
    p.add_argument("--port-set", choices=["full", "interface"], default="full")
    p.set_defaults(func=cmd_gen)

    def common(p, ops=True):
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--freq", help="min:max:count[:log|linear]")
        if ops:
            p.add_argument("--ops", help="JSON file with operating points")
            p.add_argument("--op", help="single point, e.g. rail0=0.05")

    p = sub.add_parser("assemble", help="assemble the FRF at one operating point")
    common(p)
    p.add_argument("--static", action="store_true",
                   help="use the exact static coupling instead of interpolation")
    p.add_argument("--normalize", type=float, default=None,
                   help="emit omega_norm = omega / F alongside omega")
    p.add_argument("--cache-dir", default=None)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("sweep", help="assemble FRFs across operating points")
    common(p)
    p.add_argument("--normalize", type=float, default=None)
    p.add_argument("--cache-dir", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reduce", help="reduce subsystems and export the results")
    common(p, ops=False)
    p.add_argument("--method", required=True,
                   help="bt|cb|hh, or per subsystem: name=bt,name2=cb")
    p.add_argument("--order", required=True,
                   help="states (bt) or kept modes (cb/hh), per subsystem allowed")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("search", help="find minimal orders meeting the error bound")
    common(p)
    p.add_argument("--method", required=True)
    p.add_argument("--threshold", type=float, default=0.1)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("compare", help="relative error of a reduced assembly")
    common(p)
    p.add_argument("--method", required=True)
    p.add_argument("--order", required=True)
    p.add_argument("--threshold", type=float, default=0.1)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ModlinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
