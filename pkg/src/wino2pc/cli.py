"""Command line surface.

Verbs: transform-weights, optimize-graph, run-2pc, run-plain, assign-bits,
quantize-toy.  Exit codes: 0 success, 2 invariant violation, 3 infeasible
or configuration error.
"""

from __future__ import annotations

import argparse
import sys

from .costs import CostModel, DEFAULT_LAMBDA
from .errors import GraphError, Infeasible, InvariantViolation, Wino2pcError
from .graphir import estimate_comm
from .ledger import Phase
from .models import load_input, load_model, lower_model, transform_weights
from .passes import PIPELINE, run_pipeline, run_pipeline_trace
from .qtensor import save_qtsr
from .sharing import PartyId

EXIT_OK = 0
EXIT_INVARIANT = 2
EXIT_CONFIG = 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--lambda", dest="lam", type=int, default=DEFAULT_LAMBDA,
                   help="security parameter for the cost model")
    p.add_argument("--report", help="report file prefix (json/csv/png)")


def cmd_transform_weights(args) -> int:
    if args.plan:
        m = {"f2x3": 2, "f4x3": 4}[args.plan]
        model = load_model(args.model)
        for layer in model["layers"]:
            if layer["kind"] == "conv3x3":
                layer["plan_m"] = m
        from .models import save_model

        save_model(model, args.model)
    model = transform_weights(args.model, args.out,
                              reweight_outliers=args.reweight_outliers,
                              outlier_threshold=args.threshold)
    for layer in model["layers"]:
        if layer["kind"] in ("conv3x3", "fc"):
            print(f"{layer['name']}: B={layer.get('bit_importance')} "
                  f"win_scale_exp={layer.get('win_weight_scale_exp', '-')}")
    return EXIT_OK


def cmd_optimize_graph(args) -> int:
    from .report import format_table, optimize_report

    model = load_model(args.model)
    g = lower_model(model, use_winograd=not args.direct, with_weights=False)
    cm = CostModel(lam=args.lam)
    passes = list(PIPELINE) if args.passes is None else args.passes.split(",")
    passes = [p for p in passes if p]
    stages = []

    def stage(name, graph):
        _, tot = estimate_comm(graph, cm)
        stages.append({"pass": name, "offline_bits": tot[Phase.OFFLINE],
                       "online_bits": tot[Phase.ONLINE],
                       "total_bits": tot["total"]})

    stage("unoptimized", g)
    for name, gg in run_pipeline_trace(g, passes):
        stage(name, gg)
        g = gg
    print(format_table(stages))
    if args.out_graph:
        g.to_json(args.out_graph)
        print(f"optimized graph written to {args.out_graph}")
    if args.report:
        optimize_report(stages, args.report, title=model.get("name", ""))
    return EXIT_OK


def _load_exec_graph(args):
    model = load_model(args.model)
    g = lower_model(model, use_winograd=not args.direct, with_weights=True)
    if not args.no_optimize:
        g = run_pipeline(g)
    return model, g


def cmd_run_plain(args) -> int:
    from .runner import run_graph_plain

    model, g = _load_exec_graph(args)
    x = load_input(model)
    out, mults = run_graph_plain(g, x)
    save_qtsr(args.out, out)
    print(f"plain output -> {args.out}  (shape {tuple(out.shape)}, "
          f"{mults} multiplications)")
    return EXIT_OK


def cmd_run_2pc(args) -> int:
    from .report import ledger_report
    from .runner import run_graph_2pc, run_graph_party_tcp

    model, g = _load_exec_graph(args)
    cm = CostModel(lam=args.lam)
    if args.transport == "inproc":
        x = load_input(model)
        out, ledger, mults = run_graph_2pc(g, x, seed=args.seed, cm=cm)
    else:
        role = PartyId(args.role)
        host, _, port = args.peer.rpartition(":")
        x = load_input(model) if role is PartyId.CLIENT else None
        out, ledger, mults = run_graph_party_tcp(
            g, role, x, host or "127.0.0.1", int(port), seed=args.seed, cm=cm)
    if out is not None:
        save_qtsr(args.out, out)
        print(f"2pc output -> {args.out}")
    print(f"modeled bits: offline {ledger.total_modeled(Phase.OFFLINE):,} "
          f"online {ledger.total_modeled(Phase.ONLINE):,} "
          f"wire {ledger.total_wire():,}  multiplications {mults:,}")
    if args.report:
        ledger_report(ledger, args.report, title=model.get("name", ""))
    return EXIT_OK


def cmd_assign_bits(args) -> int:
    from .quanttools import assign_bits_ilp, load_sensitivity

    layers = load_sensitivity(args.sensitivity)
    result = assign_bits_ilp(layers, args.zeta)
    print(f"omega total: {result['omega_total']:.6g}")
    print(f"comm total:  {result['comm_total']:,} bits (budget {args.zeta:,})")
    for layer, bits in result["bits"].items():
        print(f"  {layer}: {bits}-bit weights")
    if args.model:
        model = load_model(args.model)
        for layer in model["layers"]:
            if layer["name"] in result["bits"]:
                layer["weight_bits"] = int(result["bits"][layer["name"]])
                layer["bit_importance"] = None
        from .models import save_model

        save_model(model, args.out or args.model)
        print(f"model updated -> {args.out or args.model}")
    return EXIT_OK


def cmd_quantize_toy(args) -> int:
    from .quanttools import export_toy_model, finetune_toy, reweight_bits
    from .report import training_report

    imp = reweight_bits(args.lw) if args.reweight else None
    result = finetune_toy(lw=args.lw, epochs=args.epochs, seed=args.seed,
                          importance=imp)
    print(f"training accuracy: {result.accuracy:.1%} "
          f"(final loss {result.losses[-1]:.4f})")
    print(f"bit importance: {list(result.importance.weights)}")
    if args.out:
        path = export_toy_model(result, args.out)
        print(f"quantized toy model -> {path}")
    if args.report:
        training_report(result.losses, result.accuracy, args.report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="wino2pc",
        description="Quantized Winograd convolution protocols for two-party "
                    "secure inference")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transform-weights",
                       help="offline Winograd transform + weight quantization")
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="write the updated model JSON here")
    p.add_argument("--plan", choices=["f2x3", "f4x3"],
                   help="override the Winograd plan on every conv layer")
    p.add_argument("--reweight-outliers", action="store_true",
                   help="re-weight bit importance on layers with outliers")
    p.add_argument("--threshold", type=float, default=4.0)
    p.set_defaults(fn=cmd_transform_weights)

    p = sub.add_parser("optimize-graph", help="run the fusion pass pipeline")
    _add_common(p)
    p.add_argument("--passes", help="comma-separated pass list")
    p.add_argument("--direct", action="store_true",
                   help="lower to the per-bit direct convolution path")
    p.add_argument("--out-graph", help="write the optimized graph JSON")
    p.set_defaults(fn=cmd_optimize_graph)

    p = sub.add_parser("run-plain", help="plaintext oracle execution")
    _add_common(p)
    p.add_argument("--out", default="output.plain.qtsr")
    p.add_argument("--direct", action="store_true")
    p.add_argument("--no-optimize", action="store_true")
    p.set_defaults(fn=cmd_run_plain)

    p = sub.add_parser("run-2pc", help="two-party protocol execution")
    _add_common(p)
    p.add_argument("--out", default="output.2pc.qtsr")
    p.add_argument("--direct", action="store_true")
    p.add_argument("--no-optimize", action="store_true")
    p.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    p.add_argument("--role", choices=["server", "client"],
                   help="party role (tcp transport)")
    p.add_argument("--peer", default="127.0.0.1:9555",
                   help="host:port to connect/bind (tcp transport)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_run_2pc)

    p = sub.add_parser("assign-bits",
                       help="communication-budgeted bit width assignment")
    p.add_argument("--sensitivity", required=True,
                   help="JSON rows of {layer, bits, omega, comm_bits}")
    p.add_argument("--zeta", type=int, required=True,
                   help="modeled communication budget in bits")
    p.add_argument("--model", help="model JSON to update in place")
    p.add_argument("--out", help="write the updated model here")
    p.set_defaults(fn=cmd_assign_bits)

    p = sub.add_parser("quantize-toy",
                       help="toy-scale bit-level finetuning demo")
    p.add_argument("--lw", type=int, default=4)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reweight", action="store_true")
    p.add_argument("--out", help="export directory for the trained model")
    p.add_argument("--report", help="report file prefix")
    p.set_defaults(fn=cmd_quantize_toy)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (Infeasible, GraphError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Wino2pcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
