"""Command-line interface.

Subcommands: run (batch execution), metrics (recompute a report from
results), conformance (protocol checks against a wire backend),
serve-toy (serve the toy backend over stdio or a socket), and demo
(materialize the crafted verification suite).
"""

from __future__ import annotations

import argparse
import json
import sys

from .backend import ToyBackend
from .core import ONE_SHOT, ZERO_SHOT, Config
from .harness import (load_dataset, metrics_from_rows, read_report,
                      rows_from_csv, rows_from_report, run_batch, write_report)
from .knowledge import load_knowledge_repository
from .scenario import build_crafted_suite, write_suite
from .wire import BACKEND_CMD_ENV, WireBackend, run_conformance, serve_socket, serve_stdio


def _parse_socket(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError("socket must be host:port")
    return host, int(port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reason-iad",
        description="Retrieval-augmented latent reasoning engine and harness",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run a dataset through the engine")
    run.add_argument("--dataset", required=True, help="dataset file (one JSON instance per line)")
    run.add_argument("--knowledge", default=None, help="knowledge repository file")
    run.add_argument("--backend", choices=("toy", "wire"), default="toy")
    run.add_argument("--setting", choices=(ONE_SHOT, ZERO_SHOT), default=ONE_SHOT)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--iterations", type=int, default=10)
    run.add_argument("--latent-tokens", type=int, default=4)
    run.add_argument("--top-k", type=int, default=2)
    run.add_argument("--patches", type=int, default=4)
    run.add_argument("--eta", type=float, default=1e-3)
    run.add_argument("--sigma-frac", type=float, default=0.10)
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--toy-seed", type=int, default=0, help="toy backend weight seed")
    run.add_argument("--toy-dim", type=int, default=16, help="toy backend dimension")
    run.add_argument("--backend-cmd", default=None,
                     help=f"wire backend command (default ${BACKEND_CMD_ENV})")
    run.add_argument("--backend-socket", type=_parse_socket, default=None,
                     help="wire backend socket host:port")
    run.add_argument("--no-figures", action="store_true",
                     help="skip matplotlib figure rendering")

    metrics = commands.add_parser("metrics", help="recompute metrics from results")
    metrics.add_argument("--results", required=True,
                         help="report.json or results.csv from a run")

    conformance = commands.add_parser("conformance",
                                      help="protocol checks against a wire backend")
    conformance.add_argument("--backend-cmd", default=None,
                             help=f"backend command (default ${BACKEND_CMD_ENV})")
    conformance.add_argument("--backend-socket", type=_parse_socket, default=None)
    conformance.add_argument("--timeout", type=float, default=30.0)

    serve = commands.add_parser("serve-toy", help="serve the toy backend over the wire")
    serve.add_argument("--seed", type=int, default=0)
    serve.add_argument("--dim", type=int, default=16)
    serve.add_argument("--socket", type=int, default=None, metavar="PORT",
                       help="listen on a local socket instead of stdio")

    demo = commands.add_parser("demo", help="write the crafted toy suite to a directory")
    demo.add_argument("--out", required=True)
    demo.add_argument("--backend-seed", type=int, default=0)
    demo.add_argument("--dim", type=int, default=16)
    demo.add_argument("--image-patches", type=int, default=9)
    demo.add_argument("--count", type=int, default=10)

    return parser


def _command_run(args) -> int:
    config = Config(
        m=args.latent_tokens,
        n_iter=args.iterations,
        eta=args.eta,
        sigma_frac=args.sigma_frac,
        top_k=args.top_k,
        t_patches=args.patches,
        seed=args.seed,
        setting=args.setting,
    )
    instances = load_dataset(args.dataset)
    repo = (load_knowledge_repository(args.knowledge)
            if args.knowledge else [])

    if args.backend == "toy":
        backend = ToyBackend(seed=args.toy_seed, dim=args.toy_dim)
    else:
        backend = WireBackend(command=args.backend_cmd,
                              socket_address=args.backend_socket)
    try:
        report = run_batch(instances, repo, backend, config, args.out,
                           jobs=args.jobs,
                           render_figures=not args.no_figures)
    finally:
        if args.backend == "wire":
            backend.__exit__(None, None, None)

    print(f"instances: {len(instances)}  failures: {len(report.failures)}")
    if report.macro_average is not None:
        print(f"macro average: {report.macro_average:.2f}")
    for subtask, accuracy in report.per_subtask_accuracy.items():
        print(f"  {subtask}: {accuracy:.2f}")
    for failure in report.failures:
        print(f"FAILED {failure['instance_id']}: {failure['error']}",
              file=sys.stderr)
    print(f"report: {args.out}/report.json")
    return 1 if report.failures else 0


def _command_metrics(args) -> int:
    if args.results.endswith(".csv"):
        rows = rows_from_csv(args.results)
    else:
        rows = rows_from_report(read_report(args.results))
    report = metrics_from_rows(rows)
    print(json.dumps(report.to_json(), indent=2))
    return 0


def _command_conformance(args) -> int:
    checks = run_conformance(command=args.backend_cmd,
                             socket_address=args.backend_socket,
                             timeout=args.timeout)
    failed = 0
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        detail = f": {check.detail}" if check.detail else ""
        print(f"{status} {check.name}{detail}")
        failed += not check.passed
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


def _command_serve_toy(args) -> int:
    backend = ToyBackend(seed=args.seed, dim=args.dim)
    if args.socket is not None:
        serve_socket(backend, args.socket)
    else:
        serve_stdio(backend)
    return 0


def _command_demo(args) -> int:
    suite = build_crafted_suite(backend_seed=args.backend_seed, dim=args.dim,
                                num_patches=args.image_patches, count=args.count)
    paths = write_suite(suite, args.out)
    print(f"dataset:   {paths['dataset']}")
    print(f"knowledge: {paths['knowledge']}")
    print(f"images:    {paths['images']}")
    print("run it with:")
    print(f"  reason-iad run --dataset {paths['dataset']} "
          f"--knowledge {paths['knowledge']} --backend toy "
          f"--toy-seed {args.backend_seed} --toy-dim {args.dim} "
          f"--out {args.out}/results")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": _command_run,
        "metrics": _command_metrics,
        "conformance": _command_conformance,
        "serve-toy": _command_serve_toy,
        "demo": _command_demo,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
