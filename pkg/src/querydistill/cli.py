"""Command-line interface: a thin client of the lab service.

Every subcommand builds an HTTP request and renders the response.  By
default the requests go to an in-process ASGI transport (no server needed,
fully deterministic); set ``QUERYDISTILL_SERVER`` to a base URL to target a
running ``querydistill serve`` instance instead.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import httpx

SERVER_ENV = "QUERYDISTILL_SERVER"


def _client() -> httpx.Client:
    base_url = os.environ.get(SERVER_ENV)
    if base_url:
        return httpx.Client(base_url=base_url, timeout=None)
    # in-process transport: the service runs inside this process, no server
    from starlette.testclient import TestClient

    from .service.app import app

    return TestClient(app, base_url="http://lab")


def _post(path: str, payload: dict) -> dict:
    with _client() as client:
        response = client.post(path, json=payload)
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        raise SystemExit(f"error ({response.status_code}): {detail}")
    return response.json()


def cmd_generate_data(args: argparse.Namespace) -> None:
    result = _post(
        "/datasets",
        {
            "seed": args.seed,
            "out": args.out,
            "scenes": args.scenes,
            "max_objects": args.max_objects,
            "stream": args.stream,
        },
    )
    print(
        f"wrote {result['scenes']} scenes ({result['objects']} objects) "
        f"to {result['path']}"
    )


def cmd_train(args: argparse.Namespace) -> None:
    payload = {"out": args.out, "config_path": args.config}
    result = _post("/runs", payload)
    final = result["final"]
    print(f"run dir: {result['run_dir']}")
    print(f"epochs: {result['epochs']}  wall clock: {result['wall_clock']:.1f}s")
    print(
        f"final: ap={final['ap']:.4f} ap50={final['ap50']:.4f} "
        f"consistency={final['consistency']:.4f}"
    )
    print(f"metrics: {result['metrics_csv']}")


def cmd_eval(args: argparse.Namespace) -> None:
    result = _post("/evaluations", {"checkpoint": args.checkpoint, "data": args.data})
    print(
        f"{result['kind']} checkpoint over {result['scenes']} scenes: "
        f"ap={result['ap']:.4f} ap50={result['ap50']:.4f}"
    )


def cmd_ablate(args: argparse.Namespace) -> None:
    payload = {"preset": args.preset, "seeds": args.seeds, "out": args.out}
    if args.config:
        payload["config_path"] = args.config
    result = _post("/ablations", payload)
    print(result["table"])
    print(f"written under: {result['out']}")


def cmd_gradcheck(args: argparse.Namespace) -> None:
    payload = {"n_params": args.n_params}
    if args.config:
        payload["config_path"] = args.config
    result = _post("/gradchecks", payload)
    print(
        f"loss={result['loss']:.6f}  sampled={result['n_params']}  "
        f"max rel err={result['max_rel_err']:.3e}"
    )
    if args.verbose:
        for e in result["entries"]:
            print(
                f"  {e['parameter']}[{e['index']}] analytic={e['analytic']:+.6e} "
                f"numeric={e['numeric']:+.6e} rel={e['rel_err']:.3e}"
            )
    if result["max_rel_err"] > args.tolerance:
        raise SystemExit(
            f"gradcheck failed: max rel err {result['max_rel_err']:.3e} "
            f"> tolerance {args.tolerance:.1e}"
        )


def cmd_report(args: argparse.Namespace) -> None:
    result = _post("/reports", {"runs": args.runs})
    print(result["table"])
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(result["csv"])
        print(f"csv written to {args.csv}")


def cmd_serve(args: argparse.Namespace) -> None:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="querydistill",
        description="Desk-scale online-distillation detection lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a JSONL scene dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=2000)
    p.add_argument("--max-objects", type=int, default=6)
    p.add_argument("--stream", type=int, default=0, help="0 train split, 1 val split")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config", required=True, help="path to an INI config file")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation preset over seeds")
    p.add_argument("--preset", required=True)
    p.add_argument("--seeds", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="optional base config file")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--config", default=None)
    p.add_argument("--n-params", type=int, default=32)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="aggregate finished runs into a table")
    p.add_argument("runs", nargs="+", help="run directories (each with run.json)")
    p.add_argument("--csv", default=None, help="also write plot-ready CSV here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # invariant violations exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
