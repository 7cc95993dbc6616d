"""mr-fleet: run scenarios, audit determinism, plot trajectories, serve the bridge.

`run` executes locally by default; pass --server to submit the scenario to a
running service instead (the CLI then acts as a thin REST client).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path


def _cmd_run(args) -> int:
    from .scenario.config import ConfigInvalidError, load_config, load_template

    try:
        path = Path(args.config)
        config = load_config(path=path) if path.exists() else load_template(args.config)
    except ConfigInvalidError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2

    if args.server:
        return _submit_remote(args, config)

    from .scenario.runner import run_scenario

    metrics = run_scenario(
        config,
        seed=args.seed,
        log_dir=args.log_dir,
        progress=not args.headless,
    )
    summary = metrics.summary()
    print(json.dumps(summary, indent=2))
    print(f"logs: {metrics.log_dir}")
    return 0


def _submit_remote(args, config) -> int:
    import urllib.request

    body = {
        "config_toml": Path(args.config).read_text()
        if Path(args.config).exists()
        else None,
        "template": None if Path(args.config).exists() else args.config,
        "seed": args.seed,
        "log_dir": args.log_dir,
    }
    base = args.server.rstrip("/")

    def post(path, payload):
        req = urllib.request.Request(
            base + path,
            data=json.dumps(payload).encode(),
            headers={"content-type": "application/json"},
        )
        with urllib.request.urlopen(req) as resp:
            return json.loads(resp.read())

    def get(path):
        with urllib.request.urlopen(base + path) as resp:
            return json.loads(resp.read())

    run_id = post("/runs", body)["run_id"]
    print(f"submitted run {run_id}")
    while True:
        status = get(f"/runs/{run_id}")
        if status["state"] != "running":
            break
        time.sleep(1.0)
    print(json.dumps(status, indent=2))
    return 0 if status["state"] == "finished" else 1


def _cmd_replay_check(args) -> int:
    from .scenario.replay import replay_check

    result = replay_check(args.log_a, args.log_b)
    print(result)
    return 0 if result.equal else 1


def _cmd_plot(args) -> int:
    from .scenario.plotting import plot_run

    out = plot_run(args.log_dir, args.output)
    print(f"wrote {out}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    app = create_app()
    app.state.ws_url = f"ws://{args.host}:{args.port}/"
    uvicorn.run(app, host=args.host, port=args.port, log_level="info", ws="websockets-sansio")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mr-fleet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario (local or via --server)")
    run.add_argument("--config", required=True, help="TOML file or bundled template name")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--log-dir", default=None)
    run.add_argument("--headless", action="store_true", help="suppress progress output")
    run.add_argument("--server", default=None, help="submit to a running service URL")
    run.set_defaults(func=_cmd_run)

    replay = sub.add_parser("replay-check", help="byte-compare two run message logs")
    replay.add_argument("log_a")
    replay.add_argument("log_b")
    replay.set_defaults(func=_cmd_replay_check)

    plot = sub.add_parser("plot", help="emit an SVG trajectory plot for a run")
    plot.add_argument("--log-dir", required=True)
    plot.add_argument("--output", default=None)
    plot.set_defaults(func=_cmd_plot)

    serve = sub.add_parser("serve", help="run the bridge service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=9090)
    serve.set_defaults(func=_cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
