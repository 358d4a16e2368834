"""Command-line client for the calibration service.

All computation goes through the HTTP API; by default the service runs
in-process over an ASGI transport, so no server needs to be started.  File
reading and writing stays on the client side.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
1 anything unexpected.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys

import httpx

from .diagnostics import BoundReport, write_bound_csv
from .experiment import (
    MetricsRow,
    SummaryRow,
    read_config_file,
    read_metrics_csv,
    write_config_file,
    write_metrics_csv,
    write_summary_csv,
)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ServiceClient:
    """POSTs to a remote URL, or in-process when no URL is given."""

    def __init__(self, base_url: str | None = None) -> None:
        self.base_url = base_url

    def post(self, path: str, payload: dict) -> tuple[int, dict]:
        if self.base_url is not None:
            resp = httpx.post(self.base_url.rstrip("/") + path, json=payload, timeout=None)
            return resp.status_code, resp.json()
        return asyncio.run(self._post_inprocess(path, payload))

    async def _post_inprocess(self, path: str, payload: dict) -> tuple[int, dict]:
        from .service import create_app

        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(
            transport=transport, base_url="http://fusioncal", timeout=None
        ) as client:
            resp = await client.post(path, json=payload)
            return resp.status_code, resp.json()


def _exit_for_status(status: int, data: dict) -> int:
    detail = data.get("detail", data)
    print(f"error ({status}): {detail}", file=sys.stderr)
    if status in (400, 422):
        return EXIT_CONFIG
    if status == 500:
        return EXIT_NUMERICAL
    return EXIT_UNEXPECTED


def _scenario_payload(args: argparse.Namespace, seed: int) -> dict:
    return {
        "rows": args.rows,
        "cols": args.cols,
        "spacing": args.spacing,
        "n_objects": args.objects,
        "n_steps": args.steps,
        "sigma_n": args.sigma_n,
        "initial_speed": args.speed,
        "seed": seed,
    }


def _calibration_payload(args: argparse.Namespace) -> dict:
    return {
        "window_start": args.window_start,
        "window_length": args.window_length,
        "n_particles": args.particles,
        "n_iterations": args.iterations,
        "variant": args.variant,
    }


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rows", type=int, default=4, help="sensor grid rows")
    p.add_argument("--cols", type=int, default=4, help="sensor grid columns")
    p.add_argument("--spacing", type=float, default=1000.0, help="grid spacing (m)")
    p.add_argument("--objects", type=int, default=4, help="number of objects")
    p.add_argument("--steps", type=int, default=60, help="scenario length (steps)")
    p.add_argument("--sigma-n", type=float, default=10.0, help="measurement noise std (m)")
    p.add_argument("--speed", type=float, default=10.0, help="object speed scale (m/step)")


def _add_calibration_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window-start", type=int, default=20, help="window start step (0-based)")
    p.add_argument("--window-length", "-t", type=int, default=10, help="window length t")
    p.add_argument("--particles", "-L", type=int, default=100, help="particles per belief")
    p.add_argument("--iterations", "-S", type=int, default=16, help="message-passing rounds")
    p.add_argument(
        "--variant", choices=("quad", "dual"), default="quad", help="likelihood variant"
    )


def cmd_simulate(args: argparse.Namespace) -> int:
    client = ServiceClient(args.url)
    status, data = client.post("/simulate", _scenario_payload(args, args.seed))
    if status != 200:
        return _exit_for_status(status, data)
    with open(args.out, "w") as fh:
        json.dump(data["scenario"], fh)
    print(
        f"wrote {args.out}: {data['n_sensors']} sensors, {data['n_edges']} edges, "
        f"{args.objects} objects, {args.steps} steps"
    )
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    if args.config is not None:
        try:
            run_cfg = read_config_file(args.config)
        except (OSError, ValueError) as e:
            print(f"error: bad config file: {e}", file=sys.stderr)
            return EXIT_CONFIG
        scen = run_cfg.scenario
        payload = {
            "scenario": {
                "rows": scen.rows,
                "cols": scen.cols,
                "spacing": scen.spacing,
                "n_objects": scen.n_objects,
                "n_steps": scen.n_steps,
                "sigma_n": scen.sigma_n,
                "initial_speed": scen.initial_speed,
                "seed": 0,
            },
            "calibration": {
                "window_start": run_cfg.window_start,
                "window_length": run_cfg.window_length,
                "n_particles": run_cfg.n_particles,
                "n_iterations": run_cfg.n_iterations,
                "variant": run_cfg.variant,
            },
            "seeds": run_cfg.seeds,
            "n_workers": run_cfg.n_workers,
            "dump_beliefs": run_cfg.dump_beliefs,
        }
        output_dir = args.output_dir or run_cfg.output_dir
    else:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(
            range(args.runs)
        )
        payload = {
            "scenario": _scenario_payload(args, 0),
            "calibration": _calibration_payload(args),
            "seeds": seeds,
            "n_workers": args.workers,
            "dump_beliefs": args.dump_beliefs,
        }
        output_dir = args.output_dir

    client = ServiceClient(args.url)
    status, data = client.post("/experiment", payload)
    if status != 200:
        return _exit_for_status(status, data)

    rows = [
        MetricsRow(
            run_id=m["run_id"],
            iteration=m["iteration"],
            network_mse=m["network_mse"],
            mean_miss=m["mean_miss"],
            per_node_miss={int(k): v for k, v in m["per_node_miss"].items()},
            per_eval_ms=m["per_eval_ms"],
        )
        for m in data["rows"]
    ]
    if output_dir is not None:
        import csv
        import os

        os.makedirs(output_dir, exist_ok=True)
        write_metrics_csv(os.path.join(output_dir, "metrics.csv"), rows)
        with open(os.path.join(output_dir, "estimates.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["run_id", "seed", "iteration", "node", "est_x", "est_y", "true_x", "true_y"]
            )
            for run in data["runs"]:
                for s, per_node in enumerate(run["estimates"]):
                    for n_idx, node in enumerate(run["node_ids"]):
                        est = per_node[n_idx]
                        tru = run["true_offsets"][n_idx]
                        writer.writerow(
                            [run["run_id"], run["seed"], s + 1, node,
                             repr(est[0]), repr(est[1]), repr(tru[0]), repr(tru[1])]
                        )
        if payload["dump_beliefs"]:
            for run in data["runs"]:
                path = os.path.join(output_dir, f"beliefs_run{run['run_id']}.csv")
                with open(path, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["iteration", "node", "particle", "x", "y"])
                    for s, snap in enumerate(run["beliefs"] or []):
                        for node in sorted(snap, key=int):
                            for l, (x, y) in enumerate(snap[node]):
                                writer.writerow([s + 1, node, l, repr(x), repr(y)])
        print(f"wrote metrics and estimates under {output_dir}")
    print(
        f"{len(payload['seeds'])} runs, final mean miss "
        f"{data['final_mean_miss']:.3f} m, local filter runs {data['total_filter_runs']}"
    )
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    client = ServiceClient(args.url)
    payload = {
        "n_instances": args.instances,
        "base_seed": args.seed,
        "horizon": args.horizon,
    }
    status, data = client.post("/diagnose", payload)
    if status != 200:
        return _exit_for_status(status, data)
    if args.out is not None:
        reports = [
            BoundReport(
                seed=r["seed"],
                step=r["step"],
                d_p_q=r["d_p_q"],
                d_p_u=r["d_p_u"],
                mi_bound=r["mi_bound"],
                entropy_bound=r["entropy_bound"],
                e_log_kappa=r["e_log_kappa"],
            )
            for r in data["reports"]
        ]
        write_bound_csv(args.out, reports)
        print(f"wrote {args.out}")
    print(
        f"{len(data['reports'])} instances: chains ok = {data['all_chains_ok']}, "
        f"quad beats dual in {100 * data['quad_beats_dual_fraction']:.1f}%"
    )
    return EXIT_OK if data["all_chains_ok"] else EXIT_NUMERICAL


def cmd_summarize(args: argparse.Namespace) -> int:
    try:
        rows = read_metrics_csv(args.metrics)
    except OSError as e:
        print(f"error: cannot read metrics: {e}", file=sys.stderr)
        return EXIT_CONFIG
    payload = {
        "rows": [
            {
                "run_id": r.run_id,
                "iteration": r.iteration,
                "network_mse": r.network_mse,
                "mean_miss": r.mean_miss,
                "per_node_miss": r.per_node_miss,
                "per_eval_ms": r.per_eval_ms,
            }
            for r in rows
        ]
    }
    client = ServiceClient(args.url)
    status, data = client.post("/summarize", payload)
    if status != 200:
        return _exit_for_status(status, data)
    summary = [SummaryRow(**s) for s in data["summary"]]
    if args.out is not None:
        write_summary_csv(args.out, summary)
        print(f"wrote {args.out}")
    print(f"{'iter':>4} {'runs':>4} {'miss median':>12} {'q1':>10} {'q3':>10}")
    for s in summary:
        print(
            f"{s.iteration:>4} {s.n_runs:>4} {s.miss_median:>12.3f} "
            f"{s.miss_q1:>10.3f} {s.miss_q3:>10.3f}"
        )
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def cmd_write_config(args: argparse.Namespace) -> int:
    from .experiment import RunConfig

    write_config_file(args.out, RunConfig())
    print(f"wrote default config to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusioncal",
        description="Sensor-network offset calibration from shared object tracks.",
    )
    parser.add_argument(
        "--url",
        default=None,
        help="service base URL; omitted means run the service in-process",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a scenario and write it as JSON")
    _add_scenario_flags(p)
    p.add_argument("--seed", type=int, default=0, help="scenario seed")
    p.add_argument("--out", default="scenario.json", help="output path")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("calibrate", help="run Monte Carlo calibration batches")
    _add_scenario_flags(p)
    _add_calibration_flags(p)
    p.add_argument("--runs", type=int, default=25, help="number of runs (seeds 0..n-1)")
    p.add_argument("--seeds", default=None, help="comma-separated explicit seeds")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--output-dir", default=None, help="directory for CSV artifacts")
    p.add_argument(
        "--dump-beliefs", action="store_true", help="also write particle clouds"
    )
    p.add_argument("--config", default=None, help="key-value config file (overrides flags)")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("diagnose", help="verify divergence bounds on random instances")
    p.add_argument("--instances", type=int, default=100, help="number of instances")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--horizon", type=int, default=6, help="steps per instance")
    p.add_argument("--out", default=None, help="bounds CSV path")
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("summarize", help="aggregate a metrics CSV into quartile curves")
    p.add_argument("metrics", help="metrics.csv produced by calibrate")
    p.add_argument("--out", default=None, help="summary CSV path")
    p.set_defaults(fn=cmd_summarize)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("write-config", help="write a documented default config file")
    p.add_argument("--out", default="fusioncal.cfg", help="config path")
    p.set_defaults(fn=cmd_write_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except httpx.HTTPError as e:
        print(f"error: transport failure: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
