"""Command-line entry points.

`sovereign` operates a home controller: initialize state, serve the HTTP
API and bus, and administer a running controller (approve bootstraps,
manage rules, rotate keys) over that API.

`sovereign-sim` runs desk-scale experiments: scripted scenarios, the
pipeline benchmark, and loss-resilience sweeps, writing delimited reports
and figures side by side.
"""

from __future__ import annotations

import argparse
import getpass
import json
import os
import random
import sys
from pathlib import Path

DEFAULT_BIND = "127.0.0.1:8736"
DEFAULT_STATE = "sovereign-state.json"


def _config(args) -> dict:
    """File config, overridden by environment, overridden by flags."""
    merged = {
        "state": DEFAULT_STATE,
        "bind": DEFAULT_BIND,
        "bus": "udp",
        "api": None,
        "passphrase": None,
        "frontend": None,
    }
    config_path = getattr(args, "config", None) or os.environ.get("SOVEREIGN_CONFIG")
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            merged.update(json.load(fh))
    for key, env in (("state", "SOVEREIGN_STATE"), ("bind", "SOVEREIGN_BIND"),
                     ("bus", "SOVEREIGN_BUS"), ("api", "SOVEREIGN_API"),
                     ("passphrase", "SOVEREIGN_PASSPHRASE"),
                     ("frontend", "SOVEREIGN_FRONTEND")):
        if os.environ.get(env):
            merged[key] = os.environ[env]
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _passphrase(config: dict) -> str:
    if config.get("passphrase"):
        return config["passphrase"]
    return getpass.getpass("controller state passphrase: ")


def _api_url(config: dict) -> str:
    if config.get("api"):
        return config["api"].rstrip("/")
    host, _, port = config["bind"].partition(":")
    return f"http://{host or '127.0.0.1'}:{port or '8736'}"


def _client(config: dict):
    import httpx

    return httpx.Client(base_url=_api_url(config), timeout=10.0)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# controller verbs
# ---------------------------------------------------------------------------

def cmd_init(args) -> int:
    from .controller import HomeController, save_state
    from .transport import BusConfig, Node, SimulatedBus, VirtualScheduler

    import time

    config = _config(args)
    path = Path(config["state"])
    if path.exists() and not args.force:
        return _fail(f"{path} exists; use --force to overwrite")
    # epoch-based clock so certificate validity lines up with live serving
    scheduler = VirtualScheduler(start_ms=time.time() * 1000.0)
    node = Node(SimulatedBus(scheduler, BusConfig()).attach("controller"),
                scheduler)  # system-entropy rng
    controller = HomeController.init_home(node, args.label,
                                          privacy=args.privacy)
    save_state(controller.state_dict(), path, _passphrase(config))
    print(f"initialized {controller.home_prefix.to_uri()} -> {path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .controller import HomeController, load_state
    from .httpapi import create_app
    from .transport import BusConfig, Node, SimulatedBus, WallClockScheduler, \
        udp_multicast_face

    config = _config(args)
    passphrase = _passphrase(config)
    state = load_state(config["state"], passphrase)
    scheduler = WallClockScheduler().start()
    if config["bus"] == "udp":
        face = udp_multicast_face(scheduler, label="controller")
    else:
        face = SimulatedBus(scheduler, BusConfig()).attach("controller")
    node = Node(face, scheduler, rng=random.Random())
    controller = HomeController(node, state)
    controller.keys.enable_auto_rotation()

    def persist(event) -> None:
        if event.kind in ("bootstrap-completed", "rule-added", "rule-removed",
                          "key-rotated"):
            from .controller import save_state
            save_state(controller.state_dict(), config["state"], passphrase)

    controller.add_event_listener(persist)
    frontend = config.get("frontend")
    if frontend is None and Path("frontend/dist").is_dir():
        frontend = "frontend/dist"
    app = create_app(controller, frontend_dir=frontend)
    host, _, port = config["bind"].partition(":")
    print(f"home {controller.home_prefix.to_uri()} on {config['bus']} bus; "
          f"api at {_api_url(config)}")
    try:
        uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8736),
                    log_level="warning")
    finally:
        scheduler.stop()
    return 0


def cmd_status(args) -> int:
    with _client(_config(args)) as client:
        response = client.get("/api/status")
        print(json.dumps(response.json(), indent=2))
    return 0 if response.status_code == 200 else 1


def cmd_approve(args) -> int:
    with _client(_config(args)) as client:
        response = client.post("/api/bootstrap/approve", json={
            "label": args.device_label, "token": args.token,
            "service": args.service, "location": args.location,
        })
    if response.status_code != 200:
        return _fail(response.text)
    print(f"approval armed for {args.device_label}: the device is named on "
          f"its next hello")
    return 0


def cmd_rule(args) -> int:
    config = _config(args)
    with _client(config) as client:
        if args.rule_verb == "list":
            listing = client.get("/api/rules").json()
            print(f"policy version {listing['policy_version']}")
            for rule in listing["rules"]:
                subject = rule["subject"]
                obj = rule["object"]
                print(f"  [{rule['id']:>3}] ({rule['origin']}) {rule['verb']} "
                      f"subject={subject} object={obj}")
            for line in listing["policies"]:
                print(f"    {line}")
            return 0
        if args.rule_verb == "rm":
            response = client.delete(f"/api/rules/{args.rule_id}")
            if response.status_code == 404:
                return _fail(f"no rule {args.rule_id}")
            print(f"removed rule {args.rule_id}; "
                  f"policy version {response.json()['policy_version']}")
            return 0
        body = {
            "verb": args.verb,
            "subject": {
                "service": args.subject_service,
                "location": args.subject_location,
                "entity": args.subject_entity,
                "name": args.subject_name,
            },
            "object": {
                "service": args.object_service,
                "resource_kind": args.object_kind,
                "location": args.object_location,
            },
        }
        response = client.post("/api/rules", json=body)
        if response.status_code != 200:
            return _fail(response.text)
        print(f"rule {response.json()['id']} added; "
              f"policy version {response.json()['policy_version']}")
    return 0


def cmd_rotate_key(args) -> int:
    # rotation is an API-side effect of rule changes too; expose it directly
    config = _config(args)
    with _client(config) as client:
        response = client.post("/api/keys/rotate", json={"scope": args.scope})
    if response.status_code != 200:
        return _fail(response.text)
    print(f"rotated {args.scope}: {response.json()}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sovereign", description="self-contained smart home controller")
    parser.add_argument("--config", help="json config file")
    parser.add_argument("--state", help=f"state file (default {DEFAULT_STATE})")
    parser.add_argument("--passphrase", "-p", help="state passphrase")
    parser.add_argument("--api", help="controller api url for admin verbs")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_init = sub.add_parser("init", help="create a new home")
    p_init.add_argument("label", help="user-chosen home label")
    p_init.add_argument("--privacy", action="store_true",
                        help="enable name obfuscation for pub/sub traffic")
    p_init.add_argument("--force", action="store_true")
    p_init.set_defaults(fn=cmd_init)

    p_serve = sub.add_parser("serve", help="run the controller and http api")
    p_serve.add_argument("--bind", help=f"host:port (default {DEFAULT_BIND})")
    p_serve.add_argument("--bus", choices=("udp", "simulated"))
    p_serve.add_argument("--frontend", help="directory with the console build")
    p_serve.set_defaults(fn=cmd_serve)

    p_status = sub.add_parser("status", help="query a running controller")
    p_status.set_defaults(fn=cmd_status)

    p_approve = sub.add_parser("approve", help="approve a device bootstrap")
    p_approve.add_argument("device_label")
    p_approve.add_argument("token", help="out-of-band token (hex)")
    p_approve.add_argument("service")
    p_approve.add_argument("location")
    p_approve.set_defaults(fn=cmd_approve)

    p_rule = sub.add_parser("rule", help="manage homeowner rules")
    rule_sub = p_rule.add_subparsers(dest="rule_verb", required=True)
    p_add = rule_sub.add_parser("add")
    p_add.add_argument("verb", choices=("produce", "decrypt"))
    p_add.add_argument("--subject-service")
    p_add.add_argument("--subject-location")
    p_add.add_argument("--subject-entity")
    p_add.add_argument("--subject-name")
    p_add.add_argument("--object-service", required=True)
    p_add.add_argument("--object-kind", required=True,
                       choices=("CMD", "CONTENT", "DKEY"))
    p_add.add_argument("--object-location")
    p_add.set_defaults(fn=cmd_rule)
    p_rm = rule_sub.add_parser("rm")
    p_rm.add_argument("rule_id", type=int)
    p_rm.set_defaults(fn=cmd_rule)
    rule_sub.add_parser("list").set_defaults(fn=cmd_rule)

    p_rotate = sub.add_parser("rotate-key", help="force a scope key rotation")
    p_rotate.add_argument("scope")
    p_rotate.set_defaults(fn=cmd_rotate_key)

    args = parser.parse_args(argv)
    return args.fn(args)


# ---------------------------------------------------------------------------
# simulator verbs
# ---------------------------------------------------------------------------

def sim_run(args) -> int:
    from .harness import run_scenario
    from .reporting import load_scenario, write_scenario_report

    name, script = load_scenario(args.script)
    runner = run_scenario(script, seed=args.seed, bus=args.bus)
    print(runner.summary())
    if args.out:
        files = write_scenario_report(runner, name, args.out)
        print("wrote " + ", ".join(str(f) for f in files))
    return 0 if runner.ok else 1


def sim_bench(args) -> int:
    from .harness import bench
    from .reporting import write_bench_report

    report = bench(iterations=args.iterations, payload_size=args.payload)
    print(report.table())
    dominant = report.dominant_category("publish")
    print(f"\ndominant publish-path category: {dominant}; "
          f"receive: {report.dominant_category('receive')}")
    if args.out:
        files = write_bench_report(report, args.out)
        print("wrote " + ", ".join(str(f) for f in files))
    return 0


def sim_loss_sweep(args) -> int:
    from .harness import loss_sweep
    from .reporting import write_sweep_report

    p_values = tuple(float(p) for p in args.p.split(","))
    rows = loss_sweep(p_values=p_values, trials=args.trials, seed=args.seed)
    for row in rows:
        print(f"p={row.loss_probability:<4} {row.kind:<8} "
              f"{row.delivered}/{row.attempts} = {row.rate:.4f}")
    if args.out:
        files = write_sweep_report(rows, args.out)
        print("wrote " + ", ".join(str(f) for f in files))
    return 0


def sim_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sovereign-sim",
        description="reproducible desk-scale experiments over virtual time")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="run a scenario script")
    p_run.add_argument("script", help="path or builtin name (e.g. ac-demo)")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--bus", choices=("simulated", "udp"),
                       default="simulated")
    p_run.add_argument("--out", help="directory for trace + results files")
    p_run.set_defaults(fn=sim_run)

    p_bench = sub.add_parser("bench", help="pipeline execution breakdown")
    p_bench.add_argument("--iterations", type=int, default=400)
    p_bench.add_argument("--payload", type=int, default=256)
    p_bench.add_argument("--out", help="directory for bench.csv + bench.png")
    p_bench.set_defaults(fn=sim_bench)

    p_sweep = sub.add_parser("loss-sweep", help="delivery rate vs loss")
    p_sweep.add_argument("--p", default="0,0.1,0.3,0.5",
                         help="comma-separated loss probabilities")
    p_sweep.add_argument("--trials", type=int, default=200)
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--out", help="directory for csv + figure")
    p_sweep.set_defaults(fn=sim_loss_sweep)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
