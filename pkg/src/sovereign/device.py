"""Stand-alone device runner: join a home over the live UDP bus using a
home-agnostic JSON config, then act as a simple executor and, optionally,
a periodic sensor.

    python3 -m sovereign.device device.json

Config fields: device_label, token_hex, service, requested_location, and
optionally publish {content_id, payload, interval_ms}.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading

from .bootstrap import DeviceBootstrap, DeviceConfig, EntityCredentials
from .naming import content_name
from .pubsub import Entity
from .transport import Node, WallClockScheduler, udp_multicast_face

logger = logging.getLogger(__name__)


def load_device_config(path: str) -> tuple[DeviceConfig, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    config = DeviceConfig(
        device_label=raw["device_label"],
        token_hex=raw["token_hex"],
        service=raw.get("service", ""),
        requested_location=raw.get("requested_location", ""),
    )
    return config, raw


def run_device(config_path: str, group: str | None = None,
               port: int | None = None) -> int:
    config, raw = load_device_config(config_path)
    scheduler = WallClockScheduler().start()
    face_kwargs = {}
    if group:
        face_kwargs["group"] = group
    if port:
        face_kwargs["port"] = port
    face = udp_multicast_face(scheduler, label=config.device_label,
                              **face_kwargs)
    node = Node(face, scheduler)
    ready = threading.Event()
    holder: dict[str, Entity] = {}

    def on_complete(credentials: EntityCredentials) -> None:
        entity = Entity(credentials, node,
                        use_obfuscation=credentials.obfuscation_key is not None)
        holder["entity"] = entity
        print(f"joined as {credentials.name.to_uri()}", flush=True)

        entity.subscribe_command(
            lambda params, issuer, name: print(
                f"command {name.to_uri()} from {issuer.to_uri()}: "
                f"{params.decode('utf-8', 'replace')}",
                flush=True,
            )
        )
        publish = raw.get("publish")
        if publish:
            topic = content_name(
                entity.ctx, config.service, config.requested_location,
                credentials.name.components[-1].value.decode(),
                publish.get("content_id", "state"),
            )
            interval = float(publish.get("interval_ms", 5000))

            def tick() -> None:
                try:
                    entity.publish_content(
                        topic, str(publish.get("payload", "")).encode())
                except Exception as exc:
                    logger.warning("publish failed: %s", exc)
                scheduler.schedule(interval, tick)

            scheduler.schedule(interval, tick)
        ready.set()

    boot = DeviceBootstrap(node, config, on_complete=on_complete)
    scheduler.submit(boot.start)
    print(f"{config.device_label}: broadcasting hellos; approve on the "
          f"controller with this device's token", flush=True)
    try:
        while not ready.wait(timeout=1.0):
            pass
        while True:
            threading.Event().wait(60)
    except KeyboardInterrupt:
        pass
    finally:
        face.close()
        scheduler.stop()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="python -m sovereign.device",
        description="run a device against a live home over UDP multicast")
    parser.add_argument("config", help="device config JSON")
    parser.add_argument("--group", help="multicast group override")
    parser.add_argument("--port", type=int, help="multicast port override")
    args = parser.parse_args(argv)
    return run_device(args.config, args.group, args.port)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
