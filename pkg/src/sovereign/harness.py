"""Reproducible desk-scale experiments over virtual time: scripted
multi-device scenarios (bootstrap, rules, timed actions, expectations),
crypto/pipeline micro-benchmarks, and loss-resilience sweeps.

Scenario scripts are line-oriented: one directive per line, `#` comments.

    home alice
    bus loss=0.0 latency=fixed:5
    store
    entity senor-1 service=TEMP location=bedroom kind=temp-sensor \
        readings=74.5,75.0,71.2 interval=2000
    rule decrypt subject=AirCon@bedroom object=TEMP:DKEY
    at 4000 command app-1 Window@bedroom close {}
    expect actuated window-1 close >=1
    run 20000
"""

from __future__ import annotations

import random
import statistics
import time
from dataclasses import dataclass, field

from . import crypto
from .bootstrap import BootstrapState, DeviceBootstrap, DeviceConfig, \
    EntityCredentials
from .controller import HomeController
from .keystore import ReplayStore
from .naming import CMD, CONTENT, DKEY, EKEY, NamingContext, content_name, \
    command_name, entity_name, key_name, materialize
from .policy import Policy, PolicySet, RuleForm, check_produce
from .pubsub import Entity, PublishedItem, Topic
from .tlv import DataPacket, Name, SignatureInfo, SIG_ECDSA_SHA256, T_DATA, \
    decode_packet
from .transport import BusConfig, Node, SimulatedBus, VirtualScheduler, \
    WallClockScheduler, udp_multicast_face

BOOTSTRAP_WINDOW_MS = 2000
# Sweep defaults, sized against the two-leg loss model: a fetch attempt
# succeeds only if both the Interest and the Data survive, so per-trial
# success is 1-(1-(1-p)^2)^(budget+1); budget 7 clears 99% at p=0.3 with
# margin. Command executors additionally ride notification redundancy and
# overhearing of answers meant for their peers, but the budget still has to
# carry an executor that missed the initial broadcast on its own.
SWEEP_CONTENT_BUDGET = 7
SWEEP_NOTIFICATION_REDUNDANCY = 4
SWEEP_COMMAND_BUDGET = 8

BENCH_CATEGORIES = ("ecdsa", "aes-cbc", "policy-check", "encode-decode",
                    "other-crypto")


class ScenarioError(ValueError):
    """Malformed scenario script."""


class AssertionFailed(AssertionError):
    """An `expect` line did not hold; carries a trace excerpt."""


# ---------------------------------------------------------------------------
# device behaviors (minimal demo stand-ins)
# ---------------------------------------------------------------------------

@dataclass
class DeviceState:
    label: str
    kind: str
    params: dict
    entity: Entity | None = None
    deliveries: list = field(default_factory=list)
    actuations: list = field(default_factory=list)
    published: int = 0
    fetch_results: list = field(default_factory=list)
    state: dict = field(default_factory=dict)

    def record_actuation(self, params: bytes, issuer: Name, name: Name) -> None:
        comps = [c.value.decode("utf-8", "replace") for c in name.components]
        try:
            cmd_id = comps[comps.index(CMD) + 1]
        except (ValueError, IndexError):
            cmd_id = comps[-1]
        self.actuations.append((cmd_id, params, issuer.to_uri()))
        self.state[cmd_id] = self.state.get(cmd_id, 0) + 1
        self.state["last-command"] = cmd_id

    def actuation_count(self, cmd_id: str | None = None) -> int:
        if cmd_id is None:
            return len(self.actuations)
        return sum(1 for c, _, _ in self.actuations if c == cmd_id)


def _parse_params(tokens: list[str]) -> dict:
    params = {}
    for token in tokens:
        if "=" not in token:
            raise ScenarioError(f"expected key=value, got {token!r}")
        key, value = token.split("=", 1)
        params[key] = value
    return params


class ScenarioRunner:
    """Builds a home from a script and runs its timeline over virtual time."""

    def __init__(self, script: str, seed: int = 0, bus: str = "simulated",
                 key_lifetime_ms: float = 60_000):
        self.script = script
        self.seed = seed
        self.bus_mode = bus
        self.key_lifetime_ms = key_lifetime_ms
        self.devices: dict[str, DeviceState] = {}
        self.expectations: list[tuple[int, str]] = []
        self.failures: list[str] = []
        self.results: list[tuple[str, bool, str]] = []
        self.run_ms = 0.0
        self._actions: list[tuple[float, int, list[str]]] = []
        self._rules: list[tuple[int, list[str]]] = []
        self._privacy = False
        self._with_store = False
        self._home_label = "home"
        self._bus_config = BusConfig(seed=seed)
        self._parse()

    # -- parsing -------------------------------------------------------------

    def _parse(self) -> None:
        for lineno, raw in enumerate(self.script.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            head = tokens[0]
            if head == "home":
                self._home_label = tokens[1]
            elif head == "privacy":
                self._privacy = tokens[1] == "on"
            elif head == "store":
                self._with_store = True
            elif head == "bus":
                params = _parse_params(tokens[1:])
                latency = BusConfig.parse_latency(params.get("latency", "fixed:5"))
                self._bus_config = BusConfig(
                    loss_probability=float(params.get("loss", "0")),
                    latency=latency, seed=self.seed,
                )
            elif head == "key-lifetime":
                self.key_lifetime_ms = float(tokens[1])
            elif head == "entity":
                label = tokens[1]
                params = _parse_params(tokens[2:])
                kind = params.pop("kind", "executor")
                if "service" not in params or "location" not in params:
                    raise ScenarioError(f"line {lineno}: entity needs service= and location=")
                self.devices[label] = DeviceState(label, kind, params)
            elif head == "rule":
                self._rules.append((lineno, tokens[1:]))
            elif head == "at":
                self._actions.append((float(tokens[1]), lineno, tokens[2:]))
            elif head == "expect":
                self.expectations.append((lineno, " ".join(tokens[1:])))
            elif head == "run":
                self.run_ms = max(self.run_ms, float(tokens[1]))
            else:
                raise ScenarioError(f"line {lineno}: unknown directive {head!r}")
        if self.run_ms <= 0:
            raise ScenarioError("script needs a final `run <ms>` directive")

    def _parse_rule(self, tokens: list[str]) -> RuleForm:
        verb = tokens[0]
        params = _parse_params(tokens[1:])
        form = {"verb": verb, "subject": {}, "object": {}}
        subject = params.get("subject", "")
        if subject.startswith("name:"):
            form["subject"]["name"] = subject[len("name:"):]
        elif subject:
            svc, _, rest = subject.partition("@")
            form["subject"]["service"] = svc or None
            if rest:
                loc, _, ent = rest.partition("/")
                form["subject"]["location"] = loc
                if ent:
                    form["subject"]["entity"] = ent
        obj = params.get("object", "")
        svc, _, kind_loc = obj.partition(":")
        kind, _, loc = kind_loc.partition("@")
        form["object"] = {"service": svc, "resource_kind": kind,
                          "location": loc or None}
        return RuleForm.from_dict(form)

    # -- building ------------------------------------------------------------

    def _build(self) -> None:
        if self.bus_mode == "udp":
            self.scheduler = WallClockScheduler().start()
        else:
            self.scheduler = VirtualScheduler()
        self.bus = SimulatedBus(self.scheduler, self._bus_config)
        self.controller = HomeController.init_home(
            self._node("controller"), self._home_label,
            privacy=self._privacy, key_lifetime_ms=self.key_lifetime_ms,
        )
        self.home = self.controller.home_prefix
        if self._with_store:
            store_entity = self._bootstrap("store-1", "STORE", "utility")
            ReplayStore(store_entity.node, self.home,
                        self.controller.anchor_cert.public_bytes)
        for label, device in self.devices.items():
            device.entity = self._bootstrap(
                label, device.params["service"], device.params["location"]
            )
            self._attach_behavior(device)
        for lineno, tokens in self._rules:
            self.controller.add_rule(self._parse_rule(tokens))
        self._settle(50)  # let rule containers and key pushes land
        for due, lineno, tokens in self._actions:
            self.scheduler.schedule(
                max(0.0, due - self.scheduler.now_ms),
                lambda t=tokens, n=lineno: self._run_action(n, t),
            )

    def _settle(self, ms: float) -> None:
        if isinstance(self.scheduler, VirtualScheduler):
            self.scheduler.run_for(ms)
        else:
            time.sleep(ms / 1000.0)

    def _node(self, label: str) -> Node:
        if self.bus_mode == "udp":
            face = udp_multicast_face(self.scheduler, label=label)
        else:
            face = self.bus.attach(label)
        return Node(face, self.scheduler,
                    rng=random.Random(f"{self.seed}:{label}"))

    def _bootstrap(self, label: str, service: str, location: str) -> Entity:
        node = self._node(label)
        token = crypto.hmac_sha256(
            f"{self.seed}".encode(), label.encode())[:16].hex()
        boot = DeviceBootstrap(node, DeviceConfig(label, token, service, location))
        self.controller.approve_bootstrap(label, token, service, location)
        boot.start()
        deadline = self.scheduler.now_ms + 10 * BOOTSTRAP_WINDOW_MS
        while boot.state is not BootstrapState.CERTIFIED:
            if self.scheduler.now_ms >= deadline:
                raise AssertionFailed(f"{label} failed to bootstrap")
            self._settle(100)
        return Entity(boot.credentials, node,
                      use_obfuscation=boot.credentials.obfuscation_key is not None)

    # -- behaviors -------------------------------------------------------------

    def _attach_behavior(self, device: DeviceState) -> None:
        entity = device.entity
        kind = device.kind
        params = device.params
        service = params["service"]
        location = params["location"]

        if kind in ("executor", "window", "lock", "switch", "light"):
            entity.subscribe_command(
                lambda p, issuer, name, d=device: d.record_actuation(p, issuer, name)
            )
        elif kind == "temp-sensor":
            readings = [x for x in params.get("readings", "70").split(",")]
            interval = float(params.get("interval", "2000"))
            topic = content_name(entity.ctx, service, location, device.label,
                                 params.get("content-id", "temp"))

            def tick(index: int = 0) -> None:
                value = readings[min(index, len(readings) - 1)]
                try:
                    entity.publish_content(topic, value.encode())
                    device.published += 1
                except Exception as exc:
                    device.state["publish-error"] = str(exc)
                if index + 1 < len(readings) or params.get("repeat") == "on":
                    self.scheduler.schedule(interval, lambda: tick(index + 1))

            self.scheduler.schedule(float(params.get("start", "500")), tick)
        elif kind == "contact-sensor":
            topic = content_name(entity.ctx, service, location, device.label,
                                 params.get("content-id", "state"))
            for at in params.get("times", "1000").split(","):
                self.scheduler.schedule(
                    float(at),
                    lambda: (entity.publish_content(
                        topic, params.get("payload", "touched").encode()),
                        device.state.__setitem__("touched", True)),
                )
        elif kind == "thermostat":
            setpoint = float(params.get("setpoint", "72"))
            target_service = params.get("target-service", "Window")
            target_scope = params.get("target-scope", location)
            command = params.get("command", "close")
            watch = entity.ctx.home_prefix.append(
                params.get("watch-service", "TEMP"), CONTENT, location)

            def on_reading(plaintext: bytes, producer: Name, name: Name) -> None:
                device.deliveries.append(plaintext)
                try:
                    reading = float(plaintext)
                except ValueError:
                    return
                running = reading > setpoint
                was_running = device.state.get("running", False)
                device.state["running"] = running
                if running and not was_running:
                    topic = command_name(entity.ctx, target_service,
                                         target_scope.split("/") if target_scope else [],
                                         command)
                    try:
                        entity.publish_command(topic, b'{"reason": "auto"}')
                        device.published += 1
                    except Exception as exc:
                        device.state["publish-error"] = str(exc)

            entity.subscribe_content(watch, on_reading,
                                     poll_interval_ms=float(params.get("poll", "1000")))
        elif kind == "automation":
            watch_service = params.get("watch-service", "Contact")
            watch_location = params.get("watch-location", location)
            trigger = params.get("trigger", "touched").encode()
            target_service = params.get("target-service", "Switch")
            target_scope = params.get("target-scope", watch_location)
            command = params.get("command", "switch-on")
            watch = entity.ctx.home_prefix.append(watch_service, CONTENT,
                                                  watch_location)

            def on_event(plaintext: bytes, producer: Name, name: Name) -> None:
                device.deliveries.append(plaintext)
                if plaintext != trigger:
                    return
                topic = command_name(entity.ctx, target_service,
                                     target_scope.split("/") if target_scope else [],
                                     command)
                try:
                    entity.publish_command(topic,
                                           params.get("payload", "on").encode())
                    device.published += 1
                except Exception as exc:
                    device.state["publish-error"] = str(exc)

            entity.subscribe_content(watch, on_event,
                                     poll_interval_ms=float(params.get("poll", "1000")))
        elif kind == "subscriber":
            watch = Name.from_uri(params["watch"].replace("~", self.home.to_uri()))
            entity.subscribe_content(
                watch,
                lambda p, producer, name, d=device: d.deliveries.append(p),
                poll_interval_ms=float(params.get("poll", "1000")),
            )
        elif kind in ("app", "rogue"):
            pass  # driven purely by timed actions
        else:
            raise ScenarioError(f"unknown device kind {kind!r}")

    # -- timed actions ----------------------------------------------------------

    def _device(self, label: str) -> DeviceState:
        try:
            return self.devices[label]
        except KeyError:
            raise ScenarioError(f"unknown entity {label!r}") from None

    def _command_topic(self, spec: str, cmd_id: str) -> Name:
        service, _, scope = spec.partition("@")
        scope_parts = [p for p in scope.split("/") if p] if scope else []
        return command_name(NamingContext(self.home), service, scope_parts, cmd_id)

    def _run_action(self, lineno: int, tokens: list[str]) -> None:
        verb = tokens[0]
        try:
            if verb == "publish":
                device = self._device(tokens[1])
                topic = content_name(
                    device.entity.ctx, device.params["service"],
                    device.params["location"], tokens[1], tokens[2],
                )
                device.entity.publish_content(topic, " ".join(tokens[3:]).encode())
                device.published += 1
            elif verb == "command":
                device = self._device(tokens[1])
                topic = self._command_topic(tokens[2], tokens[3])
                device.entity.publish_command(topic, " ".join(tokens[4:]).encode())
                device.published += 1
            elif verb == "rogue-command":
                device = self._device(tokens[1])
                topic = self._command_topic(tokens[2], tokens[3])
                self._forge_command(device, topic, " ".join(tokens[4:]).encode())
            elif verb == "controller-command":
                topic = self._command_topic(tokens[1], tokens[2])
                self.controller.issue_command(topic.to_uri(),
                                              " ".join(tokens[3:]).encode())
            elif verb == "offline":
                if tokens[1] == "controller":
                    self.controller.node.face.close()
                else:
                    self._device(tokens[1]).entity.node.face.close()
            elif verb == "rotate-key":
                self.controller.rotate_key(tokens[1])
            elif verb == "add-rule":
                self.controller.add_rule(self._parse_rule(tokens[1:]))
            elif verb == "remove-rule":
                form = self._parse_rule(tokens[1:])
                for stored in list(self.controller.rules):
                    if stored.form == form:
                        self.controller.remove_rule(stored.rule_id)
                        return
                raise ScenarioError(f"no rule matching {' '.join(tokens[1:])}")
            elif verb == "fetch-key":
                device = self._device(tokens[1])
                base = key_name(device.entity.ctx, tokens[2], DKEY)
                device.entity.keys.fetch(
                    base, lambda ok, d=device: d.fetch_results.append(ok))
            else:
                raise ScenarioError(f"unknown action {verb!r}")
        except ScenarioError:
            raise
        except Exception as exc:
            self.failures.append(f"line {lineno}: action failed: {exc}")

    def _forge_command(self, device: DeviceState, topic: Name, payload: bytes) -> None:
        """A compromised device signs a command it has no produce right for,
        encrypting with whatever key it holds."""
        entity = device.entity
        held = entity.keys.holdings()
        if not held:
            raise ScenarioError(f"{device.label} holds no key to forge with")
        key = held[0]
        name = materialize(topic, int(self.scheduler.now_ms), key.version)
        locator = crypto.identity_key_name(entity.name,
                                           entity.credentials.keypair.public_bytes)
        unsigned = DataPacket(name, crypto.encrypt(key, payload, rng=entity.rng),
                              2000, SignatureInfo(SIG_ECDSA_SHA256, locator))
        data = unsigned.with_signature(
            crypto.sign(entity.credentials.keypair, unsigned.signed_portion()))
        ring = entity._published.setdefault(topic.components, [])
        ring.append(PublishedItem(data, Topic(topic, "command"), payload,
                                  self.scheduler.now_ms))
        entity._ensure_producer(topic, "command")
        entity.node.announce(data.name)
        device.published += 1

    # -- expectations -------------------------------------------------------------

    @staticmethod
    def _compare(op: str, actual: float) -> bool:
        symbol = op[:2] if op[:2] in ("==", ">=", "<=") else op[0]
        value = float(op[len(symbol):])
        return {"==": actual == value, ">=": actual >= value,
                "<=": actual <= value}[symbol]

    def _check_expectation(self, text: str) -> tuple[bool, str]:
        tokens = text.split()
        kind = tokens[0]
        if kind == "actuated":
            device = self._device(tokens[1])
            count = device.actuation_count(tokens[2])
            return self._compare(tokens[3], count), f"actuations={count}"
        if kind == "delivered":
            device = self._device(tokens[1])
            count = len(device.deliveries)
            return self._compare(tokens[2], count), f"deliveries={count}"
        if kind == "published":
            device = self._device(tokens[1])
            return self._compare(tokens[2], device.published), \
                f"published={device.published}"
        if kind == "dropped":
            device = self._device(tokens[1])
            count = device.entity.counters.get(tokens[2], 0)
            return self._compare(tokens[3], count), f"{tokens[2]}={count}"
        if kind == "state":
            device = self._device(tokens[1])
            actual = str(device.state.get(tokens[2]))
            return actual == tokens[3], f"{tokens[2]}={actual}"
        if kind == "renewed":
            device = self._device(tokens[1])
            base = key_name(device.entity.ctx, tokens[2], DKEY)
            versions = device.entity.keys._keys.get(base.components, {})
            return len(versions) >= 2, f"versions={sorted(versions)}"
        if kind == "fetch-ok":
            device = self._device(tokens[1])
            ok = bool(device.fetch_results) and device.fetch_results[-1]
            return ok, f"fetches={device.fetch_results}"
        if kind == "event":
            count = sum(1 for e in self.controller.events if e.kind == tokens[1])
            return self._compare(tokens[2], count), f"{tokens[1]}={count}"
        if kind == "data-sends":
            name = Name.from_uri(tokens[1].replace("~", self.home.to_uri()))
            count = sum(
                1 for e in self.bus.trace
                if e.kind == "send" and e.ptype == T_DATA
                and name.is_prefix_of(e.name)
            )
            return self._compare(tokens[2], count), f"data-sends={count}"
        raise ScenarioError(f"unknown expectation {kind!r}")

    # -- run ---------------------------------------------------------------------

    def run(self) -> "ScenarioRunner":
        self._build()
        if self.bus_mode == "udp":
            deadline = time.time() + self.run_ms / 1000.0
            while time.time() < deadline:
                time.sleep(0.05)
            self.scheduler.stop()
        else:
            self.scheduler.run_until(self.run_ms)
        for lineno, text in self.expectations:
            try:
                ok, detail = self._check_expectation(text)
            except ScenarioError as exc:
                ok, detail = False, str(exc)
            self.results.append((text, ok, detail))
            if not ok:
                self.failures.append(
                    f"line {lineno}: expect {text} failed ({detail})"
                )
        return self

    @property
    def ok(self) -> bool:
        return not self.failures

    def assert_ok(self) -> None:
        if self.failures:
            excerpt = "\n".join(e.line() for e in self.bus.trace[-25:])
            raise AssertionFailed(
                "\n".join(self.failures) + "\n-- trace tail --\n" + excerpt
            )

    def summary(self) -> str:
        lines = [
            f"scenario: {self._home_label} seed={self.seed} "
            f"bus={self.bus_mode} ran {self.run_ms:.0f} ms "
            f"({len(self.bus.trace)} bus events)"
        ]
        for text, ok, detail in self.results:
            lines.append(f"  [{'PASS' if ok else 'FAIL'}] expect {text} ({detail})")
        for failure in self.failures:
            if failure.startswith("line") and "action failed" in failure:
                lines.append(f"  [FAIL] {failure}")
        return "\n".join(lines)


def run_scenario(script: str, seed: int = 0, bus: str = "simulated",
                 **kw) -> ScenarioRunner:
    return ScenarioRunner(script, seed=seed, bus=bus, **kw).run()


# ---------------------------------------------------------------------------
# benchmark (publish / receive pipeline breakdown)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchRow:
    path: str  # publish | receive | keying
    category: str
    median_us: float
    p10_us: float
    p90_us: float


@dataclass
class BenchReport:
    payload_size: int
    iterations: int
    rows: list[BenchRow]

    def categories(self) -> set[str]:
        return {row.category for row in self.rows}

    def row(self, path: str, category: str) -> BenchRow:
        for row in self.rows:
            if row.path == path and row.category == category:
                return row
        raise KeyError((path, category))

    def dominant_category(self, path: str) -> str:
        rows = [r for r in self.rows if r.path == path]
        return max(rows, key=lambda r: r.median_us).category

    def table(self) -> str:
        lines = [f"{'path':<8} {'category':<14} {'median µs':>10} "
                 f"{'p10 µs':>10} {'p90 µs':>10}"]
        for row in self.rows:
            lines.append(f"{row.path:<8} {row.category:<14} "
                         f"{row.median_us:>10.1f} {row.p10_us:>10.1f} "
                         f"{row.p90_us:>10.1f}")
        return "\n".join(lines)


def _percentiles(samples_ns: list[int]) -> tuple[float, float, float]:
    ordered = sorted(samples_ns)
    n = len(ordered)
    median = statistics.median(ordered) / 1000.0
    p10 = ordered[max(0, int(0.10 * n) - 1)] / 1000.0
    p90 = ordered[min(n - 1, int(0.90 * n))] / 1000.0
    return median, p10, p90


def bench(iterations: int = 400, payload_size: int = 256,
          seed: int = 7) -> BenchReport:
    """Per-category timings of the publish and receive pipelines.

    Categories follow the runtime's operation classes: asymmetric signing
    and verification, symmetric payload encryption, policy checking, wire
    coding, and the pairwise key agreement used for key delivery.
    """
    rng = random.Random(seed)
    home = Name.of("bench-home")
    ctx = NamingContext(home)
    producer = crypto.generate_keypair(rng)
    consumer = crypto.generate_keypair(rng)
    producer_name = entity_name(ctx, "TEMP", "bedroom", "senor-1")
    policies = PolicySet(
        tuple(
            Policy.from_line(line)
            for line in (
                "/bench-home/AUTO/controller | produce | /bench-home/<>/<>*/CMD",
                "/bench-home/TEMP | produce | /bench-home/TEMP/CONTENT",
                "/bench-home/AirCon/bedroom | decrypt | /bench-home/TEMP/DKEY",
                "/bench-home/Light | produce | /bench-home/Light/CONTENT",
            )
        ),
        version=1,
    )
    ekey = crypto.SymmetricKey(key_name(ctx, "TEMP", EKEY),
                               crypto.random_bytes(32, rng), 1, 10**15)
    locator = crypto.identity_key_name(producer_name, producer.public_bytes)
    payload = crypto.random_bytes(payload_size, rng)
    base = content_name(ctx, "TEMP", "bedroom", "senor-1", "temp")

    samples: dict[tuple[str, str], list[int]] = {}

    def measure(path: str, category: str, fn):
        t0 = time.perf_counter_ns()
        result = fn()
        samples.setdefault((path, category), []).append(
            time.perf_counter_ns() - t0)
        return result

    for i in range(iterations):
        name = materialize(base, i, ekey.version)
        measure("publish", "policy-check",
                lambda: check_produce(policies, producer_name, name))
        ciphertext = measure("publish", "aes-cbc",
                             lambda: crypto.encrypt(ekey, payload, rng=rng))
        unsigned = DataPacket(name, ciphertext, 2000,
                              SignatureInfo(SIG_ECDSA_SHA256, locator))
        portion = unsigned.signed_portion()
        signature = measure("publish", "ecdsa",
                            lambda: crypto.sign(producer, portion))
        data = unsigned.with_signature(signature)
        wire = measure("publish", "encode-decode", data.encode)

        received = measure("receive", "encode-decode",
                           lambda: decode_packet(wire))
        measure("receive", "ecdsa",
                lambda: crypto.verify(producer.public_bytes,
                                      received.signed_portion(),
                                      received.sig_value))
        measure("receive", "policy-check",
                lambda: check_produce(policies, producer_name, received.name))
        measure("receive", "aes-cbc",
                lambda: crypto.decrypt(ekey, received.content))
        measure("keying", "other-crypto",
                lambda: crypto.derive_pairwise_secret(producer,
                                                      consumer.public_bytes))

    rows = []
    for (path, category), values in samples.items():
        median, p10, p90 = _percentiles(values)
        rows.append(BenchRow(path, category, median, p10, p90))
    rows.sort(key=lambda r: (r.path, -r.median_us))
    return BenchReport(payload_size, iterations, rows)


# ---------------------------------------------------------------------------
# loss-resilience sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    loss_probability: float
    kind: str  # content | command
    delivered: int
    attempts: int

    @property
    def rate(self) -> float:
        return self.delivered / self.attempts if self.attempts else 0.0


class _SweepFixture:
    """Identities, certificates, keys and policies reused across trials so
    each trial only pays for the packets themselves."""

    def __init__(self, seed: int):
        rng = random.Random(seed)
        self.home = Name.of("sweep-home")
        self.ctx = NamingContext(self.home)
        self.anchor = crypto.generate_keypair(rng)
        self.anchor_cert = crypto.issue_certificate(
            self.anchor, self.home, self.home, self.anchor.public_bytes,
            not_after=10**15, issued_at=0)
        secret = crypto.random_bytes(32, rng)
        self.ekey = crypto.SymmetricKey(key_name(self.ctx, "TEMP", EKEY),
                                        secret, 1, 10**15)
        self.dkey = crypto.SymmetricKey(key_name(self.ctx, "TEMP", DKEY),
                                        secret, 1, 10**15)
        self.policies = PolicySet(
            (
                Policy.from_line(
                    "/sweep-home/TEMP | produce | /sweep-home/TEMP/CONTENT"),
                Policy.from_line(
                    "/sweep-home/TEMP | produce | /sweep-home/Light/<>*/CMD"),
                Policy.from_line(
                    "/sweep-home/Light | decrypt | /sweep-home/Light/DKEY"),
            ),
            version=1,
        )
        light_secret = crypto.random_bytes(32, rng)
        self.light_ekey = crypto.SymmetricKey(
            key_name(self.ctx, "Light", EKEY), light_secret, 1, 10**15)
        self.light_dkey = crypto.SymmetricKey(
            key_name(self.ctx, "Light", DKEY), light_secret, 1, 10**15)
        self.creds: dict[str, EntityCredentials] = {}
        for label, service, location, keys in (
            ("publisher", "TEMP", "bedroom", [self.ekey, self.light_ekey]),
            ("consumer-1", "Light", "kitchen", [self.dkey, self.light_dkey]),
            ("consumer-2", "Light", "kitchen", [self.dkey, self.light_dkey]),
            ("consumer-3", "Light", "kitchen", [self.dkey, self.light_dkey]),
        ):
            keypair = crypto.generate_keypair(rng)
            name = entity_name(self.ctx, service, location, label)
            cert = crypto.issue_certificate(self.anchor, self.home, name,
                                            keypair.public_bytes,
                                            not_after=10**15, issued_at=0)
            self.creds[label] = EntityCredentials(
                name=name, keypair=keypair, certificate=cert,
                anchor_certificate=self.anchor_cert,
                pairwise_secret=crypto.random_bytes(32, rng),
                policies=self.policies, keys=list(keys),
            )

    def entity(self, label: str, bus: SimulatedBus, scheduler,
               trial: int) -> Entity:
        node = Node(bus.attach(label), scheduler,
                    rng=random.Random(f"{trial}:{label}"))
        entity = Entity(self.creds[label], node)
        return entity


def _preload_certs(entities: list[Entity], fixture: _SweepFixture) -> None:
    # steady-state assumption: producer certificates were already fetched
    for entity in entities:
        for creds in fixture.creds.values():
            locator = crypto.identity_key_name(creds.name,
                                               creds.keypair.public_bytes)
            entity._certs[locator.components] = creds.certificate


def _content_trial(fixture: _SweepFixture, loss: float, trial: int,
                   budget: int) -> bool:
    scheduler = VirtualScheduler()
    bus = SimulatedBus(scheduler, BusConfig(loss_probability=loss, seed=trial))
    publisher = fixture.entity("publisher", bus, scheduler, trial)
    consumer = fixture.entity("consumer-1", bus, scheduler, trial)
    _preload_certs([publisher, consumer], fixture)
    topic = content_name(fixture.ctx, "TEMP", "bedroom", "publisher", "temp")
    publisher.publish_content(topic, b"71.5")
    got: list[bytes] = []

    def deliver(data):
        consumer._receive(data, topic, False,
                          lambda pt, who, d: got.append(pt))

    consumer.node.express_interest(
        fixture.ctx.home_prefix.append("TEMP", CONTENT), deliver,
        retx_budget=budget, lifetime_ms=200,
    )
    scheduler.run_until_idle(60_000)
    return bool(got)


def _command_trial(fixture: _SweepFixture, loss: float, trial: int,
                   budget: int, redundancy: int) -> tuple[int, int]:
    scheduler = VirtualScheduler()
    bus = SimulatedBus(scheduler, BusConfig(loss_probability=loss, seed=trial))
    publisher = fixture.entity("publisher", bus, scheduler, trial)
    consumers = [fixture.entity(f"consumer-{k}", bus, scheduler, trial)
                 for k in (1, 2, 3)]
    _preload_certs([publisher] + consumers, fixture)
    hits: dict[str, int] = {}
    for consumer in consumers:
        consumer.subscribe_command(
            lambda p, issuer, name, c=consumer: hits.__setitem__(
                c.name.to_uri(), 1),
            fetch_budget=budget,
        )
    topic = command_name(fixture.ctx, "Light", ["kitchen"], "switch-on")
    publisher.publish_command(topic, b"on", redundancy=redundancy)
    scheduler.run_until_idle(60_000)
    return len(hits), len(consumers)


def loss_sweep(p_values=(0.0, 0.1, 0.3), trials: int = 200, seed: int = 0,
               content_budget: int = SWEEP_CONTENT_BUDGET,
               command_budget: int = SWEEP_COMMAND_BUDGET,
               redundancy: int = SWEEP_NOTIFICATION_REDUNDANCY) -> list[SweepRow]:
    """Delivery success against loss probability, deterministic per seed."""
    fixture = _SweepFixture(seed)
    rows = []
    for p in p_values:
        delivered = 0
        for trial in range(trials):
            delivered += _content_trial(fixture, p, seed * 100_003 + trial,
                                        content_budget)
        rows.append(SweepRow(p, "content", delivered, trials))
        delivered = attempts = 0
        for trial in range(trials):
            got, total = _command_trial(fixture, p, seed * 200_003 + trial,
                                        command_budget, redundancy)
            delivered += got
            attempts += total
        rows.append(SweepRow(p, "command", delivered, attempts))
    return rows
