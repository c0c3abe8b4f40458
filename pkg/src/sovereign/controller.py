"""The local trust authority and homeowner gateway: home setup, entity
registry, rule compilation and distribution, key provisioning, command
issuance, audit events, and encrypted state persistence.

The controller is itself a first-class entity (<home>/AUTO/controller)
holding a produce policy for every command namespace by default. After
bootstrap and key distribution it is not needed for any device-to-device
exchange; stopping it leaves the home running.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Callable

from . import crypto
from .bootstrap import (
    ANCHOR_CERT_VALIDITY_MS,
    ControllerBootstrapService,
    EntityCredentials,
    RegisteredEntity,
)
from .crypto import Certificate
from .keystore import KeyService, split_key_fetch_name
from .naming import (
    CMD,
    DKEY,
    RULE,
    ANY_MANY,
    ANY_ONE,
    NamePattern,
    NamingContext,
    classify,
    entity_name,
    obfuscate,
    split_metadata,
)
from .policy import (
    DECRYPT,
    PRODUCE,
    Policy,
    PolicySet,
    RuleForm,
    UnresolvableScope,
    build_policy_container,
    compile_rule,
    policies_for_entity,
    serialize_policy_set,
)
from .pubsub import Entity, PublishedItem, seal_certificate
from .tlv import DataPacket, InterestPacket, Name, NameComponent
from .transport import Node, VirtualScheduler

logger = logging.getLogger(__name__)

CONTROLLER_SERVICE = "AUTO"
CONTROLLER_ID = "controller"

# services every fresh home knows about; bootstrapping a device with a new
# service name extends the set
BUILTIN_SERVICES = {
    "TEMP", "AirCon", "Window", "LOCK", "Light", "Switch", "Motion",
    "Contact", "Smoke", "AUTO", "STORE",
}


@dataclass
class EntityRecord:
    label: str
    name: Name
    service: str
    location: str
    certificate: Certificate
    pairwise_secret: bytes
    bootstrapped_at: float

    def public_view(self, key_grants: list[str]) -> dict:
        return {
            "label": self.label,
            "name": self.name.to_uri(),
            "service": self.service,
            "location": self.location,
            "cert_name": self.certificate.name.to_uri(),
            "cert_not_after": self.certificate.not_after,
            "bootstrapped_at": self.bootstrapped_at,
            "key_grants": key_grants,
        }


@dataclass
class StoredRule:
    rule_id: int
    form: RuleForm
    origin: str = "user"  # or "default"

    def public_view(self) -> dict:
        view = self.form.to_dict()
        view["id"] = self.rule_id
        view["origin"] = self.origin
        return view


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    ts: float
    kind: str
    subject: str
    object: str
    outcome: str

    def to_dict(self) -> dict:
        return {
            "seq": self.seq, "ts": self.ts, "kind": self.kind,
            "subject": self.subject, "object": self.object,
            "outcome": self.outcome,
        }


class StateError(RuntimeError):
    """Persistence problems: bad passphrase, corrupt or pre-existing state."""


class HomeController:
    """Single-writer home state; all mutations run on the owning scheduler."""

    def __init__(self, node: Node, state: dict, key_lifetime_ms: float | None = None):
        self.node = node
        self.scheduler = node.scheduler
        self.rng = node.rng
        self._load_state(state)
        self.ctx = NamingContext(self.home_prefix, self.obfuscation_key)
        self.known_services = set(BUILTIN_SERVICES) | {
            record.service for record in self.registry.values()
        }
        self.events: list[AuditEvent] = []
        self._event_seq = 0
        self._event_listeners: list[Callable[[AuditEvent], None]] = []
        self._rule_containers: dict[tuple, DataPacket] = {}
        self._policy_cache: PolicySet | None = None

        self.keys = KeyService(
            self.ctx, node, self.anchor, self.home_prefix,
            policy_source=lambda: self.policy_set,
            pairwise_source=self._pairwise_for,
            registry_source=lambda: [r.name for r in self.registry.values()],
            **({"lifetime_ms": key_lifetime_ms} if key_lifetime_ms else {}),
        )
        self.keys.restore(self._stored_scope_keys)
        self.bootstrap = ControllerBootstrapService(
            node=node,
            anchor_keypair=self.anchor,
            anchor_certificate=self.anchor_cert,
            assign_name=self._assign_name,
            provisioner=self._provision_bundle,
            on_registered=self._on_registered,
            obfuscation_key=self.obfuscation_key,
        )
        # labels stay bound to their completed sessions across restarts
        self.bootstrap.completed |= self._completed_labels
        node.register_prefix(self.home_prefix, self._serve_home)
        node.register_prefix(self.home_prefix.append(RULE), self._serve_rules)
        node.on_overheard_data(self.home_prefix, self._monitor_packet)
        self.entity = self._make_controller_entity()
        self._republish_policies()

    # ------------------------------------------------------------------
    # state construction and persistence
    # ------------------------------------------------------------------

    @classmethod
    def init_home(cls, node: Node, user_label: str,
                  privacy: bool = False, **kw) -> "HomeController":
        rng = node.rng
        suffix = crypto.random_bytes(2, rng).hex()
        home_prefix = Name.of(f"{user_label}-{suffix}")
        anchor = crypto.generate_keypair(rng)
        now = int(node.scheduler.now_ms)
        anchor_cert = crypto.issue_certificate(
            anchor, home_prefix, home_prefix, anchor.public_bytes,
            not_after=now + ANCHOR_CERT_VALIDITY_MS, issued_at=now,
        )
        state = {
            "home_prefix": home_prefix.to_uri(),
            "anchor_private": anchor.private_value(),
            "anchor_cert": anchor_cert.wire().hex(),
            "obfuscation_key": crypto.random_bytes(32, rng).hex() if privacy else None,
            "controller_private": crypto.generate_keypair(rng).private_value(),
            "registry": [],
            "rules": [],
            "next_rule_id": 1,
            "policy_version": 0,
            "completed_labels": [],
            "scope_keys": [],
        }
        return cls(node, state, **kw)

    def _load_state(self, state: dict) -> None:
        from .tlv import decode_packet

        self.home_prefix = Name.from_uri(state["home_prefix"])
        self.anchor = crypto.keypair_from_private_value(state["anchor_private"])
        self.anchor_cert = crypto.parse_certificate(
            decode_packet(bytes.fromhex(state["anchor_cert"]))
        )
        obf = state.get("obfuscation_key")
        self.obfuscation_key = bytes.fromhex(obf) if obf else None
        self.controller_keypair = crypto.keypair_from_private_value(
            state["controller_private"]
        )
        self.registry: dict[tuple, EntityRecord] = {}
        for raw in state["registry"]:
            record = EntityRecord(
                label=raw["label"],
                name=Name.from_uri(raw["name"]),
                service=raw["service"],
                location=raw["location"],
                certificate=crypto.parse_certificate(
                    decode_packet(bytes.fromhex(raw["cert"]))
                ),
                pairwise_secret=bytes.fromhex(raw["pairwise"]),
                bootstrapped_at=raw["bootstrapped_at"],
            )
            self.registry[record.name.components] = record
        self.rules: list[StoredRule] = [
            StoredRule(raw["id"], RuleForm.from_dict(raw["form"]), raw["origin"])
            for raw in state["rules"]
        ]
        self.next_rule_id = state["next_rule_id"]
        self.policy_version = state["policy_version"]
        self._completed_labels = set(state.get("completed_labels", []))
        self._stored_scope_keys = state.get("scope_keys", [])

    def state_dict(self) -> dict:
        return {
            "home_prefix": self.home_prefix.to_uri(),
            "anchor_private": self.anchor.private_value(),
            "anchor_cert": self.anchor_cert.wire().hex(),
            "obfuscation_key": self.obfuscation_key.hex()
            if self.obfuscation_key else None,
            "controller_private": self.controller_keypair.private_value(),
            "registry": [
                {
                    "label": r.label,
                    "name": r.name.to_uri(),
                    "service": r.service,
                    "location": r.location,
                    "cert": r.certificate.wire().hex(),
                    "pairwise": r.pairwise_secret.hex(),
                    "bootstrapped_at": r.bootstrapped_at,
                }
                for r in sorted(self.registry.values(), key=lambda r: r.name.to_uri())
            ],
            "rules": [
                {"id": r.rule_id, "form": r.form.to_dict(), "origin": r.origin}
                for r in self.rules
            ],
            "next_rule_id": self.next_rule_id,
            "policy_version": self.policy_version,
            "completed_labels": sorted(self.bootstrap.completed
                                       if hasattr(self, "bootstrap")
                                       else self._completed_labels),
            "scope_keys": self.keys.export() if hasattr(self, "keys")
            else self._stored_scope_keys,
        }

    # ------------------------------------------------------------------
    # policies
    # ------------------------------------------------------------------

    def _builtin_policies(self) -> list[Policy]:
        """The controller may command every service, at any granularity."""
        controller = NamePattern.literal(self.controller_name)
        cmd_object = NamePattern(
            self.home_prefix.components
            + (ANY_ONE, ANY_MANY, NameComponent(CMD.encode()))
        )
        return [Policy(controller, PRODUCE, cmd_object, 0)]

    @property
    def controller_name(self) -> Name:
        return self.home_prefix.append(CONTROLLER_SERVICE, CONTROLLER_ID)

    @property
    def policy_set(self) -> PolicySet:
        if self._policy_cache is not None and \
                self._policy_cache.version == self.policy_version:
            return self._policy_cache
        policies = list(self._builtin_policies())
        for stored in self.rules:
            policies.extend(
                compile_rule(self.ctx, stored.form, self.known_services,
                             serial=self.policy_version)
            )
        self._policy_cache = PolicySet(tuple(policies), self.policy_version)
        return self._policy_cache

    def add_rule(self, form: RuleForm, origin: str = "user",
                 expected_version: int | None = None) -> StoredRule:
        if expected_version is not None and expected_version != self.policy_version:
            raise VersionConflict(self.policy_version)
        compile_rule(self.ctx, form, self.known_services)  # validate before commit
        stored = StoredRule(self.next_rule_id, form, origin)
        self.rules.append(stored)
        self.next_rule_id += 1
        self._bump_policies()
        self._emit("rule-added", subject=origin, obj=json.dumps(form.to_dict()),
                   outcome=f"rule-{stored.rule_id}@v{self.policy_version}")
        return stored

    def remove_rule(self, rule_id: int,
                    expected_version: int | None = None) -> None:
        if expected_version is not None and expected_version != self.policy_version:
            raise VersionConflict(self.policy_version)
        for idx, stored in enumerate(self.rules):
            if stored.rule_id == rule_id:
                del self.rules[idx]
                self._bump_policies()
                self._emit("rule-removed", subject=stored.origin,
                           obj=f"rule-{rule_id}", outcome=f"v{self.policy_version}")
                return
        raise KeyError(rule_id)

    def _bump_policies(self) -> None:
        self.policy_version += 1
        self._policy_cache = None
        self._republish_policies()
        self.keys.preprovision()  # newly granted entities get sealed keys now

    def _republish_policies(self) -> None:
        """Re-sign and broadcast each entity's filtered policy container."""
        if self.policy_version == 0:
            return
        full = self.policy_set
        for record in self.registry.values():
            filtered = PolicySet(
                policies_for_entity(full.policies, record.name), full.version
            )
            container = build_policy_container(
                self.anchor, self.home_prefix, self.ctx,
                record.location, record.name.components[-1].value.decode(),
                filtered, int(self.scheduler.now_ms),
            )
            base, _, _ = split_metadata(container.name)
            self._rule_containers[base.components] = container
            self.node.send_data(container)

    def _serve_rules(self, interest: InterestPacket) -> DataPacket | None:
        matches = [
            data for base, data in self._rule_containers.items()
            if interest.name.is_prefix_of(Name(base))
            or interest.name.is_prefix_of(data.name)
        ]
        if not matches:
            return None
        return max(matches, key=lambda d: split_metadata(d.name)[2] or 0)

    # ------------------------------------------------------------------
    # bootstrap orchestration
    # ------------------------------------------------------------------

    def approve_bootstrap(self, label: str, token_hex: str, service: str,
                          location: str) -> None:
        if not service or not location:
            raise UnresolvableScope("approval needs a service and a location")
        self.known_services.add(service)
        self._apply_default_templates(service)
        self.bootstrap.approve(label, token_hex, service, location)
        self._emit("bootstrap-approved", subject=label,
                   obj=f"{service}@{location}", outcome="armed")

    def deny_bootstrap(self, label: str) -> None:
        self.bootstrap.deny(label)
        self._emit("bootstrap-denied", subject=label, obj="", outcome="removed")

    def pending_bootstraps(self) -> list[dict]:
        return [
            {"label": p.label, "first_seen": p.first_seen,
             "last_seen": p.last_seen, "count": p.count,
             "approved": p.label in self.bootstrap.approvals}
            for p in self.bootstrap.pending.values()
        ]

    def _assign_name(self, label: str, service: str, location: str) -> Name:
        entity_id, k = label, 2
        taken = {
            record.name.components[-1].value.decode()
            for record in self.registry.values()
        }
        while entity_id in taken:
            entity_id = f"{label}-{k}"
            k += 1
        return entity_name(self.ctx, service, location, entity_id)

    def _provision_bundle(self, name: Name):
        filtered = PolicySet(
            policies_for_entity(self.policy_set.policies, name),
            self.policy_version,
        )
        text = serialize_policy_set(filtered)
        service = name.components[len(self.home_prefix)].value.decode()
        if not self.keys.has_scope(service):
            self.keys.provision_scope_key(service)
        return text, self.policy_version, self.keys.authorized_keys(name)

    def _on_registered(self, record_in: RegisteredEntity) -> None:
        record = EntityRecord(
            label=record_in.label,
            name=record_in.name,
            service=record_in.service,
            location=record_in.location,
            certificate=record_in.certificate,
            pairwise_secret=record_in.pairwise_secret,
            bootstrapped_at=record_in.bootstrapped_at,
        )
        self.registry[record.name.components] = record
        self._emit("bootstrap-completed", subject=record.label,
                   obj=record.name.to_uri(), outcome="registered")
        self._republish_policies()
        self.keys.preprovision()

    def _apply_default_templates(self, service: str) -> None:
        """Best-practice defaults for a service seen for the first time: its
        devices may produce its content and read its own traffic. Both are
        ordinary, editable rules."""
        if any(r.origin == "default" and r.form.object_service == service
               for r in self.rules):
            return
        self.add_rule(
            RuleForm(verb=PRODUCE, subject_service=service,
                     object_service=service, resource_kind="CONTENT"),
            origin="default",
        )
        self.add_rule(
            RuleForm(verb=DECRYPT, subject_service=service,
                     object_service=service, resource_kind=DKEY),
            origin="default",
        )

    def _pairwise_for(self, name: Name) -> bytes | None:
        record = self.registry.get(name.components)
        return record.pairwise_secret if record is not None else None

    # ------------------------------------------------------------------
    # the controller's own entity (for command issuance)
    # ------------------------------------------------------------------

    def _make_controller_entity(self) -> Entity:
        now = int(self.scheduler.now_ms)
        cert = crypto.issue_certificate(
            self.anchor, self.home_prefix, self.controller_name,
            self.controller_keypair.public_bytes,
            not_after=now + ANCHOR_CERT_VALIDITY_MS, issued_at=now,
        )
        credentials = EntityCredentials(
            name=self.controller_name,
            keypair=self.controller_keypair,
            certificate=cert,
            anchor_certificate=self.anchor_cert,
            pairwise_secret=crypto.random_bytes(32, self.rng),
            policies=self.policy_set,
            keys=[],
            obfuscation_key=self.obfuscation_key,
        )
        entity = Entity(credentials, self.node,
                        use_obfuscation=self.obfuscation_key is not None)
        return entity

    def issue_command(self, topic_uri: str, params: bytes,
                      redundancy: int = 2) -> PublishedItem:
        topic = Name.from_uri(topic_uri)
        if not self.home_prefix.is_prefix_of(topic):
            raise UnresolvableScope(f"{topic_uri} is outside this home")
        if classify(self.home_prefix, topic) != "command":
            raise UnresolvableScope(f"{topic_uri} is not a command name")
        service = topic.components[len(self.home_prefix)].value.decode()
        if not self.keys.has_scope(service):
            self.keys.provision_scope_key(service)
            self.keys.preprovision()  # executors need the DKEY before the command
        self.entity.set_policies(self.policy_set)
        self._sync_controller_keys()
        item = self.entity.publish_command(topic, params, redundancy=redundancy)
        self._emit("command-issued", subject=self.controller_name.to_uri(),
                   obj=item.data.name.to_uri(), outcome="published")
        return item

    def _sync_controller_keys(self) -> None:
        for key in self.keys.authorized_keys(self.controller_name):
            self.entity.keys.install(key, renew=False)

    def rotate_key(self, scope: str):
        ekey, dkey = self.keys.rotate(scope)
        self.keys.preprovision()
        self._emit("key-rotated", subject=scope, obj=ekey.name.to_uri(),
                   outcome=f"v{ekey.version}")
        return ekey, dkey

    # ------------------------------------------------------------------
    # serving certs / keys and the passive audit monitor
    # ------------------------------------------------------------------

    def _wire_cert_name(self, cert: Certificate) -> Name:
        clear = crypto.identity_key_name(cert.subject, cert.public_bytes)
        if self.obfuscation_key is None:
            return clear
        return obfuscate(self.ctx, clear)

    def _serve_home(self, interest: InterestPacket) -> DataPacket | None:
        if split_key_fetch_name(interest.name) is not None:
            return self.keys.serve_key_fetch(interest)
        # certificate fetch by key-locator prefix
        for cert in self._all_certs():
            if interest.name.is_prefix_of(self._wire_cert_name(cert)) \
                    or interest.name.is_prefix_of(cert.name):
                if self.obfuscation_key is not None:
                    return seal_certificate(self.ctx, cert, rng=self.rng)
                return cert.data
        return None

    def _all_certs(self):
        yield self.anchor_cert
        yield self.entity.credentials.certificate
        for record in self.registry.values():
            yield record.certificate

    def _monitor_packet(self, data: DataPacket) -> None:
        """Passively verify overheard content/commands; rejected packets
        become audit events for the console feed."""
        locator = data.sig_info.key_locator
        if not locator.components:
            return  # unaddressed infrastructure data (e.g. cert envelopes)
        anchor_locator = crypto.identity_key_name(self.home_prefix,
                                                  self.anchor.public_bytes)
        if locator in (anchor_locator, self._wire_cert_name(self.anchor_cert)):
            return  # the controller's own signed material is not user traffic
        if self.obfuscation_key is None:
            kind = classify(self.home_prefix, data.name)
            if kind not in ("content", "command"):
                return
        cert = next(
            (c for c in self._all_certs()
             if self._wire_cert_name(c) == locator or c.key_name == locator),
            None,
        )
        if cert is None:
            self._emit("packet-rejected", subject=locator.to_uri(),
                       obj=data.name.to_uri(), outcome="unknown-signer")
            return
        if not crypto.verify(cert.public_bytes, data.signed_portion(),
                             data.sig_value):
            self._emit("packet-rejected", subject=cert.subject.to_uri(),
                       obj=data.name.to_uri(), outcome="bad-signature")
            return
        if self.entity.policies.version != self.policy_version:
            self.entity.set_policies(self.policy_set)
        decision = self.entity._check_produce_wire(cert.subject, data.name)
        if not decision.allowed:
            self._emit("packet-rejected", subject=cert.subject.to_uri(),
                       obj=data.name.to_uri(), outcome=decision.reason)

    # ------------------------------------------------------------------
    # events
    # ------------------------------------------------------------------

    def _emit(self, kind: str, subject: str, obj: str, outcome: str) -> None:
        self._event_seq += 1
        event = AuditEvent(self._event_seq, self.scheduler.now_ms, kind,
                           subject, obj, outcome)
        self.events.append(event)
        del self.events[:-2000]
        for listener in list(self._event_listeners):
            listener(event)

    def add_event_listener(self, listener: Callable[[AuditEvent], None]) -> Callable:
        self._event_listeners.append(listener)

        def remove() -> None:
            if listener in self._event_listeners:
                self._event_listeners.remove(listener)

        return remove

    def events_since(self, seq: int) -> list[AuditEvent]:
        return [e for e in self.events if e.seq > seq]

    # ------------------------------------------------------------------
    # status and cross-thread submission
    # ------------------------------------------------------------------

    def status(self) -> dict:
        return {
            "home_prefix": self.home_prefix.to_uri(),
            "controller": self.controller_name.to_uri(),
            "policy_version": self.policy_version,
            "entities": len(self.registry),
            "rules": len(self.rules),
            "pending_bootstraps": len(self.bootstrap.pending),
            "privacy": self.obfuscation_key is not None,
            "events": self._event_seq,
        }

    def call(self, fn: Callable, *args, **kwargs):
        """Run fn on the controller loop and return its result; HTTP handlers
        use this so the loop stays the single writer of home state."""
        if isinstance(self.scheduler, VirtualScheduler):
            return fn(*args, **kwargs)
        import concurrent.futures

        future: concurrent.futures.Future = concurrent.futures.Future()

        def run() -> None:
            try:
                future.set_result(fn(*args, **kwargs))
            except BaseException as exc:  # propagated to the caller
                future.set_exception(exc)

        self.scheduler.submit(run)
        return future.result(timeout=30)


class VersionConflict(RuntimeError):
    def __init__(self, current_version: int):
        super().__init__(f"policy version is {current_version}")
        self.current_version = current_version


# ---------------------------------------------------------------------------
# encrypted state persistence
# ---------------------------------------------------------------------------

_STATE_MAGIC = "sovereign-state-v1"


def _passphrase_key(passphrase: str, salt: bytes) -> bytes:
    return hashlib.scrypt(passphrase.encode(), salt=salt, n=2**14, r=8, p=1,
                          dklen=32)


def save_state(state: dict, path, passphrase: str) -> None:
    """Single-file persistence; all secrets ride inside one sealed blob whose
    IV is derived from the plaintext, so identical state saves identically."""
    blob = json.dumps(state, sort_keys=True).encode()
    salt = hashlib.sha256((_STATE_MAGIC + state["home_prefix"]).encode()).digest()[:16]
    key = _passphrase_key(passphrase, salt)
    iv = crypto.hmac_sha256(key, blob)[:16]
    sealed = crypto.encrypt(key, blob, iv=iv)
    sealed += crypto.hmac_sha256(key, sealed)
    document = {
        "magic": _STATE_MAGIC,
        "home_prefix": state["home_prefix"],
        "salt": salt.hex(),
        "sealed": sealed.hex(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_state(path, passphrase: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except FileNotFoundError:
        raise StateError(f"no state file at {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise StateError(f"unreadable state file: {exc}") from exc
    if document.get("magic") != _STATE_MAGIC:
        raise StateError("not a controller state file")
    key = _passphrase_key(passphrase, bytes.fromhex(document["salt"]))
    sealed = bytes.fromhex(document["sealed"])
    body, tag = sealed[:-32], sealed[-32:]
    import hmac as hmac_mod
    if not hmac_mod.compare_digest(tag, crypto.hmac_sha256(key, body)):
        raise StateError("wrong passphrase or corrupted state")
    return json.loads(crypto.decrypt(key, body))
