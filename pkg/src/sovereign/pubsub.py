"""Developer-facing pub/sub API over named, signed, encrypted data.

Topics are name prefixes. Publishing runs name -> encrypt -> sign and
registers the Data for broadcast retrieval; receiving runs verify ->
policy-check -> decrypt before anything reaches the application. Commands
ride in Data packets announced by notification Interests; content is pulled
by periodic (or long-poll) Interests under the topic prefix.

With an obfuscation key installed, on-wire names (topic components and the
signer's key locator) are replaced by keyed pseudonyms; policies are then
evaluated in pseudonym space, which is equivalent because the pseudonym map
is deterministic per component.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

from . import crypto
from .bootstrap import EntityCredentials
from .crypto import Certificate, SymmetricKey
from .keystore import EntityKeyStore, scope_candidates
from .naming import (
    CMD,
    CONTENT,
    DKEY,
    EKEY,
    RULE,
    NamePattern,
    NamingContext,
    materialize,
    obfuscate,
    obfuscate_pattern,
    split_metadata,
)
from .policy import Policy, PolicySet, check_produce, install_policy_set, \
    PolicyInstallError
from .tlv import (
    DataPacket,
    InterestPacket,
    MalformedTlv,
    Name,
    SignatureInfo,
    SIG_DIGEST,
    SIG_ECDSA_SHA256,
    decode_packet,
)
from .transport import DuplicateRegistration, Node

logger = logging.getLogger(__name__)

DEFAULT_FRESHNESS_MS = 2000
DEFAULT_POLL_INTERVAL_MS = 1000
NOTIFICATION_SPACING_MS = 100
DEFAULT_NOTIFICATION_REDUNDANCY = 2
REPLAY_WINDOW_MS = 30_000
ANSWER_SUPPRESSION_MS = 200
COMMAND_FETCH_BUDGET = 3

DROP_DUPLICATE = "duplicate"
DROP_STALE = "stale-replay"
DROP_NO_CERT = "no-cert"
DROP_BAD_SIGNATURE = "bad-signature"
DROP_PRODUCE_DENIED = "produce-denied"
DROP_NO_KEY = "no-decryption-key"
DROP_DECRYPT_FAILED = "decrypt-failed"


class NoEncryptionKey(RuntimeError):
    """Publishing requires a current EKEY for the topic's scope."""


def seal_certificate(ctx: NamingContext, cert: Certificate, rng=None) -> DataPacket:
    """Certificate carrier for obfuscated homes: the pseudonym key name on
    the outside, the clear certificate encrypted under the home privacy key
    on the inside. Integrity comes from the anchor signature within."""
    _, _, issued = split_metadata(cert.name)
    name = materialize(obfuscate(ctx, cert.key_name), issued or 0)
    content = crypto.encrypt(ctx.obfuscation_key, cert.wire(), rng=rng)
    return DataPacket(name, content, 0, SignatureInfo(SIG_DIGEST), b"\x00")


def open_sealed_certificate(ctx: NamingContext, data: DataPacket) -> Certificate | None:
    try:
        return crypto.parse_certificate(
            decode_packet(crypto.decrypt(ctx.obfuscation_key, data.content))
        )
    except (crypto.DecryptionError, MalformedTlv, ValueError):
        return None


class LocalPolicyDenied(PermissionError):
    """The entity holds no produce policy covering the name it would sign."""


@dataclass(frozen=True)
class Topic:
    prefix: Name
    kind: str  # "content" | "command"

    def __post_init__(self) -> None:
        markers = {c.value for c in self.prefix.components}
        if self.kind == "content" and CONTENT.encode() not in markers:
            raise ValueError("content topics live under a CONTENT prefix")
        if self.kind == "command" and CMD.encode() not in markers:
            raise ValueError("command topics must contain a CMD component")

    @classmethod
    def for_name(cls, prefix: Name) -> "Topic":
        markers = {c.value for c in prefix.components}
        if CMD.encode() in markers:
            return cls(prefix, "command")
        return cls(prefix, "content")


@dataclass(frozen=True)
class PublishedItem:
    data: DataPacket
    topic: Topic
    plaintext: bytes
    produced_at: float


@dataclass
class Subscription:
    entity: "Entity"
    topic: Topic
    active: bool = True
    _cleanups: list = field(default_factory=list)

    def cancel(self) -> None:
        self.active = False
        for cleanup in self._cleanups:
            cleanup()


class Entity:
    """Runtime for one home entity: publish, subscribe, keys, policies."""

    def __init__(self, credentials: EntityCredentials, node: Node,
                 use_obfuscation: bool = False):
        self.credentials = credentials
        self.node = node
        self.scheduler = node.scheduler
        self.rng = node.rng
        self.name = credentials.name
        self.ctx = credentials.naming
        if use_obfuscation and self.ctx.obfuscation_key is None:
            raise ValueError("bootstrap delivered no obfuscation key")
        self.obfuscated = use_obfuscation
        self.anchor_public = credentials.anchor_certificate.public_bytes
        self.policies: PolicySet = credentials.policies
        self.keys = EntityKeyStore(
            node, self.name, self.anchor_public,
            credentials.pairwise_secret, self.ctx.home_prefix,
        )
        for key in credentials.keys:
            self.keys.install(key)
        self.counters: Counter[str] = Counter()
        self.audit_log: list[dict] = []
        self.audit_hook: Callable[[dict], None] | None = None

        self._certs: dict[tuple, Certificate] = {}
        self._cert_waiters: dict[tuple, list] = {}
        self._published: dict[tuple, list[PublishedItem]] = {}
        self._registrations: set[tuple] = set()
        self._answered_at: dict[tuple, float] = {}
        self._seen_data: dict[tuple, float] = {}
        self._pending_commands: set[tuple] = set()
        self._obf_patterns: dict[int, NamePattern] = {}
        self._last_ts: dict[tuple, int] = {}

        self._serve_own_certificate()
        self._watch_policy_updates()

    # ------------------------------------------------------------------
    # name translation (clear <-> wire) for the optional obfuscation mode
    # ------------------------------------------------------------------

    def wire_name(self, clear: Name) -> Name:
        if not self.obfuscated:
            return clear
        return obfuscate(self.ctx, clear)

    def _wire_pattern(self, pattern: NamePattern) -> NamePattern:
        if not self.obfuscated:
            return pattern
        cached = self._obf_patterns.get(id(pattern))
        if cached is None:
            cached = obfuscate_pattern(self.ctx, pattern)
            self._obf_patterns[id(pattern)] = cached
        return cached

    def _check_produce_wire(self, signer_clear: Name, wire_name: Name):
        if not self.obfuscated:
            return check_produce(self.policies, signer_clear, wire_name)
        translated = PolicySet(
            tuple(
                Policy(self._wire_pattern(p.subject), p.verb,
                       self._wire_pattern(p.object), p.serial)
                for p in self.policies
            ),
            self.policies.version,
        )
        return check_produce(translated, self.wire_name(signer_clear), wire_name)

    # ------------------------------------------------------------------
    # publish paths (steps: name, encrypt, sign, serve)
    # ------------------------------------------------------------------

    def _encryption_key(self, clear_base: Name) -> SymmetricKey:
        now = self.scheduler.now_ms
        for candidate in scope_candidates(self.ctx, clear_base, EKEY):
            key = self.keys.current(candidate, now)
            if key is not None:
                return key
        raise NoEncryptionKey(f"no current EKEY for {clear_base.to_uri()}")

    def _next_timestamp(self, base_key: tuple) -> int:
        ts = int(self.scheduler.now_ms)
        last = self._last_ts.get(base_key, -1)
        ts = max(ts, last + 1)  # uniqueness under rapid publishing
        self._last_ts[base_key] = ts
        return ts

    def _publish(self, topic: Topic, payload: bytes,
                 freshness_ms: int) -> PublishedItem:
        clear_base = topic.prefix
        key = self._encryption_key(clear_base)  # pipeline step 2 material
        ts = self._next_timestamp(clear_base.components)
        clear_name = materialize(clear_base, ts, key.version)  # step 1: name
        wire_base = self.wire_name(clear_base)
        wire_name = materialize(wire_base, ts, key.version)
        decision = self._check_produce_wire(self.name, wire_name)
        if not decision.allowed:
            raise LocalPolicyDenied(
                f"{self.name.to_uri()} may not produce {clear_name.to_uri()}"
                f" ({decision.reason})"
            )
        ciphertext = crypto.encrypt(key, payload, rng=self.rng)  # step 2
        locator = self.wire_name(
            crypto.identity_key_name(self.name, self.credentials.keypair.public_bytes)
        )
        unsigned = DataPacket(wire_name, ciphertext, freshness_ms,
                              SignatureInfo(SIG_ECDSA_SHA256, locator))
        data = unsigned.with_signature(  # step 3: sign
            crypto.sign(self.credentials.keypair, unsigned.signed_portion())
        )
        item = PublishedItem(data, topic, payload, self.scheduler.now_ms)
        ring = self._published.setdefault(wire_base.components, [])
        ring.append(item)
        del ring[:-16]
        self._ensure_producer(wire_base, topic.kind)
        return item

    def _ensure_producer(self, wire_base: Name, kind: str) -> None:
        """Register where consumer Interests will land: content polls name
        any depth under the service's CONTENT root, while command fetches
        name the full Data name, so the topic base itself suffices."""
        if kind == "content":
            prefix = wire_base[: len(self.ctx.home_prefix) + 2]
        else:
            prefix = wire_base
        if prefix.components in self._registrations:
            return
        try:
            self.node.register_prefix(prefix, self._serve_published)
        except DuplicateRegistration:
            pass
        self._registrations.add(prefix.components)

    def _serve_published(self, interest: InterestPacket) -> DataPacket | None:
        """Serve the newest (or exactly named) item; suppress duplicate
        answers for the same interest name inside a short window, so one
        room-level command fetch puts a single Data on the bus."""
        now = self.scheduler.now_ms
        answered = self._answered_at.get(interest.name.components)
        if answered is not None and now - answered < ANSWER_SUPPRESSION_MS:
            return None
        best: PublishedItem | None = None
        for ring in self._published.values():
            for item in ring:
                if not interest.name.is_prefix_of(item.data.name):
                    continue
                if best is None or item.produced_at > best.produced_at:
                    best = item
        if best is None:
            return None
        self._answered_at[interest.name.components] = now
        return best.data

    def publish_content(self, topic, payload: bytes,
                        freshness_ms: int = DEFAULT_FRESHNESS_MS) -> PublishedItem:
        topic = topic if isinstance(topic, Topic) else Topic(topic, "content")
        return self._publish(topic, payload, freshness_ms)

    def publish_command(self, topic, payload: bytes,
                        redundancy: int = DEFAULT_NOTIFICATION_REDUNDANCY,
                        freshness_ms: int = DEFAULT_FRESHNESS_MS) -> PublishedItem:
        topic = topic if isinstance(topic, Topic) else Topic(topic, "command")
        item = self._publish(topic, payload, freshness_ms)
        name = item.data.name
        self.node.announce(name)
        for k in range(1, max(1, redundancy)):
            self.scheduler.schedule(
                k * NOTIFICATION_SPACING_MS,
                lambda n=name: self.node.announce(n),
            )
        return item

    # ------------------------------------------------------------------
    # receive pipeline (steps: verify + policy, then decrypt)
    # ------------------------------------------------------------------

    def _drop(self, reason: str, data: DataPacket) -> None:
        self.counters[reason] += 1
        logger.debug("%s dropped %s: %s", self.name.to_uri(),
                     data.name.to_uri(), reason)

    def _already_seen(self, name: Name) -> bool:
        return self._seen_data.get(name.components, 0) > self.scheduler.now_ms

    def _mark_seen(self, name: Name) -> None:
        """Only names of fully verified packets are marked, so a forged
        packet cannot block the genuine one that shares its name."""
        now = self.scheduler.now_ms
        self._seen_data[name.components] = now + 2 * REPLAY_WINDOW_MS
        if len(self._seen_data) > 8192:
            self._seen_data = {k: v for k, v in self._seen_data.items() if v > now}

    def _signer_identity(self, locator: Name) -> Name | None:
        comps = locator.components
        for idx in range(len(comps) - 1, -1, -1):
            if comps[idx].value == self._wire_component_key():
                return Name(comps[:idx])
        return None

    def _wire_component_key(self) -> bytes:
        if not self.obfuscated:
            return b"KEY"
        from .naming import pseudonym, NameComponent
        return pseudonym(self.ctx.obfuscation_key, NameComponent(b"KEY")).value

    def _with_certificate(self, locator: Name, cont: Callable[[Certificate | None], None]) -> None:
        cached = self._certs.get(locator.components)
        if cached is not None:
            cont(cached)
            return
        waiters = self._cert_waiters.get(locator.components)
        if waiters is not None:
            waiters.append(cont)
            return
        self._cert_waiters[locator.components] = [cont]

        def finish(cert: Certificate | None) -> None:
            for waiter in self._cert_waiters.pop(locator.components, []):
                waiter(cert)

        def on_data(data: DataPacket) -> None:
            if self.obfuscated:
                cert = open_sealed_certificate(self.ctx, data)
            else:
                try:
                    cert = crypto.parse_certificate(data)
                except ValueError:
                    cert = None
            if cert is None:
                finish(None)
                return
            if not crypto.verify_certificate(cert, self.anchor_public,
                                             self.scheduler.now_ms):
                finish(None)
                return
            if self._cert_locator_for(cert) != locator:
                finish(None)
                return
            self._certs[locator.components] = cert
            finish(cert)

        self.node.express_interest(
            locator, on_data, on_timeout=lambda: finish(None),
            retx_budget=2, lifetime_ms=1000,
        )

    def _cert_locator_for(self, cert: Certificate) -> Name:
        clear = crypto.identity_key_name(cert.subject, cert.public_bytes)
        return self.wire_name(clear)

    def _receive(self, data: DataPacket, clear_context: Name, expect_command: bool,
                 deliver: Callable[[bytes, Name, DataPacket], None]) -> None:
        if self._already_seen(data.name):
            self._drop(DROP_DUPLICATE, data)
            return
        _, key_version, ts = split_metadata(data.name)
        if expect_command:
            now = self.scheduler.now_ms
            if ts is None or abs(now - ts) > REPLAY_WINDOW_MS:
                self._drop(DROP_STALE, data)
                return
        locator = data.sig_info.key_locator
        signer_wire = self._signer_identity(locator)
        if signer_wire is None:
            self._drop(DROP_NO_CERT, data)
            return

        def after_cert(cert: Certificate | None) -> None:
            if cert is None:
                self._drop(DROP_NO_CERT, data)
                return
            if self._already_seen(data.name):  # a twin landed while we fetched
                self._drop(DROP_DUPLICATE, data)
                return
            # step 4a: the producer signature must verify against a
            # certificate chaining to the trust anchor
            if not crypto.verify(cert.public_bytes, data.signed_portion(),
                                 data.sig_value):
                self._drop(DROP_BAD_SIGNATURE, data)
                return
            signer_clear = cert.subject
            # step 4b: the verified signer must hold a produce policy
            decision = self._check_produce_wire(signer_clear, data.name)
            if not decision.allowed:
                self._drop(DROP_PRODUCE_DENIED, data)
                return
            self._mark_seen(data.name)
            # step 5: only now is decryption attempted
            if key_version is None:
                self._drop(DROP_NO_KEY, data)
                return
            key = None
            for candidate in scope_candidates(self.ctx, clear_context, DKEY):
                key = self.keys.get_version(candidate, key_version)
                if key is not None:
                    break
            if key is None:
                self._drop(DROP_NO_KEY, data)
                return
            try:
                plaintext = crypto.decrypt(key, data.content)
            except crypto.DecryptionError:
                self._drop(DROP_DECRYPT_FAILED, data)
                return
            record = {
                "name": data.name.to_uri(),
                "signer": signer_clear.to_uri(),
                "policy": decision.policy.to_line(),
                "key": key.name.to_uri(),
                "key_version": key.version,
            }
            self.audit_log.append(record)
            if self.audit_hook is not None:
                self.audit_hook(record)
            deliver(plaintext, signer_clear, data)

        self._with_certificate(locator, after_cert)

    # ------------------------------------------------------------------
    # subscriptions
    # ------------------------------------------------------------------

    def subscribe_content(self, topic, on_message,
                          poll_interval_ms: float = DEFAULT_POLL_INTERVAL_MS,
                          long_poll: bool = False) -> Subscription:
        """on_message(plaintext, producer_name, data_name) per fresh item."""
        topic = topic if isinstance(topic, Topic) else Topic(topic, "content")
        subscription = Subscription(self, topic)
        wire_prefix = self.wire_name(topic.prefix)

        def deliver(plaintext: bytes, producer: Name, data: DataPacket) -> None:
            on_message(plaintext, producer, data.name)

        def on_data(data: DataPacket) -> None:
            if not subscription.active:
                return
            self._receive(data, topic.prefix, False, deliver)
            if long_poll:
                express()

        def express() -> None:
            if not subscription.active:
                return
            self.node.express_interest(
                wire_prefix, on_data,
                on_timeout=express if long_poll else None,
                retx_budget=0,
                lifetime_ms=poll_interval_ms,
            )

        if long_poll:
            express()
        else:
            timer_box: list = [None]

            def poll() -> None:
                if not subscription.active:
                    return
                express()
                timer_box[0] = self.scheduler.schedule(poll_interval_ms, poll)

            poll()
            subscription._cleanups.append(
                lambda: timer_box[0] and timer_box[0].cancel()
            )
        return subscription

    def command_scopes(self) -> list[Name]:
        """Device-, room-, and home-level command prefixes for this entity."""
        home_len = len(self.ctx.home_prefix)
        comps = self.name.components
        service = comps[home_len]
        scopes = [Name(comps[:home_len] + (service,)).append(CMD)]
        if len(comps) > home_len + 1:
            scopes.insert(0, Name(comps[:home_len + 2]).append(CMD))
        if len(comps) > home_len + 2:
            scopes.insert(0, Name(comps[:home_len + 3]).append(CMD))
        return scopes

    def subscribe_command(self, on_command, scopes: list[Name] | None = None,
                          fetch_budget: int = COMMAND_FETCH_BUDGET
                          ) -> Subscription:
        """on_command(params, issuer_name, data_name) once per command."""
        clear_scopes = scopes if scopes is not None else self.command_scopes()
        topic = Topic(clear_scopes[-1], "command")
        subscription = Subscription(self, topic)

        def deliver(plaintext: bytes, producer: Name, data: DataPacket) -> None:
            on_command(plaintext, producer, data.name)

        def ingest(data: DataPacket, clear_scope: Name) -> None:
            if not subscription.active:
                return
            self._pending_commands.discard(data.name.components)
            self._receive(data, clear_scope, True, deliver)

        def on_notification(interest: InterestPacket, clear_scope: Name) -> None:
            if not subscription.active:
                return
            name = interest.name
            if name.components in self._pending_commands:
                return
            if self._already_seen(name):
                return  # already ingested (e.g. overheard the data itself)
            self._pending_commands.add(name.components)
            # ingestion happens through the overhear hook, which sees every
            # arriving copy exactly once; the PIT entry exists for the
            # retransmission budget and timeout bookkeeping
            self.node.express_interest(
                name,
                on_data=lambda data: self._pending_commands.discard(name.components),
                on_timeout=lambda: self._pending_commands.discard(name.components),
                retx_budget=fetch_budget,
                lifetime_ms=DEFAULT_POLL_INTERVAL_MS,
            )

        for clear_scope in clear_scopes:
            wire_scope = self.wire_name(clear_scope)
            try:
                registration = self.node.register_prefix(
                    wire_scope,
                    lambda i, s=clear_scope: on_notification(i, s),
                )
                subscription._cleanups.append(registration.cancel)
            except DuplicateRegistration:
                logger.warning("%s already listens on %s", self.name.to_uri(),
                               wire_scope.to_uri())
            # commands announced for others still satisfy us by overhearing
            self.node.on_overheard_data(
                wire_scope, lambda data, s=clear_scope: ingest(data, s)
            )
        return subscription

    # ------------------------------------------------------------------
    # certificates and policy refresh
    # ------------------------------------------------------------------

    def _serve_own_certificate(self) -> None:
        cert = self.credentials.certificate
        wire_key_name = self._cert_locator_for(cert)
        self._certs[wire_key_name.components] = cert
        anchor = self.credentials.anchor_certificate
        self._certs[self.wire_name(anchor.key_name).components] = anchor
        if self.obfuscated:
            served = seal_certificate(self.ctx, cert, rng=self.rng)
        else:
            served = cert.data

        def serve(interest: InterestPacket) -> DataPacket | None:
            return served

        try:
            self.node.register_prefix(wire_key_name, serve)
        except DuplicateRegistration:  # pragma: no cover
            pass

    def _my_rule_name(self) -> Name:
        home_len = len(self.ctx.home_prefix)
        comps = self.name.components
        location = comps[home_len + 1].value.decode() if len(comps) > home_len + 2 \
            else "home"
        entity_id = comps[-1].value.decode()
        return self.ctx.home_prefix.append(RULE, location, entity_id)

    def _watch_policy_updates(self) -> None:
        self._rule_prefix = self._my_rule_name()
        self.node.on_overheard_data(self._rule_prefix, self._ingest_policy_container)

    def set_policies(self, policy_set: PolicySet) -> None:
        self.policies = policy_set
        self._obf_patterns.clear()

    def _ingest_policy_container(self, data: DataPacket) -> None:
        try:
            fresh = install_policy_set(
                data, self.anchor_public, self.ctx.home_prefix,
                self.policies.version,
            )
        except PolicyInstallError:
            return
        self.set_policies(fresh)

    def refresh_policies(self, on_done=None) -> None:
        """Pull the newest policy container (pushes also land via overhear)."""
        def on_data(data: DataPacket) -> None:
            before = self.policies.version
            self._ingest_policy_container(data)
            if on_done is not None:
                on_done(self.policies.version > before)

        self.node.express_interest(
            self._rule_prefix, on_data,
            on_timeout=(lambda: on_done(False)) if on_done else None,
            retx_budget=1, lifetime_ms=1000,
        )

    def watch_policies(self, poll_interval_ms: float) -> None:
        def poll() -> None:
            self.refresh_policies()
            self.scheduler.schedule(poll_interval_ms, poll)

        self.scheduler.schedule(poll_interval_ms, poll)
