"""Entity bootstrapping: mutual authentication from an out-of-band token,
trust-anchor install, name assignment, certificate issuance, and delivery
of the initial policies and symmetric keys.

Four messages over the broadcast medium, all key material sealed:

  1. hello     Interest  /sovereign/boot/<label>/<dh-pub-hex>/<hmac8>
  2. welcome   Data      (named as the hello) anchor cert + controller DH
                         public + assigned name, HMAC-tagged with the token
  3. request   Interest  /sovereign/boot/<label>/req/t=<ms>, carrying the
                         entity's identity public key sealed under the
                         pairwise secret in ApplicationParameters
  4. provision Data      (named as the request) certificate + filtered
                         policies + authorized keys, sealed likewise

The pairwise secret is HKDF(ECDH) over the two ephemeral DH publics; it
outlives the handshake and seals every later key renewal for this entity.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from . import crypto
from .crypto import Certificate, IdentityKeypair, SymmetricKey
from .naming import NamingContext, materialize
from .policy import PolicySet, parse_policy_text
from .tlv import (
    DataPacket,
    InterestPacket,
    Name,
    SignatureInfo,
    SIG_ECDSA_SHA256,
    decode_packet,
)
from .transport import Node

logger = logging.getLogger(__name__)

BOOT_PREFIX = Name.of("sovereign", "boot")
HELLO_RETRY_MS = 2000
REQUEST_RETX_BUDGET = 5

ENTITY_CERT_VALIDITY_MS = 30 * 86_400_000
ANCHOR_CERT_VALIDITY_MS = 365 * 86_400_000


class UnknownToken(ValueError):
    """No pending approval matches the device's out-of-band token."""


class BootstrapState(Enum):
    IDLE = "idle"
    HELLO_SENT = "hello-sent"
    AUTHENTICATED = "authenticated"
    CERTIFIED = "certified"


@dataclass(frozen=True)
class OobToken:
    """Pre-shared secret standing in for a QR-code scan."""

    secret: bytes
    device_label: str

    def __post_init__(self) -> None:
        if len(self.secret) != 16:
            raise ValueError("token must be 16 bytes")

    @classmethod
    def from_hex(cls, hex_text: str, device_label: str) -> "OobToken":
        return cls(bytes.fromhex(hex_text), device_label)


@dataclass(frozen=True)
class DeviceConfig:
    """Home-agnostic device-side bootstrap configuration."""

    device_label: str
    token_hex: str
    service: str = ""
    requested_location: str = ""

    @property
    def token(self) -> OobToken:
        return OobToken.from_hex(self.token_hex, self.device_label)


@dataclass
class EntityCredentials:
    """Everything an entity holds after a completed bootstrap."""

    name: Name
    keypair: IdentityKeypair
    certificate: Certificate
    anchor_certificate: Certificate
    pairwise_secret: bytes
    policies: PolicySet
    keys: list[SymmetricKey] = field(default_factory=list)
    obfuscation_key: bytes | None = None

    @property
    def home_prefix(self) -> Name:
        return self.anchor_certificate.subject

    @property
    def naming(self) -> NamingContext:
        return NamingContext(self.home_prefix, self.obfuscation_key)


def _hello_tag(token: OobToken, dh_public: bytes) -> str:
    payload = token.device_label.encode() + dh_public
    return crypto.hmac_sha256(token.secret, payload)[:8].hex()


def _canonical(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _keys_to_json(keys: list[SymmetricKey]) -> list[dict]:
    return [
        {
            "name": key.name.to_uri(),
            "secret": key.bytes.hex(),
            "version": key.version,
            "not_after": key.not_after,
        }
        for key in keys
    ]


def keys_from_json(raw: list[dict]) -> list[SymmetricKey]:
    return [
        SymmetricKey(
            Name.from_uri(item["name"]),
            bytes.fromhex(item["secret"]),
            int(item["version"]),
            int(item["not_after"]),
        )
        for item in raw
    ]


# ---------------------------------------------------------------------------
# device side
# ---------------------------------------------------------------------------

class DeviceBootstrap:
    """Client-side state machine; one instance per device label."""

    def __init__(self, node: Node, config: DeviceConfig,
                 on_complete: Callable[[EntityCredentials], None] | None = None):
        self.node = node
        self.scheduler = node.scheduler
        self.rng = node.rng
        self.config = config
        self.token = config.token
        self.on_complete = on_complete
        self.state = BootstrapState.IDLE
        self.credentials: EntityCredentials | None = None
        self._dh: IdentityKeypair | None = None
        self._identity: IdentityKeypair | None = None
        self._pairwise: bytes | None = None
        self._anchor: Certificate | None = None
        self._assigned: Name | None = None
        self._nonce: str = ""

    def start(self) -> None:
        self._dh = crypto.generate_keypair(self.rng)
        self._send_hello()

    def _send_hello(self) -> None:
        assert self._dh is not None
        self.state = BootstrapState.HELLO_SENT
        name = BOOT_PREFIX.append(
            self.config.device_label,
            self._dh.public_bytes.hex(),
            _hello_tag(self.token, self._dh.public_bytes),
        )
        self.node.express_interest(
            name,
            on_data=self._on_welcome,
            on_timeout=self._send_hello,  # keep broadcasting until answered
            retx_budget=0,
            lifetime_ms=HELLO_RETRY_MS,
        )

    def _on_welcome(self, data: DataPacket) -> None:
        if self.state is not BootstrapState.HELLO_SENT:
            return
        try:
            blob = json.loads(data.content)
            tag = blob.pop("tag")
            expected = crypto.hmac_sha256(self.token.secret, _canonical(blob)).hex()
            if tag != expected:
                raise ValueError("welcome tag mismatch")
            anchor = crypto.parse_certificate(
                decode_packet(bytes.fromhex(blob["anchor_cert"]))
            )
        except (ValueError, KeyError) as exc:
            logger.warning("rejecting welcome for %s: %s", self.config.device_label, exc)
            self._retry_hello()
            return
        now = self.scheduler.now_ms
        if not crypto.verify_certificate(anchor, anchor.public_bytes, now):
            logger.warning("welcome anchor certificate invalid")
            self._retry_hello()
            return
        if not crypto.verify(anchor.public_bytes, data.signed_portion(), data.sig_value):
            logger.warning("welcome signature does not chain to carried anchor")
            self._retry_hello()
            return
        try:
            self._pairwise = crypto.derive_pairwise_secret(
                self._dh, bytes.fromhex(blob["controller_dh"])
            )
        except (crypto.InvalidPoint, ValueError):
            self._retry_hello()
            return
        self._anchor = anchor
        self._assigned = Name.from_uri(blob["assigned_name"])
        self._nonce = blob["nonce"]
        self.state = BootstrapState.AUTHENTICATED
        self._send_request()

    def _retry_hello(self) -> None:
        self.state = BootstrapState.IDLE
        self.scheduler.schedule(HELLO_RETRY_MS, self._send_hello)

    def _send_request(self) -> None:
        self._identity = crypto.generate_keypair(self.rng)
        payload = _canonical(
            {"public_key": self._identity.public_bytes.hex(), "nonce": self._nonce}
        )
        sealed = crypto.seal_tagged(self._pairwise, payload, rng=self.rng)
        name = materialize(
            BOOT_PREFIX.append(self.config.device_label, "req"),
            self.scheduler.now_ms,
        )
        self.node.express_interest(
            name,
            on_data=self._on_provision,
            on_timeout=self._send_hello,  # controller vanished: start over
            retx_budget=REQUEST_RETX_BUDGET,
            lifetime_ms=HELLO_RETRY_MS,
            app_params=sealed,
        )

    def _on_provision(self, data: DataPacket) -> None:
        if self.state is not BootstrapState.AUTHENTICATED:
            return
        assert self._anchor is not None and self._assigned is not None
        now = self.scheduler.now_ms
        if not crypto.verify(self._anchor.public_bytes, data.signed_portion(),
                             data.sig_value):
            return
        try:
            blob = json.loads(crypto.open_tagged(self._pairwise, data.content))
            cert = crypto.parse_certificate(decode_packet(bytes.fromhex(blob["cert"])))
        except (crypto.AuthenticationError, crypto.DecryptionError,
                ValueError, KeyError) as exc:
            logger.warning("provision bundle rejected: %s", exc)
            return
        if cert.subject != self._assigned:
            return
        if cert.public_bytes != self._identity.public_bytes:
            return
        if not crypto.verify_certificate(cert, self._anchor.public_bytes, now):
            return
        policies = PolicySet(
            parse_policy_text(blob["policies"], serial=int(blob["policy_version"])),
            int(blob["policy_version"]),
        )
        obfuscation = blob.get("obfuscation_key")
        self.credentials = EntityCredentials(
            name=self._assigned,
            keypair=self._identity,
            certificate=cert,
            anchor_certificate=self._anchor,
            pairwise_secret=self._pairwise,
            policies=policies,
            keys=keys_from_json(blob.get("keys", [])),
            obfuscation_key=bytes.fromhex(obfuscation) if obfuscation else None,
        )
        self.state = BootstrapState.CERTIFIED
        if self.on_complete is not None:
            self.on_complete(self.credentials)


# ---------------------------------------------------------------------------
# controller side
# ---------------------------------------------------------------------------

@dataclass
class PendingHello:
    label: str
    first_seen: float
    last_seen: float
    count: int = 1


@dataclass
class Approval:
    token: OobToken
    service: str
    location: str


@dataclass
class RegisteredEntity:
    label: str
    name: Name
    service: str
    location: str
    certificate: Certificate
    pairwise_secret: bytes
    bootstrapped_at: float


class ControllerBootstrapService:
    """Answers hellos it has approvals for; issues certificates and bundles.

    The provisioner callback supplies, per assigned entity name, the policy
    text/version and the symmetric keys that entity is authorized to hold.
    """

    def __init__(
        self,
        node: Node,
        anchor_keypair: IdentityKeypair,
        anchor_certificate: Certificate,
        assign_name: Callable[[str, str, str], Name],
        provisioner: Callable[[Name], tuple[str, int, list[SymmetricKey]]],
        on_registered: Callable[[RegisteredEntity], None] | None = None,
        obfuscation_key: bytes | None = None,
        cert_validity_ms: int = ENTITY_CERT_VALIDITY_MS,
    ):
        self.node = node
        self.scheduler = node.scheduler
        self.anchor_keypair = anchor_keypair
        self.anchor_certificate = anchor_certificate
        self.assign_name = assign_name
        self.provisioner = provisioner
        self.on_registered = on_registered
        self.obfuscation_key = obfuscation_key
        self.cert_validity_ms = cert_validity_ms
        self.pending: dict[str, PendingHello] = {}
        self.approvals: dict[str, Approval] = {}
        self.completed: set[str] = set()
        self.rejected_tokens = 0
        self._sessions: dict[str, dict] = {}
        node.register_prefix(BOOT_PREFIX, self._on_interest)

    def approve(self, label: str, token_hex: str, service: str, location: str) -> None:
        """Arm the responder for a device label; answered on its next hello."""
        self.approvals[label] = Approval(
            OobToken.from_hex(token_hex, label), service, location
        )

    def deny(self, label: str) -> None:
        self.approvals.pop(label, None)
        self.pending.pop(label, None)

    def _on_interest(self, interest: InterestPacket) -> DataPacket | None:
        comps = interest.name.components
        if len(comps) < 5:
            return None
        label = comps[2].value.decode("utf-8", "replace")
        if comps[3].value == b"req":
            return self._on_request(label, interest)
        return self._on_hello(label, interest)

    def _on_hello(self, label: str, interest: InterestPacket) -> DataPacket | None:
        now = self.scheduler.now_ms
        try:
            device_dh = bytes.fromhex(interest.name.components[3].value.decode())
            claimed = interest.name.components[4].value.decode()
        except ValueError:
            return None
        if label in self.completed:
            # the label is bound to its finished session; only that session's
            # own hello may be re-answered (its provision may have been lost),
            # anything else is a replay
            session = self._sessions.get(label)
            if session is not None and session["device_dh"] == device_dh \
                    and session["welcome"] is not None \
                    and session["welcome"].name == interest.name:
                return session["welcome"]
            return None
        entry = self.pending.get(label)
        if entry is None:
            self.pending[label] = PendingHello(label, now, now)
        else:
            entry.last_seen = now
            entry.count += 1
        approval = self.approvals.get(label)
        if approval is None:
            return None
        if _hello_tag(approval.token, device_dh) != claimed:
            self.rejected_tokens += 1
            logger.warning("hello for %s carries a bad token tag", label)
            return None

        session = self._sessions.get(label)
        if session is None or session["device_dh"] != device_dh:
            try:
                controller_dh = crypto.generate_keypair(self.node.rng)
                pairwise = crypto.derive_pairwise_secret(controller_dh, device_dh)
            except crypto.InvalidPoint:
                return None
            assigned = self.assign_name(label, approval.service, approval.location)
            session = {
                "device_dh": device_dh,
                "controller_dh_pub": controller_dh.public_bytes,
                "pairwise": pairwise,
                "assigned": assigned,
                "nonce": crypto.random_bytes(8, self.node.rng).hex(),
                "approval": approval,
                "welcome": None,
            }
            self._sessions[label] = session
        if session["welcome"] is None or session["welcome"].name != interest.name:
            session["welcome"] = self._build_welcome(interest.name, session,
                                                     approval.token)
        return session["welcome"]

    def _build_welcome(self, name: Name, session: dict, token: OobToken) -> DataPacket:
        blob = {
            "anchor_cert": self.anchor_certificate.wire().hex(),
            "controller_dh": session["controller_dh_pub"].hex(),
            "assigned_name": session["assigned"].to_uri(),
            "nonce": session["nonce"],
        }
        blob["tag"] = crypto.hmac_sha256(token.secret, _canonical(blob)).hex()
        locator = crypto.identity_key_name(
            self.anchor_certificate.subject, self.anchor_keypair.public_bytes
        )
        unsigned = DataPacket(
            name=name,
            content=json.dumps(blob).encode(),
            freshness_ms=HELLO_RETRY_MS,
            sig_info=SignatureInfo(SIG_ECDSA_SHA256, locator),
        )
        return unsigned.with_signature(
            crypto.sign(self.anchor_keypair, unsigned.signed_portion())
        )

    def _on_request(self, label: str, interest: InterestPacket) -> DataPacket | None:
        session = self._sessions.get(label)
        if session is None:
            return None
        if interest.app_params is None:
            return None
        try:
            payload = json.loads(
                crypto.open_tagged(session["pairwise"], interest.app_params)
            )
        except (crypto.AuthenticationError, crypto.DecryptionError, ValueError):
            return None
        if payload.get("nonce") != session["nonce"]:
            return None
        cached = session.get("provision")
        if cached is not None and cached.name == interest.name:
            # the provision data may have been lost: re-serve idempotently
            return cached
        # a fresh request within the authenticated session re-issues the
        # certificate (the device restarted after losing the provision)
        try:
            public = bytes.fromhex(payload["public_key"])
            crypto.load_public_key(public)
        except (KeyError, ValueError, crypto.InvalidPoint):
            return None
        now = self.scheduler.now_ms
        assigned: Name = session["assigned"]
        cert = crypto.issue_certificate(
            self.anchor_keypair,
            self.anchor_certificate.subject,
            assigned,
            public,
            not_after=int(now + self.cert_validity_ms),
            issued_at=int(now),
        )
        policy_text, policy_version, keys = self.provisioner(assigned)
        bundle = {
            "cert": cert.wire().hex(),
            "policies": policy_text,
            "policy_version": policy_version,
            "keys": _keys_to_json(keys),
        }
        if self.obfuscation_key is not None:
            bundle["obfuscation_key"] = self.obfuscation_key.hex()
        sealed = crypto.seal_tagged(session["pairwise"], _canonical(bundle),
                                    rng=self.node.rng)
        locator = crypto.identity_key_name(
            self.anchor_certificate.subject, self.anchor_keypair.public_bytes
        )
        unsigned = DataPacket(
            name=interest.name,
            content=sealed,
            freshness_ms=HELLO_RETRY_MS,
            sig_info=SignatureInfo(SIG_ECDSA_SHA256, locator),
        )
        response = unsigned.with_signature(
            crypto.sign(self.anchor_keypair, unsigned.signed_portion())
        )
        approval: Approval = session["approval"]
        record = RegisteredEntity(
            label=label,
            name=assigned,
            service=approval.service,
            location=approval.location,
            certificate=cert,
            pairwise_secret=session["pairwise"],
            bootstrapped_at=now,
        )
        session["provision"] = response
        self.completed.add(label)
        self.approvals.pop(label, None)
        self.pending.pop(label, None)
        if self.on_registered is not None:
            self.on_registered(record)
        return response
