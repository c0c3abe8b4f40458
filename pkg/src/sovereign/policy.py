"""Name-based security policies: triples of (subject pattern, verb, object
pattern), compiled from homeowner rules, distributed as signed containers,
and evaluated peer-to-peer with default deny.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from . import crypto
from .naming import (
    CMD,
    CONTENT,
    DKEY,
    ANY_MANY,
    ANY_ONE,
    NamePattern,
    NamingContext,
    component,
    match,
    materialize,
    policy_container_name,
    split_metadata,
)
from .tlv import DataPacket, Name, SignatureInfo, SIG_ECDSA_SHA256

PRODUCE = "produce"
DECRYPT = "decrypt"
VERBS = (PRODUCE, DECRYPT)

REASON_NO_POLICY = "no-matching-policy"
REASON_SIGNER_MISMATCH = "signer-mismatch"


class UnresolvableScope(ValueError):
    """A rule references a service or scope the controller cannot resolve."""


class PolicyInstallError(ValueError):
    """A policy container failed signature, naming, or version checks."""


@dataclass(frozen=True)
class Policy:
    subject: NamePattern
    verb: str
    object: NamePattern
    serial: int = field(default=0, compare=False)  # set-version that introduced it

    def __post_init__(self) -> None:
        if self.verb not in VERBS:
            raise ValueError(f"unknown verb {self.verb!r}")

    def to_line(self) -> str:
        return f"{self.subject.to_text()} | {self.verb} | {self.object.to_text()}"

    @classmethod
    def from_line(cls, line: str, serial: int = 0) -> "Policy":
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 3:
            raise ValueError(f"policy line needs three fields: {line!r}")
        subject, verb, obj = parts
        if verb not in VERBS:
            raise ValueError(f"unknown verb {verb!r} in {line!r}")
        return cls(NamePattern.from_text(subject), verb, NamePattern.from_text(obj), serial)


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str | None = None
    policy: Policy | None = None

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Decision(True)


@dataclass(frozen=True)
class PolicySet:
    """Immutable policy snapshot; installation swaps whole snapshots."""

    policies: tuple[Policy, ...] = ()
    version: int = 0

    def __iter__(self):
        return iter(self.policies)

    def __len__(self) -> int:
        return len(self.policies)


def _check(policies: Iterable[Policy], verb: str, subject: Name, obj: Name) -> Decision:
    saw_object_match = False
    for policy in policies:
        if policy.verb != verb or not match(policy.object, obj):
            continue
        saw_object_match = True
        if match(policy.subject, subject):
            return Decision(True, policy=policy)
    return Decision(False, REASON_SIGNER_MISMATCH if saw_object_match else REASON_NO_POLICY)


def check_produce(policy_set: PolicySet, signer: Name, data_name: Name) -> Decision:
    """May `signer` produce Data under `data_name`? Enforced by receivers."""
    return _check(policy_set, PRODUCE, signer, data_name)


def check_decrypt(policy_set: PolicySet, entity: Name, key: Name) -> Decision:
    """May `entity` obtain the decryption key `key`? Enforced by the controller."""
    return _check(policy_set, DECRYPT, entity, key)


def can_match_under(pattern: NamePattern, prefix: Name) -> bool:
    """True iff some name starting with `prefix` can satisfy the pattern."""
    def walk(pat: tuple, pre: tuple) -> bool:
        if not pat or not pre:
            return True
        head = pat[0]
        if head is ANY_MANY:
            return any(walk(pat[1:], pre[k:]) for k in range(len(pre) + 1))
        if head is ANY_ONE or head == pre[0]:
            return walk(pat[1:], pre[1:])
        return False

    return walk(pattern.components, prefix.components)


def has_produce_grant_under(policy_set: PolicySet, entity: Name, scope: Name) -> bool:
    """Does any produce policy let `entity` sign names under `scope`?

    This is the encryption-key grant rule: producers for a scope need its
    EKEY, so a produce permission implies encryption-key access.
    """
    return any(
        policy.verb == PRODUCE
        and match(policy.subject, entity)
        and can_match_under(policy.object, scope)
        for policy in policy_set
    )


# ---------------------------------------------------------------------------
# homeowner rules
# ---------------------------------------------------------------------------

RESOURCE_KINDS = (CMD, CONTENT, DKEY)


@dataclass(frozen=True)
class RuleForm:
    """A homeowner-level rule before compilation into name patterns.

    The subject is usually a (service, location, entity) scope; subject_name
    overrides it with an explicit entity name such as the controller's.
    """

    verb: str
    subject_service: str | None = None
    subject_location: str | None = None
    subject_entity: str | None = None
    subject_name: str | None = None
    object_service: str = ""
    resource_kind: str = CONTENT
    object_location: str | None = None

    def to_dict(self) -> dict:
        return {
            "verb": self.verb,
            "subject": {
                "service": self.subject_service,
                "location": self.subject_location,
                "entity": self.subject_entity,
                "name": self.subject_name,
            },
            "object": {
                "service": self.object_service,
                "resource_kind": self.resource_kind,
                "location": self.object_location,
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RuleForm":
        subject = raw.get("subject") or {}
        obj = raw.get("object") or {}
        return cls(
            verb=raw.get("verb", ""),
            subject_service=subject.get("service"),
            subject_location=subject.get("location"),
            subject_entity=subject.get("entity"),
            subject_name=subject.get("name"),
            object_service=obj.get("service", ""),
            resource_kind=obj.get("resource_kind", CONTENT),
            object_location=obj.get("location"),
        )


def compile_rule(ctx: NamingContext, rule: RuleForm, known_services: set[str],
                 serial: int = 0) -> list[Policy]:
    """Deterministic expansion of a rule into name-pattern policies."""
    if rule.verb not in VERBS:
        raise UnresolvableScope(f"unknown verb {rule.verb!r}")
    if rule.resource_kind not in RESOURCE_KINDS:
        raise UnresolvableScope(f"unknown resource kind {rule.resource_kind!r}")
    if rule.verb == DECRYPT and rule.resource_kind != DKEY:
        raise UnresolvableScope("decrypt rules must target DKEY resources")
    if rule.verb == PRODUCE and rule.resource_kind == DKEY:
        raise UnresolvableScope("produce rules target CMD or CONTENT resources")
    if not rule.object_service:
        raise UnresolvableScope("rule object needs a service")
    for service in (rule.object_service, rule.subject_service):
        if service is not None and service not in known_services:
            raise UnresolvableScope(f"unknown service {service!r}")

    if rule.subject_name is not None:
        subject_name = Name.from_uri(rule.subject_name)
        if not ctx.home_prefix.is_prefix_of(subject_name):
            raise UnresolvableScope(
                f"subject {rule.subject_name!r} is outside this home"
            )
        subject = NamePattern.literal(subject_name)
    else:
        home = rule.subject_service is None and rule.subject_location is None \
            and rule.subject_entity is None
        subject_parts: list = list(ctx.home_prefix.components)
        if not home:
            if rule.subject_service is not None:
                subject_parts.append(rule.subject_service)
            else:
                subject_parts.append(ANY_ONE)
            if rule.subject_location is not None:
                subject_parts.append(rule.subject_location)
            elif rule.subject_entity is not None:
                subject_parts.append(ANY_ONE)
            if rule.subject_entity is not None:
                subject_parts.append(rule.subject_entity)
        subject = _pattern(subject_parts)

    object_parts: list = list(ctx.home_prefix.components) + [rule.object_service]
    if rule.resource_kind == CONTENT:
        object_parts.append(CONTENT)
        if rule.object_location is not None:
            object_parts.append(rule.object_location)
    elif rule.resource_kind == CMD:
        if rule.object_location is not None:
            object_parts.append(rule.object_location)
        object_parts.extend([ANY_MANY, CMD])
    else:  # DKEY
        if rule.object_location is not None:
            object_parts.append(rule.object_location)
        object_parts.append(DKEY)
    return [Policy(subject, rule.verb, _pattern(object_parts), serial)]


def _pattern(parts: list) -> NamePattern:
    comps = []
    for part in parts:
        if part is ANY_ONE or part is ANY_MANY or hasattr(part, "value"):
            comps.append(part)
        else:
            comps.append(component(part))
    return NamePattern(tuple(comps))


# ---------------------------------------------------------------------------
# serialization and signed distribution
# ---------------------------------------------------------------------------

def serialize_policy_set(policy_set: PolicySet) -> str:
    """One `<subject> | verb | <object>` triple per line."""
    return "".join(policy.to_line() + "\n" for policy in policy_set)


def parse_policy_text(text: str, serial: int = 0) -> tuple[Policy, ...]:
    policies = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        policies.append(Policy.from_line(line, serial))
    return tuple(policies)


def policies_for_entity(policies: Iterable[Policy], entity: Name) -> tuple[Policy, ...]:
    """The subset an entity needs: every produce policy (receivers enforce
    them against anyone's data) plus the decrypt policies naming it."""
    kept = []
    for policy in policies:
        if policy.verb == PRODUCE or match(policy.subject, entity):
            kept.append(policy)
    return tuple(kept)


def build_policy_container(
    anchor_keypair: crypto.IdentityKeypair,
    anchor_name: Name,
    ctx: NamingContext,
    location: str,
    entity_id: str,
    policy_set: PolicySet,
    now_ms: int,
) -> DataPacket:
    """Signed Data named /<home>/RULE/<location>/<entity-id>/t=<ts>."""
    name = materialize(policy_container_name(ctx, location, entity_id), now_ms)
    content = f"version {policy_set.version}\n".encode() + \
        serialize_policy_set(policy_set).encode()
    locator = crypto.identity_key_name(anchor_name, anchor_keypair.public_bytes)
    unsigned = DataPacket(
        name=name,
        content=content,
        freshness_ms=0,
        sig_info=SignatureInfo(SIG_ECDSA_SHA256, locator),
    )
    return unsigned.with_signature(
        crypto.sign(anchor_keypair, unsigned.signed_portion())
    )


def install_policy_set(
    data: DataPacket,
    anchor_public: bytes,
    home_prefix: Name,
    current_version: int,
) -> PolicySet:
    """Verify the anchor signature and version before accepting a policy set."""
    if not crypto.verify(anchor_public, data.signed_portion(), data.sig_value):
        raise PolicyInstallError("policy container signature invalid")
    base, _, _ = split_metadata(data.name)
    expected_prefix = home_prefix.append("RULE")
    if not expected_prefix.is_prefix_of(base):
        raise PolicyInstallError(f"policy container name {data.name.to_uri()} "
                                 f"not under {expected_prefix.to_uri()}")
    text = data.content.decode("utf-8")
    first, _, rest = text.partition("\n")
    if not first.startswith("version "):
        raise PolicyInstallError("policy container lacks version header")
    try:
        version = int(first[len("version "):])
    except ValueError as exc:
        raise PolicyInstallError("bad version header") from exc
    if version <= current_version:
        raise PolicyInstallError(
            f"stale policy version {version} (have {current_version})"
        )
    return PolicySet(parse_policy_text(rest, serial=version), version)
