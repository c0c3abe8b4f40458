"""Name construction and matching for the home naming conventions.

Every entity, command, content item, key and policy container is addressed
by a name built here; patterns over those names are the policy language.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from enum import Enum

from .tlv import Name, NameComponent

CMD = "CMD"
CONTENT = "CONTENT"
EKEY = "EKEY"
DKEY = "DKEY"
RULE = "RULE"
KEY = "KEY"

_RESERVED = frozenset({CMD, CONTENT, EKEY, DKEY, RULE, KEY})

TIMESTAMP_PREFIX = b"t="
KEY_VERSION_PREFIX = b"k="


class InvalidComponent(ValueError):
    """A name part is empty, over-length, or contains a separator."""


class InvalidScope(ValueError):
    """Command scope must have 0 (home), 1 (room) or 2 (device) components."""


class NoObfuscationKey(RuntimeError):
    """Obfuscation was requested but the context holds no key."""


def component(part: str | bytes | NameComponent) -> NameComponent:
    if isinstance(part, NameComponent):
        return part
    raw = part if isinstance(part, bytes) else str(part).encode("utf-8")
    if b"/" in raw:
        raise InvalidComponent(f"component may not contain '/': {part!r}")
    try:
        return NameComponent(raw)
    except ValueError as exc:
        raise InvalidComponent(str(exc)) from exc


@dataclass(frozen=True)
class NamingContext:
    """Home-wide naming parameters fixed at system setup."""

    home_prefix: Name
    obfuscation_key: bytes | None = None

    def __post_init__(self) -> None:
        if not self.home_prefix.components:
            raise InvalidComponent("home prefix must be non-empty")
        if self.obfuscation_key is not None and len(self.obfuscation_key) != 32:
            raise ValueError("obfuscation key must be 32 bytes")


def entity_name(ctx: NamingContext, service, location, entity_id) -> Name:
    """/<home-prefix>/<service>/<location>/<entity-id>"""
    return ctx.home_prefix + Name(
        (component(service), component(location), component(entity_id))
    )


def command_name(ctx: NamingContext, service, scope, cmd_id) -> Name:
    """/<home-prefix>/<service>/<scope>/CMD/<cmd-id>; scope is 0-2 components."""
    scope_comps = tuple(component(p) for p in scope)
    if len(scope_comps) > 2:
        raise InvalidScope(f"command scope has {len(scope_comps)} components")
    return ctx.home_prefix + Name(
        (component(service), *scope_comps, component(CMD), component(cmd_id))
    )


def content_name(ctx: NamingContext, service, location, entity_id, content_id) -> Name:
    """/<home-prefix>/<service>/CONTENT/<location>/<entity-id>/<content-id>"""
    return ctx.home_prefix + Name(
        (
            component(service),
            component(CONTENT),
            component(location),
            component(entity_id),
            component(content_id),
        )
    )


def content_fetch_prefix(ctx: NamingContext, service, location=None) -> Name:
    """Fetch prefix for a service's content, optionally narrowed to a location."""
    name = ctx.home_prefix.append(component(service), component(CONTENT))
    if location is not None:
        name = name.append(component(location))
    return name


def key_name(ctx: NamingContext, scope, kind: str) -> Name:
    """/<home-prefix>/<scope>/EKEY or .../DKEY; scope may span components."""
    if kind not in (EKEY, DKEY):
        raise ValueError(f"key kind must be EKEY or DKEY, got {kind!r}")
    if isinstance(scope, Name):
        scope_comps = scope.components
    elif isinstance(scope, (list, tuple)):
        scope_comps = tuple(component(p) for p in scope)
    else:
        scope_comps = (component(scope),)
    if not scope_comps:
        raise InvalidComponent("key scope must be non-empty")
    return ctx.home_prefix + Name((*scope_comps, component(kind)))


def policy_container_name(ctx: NamingContext, location, entity_id) -> Name:
    """/<home-prefix>/RULE/<location>/<entity-id>"""
    return ctx.home_prefix + Name(
        (component(RULE), component(location), component(entity_id))
    )


# ---------------------------------------------------------------------------
# uniqueness / key-version suffixes on materialized Data names
# ---------------------------------------------------------------------------

def timestamp_component(ms: int) -> NameComponent:
    return NameComponent(TIMESTAMP_PREFIX + str(int(ms)).encode())


def key_version_component(version: int) -> NameComponent:
    return NameComponent(KEY_VERSION_PREFIX + str(int(version)).encode())


def materialize(base: Name, now_ms: int, key_version: int | None = None) -> Name:
    """Append key-version and uniqueness timestamp components for a Data name."""
    comps = list(base.components)
    if key_version is not None:
        comps.append(key_version_component(key_version))
    comps.append(timestamp_component(now_ms))
    return Name(tuple(comps))


def split_metadata(name: Name) -> tuple[Name, int | None, int | None]:
    """Strip trailing k=/t= components; returns (base, key_version, timestamp)."""
    comps = list(name.components)
    ts = None
    version = None
    if comps and comps[-1].value.startswith(TIMESTAMP_PREFIX):
        try:
            ts = int(comps[-1].value[len(TIMESTAMP_PREFIX):])
            comps.pop()
        except ValueError:
            pass
    if comps and comps[-1].value.startswith(KEY_VERSION_PREFIX):
        try:
            version = int(comps[-1].value[len(KEY_VERSION_PREFIX):])
            comps.pop()
        except ValueError:
            pass
    return Name(tuple(comps)), version, ts


# ---------------------------------------------------------------------------
# patterns
# ---------------------------------------------------------------------------

class Wildcard(Enum):
    ANY_ONE = "<>"
    ANY_ZERO_OR_MORE = "<>*"


ANY_ONE = Wildcard.ANY_ONE
ANY_MANY = Wildcard.ANY_ZERO_OR_MORE

PatternComponent = NameComponent | Wildcard


@dataclass(frozen=True)
class NamePattern:
    """Pattern over names: literals, `<>` (one component), `<>*` (zero or more)."""

    components: tuple[PatternComponent, ...]

    def __post_init__(self) -> None:
        stars = sum(1 for c in self.components if c is ANY_MANY)
        if stars > 1:
            raise ValueError("at most one <>* per pattern")

    @classmethod
    def literal(cls, name: Name) -> "NamePattern":
        return cls(name.components)

    @classmethod
    def from_text(cls, text: str) -> "NamePattern":
        text = text.strip()
        if text in ("", "/"):
            return cls(())
        if text.startswith("/"):
            text = text[1:]
        comps: list[PatternComponent] = []
        for part in text.split("/"):
            if part == "<>":
                comps.append(ANY_ONE)
            elif part == "<>*":
                comps.append(ANY_MANY)
            else:
                comps.append(NameComponent.from_text(part))
        return cls(tuple(comps))

    def to_text(self) -> str:
        if not self.components:
            return "/"
        parts = []
        for comp in self.components:
            parts.append(comp.value if isinstance(comp, Wildcard) else comp.to_text())
        return "/" + "/".join(parts)

    def __repr__(self) -> str:
        return f"NamePattern({self.to_text()!r})"


def _consume(pattern: tuple[PatternComponent, ...], name: tuple[NameComponent, ...]) -> int:
    """Match pattern against the front of name; -1 on failure, else components used.

    The single <>* is resolved shortest-span-first against the remaining
    fixed tail, which is unambiguous because patterns carry at most one.
    """
    star_idx = next((i for i, c in enumerate(pattern) if c is ANY_MANY), None)
    if star_idx is None:
        if len(pattern) > len(name):
            return -1
        for pat, comp in zip(pattern, name):
            if pat is not ANY_ONE and pat != comp:
                return -1
        return len(pattern)
    head, tail = pattern[:star_idx], pattern[star_idx + 1:]
    if len(head) + len(tail) > len(name):
        return -1
    for pat, comp in zip(head, name):
        if pat is not ANY_ONE and pat != comp:
            return -1
    # try every span for the star; first success returns the shortest match
    for span in range(len(name) - len(head) - len(tail) + 1):
        offset = star_idx + span
        if all(
            pat is ANY_ONE or pat == name[offset + j]
            for j, pat in enumerate(tail)
        ):
            return offset + len(tail)
    return -1


def match(pattern: NamePattern, name: Name) -> bool:
    """True iff some wildcard assignment makes the pattern a prefix of name."""
    return _consume(pattern.components, name.components) >= 0


def match_exact(pattern: NamePattern, name: Name) -> bool:
    """True iff some wildcard assignment makes the pattern equal the name."""
    star_idx = next((i for i, c in enumerate(pattern.components) if c is ANY_MANY), None)
    if star_idx is None:
        used = _consume(pattern.components, name.components)
        return used == len(name.components)
    head = pattern.components[:star_idx]
    tail = pattern.components[star_idx + 1:]
    if len(head) + len(tail) > len(name.components):
        return False
    for pat, comp in zip(head, name.components):
        if pat is not ANY_ONE and pat != comp:
            return False
    offset = len(name.components) - len(tail)
    return all(
        pat is ANY_ONE or pat == name.components[offset + j]
        for j, pat in enumerate(tail)
    )


# ---------------------------------------------------------------------------
# obfuscation
# ---------------------------------------------------------------------------

def pseudonym(key: bytes, comp: NameComponent) -> NameComponent:
    digest = hmac.new(key, comp.value, hashlib.sha256).digest()
    return NameComponent(digest[:8].hex().encode())


def obfuscate(ctx: NamingContext, name: Name, keep_prefix_len: int = 1) -> Name:
    """Replace components past the kept prefix with keyed-hash pseudonyms.

    Trailing t=/k= metadata components stay in clear so receivers can still
    recover timestamps and key versions.
    """
    if ctx.obfuscation_key is None:
        raise NoObfuscationKey("naming context holds no obfuscation key")
    comps = []
    for idx, comp in enumerate(name.components):
        if idx < keep_prefix_len or comp.value[:2] in (TIMESTAMP_PREFIX, KEY_VERSION_PREFIX):
            comps.append(comp)
        else:
            comps.append(pseudonym(ctx.obfuscation_key, comp))
    return Name(tuple(comps))


def obfuscate_pattern(ctx: NamingContext, pattern: NamePattern, keep_prefix_len: int = 1) -> NamePattern:
    """Map a pattern's literals into pseudonym space so matching still works."""
    if ctx.obfuscation_key is None:
        raise NoObfuscationKey("naming context holds no obfuscation key")
    comps: list[PatternComponent] = []
    for idx, comp in enumerate(pattern.components):
        if isinstance(comp, Wildcard) or idx < keep_prefix_len:
            comps.append(comp)
        else:
            comps.append(pseudonym(ctx.obfuscation_key, comp))
    return NamePattern(tuple(comps))


# ---------------------------------------------------------------------------
# machine-readable convention table and conformance checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConventionRow:
    kind: str
    pattern: NamePattern
    suffix_allowed: bool  # key rows gain per-entity suffixes when fetched sealed


def convention_rows(home_prefix: Name) -> tuple[ConventionRow, ...]:
    home = home_prefix.to_uri().rstrip("/")
    rows = [
        ("entity", f"{home}/<>/<>/<>", False),
        ("command", f"{home}/<>/<>*/{CMD}/<>", False),
        ("content", f"{home}/<>/{CONTENT}/<>/<>/<>", False),
        ("policy", f"{home}/{RULE}/<>/<>", False),
        ("identity-key", f"{home}/<>*/{KEY}/<>", False),
        ("ekey", f"{home}/<>*/{EKEY}", True),
        ("dkey", f"{home}/<>*/{DKEY}", True),
    ]
    return tuple(
        ConventionRow(kind, NamePattern.from_text(text), suffix)
        for kind, text, suffix in rows
    )


def classify(home_prefix: Name, name: Name) -> str | None:
    """Return the convention row kind a (possibly materialized) name obeys."""
    base, _, _ = split_metadata(name)
    reserved = {c.value.decode("ascii", "replace") for c in base.components} & _RESERVED
    for row in convention_rows(home_prefix):
        if row.suffix_allowed:
            if match(row.pattern, base):
                return row.kind
        elif match_exact(row.pattern, base):
            # reserved markers must sit where the row expects them, so a
            # command name is never mistaken for a bare entity name
            if row.kind == "entity" and reserved:
                continue
            return row.kind
    return None
