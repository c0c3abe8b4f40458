"""Scope-key lifecycle: generation and naming on the controller, sealed
per-entity delivery over the bus, entity-side caching and timed renewal,
and a passive replay store that keeps renewals working while the
controller is down.

EKEY and DKEY for a scope hold the same 32 bytes; what differs is who may
fetch them: decrypt policies gate the DKEY, while any producer authorized
for the scope is granted its EKEY (producers must encrypt, so a produce
permission implies encryption-key access).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

from . import crypto
from .crypto import SymmetricKey
from .naming import (
    CMD,
    CONTENT,
    DKEY,
    EKEY,
    NamingContext,
    classify,
    key_name,
    materialize,
    split_metadata,
)
from .policy import PolicySet, check_decrypt, has_produce_grant_under
from .tlv import DataPacket, InterestPacket, Name, NameComponent, SignatureInfo, \
    SIG_ECDSA_SHA256
from .transport import Node

logger = logging.getLogger(__name__)

DEFAULT_KEY_LIFETIME_MS = 24 * 3_600_000
RENEWAL_FRACTION = 0.8  # entities refresh at 80% of key lifetime
ROTATION_FRACTION = 0.6  # the controller rotates earlier, so renewals are
                         # already pre-provisioned if it then goes down
RETAINED_VERSIONS = 2  # current + previous stay fetchable and usable

_KIND_COMPONENTS = (NameComponent(EKEY.encode()), NameComponent(DKEY.encode()))


class PolicyDenied(PermissionError):
    """The requesting entity holds no policy granting this key."""


class KeyUnavailable(RuntimeError):
    """Neither the controller nor the store answered a key fetch."""


def split_key_fetch_name(name: Name) -> tuple[Name, Name, int | None] | None:
    """Split /<home>/<scope>/<KIND>/<entity...>[/t=v] into
    (key base name, entity name, version)."""
    base, _, ts = split_metadata(name)
    for idx, comp in enumerate(base.components):
        if comp in _KIND_COMPONENTS:
            key_base = Name(base.components[: idx + 1])
            entity = Name(base.components[idx + 1:])
            return key_base, entity, ts
    return None


def scope_candidates(ctx: NamingContext, data_name: Name, kind: str) -> list[Name]:
    """Key base names that may cover a data name, most specific first.

    Content names expose their location after the CONTENT marker; command
    names carry the scope between service and CMD. Room-scoped keys are
    legal, service-scoped keys are the default.
    """
    home_len = len(ctx.home_prefix)
    comps = data_name.components
    if len(comps) <= home_len:
        return []
    service = comps[home_len]
    candidates: list[Name] = []
    marker = NameComponent(CONTENT.encode())
    cmd_marker = NameComponent(CMD.encode())
    if marker in comps:
        idx = comps.index(marker)
        if idx + 1 < len(comps):
            candidates.append(key_name(ctx, [service, comps[idx + 1]], kind))
    elif cmd_marker in comps:
        idx = comps.index(cmd_marker)
        if idx > home_len + 1:  # room or device scope present
            candidates.append(key_name(ctx, [service, comps[home_len + 1]], kind))
    candidates.append(key_name(ctx, service, kind))
    return candidates


def _seal_payload(key: SymmetricKey) -> bytes:
    return json.dumps(
        {"secret": key.bytes.hex(), "not_after": key.not_after, "version": key.version},
        sort_keys=True,
    ).encode()


def _unseal_payload(base: Name, blob: bytes) -> SymmetricKey:
    raw = json.loads(blob)
    return SymmetricKey(base, bytes.fromhex(raw["secret"]), int(raw["version"]),
                        int(raw["not_after"]))


# ---------------------------------------------------------------------------
# controller side
# ---------------------------------------------------------------------------

@dataclass
class ScopeKeys:
    scope: Name  # e.g. /alice-home/TEMP (without the EKEY/DKEY marker)
    versions: list[SymmetricKey] = field(default_factory=list)  # oldest..newest

    @property
    def current(self) -> SymmetricKey:
        return self.versions[-1]


class KeyService:
    """Controller-side keystore: provision, seal, serve, and pre-provision.

    Relies on three controller callbacks: the active policy set, the
    pairwise secret per registered entity, and the registry listing.
    """

    def __init__(
        self,
        ctx: NamingContext,
        node: Node,
        anchor_keypair: crypto.IdentityKeypair,
        anchor_name: Name,
        policy_source: Callable[[], PolicySet],
        pairwise_source: Callable[[Name], bytes | None],
        registry_source: Callable[[], list[Name]],
        lifetime_ms: float = DEFAULT_KEY_LIFETIME_MS,
    ):
        self.ctx = ctx
        self.node = node
        self.scheduler = node.scheduler
        self.anchor_keypair = anchor_keypair
        self.anchor_name = anchor_name
        self.policy_source = policy_source
        self.pairwise_source = pairwise_source
        self.registry_source = registry_source
        self.lifetime_ms = lifetime_ms
        self.scopes: dict[tuple, ScopeKeys] = {}
        self._sealed: dict[tuple, DataPacket] = {}  # (key name, version, entity)
        self._auto_rotate = False

    # -- provisioning --------------------------------------------------------

    def provision_scope_key(self, scope, lifetime_ms: float | None = None
                            ) -> tuple[SymmetricKey, SymmetricKey]:
        """Fresh scope secret published under both EKEY and DKEY names."""
        ekey_name = key_name(self.ctx, scope, EKEY)
        dkey_name = key_name(self.ctx, scope, DKEY)
        scope_name = Name(ekey_name.components[:-1])
        entry = self.scopes.get(scope_name.components)
        version = int(self.scheduler.now_ms)
        if entry is not None and entry.versions:
            version = max(version, entry.current.version + 1)  # strictly newer
        lifetime = self.lifetime_ms if lifetime_ms is None else lifetime_ms
        secret = crypto.random_bytes(32, self.node.rng)
        not_after = int(version + lifetime)
        ekey = SymmetricKey(ekey_name, secret, version, not_after)
        dkey = SymmetricKey(dkey_name, secret, version, not_after)
        if entry is None:
            entry = ScopeKeys(scope_name)
            self.scopes[scope_name.components] = entry
        entry.versions.append(ekey)
        del entry.versions[:-RETAINED_VERSIONS]
        if self._auto_rotate:
            self._schedule_rotation(entry)
        return ekey, dkey

    def rotate(self, scope) -> tuple[SymmetricKey, SymmetricKey]:
        return self.provision_scope_key(scope)

    def has_scope(self, scope) -> bool:
        ekey_name = key_name(self.ctx, scope, EKEY)
        return Name(ekey_name.components[:-1]).components in self.scopes

    def export(self) -> list[dict]:
        """Scope-key material for persistence, oldest version first."""
        return [
            {
                "scope": entry.scope.to_uri(),
                "secret": key.bytes.hex(),
                "version": key.version,
                "not_after": key.not_after,
            }
            for entry in sorted(self.scopes.values(),
                                key=lambda e: e.scope.to_uri())
            for key in entry.versions
        ]

    def restore(self, exported: list[dict]) -> None:
        for raw in exported:
            scope = Name.from_uri(raw["scope"])
            entry = self.scopes.setdefault(scope.components, ScopeKeys(scope))
            entry.versions.append(SymmetricKey(
                scope.append(EKEY), bytes.fromhex(raw["secret"]),
                int(raw["version"]), int(raw["not_after"]),
            ))
            del entry.versions[:-RETAINED_VERSIONS]

    # -- authorization and sealing -------------------------------------------

    def _dkey_of(self, ekey: SymmetricKey) -> SymmetricKey:
        base = Name(ekey.name.components[:-1]).append(DKEY)
        return SymmetricKey(base, ekey.bytes, ekey.version, ekey.not_after)

    def authorized_keys(self, entity: Name) -> list[SymmetricKey]:
        """Current EKEY/DKEY material this entity may hold, per policy."""
        policies = self.policy_source()
        granted: list[SymmetricKey] = []
        for entry in self.scopes.values():
            ekey = entry.current
            dkey = self._dkey_of(ekey)
            if has_produce_grant_under(policies, entity, entry.scope):
                granted.append(ekey)
            if check_decrypt(policies, entity, dkey.name).allowed:
                granted.append(dkey)
        return granted

    def seal_key_for(self, key: SymmetricKey, entity: Name) -> DataPacket:
        """Sealed Data named key-name + entity components + version."""
        policies = self.policy_source()
        kind = key.name.components[-1].value.decode()
        scope = Name(key.name.components[:-1])
        if kind == DKEY:
            if not check_decrypt(policies, entity, key.name).allowed:
                raise PolicyDenied(f"{entity.to_uri()} may not hold {key.name.to_uri()}")
        elif not has_produce_grant_under(policies, entity, scope):
            raise PolicyDenied(f"{entity.to_uri()} may not hold {key.name.to_uri()}")
        pairwise = self.pairwise_source(entity)
        if pairwise is None:
            raise PolicyDenied(f"{entity.to_uri()} is not a registered entity")
        cache_key = (key.name.components, key.version, entity.components)
        cached = self._sealed.get(cache_key)
        if cached is not None:
            return cached
        name = materialize(key.name + entity, key.version)
        sealed = crypto.seal_tagged(pairwise, _seal_payload(key), rng=self.node.rng)
        locator = crypto.identity_key_name(self.anchor_name,
                                           self.anchor_keypair.public_bytes)
        unsigned = DataPacket(name, sealed, 2000,
                              SignatureInfo(SIG_ECDSA_SHA256, locator))
        data = unsigned.with_signature(
            crypto.sign(self.anchor_keypair, unsigned.signed_portion())
        )
        self._sealed[cache_key] = data
        return data

    # -- serving and pre-provisioning -----------------------------------------

    def serve_key_fetch(self, interest: InterestPacket) -> DataPacket | None:
        """Answer /<home>/<scope>/<KIND>/<entity...> fetches, newest version."""
        parsed = split_key_fetch_name(interest.name)
        if parsed is None:
            return None
        key_base, entity, version = parsed
        if not entity.components:
            return None
        scope_name = Name(key_base.components[:-1])
        entry = self.scopes.get(scope_name.components)
        if entry is None:
            return None
        kind = key_base.components[-1].value.decode()
        candidates = entry.versions if version is None else [
            k for k in entry.versions if k.version == version
        ]
        if not candidates:
            return None
        chosen = candidates[-1]
        key = chosen if kind == EKEY else self._dkey_of(chosen)
        try:
            return self.seal_key_for(key, entity)
        except PolicyDenied as exc:
            logger.info("key fetch denied: %s", exc)
            return None  # deny: no Data is produced

    def preprovision(self) -> int:
        """Broadcast every entity's current sealed keys so stores (and the
        entities themselves) hold renewals before any controller outage."""
        count = 0
        for entity in self.registry_source():
            for key in self.authorized_keys(entity):
                try:
                    self.node.send_data(self.seal_key_for(key, entity))
                    count += 1
                except PolicyDenied:  # pragma: no cover - race with rule edits
                    continue
        return count

    def enable_auto_rotation(self) -> None:
        """Rotate each scope at ROTATION_FRACTION of its lifetime and
        pre-provision the sealed renewals immediately."""
        self._auto_rotate = True
        for entry in list(self.scopes.values()):
            self._schedule_rotation(entry)

    def _schedule_rotation(self, entry: ScopeKeys) -> None:
        current = entry.current
        lifetime = current.not_after - current.version
        due = current.version + ROTATION_FRACTION * lifetime
        delay = max(0.0, due - self.scheduler.now_ms)

        def rotate_now() -> None:
            if entry.current.version != current.version:
                return  # superseded by a manual rotation, which rescheduled
            self.rotate(entry.scope[len(self.ctx.home_prefix):])
            self.preprovision()

        self.scheduler.schedule(delay, rotate_now)


# ---------------------------------------------------------------------------
# entity side
# ---------------------------------------------------------------------------

class EntityKeyStore:
    """Per-entity key cache with renewal timers and push ingestion."""

    def __init__(self, node: Node, entity: Name, anchor_public: bytes,
                 pairwise: bytes, home_prefix: Name,
                 on_renewed: Callable[[SymmetricKey], None] | None = None):
        self.node = node
        self.scheduler = node.scheduler
        self.entity = entity
        self.anchor_public = anchor_public
        self.pairwise = pairwise
        self.home_prefix = home_prefix
        self.on_renewed = on_renewed
        self._keys: dict[tuple, dict[int, SymmetricKey]] = {}
        self._renewal_timers: dict[tuple, object] = {}
        self.fetch_failures = 0
        node.on_overheard_data(home_prefix, self._maybe_ingest)

    # -- cache ----------------------------------------------------------------

    def install(self, key: SymmetricKey, renew: bool = True) -> None:
        versions = self._keys.setdefault(key.name.components, {})
        if key.version in versions:
            return
        versions[key.version] = key
        for old in sorted(versions)[:-RETAINED_VERSIONS]:
            del versions[old]
        if renew:
            self._schedule_renewal(key)
        if self.on_renewed is not None:
            self.on_renewed(key)

    def current(self, base: Name, now_ms: float) -> SymmetricKey | None:
        """Newest unexpired key under a base name; expired keys are never
        offered for new encryption."""
        versions = self._keys.get(base.components)
        if not versions:
            return None
        newest = versions[max(versions)]
        if newest.not_after <= now_ms:
            return None
        return newest

    def get_version(self, base: Name, version: int) -> SymmetricKey | None:
        return self._keys.get(base.components, {}).get(version)

    def holdings(self) -> list[SymmetricKey]:
        return [key for versions in self._keys.values()
                for key in versions.values()]

    # -- fetch and renewal ------------------------------------------------------

    def fetch(self, base: Name, on_done: Callable[[bool], None] | None = None,
              retx_budget: int = 3) -> None:
        """Fetch the newest sealed key for this entity under a base name."""
        fetch_name = base + self.entity

        def on_data(data: DataPacket) -> None:
            ok = self._ingest_sealed(data)
            if not ok:
                self.fetch_failures += 1
            if on_done is not None:
                on_done(ok)

        def on_timeout() -> None:
            self.fetch_failures += 1
            if on_done is not None:
                on_done(False)

        self.node.express_interest(fetch_name, on_data, on_timeout,
                                   retx_budget=retx_budget)

    def _schedule_renewal(self, key: SymmetricKey) -> None:
        base_key = key.name.components
        existing = self._renewal_timers.pop(base_key, None)
        if existing is not None:
            existing.cancel()
        lifetime = key.not_after - key.version
        due = key.version + RENEWAL_FRACTION * lifetime
        delay = max(0.0, due - self.scheduler.now_ms)

        def renew() -> None:
            newest = self._keys.get(base_key, {})
            if newest and max(newest) > key.version:
                return  # a newer version already arrived (push or fetch)
            if self.scheduler.now_ms > key.not_after + lifetime:
                self.fetch_failures += 1
                return  # long past expiry with nobody answering: give up
            base = key.name

            def done(ok: bool) -> None:
                if max(self._keys.get(base_key, {}), default=0) <= key.version:
                    # keep trying until a newer key actually lands
                    retry_in = max(lifetime / 10.0, 1.0)
                    self._renewal_timers[base_key] = self.scheduler.schedule(
                        retry_in, renew
                    )

            self.fetch(base, done)

        self._renewal_timers[base_key] = self.scheduler.schedule(delay, renew)

    # -- sealed data pipeline ---------------------------------------------------

    def _maybe_ingest(self, data: DataPacket) -> None:
        parsed = split_key_fetch_name(data.name)
        if parsed is None:
            return
        _, entity, _ = parsed
        if entity != self.entity:
            return
        self._ingest_sealed(data)

    def _ingest_sealed(self, data: DataPacket) -> bool:
        parsed = split_key_fetch_name(data.name)
        if parsed is None:
            return False
        key_base, entity, version = parsed
        if entity != self.entity:
            return False
        if not crypto.verify(self.anchor_public, data.signed_portion(),
                             data.sig_value):
            return False
        try:
            key = _unseal_payload(key_base, crypto.open_tagged(self.pairwise,
                                                               data.content))
        except (crypto.AuthenticationError, crypto.DecryptionError,
                ValueError, KeyError):
            return False
        if version is not None and key.version != version:
            return False
        self.install(key)
        return True


# ---------------------------------------------------------------------------
# in-network replay store
# ---------------------------------------------------------------------------

REPLAYABLE_KINDS = frozenset({"ekey", "dkey", "policy", "identity-key"})


class ReplayStore:
    """Passive storage entity: caches controller-signed key/policy/cert Data
    overheard on the bus and re-serves it by name. It never re-signs."""

    def __init__(self, node: Node, home_prefix: Name, anchor_public: bytes,
                 capacity: int = 4096):
        self.node = node
        self.home_prefix = home_prefix
        self.anchor_public = anchor_public
        self.capacity = capacity
        self.cache: dict[tuple, DataPacket] = {}
        node.on_overheard_data(home_prefix, self._maybe_cache)
        node.register_prefix(home_prefix, self._serve)

    def _maybe_cache(self, data: DataPacket) -> None:
        kind = classify(self.home_prefix, data.name)
        if kind not in REPLAYABLE_KINDS:
            return
        if not crypto.verify(self.anchor_public, data.signed_portion(),
                             data.sig_value):
            return  # only controller-signed material is replayed
        if len(self.cache) >= self.capacity:
            self.cache.pop(next(iter(self.cache)))
        self.cache[data.name.components] = data

    def _serve(self, interest: InterestPacket) -> DataPacket | None:
        matches = [
            data for comps, data in self.cache.items()
            if interest.name.is_prefix_of(Name(comps))
        ]
        if not matches:
            return None

        def sort_key(data: DataPacket):
            _, _, ts = split_metadata(data.name)
            return (ts if ts is not None else -1, data.name.components)

        return max(matches, key=sort_key)

    def __len__(self) -> int:
        return len(self.cache)
