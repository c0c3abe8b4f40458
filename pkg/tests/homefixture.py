"""Hand-provisioned home fixture: anchor, policies, scope keys and entities
wired onto one simulated bus, skipping the bootstrap wire exchange so unit
tests start from a known post-bootstrap state."""

from __future__ import annotations

import random

from sovereign import crypto
from sovereign.bootstrap import EntityCredentials
from sovereign.crypto import SymmetricKey
from sovereign.naming import DKEY, EKEY, NamePattern, NamingContext, entity_name, key_name
from sovereign.policy import Policy, PolicySet
from sovereign.pubsub import Entity
from sovereign.tlv import Name
from sovereign.transport import BusConfig, Node, SimulatedBus, VirtualScheduler

FAR_FUTURE = 10**15


class Home:
    def __init__(self, loss: float = 0.0, seed: int = 0,
                 obfuscation: bool = False, latency=("fixed", 5.0)):
        self.scheduler = VirtualScheduler()
        self.bus = SimulatedBus(
            self.scheduler, BusConfig(loss_probability=loss, latency=latency, seed=seed)
        )
        self.rng = random.Random(2024)
        self.home = Name.of("alice-home")
        self.obf_key = crypto.random_bytes(32, self.rng) if obfuscation else None
        self.ctx = NamingContext(self.home, self.obf_key)
        self.anchor = crypto.generate_keypair(self.rng)
        self.anchor_cert = crypto.issue_certificate(
            self.anchor, self.home, self.home, self.anchor.public_bytes,
            not_after=FAR_FUTURE, issued_at=0,
        )
        self._policies: list[Policy] = []
        self._scope_keys: dict[str, tuple[SymmetricKey, SymmetricKey]] = {}
        self.policy_version = 1
        self.entities: dict[str, Entity] = {}

    # -- policies ------------------------------------------------------------

    def allow(self, subject: str, verb: str, obj: str) -> None:
        self._policies.append(
            Policy(NamePattern.from_text(subject), verb, NamePattern.from_text(obj))
        )

    @property
    def policy_set(self) -> PolicySet:
        return PolicySet(tuple(self._policies), self.policy_version)

    # -- keys ------------------------------------------------------------------

    def scope_key(self, scope: str, version: int = 1,
                  not_after: int = FAR_FUTURE) -> tuple[SymmetricKey, SymmetricKey]:
        tag = f"{scope}@{version}"
        if tag not in self._scope_keys:
            secret = crypto.random_bytes(32, self.rng)
            ekey = SymmetricKey(key_name(self.ctx, scope, EKEY), secret, version, not_after)
            dkey = SymmetricKey(key_name(self.ctx, scope, DKEY), secret, version, not_after)
            self._scope_keys[tag] = (ekey, dkey)
        return self._scope_keys[tag]

    # -- entities ----------------------------------------------------------------

    def credentials(self, service: str, location: str, entity_id: str,
                    keys: list[SymmetricKey] | None = None) -> EntityCredentials:
        name = entity_name(self.ctx, service, location, entity_id)
        keypair = crypto.generate_keypair(self.rng)
        cert = crypto.issue_certificate(
            self.anchor, self.home, name, keypair.public_bytes,
            not_after=FAR_FUTURE, issued_at=int(self.scheduler.now_ms),
        )
        return EntityCredentials(
            name=name,
            keypair=keypair,
            certificate=cert,
            anchor_certificate=self.anchor_cert,
            pairwise_secret=crypto.random_bytes(32, self.rng),
            policies=self.policy_set,
            keys=list(keys or []),
            obfuscation_key=self.obf_key,
        )

    def entity(self, service: str, location: str, entity_id: str,
               keys: list[SymmetricKey] | None = None,
               obfuscated: bool | None = None) -> Entity:
        label = entity_id
        node = Node(self.bus.attach(label), self.scheduler,
                    rng=random.Random(f"node:{label}"))
        use_obf = self.obf_key is not None if obfuscated is None else obfuscated
        runtime = Entity(self.credentials(service, location, entity_id, keys),
                         node, use_obfuscation=use_obf)
        self.entities[label] = runtime
        return runtime

    # -- misc ---------------------------------------------------------------------

    def observer_frames(self) -> list[bytes]:
        frames: list[bytes] = []
        face = self.bus.attach(f"observer-{len(self.bus.faces)}")
        face.set_receiver(lambda wire, sender: frames.append(wire))
        return frames

    def run(self, duration_ms: float) -> None:
        self.scheduler.run_for(duration_ms)

    def data_sends(self, name: Name) -> int:
        from sovereign.tlv import T_DATA
        return sum(1 for e in self.bus.trace
                   if e.kind == "send" and e.ptype == T_DATA and e.name == name)
