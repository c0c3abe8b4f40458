from __future__ import annotations

import random

import pytest

from sovereign import crypto
from sovereign.keystore import (
    EntityKeyStore,
    KeyService,
    PolicyDenied,
    ReplayStore,
    scope_candidates,
    split_key_fetch_name,
)
from sovereign.naming import DKEY, EKEY, NamePattern, NamingContext, entity_name, key_name
from sovereign.policy import DECRYPT, PRODUCE, Policy, PolicySet
from sovereign.tlv import DataPacket, Name
from sovereign.transport import BusConfig, Node, SimulatedBus, VirtualScheduler

HOME = Name.of("alice-home")
CTX = NamingContext(HOME)


def _pattern(text: str) -> NamePattern:
    return NamePattern.from_text(text)


class KeyNet:
    """Controller key service plus a few provisioned entities on one bus."""

    def __init__(self, lifetime_ms=100_000, loss=0.0, seed=0):
        self.scheduler = VirtualScheduler()
        self.bus = SimulatedBus(self.scheduler, BusConfig(loss_probability=loss, seed=seed))
        self.rng = random.Random(5)
        self.anchor = crypto.generate_keypair(self.rng)
        self.controller_node = Node(self.bus.attach("controller"),
                                    self.scheduler, random.Random(6))
        self.policies = PolicySet(
            (
                Policy(_pattern("/alice-home/TEMP"), PRODUCE,
                       _pattern("/alice-home/TEMP/CONTENT")),
                Policy(_pattern("/alice-home/AirCon/bedroom"), DECRYPT,
                       _pattern("/alice-home/TEMP/DKEY")),
            ),
            version=1,
        )
        self.sensor = entity_name(CTX, "TEMP", "bedroom", "senor-1")
        self.ac = entity_name(CTX, "AirCon", "bedroom", "north-ac-1")
        self.bulb = entity_name(CTX, "Light", "kitchen", "bulb-1")
        self.pairwise = {
            name.components: crypto.random_bytes(32, self.rng)
            for name in (self.sensor, self.ac, self.bulb)
        }
        self.service = KeyService(
            CTX,
            self.controller_node,
            self.anchor,
            HOME,
            policy_source=lambda: self.policies,
            pairwise_source=lambda n: self.pairwise.get(n.components),
            registry_source=lambda: [self.sensor, self.ac, self.bulb],
            lifetime_ms=lifetime_ms,
        )
        self.controller_node.register_prefix(HOME, self.service.serve_key_fetch)

    def entity_store(self, name: Name, label: str, seed=1) -> EntityKeyStore:
        node = Node(self.bus.attach(label), self.scheduler, random.Random(seed))
        return EntityKeyStore(node, name, self.anchor.public_bytes,
                              self.pairwise[name.components], HOME)


def test_provision_names_and_versioning():
    net = KeyNet()
    ekey, dkey = net.service.provision_scope_key("TEMP")
    assert ekey.name.to_uri() == "/alice-home/TEMP/EKEY"
    assert dkey.name.to_uri() == "/alice-home/TEMP/DKEY"
    assert ekey.bytes == dkey.bytes and ekey.version == dkey.version
    ekey2, _ = net.service.provision_scope_key("TEMP")
    assert ekey2.version > ekey.version
    room_ekey, _ = net.service.provision_scope_key(["TEMP", "bedroom"])
    assert room_ekey.name.to_uri() == "/alice-home/TEMP/bedroom/EKEY"


def test_authorized_keys_follow_policies():
    net = KeyNet()
    net.service.provision_scope_key("TEMP")
    sensor_keys = {k.name.to_uri() for k in net.service.authorized_keys(net.sensor)}
    assert sensor_keys == {"/alice-home/TEMP/EKEY"}  # produce implies EKEY
    ac_keys = {k.name.to_uri() for k in net.service.authorized_keys(net.ac)}
    assert ac_keys == {"/alice-home/TEMP/DKEY"}
    assert net.service.authorized_keys(net.bulb) == []


def test_ac_fetches_and_unseals_its_dkey():
    net = KeyNet()
    ekey, dkey = net.service.provision_scope_key("TEMP")
    store = net.entity_store(net.ac, "ac")
    results = []
    store.fetch(key_name(CTX, "TEMP", DKEY), results.append)
    net.scheduler.run_for(100)
    assert results == [True]
    held = store.current(key_name(CTX, "TEMP", DKEY), net.scheduler.now_ms)
    assert held is not None and held.bytes == dkey.bytes
    assert held.version == dkey.version


def test_denied_fetch_produces_no_data():
    net = KeyNet()
    net.service.provision_scope_key("TEMP")
    store = net.entity_store(net.bulb, "bulb")
    results = []
    store.fetch(key_name(CTX, "TEMP", DKEY), results.append, retx_budget=0)
    net.scheduler.run_until_idle(20_000)
    assert results == [False]  # timeout, controller stayed silent
    assert store.holdings() == []
    with pytest.raises(PolicyDenied):
        net.service.seal_key_for(
            net.service.scopes[key_name(CTX, "TEMP", EKEY)[:-1].components].current,
            net.bulb,
        )


def test_overheard_sealed_key_unusable_by_others():
    net = KeyNet()
    net.service.provision_scope_key("TEMP")
    ac_store = net.entity_store(net.ac, "ac")
    bulb_store = net.entity_store(net.bulb, "bulb", seed=2)
    ac_store.fetch(key_name(CTX, "TEMP", DKEY))
    net.scheduler.run_for(100)
    assert len(ac_store.holdings()) == 1
    assert bulb_store.holdings() == []  # overheard but not addressed to it
    sealed = net.service.seal_key_for(
        net.service._dkey_of(net.service.scopes[
            key_name(CTX, "TEMP", EKEY)[:-1].components].current),
        net.ac,
    )
    with pytest.raises(crypto.AuthenticationError):
        crypto.open_tagged(net.pairwise[net.bulb.components], sealed.content)


def test_preprovision_fills_store_and_survives_controller_outage():
    net = KeyNet()
    net.service.provision_scope_key("TEMP")
    store_node = Node(net.bus.attach("store"), net.scheduler, random.Random(3))
    replay = ReplayStore(store_node, HOME, net.anchor.public_bytes)
    count = net.service.preprovision()
    net.scheduler.run_for(100)
    assert count == 2  # sensor EKEY + AC DKEY
    assert len(replay) == 2

    net.service.rotate("TEMP")
    net.service.preprovision()
    net.scheduler.run_for(100)
    net.controller_node.face.close()  # controller goes dark

    ac_store = net.entity_store(net.ac, "ac")
    results = []
    ac_store.fetch(key_name(CTX, "TEMP", DKEY), results.append)
    net.scheduler.run_for(500)
    assert results == [True]  # renewal served by the store alone
    held = ac_store.current(key_name(CTX, "TEMP", DKEY), net.scheduler.now_ms)
    assert held.version == net.service.scopes[
        key_name(CTX, "TEMP", EKEY)[:-1].components].current.version


def test_expired_key_not_offered_for_encryption():
    net = KeyNet(lifetime_ms=1000)
    net.service.provision_scope_key("TEMP")
    store = net.entity_store(net.ac, "ac")
    store.fetch(key_name(CTX, "TEMP", DKEY))
    net.scheduler.run_for(100)
    base = key_name(CTX, "TEMP", DKEY)
    assert store.current(base, net.scheduler.now_ms) is not None
    net.scheduler.run_until(5000)
    assert store.current(base, net.scheduler.now_ms) is None
    # the expired version is still addressable for old ciphertext
    held = store.holdings()
    assert len(held) == 1
    assert store.get_version(base, held[0].version) is not None


def test_revoked_entity_excluded_after_rotation():
    net = KeyNet()
    net.service.provision_scope_key("TEMP")
    assert any(k.name.components[-1].value == b"DKEY"
               for k in net.service.authorized_keys(net.ac))
    # homeowner removes the AC's decrypt rule
    net.policies = PolicySet((net.policies.policies[0],), version=2)
    net.service.rotate("TEMP")
    assert net.service.authorized_keys(net.ac) == []
    with pytest.raises(PolicyDenied):
        net.service.seal_key_for(net.service._dkey_of(
            net.service.scopes[key_name(CTX, "TEMP", EKEY)[:-1].components].current
        ), net.ac)


def test_renewal_timer_picks_up_rotated_key():
    net = KeyNet(lifetime_ms=10_000)
    ekey, _ = net.service.provision_scope_key("TEMP")
    net.service.enable_auto_rotation()  # rotates at 60% of lifetime
    store = net.entity_store(net.ac, "ac")
    store.fetch(key_name(CTX, "TEMP", DKEY))
    net.scheduler.run_for(200)
    first = store.current(key_name(CTX, "TEMP", DKEY), net.scheduler.now_ms)
    assert first.version == ekey.version
    net.scheduler.run_until(9_500)  # past the 80% renewal point
    newest = store.current(key_name(CTX, "TEMP", DKEY), net.scheduler.now_ms)
    assert newest is not None and newest.version > first.version


def test_replay_store_rejects_forged_data():
    net = KeyNet()
    net.service.provision_scope_key("TEMP")
    store_node = Node(net.bus.attach("store"), net.scheduler, random.Random(3))
    replay = ReplayStore(store_node, HOME, net.anchor.public_bytes)
    mallory = crypto.generate_keypair(random.Random(13))
    sealed_name = key_name(CTX, "TEMP", DKEY) + net.ac
    from sovereign.naming import materialize
    from sovereign.tlv import SignatureInfo
    forged = DataPacket(materialize(sealed_name, 1), b"junk", 0, SignatureInfo())
    forged = forged.with_signature(crypto.sign(mallory, forged.signed_portion()))
    attacker_node = Node(net.bus.attach("mallory"), net.scheduler, random.Random(14))
    attacker_node.send_data(forged)
    net.scheduler.run_for(100)
    assert len(replay) == 0


def test_split_and_scope_helpers():
    sealed = key_name(CTX, "TEMP", DKEY) + Name.from_uri(
        "/alice-home/AirCon/bedroom/north-ac-1")
    from sovereign.naming import materialize
    base, entity, version = split_key_fetch_name(materialize(sealed, 42))
    assert base.to_uri() == "/alice-home/TEMP/DKEY"
    assert entity.to_uri() == "/alice-home/AirCon/bedroom/north-ac-1"
    assert version == 42
    content = Name.from_uri("/alice-home/TEMP/CONTENT/bedroom/senor-1/temp/t=1")
    cands = [c.to_uri() for c in scope_candidates(CTX, content, EKEY)]
    assert cands == ["/alice-home/TEMP/bedroom/EKEY", "/alice-home/TEMP/EKEY"]
    command = Name.from_uri("/alice-home/AirCon/bedroom/CMD/set-temp/t=2")
    cands = [c.to_uri() for c in scope_candidates(CTX, command, DKEY)]
    assert cands == ["/alice-home/AirCon/bedroom/DKEY", "/alice-home/AirCon/DKEY"]
    home_cmd = Name.from_uri("/alice-home/AirCon/CMD/set-temp/t=2")
    assert [c.to_uri() for c in scope_candidates(CTX, home_cmd, DKEY)] == \
        ["/alice-home/AirCon/DKEY"]
