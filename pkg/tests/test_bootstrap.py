from __future__ import annotations

import random

from sovereign import crypto
from sovereign.bootstrap import (
    BootstrapState,
    ControllerBootstrapService,
    DeviceBootstrap,
    DeviceConfig,
)
from sovereign.crypto import SymmetricKey
from sovereign.naming import NamingContext, entity_name, key_name
from sovereign.tlv import DataPacket, Name
from sovereign.transport import BusConfig, Node, SimulatedBus, VirtualScheduler

TOKEN = "00112233445566778899aabbccddeeff"
POLICY_TEXT = "/alice-home/TEMP | produce | /alice-home/TEMP/CONTENT\n"


class MiniHome:
    """Anchor + controller bootstrap responder on a fresh simulated bus."""

    def __init__(self, loss=0.0, seed=0):
        self.scheduler = VirtualScheduler()
        self.bus = SimulatedBus(self.scheduler, BusConfig(loss_probability=loss, seed=seed))
        self.rng = random.Random(99)
        self.home = Name.of("alice-home")
        self.ctx = NamingContext(self.home)
        self.anchor = crypto.generate_keypair(self.rng)
        self.anchor_cert = crypto.issue_certificate(
            self.anchor, self.home, self.home, self.anchor.public_bytes,
            not_after=10**15, issued_at=0,
        )
        self.controller_node = Node(
            self.bus.attach("controller"), self.scheduler, random.Random(1)
        )
        self.assigned_ids: set[str] = set()
        self.registered = []
        self.keys = [
            SymmetricKey(key_name(self.ctx, "TEMP", "EKEY"),
                         crypto.random_bytes(32, self.rng), 1, 10**15)
        ]
        self.service = ControllerBootstrapService(
            node=self.controller_node,
            anchor_keypair=self.anchor,
            anchor_certificate=self.anchor_cert,
            assign_name=self._assign,
            provisioner=lambda name: (POLICY_TEXT, 1, self.keys),
            on_registered=self.registered.append,
        )

    def _assign(self, label, service, location):
        entity_id, k = label, 2
        while entity_id in self.assigned_ids:
            entity_id = f"{label}-{k}"
            k += 1
        self.assigned_ids.add(entity_id)
        return entity_name(self.ctx, service, location, entity_id)

    def device(self, label, token=TOKEN, seed=7):
        node = Node(self.bus.attach(label), self.scheduler, random.Random(seed))
        return DeviceBootstrap(node, DeviceConfig(label, token, "TEMP", "bedroom"))


def test_handshake_completes_with_matching_token():
    home = MiniHome()
    device = home.device("senor-1")
    home.service.approve("senor-1", TOKEN, "TEMP", "bedroom")
    device.start()
    home.scheduler.run_for(500)
    assert device.state is BootstrapState.CERTIFIED
    creds = device.credentials
    assert creds.name.to_uri() == "/alice-home/TEMP/bedroom/senor-1"
    assert len(home.registered) == 1
    assert home.registered[0].name == creds.name


def test_postconditions_cover_full_provisioning():
    home = MiniHome()
    device = home.device("senor-1")
    home.service.approve("senor-1", TOKEN, "TEMP", "bedroom")
    device.start()
    home.scheduler.run_for(500)
    creds = device.credentials
    now = home.scheduler.now_ms
    # anchor installed and equal to the controller's own
    assert creds.anchor_certificate.wire() == home.anchor_cert.wire()
    # certificate chains to anchor and binds the assigned name
    assert crypto.verify_certificate(creds.certificate, home.anchor.public_bytes, now)
    assert creds.certificate.subject == creds.name
    # policies and keys delivered
    assert creds.policies.version == 1 and len(creds.policies) == 1
    assert [k.name.to_uri() for k in creds.keys] == ["/alice-home/TEMP/EKEY"]
    # pairwise secret matches the controller's registry view
    assert creds.pairwise_secret == home.registered[0].pairwise_secret


def test_wrong_token_is_ignored():
    home = MiniHome()
    device = home.device("senor-1", token="ff" * 16)
    home.service.approve("senor-1", TOKEN, "TEMP", "bedroom")
    device.start()
    home.scheduler.run_for(10_000)
    assert device.state is not BootstrapState.CERTIFIED
    assert home.service.rejected_tokens > 0
    assert home.registered == []


def test_unapproved_hello_sits_in_pending_queue():
    home = MiniHome()
    device = home.device("senor-1")
    device.start()
    home.scheduler.run_for(5000)
    assert device.state is BootstrapState.HELLO_SENT
    pending = home.service.pending["senor-1"]
    assert pending.count >= 2  # retransmitted every 2 s
    # approval arrives late: the next hello completes the handshake
    home.service.approve("senor-1", TOKEN, "TEMP", "bedroom")
    home.scheduler.run_for(3000)
    assert device.state is BootstrapState.CERTIFIED


def test_replayed_hello_after_completion_ignored():
    home = MiniHome()
    device = home.device("senor-1")
    home.service.approve("senor-1", TOKEN, "TEMP", "bedroom")
    device.start()
    home.scheduler.run_for(500)
    assert device.state is BootstrapState.CERTIFIED
    replayer = home.device("senor-1-replay", seed=13)
    replayer.config = DeviceConfig("senor-1", TOKEN, "TEMP", "bedroom")
    replayer.start()
    home.scheduler.run_for(10_000)
    assert replayer.state is not BootstrapState.CERTIFIED
    assert len(home.registered) == 1


def test_name_collision_gets_numeric_suffix():
    home = MiniHome()
    first = home.device("senor-1", seed=3)
    home.service.approve("senor-1", TOKEN, "TEMP", "bedroom")
    first.start()
    home.scheduler.run_for(500)
    # same label cannot rebootstrap, but the assignment helper suffixes ids
    assert home._assign("senor-1", "TEMP", "bedroom").to_uri() == \
        "/alice-home/TEMP/bedroom/senor-1-2"


def test_tampered_welcome_rejected_and_retried():
    import json
    from sovereign.tlv import decode_packet

    home = MiniHome()
    device = home.device("senor-1")
    home.service.approve("senor-1", TOKEN, "TEMP", "bedroom")

    # a man-in-the-middle rewrites the assigned name in the first welcome
    original_handler = device.node._handle_frame
    tampered = []

    def intercept(wire, sender):
        if not tampered and wire and wire[0] == 0x06:
            packet = decode_packet(wire)
            blob = json.loads(packet.content)
            blob["assigned_name"] = "/evil-home/TEMP/bedroom/mole"
            forged = DataPacket(packet.name, json.dumps(blob).encode(),
                                packet.freshness_ms, packet.sig_info,
                                packet.sig_value)
            tampered.append(True)
            original_handler(forged.encode(), sender)
            return
        original_handler(wire, sender)

    device.node.face.set_receiver(intercept)
    device.start()
    home.scheduler.run_for(100)
    assert tampered
    assert device.state is BootstrapState.IDLE  # aborted, waiting to retry
    home.scheduler.run_for(10_000)
    assert device.state is BootstrapState.CERTIFIED  # clean retry succeeded


def test_controller_offline_midway_then_recovers():
    home = MiniHome()
    device = home.device("senor-1")
    home.service.approve("senor-1", TOKEN, "TEMP", "bedroom")

    # swallow the controller's provision responses to simulate an outage
    # between welcome and provision
    original_send = home.controller_node.send_data
    dropped = []

    def flaky(data):
        if data.name.components[3].value == b"req" and len(dropped) < 12:
            dropped.append(data.name)
            return
        original_send(data)

    home.controller_node.send_data = flaky
    device.start()
    home.scheduler.run_for(60_000)
    assert device.state is BootstrapState.CERTIFIED
    assert dropped  # outage really happened, device restarted hello


def test_handshake_survives_lossy_bus():
    home = MiniHome(loss=0.25, seed=11)
    device = home.device("senor-1")
    home.service.approve("senor-1", TOKEN, "TEMP", "bedroom")
    device.start()
    home.scheduler.run_for(120_000)
    assert device.state is BootstrapState.CERTIFIED


def test_no_plaintext_key_material_on_the_bus():
    home = MiniHome()
    frames: list[bytes] = []
    observer = home.bus.attach("observer")
    observer.set_receiver(lambda wire, sender: frames.append(wire))
    device = home.device("senor-1")
    home.service.approve("senor-1", TOKEN, "TEMP", "bedroom")
    device.start()
    home.scheduler.run_for(500)
    creds = device.credentials
    secrets_to_hide = [
        creds.pairwise_secret,
        home.keys[0].bytes,
        creds.keypair.private_value().to_bytes(32, "big"),
        home.anchor.private_value().to_bytes(32, "big"),
    ]
    blob = b"\n".join(frames)
    for secret in secrets_to_hide:
        assert secret not in blob
        assert secret.hex().encode() not in blob
