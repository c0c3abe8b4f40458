"""Self-contained smart home framework: devices and applications exchange
named, signed, encrypted data directly over a local broadcast medium; a
local controller anchors trust, assigns names, issues certificates,
distributes keys, and compiles homeowner rules into name-based policies
enforced peer to peer.

An application needs three entry points: bootstrap to join a home, then
publish and subscribe.
"""

from .bootstrap import DeviceBootstrap, DeviceConfig, EntityCredentials, OobToken
from .naming import NamePattern, NamingContext
from .pubsub import Entity, Subscription, Topic
from .tlv import DataPacket, InterestPacket, Name, NameComponent

__all__ = [
    "DataPacket",
    "DeviceBootstrap",
    "DeviceConfig",
    "Entity",
    "EntityCredentials",
    "InterestPacket",
    "Name",
    "NameComponent",
    "NamePattern",
    "NamingContext",
    "OobToken",
    "Subscription",
    "Topic",
]

__version__ = "0.1.0"
