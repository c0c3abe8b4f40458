"""TLV wire codec for Interest and Data packets (NDN 0.3 compatible).

Everything on the bus is one of the two packet types encoded here; the
encoder is canonical (one wire form per packet) so signatures and
de-duplication can work on raw bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

# TLV type assignments (NDN 0.3)
T_INTEREST = 0x05
T_DATA = 0x06
T_NAME = 0x07
T_NAME_COMPONENT = 0x08
T_NONCE = 0x0A
T_INTEREST_LIFETIME = 0x0C
T_META_INFO = 0x14
T_CONTENT = 0x15
T_SIGNATURE_INFO = 0x16
T_SIGNATURE_VALUE = 0x17
T_FRESHNESS_PERIOD = 0x19
T_SIGNATURE_TYPE = 0x1B
T_KEY_LOCATOR = 0x1C
T_APP_PARAMETERS = 0x24

# SignatureType values (NDN assigned numbers)
SIG_DIGEST = 0
SIG_ECDSA_SHA256 = 3
SIG_HMAC_SHA256 = 4

MAX_PACKET_SIZE = 8800
MAX_COMPONENT_SIZE = 255

DEFAULT_INTEREST_LIFETIME_MS = 4000


class MalformedTlv(ValueError):
    """Wire bytes violate the TLV grammar or the mandatory-field table."""


# ---------------------------------------------------------------------------
# variable-size numbers and generic TLV
# ---------------------------------------------------------------------------

def encode_varnum(value: int) -> bytes:
    if value < 0:
        raise ValueError("varnum must be non-negative")
    if value < 253:
        return bytes([value])
    if value < 0x10000:
        return b"\xfd" + value.to_bytes(2, "big")
    if value < 0x100000000:
        return b"\xfe" + value.to_bytes(4, "big")
    return b"\xff" + value.to_bytes(8, "big")


def decode_varnum(wire: bytes, offset: int) -> tuple[int, int]:
    """Return (value, next_offset); raises MalformedTlv on truncation."""
    if offset >= len(wire):
        raise MalformedTlv("truncated varnum")
    first = wire[offset]
    if first < 253:
        return first, offset + 1
    width = {0xFD: 2, 0xFE: 4, 0xFF: 8}[first]
    end = offset + 1 + width
    if end > len(wire):
        raise MalformedTlv("truncated varnum body")
    return int.from_bytes(wire[offset + 1 : end], "big"), end


def encode_tlv(tlv_type: int, value: bytes) -> bytes:
    if tlv_type >= 2**32:
        raise ValueError("TLV type out of range")
    return encode_varnum(tlv_type) + encode_varnum(len(value)) + bytes(value)


def decode_tlv(wire: bytes, offset: int) -> tuple[int, bytes, int]:
    """Return (type, value, next_offset)."""
    tlv_type, offset = decode_varnum(wire, offset)
    length, offset = decode_varnum(wire, offset)
    end = offset + length
    if end > len(wire):
        raise MalformedTlv(f"TLV 0x{tlv_type:02x} overruns buffer")
    return tlv_type, bytes(wire[offset:end]), end


def encode_nonneg_int(value: int) -> bytes:
    """NDN non-negative integer: shortest of 1/2/4/8 bytes, big-endian."""
    for width in (1, 2, 4, 8):
        if value < 1 << (8 * width):
            return value.to_bytes(width, "big")
    raise ValueError("integer too large")


def decode_nonneg_int(value: bytes) -> int:
    if len(value) not in (1, 2, 4, 8):
        raise MalformedTlv("bad non-negative integer width")
    return int.from_bytes(value, "big")


def _is_critical(tlv_type: int) -> bool:
    # Evolvability rule: types <= 31 and odd types must be understood.
    return tlv_type <= 31 or tlv_type % 2 == 1


# ---------------------------------------------------------------------------
# names
# ---------------------------------------------------------------------------

_URI_SAFE = frozenset(
    b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-._~="
)


@dataclass(frozen=True, order=True)
class NameComponent:
    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, bytes):
            object.__setattr__(self, "value", bytes(self.value))
        if len(self.value) == 0:
            raise ValueError("empty name component")
        if len(self.value) > MAX_COMPONENT_SIZE:
            raise ValueError("name component exceeds 255 bytes")

    @classmethod
    def from_text(cls, text: str) -> "NameComponent":
        return cls(_unescape(text))

    def encode(self) -> bytes:
        return encode_tlv(T_NAME_COMPONENT, self.value)

    def to_text(self) -> str:
        return "".join(
            chr(b) if b in _URI_SAFE else f"%{b:02X}" for b in self.value
        )

    def __repr__(self) -> str:
        return f"NameComponent({self.to_text()!r})"


def _unescape(text: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "%":
            if i + 3 > len(text):
                raise ValueError(f"bad percent escape in {text!r}")
            out.append(int(text[i + 1 : i + 3], 16))
            i += 3
        else:
            out.extend(ch.encode("utf-8"))
            i += 1
    return bytes(out)


@dataclass(frozen=True, order=True)
class Name:
    """Hierarchical name; the universal address of entities, data and keys."""

    components: tuple[NameComponent, ...] = ()

    @classmethod
    def of(cls, *parts: "str | bytes | NameComponent") -> "Name":
        comps = []
        for part in parts:
            if isinstance(part, NameComponent):
                comps.append(part)
            elif isinstance(part, bytes):
                comps.append(NameComponent(part))
            else:
                comps.append(NameComponent(str(part).encode("utf-8")))
        return cls(tuple(comps))

    @classmethod
    def from_uri(cls, uri: str) -> "Name":
        uri = uri.strip()
        if uri in ("", "/"):
            return cls()
        if uri.startswith("/"):
            uri = uri[1:]
        if uri.endswith("/"):
            uri = uri[:-1]
        return cls(tuple(NameComponent.from_text(p) for p in uri.split("/")))

    def to_uri(self) -> str:
        if not self.components:
            return "/"
        return "/" + "/".join(c.to_text() for c in self.components)

    def __len__(self) -> int:
        return len(self.components)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Name(self.components[idx])
        return self.components[idx]

    def __add__(self, other: "Name") -> "Name":
        return Name(self.components + other.components)

    def append(self, *parts) -> "Name":
        return self + Name.of(*parts)

    def is_prefix_of(self, other: "Name") -> bool:
        return self.components == other.components[: len(self.components)]

    def encode_bodies(self) -> bytes:
        return b"".join(c.encode() for c in self.components)

    def encode(self) -> bytes:
        return encode_tlv(T_NAME, self.encode_bodies())

    @classmethod
    def decode_value(cls, value: bytes) -> "Name":
        comps = []
        offset = 0
        while offset < len(value):
            tlv_type, body, offset = decode_tlv(value, offset)
            if tlv_type != T_NAME_COMPONENT:
                raise MalformedTlv(f"unexpected type 0x{tlv_type:02x} in name")
            try:
                comps.append(NameComponent(body))
            except ValueError as exc:
                raise MalformedTlv(str(exc)) from exc
        return cls(tuple(comps))

    def __repr__(self) -> str:
        return f"Name({self.to_uri()!r})"


# ---------------------------------------------------------------------------
# packets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SignatureInfo:
    sig_type: int = SIG_ECDSA_SHA256
    key_locator: Name = field(default_factory=Name)

    def encode(self) -> bytes:
        body = encode_tlv(T_SIGNATURE_TYPE, encode_nonneg_int(self.sig_type))
        if self.key_locator.components:
            body += encode_tlv(T_KEY_LOCATOR, self.key_locator.encode())
        return encode_tlv(T_SIGNATURE_INFO, body)

    @classmethod
    def decode_value(cls, value: bytes) -> "SignatureInfo":
        sig_type = None
        key_locator = Name()
        offset = 0
        while offset < len(value):
            tlv_type, body, offset = decode_tlv(value, offset)
            if tlv_type == T_SIGNATURE_TYPE:
                sig_type = decode_nonneg_int(body)
            elif tlv_type == T_KEY_LOCATOR:
                inner_type, inner, _ = decode_tlv(body, 0)
                if inner_type != T_NAME:
                    raise MalformedTlv("key locator must hold a name")
                key_locator = Name.decode_value(inner)
            elif _is_critical(tlv_type):
                raise MalformedTlv(f"unknown critical type 0x{tlv_type:02x}")
        if sig_type is None:
            raise MalformedTlv("signature info lacks signature type")
        return cls(sig_type, key_locator)


@dataclass(frozen=True)
class InterestPacket:
    name: Name
    nonce: bytes
    lifetime_ms: int = DEFAULT_INTEREST_LIFETIME_MS
    app_params: bytes | None = None

    def __post_init__(self) -> None:
        if not self.name.components:
            raise ValueError("interest name must be non-empty")
        if len(self.nonce) != 4:
            raise ValueError("nonce must be 4 bytes")
        if self.lifetime_ms <= 0:
            raise ValueError("lifetime must be positive")

    def encode(self) -> bytes:
        body = self.name.encode()
        body += encode_tlv(T_NONCE, self.nonce)
        body += encode_tlv(T_INTEREST_LIFETIME, encode_nonneg_int(self.lifetime_ms))
        if self.app_params is not None:
            body += encode_tlv(T_APP_PARAMETERS, self.app_params)
        wire = encode_tlv(T_INTEREST, body)
        if len(wire) > MAX_PACKET_SIZE:
            raise ValueError("interest exceeds maximum packet size")
        return wire


@dataclass(frozen=True)
class DataPacket:
    name: Name
    content: bytes = b""
    freshness_ms: int = 0
    sig_info: SignatureInfo = field(default_factory=SignatureInfo)
    sig_value: bytes = b""

    def __post_init__(self) -> None:
        if not self.name.components:
            raise ValueError("data name must be non-empty")
        if self.freshness_ms < 0:
            raise ValueError("freshness must be non-negative")

    def signed_portion(self) -> bytes:
        """Bytes covered by the signature: name, metainfo, content, sig info."""
        return (
            self.name.encode()
            + self._metainfo()
            + encode_tlv(T_CONTENT, self.content)
            + self.sig_info.encode()
        )

    def _metainfo(self) -> bytes:
        freshness = encode_tlv(T_FRESHNESS_PERIOD, encode_nonneg_int(self.freshness_ms))
        return encode_tlv(T_META_INFO, freshness)

    def encode(self) -> bytes:
        body = self.signed_portion() + encode_tlv(T_SIGNATURE_VALUE, self.sig_value)
        wire = encode_tlv(T_DATA, body)
        if len(wire) > MAX_PACKET_SIZE:
            raise ValueError("data exceeds maximum packet size")
        return wire

    def with_signature(self, sig_value: bytes) -> "DataPacket":
        return DataPacket(self.name, self.content, self.freshness_ms, self.sig_info, sig_value)


Packet = InterestPacket | DataPacket


def _decode_interest_body(body: bytes) -> InterestPacket:
    name = None
    nonce = None
    lifetime = DEFAULT_INTEREST_LIFETIME_MS
    app_params = None
    offset = 0
    while offset < len(body):
        tlv_type, value, offset = decode_tlv(body, offset)
        if tlv_type == T_NAME:
            name = Name.decode_value(value)
        elif tlv_type == T_NONCE:
            if len(value) != 4:
                raise MalformedTlv("nonce must be 4 bytes")
            nonce = value
        elif tlv_type == T_INTEREST_LIFETIME:
            lifetime = decode_nonneg_int(value)
        elif tlv_type == T_APP_PARAMETERS:
            app_params = value
        elif _is_critical(tlv_type):
            raise MalformedTlv(f"unknown critical type 0x{tlv_type:02x} in interest")
    if name is None or not name.components:
        raise MalformedTlv("interest lacks a name")
    if nonce is None:
        raise MalformedTlv("interest lacks a nonce")
    if lifetime <= 0:
        raise MalformedTlv("interest lifetime must be positive")
    return InterestPacket(name, nonce, lifetime, app_params)


def _decode_metainfo(value: bytes) -> int:
    freshness = 0
    offset = 0
    while offset < len(value):
        tlv_type, body, offset = decode_tlv(value, offset)
        if tlv_type == T_FRESHNESS_PERIOD:
            freshness = decode_nonneg_int(body)
        elif _is_critical(tlv_type):
            raise MalformedTlv(f"unknown critical type 0x{tlv_type:02x} in metainfo")
    return freshness


def _decode_data_body(body: bytes) -> DataPacket:
    name = None
    content = b""
    freshness = 0
    sig_info = None
    sig_value = None
    offset = 0
    while offset < len(body):
        tlv_type, value, offset = decode_tlv(body, offset)
        if tlv_type == T_NAME:
            name = Name.decode_value(value)
        elif tlv_type == T_META_INFO:
            freshness = _decode_metainfo(value)
        elif tlv_type == T_CONTENT:
            content = value
        elif tlv_type == T_SIGNATURE_INFO:
            sig_info = SignatureInfo.decode_value(value)
        elif tlv_type == T_SIGNATURE_VALUE:
            sig_value = value
        elif _is_critical(tlv_type):
            raise MalformedTlv(f"unknown critical type 0x{tlv_type:02x} in data")
    if name is None or not name.components:
        raise MalformedTlv("data lacks a name")
    if sig_info is None:
        raise MalformedTlv("data lacks signature info")
    if sig_value is None:
        raise MalformedTlv("data lacks signature value")
    return DataPacket(name, content, freshness, sig_info, sig_value)


def decode_packet(wire: bytes) -> Packet:
    """Parse one Interest or Data packet; trailing bytes are an error."""
    if len(wire) > MAX_PACKET_SIZE:
        raise MalformedTlv("packet exceeds maximum size")
    outer_type, body, end = decode_tlv(wire, 0)
    if end != len(wire):
        raise MalformedTlv("trailing bytes after packet")
    try:
        if outer_type == T_INTEREST:
            return _decode_interest_body(body)
        if outer_type == T_DATA:
            return _decode_data_body(body)
    except ValueError as exc:
        if isinstance(exc, MalformedTlv):
            raise
        raise MalformedTlv(str(exc)) from exc
    raise MalformedTlv(f"unknown packet type 0x{outer_type:02x}")


def peek_name(wire: bytes) -> tuple[int, Name]:
    """Cheap extraction of (packet type, name) without a full parse."""
    outer_type, body, _ = decode_tlv(wire, 0)
    if outer_type not in (T_INTEREST, T_DATA):
        raise MalformedTlv(f"unknown packet type 0x{outer_type:02x}")
    offset = 0
    while offset < len(body):
        tlv_type, value, offset = decode_tlv(body, offset)
        if tlv_type == T_NAME:
            return outer_type, Name.decode_value(value)
    raise MalformedTlv("packet lacks a name")


def signed_portion(data: DataPacket) -> bytes:
    return data.signed_portion()
