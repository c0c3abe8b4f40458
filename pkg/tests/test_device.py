from __future__ import annotations

import json

import pytest

from sovereign.device import load_device_config


def test_device_config_file_round_trip(tmp_path):
    path = tmp_path / "device.json"
    path.write_text(json.dumps({
        "device_label": "senor-1",
        "token_hex": "00112233445566778899aabbccddeeff",
        "service": "TEMP",
        "requested_location": "bedroom",
        "publish": {"content_id": "temp", "payload": "71.5",
                    "interval_ms": 2000},
    }))
    config, raw = load_device_config(path)
    assert config.device_label == "senor-1"
    assert config.token.secret == bytes.fromhex("00112233445566778899aabbccddeeff")
    assert config.service == "TEMP"
    assert config.requested_location == "bedroom"
    assert raw["publish"]["content_id"] == "temp"


def test_device_config_requires_core_fields(tmp_path):
    path = tmp_path / "device.json"
    path.write_text(json.dumps({"token_hex": "00"}))
    with pytest.raises(KeyError):
        load_device_config(path)
