"""Minimal MQTT (QoS0/QoS1) broker and client."""

from e5sh.mqtt.broker import Broker, Delivery, InFlight, Session
from e5sh.mqtt.client import MqttClient
from e5sh.mqtt.packet import (MalformedPacket, MqttPacket, PacketReader, PacketType,
                              decode_packet, decode_remaining_length, encode_packet,
                              encode_remaining_length, topic_matches)

__all__ = [
    "Broker", "Delivery", "InFlight", "Session", "MqttClient", "MalformedPacket",
    "MqttPacket", "PacketReader", "PacketType", "decode_packet", "decode_remaining_length",
    "encode_packet", "encode_remaining_length", "topic_matches",
]
