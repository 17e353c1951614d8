"""Periodic broadcast and iid lossy delivery between consecutive vehicles.

Wire layout of a packet (little-endian)::

    u16 sender | u32 step | u8 flags (bit0 profile, bit1 GP payload)
    [N x f64 acceleration profile] [13 x f64 GP payload]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .gp import PAYLOAD_SIZE

_HEADER = struct.Struct("<HIB")
FLAG_PROFILE = 0x1
FLAG_GP = 0x2


@dataclass(frozen=True)
class Packet:
    sender: int
    step: int
    profile: tuple | None = None
    gp_payload: bytes | None = None

    def __post_init__(self):
        if self.profile is None and self.gp_payload is None:
            raise ValueError("packet carries no payload")
        if self.gp_payload is not None and len(self.gp_payload) != PAYLOAD_SIZE:
            raise ValueError("GP payload must be 13 binary64 values")

    def encode(self) -> bytes:
        flags = (FLAG_PROFILE if self.profile is not None else 0) | \
                (FLAG_GP if self.gp_payload is not None else 0)
        out = _HEADER.pack(self.sender, self.step, flags)
        if self.profile is not None:
            out += struct.pack(f"<{len(self.profile)}d", *self.profile)
        if self.gp_payload is not None:
            out += self.gp_payload
        return out

    @classmethod
    def decode(cls, data: bytes, horizon: int) -> "Packet":
        sender, step, flags = _HEADER.unpack_from(data)
        pos = _HEADER.size
        profile = gp_payload = None
        if flags & FLAG_PROFILE:
            profile = struct.unpack_from(f"<{horizon}d", data, pos)
            pos += 8 * horizon
        if flags & FLAG_GP:
            gp_payload = bytes(data[pos:pos + PAYLOAD_SIZE])
            pos += PAYLOAD_SIZE
        if pos != len(data):
            raise ValueError("trailing or missing bytes in packet")
        return cls(sender, step, profile, gp_payload)


@dataclass(frozen=True)
class ChannelConfig:
    t_c: float = 0.1
    p_success: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_success <= 1.0:
            raise ValueError("success probability must lie in [0, 1]")
        if self.t_c <= 0:
            raise ValueError("communication period must be positive")


def broadcast_period(t_s, t_c) -> int:
    ratio = t_c / t_s
    period = int(round(ratio))
    if period < 1 or abs(ratio - period) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"t_c={t_c} is not an integer multiple of t_s={t_s}")
    return period


def is_broadcast_step(k, t_s, t_c) -> bool:
    return k % broadcast_period(t_s, t_c) == 0


def deliver(packet, config: ChannelConfig, rng: np.random.Generator) -> bool:
    """One Bernoulli(p_success) draw; always consumes exactly one draw."""
    return bool(rng.random() < config.p_success)


class Channel:
    """Lossy links i -> i+1 driven by a counter-based generator (Philox).

    Draws are consumed once per link per broadcast step, in link order,
    whatever the success probability.
    """

    def __init__(self, config: ChannelConfig, t_s: float):
        self.config = config
        self.t_s = t_s
        self.period = broadcast_period(t_s, config.t_c)
        self.rng = np.random.Generator(np.random.Philox(config.seed))

    def broadcast_step(self, k) -> bool:
        return k % self.period == 0

    def transmit(self, k, packets):
        """Deliver the packets sent at step ``k``; returns (packet, delivered) pairs."""
        if not self.broadcast_step(k):
            return []
        ordered = sorted(packets, key=lambda p: p.sender)
        return [(p, deliver(p, self.config, self.rng)) for p in ordered]
