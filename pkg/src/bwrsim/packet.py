from __future__ import annotations

from typing import Optional

STAMP_ORDER = (
    "ue_ingress",
    "enb_egress",
    "cm_ingress",
    "cmts_egress",
    "core_arrival",
    "core_departure",
    "ue_return",
)


class Packet:
    """A traced data unit with per-hop timestamps in microseconds."""

    __slots__ = ("id", "payload", "size", "flow", "lcg", "cm_tx_start") + STAMP_ORDER

    def __init__(self, id: int, payload: int, size: int, flow: str = "ping", lcg: int = 0):
        self.id = id
        self.payload = payload
        # on-wire IP size; what LTE grants and DOCSIS frames carry
        self.size = size
        self.flow = flow
        self.lcg = lcg
        # start of the DOCSIS grant that carried the first byte
        self.cm_tx_start: Optional[int] = None
        for name in STAMP_ORDER:
            setattr(self, name, None)

    def stamps(self) -> dict[str, Optional[int]]:
        return {name: getattr(self, name) for name in STAMP_ORDER}

    def stamps_monotone(self) -> bool:
        seen = [v for v in (getattr(self, n) for n in STAMP_ORDER) if v is not None]
        return all(a <= b for a, b in zip(seen, seen[1:]))

    @property
    def rtt(self) -> Optional[int]:
        if self.ue_return is None or self.ue_ingress is None:
            return None
        return self.ue_return - self.ue_ingress

    def __repr__(self) -> str:
        return f"Packet(id={self.id}, size={self.size}, flow={self.flow!r})"
