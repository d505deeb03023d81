from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError

# raw 10 ms frames stacked into one encoder frame
STACK = 3


@dataclass(frozen=True)
class Vocab:
    """Token ids: blank, start-of-turn, end-of-turn, then content tokens."""

    size: int = 16
    blank: int = 0
    sot: Optional[int] = 1
    eot: Optional[int] = 2

    def __post_init__(self):
        specials = [i for i in (self.blank, self.sot, self.eot) if i is not None]
        if len(set(specials)) != len(specials):
            raise ConfigError("special token ids must be distinct", ids=specials)
        if any(not 0 <= i < self.size for i in specials):
            raise ConfigError("special token id outside vocabulary", ids=specials, size=self.size)
        if self.size - len(specials) < 1:
            raise ConfigError("vocabulary has no content tokens", size=self.size)

    @property
    def specials(self) -> frozenset:
        return frozenset(i for i in (self.blank, self.sot, self.eot) if i is not None)

    @property
    def content_ids(self) -> list:
        return [i for i in range(self.size) if i not in self.specials]

    def is_content(self, token: int) -> bool:
        return 0 <= token < self.size and token not in self.specials

    def to_dict(self) -> dict:
        return {"size": self.size, "blank": self.blank, "sot": self.sot, "eot": self.eot}


def encoder_start(raw_start: int) -> int:
    return raw_start // STACK


def encoder_end(raw_end: int, raw_start: int) -> int:
    """Last encoder frame covered by a turn ending (exclusively) at ``raw_end``."""
    return max(-(-raw_end // STACK) - 1, encoder_start(raw_start))


def n_encoder_frames(n_raw: int) -> int:
    return -(-n_raw // STACK)
