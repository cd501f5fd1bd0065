"""SplitMix64 pseudorandom generator.

Every random choice in a run (scheduler picks, lottery tickets) is drawn from
SplitMix64 streams so that traces replay bit-for-bit from a seed.
"""

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# Stream labels for derive_seed; arbitrary distinct constants.
STREAM_SCHEDULER = 0x5343484544554C45
STREAM_TICKETS = 0x5449434B45545321


def mix64(z: int) -> int:
    """The SplitMix64 output finalizer."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def below(self, k: int) -> int:
        """Uniform integer in [0, k) via multiply-shift on one 64-bit draw."""
        if k <= 0:
            raise ValueError("below() needs a positive bound")
        return (self.next() * k) >> 64


def derive_seed(seed: int, stream: int) -> int:
    """Independent sub-stream seed for a named stream of a run."""
    return SplitMix64((seed ^ stream) & MASK64).next()
