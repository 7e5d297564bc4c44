import enum


class Level(enum.Enum):
    """Four-level qualitative keypoint scale.

    Serialized by name ("missing", "weak", ...); ordered by ``ordinal``.
    """

    MISSING = "missing"
    WEAK = "weak"
    ADEQUATE = "adequate"
    STRONG = "strong"

    @property
    def ordinal(self) -> int:
        return _ORDINALS[self]

    @classmethod
    def parse(cls, raw: "str | Level") -> "Level":
        if isinstance(raw, Level):
            return raw
        try:
            return cls(str(raw).strip().lower())
        except ValueError:
            raise ValueError(f"unknown keypoint level: {raw!r}") from None

    def is_deficient(self) -> bool:
        """Weak and missing keypoints qualify a chunk as failure evidence."""
        return self in (Level.MISSING, Level.WEAK)


_ORDINALS = {
    Level.MISSING: 0,
    Level.WEAK: 1,
    Level.ADEQUATE: 2,
    Level.STRONG: 3,
}


class Ordering(enum.Enum):
    LESS = "less"
    EQUAL = "equal"
    GREATER = "greater"


def level_order(a: Level, b: Level) -> Ordering:
    """Compare two levels on missing < weak < adequate < strong."""
    if a.ordinal < b.ordinal:
        return Ordering.LESS
    if a.ordinal > b.ordinal:
        return Ordering.GREATER
    return Ordering.EQUAL
