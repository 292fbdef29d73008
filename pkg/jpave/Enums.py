import enum


class Variant(enum.Enum):
    """Model variant: value generation or value classification."""

    GEN = "gen"
    CLS = "cls"


class TokenizeMode(enum.Enum):
    """How product text is split into tokens."""

    CHAR = "char"
    WHITESPACE = "whitespace"

    @property
    def joiner(self) -> str:
        return "" if self is TokenizeMode.CHAR else " "


class AttributeClass(enum.IntEnum):
    """The two classes of the attribute predictor."""

    EXIST = 0
    NONE = 1
