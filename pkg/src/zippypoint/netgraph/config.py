"""Network configuration: five independently quantizable groups.

The backbone is four two-conv blocks with 2x2 stride-2 pooling between the
first three, giving an output stride of 8 (one cell = 8x8 pixels). Three
decoder branches read the backbone output: keypoint score, in-cell
location offset, and descriptor logits. Precision is chosen per group:

* first_conv: the very first convolution (sees raw pixels)
* encoder:    the remaining seven backbone convolutions
* pooling:    the three downsampling ops, mode and placement
* decoder:    every branch convolution except the last of each branch
* heads:      the final convolution of each branch, per branch

Pooling placement is part of the mode: ``early_learned`` is learned
pooling hoisted ahead of each of the first three blocks instead of after,
which halves the resolution every convolution runs at while keeping the
output stride. The other modes pool after their block.
"""

from dataclasses import dataclass, replace

from ..errors import ConfigurationError

CONV_PRECISIONS = ("fp", "int8", "bin", "bin_r")
FIRST_CONV_PRECISIONS = ("fp", "int8")
HEAD_PRECISIONS = ("fp", "int8")
POOLING_MODES = ("max", "average", "subsample", "learned", "early_learned")

CELL = 8  # fixed by the three pooling stages
N_ENCODER_CONVS = 8
N_POOLS = 3


@dataclass(frozen=True)
class NetworkSpec:
    first_conv: str = "int8"
    encoder: str = "bin_r"
    pooling: str = "early_learned"
    decoder: str = "int8"
    score_head: str = "fp"
    location_head: str = "fp"
    descriptor_head: str = "int8"
    channels: tuple = (32, 64, 128, 256)
    descriptor_dim: int = 256
    k: int = 128

    def __post_init__(self):
        if self.first_conv not in FIRST_CONV_PRECISIONS:
            raise ConfigurationError(
                f"first_conv must be one of {FIRST_CONV_PRECISIONS}, got {self.first_conv!r}"
            )
        if self.encoder not in CONV_PRECISIONS:
            raise ConfigurationError(
                f"encoder must be one of {CONV_PRECISIONS}, got {self.encoder!r}"
            )
        if self.pooling not in POOLING_MODES:
            raise ConfigurationError(
                f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}"
            )
        if self.decoder not in CONV_PRECISIONS:
            raise ConfigurationError(
                f"decoder must be one of {CONV_PRECISIONS}, got {self.decoder!r}"
            )
        for name in ("score_head", "location_head", "descriptor_head"):
            v = getattr(self, name)
            if v not in HEAD_PRECISIONS:
                raise ConfigurationError(
                    f"{name} must be one of {HEAD_PRECISIONS}, got {v!r}"
                )
        if len(self.channels) != 4 or any(int(c) < 1 for c in self.channels):
            raise ConfigurationError(f"channels must be 4 positive ints, got {self.channels}")
        if self.descriptor_dim < 8 or self.descriptor_dim % 8 != 0:
            raise ConfigurationError(
                f"descriptor_dim must be a positive multiple of 8, got {self.descriptor_dim}"
            )
        if not (1 <= self.k <= self.descriptor_dim - 1):
            raise ConfigurationError(
                f"k must be in [1, {self.descriptor_dim - 1}], got {self.k}"
            )

    @property
    def cell(self) -> int:
        return CELL

    @property
    def pool_mode(self) -> str:
        return "learned" if self.pooling == "early_learned" else self.pooling

    @property
    def pool_placement(self) -> str:
        return "early" if self.pooling == "early_learned" else "late"

    def with_(self, **kw) -> "NetworkSpec":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return {
            "first_conv": self.first_conv,
            "encoder": self.encoder,
            "pooling": self.pooling,
            "decoder": self.decoder,
            "score_head": self.score_head,
            "location_head": self.location_head,
            "descriptor_head": self.descriptor_head,
            "channels": list(self.channels),
            "descriptor_dim": self.descriptor_dim,
            "k": self.k,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown spec fields: {sorted(extra)}")
        kw = dict(d)
        if "channels" in kw:
            kw["channels"] = tuple(kw["channels"])
        return cls(**kw)


def zippypoint_spec(**overrides) -> NetworkSpec:
    """The shipped mixed-precision configuration."""
    return NetworkSpec().with_(**overrides) if overrides else NetworkSpec()


def baseline_spec(**overrides) -> NetworkSpec:
    """Full-precision reference: every conv fp, plain max pooling."""
    spec = NetworkSpec(
        first_conv="fp",
        encoder="fp",
        pooling="max",
        decoder="fp",
        score_head="fp",
        location_head="fp",
        descriptor_head="fp",
    )
    return spec.with_(**overrides) if overrides else spec
