"""Model configuration shared by the network modules."""

from __future__ import annotations

from dataclasses import dataclass, field

INIT_MODES = ("zeros", "cri-paper-literal", "cri-soft-argmax", "flow-head")
AGGREGATE_MODES = ("broadcast-sum", "separate-1d")
QUERY_MODES = ("separate", "same")
PYRAMID_KERNELS = (1, 2, 4, 8)


@dataclass
class ModelConfig:
    d: int = 4
    channels: int = 64
    cprime: int | None = None  # None -> channels // 2
    ctx_channels: int = 128  # split evenly into GRU hidden init / context input
    encoder_widths: tuple[int, int] = (32, 48)
    radius: int = 3
    scale_corr: bool = True
    aggregate_mode: str = "broadcast-sum"
    queries: str = "separate"
    csc: bool = True
    init_mode: str = "cri-soft-argmax"
    motion_corr: int = 96
    motion_flow: int = 32
    motion_out: int = 80
    gru_levels: int = 1
    # the multi-level GRU variant is kept only as a recorded option
    rejected_variants: tuple[str, ...] = field(default=("gru_levels=3",), repr=False)

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if self.cprime is None:
            self.cprime = max(1, self.channels // 2)
        self.validate()

    @property
    def hidden_channels(self) -> int:
        return self.ctx_channels // 2

    @property
    def context_channels(self) -> int:
        return self.ctx_channels - self.hidden_channels

    @property
    def lookup_channels(self) -> int:
        """Per-pixel feature count produced by the correlation lookup."""
        taps = (2 * self.radius + 1) ** 2
        levels = len(PYRAMID_KERNELS)
        if not self.csc:
            return levels * taps
        if self.aggregate_mode == "broadcast-sum":
            return 2 * levels * taps
        return levels * taps + 2 * levels * (2 * self.radius + 1)

    def validate(self) -> None:
        if self.d not in (2, 4, 8):
            raise ValueError(f"downsample factor d must be 2, 4 or 8, got {self.d}")
        if self.channels < 1 or self.ctx_channels < 2:
            raise ValueError("channel counts must be positive (ctx_channels >= 2)")
        if not 1 <= self.cprime <= self.channels:
            raise ValueError(f"cprime must lie in [1, channels], got {self.cprime}")
        if self.radius < 0:
            raise ValueError(f"lookup radius must be >= 0, got {self.radius}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.aggregate_mode not in AGGREGATE_MODES:
            raise ValueError(f"aggregate_mode must be one of {AGGREGATE_MODES}, got {self.aggregate_mode!r}")
        if self.queries not in QUERY_MODES:
            raise ValueError(f"queries must be one of {QUERY_MODES}, got {self.queries!r}")
        if not self.csc and self.init_mode.startswith("cri"):
            raise ValueError(f"init_mode {self.init_mode!r} regresses the strip volumes and needs csc on")
        if self.gru_levels != 1:
            raise NotImplementedError(
                "only the single-level GRU is implemented; the 3-level variant is recorded, not built"
            )
        if self.motion_out <= 2:
            raise ValueError("motion_out must exceed the 2 flow channels it carries")
