"""Linear projector plus a stack of ChordMixer layers.

A block rotates channel groups ("tracks") along the token axis by different
power-of-two offsets and then applies a per-token MLP with a residual
connection. A layer applies ``ceil(log2 N)`` blocks for ``N`` tokens; with
offsets ``0, 1, 2, ..., 2**(ceil(log2 N) - 1)`` every output token then
depends on every input token.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import ndiff as nd
from .ndiff import Parameter, Tape, Tensor
from .seqcore import WIDTH


class MixerConfigError(ValueError):
    pass


def num_blocks(tokens: int) -> int:
    """``ceil(log2 N)`` blocks per layer (0 for a single token)."""
    if tokens < 1:
        raise MixerConfigError("token count must be >= 1")
    return (tokens - 1).bit_length()


def num_tracks(tokens: int) -> int:
    """One unshifted track plus one track per power-of-two offset."""
    return num_blocks(tokens) + 1


def track_sizes(channels: int, tracks: int) -> list[int]:
    if channels < tracks:
        raise MixerConfigError(f"{channels} channels cannot hold {tracks} rotation tracks")
    base, extra = divmod(channels, tracks)
    return [base + (1 if t < extra else 0) for t in range(tracks)]


def track_offsets(tokens: int, channels: int) -> np.ndarray:
    """Per-channel circular shift: track 0 gets 0, track ``t >= 1`` gets ``2**(t-1)``."""
    tracks = num_tracks(tokens)
    sizes = track_sizes(channels, tracks)
    shifts = [0] + [2 ** (t - 1) for t in range(1, tracks)]
    return np.repeat(np.array(shifts, dtype=np.int64), sizes)


def rotate_tracks(x: Tensor, offsets: np.ndarray | None = None) -> Tensor:
    """Circularly shift each channel track along the token axis."""
    if offsets is None:
        offsets = track_offsets(x.shape[-2], x.shape[-1])
    return nd.roll_channels(x, offsets)


@dataclass(frozen=True)
class MixerConfig:
    """Backbone shape.

    ``max_length`` is the largest token count the network accepts, CLS rows
    included; it fixes how many blocks per layer carry parameters.
    """

    channels: int = 308
    hidden: int = 512
    num_layers: int = 4
    max_length: int = 1010
    dropout_rate: float = 0.1
    input_width: int = WIDTH
    layer_norm: bool = True
    activation: str = "gelu"

    def __post_init__(self):
        if self.input_width != WIDTH:
            raise MixerConfigError(f"input width must be {WIDTH}")
        if self.hidden < 1:
            raise MixerConfigError("hidden must be >= 1")
        if self.num_layers < 0:
            raise MixerConfigError("num_layers must be >= 0")
        if self.max_length < 1:
            raise MixerConfigError("max_length must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise MixerConfigError("dropout_rate must be in [0, 1)")
        if self.activation not in ("gelu", "relu"):
            raise MixerConfigError("activation must be gelu or relu")
        track_sizes(self.channels, num_tracks(self.max_length))

    @property
    def blocks_per_layer(self) -> int:
        return num_blocks(self.max_length)

    def to_dict(self) -> dict:
        return asdict(self)


def init_mixer_params(config: MixerConfig, rng: np.random.Generator, prefix: str = "mixer") -> dict[str, Parameter]:
    D, I, H = config.input_width, config.channels, config.hidden
    total = max(1, config.num_layers * config.blocks_per_layer)
    params = {
        f"{prefix}.proj.w": Parameter(f"{prefix}.proj.w", rng.normal(0.0, 1.0 / math.sqrt(D), (D, I))),
        f"{prefix}.proj.b": Parameter(f"{prefix}.proj.b", np.zeros(I)),
    }
    for i in range(config.num_layers):
        for j in range(config.blocks_per_layer):
            stem = f"{prefix}.layer{i}.block{j}"
            params[f"{stem}.w1"] = Parameter(f"{stem}.w1", rng.normal(0.0, 1.0 / math.sqrt(I), (I, H)))
            params[f"{stem}.b1"] = Parameter(f"{stem}.b1", np.zeros(H))
            # residual branches start small so deep stacks stay near identity
            w2 = rng.normal(0.0, 1.0 / math.sqrt(H * total), (H, I))
            params[f"{stem}.w2"] = Parameter(f"{stem}.w2", w2)
            params[f"{stem}.b2"] = Parameter(f"{stem}.b2", np.zeros(I))
    return params


class ChordMixer:
    """Projector plus ``num_layers`` mixer layers over a shared parameter dict."""

    def __init__(self, config: MixerConfig, params: dict[str, Parameter], prefix: str = "mixer"):
        self.config = config
        self.params = params
        self.prefix = prefix
        missing = [n for n in self.parameter_names() if n not in params]
        if missing:
            raise MixerConfigError(f"missing parameters: {missing[:3]}...")

    def parameter_names(self) -> Iterator[str]:
        yield f"{self.prefix}.proj.w"
        yield f"{self.prefix}.proj.b"
        for i in range(self.config.num_layers):
            for j in range(self.config.blocks_per_layer):
                for leaf in ("w1", "b1", "w2", "b2"):
                    yield f"{self.prefix}.layer{i}.block{j}.{leaf}"

    def project(self, tape: Tape, x: Tensor) -> Tensor:
        if x.shape[-1] != self.config.input_width:
            raise nd.DimensionError(f"project: expected width {self.config.input_width}, got {x.shape[-1]}")
        w = tape.param(self.params[f"{self.prefix}.proj.w"])
        b = tape.param(self.params[f"{self.prefix}.proj.b"])
        return nd.linear(x, w, b)

    def block(
        self,
        tape: Tape,
        x: Tensor,
        layer: int,
        index: int,
        training: bool = False,
        rng: np.random.Generator | None = None,
        offsets: np.ndarray | None = None,
    ) -> Tensor:
        stem = f"{self.prefix}.layer{layer}.block{index}"
        cfg = self.config
        h = rotate_tracks(x, offsets)
        if cfg.layer_norm:
            h = nd.layer_norm(h)
        h = nd.linear(h, tape.param(self.params[f"{stem}.w1"]), tape.param(self.params[f"{stem}.b1"]))
        h = nd.gelu(h) if cfg.activation == "gelu" else nd.relu(h)
        h = nd.dropout(h, cfg.dropout_rate, rng, training)
        h = nd.linear(h, tape.param(self.params[f"{stem}.w2"]), tape.param(self.params[f"{stem}.b2"]))
        h = nd.dropout(h, cfg.dropout_rate, rng, training)
        return nd.add(x, h)

    def layer(
        self, tape: Tape, x: Tensor, layer: int, training: bool = False, rng: np.random.Generator | None = None
    ) -> Tensor:
        tokens = x.shape[-2]
        blocks = num_blocks(tokens)
        if blocks > self.config.blocks_per_layer:
            raise nd.DimensionError(f"{tokens} tokens exceed max_length {self.config.max_length}")
        offsets = track_offsets(tokens, self.config.channels)
        for j in range(blocks):
            x = self.block(tape, x, layer, j, training, rng, offsets)
        return x

    def __call__(
        self, tape: Tape, x: Tensor | np.ndarray, training: bool = False, rng: np.random.Generator | None = None
    ) -> Tensor:
        """``(..., N, 5)`` one-hot tokens (CLS rows included) to ``(..., N, I)``."""
        if not isinstance(x, Tensor):
            x = tape.constant(x)
        if training and self.config.dropout_rate > 0 and rng is None:
            raise ValueError("training with dropout needs an rng")
        h = self.project(tape, x)
        for i in range(self.config.num_layers):
            h = self.layer(tape, h, i, training, rng)
        return h


def matmul_flops(config: MixerConfig, tokens: int, head_width: int = WIDTH) -> int:
    """Forward multiply-add FLOPs (``2*m*n*k`` per matmul) for one sequence."""
    N, D, I, H = tokens, config.input_width, config.channels, config.hidden
    flops = 2 * N * D * I
    flops += config.num_layers * num_blocks(N) * (2 * N * I * H + 2 * N * H * I)
    flops += 2 * N * I * head_width
    return flops
