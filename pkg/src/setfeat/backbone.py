"""Block-structured convolutional feature extractor.

A backbone is an ordered list of blocks; each block is either

    plain:    3x3 conv (no bias) -> BN -> ReLU
    residual: two such stages, plus a skip from the block input
              (1x1 conv + BN projection when the channel count changes)

followed by an optional 2x2 maxpool.  The forward pass returns the
activations of every block, since downstream feature mappers may attach at
any depth.  Conv layers carry no bias; BN absorbs it, which also makes
parameter counts land on the analytic per-layer formula.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import batchnorm2d, conv2d, kaiming_uniform, maxpool2
from .rng import Rng
from .tensor import ShapeError, Tensor, add, relu

BLOCK_KINDS = ("plain", "residual")


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    kind: str = "plain"
    downsample: bool = True

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError(f"block out_channels must be >= 1, got {self.out_channels}")
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"block kind must be one of {BLOCK_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int
    blocks: tuple[BlockSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be >= 1, got {self.input_channels}")
        if not self.blocks:
            raise ValueError("backbone needs at least one block")

    def channel_plan(self) -> list[tuple[int, int]]:
        """(in_channels, out_channels) per block, in order."""
        plan = []
        c = self.input_channels
        for spec in self.blocks:
            plan.append((c, spec.out_channels))
            c = spec.out_channels
        return plan


def conv4_config(channels=(64, 64, 64, 64), input_channels: int = 3) -> BackboneConfig:
    """The standard 4-block plain trunk: every block downsamples."""
    return BackboneConfig(
        input_channels=input_channels,
        blocks=tuple(BlockSpec(out_channels=c) for c in channels),
    )


class Backbone:
    """Built backbone: named parameters, BN running buffers, forward pass."""

    def __init__(self, cfg: BackboneConfig, seed: Rng | int = 0):
        rng = seed if isinstance(seed, Rng) else Rng(seed)
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        for b, ((c_in, c_out), spec) in enumerate(
            zip(cfg.channel_plan(), cfg.blocks), start=1
        ):
            self._add_stage(f"block{b}.conv1", f"block{b}.bn1", c_in, c_out, 3, rng)
            if spec.kind == "residual":
                self._add_stage(f"block{b}.conv2", f"block{b}.bn2", c_out, c_out, 3, rng)
                if c_in != c_out:
                    self._add_stage(f"block{b}.proj", f"block{b}.proj_bn", c_in, c_out, 1, rng)

    def _add_stage(self, conv: str, bn: str, c_in: int, c_out: int, k: int, rng: Rng):
        w = kaiming_uniform(rng, (c_out, c_in, k, k), fan_in=c_in * k * k)
        self.params[f"{conv}.weight"] = Tensor(w, requires_grad=True)
        self.params[f"{bn}.gamma"] = Tensor(np.ones(c_out), requires_grad=True)
        self.params[f"{bn}.beta"] = Tensor(np.zeros(c_out), requires_grad=True)
        self.buffers[f"{bn}.running_mean"] = np.zeros(c_out, dtype=np.float64)
        self.buffers[f"{bn}.running_var"] = np.ones(c_out, dtype=np.float64)

    def _stage(self, conv: str, bn: str, x: Tensor, mode: str, activate: bool) -> Tensor:
        y = conv2d(x, self.params[f"{conv}.weight"])
        y = batchnorm2d(
            y,
            self.params[f"{bn}.gamma"],
            self.params[f"{bn}.beta"],
            self.buffers[f"{bn}.running_mean"],
            self.buffers[f"{bn}.running_var"],
            mode,
        )
        return relu(y) if activate else y

    def forward_blocks(self, x: Tensor, mode: str) -> list[Tensor]:
        """All per-block activations, shallow to deep; mode threads to BN."""
        if x.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise ShapeError(
                f"backbone expects Nx{self.cfg.input_channels}xHxW input, got {x.shape}"
            )
        acts: list[Tensor] = []
        h = x
        for b, ((c_in, c_out), spec) in enumerate(
            zip(self.cfg.channel_plan(), self.cfg.blocks), start=1
        ):
            block_in = h
            h = self._stage(f"block{b}.conv1", f"block{b}.bn1", h, mode, activate=True)
            if spec.kind == "residual":
                h = self._stage(f"block{b}.conv2", f"block{b}.bn2", h, mode, activate=True)
                if c_in != c_out:
                    skip = self._stage(
                        f"block{b}.proj", f"block{b}.proj_bn", block_in, mode, activate=False
                    )
                else:
                    skip = block_in
                h = add(h, skip)
            if spec.downsample:
                h = maxpool2(h)
            acts.append(h)
        return acts

    def count_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expect = set(self.params) | set(self.buffers)
        got = set(state)
        if expect != got:
            missing = sorted(expect - got)
            extra = sorted(got - expect)
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)
        for name, buf in self.buffers.items():
            arr = np.asarray(state[name])
            if arr.shape != buf.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {buf.shape}")
            buf[...] = arr
