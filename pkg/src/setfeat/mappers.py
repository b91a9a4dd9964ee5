"""Shallow self-attention feature mappers over backbone activations.

Each mapper reads the activation of one backbone block, treats every 1x1
spatial position as a patch token, runs a single head of scaled dot-product
attention over the patches, and mean-pools the attended values into one
feature vector.  A model carries M such mappers spread across blocks; their
outputs, stacked in canonical (block-ascending, slot-ascending) order, form
the feature set that represents an image.

All mappers emit vectors of the same width D_out (the last block's channel
count), so sets from different depths are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, BackboneConfig
from .nn import batchnorm2d, conv2d, kaiming_uniform, softmax
from .rng import Rng
from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_bias,
    concat_axis,
    matmul,
    mean_axis,
    reshape,
    scale,
    transpose,
)

MAPPER_STYLES = ("fc", "conv-bn")
RESIDUAL_MODES = ("auto", "on", "off")


@dataclass(frozen=True)
class MapperLayout:
    per_block: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_block", tuple(int(c) for c in self.per_block))
        if any(c < 0 for c in self.per_block):
            raise ValueError(f"mapper counts must be non-negative, got {self.per_block}")
        if sum(self.per_block) < 1:
            raise ValueError("layout must place at least one mapper")

    @property
    def total(self) -> int:
        return sum(self.per_block)

    def slots(self) -> list[tuple[int, int]]:
        """Canonical (block, slot) order, both 1-based."""
        return [
            (b, s)
            for b, count in enumerate(self.per_block, start=1)
            for s in range(1, count + 1)
        ]


@dataclass
class FeatureSet:
    """One image's set representation: row m is mapper m's feature vector."""

    vectors: np.ndarray  # (M, D)
    mapper_ids: tuple[tuple[int, int], ...]  # (block, slot) per row


class Mapper:
    """Single-head dot-product attention over 1x1 patches of one activation.

    fc style realizes the q/k/v maps as FC layers on patch vectors; conv-bn
    style realizes them as 1x1 convolutions each followed by BN.  With the
    residual enabled, the (optionally projected) input patches are added to
    the attended values before pooling.
    """

    def __init__(
        self,
        index: int,
        block: int,
        slot: int,
        in_channels: int,
        out_dim: int,
        style: str,
        residual: bool,
        proj_bn: bool,
        rng: Rng,
    ):
        if style not in MAPPER_STYLES:
            raise ValueError(f"mapper style must be one of {MAPPER_STYLES}, got {style!r}")
        self.index = index
        self.block = block
        self.slot = slot
        self.in_channels = in_channels
        self.out_dim = out_dim
        self.style = style
        self.residual = residual
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

        pre = f"mapper{index}"
        widths = {"q": in_channels, "k": in_channels, "v": out_dim}
        for name, width in widths.items():
            if style == "fc":
                w = kaiming_uniform(rng, (width, in_channels), fan_in=in_channels)
            else:
                w = kaiming_uniform(rng, (width, in_channels, 1, 1), fan_in=in_channels)
            self.params[f"{pre}.{name}.weight"] = Tensor(w, requires_grad=True)
            self.params[f"{pre}.{name}.bias"] = Tensor(np.zeros(width), requires_grad=True)
            if style == "conv-bn":
                self._add_bn(f"{pre}.{name}_bn", width)
        self.has_projection = residual and in_channels != out_dim
        self.proj_has_bn = self.has_projection and proj_bn
        if self.has_projection:
            w = kaiming_uniform(rng, (out_dim, in_channels, 1, 1), fan_in=in_channels)
            self.params[f"{pre}.res_proj.weight"] = Tensor(w, requires_grad=True)
            if self.proj_has_bn:
                self._add_bn(f"{pre}.res_bn", out_dim)

    def _add_bn(self, name: str, width: int) -> None:
        self.params[f"{name}.gamma"] = Tensor(np.ones(width), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(width), requires_grad=True)
        self.buffers[f"{name}.running_mean"] = np.zeros(width, dtype=np.float64)
        self.buffers[f"{name}.running_var"] = np.ones(width, dtype=np.float64)

    def _bn(self, name: str, x: Tensor, mode: str) -> Tensor:
        return batchnorm2d(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            mode,
        )

    def _map(self, name: str, z: Tensor, patches: Tensor, n: int, p: int, mode: str) -> Tensor:
        """Apply the q/k/v map; returns (N, P, width) patch tokens."""
        pre = f"mapper{self.index}"
        w = self.params[f"{pre}.{name}.weight"]
        b = self.params[f"{pre}.{name}.bias"]
        if self.style == "fc":
            out = add_bias(matmul(patches, transpose(w)), b)  # (N*P, width)
            return reshape(out, (n, p, w.shape[0]))
        out = conv2d(z, w, b)
        out = self._bn(f"{pre}.{name}_bn", out, mode)
        return reshape(transpose(out, (0, 2, 3, 1)), (n, p, w.shape[0]))

    def forward(self, z: Tensor, mode: str) -> Tensor:
        """(N, C_b, H, W) activation -> (N, D_out) attended patch mean."""
        if z.ndim != 4 or z.shape[1] != self.in_channels:
            raise ShapeError(
                f"mapper{self.index} expects Nx{self.in_channels}xHxW, got {z.shape}"
            )
        n, c, h, w = z.shape
        p = h * w
        flat = reshape(transpose(z, (0, 2, 3, 1)), (n * p, c))  # patch tokens
        q = self._map("q", z, flat, n, p, mode)
        k = self._map("k", z, flat, n, p, mode)
        v = self._map("v", z, flat, n, p, mode)

        scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(c))
        beta = softmax(scores, axis=-1)  # (N, P, P), rows sum to 1
        attended = matmul(beta, v)  # (N, P, D)

        if self.residual:
            res = reshape(flat, (n, p, c))
            if self.has_projection:
                proj = conv2d(z, self.params[f"mapper{self.index}.res_proj.weight"])
                if self.proj_has_bn:
                    proj = self._bn(f"mapper{self.index}.res_bn", proj, mode)
                res = reshape(transpose(proj, (0, 2, 3, 1)), (n, p, self.out_dim))
            attended = add(attended, res)

        return mean_axis(attended, 1)  # (N, D)


def mapper_forward(mapper: Mapper, z: Tensor, mode: str) -> Tensor:
    return mapper.forward(z, mode)


class SetFeatExtractor:
    """Backbone plus attached mappers; produces stacked feature sets."""

    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        layout: MapperLayout,
        style: str = "fc",
        residual: str = "auto",
        proj_bn: bool = True,
        seed: int = 0,
    ):
        if len(layout.per_block) != len(backbone_cfg.blocks):
            raise ValueError(
                f"layout covers {len(layout.per_block)} blocks, backbone has {len(backbone_cfg.blocks)}"
            )
        if residual not in RESIDUAL_MODES:
            raise ValueError(f"residual must be one of {RESIDUAL_MODES}, got {residual!r}")
        use_residual = residual == "on" or (residual == "auto" and style == "conv-bn")

        root = Rng(seed)
        self.backbone = Backbone(backbone_cfg, root.split(0))
        self.layout = layout
        self.style = style
        self.residual = use_residual
        self.out_dim = backbone_cfg.blocks[-1].out_channels

        block_channels = [out for _, out in backbone_cfg.channel_plan()]
        self.mappers: list[Mapper] = []
        for m, (b, s) in enumerate(layout.slots(), start=1):
            self.mappers.append(
                Mapper(
                    index=m,
                    block=b,
                    slot=s,
                    in_channels=block_channels[b - 1],
                    out_dim=self.out_dim,
                    style=style,
                    residual=use_residual,
                    proj_bn=proj_bn,
                    rng=root.split(m),
                )
            )

        self.params: dict[str, Tensor] = dict(self.backbone.params)
        self.buffers: dict[str, np.ndarray] = dict(self.backbone.buffers)
        for mp in self.mappers:
            self.params.update(mp.params)
            self.buffers.update(mp.buffers)

    @property
    def n_mappers(self) -> int:
        return len(self.mappers)

    @property
    def num_mappers(self) -> int:
        return len(self.mappers)

    @property
    def mapper_ids(self) -> tuple[tuple[int, int], ...]:
        return tuple((mp.block, mp.slot) for mp in self.mappers)

    def extract_set(self, x: Tensor, mode: str) -> Tensor:
        """(N, C, H, W) images -> (N, M, D) stacked feature sets."""
        acts = self.backbone.forward_blocks(x, mode)
        rows = []
        for mp in self.mappers:
            h = mp.forward(acts[mp.block - 1], mode)  # (N, D)
            rows.append(reshape(h, (h.shape[0], 1, self.out_dim)))
        return concat_axis(rows, axis=1)

    def feature_sets(self, x: Tensor, mode: str = "eval") -> list[FeatureSet]:
        """Plain-array per-image FeatureSets (no gradient tape)."""
        from .tensor import no_grad

        with no_grad():
            stacked = self.extract_set(x, mode).data
        ids = self.mapper_ids
        return [FeatureSet(vectors=stacked[i].copy(), mapper_ids=ids) for i in range(stacked.shape[0])]

    def count_backbone_params(self) -> int:
        return self.backbone.count_params()

    def count_mapper_params(self) -> int:
        return sum(p.size for mp in self.mappers for p in mp.params.values())

    def count_params(self) -> int:
        return self.count_backbone_params() + self.count_mapper_params()

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

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


def build_setfeat(
    backbone_cfg: BackboneConfig,
    layout: MapperLayout,
    style: str = "fc",
    residual: str = "auto",
    proj_bn: bool = True,
    seed: int = 0,
) -> SetFeatExtractor:
    return SetFeatExtractor(backbone_cfg, layout, style, residual, proj_bn, seed)
