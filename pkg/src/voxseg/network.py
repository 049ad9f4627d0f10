"""3D encoder-decoder segmentation network.

Four encoder stages of multi-scale fusion blocks with max-pool
downsampling, three decoder stages that upsample with transposed
convolutions, merge recalibrated skip features, and refine them with
adaptive attention plus another fusion block. The head emits three
independent sigmoid channels (enhancing tumor, whole tumor, tumor core).

Ablation switches swap the fusion blocks for plain convolutions and the
attention blocks for identities, reproducing a vanilla four-conv /
three-pool U-Net baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import (
    DropoutMode,
    Tensor,
    add,
    concat,
    contract,
    conv3d,
    conv_transpose3d,
    dropout,
    global_avg_pool,
    group_norm,
    maxpool3d,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
)

__all__ = [
    "NetworkConfig",
    "Module",
    "Conv3d",
    "ConvTranspose3d",
    "GroupNorm",
    "Dropout",
    "ChannelAttention",
    "FeatureCalibration",
    "MultiScaleFusion",
    "PlainConvBlock",
    "AdaptiveAttention",
    "SkipRecalibration",
    "TumorSegNet",
    "count_params",
    "count_flops",
]


@dataclass
class NetworkConfig:
    """Architecture hyperparameters, including the ablation switches."""

    in_channels: int = 5
    out_channels: int = 3
    stage_widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    gn_groups: int = 4
    dropout_rate: float = 0.2
    msff_kernel: int = 3
    msff_dilation: int = 2
    ca_reduction: int = 2
    aam_mode: str = "channel"
    spatial_attention_voxel_cap: int = 32768
    aam_before_merge: bool = False
    use_msff: bool = True
    use_aam: bool = True

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if self.aam_mode not in ("channel", "spatial"):
            raise ValueError(f"aam_mode {self.aam_mode!r} not in ('channel', 'spatial')")
        if self.msff_kernel not in (1, 3, 5, 7):
            raise ValueError(f"msff_kernel {self.msff_kernel} not in (1, 3, 5, 7)")
        if len(self.stage_widths) != 4:
            raise ValueError(f"need exactly 4 stage widths, got {len(self.stage_widths)}")
        for w in self.stage_widths:
            if w % self.gn_groups:
                raise ValueError(f"stage width {w} not divisible by gn_groups {self.gn_groups}")
            if w % self.ca_reduction:
                raise ValueError(f"stage width {w} not divisible by ca_reduction {self.ca_reduction}")


class Module:
    """Minimal layer base: parameter discovery via attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, attr in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(attr, Tensor) and attr.requires_grad:
                yield full, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(full)
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def cast_parameters(self, dtype) -> "Module":
        """In-place precision change of every parameter (for grad checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ValueError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, p in own.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
            p.data = state[name].astype(p.data.dtype)


def _he_weight(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    std = float(np.sqrt(2.0 / fan_in))
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 dilation: int = 1, bias: bool = True):
        self.kernel = kernel
        self.dilation = dilation
        self.padding = dilation * (kernel - 1) // 2
        self.weight = _he_weight(rng, (cout, cin, kernel, kernel, kernel), cin * kernel ** 3)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, stride=1, padding=self.padding, dilation=self.dilation)

    def flops(self, n_out: int) -> int:
        cout, cin, k = self.weight.shape[0], self.weight.shape[1], self.kernel
        return 2 * cin * k ** 3 * cout * n_out


class ConvTranspose3d(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.weight = _he_weight(rng, (cin, cout, 2, 2, 2), cin)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose3d(x, self.weight, self.bias)

    def flops(self, n_in: int) -> int:
        cin, cout = self.weight.shape[0], self.weight.shape[1]
        return 2 * cin * cout * 8 * n_in


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        self.groups = groups
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, rate: float):
        self.rate = rate

    def forward(self, x: Tensor, mode: DropoutMode, rng) -> Tensor:
        if mode is not DropoutMode.OFF and self.rate > 0 and rng is None:
            raise ValueError("sampling dropout needs an rng")
        return dropout(x, self.rate, mode, rng)


class ChannelAttention(Module):
    """Squeeze-excite gate: per-channel sigmoid weights from pooled stats."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.reduce = Conv3d(channels, hidden, 1, rng)
        self.expand = Conv3d(hidden, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        s = sigmoid(self.expand.forward(relu(self.reduce.forward(global_avg_pool(x)))))
        return mul(x, s)

    def flops(self, n_out: int, channels: int) -> int:
        return n_out + self.reduce.flops(1) + self.expand.flops(1) + 2 * channels + n_out


class FeatureCalibration(Module):
    """ReLU -> group norm -> dropout -> channel attention, in that order."""

    def __init__(self, channels: int, gn_groups: int, rate: float, ca_reduction: int,
                 rng: np.random.Generator, use_ca: bool = True):
        self.norm = GroupNorm(gn_groups, channels)
        self.drop = Dropout(rate)
        self.attn = ChannelAttention(channels, ca_reduction, rng) if use_ca else None

    def forward(self, x: Tensor, mode: DropoutMode, rng) -> Tensor:
        y = self.drop.forward(self.norm.forward(relu(x)), mode, rng)
        if self.attn is not None:
            y = self.attn.forward(y)
        return y

    def flops(self, n_out: int, channels: int) -> int:
        total = 3 * n_out  # relu + norm + dropout at one op per element
        if self.attn is not None:
            total += self.attn.flops(n_out, channels)
        return total


class MultiScaleFusion(Module):
    """Parallel point / local / dilated conv branches with residual fusion.

    Each branch is calibrated, the local and dilated outputs are summed
    and refined by a pointwise conv, and the pointwise branch is added
    back as the residual.
    """

    def __init__(self, cin: int, cout: int, cfg: NetworkConfig, rng: np.random.Generator):
        k = cfg.msff_kernel
        self.branch_point = Conv3d(cin, cout, 1, rng)
        self.branch_local = Conv3d(cin, cout, k, rng)
        self.branch_dilated = Conv3d(cin, cout, k, rng, dilation=cfg.msff_dilation)
        self.calib_point = FeatureCalibration(cout, cfg.gn_groups, cfg.dropout_rate, cfg.ca_reduction, rng)
        self.calib_local = FeatureCalibration(cout, cfg.gn_groups, cfg.dropout_rate, cfg.ca_reduction, rng)
        self.calib_dilated = FeatureCalibration(cout, cfg.gn_groups, cfg.dropout_rate, cfg.ca_reduction, rng)
        self.fuse = Conv3d(cout, cout, 1, rng)

    def forward(self, x: Tensor, mode: DropoutMode, rng) -> Tensor:
        b1 = self.calib_point.forward(self.branch_point.forward(x), mode, rng)
        b2 = self.calib_local.forward(self.branch_local.forward(x), mode, rng)
        b3 = self.calib_dilated.forward(self.branch_dilated.forward(x), mode, rng)
        return add(b1, self.fuse.forward(add(b2, b3)))

    def flops(self, n_out: int) -> int:
        cout = self.fuse.weight.shape[0]
        total = self.branch_point.flops(n_out) + self.branch_local.flops(n_out) + self.branch_dilated.flops(n_out)
        total += self.calib_point.flops(n_out, cout) + self.calib_local.flops(n_out, cout)
        total += self.calib_dilated.flops(n_out, cout)
        total += self.fuse.flops(n_out) + 2 * n_out  # two fusion adds
        return total


class PlainConvBlock(Module):
    """Ablation stand-in for the fusion block: one conv plus calibration
    without channel attention."""

    def __init__(self, cin: int, cout: int, cfg: NetworkConfig, rng: np.random.Generator):
        self.conv = Conv3d(cin, cout, 3, rng)
        self.calib = FeatureCalibration(cout, cfg.gn_groups, cfg.dropout_rate, cfg.ca_reduction, rng, use_ca=False)

    def forward(self, x: Tensor, mode: DropoutMode, rng) -> Tensor:
        return self.calib.forward(self.conv.forward(x), mode, rng)

    def flops(self, n_out: int) -> int:
        return self.conv.flops(n_out) + self.calib.flops(n_out, self.conv.weight.shape[0])


class AdaptiveAttention(Module):
    """Key/query/value attention with a learned, zero-initialized gate.

    Channel mode builds a CxC gram matrix over the flattened volume;
    spatial mode builds an NxN matrix and is capped to small volumes.
    The gated attention output modulates the input elementwise and is
    added back, so a freshly initialized block is the identity map.
    """

    def __init__(self, channels: int, cfg: NetworkConfig, rng: np.random.Generator):
        self.mode = cfg.aam_mode
        self.voxel_cap = cfg.spatial_attention_voxel_cap
        self.proj_k = Conv3d(channels, channels, 1, rng)
        self.proj_q = Conv3d(channels, channels, 1, rng)
        self.proj_v = Conv3d(channels, channels, 1, rng)
        self.drop_k = Dropout(cfg.dropout_rate)
        self.drop_q = Dropout(cfg.dropout_rate)
        self.drop_v = Dropout(cfg.dropout_rate)
        self.gate = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor, mode: DropoutMode, rng) -> Tensor:
        b, c = x.shape[0], x.shape[1]
        n = int(np.prod(x.shape[2:]))
        if self.mode == "spatial" and n > self.voxel_cap:
            raise ValueError(
                f"spatial attention over {n} voxels exceeds the configured cap of {self.voxel_cap}"
            )
        k = reshape(self.drop_k.forward(self.proj_k.forward(x), mode, rng), (b, c, n))
        q = reshape(self.drop_q.forward(self.proj_q.forward(x), mode, rng), (b, c, n))
        v = reshape(self.drop_v.forward(self.proj_v.forward(x), mode, rng), (b, c, n))
        if self.mode == "channel":
            scale = 1.0 / float(np.sqrt(n))
            logits = mul(contract(k, q, "bin,bjn->bij"), Tensor(np.asarray(scale, dtype=x.dtype)))
            attn = softmax(logits, axis=2)
            mixed = contract(attn, v, "bij,bjn->bin")
        else:
            scale = 1.0 / float(np.sqrt(c))
            logits = mul(contract(k, q, "bcm,bcn->bmn"), Tensor(np.asarray(scale, dtype=x.dtype)))
            attn = softmax(logits, axis=2)
            mixed = contract(v, attn, "bcn,bmn->bcm")
        mixed = reshape(mixed, x.shape)
        gate = reshape(self.gate, (1, c, 1, 1, 1))
        return add(mul(mul(gate, x), mixed), x)

    def flops(self, n_out: int, channels: int) -> int:
        conv = self.proj_k.flops(n_out) * 3 + 3 * n_out  # projections + dropouts
        if self.mode == "channel":
            attn = 2 * channels * channels * n_out * 2 + channels * channels
        else:
            attn = 2 * channels * n_out * n_out * 2 + n_out * n_out
        return conv + attn + 3 * n_out  # gate multiply, modulation, residual add


class SkipRecalibration(Module):
    """Pointwise conv applied to encoder features before the skip merge."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = Conv3d(channels, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv.forward(x)

    def flops(self, n_out: int) -> int:
        return self.conv.flops(n_out)


class _DecoderStage(Module):
    def __init__(self, cin: int, width: int, cfg: NetworkConfig, rng: np.random.Generator):
        self.up = ConvTranspose3d(cin, width, rng)
        self.skip = SkipRecalibration(width, rng)
        attn_channels = width if cfg.aam_before_merge else 2 * width
        self.attn = AdaptiveAttention(attn_channels, cfg, rng) if cfg.use_aam else None
        self.before_merge = cfg.aam_before_merge
        block = MultiScaleFusion if cfg.use_msff else PlainConvBlock
        self.block = block(2 * width, width, cfg, rng)

    def forward(self, x: Tensor, enc_feat: Tensor, mode: DropoutMode, rng) -> Tensor:
        up = self.up.forward(x)
        if self.attn is not None and self.before_merge:
            up = self.attn.forward(up, mode, rng)
        merged = concat([self.skip.forward(enc_feat), up], axis=1)
        if self.attn is not None and not self.before_merge:
            merged = self.attn.forward(merged, mode, rng)
        return self.block.forward(merged, mode, rng)


class TumorSegNet(Module):
    """Encoder-decoder network producing three sigmoid region channels."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        widths = config.stage_widths
        block = MultiScaleFusion if config.use_msff else PlainConvBlock
        chain = [config.in_channels] + list(widths)
        self.encoders = [block(chain[i], chain[i + 1], config, rng) for i in range(4)]
        self.decoders = [
            _DecoderStage(widths[i + 1], widths[i], config, rng) for i in (2, 1, 0)
        ]
        self.head = Conv3d(widths[0], config.out_channels, 1, rng)

    def forward(self, x: Tensor, mode: DropoutMode = DropoutMode.OFF, rng=None) -> Tensor:
        if x.ndim != 5:
            raise ValueError(f"expected (B,C,D,H,W) input, got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        for n in x.shape[2:]:
            if n % 8:
                raise ValueError(f"spatial extents must be divisible by 8, got {x.shape[2:]}")
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)

        feats = []
        for i, enc in enumerate(self.encoders):
            x = enc.forward(x, mode, rng)
            feats.append(x)
            if i < 3:
                x = maxpool3d(x)
        for stage, skip_idx in zip(self.decoders, (2, 1, 0)):
            x = stage.forward(x, feats[skip_idx], mode, rng)
        return sigmoid(self.head.forward(x))

    def layer_manifest(self) -> list[tuple[str, str]]:
        """Ordered (name, kind) description of the macro blocks."""
        kind = "multiscale_block" if self.config.use_msff else "conv_block"
        entries = []
        for i in range(4):
            entries.append((f"encoder{i}", kind))
            if i < 3:
                entries.append((f"pool{i}", "maxpool"))
        for i, stage_idx in enumerate((2, 1, 0)):
            name = f"decoder{stage_idx}"
            entries.append((f"{name}.upsample", "transposed_conv"))
            entries.append((f"{name}.skip", "skip_recalibration"))
            if self.config.use_aam:
                entries.append((f"{name}.attention", "adaptive_attention"))
            entries.append((f"{name}.block", kind))
        entries.append(("head", "output_head"))
        return entries

    def count_flops(self, spatial: tuple[int, int, int]) -> int:
        """Forward multiply-accumulates x2 for convs and contractions;
        normalization, activations, pooling and dropout count one op per
        output element."""
        d, h, w = spatial
        n = d * h * w
        widths = self.config.stage_widths
        total = 0
        for i, enc in enumerate(self.encoders):
            total += enc.flops(n)
            if i < 3:
                total += n // 8  # pooled elements
                n //= 8
        for stage, width in zip(self.decoders, (widths[2], widths[1], widths[0])):
            total += stage.up.flops(n)
            n *= 8
            total += stage.skip.flops(n)
            if stage.attn is not None:
                attn_c = width if stage.before_merge else 2 * width
                total += stage.attn.flops(n, attn_c)
            total += stage.block.flops(n)
        total += self.head.flops(n) + n * self.config.out_channels  # head conv + sigmoid
        return total


def count_params(net: Module) -> int:
    return sum(p.data.size for _, p in net.named_parameters())


def count_flops(net: TumorSegNet, spatial: tuple[int, int, int]) -> int:
    return net.count_flops(spatial)
