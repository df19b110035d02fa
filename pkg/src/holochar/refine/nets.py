"""The two refinement networks.

TexFeatNet maps the concatenated atlas inputs (partial texture, stacked motion
normals, target-view direction map) to a 75-channel dynamic texture: the first
3 channels are color, the remaining 72 free feature channels.  SRNet maps a
75-channel feature render to a 3-channel image at 4x the spatial resolution
(two pixel-shuffle doublings).

Depths are deliberately small: a 2-level encoder/decoder with skip connection
for the texture net and four residual blocks for the super-resolver.  Both are
fully convolutional; weights never depend on the input resolution.
"""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from .ops import AvgPool2, Conv3x3, LeakyReLU, Param, PixelShuffle2, UpsampleNearest2

DYN_CHANNELS = 75  # 3 color + 72 feature channels
SR_FACTOR = 4


class _Net:
    dtype: type

    def parameters(self) -> list[Param]:
        return [p for layer in self._layers for p in layer.parameters()]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def describe(self) -> str:
        lines = [f"{self.__class__.__name__}: {self.parameter_count()} parameters"]
        for p in self.parameters():
            lines.append(f"  {p.name}: {'x'.join(str(s) for s in p.value.shape)}")
        return "\n".join(lines)

    def _check_input(self, x: np.ndarray, channels: int) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != channels:
            raise ValidationError(
                f"{self.__class__.__name__} expects (H, W, {channels}) input, got {x.shape}"
            )
        if x.shape[0] < 4 or x.shape[1] < 4:
            raise ValidationError("input smaller than 4x4")
        return x


class TexFeatNet(_Net):
    """2-level encoder/decoder with a skip connection, 75-channel head."""

    def __init__(self, in_channels: int, base: int = 32, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.in_channels = in_channels
        self.out_channels = DYN_CHANNELS
        self.enc0 = Conv3x3(in_channels, base, rng, dtype, "enc0")
        self.enc1 = Conv3x3(base, base, rng, dtype, "enc1")
        self.pool = AvgPool2()
        self.mid0 = Conv3x3(base, base * 2, rng, dtype, "mid0")
        self.mid1 = Conv3x3(base * 2, base * 2, rng, dtype, "mid1")
        self.up = UpsampleNearest2()
        self.dec0 = Conv3x3(base * 3, base, rng, dtype, "dec0")
        self.dec1 = Conv3x3(base, base, rng, dtype, "dec1")
        self.head = Conv3x3(base, DYN_CHANNELS, rng, dtype, "head")
        self._acts = [LeakyReLU() for _ in range(6)]
        self._layers = [self.enc0, self.enc1, self.mid0, self.mid1, self.dec0, self.dec1, self.head]
        self._base = base

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x, self.in_channels)
        if x.shape[0] % 2 or x.shape[1] % 2:
            raise ValidationError("TexFeatNet needs even spatial dimensions (one pooling level)")
        a = self._acts
        h0 = a[0].forward(self.enc0.forward(x))
        h1 = a[1].forward(self.enc1.forward(h0))
        m = a[2].forward(self.mid0.forward(self.pool.forward(h1)))
        m = a[3].forward(self.mid1.forward(m))
        u = self.up.forward(m)
        cat = np.concatenate([u, h1], axis=2)
        d = a[4].forward(self.dec0.forward(cat))
        d = a[5].forward(self.dec1.forward(d))
        return self.head.forward(d)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        a = self._acts
        g = self.head.backward(grad_out)
        g = self.dec0.backward(a[4].backward(self.dec1.backward(a[5].backward(g))))
        gu = g[:, :, : 2 * self._base]
        gskip = g[:, :, 2 * self._base :]
        gm = self.up.backward(gu)
        gm = self.mid0.backward(a[2].backward(self.mid1.backward(a[3].backward(gm))))
        gh1 = self.pool.backward(gm) + gskip
        gh0 = self.enc1.backward(a[1].backward(gh1))
        return self.enc0.backward(a[0].backward(gh0))


class SRNet(_Net):
    """Residual stack plus two pixel-shuffle doublings and a 3-channel head."""

    def __init__(self, in_channels: int = DYN_CHANNELS, base: int = 32, blocks: int = 4, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.in_channels = in_channels
        self.entry = Conv3x3(in_channels, base, rng, dtype, "entry")
        self.blocks = [
            (Conv3x3(base, base, rng, dtype, f"block{i}.a"), Conv3x3(base, base, rng, dtype, f"block{i}.b"))
            for i in range(blocks)
        ]
        self.up1 = Conv3x3(base, base * 4, rng, dtype, "up1")
        self.up2 = Conv3x3(base, base * 4, rng, dtype, "up2")
        self.head = Conv3x3(base, 3, rng, dtype, "head")
        self.shuffle1 = PixelShuffle2()
        self.shuffle2 = PixelShuffle2()
        self._entry_act = LeakyReLU()
        self._block_acts = [LeakyReLU() for _ in range(blocks)]
        self._up_acts = [LeakyReLU(), LeakyReLU()]
        self._layers = [self.entry] + [c for pair in self.blocks for c in pair] + [self.up1, self.up2, self.head]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x, self.in_channels)
        h = self._entry_act.forward(self.entry.forward(x))
        for (ca, cb), act in zip(self.blocks, self._block_acts):
            h = h + cb.forward(act.forward(ca.forward(h)))
        u = self._up_acts[0].forward(self.shuffle1.forward(self.up1.forward(h)))
        u = self._up_acts[1].forward(self.shuffle2.forward(self.up2.forward(u)))
        return self.head.forward(u)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = self.head.backward(grad_out)
        g = self.up2.backward(self.shuffle2.backward(self._up_acts[1].backward(g)))
        g = self.up1.backward(self.shuffle1.backward(self._up_acts[0].backward(g)))
        for (ca, cb), act in zip(reversed(self.blocks), reversed(self._block_acts)):
            g = g + ca.backward(act.backward(cb.backward(g)))
        return self.entry.backward(self._entry_act.backward(g))


def texfeat_forward(net: TexFeatNet, t_part: np.ndarray, t_motion: np.ndarray, t_cam: np.ndarray) -> np.ndarray:
    """Concatenate the three atlas inputs channelwise and run the texture net.

    `t_motion` may be (T, H, W, 3) or already flattened (H, W, 3T).  All inputs
    must share the spatial resolution.  The result is (H, W, 75).
    """
    t_part = np.asarray(t_part)
    t_cam = np.asarray(t_cam)
    t_motion = np.asarray(t_motion)
    if t_motion.ndim == 4:
        t_motion = np.concatenate([t_motion[i] for i in range(t_motion.shape[0])], axis=2)
    shapes = {t_part.shape[:2], t_motion.shape[:2], t_cam.shape[:2]}
    if len(shapes) != 1:
        raise ValidationError(f"atlas inputs disagree on resolution: {sorted(shapes)}")
    x = np.concatenate([t_part, t_motion, t_cam], axis=2).astype(net.dtype)
    if x.shape[2] != net.in_channels:
        raise ValidationError(f"net was built for {net.in_channels} input channels, inputs give {x.shape[2]}")
    return net.forward(x)


def srnet_forward(net: SRNet, i_feat: np.ndarray) -> np.ndarray:
    """Super-resolve a (H', W', 75) feature render into a (4H', 4W', 3) image."""
    i_feat = np.asarray(i_feat)
    if i_feat.ndim != 3 or i_feat.shape[2] != net.in_channels:
        raise ValidationError(f"SRNet expects (H', W', {net.in_channels}), got {i_feat.shape}")
    return net.forward(i_feat.astype(net.dtype))
