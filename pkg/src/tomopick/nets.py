"""Toy 2.5D U-Net variants and the WTS1 weight checkpoint format.

Variant A: per-slice 2D stages with depth halving between them, a 3D-conv
bottleneck at 1/4 resolution, then nearest depth upsampling and an HxW pixel
shuffle back to full window resolution.

Variant B: three per-slice 2D stages (depth halved twice, then preserved with
k3 s1 p1 depth pooling), multi-scale dilated fusion of the three stage
outputs, and a decoder of conv3d + scSE upsampling blocks.

These are deliberately tiny stand-ins for the pretrained 2D backbones used at
full scale; widths and depths are configuration, not a reconstruction.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class NetConfig:
    variant: str = "A"  # "A" or "B"
    in_depth: int = 16
    window_hw: int = 128
    class_count: int = 1
    widths: tuple[int, ...] = (8, 16, 32)
    decoder_width: int = 16
    seed: int = 0
    dtype: str = "float32"
    strided_depth_pool: bool = False  # ablation: replace depth halving with strided conv
    frozen: tuple[str, ...] = ()  # parameter-name prefixes excluded from training

    def __post_init__(self):
        if self.variant not in ("A", "B"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if any(w < 1 for w in self.widths):
            raise ValueError("all stage widths must be >= 1")
        need = 3 if self.variant == "A" else 4
        if len(self.widths) < need:
            raise ValueError(f"variant {self.variant} needs {need} stage widths")
        if self.in_depth % 4 != 0:
            raise ValueError("in_depth must be divisible by 4")
        if self.window_hw % 8 != 0:
            raise ValueError("window_hw must be divisible by 8")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def config_hash(cfg: NetConfig) -> int:
    canon = repr(
        (
            cfg.variant,
            cfg.in_depth,
            cfg.window_hw,
            cfg.class_count,
            tuple(cfg.widths),
            cfg.decoder_width,
            cfg.strided_depth_pool,
        )
    )
    return int.from_bytes(hashlib.sha256(canon.encode()).digest()[:8], "little")


class ToyNet:
    """Common plumbing: named parameter access, grad reset, checkpoint state."""

    def __init__(self, config: NetConfig):
        self.config = config
        self._layers: dict[str, L.Layer] = {}

    def _register(self, name: str, layer: L.Layer) -> L.Layer:
        self._layers[name] = layer
        return layer

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self._layers.items():
            for pname, arr in layer.params.items():
                out[f"{lname}.{pname}"] = arr
        return out

    def trainable_params(self) -> dict[str, np.ndarray]:
        frozen = self.config.frozen
        return {
            k: v
            for k, v in self.named_params().items()
            if not any(k.startswith(pre) for pre in frozen)
        }

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        frozen = self.config.frozen
        for lname, layer in self._layers.items():
            for pname, arr in layer.grads.items():
                name = f"{lname}.{pname}"
                if not any(name.startswith(pre) for pre in frozen):
                    out[name] = arr
        return out

    def zero_grads(self):
        for layer in self._layers.values():
            layer.zero_grads()

    def set_params(self, state: dict[str, np.ndarray]):
        params = self.named_params()
        if set(state) != set(params):
            missing = set(params) ^ set(state)
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, v in state.items():
            if params[k].shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} != {params[k].shape}")
            params[k][...] = v

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 3:
            x = x[None]
        cfg = self.config
        if x.shape != (1, cfg.in_depth, cfg.window_hw, cfg.window_hw):
            raise ValueError(
                f"expected window (1, {cfg.in_depth}, {cfg.window_hw}, {cfg.window_hw}), "
                f"got {x.shape}"
            )
        return x.astype(cfg.np_dtype, copy=False)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gy: np.ndarray) -> None:
        raise NotImplementedError


class VariantANet(ToyNet):
    def __init__(self, config: NetConfig):
        super().__init__(config)
        rng = np.random.Generator(np.random.PCG64(config.seed))
        dt = config.np_dtype
        w0, w1, w2 = config.widths[:3]
        c = config.class_count
        reg = self._register
        self.stem = reg("stem", L.Conv2dPerSlice(1, w0, 3, 1, rng, dt))
        self.act0 = reg("act0", L.SiLU())
        self.s1 = reg("s1", L.Conv2dPerSlice(w0, w1, 3, 2, rng, dt))
        self.act1 = reg("act1", L.SiLU())
        if config.strided_depth_pool:
            self.dp1 = reg("dp1", L.DepthStridedConv(w1, rng, dt))
        else:
            self.dp1 = reg("dp1", L.DepthPool("halve"))
        self.s2 = reg("s2", L.Conv2dPerSlice(w1, w2, 3, 2, rng, dt))
        self.act2 = reg("act2", L.SiLU())
        if config.strided_depth_pool:
            self.dp2 = reg("dp2", L.DepthStridedConv(w2, rng, dt))
        else:
            self.dp2 = reg("dp2", L.DepthPool("halve"))
        self.bott = reg("bott", L.Conv3d(w2, w2, 3, 1, rng, dt))
        self.act3 = reg("act3", L.SiLU())
        self.up_depth = reg("up_depth", L.UpsampleNearest((4, 1, 1)))
        self.head = reg("head", L.Conv3d(w2, c * 16, 1, 1, rng, dt))
        self.shuffle = reg("shuffle", L.PixelShuffleHW(4))

    def forward(self, x):
        x = self._check_input(x)
        h = self.act0.forward(self.stem.forward(x))
        h = self.dp1.forward(self.act1.forward(self.s1.forward(h)))
        h = self.dp2.forward(self.act2.forward(self.s2.forward(h)))
        h = self.act3.forward(self.bott.forward(h))
        h = self.up_depth.forward(h)
        h = self.head.forward(h)
        return self.shuffle.forward(h)

    def backward(self, gy):
        g = self.shuffle.backward(gy)
        g = self.head.backward(g)
        g = self.up_depth.backward(g)
        g = self.bott.backward(self.act3.backward(g))
        g = self.s2.backward(self.act2.backward(self.dp2.backward(g)))
        g = self.s1.backward(self.act1.backward(self.dp1.backward(g)))
        g = self.stem.backward(self.act0.backward(g))
        return g


class VariantBNet(ToyNet):
    # Per-block nearest-upsample factors; the single (2,2,2) step restores the
    # fusion output (1/2 depth, 1/2 HW) to the window size, the other two
    # blocks refine at full resolution.
    UP_FACTORS = ((2, 2, 2), (1, 1, 1), (1, 1, 1))

    def __init__(self, config: NetConfig):
        super().__init__(config)
        rng = np.random.Generator(np.random.PCG64(config.seed))
        dt = config.np_dtype
        w0, w1, w2, w3 = config.widths[:4]
        wd = config.decoder_width
        c = config.class_count
        reg = self._register
        self.stem = reg("stem", L.Conv2dPerSlice(1, w0, 3, 1, rng, dt))
        self.act0 = reg("act0", L.SiLU())
        self.s1 = reg("s1", L.Conv2dPerSlice(w0, w1, 3, 2, rng, dt))
        self.act1 = reg("act1", L.SiLU())
        self.dp1 = reg("dp1", L.DepthPool("halve"))
        self.s2 = reg("s2", L.Conv2dPerSlice(w1, w2, 3, 2, rng, dt))
        self.act2 = reg("act2", L.SiLU())
        self.dp2 = reg("dp2", L.DepthPool("halve"))
        self.s3 = reg("s3", L.Conv2dPerSlice(w2, w3, 3, 2, rng, dt))
        self.act3 = reg("act3", L.SiLU())
        self.dp3 = reg("dp3", L.DepthPool("preserve"))
        self.fusion = reg("fusion", L.FusionBlock([w1, w2, w3], wd, wd, rng, dt))
        self.dec = []
        cin = wd
        for i, f in enumerate(self.UP_FACTORS):
            conv = reg(f"dec{i}.conv", L.Conv3d(cin, wd, 3, 1, rng, dt))
            act = reg(f"dec{i}.act", L.SiLU())
            scse = reg(f"dec{i}.scse", L.SCSEBlock(wd, 2, rng, dt))
            up = reg(f"dec{i}.up", L.UpsampleNearest(f))
            self.dec.append((conv, act, scse, up))
            cin = wd
        self.head = reg("head", L.Conv3d(wd, c, 1, 1, rng, dt))

    def forward(self, x):
        x = self._check_input(x)
        h = self.act0.forward(self.stem.forward(x))
        f1 = self.dp1.forward(self.act1.forward(self.s1.forward(h)))
        f2 = self.dp2.forward(self.act2.forward(self.s2.forward(f1)))
        f3 = self.dp3.forward(self.act3.forward(self.s3.forward(f2)))
        h = self.fusion.forward([f1, f2, f3])
        for conv, act, scse, up in self.dec:
            h = up.forward(scse.forward(act.forward(conv.forward(h))))
        return self.head.forward(h)

    def backward(self, gy):
        g = self.head.backward(gy)
        for conv, act, scse, up in reversed(self.dec):
            g = conv.backward(act.backward(scse.backward(up.backward(g))))
        g1, g2, g3 = self.fusion.backward(g)
        g2 = g2 + self.s3.backward(self.act3.backward(self.dp3.backward(g3)))
        g1 = g1 + self.s2.backward(self.act2.backward(self.dp2.backward(g2)))
        g = self.s1.backward(self.act1.backward(self.dp1.backward(g1)))
        return self.stem.backward(self.act0.backward(g))


def build_net(config: NetConfig) -> ToyNet:
    return VariantANet(config) if config.variant == "A" else VariantBNet(config)


# --- WTS1 checkpoint ---------------------------------------------------------
#
# magic "WTS1", little-endian u64 config hash, u32 block count, then per block:
# u32 name length, utf-8 name, u32 ndim, u32 dims, raw little-endian f32 data.

WTS_MAGIC = b"WTS1"


class CheckpointError(Exception):
    pass


def save_weights(path, net: ToyNet) -> None:
    params = net.named_params()
    with open(path, "wb") as f:
        f.write(WTS_MAGIC)
        f.write(struct.pack("<Q", config_hash(net.config)))
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path, config: NetConfig) -> dict[str, np.ndarray]:
    def take(f, n, what):
        buf = f.read(n)
        if len(buf) != n:
            raise CheckpointError(f"{path}: truncated while reading {what}")
        return buf

    with open(path, "rb") as f:
        if take(f, 4, "magic") != WTS_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (chash,) = struct.unpack("<Q", take(f, 8, "config hash"))
        if chash != config_hash(config):
            raise CheckpointError(f"{path}: checkpoint was written for a different net config")
        (count,) = struct.unpack("<I", take(f, 4, "block count"))
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(f, 4, "name length"))
            name = take(f, nlen, "name").decode()
            (ndim,) = struct.unpack("<I", take(f, 4, "ndim"))
            shape = struct.unpack(f"<{ndim}I", take(f, 4 * ndim, "dims"))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(take(f, 4 * n, "data"), dtype="<f4").reshape(shape)
            state[name] = data.astype(np.float32)
        if f.read(1) != b"":
            raise CheckpointError(f"{path}: trailing bytes")
    return state


def load_net(path, config: NetConfig) -> ToyNet:
    net = build_net(config)
    state = load_weights(path, config)
    net.set_params({k: v.astype(config.np_dtype) for k, v in state.items()})
    return net
