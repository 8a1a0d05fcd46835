"""Building blocks for the toy 2.5D U-Nets: forward passes with cached
activations and hand-derived backward passes.

Tensors are (channels, depth, height, width) dense arrays. Layers carry their
parameters and accumulated gradients in dicts so optimizers and checkpointing
can address them by name. Every backward requires the matching forward's cache.
"""

from __future__ import annotations

import numpy as np


class MissingForwardCacheError(RuntimeError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _init_uniform(rng, shape, fan_in, dtype):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base: parameter/grad dicts plus a one-slot forward cache."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _take_cache(self):
        if self._cache is None:
            raise MissingForwardCacheError(f"{type(self).__name__}: backward before forward")
        cache, self._cache = self._cache, None
        return cache

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2dPerSlice(Layer):
    """Shared-weight 2D convolution applied to every depth slice (same padding)."""

    def __init__(self, cin, cout, ksize=3, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        if ksize % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.cin, self.cout, self.k, self.stride = cin, cout, ksize, stride
        fan_in = cin * ksize * ksize
        self.params["weight"] = _init_uniform(rng, (cout, cin, ksize, ksize), fan_in, dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.zero_grads()

    def forward(self, x):
        if x.shape[0] != self.cin:
            raise ValueError(f"expected {self.cin} channels, got {x.shape[0]}")
        k, s, p = self.k, self.stride, self.k // 2
        c, d, h, w = x.shape
        xd = np.moveaxis(x, 1, 0)  # (D, C, H, W): depth as batch
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s]  # (D, C, Ho, Wo, k, k)
        wgt = self.params["weight"]
        y = np.einsum("dchwij,ocij->dohw", win, wgt, optimize=True)
        y += self.params["bias"][None, :, None, None]
        self._cache = (win, x.shape)
        return np.ascontiguousarray(np.moveaxis(y, 0, 1))

    def backward(self, gy):
        win, xshape = self._take_cache()
        k, s, p = self.k, self.stride, self.k // 2
        c, d, h, w = xshape
        gyd = np.moveaxis(gy, 1, 0)  # (D, Cout, Ho, Wo)
        self.grads["weight"] += np.einsum("dchwij,dohw->ocij", win, gyd, optimize=True)
        self.grads["bias"] += gyd.sum(axis=(0, 2, 3))
        ho, wo = gyd.shape[2], gyd.shape[3]
        wgt = self.params["weight"]
        gxp = np.zeros((d, c, h + 2 * p, w + 2 * p), dtype=gy.dtype)
        for ki in range(k):
            for kj in range(k):
                contrib = np.einsum("dohw,oc->dchw", gyd, wgt[:, :, ki, kj], optimize=True)
                gxp[:, :, ki : ki + s * ho : s, kj : kj + s * wo : s] += contrib
        gx = gxp[:, :, p : p + h, p : p + w]
        return np.ascontiguousarray(np.moveaxis(gx, 0, 1))


class Conv3d(Layer):
    """Dense 3D convolution, same padding, optional dilation. ksize may be 1."""

    def __init__(self, cin, cout, ksize=3, dilation=1, rng=None, dtype=np.float32):
        super().__init__()
        if ksize % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.cin, self.cout, self.k, self.dil = cin, cout, ksize, dilation
        fan_in = cin * ksize**3
        self.params["weight"] = _init_uniform(
            rng, (cout, cin, ksize, ksize, ksize), fan_in, dtype
        )
        self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.zero_grads()

    def forward(self, x):
        if x.shape[0] != self.cin:
            raise ValueError(f"expected {self.cin} channels, got {x.shape[0]}")
        k, dil = self.k, self.dil
        p = dil * (k // 2)
        c, d, h, w = x.shape
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
        wgt = self.params["weight"]
        y = np.zeros((self.cout, d, h, w), dtype=x.dtype)
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    sl = xp[:, kd * dil : kd * dil + d, kh * dil : kh * dil + h, kw * dil : kw * dil + w]
                    y += np.einsum("cdhw,oc->odhw", sl, wgt[:, :, kd, kh, kw], optimize=True)
        y += self.params["bias"][:, None, None, None]
        self._cache = (xp, x.shape)
        return y

    def backward(self, gy):
        xp, xshape = self._take_cache()
        k, dil = self.k, self.dil
        p = dil * (k // 2)
        c, d, h, w = xshape
        wgt = self.params["weight"]
        gxp = np.zeros_like(xp)
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    sl = xp[:, kd * dil : kd * dil + d, kh * dil : kh * dil + h, kw * dil : kw * dil + w]
                    self.grads["weight"][:, :, kd, kh, kw] += np.einsum(
                        "odhw,cdhw->oc", gy, sl, optimize=True
                    )
                    gxp[
                        :, kd * dil : kd * dil + d, kh * dil : kh * dil + h, kw * dil : kw * dil + w
                    ] += np.einsum("odhw,oc->cdhw", gy, wgt[:, :, kd, kh, kw], optimize=True)
        self.grads["bias"] += gy.sum(axis=(1, 2, 3))
        return gxp[:, p : p + d, p : p + h, p : p + w]


class DepthStridedConv(Layer):
    """Depth-axis k=3 s=2 convolution: the pooling-replacement ablation path."""

    def __init__(self, channels, rng=None, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.params["weight"] = _init_uniform(rng, (channels, channels, 3), channels * 3, dtype)
        self.params["bias"] = np.zeros(channels, dtype=dtype)
        self.zero_grads()

    def forward(self, x):
        c, d, h, w = x.shape
        if d % 2 != 0:
            raise ValueError("strided depth conv requires even depth")
        xp = np.pad(x, ((0, 0), (1, 1), (0, 0), (0, 0)))
        do = d // 2
        wgt = self.params["weight"]
        y = np.zeros((c, do, h, w), dtype=x.dtype)
        for kd in range(3):
            sl = xp[:, kd : kd + 2 * do : 2]
            y += np.einsum("cdhw,oc->odhw", sl, wgt[:, :, kd], optimize=True)
        y += self.params["bias"][:, None, None, None]
        self._cache = (xp, x.shape)
        return y

    def backward(self, gy):
        xp, xshape = self._take_cache()
        c, d, h, w = xshape
        do = d // 2
        wgt = self.params["weight"]
        gxp = np.zeros_like(xp)
        for kd in range(3):
            sl = xp[:, kd : kd + 2 * do : 2]
            self.grads["weight"][:, :, kd] += np.einsum("odhw,cdhw->oc", gy, sl, optimize=True)
            gxp[:, kd : kd + 2 * do : 2] += np.einsum(
                "odhw,oc->cdhw", gy, wgt[:, :, kd], optimize=True
            )
        self.grads["bias"] += gy.sum(axis=(1, 2, 3))
        return gxp[:, 1 : 1 + d]


class DepthPool(Layer):
    """Depth average pooling: 'halve' (k2 s2) or 'preserve' (k3 s1 p1, replicate)."""

    def __init__(self, mode: str):
        super().__init__()
        if mode not in ("halve", "preserve"):
            raise ValueError(f"unknown depth pool mode {mode!r}")
        self.mode = mode

    def forward(self, x):
        c, d, h, w = x.shape
        if self.mode == "halve":
            if d % 2 != 0:
                raise ValueError("halve mode requires even depth")
            self._cache = x.shape
            return 0.5 * (x[:, 0::2] + x[:, 1::2])
        idx = np.stack(
            [
                np.clip(np.arange(d) - 1, 0, d - 1),
                np.arange(d),
                np.clip(np.arange(d) + 1, 0, d - 1),
            ]
        )
        self._cache = (x.shape, idx)
        return (x[:, idx[0]] + x[:, idx[1]] + x[:, idx[2]]) / 3.0

    def backward(self, gy):
        cache = self._take_cache()
        if self.mode == "halve":
            c, d, h, w = cache
            gx = np.zeros((c, d) + gy.shape[2:], dtype=gy.dtype)
            gx[:, 0::2] = 0.5 * gy
            gx[:, 1::2] = 0.5 * gy
            return gx
        xshape, idx = cache
        gx = np.zeros(xshape, dtype=gy.dtype)
        g3 = gy / 3.0
        for row in idx:
            np.add.at(gx, (slice(None), row), g3)
        return gx


class PixelShuffleHW(Layer):
    """(C*r^2, D, H, W) -> (C, D, rH, rW); pure per-slice rearrangement."""

    def __init__(self, r: int):
        super().__init__()
        self.r = r

    def forward(self, x):
        r = self.r
        c4, d, h, w = x.shape
        if c4 % (r * r) != 0:
            raise ValueError(f"channels {c4} not divisible by r^2 = {r * r}")
        c = c4 // (r * r)
        y = x.reshape(c, r, r, d, h, w)
        y = y.transpose(0, 3, 4, 1, 5, 2)  # (C, D, H, i, W, j)
        self._cache = x.shape
        return np.ascontiguousarray(y.reshape(c, d, h * r, w * r))

    def backward(self, gy):
        xshape = self._take_cache()
        r = self.r
        c4, d, h, w = xshape
        c = c4 // (r * r)
        g = gy.reshape(c, d, h, r, w, r)
        g = g.transpose(0, 3, 5, 1, 2, 4)  # (C, i, j, D, H, W)
        return np.ascontiguousarray(g.reshape(xshape))


def upsample_nearest(x: np.ndarray, factors: tuple[int, int, int]) -> np.ndarray:
    fz, fy, fx = factors
    y = x
    if fz > 1:
        y = np.repeat(y, fz, axis=1)
    if fy > 1:
        y = np.repeat(y, fy, axis=2)
    if fx > 1:
        y = np.repeat(y, fx, axis=3)
    return y


def upsample_nearest_backward(gy: np.ndarray, factors: tuple[int, int, int]) -> np.ndarray:
    fz, fy, fx = factors
    c, d, h, w = gy.shape
    g = gy.reshape(c, d // fz, fz, h // fy, fy, w // fx, fx)
    return g.sum(axis=(2, 4, 6))


class UpsampleNearest(Layer):
    def __init__(self, factors: tuple[int, int, int]):
        super().__init__()
        self.factors = factors

    def forward(self, x):
        self._cache = x.shape
        return upsample_nearest(x, self.factors)

    def backward(self, gy):
        self._take_cache()
        return upsample_nearest_backward(gy, self.factors)


class SiLU(Layer):
    def forward(self, x):
        self._cache = x
        return silu(x)

    def backward(self, gy):
        x = self._take_cache()
        return gy * silu_grad(x)


class SCSEBlock(Layer):
    """Concurrent spatial and channel squeeze-excitation.

    out = x * channel_gate + x * spatial_gate, where the channel gate is a
    two-layer bottleneck over globally averaged features (sigmoid output) and
    the spatial gate is a 1x1x1 convolution with sigmoid.
    """

    def __init__(self, channels, reduction=2, rng=None, dtype=np.float32):
        super().__init__()
        cr = max(1, channels // reduction)
        self.channels = channels
        self.params["fc1_w"] = _init_uniform(rng, (cr, channels), channels, dtype)
        self.params["fc1_b"] = np.zeros(cr, dtype=dtype)
        self.params["fc2_w"] = _init_uniform(rng, (channels, cr), cr, dtype)
        self.params["fc2_b"] = np.zeros(channels, dtype=dtype)
        self.params["sp_w"] = _init_uniform(rng, (channels,), channels, dtype)
        self.params["sp_b"] = np.zeros(1, dtype=dtype)
        self.zero_grads()

    def forward(self, x):
        if x.shape[0] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[0]}")
        m = x.mean(axis=(1, 2, 3))
        h_pre = self.params["fc1_w"] @ m + self.params["fc1_b"]
        hidden = silu(h_pre)
        g_pre = self.params["fc2_w"] @ hidden + self.params["fc2_b"]
        cgate = sigmoid(g_pre)
        s_pre = np.einsum("cdhw,c->dhw", x, self.params["sp_w"], optimize=True)
        s_pre = s_pre + self.params["sp_b"][0]
        sgate = sigmoid(s_pre)
        self._cache = (x, m, h_pre, hidden, cgate, sgate)
        return x * cgate[:, None, None, None] + x * sgate[None]

    def backward(self, gy):
        x, m, h_pre, hidden, cgate, sgate = self._take_cache()
        nvox = x[0].size
        gx = gy * cgate[:, None, None, None] + gy * sgate[None]
        # channel-gate path
        dcg = np.einsum("cdhw,cdhw->c", gy, x, optimize=True)
        dg_pre = dcg * cgate * (1.0 - cgate)
        self.grads["fc2_w"] += np.outer(dg_pre, hidden)
        self.grads["fc2_b"] += dg_pre
        dh = self.params["fc2_w"].T @ dg_pre
        dh_pre = dh * silu_grad(h_pre)
        self.grads["fc1_w"] += np.outer(dh_pre, m)
        self.grads["fc1_b"] += dh_pre
        dm = self.params["fc1_w"].T @ dh_pre
        gx += (dm / nvox)[:, None, None, None]
        # spatial-gate path
        dsg = np.einsum("cdhw->dhw", gy * x)
        ds_pre = dsg * sgate * (1.0 - sgate)
        self.grads["sp_w"] += np.einsum("cdhw,dhw->c", x, ds_pre, optimize=True)
        self.grads["sp_b"] += ds_pre.sum(keepdims=True).reshape(1)
        gx += self.params["sp_w"][:, None, None, None] * ds_pre[None]
        return gx


class FusionBlock(Layer):
    """Multi-scale fusion: upsample all inputs to the finest one, concatenate,
    run parallel dilated 3x3x3 convolutions (dilations 1/2/4), concatenate, and
    project with a 1x1x1 convolution."""

    DILATIONS = (1, 2, 4)

    def __init__(self, in_channels: list[int], mid: int, out: int, rng=None, dtype=np.float32):
        super().__init__()
        if len(in_channels) < 2:
            raise ValueError("fusion needs at least 2 feature maps")
        self.in_channels = list(in_channels)
        cat = sum(in_channels)
        self.branches = [Conv3d(cat, mid, 3, dilation=dl, rng=rng, dtype=dtype) for dl in self.DILATIONS]
        self.acts = [SiLU() for _ in self.DILATIONS]
        self.proj = Conv3d(mid * len(self.DILATIONS), out, 1, rng=rng, dtype=dtype)
        self._collect_params()

    def _collect_params(self):
        self.params = {}
        for i, br in enumerate(self.branches):
            for k, v in br.params.items():
                self.params[f"branch{i}.{k}"] = v
        for k, v in self.proj.params.items():
            self.params[f"proj.{k}"] = v
        self.zero_grads()

    def zero_grads(self):
        self.grads = {}
        for i, br in enumerate(self.branches):
            br.zero_grads()
            for k in br.params:
                self.grads[f"branch{i}.{k}"] = br.grads[k]
        self.proj.zero_grads()
        for k in self.proj.params:
            self.grads[f"proj.{k}"] = self.proj.grads[k]

    def forward(self, xs: list[np.ndarray]):
        if len(xs) != len(self.in_channels):
            raise ValueError("feature map count mismatch")
        target = max((x.shape[1:] for x in xs), key=lambda s: s[0] * s[1] * s[2])
        factors = []
        ups = []
        for x in xs:
            f = tuple(t // s for t, s in zip(target, x.shape[1:]))
            if any(fi < 1 or fi * s != t for fi, s, t in zip(f, x.shape[1:], target)):
                raise ValueError(f"dims {x.shape[1:]} not an integer divisor of {target}")
            factors.append(f)
            ups.append(upsample_nearest(x, f))
        cat = np.concatenate(ups, axis=0)
        outs = []
        for br, act in zip(self.branches, self.acts):
            outs.append(act.forward(br.forward(cat)))
        fused = np.concatenate(outs, axis=0)
        y = self.proj.forward(fused)
        self._cache = (factors, [x.shape for x in xs], outs[0].shape[0])
        return y

    def backward(self, gy):
        factors, xshapes, mid = self._take_cache()
        gfused = self.proj.backward(gy)
        gcat = None
        for i, (br, act) in enumerate(zip(self.branches, self.acts)):
            g = br.backward(act.backward(gfused[i * mid : (i + 1) * mid]))
            gcat = g if gcat is None else gcat + g
        gxs = []
        c0 = 0
        for f, xshape in zip(factors, xshapes):
            c = xshape[0]
            gxs.append(upsample_nearest_backward(gcat[c0 : c0 + c], f))
            c0 += c
        return gxs
