"""Seeded, differentiable feature-tap stack for the toy denoiser.

A fixed pyramid of circularly-padded 3x3 convolutions with tanh
nonlinearities and content-only softmax self-attention mixing stages.
Layer 0 is purely convolutional at full resolution (and therefore exactly
equivariant to cyclic translation); deeper stages downsample by 2 and end
in an attention block tapped after its residual addition.

Every stage carries a hand-written backward pass, so a vector-Jacobian
product with respect to the input latent is available without an autodiff
framework. `forward_with_ctx` + `vjp` implement that pair; finite
differences are the independent check in the test suite.
"""

from __future__ import annotations

import numpy as np

TAP_CONV = "conv_output"
TAP_ATTN_RESIDUAL = "residual_plus_attention"
TAP_ATTN = "attention_output"


def _conv_indices(c_in: int, height: int, width: int, stride: int):
    """Gather indices mapping a flattened (C,H,W) input to im2col columns."""
    oi = np.arange(0, height, stride)
    oj = np.arange(0, width, stride)
    ci, cj = np.meshgrid(oi, oj, indexing="ij")
    offsets = []
    for u in (-1, 0, 1):
        for v in (-1, 0, 1):
            ri = (ci + u) % height
            rj = (cj + v) % width
            offsets.append((ri * width + rj).ravel())
    pos = np.stack(offsets)  # (9, n_out)
    chan = (np.arange(c_in) * height * width)[:, None, None]
    idx = (chan + pos[None, :, :]).reshape(c_in * 9, -1)
    return idx, len(oi), len(oj)


class _Conv:
    """Circular 3x3 convolution with optional stride, via im2col."""

    def __init__(self, c_in, c_out, h_in, w_in, stride, rng):
        self.c_in, self.c_out = c_in, c_out
        self.h_in, self.w_in = h_in, w_in
        self.idx, self.h_out, self.w_out = _conv_indices(c_in, h_in, w_in, stride)
        fan_in = c_in * 9
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(c_out, fan_in))
        # zero-mean kernels: no response to constant inputs, so feature maps
        # of smooth latents stay spatially decorrelated patch to patch
        self.weight -= self.weight.mean(axis=1, keepdims=True)

    def forward(self, x):
        x_col = x.ravel()[self.idx]  # (c_in*9, n_out)
        y = self.weight @ x_col
        return y.reshape(self.c_out, self.h_out, self.w_out), None

    def vjp(self, _ctx, dy):
        dy_mat = dy.reshape(self.c_out, -1)
        dx_col = self.weight.T @ dy_mat
        dx = np.zeros(self.c_in * self.h_in * self.w_in)
        np.add.at(dx, self.idx.ravel(), dx_col.ravel())
        return dx.reshape(self.c_in, self.h_in, self.w_in)


class _Tanh:
    """Tempered tanh: scale * tanh(x / scale), bounded but near-identity
    over the typical activation range so backward passes keep their gain."""

    def __init__(self, scale: float = 2.5):
        self.scale = scale

    def forward(self, x):
        y = self.scale * np.tanh(x / self.scale)
        return y, y

    def vjp(self, y, dy):
        u = y / self.scale
        return dy * (1.0 - u * u)


class _Attention:
    """Content-only softmax self-attention over spatial positions.

    Tokens are per-position channel vectors; the output is the residual sum
    x + softmax(Q K^T / sqrt(d)) V with fixed seeded projections. No
    positional encoding, so the block commutes with spatial permutations.
    """

    def __init__(self, channels, dim, rng):
        self.channels = channels
        self.dim = dim
        scale = 1.0 / np.sqrt(channels)
        self.wq = rng.normal(0.0, scale, size=(channels, dim))
        self.wk = rng.normal(0.0, scale, size=(channels, dim))
        self.wv = rng.normal(0.0, 0.5 * scale, size=(channels, channels))

    def forward(self, x):
        c, h, w = x.shape
        tokens = x.reshape(c, h * w).T  # (N, C)
        q = tokens @ self.wq
        k = tokens @ self.wk
        v = tokens @ self.wv
        scores = (q @ k.T) / np.sqrt(self.dim)
        scores -= scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=1, keepdims=True)
        out = tokens + attn @ v
        ctx = (tokens, q, k, v, attn, x.shape)
        return out.T.reshape(c, h, w), ctx

    def vjp(self, ctx, dy):
        tokens, q, k, v, attn, shape = ctx
        c, h, w = shape
        dout = dy.reshape(c, h * w).T  # (N, C)
        dtokens = dout.copy()
        dv = attn.T @ dout
        dattn = dout @ v.T
        # softmax rows backward
        dscores = attn * (dattn - (dattn * attn).sum(axis=1, keepdims=True))
        dscores /= np.sqrt(self.dim)
        dq = dscores @ k
        dk = dscores.T @ q
        dtokens += dq @ self.wq.T + dk @ self.wk.T + dv @ self.wv.T
        return dtokens.T.reshape(c, h, w)


class _Stage:
    """conv -> tanh [-> attention]; the tapped value is the stage output
    centered per channel (spatial mean removed), which keeps patch
    directions discriminative instead of sharing one DC component."""

    def __init__(self, ops):
        self.ops = ops

    def forward(self, x):
        ctxs = []
        for op in self.ops:
            x, ctx = op.forward(x)
            ctxs.append(ctx)
        return x, ctxs

    def vjp(self, ctxs, dy):
        for op, ctx in zip(reversed(self.ops), reversed(ctxs)):
            dy = op.vjp(ctx, dy)
        return dy

    @staticmethod
    def center(x):
        return x - x.mean(axis=(1, 2), keepdims=True)

    @staticmethod
    def center_vjp(dy):
        return dy - dy.mean(axis=(1, 2), keepdims=True)


class FeatureTapStack:
    """Multi-resolution tap pyramid over a (C, H, W) latent.

    Four tappable layers: ``conv0`` at full resolution (conv only), then
    ``attn1``/``attn2``/``attn3`` at 1/2, 1/4 and 1/8 resolution, each
    tapped after its attention block's residual addition. ``attn3`` is the
    bottleneck (deepest, most semantic) layer.
    """

    LAYER_IDS = ("conv0", "attn1", "attn2", "attn3")
    BOTTLENECK = "attn3"

    def __init__(self, in_shape, seed, channels=(8, 12, 16, 16), attn_dim=8):
        c, h, w = in_shape
        if h % 8 or w % 8 or h < 8 or w < 8:
            raise ValueError("latent height/width must be multiples of 8 and >= 8")
        self.in_shape = tuple(in_shape)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A95]))
        self.stages = []
        self.specs = []  # (layer_id, channels, h, w, tap_point)
        cur_c, cur_h, cur_w = c, h, w
        for depth, (layer_id, ch) in enumerate(zip(self.LAYER_IDS, channels)):
            stride = 1 if depth == 0 else 2
            out_h, out_w = cur_h // stride, cur_w // stride
            ops = [_Conv(cur_c, ch, cur_h, cur_w, stride, rng), _Tanh()]
            tap_point = TAP_CONV
            if depth > 0:
                ops.append(_Attention(ch, attn_dim, rng))
                tap_point = TAP_ATTN_RESIDUAL
            self.stages.append(_Stage(ops))
            self.specs.append((layer_id, ch, out_h, out_w, tap_point))
            cur_c, cur_h, cur_w = ch, out_h, out_w

    def layer_index(self, layer_id: str) -> int:
        try:
            return self.LAYER_IDS.index(layer_id)
        except ValueError:
            raise ValueError(f"unknown tap layer {layer_id!r}") from None

    def forward(self, z, taps):
        maps, _ = self.forward_with_ctx(z, taps)
        return maps

    def forward_with_ctx(self, z, taps):
        """Compute the requested tap outputs, keeping backward context.

        Returns (maps, ctx) where maps is a dict ordered by network depth.
        Only stages up to the deepest requested tap are evaluated.
        """
        z = np.asarray(z, dtype=np.float64)
        if z.shape != self.in_shape:
            raise ValueError(f"latent shape {z.shape} != expected {self.in_shape}")
        wanted = set(taps)
        depths = sorted(self.layer_index(t) for t in wanted)
        if not depths:
            return {}, ([], 0)
        deepest = depths[-1]
        maps = {}
        ctxs = []
        x = z
        for depth in range(deepest + 1):
            x, ctx = self.stages[depth].forward(x)
            ctxs.append(ctx)
            layer_id = self.LAYER_IDS[depth]
            if layer_id in wanted:
                maps[layer_id] = _Stage.center(x)
        return maps, (ctxs, deepest)

    def vjp(self, ctx, cotangents):
        """Pull per-layer cotangents back to the input latent."""
        ctxs, deepest = ctx
        if not ctxs:
            return np.zeros(self.in_shape)
        grad = None
        for depth in range(deepest, -1, -1):
            layer_id = self.LAYER_IDS[depth]
            cot = cotangents.get(layer_id)
            if cot is not None:
                cot = _Stage.center_vjp(cot)
                grad = cot if grad is None else grad + cot
            if grad is None:
                continue
            grad = self.stages[depth].vjp(ctxs[depth], grad)
        if grad is None:
            return np.zeros(self.in_shape)
        return grad
