"""SynNet graph assembly: encoder arms, decoder arms, synthesis heads.

Encoder block:  conv3x3 -> batchnorm -> ReLU -> maxpool2x2 (indices kept).
Decoder block:  unpool (matched encoder indices) -> concat matched encoder
                pre-pool feature maps -> conv3x3 -> batchnorm -> ReLU.
Synthesis head: conv1x1 -> linear activation.

Topologies:
  SISO  1 encoder arm, 1 decoder arm.
  MISO  2 encoder arms; bottlenecks concatenated and reduced by a 1x1 conv,
        one decoder arm whose skips concatenate both arms' matched maps.
  MIMO  2 encoder arms (shared trunk), 2 decoder arms; each decoder starts
        from its own 1x1 fusion of both bottlenecks and by default receives
        skips from both encoders.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .tensor import RngStream, ShapeError, ParameterError, DTYPES
from .layers import UsageError


@dataclass
class Topology:
    kind: str = "siso"                     # siso | miso | mimo
    depth: int = 3
    channels: tuple = (32, 64, 64)
    in_channels: int = 1                   # channels per input image
    out_channels: int = 1                  # channels per synthesized image
    final_width: int = 64                  # feature width fed to each head
    miso_index_arm: int = 0                # whose pool indices drive the MISO decoder
    mimo_arm_matched_skips: bool = False   # True: decoder d only sees encoder d's skips

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.kind not in ("siso", "miso", "mimo"):
            raise ParameterError(f"unknown topology kind {self.kind!r}")
        if self.depth < 1 or len(self.channels) != self.depth:
            raise ParameterError(
                f"channels list length {len(self.channels)} != depth {self.depth}"
            )
        if self.miso_index_arm not in (0, 1):
            raise ParameterError("miso_index_arm must be 0 or 1")

    @property
    def in_arms(self) -> int:
        return 1 if self.kind == "siso" else 2

    @property
    def out_arms(self) -> int:
        return 2 if self.kind == "mimo" else 1

    def decoder_width(self, level: int) -> int:
        # stage `level` feeds the unpool at level-1, whose stored indices
        # have channels[level-1] channels; the last stage emits final_width
        return self.channels[level - 1] if level > 0 else self.final_width

    def skip_arms(self, dec_arm: int) -> list[int]:
        if self.kind == "siso":
            return [0]
        if self.kind == "mimo" and self.mimo_arm_matched_skips:
            return [dec_arm]
        return [0, 1]

    def index_arm(self, dec_arm: int) -> int:
        if self.kind == "siso":
            return 0
        if self.kind == "miso":
            return self.miso_index_arm
        return dec_arm


@dataclass
class ForwardTrace:
    """Tapes and intermediates for one train-mode forward; consumed once."""
    enc_tapes: list          # [arm][level] -> (conv, bn, relu, pool) tapes
    fuse_tapes: list         # per decoder arm (or [None] for siso)
    dec_tapes: list          # [arm][k] -> (unpool, split, conv, bn, relu)
    head_tapes: list
    bottleneck_channels: int
    consumed: bool = False


class SynNetModel:
    """Assembled computation graph; parameters live in an external ParamSet."""

    def __init__(self, topology: Topology, bn_eps: float = 1e-5,
                 bn_momentum: float = 0.9):
        self.topology = topology
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum

    # -- parameter construction -------------------------------------------

    def param_shapes(self):
        """Ordered (name -> shape) map of every learnable tensor."""
        t = self.topology
        shapes = {}

        def add_conv(prefix, out_c, in_c, k):
            shapes[f"{prefix}.conv.weight"] = (out_c, in_c, k, k)
            shapes[f"{prefix}.conv.bias"] = (out_c,)

        def add_bn(prefix, c):
            shapes[f"{prefix}.bn.gamma"] = (c,)
            shapes[f"{prefix}.bn.beta"] = (c,)

        for a in range(t.in_arms):
            in_c = t.in_channels
            for i in range(t.depth):
                prefix = f"enc.arm{a}.block{i}"
                add_conv(prefix, t.channels[i], in_c, 3)
                add_bn(prefix, t.channels[i])
                in_c = t.channels[i]
        bott = t.channels[-1]
        if t.kind == "miso":
            add_conv("fuse", bott, 2 * bott, 1)
        elif t.kind == "mimo":
            for d in range(t.out_arms):
                add_conv(f"fuse.arm{d}", bott, 2 * bott, 1)
        for d in range(t.out_arms):
            prev_c = bott
            for i in reversed(range(t.depth)):
                skip_c = len(t.skip_arms(d)) * t.channels[i]
                out_c = t.decoder_width(i)
                prefix = f"dec.arm{d}.block{i}"
                add_conv(prefix, out_c, prev_c + skip_c, 3)
                add_bn(prefix, out_c)
                prev_c = out_c
            add_conv(f"head.arm{d}", t.out_channels, t.final_width, 1)
        return shapes

    def init_params(self, rng: RngStream, dtype: str = "single"):
        """Fresh (params, state): uniform conv weights, identity batchnorm."""
        np_dtype = DTYPES[dtype]
        params, state = {}, {}
        for name, shape in self.param_shapes().items():
            if name.endswith("conv.weight"):
                _, in_c, kh, kw = shape
                s = float(np.sqrt(1.0 / (in_c * kh * kw)))
                params[name] = rng.uniform(shape, -s, s, dtype=dtype)
            elif name.endswith("bn.gamma"):
                params[name] = np.ones(shape, dtype=np_dtype)
            else:  # conv bias, bn beta
                params[name] = np.zeros(shape, dtype=np_dtype)
            if name.endswith("bn.gamma"):
                prefix = name[: -len(".gamma")]
                state[f"{prefix}.running_mean"] = np.zeros(shape, dtype=np_dtype)
                state[f"{prefix}.running_var"] = np.ones(shape, dtype=np_dtype)
        return params, state

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    # -- forward ------------------------------------------------------------

    def _bn(self, params, state, prefix, x, mode):
        y, tape, rm, rv = layers.batchnorm_forward(
            x, params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"],
            state[f"{prefix}.bn.running_mean"], state[f"{prefix}.bn.running_var"],
            eps=self.bn_eps, stat_momentum=self.bn_momentum, mode=mode)
        if mode == "train":
            state[f"{prefix}.bn.running_mean"] = rm
            state[f"{prefix}.bn.running_var"] = rv
        return y, tape

    def forward(self, params, state, inputs, mode="train"):
        """Whole-graph forward. Returns (predictions, trace).

        `inputs` is a list of (n, in_channels, h, w) tensors, one per arm.
        Train mode updates batchnorm running statistics in `state` and
        returns a trace for `backward`; infer mode keeps no tapes
        (trace is None).
        """
        t = self.topology
        if len(inputs) != t.in_arms:
            raise UsageError(
                f"{t.kind} expects {t.in_arms} input(s), got {len(inputs)}")
        h, w = inputs[0].shape[2], inputs[0].shape[3]
        if h % (2 ** t.depth) or w % (2 ** t.depth):
            raise ShapeError(
                f"spatial dims {h}x{w} not divisible by 2^depth={2 ** t.depth}")
        keep = mode == "train"

        enc_tapes, skips, idxs, bottlenecks = [], [], [], []
        for a in range(t.in_arms):
            x = inputs[a]
            arm_tapes, arm_skips, arm_idx = [], [], []
            for i in range(t.depth):
                prefix = f"enc.arm{a}.block{i}"
                x, ct = layers.conv2d_forward(
                    x, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"])
                x, bt = self._bn(params, state, prefix, x, mode)
                x, rt = layers.relu_forward(x)
                arm_skips.append(x)
                x, idx, pt = layers.maxpool2x2_forward(x)
                arm_idx.append(idx)
                arm_tapes.append((ct, bt, rt, pt) if keep else None)
            enc_tapes.append(arm_tapes)
            skips.append(arm_skips)
            idxs.append(arm_idx)
            bottlenecks.append(x)

        fuse_tapes, dec_tapes, head_tapes, preds = [], [], [], []
        for d in range(t.out_arms):
            if t.kind == "siso":
                x, ft = bottlenecks[0], None
            else:
                name = "fuse" if t.kind == "miso" else f"fuse.arm{d}"
                cat = np.concatenate(bottlenecks, axis=1)
                x, ft = layers.conv2d_forward(
                    cat, params[f"{name}.conv.weight"], params[f"{name}.conv.bias"])
            fuse_tapes.append(ft if keep else None)

            arm_dec = []
            iarm = t.index_arm(d)
            for i in reversed(range(t.depth)):
                prev_c = x.shape[1]
                x, ut = layers.unpool2x2_forward(x, idxs[iarm][i])
                parts = [x] + [skips[a][i] for a in t.skip_arms(d)]
                split = [p.shape[1] for p in parts]
                x = np.concatenate(parts, axis=1)
                prefix = f"dec.arm{d}.block{i}"
                x, ct = layers.conv2d_forward(
                    x, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"])
                x, bt = self._bn(params, state, prefix, x, mode)
                x, rt = layers.relu_forward(x)
                arm_dec.append((ut, split, ct, bt, rt) if keep else None)
            dec_tapes.append(arm_dec)

            y, ht = layers.conv2d_forward(
                x, params[f"head.arm{d}.conv.weight"], params[f"head.arm{d}.conv.bias"])
            preds.append(layers.linear_activation(y))
            head_tapes.append(ht if keep else None)

        if not keep:
            return preds, None
        trace = ForwardTrace(enc_tapes, fuse_tapes, dec_tapes, head_tapes,
                             bottleneck_channels=t.channels[-1])
        return preds, trace

    # -- backward -----------------------------------------------------------

    def backward(self, params, trace: ForwardTrace, grad_preds):
        """Whole-graph backward; returns gradients for every ParamSet entry."""
        t = self.topology
        if trace is None or trace.consumed:
            raise UsageError("backward needs a fresh train-mode trace")
        trace.consumed = True
        if len(grad_preds) != t.out_arms:
            raise UsageError(
                f"expected {t.out_arms} prediction gradient(s), got {len(grad_preds)}")

        grads = {name: np.zeros(p.shape, dtype=p.dtype) for name, p in params.items()}
        # skip_grads[a][i] accumulates decoder-side gradient into encoder maps
        skip_grads = [[None] * t.depth for _ in range(t.in_arms)]
        bott_grads = [None] * t.in_arms

        def add(name, g):
            grads[name] += g.astype(grads[name].dtype)

        def acc(store, key, g):
            store[key] = g if store[key] is None else store[key] + g

        for d in range(t.out_arms):
            g, gw, gb = layers.conv2d_backward(trace.head_tapes[d], grad_preds[d])
            add(f"head.arm{d}.conv.weight", gw)
            add(f"head.arm{d}.conv.bias", gb)

            iarm = t.index_arm(d)
            for k, i in enumerate(range(t.depth)):  # reverse of forward order
                ut, split, ct, bt, rt = trace.dec_tapes[d][t.depth - 1 - i]
                prefix = f"dec.arm{d}.block{i}"
                g = layers.relu_backward(rt, g)
                g, gg, gbeta = layers.batchnorm_backward(bt, g)
                add(f"{prefix}.bn.gamma", gg)
                add(f"{prefix}.bn.beta", gbeta)
                g, gw, gb = layers.conv2d_backward(ct, g)
                add(f"{prefix}.conv.weight", gw)
                add(f"{prefix}.conv.bias", gb)
                # split concat gradient: unpooled path first, then skip maps
                pieces = np.split(g, np.cumsum(split)[:-1], axis=1)
                for a, piece in zip(t.skip_arms(d), pieces[1:]):
                    acc(skip_grads[a], i, piece)
                g = layers.unpool2x2_backward(ut, pieces[0])

            if t.kind == "siso":
                acc(bott_grads, 0, g)
            else:
                name = "fuse" if t.kind == "miso" else f"fuse.arm{d}"
                g, gw, gb = layers.conv2d_backward(trace.fuse_tapes[d], g)
                add(f"{name}.conv.weight", gw)
                add(f"{name}.conv.bias", gb)
                cb = trace.bottleneck_channels
                for a in range(t.in_arms):
                    acc(bott_grads, a, g[:, a * cb:(a + 1) * cb])

        for a in range(t.in_arms):
            g = bott_grads[a]
            for i in reversed(range(t.depth)):
                ct, bt, rt, pt = trace.enc_tapes[a][i]
                prefix = f"enc.arm{a}.block{i}"
                g = layers.maxpool2x2_backward(pt, g)
                if skip_grads[a][i] is not None:
                    g = g + skip_grads[a][i]
                g = layers.relu_backward(rt, g)
                g, gg, gbeta = layers.batchnorm_backward(bt, g)
                add(f"{prefix}.bn.gamma", gg)
                add(f"{prefix}.bn.beta", gbeta)
                g, gw, gb = layers.conv2d_backward(ct, g)
                add(f"{prefix}.conv.weight", gw)
                add(f"{prefix}.conv.bias", gb)

        return grads


def build_model(topology: Topology, rng: RngStream, dtype: str = "single"):
    """Convenience constructor: (model, params, state)."""
    model = SynNetModel(topology)
    params, state = model.init_params(rng, dtype=dtype)
    return model, params, state
