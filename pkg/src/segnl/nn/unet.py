"""2D U-net with manual backpropagation.

Analysis level l (1-based) runs two 3x3 conv blocks to ``base * 2**(l-1)``
and then ``base * 2**l`` channels, so filters double before each 2x2 max
pool. A conv block is conv -> leaky ReLU -> dropout -> batch norm. The
synthesis path upsamples with a learned 2x2 stride-2 transposed conv to the
skip width, concatenates the skip, and applies two conv blocks (the first
halves the concatenated width). A 1x1 conv produces the class logits.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from segnl.nn import layers
from segnl.nn.layers import ShapeError


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 5
    base_filters: int = 16
    in_channels: int = 2
    out_classes: int = 3
    leakiness: float = 0.01
    dropout_p: float = 0.1
    l2_lambda: float = 1e-5
    class_weights: tuple = (0.01, 1.0, 1.0)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if self.depth < 1 or self.base_filters < 1 or self.in_channels < 1:
            raise ValueError("depth, base_filters and in_channels must be positive")
        if len(self.class_weights) != self.out_classes:
            raise ValueError("need one class weight per output class")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def divisor(self):
        return 2 ** (self.depth - 1)

    def encoder_channels(self):
        return [self.base_filters * 2 ** level for level in range(1, self.depth + 1)]

    def to_dict(self):
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown UNetConfig fields: {sorted(unknown)}")
        return cls(**d)


def architecture(config):
    """Ordered layer descriptor: list of dicts with name, kind, cin, cout."""
    desc = []
    enc = config.encoder_channels()
    cin = config.in_channels
    for level in range(1, config.depth + 1):
        mid, out = enc[level - 1] // 2, enc[level - 1]
        desc.append({"name": f"enc{level}_1", "kind": "conv3", "cin": cin, "cout": mid})
        desc.append({"name": f"enc{level}_2", "kind": "conv3", "cin": mid, "cout": out})
        cin = out
    for level in range(config.depth - 1, 0, -1):
        skip = enc[level - 1]
        desc.append({"name": f"dec{level}_up", "kind": "tconv2", "cin": cin, "cout": skip})
        desc.append({"name": f"dec{level}_1", "kind": "conv3", "cin": 2 * skip, "cout": skip})
        desc.append({"name": f"dec{level}_2", "kind": "conv3", "cin": skip, "cout": skip})
        cin = skip
    desc.append({"name": "head", "kind": "conv1", "cin": cin, "cout": config.out_classes})
    return desc


def _kernel_shape(layer):
    cin, cout = layer["cin"], layer["cout"]
    if layer["kind"] == "conv3":
        return (cout, cin, 3, 3), cin * 9
    if layer["kind"] == "tconv2":
        # each output pixel receives exactly cin terms
        return (cin, cout, 2, 2), cin
    return (cout, cin, 1, 1), cin


class UNetModel:
    """Parameters, batch-norm buffers and the architecture descriptor."""

    def __init__(self, config, params, buffers, epoch=0):
        self.config = config
        self.layers = architecture(config)
        self.params = params
        self.buffers = buffers
        self.epoch = epoch

    # -- construction / introspection ------------------------------------

    @classmethod
    def build(cls, config, rng, dtype=np.float32):
        params, buffers = {}, {}
        for layer in cls._iter_layers(config):
            name = layer["name"]
            shape, fan_in = _kernel_shape(layer)
            params[f"{name}.w"] = layers.he_init(shape, fan_in, rng, dtype)
            params[f"{name}.b"] = np.zeros(layer["cout"], dtype=dtype)
            if layer["kind"] == "conv3":
                params[f"{name}.gamma"] = np.ones(layer["cout"], dtype=dtype)
                params[f"{name}.beta"] = np.zeros(layer["cout"], dtype=dtype)
                buffers[f"{name}.running_mean"] = np.zeros(layer["cout"], dtype=dtype)
                buffers[f"{name}.running_var"] = np.ones(layer["cout"], dtype=dtype)
        return cls(config, params, buffers)

    @staticmethod
    def _iter_layers(config):
        return architecture(config)

    def param_shapes(self):
        return [(k, v.shape) for k, v in self.params.items()]

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def kernel_names(self):
        return [k for k in self.params if k.endswith(".w")]

    def copy(self):
        return UNetModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.epoch,
        )

    def astype(self, dtype):
        return UNetModel(
            self.config,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
            self.epoch,
        )

    # -- forward / backward ------------------------------------------------

    def _block_forward(self, name, x, train, rng, tape):
        p, cfg = self.params, self.config
        out, c_conv = layers.conv2d_forward(x, p[f"{name}.w"], p[f"{name}.b"])
        out, c_act = layers.leaky_relu_forward(out, cfg.leakiness)
        out, c_drop = layers.dropout_forward(out, cfg.dropout_p, train, rng)
        state = {"running_mean": self.buffers[f"{name}.running_mean"],
                 "running_var": self.buffers[f"{name}.running_var"]}
        out, c_bn = layers.batchnorm_forward(
            out, p[f"{name}.gamma"], p[f"{name}.beta"], state, train, cfg.bn_momentum, cfg.bn_eps
        )
        tape.append((name, c_conv, c_act, c_drop, c_bn))
        return out

    def _block_backward(self, dout, entry, grads):
        name, c_conv, c_act, c_drop, c_bn = entry
        dout, grads[f"{name}.gamma"], grads[f"{name}.beta"] = layers.batchnorm_backward(dout, c_bn)
        dout = layers.dropout_backward(dout, c_drop)
        dout = layers.leaky_relu_backward(dout, c_act)
        dx, grads[f"{name}.w"], grads[f"{name}.b"] = layers.conv2d_backward(dout, c_conv)
        return dx

    def forward(self, x, train=False, rng=None):
        """Logits ``(N, classes, H, W)`` and the tape needed by :meth:`backward`."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        if x.shape[2] % cfg.divisor or x.shape[3] % cfg.divisor:
            raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by {cfg.divisor}")
        if train and cfg.dropout_p > 0 and rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        # channels-last internally; logits go back to (N, K, H, W)
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.params["head.w"].dtype)
        tape = []
        skips = []
        for level in range(1, cfg.depth + 1):
            h = self._block_forward(f"enc{level}_1", h, train, rng, tape)
            h = self._block_forward(f"enc{level}_2", h, train, rng, tape)
            if level < cfg.depth:
                skips.append(h)
                h, arg = layers.maxpool2_forward(h)
                tape.append(("pool", arg))
        for level in range(cfg.depth - 1, 0, -1):
            name = f"dec{level}_up"
            h, c_up = layers.transposed_conv2_forward(h, self.params[f"{name}.w"], self.params[f"{name}.b"])
            tape.append((name, c_up))
            skip = skips.pop()
            h = np.concatenate([h, skip], axis=3)
            tape.append(("concat", h.shape[3] - skip.shape[3]))
            h = self._block_forward(f"dec{level}_1", h, train, rng, tape)
            h = self._block_forward(f"dec{level}_2", h, train, rng, tape)
        logits, c_head = layers.conv1x1_forward(h, self.params["head.w"], self.params["head.b"])
        tape.append(("head", c_head))
        return np.ascontiguousarray(logits.transpose(0, 3, 1, 2)), tape

    def backward(self, dlogits, tape):
        """Gradients of all parameters and the input given d(loss)/d(logits), all NCHW-shaped."""
        cfg = self.config
        grads = {}
        tape = list(tape)
        _, c_head = tape.pop()
        dh, grads["head.w"], grads["head.b"] = layers.conv1x1_backward(
            np.ascontiguousarray(dlogits.transpose(0, 2, 3, 1)), c_head
        )
        dskips = []
        for level in range(1, cfg.depth):
            dh = self._block_backward(dh, tape.pop(), grads)
            dh = self._block_backward(dh, tape.pop(), grads)
            _, n_up = tape.pop()
            dskips.append(np.ascontiguousarray(dh[..., n_up:]))
            dh = dh[..., :n_up]
            name, c_up = tape.pop()
            dh, grads[f"{name}.w"], grads[f"{name}.b"] = layers.transposed_conv2_backward(
                np.ascontiguousarray(dh), c_up
            )
        for level in range(cfg.depth, 0, -1):
            if level < cfg.depth:
                _, arg = tape.pop()
                dh = layers.maxpool2_backward(dh, arg) + dskips.pop()
            dh = self._block_backward(dh, tape.pop(), grads)
            dh = self._block_backward(dh, tape.pop(), grads)
        return grads, np.ascontiguousarray(dh.transpose(0, 3, 1, 2))


def loss_and_grads(model, x, target, train=True, rng=None):
    """Weighted cross-entropy + L2 on kernels; returns ``(total, ce, grads)``."""
    cfg = model.config
    logits, tape = model.forward(x, train=train, rng=rng)
    ce, dlogits = layers.weighted_softmax_crossentropy(logits, target, cfg.class_weights)
    if not np.isfinite(ce):
        raise FloatingPointError(f"non-finite loss {ce}")
    grads, _ = model.backward(dlogits, tape)
    names = model.kernel_names()
    penalty, l2_grads = layers.l2_penalty([model.params[k] for k in names], cfg.l2_lambda)
    for k, g in zip(names, l2_grads):
        grads[k] = grads[k] + g
    return ce + penalty, ce, grads


def predict_slices(model, x, batch_size=8):
    """Eval-mode class probabilities for ``(S, C, H, W)`` slices, padding to the divisor."""
    d = model.config.divisor
    s, _, h, w = x.shape
    ph, pw = (-h) % d, (-w) % d
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
    out = np.empty((s, model.config.out_classes, h, w), dtype=np.float64)
    for start in range(0, s, batch_size):
        logits, _ = model.forward(x[start:start + batch_size], train=False)
        probs = layers.softmax(logits.astype(np.float64), axis=1)
        out[start:start + batch_size] = probs[:, :, :h, :w]
    return out


def volume_to_slices(channels):
    """Stack 3D channel arrays ``(X, Y, Z)`` into axial slices ``(Z, C, X, Y)``."""
    stack = np.stack([np.asarray(c, dtype=np.float32) for c in channels], axis=0)
    return np.ascontiguousarray(stack.transpose(3, 0, 1, 2))


def predict_volume(model, channels, batch_size=8):
    """Per-voxel class probabilities ``(classes, X, Y, Z)`` from slice-wise eval forwards."""
    shapes = {np.shape(c) for c in channels}
    if len(shapes) != 1 or len(next(iter(shapes))) != 3:
        raise ShapeError(f"channels must be 3D arrays of one shape, got {shapes}")
    if len(channels) != model.config.in_channels:
        raise ShapeError(f"model expects {model.config.in_channels} channels, got {len(channels)}")
    probs = predict_slices(model, volume_to_slices(channels), batch_size)
    return np.ascontiguousarray(probs.transpose(1, 2, 3, 0))


def segment_binary(probs, threshold=0.5):
    """Label each voxel with the more probable of left/right among those above ``threshold``."""
    from segnl.volume_io import LabelMap

    probs = np.asarray(probs)
    p1, p2 = probs[1], probs[2]
    c1, c2 = p1 > threshold, p2 > threshold
    labels = np.zeros(p1.shape, dtype=np.uint8)
    labels[c2] = 2
    labels[c1 & (~c2 | (p1 >= p2))] = 1
    return LabelMap(labels)
