"""Declarative architectures, presets, the sliding-window executor, and
checkpoint serialization.

An architecture is a pre-recurrent layer chain applied to every frame, at
most one recurrent node, and a post-recurrent chain applied to the final
hidden state only. Skip links route an early post-chain feature map through
a 1x1 score conv and add it to a later layer's output.
"""

import io
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import cells
from .errors import CheckpointError, ConfigError, ShapeError
from .layers import (ConvKernel, bilinear_kernel, conv2d_backward, conv2d_forward,
                     conv_output_dim, deconv2d_backward, deconv2d_forward,
                     deconv_output_dim, dense_backward, dense_forward, flatten,
                     maxpool2d_backward, maxpool2d_forward, relu_backward,
                     relu_forward, unflatten)
from .tensor import check_finite, fill_random

CHECKPOINT_MAGIC = b"RFCN"
CHECKPOINT_VERSION = 1

LAYER_KINDS = ("conv", "conv1x1", "deconv", "pool", "relu", "dense", "flatten",
               "unflatten")
CELL_KINDS = ("gru", "lstm", "conv_gru")


@dataclass
class LayerSpec:
    """One layer in Table-1 notation: size F(n), stride S(n), pad P(n), depth D(n)."""

    kind: str
    size: int = 0
    stride: int = 0  # 0 = default (1 for conv/deconv, window size for pool)
    pad: int = 0
    depth: int = 0
    units: int = 0
    target_shape: tuple = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.target_shape is not None:
            self.target_shape = tuple(int(s) for s in self.target_shape)

    def effective_stride(self):
        if self.stride:
            return self.stride
        return self.size if self.kind == "pool" else 1

    def to_dict(self):
        d = {"kind": self.kind}
        for k in ("size", "stride", "pad", "depth", "units"):
            v = getattr(self, k)
            if v:
                d[k] = v
        if self.target_shape is not None:
            d["target_shape"] = list(self.target_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], size=d.get("size", 0), stride=d.get("stride", 0),
                   pad=d.get("pad", 0), depth=d.get("depth", 0),
                   units=d.get("units", 0), target_shape=d.get("target_shape"))


@dataclass
class RecurrentSpec:
    """The single recurrent node: cell kind and its dimensions."""

    kind: str
    hidden: int
    kernel: int = 0  # conv_gru only
    candidate_activation: str = "sigmoid"  # lstm only

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind {self.kind!r}")
        if self.kind == "conv_gru" and self.kernel % 2 != 1:
            raise ConfigError("conv_gru kernel must be odd")

    def to_dict(self):
        d = {"kind": self.kind, "hidden": self.hidden}
        if self.kernel:
            d["kernel"] = self.kernel
        if self.kind == "lstm":
            d["candidate_activation"] = self.candidate_activation
        return d

    @classmethod
    def from_dict(cls, d):
        if d is None:
            return None
        return cls(kind=d["kind"], hidden=d["hidden"], kernel=d.get("kernel", 0),
                   candidate_activation=d.get("candidate_activation", "sigmoid"))


@dataclass
class SkipLink:
    """Add a 1x1-scored copy of post-layer `source`'s output to `target`'s output."""

    source: int
    target: int

    def to_dict(self):
        return {"source": self.source, "target": self.target}


@dataclass
class ArchitectureConfig:
    name: str
    input_shape: tuple  # (c, h, w)
    num_classes: int
    pre: list
    recurrent: RecurrentSpec
    post: list
    skip_links: list = field(default_factory=list)
    window: int = 3

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "window": self.window,
            "pre": [s.to_dict() for s in self.pre],
            "recurrent": self.recurrent.to_dict() if self.recurrent else None,
            "post": [s.to_dict() for s in self.post],
            "skip_links": [s.to_dict() for s in self.skip_links],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            num_classes=d["num_classes"],
            window=d.get("window", 3),
            pre=[LayerSpec.from_dict(s) for s in d["pre"]],
            recurrent=RecurrentSpec.from_dict(d.get("recurrent")),
            post=[LayerSpec.from_dict(s) for s in d["post"]],
            skip_links=[SkipLink(s["source"], s["target"])
                        for s in d.get("skip_links", [])],
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Shape checking


def _layer_output_shape(spec, shape):
    """shape is ('chw', (c,h,w)) or ('vec', (n,)). Returns the output shape and
    the layer's parameter shapes keyed by suffix."""
    kind, dims = shape
    params = {}
    if spec.kind in ("conv", "conv1x1"):
        if kind != "chw":
            raise ConfigError(f"{spec.kind} needs a spatial input, got {shape}")
        c, h, w = dims
        size = 1 if spec.kind == "conv1x1" else spec.size
        s = spec.effective_stride()
        ho = conv_output_dim(h, size, s, spec.pad)
        wo = conv_output_dim(w, size, s, spec.pad)
        if ho < 1 or wo < 1:
            raise ConfigError(f"conv output dims {ho}x{wo} not positive")
        params["weights"] = (spec.depth, c, size, size)
        params["bias"] = (spec.depth,)
        return ("chw", (spec.depth, ho, wo)), params
    if spec.kind == "deconv":
        if kind != "chw":
            raise ConfigError(f"deconv needs a spatial input, got {shape}")
        c, h, w = dims
        s = spec.effective_stride()
        ho = deconv_output_dim(h, spec.size, s, spec.pad)
        wo = deconv_output_dim(w, spec.size, s, spec.pad)
        if ho < 1 or wo < 1:
            raise ConfigError(f"deconv output dims {ho}x{wo} not positive")
        params["weights"] = (c, spec.depth, spec.size, spec.size)
        params["bias"] = (spec.depth,)
        return ("chw", (spec.depth, ho, wo)), params
    if spec.kind == "pool":
        if kind != "chw":
            raise ConfigError("pool needs a spatial input")
        c, h, w = dims
        s = spec.effective_stride()
        if spec.size > h or spec.size > w:
            raise ConfigError(f"pool window {spec.size} exceeds input {h}x{w}")
        return ("chw", (c, (h - spec.size) // s + 1, (w - spec.size) // s + 1)), params
    if spec.kind == "relu":
        return shape, params
    if spec.kind == "flatten":
        n = int(np.prod(dims))
        return ("vec", (n,)), params
    if spec.kind == "unflatten":
        if kind != "vec":
            raise ConfigError("unflatten needs a vector input")
        if int(np.prod(spec.target_shape)) != dims[0]:
            raise ConfigError(
                f"unflatten target {spec.target_shape} != vector length {dims[0]}")
        return ("chw", spec.target_shape), params
    if spec.kind == "dense":
        if kind != "vec":
            raise ConfigError("dense needs a vector input")
        params["weights"] = (spec.units, dims[0])
        params["bias"] = (spec.units,)
        return ("vec", (spec.units,)), params
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


def _cell_param_shapes(rec, in_shape):
    kind, dims = in_shape
    shapes = OrderedDict()
    if rec.kind in ("gru", "lstm"):
        if kind != "vec":
            raise ConfigError(f"{rec.kind} needs a flattened input, got {in_shape}")
        d = dims[0]
        hdim = rec.hidden
        if rec.kind == "gru":
            names = cells.GRU_WEIGHT_NAMES
        else:
            names = ("w_xi", "w_hi", "b_i", "w_xf", "w_hf", "b_f",
                     "w_xo", "w_ho", "b_o", "w_xc", "w_hc", "b_c")
        for n in names:
            if n.startswith("b"):
                shapes[n] = (hdim,)
            elif n.startswith("w_h"):
                shapes[n] = (hdim, hdim)
            else:
                shapes[n] = (hdim, d)
        out = ("vec", (hdim,))
    elif rec.kind == "conv_gru":
        if kind != "chw":
            raise ConfigError("conv_gru needs a spatial input")
        c, h, w = dims
        f, k = rec.hidden, rec.kernel
        for n in cells.GRU_WEIGHT_NAMES:
            if n.startswith("b"):
                shapes[n] = (f,)
            elif n.startswith("w_h"):
                shapes[n] = (f, f, k, k)
            else:
                shapes[n] = (f, c, k, k)
        out = ("chw", (f, h, w))
    else:
        raise ConfigError(f"unknown cell kind {rec.kind!r}")
    return out, shapes


@dataclass
class ShapeReport:
    pre_shapes: list       # shape after each pre layer
    recurrent_input: tuple
    recurrent_output: tuple
    post_shapes: list
    output_shape: tuple    # (c, h, w) logits
    param_shapes: OrderedDict  # canonical name -> shape


def shape_check(config):
    """Walk the config, validating every layer and collecting parameter shapes.

    Raises ConfigError on any inconsistency, including logits whose spatial
    dims differ from the input or whose channel count differs from
    num_classes.
    """
    shape = ("chw", config.input_shape)
    param_shapes = OrderedDict()
    pre_shapes = []
    for i, spec in enumerate(config.pre):
        shape, pshapes = _layer_output_shape(spec, shape)
        for suffix, ps in pshapes.items():
            param_shapes[f"pre.{i}.{spec.kind}.{suffix}"] = ps
        pre_shapes.append(shape)
    rec_in = shape
    if config.recurrent is not None:
        shape, cshapes = _cell_param_shapes(config.recurrent, shape)
        for suffix, ps in cshapes.items():
            param_shapes[f"cell.{suffix}"] = ps
    rec_out = shape
    post_shapes = []
    for i, spec in enumerate(config.post):
        shape, pshapes = _layer_output_shape(spec, shape)
        for suffix, ps in pshapes.items():
            param_shapes[f"post.{i}.{spec.kind}.{suffix}"] = ps
        post_shapes.append(shape)
    for j, link in enumerate(config.skip_links):
        if not (0 <= link.source < len(config.post)) or not (0 <= link.target < len(config.post)):
            raise ConfigError(f"skip link {j} indexes outside the post chain")
        if link.source >= link.target:
            raise ConfigError(f"skip link {j} must go forward")
        skind, sdims = post_shapes[link.source]
        tkind, tdims = post_shapes[link.target]
        if skind != "chw" or tkind != "chw":
            raise ConfigError(f"skip link {j} endpoints must be spatial maps")
        if sdims[1:] != tdims[1:]:
            raise ConfigError(
                f"skip link {j} spatial dims {sdims[1:]} != {tdims[1:]} at merge")
        param_shapes[f"skip.{j}.score.weights"] = (tdims[0], sdims[0], 1, 1)
        param_shapes[f"skip.{j}.score.bias"] = (tdims[0],)
    kind, dims = shape
    if kind != "chw":
        raise ConfigError(f"network output must be a spatial map, got {shape}")
    if dims[0] != config.num_classes:
        raise ConfigError(f"output channels {dims[0]} != num_classes {config.num_classes}")
    if dims[1:] != config.input_shape[1:]:
        raise ConfigError(
            f"output spatial dims {dims[1:]} != input {config.input_shape[1:]}")
    return ShapeReport(pre_shapes, rec_in, rec_out, post_shapes, dims, param_shapes)


# ---------------------------------------------------------------------------
# Model instantiation


@dataclass
class ModelInstance:
    config: ArchitectureConfig
    params: "OrderedDict[str, np.ndarray]"
    dtype: object = np.float32

    def param_names(self):
        return list(self.params.keys())

    def cell_params(self):
        rec = self.config.recurrent
        d = {k.split(".", 1)[1]: v for k, v in self.params.items()
             if k.startswith("cell.")}
        if rec.kind == "gru":
            return cells.DenseGruParams(**d)
        if rec.kind == "conv_gru":
            return cells.ConvGruParams(**d)
        if rec.kind == "lstm":
            return cells.LstmParams(candidate_activation=rec.candidate_activation, **d)
        raise ConfigError(f"unknown cell kind {rec.kind!r}")


# GRU cells whose hidden state is decoded into logits start out with the tanh
# candidate saturated toward the majority class, which annihilates the
# gradients that could pull them out of it. A fresh recurrent net therefore
# starts as a pass-through of its feedforward trunk: identity input-path
# candidate weights, a positive update-gate bias (the update gate nearly
# open), and zero recurrent-path weights, so recurrence only engages once the
# optimizer finds it useful. Square conv1x1 layers placed after the cell get
# an identity gain > 1 so the bounded hidden state can be stretched back into
# unbounded logits.
CELL_INPUT_IDENTITY = 1.0
CELL_UPDATE_BIAS = 4.0
POST_CELL_GAIN = 2.0


def _cell_init(suffix, shape, rng, dtype):
    if suffix == "b_z":
        return np.full(shape, CELL_UPDATE_BIAS, dtype=dtype)
    if suffix.startswith("b"):
        return np.zeros(shape, dtype=dtype)
    if suffix in ("w_h", "w_hz", "w_hr"):
        return np.zeros(shape, dtype=dtype)
    if suffix == "w_x" and len(shape) == 2 and shape[0] == shape[1]:
        return (np.eye(shape[0]) * CELL_INPUT_IDENTITY).astype(dtype)
    if suffix == "w_x" and len(shape) == 4 and shape[0] == shape[1]:
        w = np.zeros(shape, dtype=dtype)
        w[np.arange(shape[0]), np.arange(shape[0]),
          shape[2] // 2, shape[3] // 2] = CELL_INPUT_IDENTITY
        return w
    return fill_random(shape, rng, "scaled-fan-in", dtype=dtype)


def _identity_gain(shape, dtype):
    w = np.zeros(shape, dtype=dtype)
    w[np.arange(shape[0]), np.arange(shape[0]), 0, 0] = POST_CELL_GAIN
    return w


def init_model(config, rng, dtype=np.float32):
    """Instantiate a config: fan-in-scaled conv/dense/cell weights, bilinear
    deconv weights, zero biases."""
    report = shape_check(config)
    params = OrderedDict()
    for name, shape in report.param_shapes.items():
        kind = name.split(".")[-2] if "." in name else name
        leaf = name.split(".")[-1]
        if name.startswith("cell."):
            params[name] = _cell_init(name.split(".", 1)[1], shape, rng, dtype)
        elif leaf == "bias":
            params[name] = np.zeros(shape, dtype=dtype)
        elif kind == "deconv":
            f, c, kh, kw = shape
            params[name] = bilinear_kernel(f, c, kh, dtype=dtype)
        elif (name.startswith("post.") and kind == "conv1x1"
              and config.recurrent is not None and shape[0] == shape[1]):
            params[name] = _identity_gain(shape, dtype)
        else:
            params[name] = fill_random(shape, rng, "scaled-fan-in", dtype=dtype)
    return ModelInstance(config=config, params=params, dtype=dtype)


def zero_grads(model):
    return OrderedDict((k, np.zeros_like(v)) for k, v in model.params.items())


# ---------------------------------------------------------------------------
# Layer execution


def _layer_forward(spec, params, prefix, x):
    kind = spec.kind
    if kind in ("conv", "conv1x1"):
        k = ConvKernel(params[f"{prefix}.weights"], params[f"{prefix}.bias"],
                       spec.effective_stride(), spec.pad)
        return conv2d_forward(x, k)
    if kind == "deconv":
        k = ConvKernel(params[f"{prefix}.weights"], params[f"{prefix}.bias"],
                       spec.effective_stride(), spec.pad)
        return deconv2d_forward(x, k)
    if kind == "pool":
        return maxpool2d_forward(x, spec.size, spec.effective_stride())
    if kind == "relu":
        return relu_forward(x)
    if kind == "flatten":
        return flatten(x), ("flatten", x.shape)
    if kind == "unflatten":
        return unflatten(x, (1,) + spec.target_shape), ("unflatten", x.shape)
    if kind == "dense":
        return dense_forward(x, params[f"{prefix}.weights"], params[f"{prefix}.bias"])
    raise ConfigError(f"unknown layer kind {kind!r}")


def _layer_backward(spec, params, prefix, grad, cache):
    """Returns (grad_x, {suffix: grad}) for one layer."""
    kind = spec.kind
    if kind in ("conv", "conv1x1"):
        k = ConvKernel(params[f"{prefix}.weights"], params[f"{prefix}.bias"],
                       spec.effective_stride(), spec.pad)
        gx, gw, gb = conv2d_backward(grad, cache, k)
        return gx, {f"{prefix}.weights": gw, f"{prefix}.bias": gb}
    if kind == "deconv":
        k = ConvKernel(params[f"{prefix}.weights"], params[f"{prefix}.bias"],
                       spec.effective_stride(), spec.pad)
        gx, gw, gb = deconv2d_backward(grad, cache, k)
        return gx, {f"{prefix}.weights": gw, f"{prefix}.bias": gb}
    if kind == "pool":
        return maxpool2d_backward(grad, cache), {}
    if kind == "relu":
        return relu_backward(grad, cache), {}
    if kind == "flatten":
        return grad.reshape(cache[1]), {}
    if kind == "unflatten":
        return grad.reshape(cache[1]), {}
    if kind == "dense":
        gx, gw, gb = dense_backward(grad, cache, params[f"{prefix}.weights"])
        return gx, {f"{prefix}.weights": gw, f"{prefix}.bias": gb}
    raise ConfigError(f"unknown layer kind {kind!r}")


def _run_chain(specs, params, section, x):
    caches = []
    outputs = []
    for i, spec in enumerate(specs):
        x, cache = _layer_forward(spec, params, f"{section}.{i}.{spec.kind}", x)
        caches.append(cache)
        outputs.append(x)
    return x, caches, outputs


# ---------------------------------------------------------------------------
# Window forward / backward


@dataclass
class WindowCache:
    pre: list          # per frame: list of layer caches (fc: last frame only)
    cell: list         # per step cell caches
    post: list
    post_outputs: list
    skip: dict         # link index -> (scored_cache,)
    frames_used: int


def _cell_io(rec):
    """Whether the cell works on vectors or CHW maps."""
    return "vec" if rec.kind in ("gru", "lstm") else "chw"


def _to_cell_input(x, io_kind):
    # pre-chain spatial outputs carry a leading batch dim of 1
    return x if io_kind == "vec" else x[0]


def _from_cell_output(h, io_kind):
    return h if io_kind == "vec" else h[None]


def forward_window(model, frames):
    """Run T frames through the network; returns (logits (C,H,W), WindowCache)."""
    cfg = model.config
    if len(frames) < 1:
        raise ShapeError("window must contain at least one frame")
    for t, f in enumerate(frames):
        if f.shape != cfg.input_shape:
            raise ShapeError(f"frame {t} shape {f.shape} != input {cfg.input_shape}")
    params = model.params
    rec = cfg.recurrent
    if rec is None:
        x, pre_caches, _ = _run_chain(cfg.pre, params, "pre", frames[-1][None])
        node_out = x
        pre_all = [pre_caches]
        cell_caches = []
    else:
        io_kind = _cell_io(rec)
        p = model.cell_params()
        pre_all = []
        feats = []
        for f in frames:
            x, pre_caches, _ = _run_chain(cfg.pre, params, "pre", f[None])
            pre_all.append(pre_caches)
            feats.append(_to_cell_input(x, io_kind))
        state = init_cell_state(model, feats[0])
        cell_caches = []
        for x in feats:
            if rec.kind == "gru":
                state, cache = cells.gru_step(x, state, p)
            elif rec.kind == "conv_gru":
                state, cache = cells.conv_gru_step(x, state, p)
            else:
                state, cache = cells.lstm_step(x, state, p)
            cell_caches.append(cache)
        node_out = _from_cell_output(state.h, io_kind)

    logits, post_caches, post_outputs, skip_caches = _post_forward(model, node_out)
    cache = WindowCache(pre=pre_all, cell=cell_caches, post=post_caches,
                        post_outputs=post_outputs, skip=skip_caches,
                        frames_used=len(frames))
    return logits, cache


def init_cell_state(model, first_feat):
    """Zero state shaped from the recurrent input (reset at each window start)."""
    rec = model.config.recurrent
    if rec.kind in ("gru", "lstm"):
        h = np.zeros(rec.hidden, dtype=model.dtype)
        c = np.zeros(rec.hidden, dtype=model.dtype) if rec.kind == "lstm" else None
    else:
        h = np.zeros((rec.hidden,) + first_feat.shape[1:], dtype=model.dtype)
        c = None
    return cells.RecurrentCellState(h, c=c, step_index=0)


def _post_forward(model, node_out):
    cfg = model.config
    params = model.params
    x = node_out
    caches = []
    outputs = []
    skip_caches = {}
    by_target = {}
    for j, link in enumerate(cfg.skip_links):
        by_target.setdefault(link.target, []).append(j)
    for i, spec in enumerate(cfg.post):
        x, cache = _layer_forward(spec, params, f"post.{i}.{spec.kind}", x)
        for j in by_target.get(i, ()):
            link = cfg.skip_links[j]
            k = ConvKernel(params[f"skip.{j}.score.weights"],
                           params[f"skip.{j}.score.bias"], 1, 0)
            scored, sc_cache = conv2d_forward(outputs[link.source], k)
            x = x + scored
            skip_caches[j] = sc_cache
        caches.append(cache)
        outputs.append(x)
    logits = x[0] if x.ndim == 4 else x
    check_finite(logits, "forward_window")
    return logits, caches, outputs, skip_caches


def _post_backward(model, grad_logits, cache, grads):
    """Backward through the post chain and skip links; returns grad at the
    recurrent node output."""
    cfg = model.config
    params = model.params
    n_post = len(cfg.post)
    g = grad_logits[None] if len(cache.post_outputs) == 0 or \
        cache.post_outputs[-1].ndim == 4 else grad_logits
    if n_post == 0:
        return grad_logits[None]
    pending = [None] * n_post
    pending[-1] = g
    by_target = {}
    for j, link in enumerate(cfg.skip_links):
        by_target.setdefault(link.target, []).append(j)
    grad_node = None
    for i in range(n_post - 1, -1, -1):
        gi = pending[i]
        if gi is None:
            continue
        for j in by_target.get(i, ()):
            link = cfg.skip_links[j]
            k = ConvKernel(params[f"skip.{j}.score.weights"],
                           params[f"skip.{j}.score.bias"], 1, 0)
            gsrc, gw, gb = conv2d_backward(gi, cache.skip[j], k)
            grads[f"skip.{j}.score.weights"] += gw
            grads[f"skip.{j}.score.bias"] += gb
            if pending[link.source] is None:
                pending[link.source] = gsrc
            else:
                pending[link.source] = pending[link.source] + gsrc
        spec = cfg.post[i]
        gx, pgrads = _layer_backward(spec, params, f"post.{i}.{spec.kind}",
                                     gi, cache.post[i])
        for name, gval in pgrads.items():
            grads[name] += gval
        if i == 0:
            grad_node = gx
        elif pending[i - 1] is None:
            pending[i - 1] = gx
        else:
            pending[i - 1] = pending[i - 1] + gx
    return grad_node


def _pre_backward(model, grad_feat, pre_caches, grads):
    cfg = model.config
    g = grad_feat
    for i in range(len(cfg.pre) - 1, -1, -1):
        spec = cfg.pre[i]
        g, pgrads = _layer_backward(spec, model.params, f"pre.{i}.{spec.kind}",
                                    g, pre_caches[i])
        for name, gval in pgrads.items():
            grads[name] += gval
    return g


def backward_window(model, grad_logits, cache):
    """BPTT over one window; returns a dict of gradients for every parameter."""
    cfg = model.config
    grads = zero_grads(model)
    grad_node = _post_backward(model, grad_logits, cache, grads)
    rec = cfg.recurrent
    if rec is None:
        _pre_backward(model, grad_node, cache.pre[0], grads)
        return grads
    io_kind = _cell_io(rec)
    p = model.cell_params()
    grad_h = grad_node if io_kind == "vec" else grad_node[0]
    grad_c = None
    T = cache.frames_used
    feat_grads = [None] * T
    for t in range(T - 1, -1, -1):
        if rec.kind == "gru":
            gx, grad_h, cgrads = cells.gru_backward(grad_h, cache.cell[t], p)
        elif rec.kind == "conv_gru":
            gx, grad_h, cgrads = cells.conv_gru_backward(grad_h, cache.cell[t], p)
        else:
            gx, grad_h, grad_c, cgrads = cells.lstm_backward(
                grad_h, grad_c, cache.cell[t], p)
        for name, gval in cgrads.items():
            grads[f"cell.{name}"] += gval
        feat_grads[t] = gx
    for t in range(T):
        g = feat_grads[t] if io_kind == "vec" else feat_grads[t][None]
        _pre_backward(model, g, cache.pre[t], grads)
    return grads


def forward_stream(model, frames, emit_from=None):
    """Streaming inference: carry the hidden state across all frames and emit
    logits for every frame index >= window-1 (or emit_from)."""
    cfg = model.config
    start = cfg.window - 1 if emit_from is None else emit_from
    if len(frames) < cfg.window:
        raise ShapeError(f"need at least {cfg.window} frames, got {len(frames)}")
    rec = cfg.recurrent
    out = []
    if rec is None:
        for t in range(start, len(frames)):
            x, _, _ = _run_chain(cfg.pre, model.params, "pre", frames[t][None])
            logits, _, _, _ = _post_forward(model, x)
            out.append((t, logits))
        return out
    io_kind = _cell_io(rec)
    p = model.cell_params()
    state = None
    for t, f in enumerate(frames):
        x, _, _ = _run_chain(cfg.pre, model.params, "pre", f[None])
        feat = _to_cell_input(x, io_kind)
        if state is None:
            state = init_cell_state(model, feat)
        if rec.kind == "gru":
            state, _ = cells.gru_step(feat, state, p)
        elif rec.kind == "conv_gru":
            state, _ = cells.conv_gru_step(feat, state, p)
        else:
            state, _ = cells.lstm_step(feat, state, p)
        if t >= start:
            logits, _, _, _ = _post_forward(model, _from_cell_output(state.h, io_kind))
            out.append((t, logits))
    return out


# ---------------------------------------------------------------------------
# Presets


def _lenet_trunk():
    return [
        LayerSpec("conv", size=5, pad=10, depth=20),
        LayerSpec("relu"),
        LayerSpec("pool", size=2),
        LayerSpec("conv", size=5, depth=50),
        LayerSpec("relu"),
        LayerSpec("pool", size=2),
        LayerSpec("conv", size=3, depth=500),
        LayerSpec("relu"),
        LayerSpec("conv1x1", depth=1),
    ]


def _12s_trunk():
    # Pads chosen so the coarse map is exactly input/12 (10x15 at 120x180);
    # the deconv then restores the input size in one stride-12 hop.
    return [
        LayerSpec("conv", size=5, stride=3, pad=1, depth=20),
        LayerSpec("relu"),
        LayerSpec("pool", size=2),
        LayerSpec("conv", size=5, pad=2, depth=50),
        LayerSpec("relu"),
        LayerSpec("pool", size=2),
        LayerSpec("conv", size=3, pad=1, depth=500),
        LayerSpec("relu"),
        LayerSpec("conv1x1", depth=1),
    ]


def _vgg_trunk():
    return [
        LayerSpec("conv", size=11, stride=4, pad=40, depth=64),
        LayerSpec("relu"),
        LayerSpec("pool", size=3),
        LayerSpec("conv", size=5, pad=2, depth=256),
        LayerSpec("relu"),
        LayerSpec("pool", size=3),
        LayerSpec("conv", size=3, pad=1, depth=256),
        LayerSpec("relu"),
        LayerSpec("conv", size=3, pad=1, depth=256),
        LayerSpec("relu"),
        LayerSpec("conv", size=3, pad=1, depth=256),
        LayerSpec("relu"),
        LayerSpec("conv", size=3, pad=1, depth=512),
        LayerSpec("conv", size=3, pad=1, depth=128),
    ]


PRESET_NAMES = ("fc-lenet", "rfc-lenet", "fc-12s", "rfc-12s", "rfc-vgg",
                "rfcn-8s-sketch")


def preset(name, window=3):
    """Build one of the named architectures; all shape-check at their declared
    input sizes."""
    if name == "rfc-lenet":
        cfg = ArchitectureConfig(
            name=name, input_shape=(1, 28, 28), num_classes=1, window=window,
            pre=_lenet_trunk() + [
                LayerSpec("deconv", size=10, stride=4, pad=3, depth=1),
                LayerSpec("flatten"),
            ],
            recurrent=RecurrentSpec("gru", hidden=784),
            post=[LayerSpec("unflatten", target_shape=(1, 28, 28)),
                  LayerSpec("conv1x1", depth=1)],
        )
    elif name == "fc-lenet":
        cfg = ArchitectureConfig(
            name=name, input_shape=(1, 28, 28), num_classes=1, window=window,
            pre=_lenet_trunk() + [
                LayerSpec("deconv", size=10, stride=4, pad=3, depth=1),
            ],
            recurrent=None, post=[],
        )
    elif name == "rfc-12s":
        cfg = ArchitectureConfig(
            name=name, input_shape=(1, 120, 180), num_classes=1, window=window,
            pre=_12s_trunk() + [LayerSpec("flatten")],
            recurrent=RecurrentSpec("gru", hidden=150),
            post=[
                LayerSpec("unflatten", target_shape=(1, 10, 15)),
                LayerSpec("deconv", size=12, stride=12, depth=1),
            ],
        )
    elif name == "fc-12s":
        cfg = ArchitectureConfig(
            name=name, input_shape=(1, 120, 180), num_classes=1, window=window,
            pre=_12s_trunk(),
            recurrent=None,
            post=[LayerSpec("deconv", size=12, stride=12, depth=1)],
        )
    elif name == "rfc-vgg":
        cfg = ArchitectureConfig(
            name=name, input_shape=(3, 240, 360), num_classes=1, window=window,
            pre=_vgg_trunk(),
            recurrent=RecurrentSpec("conv_gru", hidden=128, kernel=3),
            post=[
                LayerSpec("conv1x1", depth=1),
                LayerSpec("deconv", size=30, stride=30, depth=1),
            ],
        )
    elif name == "rfcn-8s-sketch":
        # Reduced FCN-8s-style config: the recurrent cell sits before the
        # pooling stage where the skip connection branches. Shape-checked but
        # intended as a documented starting point, not a tuned network.
        cfg = ArchitectureConfig(
            name=name, input_shape=(3, 96, 96), num_classes=5, window=window,
            pre=[
                LayerSpec("conv", size=3, pad=1, depth=16),
                LayerSpec("relu"),
                LayerSpec("pool", size=2),
                LayerSpec("conv", size=3, pad=1, depth=32),
                LayerSpec("relu"),
                LayerSpec("pool", size=2),
                LayerSpec("conv", size=3, pad=1, depth=64),
                LayerSpec("relu"),
            ],
            recurrent=RecurrentSpec("conv_gru", hidden=64, kernel=3),
            post=[
                LayerSpec("pool", size=2),
                LayerSpec("conv", size=3, pad=1, depth=128),
                LayerSpec("relu"),
                LayerSpec("pool", size=2),
                LayerSpec("conv", size=3, pad=1, depth=128),
                LayerSpec("relu"),
                LayerSpec("conv1x1", depth=5),
                LayerSpec("deconv", size=2, stride=2, depth=5),
                LayerSpec("deconv", size=8, stride=8, depth=5),
            ],
            skip_links=[SkipLink(source=0, target=7)],
        )
    else:
        raise ConfigError(f"unknown preset {name!r}")
    shape_check(cfg)
    return cfg


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model, path):
    """Serialize a model: magic, version, canonical config JSON, then
    length-prefixed named f32 tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = model.config.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name, arr in model.params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    data = buf.getvalue()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _read(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path, dtype=np.float32):
    """Load and validate a checkpoint; shapes and the name set must match the
    embedded config exactly."""
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic bytes; not a checkpoint file")
        (version,) = struct.unpack("<I", _read(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", _read(f, 4, "config length"))
        try:
            config = ArchitectureConfig.from_json(_read(f, clen, "config").decode("utf-8"))
        except (json.JSONDecodeError, KeyError) as e:
            raise CheckpointError(f"embedded config unreadable: {e}") from e
        try:
            report = shape_check(config)
        except ConfigError as e:
            raise CheckpointError(f"embedded config invalid: {e}") from e
        (count,) = struct.unpack("<I", _read(f, 4, "tensor count"))
        params = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read(f, 4, "name length"))
            name = _read(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read(f, 4 * rank, "dims"))
            if name not in report.param_shapes:
                raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
            if tuple(dims) != report.param_shapes[name]:
                raise CheckpointError(
                    f"tensor {name!r} dims {dims} != config shape "
                    f"{report.param_shapes[name]}")
            n = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(_read(f, 4 * n, f"data of {name}"), dtype="<f4")
            params[name] = arr.reshape(dims).astype(dtype)
        missing = set(report.param_shapes) - set(params)
        if missing:
            raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    ordered = OrderedDict((k, params[k]) for k in report.param_shapes)
    return ModelInstance(config=config, params=ordered, dtype=dtype)


def load_matching(model, path):
    """Copy tensors from a checkpoint into an existing model where names and
    shapes agree (used to seed a recurrent net from its non-recurrent
    baseline). Returns the copied names."""
    other = load_checkpoint(path, dtype=model.dtype)
    copied = []
    for name, arr in other.params.items():
        if name in model.params and model.params[name].shape == arr.shape:
            model.params[name] = arr.astype(model.dtype)
            copied.append(name)
    return copied
