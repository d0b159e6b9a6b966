"""Three-subnetwork segmentation model: U-Net, skip-enhanced autoencoder and
imitating encoder.

Parameters live in a flat :class:`ParameterStore` keyed by dotted names; every
name carries exactly one :class:`Scope`. The forward passes are plain
functions over the store so that each one provably reads only the tensors
under its own name prefix.

Tensors follow the torch layout ``(batch, channels, height, width)``.

    image ──► U-Net encoder ──► U-Net decoder ──► U-Net segmentation
                   │ skips (levels 0..depth-1)
                   ▼
    image ──► imitating encoder ─┐
                                 ├─► CAE decoder ──► IE2D segmentation
    mask  ──► CAE encoder ───────┘   (training only)
"""
from __future__ import annotations

import enum
import math

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig
from .errors import DimensionError


class Scope(str, enum.Enum):
    UNET = "UNET"
    CAE_ENCODER = "CAE_ENCODER"
    CAE_DECODER = "CAE_DECODER"
    IMITATING_ENCODER = "IMITATING_ENCODER"


# name prefix for every scope
PREFIX = {
    Scope.UNET: "unet",
    Scope.CAE_ENCODER: "cae_enc",
    Scope.CAE_DECODER: "cae_dec",
    Scope.IMITATING_ENCODER: "imit",
}


def _encoder_layers(cfg, prefix):
    layers = []
    in_ch = 1
    for level in range(cfg.depth):
        out_ch = cfg.channels(level)
        for j in range(cfg.convs_per_level):
            layers.append((f"{prefix}.enc{level}.conv{j}", (out_ch, in_ch, cfg.kernel_size, cfg.kernel_size)))
            in_ch = out_ch
    return layers


def _decoder_layers(cfg, prefix):
    layers = []
    in_ch = cfg.latent_channels
    for level in reversed(range(cfg.depth)):
        out_ch = cfg.channels(level)
        # transposed-conv weight layout is (in, out, kh, kw)
        layers.append((f"{prefix}.dec{level}.up", (in_ch, out_ch, 2, 2)))
        conv_in = 2 * out_ch  # after concatenating the skip
        for j in range(cfg.convs_per_level):
            layers.append((f"{prefix}.dec{level}.conv{j}", (out_ch, conv_in, cfg.kernel_size, cfg.kernel_size)))
            conv_in = out_ch
        in_ch = out_ch
    layers.append((f"{prefix}.out", (cfg.output_classes, cfg.channels(0), 1, 1)))
    return layers


def layer_plan(cfg):
    """Ordered ``(layer_name, weight_shape, scope)`` triples for ``cfg``."""
    plan = []
    for name, shape in _encoder_layers(cfg, "unet") + _decoder_layers(cfg, "unet"):
        plan.append((name, shape, Scope.UNET))
    for name, shape in _encoder_layers(cfg, PREFIX[Scope.CAE_ENCODER]):
        plan.append((name, shape, Scope.CAE_ENCODER))
    for name, shape in _decoder_layers(cfg, PREFIX[Scope.CAE_DECODER]):
        plan.append((name, shape, Scope.CAE_DECODER))
    for name, shape in _encoder_layers(cfg, PREFIX[Scope.IMITATING_ENCODER]):
        plan.append((name, shape, Scope.IMITATING_ENCODER))
    return plan


def parameter_shapes(cfg):
    """Map of every parameter name to ``(shape, scope)`` for ``cfg``."""
    shapes = {}
    for name, wshape, scope in layer_plan(cfg):
        shapes[name + ".weight"] = (tuple(wshape), scope)
        bias_len = wshape[1] if name.endswith(".up") else wshape[0]
        shapes[name + ".bias"] = ((bias_len,), scope)
    return shapes


class ParameterStore:
    """Named weight tensors of a model, each tagged with one scope.

    The set of names and their shapes is fixed at construction; training only
    replaces values in place.
    """

    def __init__(self, config, tensors, scopes):
        if set(tensors) != set(scopes):
            raise ValueError("every parameter needs exactly one scope tag")
        self.config = config
        self.tensors = dict(tensors)
        self.scopes = {k: Scope(v) for k, v in scopes.items()}

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self, *scopes):
        """Parameter names belonging to any of ``scopes`` (all names if none given)."""
        wanted = {Scope(s) for s in scopes}
        return [k for k in self.tensors if not wanted or self.scopes[k] in wanted]

    def numel(self, *scopes):
        return sum(self.tensors[k].numel() for k in self.names(*scopes))

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def clone(self):
        return ParameterStore(
            self.config, {k: v.detach().clone() for k, v in self.tensors.items()}, self.scopes
        )

    def to(self, dtype):
        """Copy of the store with every tensor cast to ``dtype``."""
        return ParameterStore(
            self.config, {k: v.detach().to(dtype).clone() for k, v in self.tensors.items()}, self.scopes
        )

    def requires_grad_(self, flag=True):
        for v in self.tensors.values():
            v.requires_grad_(flag)
        return self

    def state(self):
        """Plain ``{name: ndarray}`` snapshot, useful for comparisons."""
        return {k: v.detach().cpu().numpy().copy() for k, v in self.tensors.items()}

    def equal(self, other, *scopes):
        """Bit-exact equality restricted to ``scopes`` (all if none)."""
        return all(torch.equal(self.tensors[k], other.tensors[k]) for k in self.names(*scopes))


def init_model(config: ModelConfig, dtype=torch.float32) -> ParameterStore:
    """Create all parameters for ``config``.

    Convolution weights are He-normal (std ``sqrt(2 / fan_in)``), biases
    zero. The draw is seeded from ``config.seed`` and goes through the
    layers in a fixed order, so equal configs give bit-identical stores.
    """
    gen = torch.Generator().manual_seed(config.seed)
    tensors, scopes = {}, {}
    for name, (shape, scope) in parameter_shapes(config).items():
        if name.endswith(".bias"):
            value = torch.zeros(shape, dtype=torch.float64)
        else:
            # transposed convs store (in, out, kh, kw)
            in_axis = 0 if ".up." in name else 1
            fan_in = shape[in_axis] * shape[2] * shape[3]
            value = torch.randn(shape, generator=gen, dtype=torch.float64) * math.sqrt(2.0 / fan_in)
        tensors[name] = value.to(dtype)
        scopes[name] = scope
    return ParameterStore(config, tensors, scopes)


def zeros_like_store(store):
    """Store with the same layout as ``store`` and every value zero."""
    return ParameterStore(
        store.config, {k: torch.zeros_like(v) for k, v in store.tensors.items()}, store.scopes
    )


# -- layers -----------------------------------------------------------------

def _same_pad(k):
    # even kernels put the extra row/column after
    return (k - 1) // 2, k // 2


def _conv(x, p, name, relu=True):
    w, b = p[name + ".weight"], p[name + ".bias"]
    k = w.shape[-1]
    if k > 1:
        before, after = _same_pad(k)
        x = F.pad(x, (before, after, before, after))
    x = F.conv2d(x, w, b)
    return F.relu(x) if relu else x


def _encode(p, prefix, x, cfg):
    skips = []
    for level in range(cfg.depth):
        for j in range(cfg.convs_per_level):
            x = _conv(x, p, f"{prefix}.enc{level}.conv{j}")
        skips.append(x)
        x = F.max_pool2d(x, 2)
    return x, skips


def _decode(p, prefix, code, skips, cfg):
    x = code
    for level in reversed(range(cfg.depth)):
        name = f"{prefix}.dec{level}.up"
        x = F.conv_transpose2d(x, p[name + ".weight"], p[name + ".bias"], stride=2)
        x = torch.cat([x, skips[level]], dim=1)
        for j in range(cfg.convs_per_level):
            x = _conv(x, p, f"{prefix}.dec{level}.conv{j}")
    return torch.sigmoid(_conv(x, p, f"{prefix}.out", relu=False))


def as_batch(array, store):
    """Coerce a grayscale map or stack to a ``(N, 1, H, W)`` tensor of the store's dtype.

    Accepts ``(H, W)``, ``(N, H, W)`` or ``(N, 1, H, W)`` numpy arrays or tensors.
    """
    x = torch.as_tensor(np.asarray(array) if not torch.is_tensor(array) else array)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    elif x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"expected a single-channel map, got shape {tuple(x.shape)}")
    size = store.config.input_size
    if tuple(x.shape[-2:]) != (size, size):
        raise DimensionError(f"expected spatial size {size}x{size}, got {tuple(x.shape[-2:])}")
    return x.to(store.dtype)


def _check_pyramid(skips, cfg):
    if len(skips) != cfg.depth:
        raise DimensionError(f"feature pyramid has {len(skips)} levels, config depth is {cfg.depth}")
    for level, s in enumerate(skips):
        side = cfg.input_size // 2 ** level
        if tuple(s.shape[1:]) != (cfg.channels(level), side, side):
            raise DimensionError(
                f"pyramid level {level} has shape {tuple(s.shape[1:])}, "
                f"expected {(cfg.channels(level), side, side)}"
            )


# -- forward passes -----------------------------------------------------------

def unet_forward(params, image):
    """U-Net segmentation plus its contracting-path features.

    Returns ``(segmentation, pyramid)`` where ``pyramid[i]`` is the level-``i``
    feature map captured before pooling.
    """
    cfg = params.config
    x = as_batch(image, params)
    bottom, skips = _encode(params, "unet", x, cfg)
    return _decode(params, "unet", bottom, skips, cfg), skips


def cae_encode(params, mask):
    x = as_batch(mask, params)
    code, _ = _encode(params, PREFIX[Scope.CAE_ENCODER], x, params.config)
    return code


def imitating_encode(params, image):
    x = as_batch(image, params)
    code, _ = _encode(params, PREFIX[Scope.IMITATING_ENCODER], x, params.config)
    return code


def decode_with_skips(params, code, skips):
    """Autoencoder decoder fed with ``code`` and the U-Net ``skips``.

    The skip features are detached: gradients of anything computed from the
    result never reach U-Net parameters.
    """
    cfg = params.config
    expected = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    if code.ndim != 4 or tuple(code.shape[1:]) != expected:
        raise DimensionError(f"latent code has shape {tuple(code.shape)}, expected (N, *{expected})")
    _check_pyramid(skips, cfg)
    skips = [s.detach() for s in skips]
    return _decode(params, PREFIX[Scope.CAE_DECODER], code, skips, cfg)


@torch.no_grad()
def ie2d_infer(params, image):
    """Inference wiring: the imitating encoder stands in for the CAE encoder.

    Returns ``(ie2d_segmentation, unet_segmentation)``.
    """
    unet_seg, skips = unet_forward(params, image)
    code = imitating_encode(params, image)
    return decode_with_skips(params, code, skips), unet_seg
