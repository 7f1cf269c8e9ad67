"""Template generation, encryption and template recovery.

The encoder maps an image to a single-channel template in [0, 1]; the image
is encrypted by multiplying it with the template (broadcast over RGB); the
decoder tries to recover the template from the encrypted image.  The three
loss terms are combined with the detector loss by :func:`total_loss`.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autograd import (
    Conv2d,
    ConvBNReLU,
    Module,
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    avg_pool2,
    broadcast_channels,
    l2_norm,
    upsample2,
)

COS_EPS = 1e-8
# (lambda_obj, lambda_e, lambda_d) defaults for box detection and camouflaged segmentation
GOD_LOSS_WEIGHTS = (7.0, 10.0, 10.0)
COD_LOSS_WEIGHTS = (10.0, 0.1, 0.1)


class TemplateMode(str, Enum):
    IMAGE_DEPENDENT = "ImageDependent"
    UNIVERSAL = "UniversalLearnable"
    FIXED = "Fixed"


class TransformMode(str, Enum):
    MULTIPLY = "Multiply"
    ADD = "Add"


class TrainingError(RuntimeError):
    pass


@dataclass
class WrapperConfig:
    encoder_widths: tuple = (16, 32)  # (stem width, block width)
    decoder_widths: tuple = (16, 32)
    num_stem: int = 2
    num_blocks: int = 13
    levels: int = 2  # 2x poolings in the first blocks, mirrored by upsampling in the last
    template_mode: TemplateMode = TemplateMode.IMAGE_DEPENDENT
    transform_mode: TransformMode = TransformMode.MULTIPLY
    use_decoder: bool = True
    loss_weights: tuple = GOD_LOSS_WEIGHTS  # (obj, encoder, decoder)
    final_bias_offset: float = 4.0
    fixed_template: str = "random"  # "random" (seeded uniform map) or "ones"

    def __post_init__(self):
        self.template_mode = TemplateMode(self.template_mode)
        self.transform_mode = TransformMode(self.transform_mode)
        self.encoder_widths = tuple(int(v) for v in self.encoder_widths)
        self.decoder_widths = tuple(int(v) for v in self.decoder_widths)
        self.loss_weights = tuple(float(v) for v in self.loss_weights)
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0 or max(self.loss_weights) <= 0:
            raise ValueError(f"loss weights must be 3 nonnegative values, one positive: {self.loss_weights}")
        if self.num_blocks < 2 * self.levels:
            raise ValueError("num_blocks must cover the down- and up-sampling levels")
        if self.fixed_template not in ("random", "ones"):
            raise ValueError(f"unknown fixed_template {self.fixed_template!r}")


class TemplateNet(Module):
    """Stem convs, then conv-BN-ReLU blocks, then a 1x1 sigmoid head.

    The first ``levels`` blocks halve the resolution, the last ``levels``
    blocks double it back, so the template has the input's spatial size.
    """

    def __init__(self, widths, rng, num_stem=2, num_blocks=13, levels=2, bias_offset=4.0, dtype=np.float32):
        stem_w, block_w = widths
        self.levels = levels
        self.stem = [ConvBNReLU(3 if k == 0 else stem_w, stem_w, rng, dtype=dtype) for k in range(num_stem)]
        self.blocks = [ConvBNReLU(stem_w if k == 0 else block_w, block_w, rng, dtype=dtype) for k in range(num_blocks)]
        self.head = Conv2d(block_w, 1, rng, kernel=1, dtype=dtype)
        # near-zero head weights plus a positive bias: sigmoid output starts close to 1
        self.head.weight.data *= 1e-3
        self.head.bias.data[:] = bias_offset
        self.calls = 0

    def logits(self, x):
        self.calls += 1
        for layer in self.stem:
            x = layer(x)
        n = len(self.blocks)
        for k, block in enumerate(self.blocks):
            if k < self.levels:
                x = avg_pool2(x)
            elif k >= n - self.levels:
                x = upsample2(x)
            x = block(x)
        return self.head(x)

    def forward(self, x):
        return self.logits(x).sigmoid()


def _check_image(x, size):
    if x.ndim != 4 or x.shape[1] != size or x.shape[2] != size or x.shape[3] != 3:
        raise ShapeError(f"expected images of shape (B, {size}, {size}, 3), got {x.shape}")


class ProactiveWrapper(Module):
    def __init__(self, config: WrapperConfig, image_size: int, seed: int, dtype=np.float32):
        self.config = config
        self.image_size = image_size
        if image_size % (2 ** config.levels):
            raise ValueError(f"image_size {image_size} not divisible by 2^{config.levels}")
        enc_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(101,)))
        dec_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(102,)))
        mode = config.template_mode
        self.encoder = None
        self.universal = None
        self.fixed = None
        if mode is TemplateMode.IMAGE_DEPENDENT:
            self.encoder = TemplateNet(config.encoder_widths, enc_rng, config.num_stem, config.num_blocks,
                                       config.levels, config.final_bias_offset, dtype)
        elif mode is TemplateMode.UNIVERSAL:
            self.universal = Parameter(np.full((1, image_size, image_size, 1), config.final_bias_offset, dtype=dtype))
        elif config.fixed_template == "ones":
            self.fixed = np.ones((1, image_size, image_size, 1), dtype=dtype)
        else:
            self.fixed = enc_rng.uniform(0.0, 1.0, size=(1, image_size, image_size, 1)).astype(dtype)
        self.decoder = TemplateNet(config.decoder_widths, dec_rng, config.num_stem, config.num_blocks,
                                   config.levels, config.final_bias_offset, dtype)

    def named_parameters(self, prefix=""):
        out = []
        if self.encoder is not None:
            out += self.encoder.named_parameters(prefix + "encoder.")
        if self.universal is not None:
            out.append((prefix + "encoder.universal", self.universal))
        out += self.decoder.named_parameters(prefix + "decoder.")
        return out

    def named_buffers(self, prefix=""):
        out = []
        if self.encoder is not None:
            out += self.encoder.named_buffers(prefix + "encoder.")
        if self.fixed is not None:
            out.append((prefix + "encoder.fixed", self.fixed))
        out += self.decoder.named_buffers(prefix + "decoder.")
        return out

    def _load_buffers(self, state, prefix):
        if self.encoder is not None:
            self.encoder._load_buffers(state, prefix + "encoder.")
        if self.fixed is not None:
            self.fixed = np.array(state[prefix + "encoder.fixed"], dtype=self.fixed.dtype)
        self.decoder._load_buffers(state, prefix + "decoder.")

    def encoder_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("encoder.")]

    def decoder_parameters(self):
        return self.decoder.parameters()

    def template(self, images):
        """Template for a batch, shape (B, H, W, 1)."""
        images = as_tensor(images)
        _check_image(images, self.image_size)
        if self.encoder is not None:
            return self.encoder(images)
        b = images.shape[0]
        if self.universal is not None:
            ones = Tensor(np.ones((b, 1, 1, 1), dtype=images.dtype))
            return ones * self.universal.sigmoid()
        return Tensor(np.broadcast_to(self.fixed, (b,) + self.fixed.shape[1:]).copy())

    def recover(self, encrypted):
        encrypted = as_tensor(encrypted)
        _check_image(encrypted, self.image_size)
        return self.decoder(encrypted)


def encoder_forward(wrapper: ProactiveWrapper, image):
    return wrapper.template(image)


def decoder_forward(wrapper: ProactiveWrapper, encrypted):
    return wrapper.recover(encrypted)


def encrypt(image, template, mode=TransformMode.MULTIPLY):
    """Multiply: image * template; Add: clamp(image + template - 1, 0, 1).

    image: (B, H, W, 3); template: (B, H, W, 1), broadcast over channels.
    """
    image, template = as_tensor(image), as_tensor(template)
    mode = TransformMode(mode)
    if template.ndim != 4 or template.shape[-1] != 1 or image.shape[:3] != template.shape[:3]:
        raise ShapeError(f"encrypt: incompatible shapes {image.shape} and {template.shape}")
    t3 = broadcast_channels(template, image.shape[-1])
    if mode is TransformMode.MULTIPLY:
        return image * t3
    return (image + t3 - 1.0).clamp(0.0, 1.0)


def cosine_similarity(a, b):
    """Per-row cosine of flattened maps: <a,b> / (|a||b| + eps).  Shape (B,)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine: incompatible shapes {a.shape} and {b.shape}")
    n = a.shape[0]
    a2, b2 = a.reshape(n, -1), b.reshape(n, -1)
    dot = (a2 * b2).sum(axis=1)
    return dot / (l2_norm(a2, axis=1) * l2_norm(b2, axis=1) + COS_EPS)


def loss_encoder(template, gt_map):
    """Mean over the batch of 1 - Cos(S, G); images with an empty G contribute 0."""
    template = as_tensor(template)
    g = np.asarray(gt_map.data if isinstance(gt_map, Tensor) else gt_map, dtype=template.dtype)
    g = g.reshape(template.shape)
    n = template.shape[0]
    nonempty = (g.reshape(n, -1).sum(axis=1) > 0).astype(template.dtype)
    per = (1.0 - cosine_similarity(template, Tensor(g))) * Tensor(nonempty)
    return per.sum() * (1.0 / n)


def loss_decoder(recovered, template):
    """Mean over the batch of 1 - Cos(S', S)."""
    recovered, template = as_tensor(recovered), as_tensor(template)
    return (1.0 - cosine_similarity(recovered, template)).sum() * (1.0 / recovered.shape[0])


def total_loss(j_obj, j_e, j_d, weights, use_decoder=True):
    """lambda_obj * J_obj + lambda_e * J_e + lambda_d * J_d (J_d dropped without a decoder)."""
    terms = [as_tensor(j_obj), as_tensor(j_e)] + ([as_tensor(j_d)] if use_decoder else [])
    for name, t in zip(("J_OBJ", "J_E", "J_D"), terms):
        if not np.all(np.isfinite(t.data)):
            raise TrainingError(f"non-finite loss term {name}")
    lam_obj, lam_e, lam_d = weights
    out = terms[0] * lam_obj + terms[1] * lam_e
    if use_decoder:
        out = out + terms[2] * lam_d
    return out


def template_to_gray8(template):
    """Template map in [0, 1] -> uint8 gray image, value round(255 * s)."""
    t = np.asarray(template.data if isinstance(template, Tensor) else template, dtype=np.float64)
    return np.round(255.0 * np.clip(t, 0.0, 1.0)).astype(np.uint8)
