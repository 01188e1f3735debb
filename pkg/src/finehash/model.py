"""Part-attentive hashing network.

The network maps an image to a q-bit code in four stages: a small
convolutional backbone produces a base feature map, a 1x1-conv attention
head scores one spatial map per part, each attention map gates the base
features which are then refined into a compact part vector, and a final
linear hash layer turns the concatenated part and global vectors into a
code.  All stages run per sample on the autodiff tape so the trainer can
differentiate straight through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError

REFINE_POOL = 2  # spatial pool factor applied by both refinement stages


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Attributes:
        parts: number of attended parts M.
        bits: code length q.
        image_side: input images are [image_side, image_side, in_channels].
        in_channels: input channel count.
        backbone_channels: output channels of each backbone block.
        backbone_pools: spatial mean-pool factor after each block (1 = none).
        refined_channels: channel count C' of the refined part features.
    """

    parts: int = 4
    bits: int = 32
    image_side: int = 32
    in_channels: int = 3
    backbone_channels: tuple[int, ...] = (16, 32, 32)
    backbone_pools: tuple[int, ...] = (2, 2, 1)
    refined_channels: int = 32

    def __post_init__(self):
        if self.parts < 1:
            raise ContractError(f"parts must be >= 1, got {self.parts}")
        if self.bits < 1:
            raise ContractError(f"bits must be >= 1, got {self.bits}")
        if not self.backbone_channels:
            raise ContractError("backbone_channels must be nonempty")
        if len(self.backbone_pools) != len(self.backbone_channels):
            raise ContractError(
                f"{len(self.backbone_pools)} pool factors for "
                f"{len(self.backbone_channels)} backbone blocks"
            )
        side = self.image_side
        for factor in self.backbone_pools:
            if factor < 1:
                raise ContractError(f"pool factors must be >= 1, got {factor}")
            if side % factor:
                raise ContractError(
                    f"image side {self.image_side} is not divisible by the pool chain"
                )
            side //= factor
        if side % REFINE_POOL:
            raise ContractError(f"feature side {side} is not divisible by the refine pool")

    @property
    def feature_side(self) -> int:
        side = self.image_side
        for factor in self.backbone_pools:
            side //= factor
        return side

    @property
    def feature_channels(self) -> int:
        return self.backbone_channels[-1]

    @property
    def refined_side(self) -> int:
        return self.feature_side // REFINE_POOL

    @property
    def descriptor_dim(self) -> int:
        return (self.parts + 1) * self.refined_channels


@dataclass
class RefinedFeatures:
    """Per-sample forward outputs used by the losses and the hash layer.

    part_maps holds the refined spatial tensor of each part, part_vecs the
    spatially pooled part vectors, and global_vec the pooled output of the
    independent global refinement branch.
    """

    part_maps: list[ad.Tensor] = field(default_factory=list)
    part_vecs: list[ad.Tensor] = field(default_factory=list)
    global_vec: ad.Tensor | None = None


class ModelParams:
    """Named parameter tensors for every stage of the network."""

    def __init__(self, config: ModelConfig, tensors: dict[str, ad.Tensor]):
        self.config = config
        self._tensors = dict(tensors)
        blocks = len(config.backbone_channels)
        self.backbone_kernels = [tensors[f"backbone.{i}.kernel"] for i in range(blocks)]
        self.backbone_biases = [tensors[f"backbone.{i}.bias"] for i in range(blocks)]
        self.attention_kernel = tensors["attention.kernel"]
        self.attention_bias = tensors["attention.bias"]
        self.local_kernel = tensors["local.kernel"]
        self.local_bias = tensors["local.bias"]
        self.global_kernel = tensors["global.kernel"]
        self.global_bias = tensors["global.bias"]
        self.hash_weight = tensors["hash.weight"]
        self.hash_bias = tensors["hash.bias"]

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        """Seeded init: He-scaled conv kernels, zero biases, 1/sqrt(d) hash."""
        tensors: dict[str, ad.Tensor] = {}
        c_in = config.in_channels
        for i, c_out in enumerate(config.backbone_channels):
            std = np.sqrt(2.0 / (9.0 * c_in))
            tensors[f"backbone.{i}.kernel"] = ad.parameter(
                rng.normal(0.0, std, size=(3, 3, c_in, c_out))
            )
            tensors[f"backbone.{i}.bias"] = ad.parameter(np.zeros(c_out))
            c_in = c_out
        feat_c = config.feature_channels
        tensors["attention.kernel"] = ad.parameter(
            rng.normal(0.0, np.sqrt(1.0 / feat_c), size=(1, 1, feat_c, config.parts))
        )
        tensors["attention.bias"] = ad.parameter(np.zeros(config.parts))
        for name in ("local", "global"):
            tensors[f"{name}.kernel"] = ad.parameter(
                rng.normal(
                    0.0,
                    np.sqrt(2.0 / (9.0 * feat_c)),
                    size=(3, 3, feat_c, config.refined_channels),
                )
            )
            tensors[f"{name}.bias"] = ad.parameter(np.zeros(config.refined_channels))
        dim = config.descriptor_dim
        tensors["hash.weight"] = ad.parameter(
            rng.normal(0.0, 1.0 / np.sqrt(dim), size=(config.bits, dim))
        )
        tensors["hash.bias"] = ad.parameter(np.zeros(config.bits))
        return cls(config, tensors)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls(config, {name: ad.parameter(values) for name, values in arrays.items()})

    def named(self) -> dict[str, ad.Tensor]:
        return dict(self._tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: tens.data.copy() for name, tens in self._tensors.items()}


def backbone_forward(params: ModelParams, image: np.ndarray) -> ad.Tensor:
    """Run the backbone on one image, returning the base feature map.

    The image must be [side, side, in_channels] with values in [0, 1].
    Each block is a same-padded 3x3 convolution, a channel bias, a relu,
    and a spatial mean-pool by the configured factor.
    """
    config = params.config
    expected = (config.image_side, config.image_side, config.in_channels)
    image = np.asarray(image, dtype=np.float64)
    if image.shape != expected:
        raise DimensionError(f"backbone_forward: image shape {image.shape}, expected {expected}")
    out = ad.tensor(image)
    for kernel, bias, factor in zip(
        params.backbone_kernels, params.backbone_biases, config.backbone_pools
    ):
        out = ad.relu(ad.bias_add(ad.conv2d(out, kernel), bias))
        if factor > 1:
            out = ad.avg_pool2(out, factor)
    return out


def attention_maps(params: ModelParams, feature_map: ad.Tensor) -> list[ad.Tensor]:
    """Score one attention map per part; every entry lies in (0, 1)."""
    config = params.config
    expected = (config.feature_side, config.feature_side, config.feature_channels)
    if feature_map.shape != expected:
        raise DimensionError(
            f"attention_maps: feature map shape {feature_map.shape}, expected {expected}"
        )
    scores = ad.bias_add(ad.conv2d(feature_map, params.attention_kernel), params.attention_bias)
    probs = ad.sigmoid(scores)
    return [ad.channel_slice(probs, j) for j in range(config.parts)]


def attend(feature_map: ad.Tensor, attention: ad.Tensor) -> ad.Tensor:
    """Gate every channel fiber of the feature map by one attention map."""
    if attention.data.ndim != 2 or feature_map.data.ndim != 3:
        raise DimensionError(
            f"attend: need map [H, W] and tensor [H, W, C], got "
            f"{attention.shape} and {feature_map.shape}"
        )
    return ad.hadamard(attention, feature_map)


def local_refine(params: ModelParams, attended: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """Refine one attended map into a spatial tensor and its pooled vector.

    The refinement weights are shared across parts, so refining part j can
    never touch the features of any other part.
    """
    refined = ad.avg_pool2(
        ad.relu(ad.bias_add(ad.conv2d(attended, params.local_kernel), params.local_bias)),
        REFINE_POOL,
    )
    return refined, ad.global_avg_pool(refined)


def global_refine(params: ModelParams, feature_map: ad.Tensor) -> ad.Tensor:
    """Independent refinement branch over the ungated feature map."""
    refined = ad.avg_pool2(
        ad.relu(ad.bias_add(ad.conv2d(feature_map, params.global_kernel), params.global_bias)),
        REFINE_POOL,
    )
    return ad.global_avg_pool(refined)


def forward_features(params: ModelParams, image: np.ndarray) -> RefinedFeatures:
    """Full feature pipeline for one image: backbone, attention, refinement."""
    base = backbone_forward(params, image)
    features = RefinedFeatures()
    for attention in attention_maps(params, base):
        refined_map, refined_vec = local_refine(params, attend(base, attention))
        features.part_maps.append(refined_map)
        features.part_vecs.append(refined_vec)
    features.global_vec = global_refine(params, base)
    return features


def hash_layer(
    params: ModelParams,
    part_vecs: Sequence[ad.Tensor],
    global_vec: ad.Tensor,
    mode: str = "relaxed",
):
    """Map part and global vectors to a code.

    In ``relaxed`` mode the result is a differentiable tanh code in
    (-1, 1)^q; in ``discrete`` mode it is a plain +/-1 ndarray using the
    package-wide convention sign(0) = +1, so a zero score row yields +1.

    The per-bit bias acts as the threshold of each hash function.  It
    starts at zero; the trainer keeps it at the mean projection of the
    training descriptors so every bit splits the database roughly in
    half.  Pooled relu descriptors are entrywise positive, and without
    that recentering one shared direction dominates every projection and
    all items collapse onto a single code.

    Returns:
        A Tensor in relaxed mode, an ndarray in discrete mode.
    """
    config = params.config
    if mode not in ("relaxed", "discrete"):
        raise ContractError(f"hash_layer: unknown mode {mode!r}")
    if len(part_vecs) != config.parts:
        raise DimensionError(f"hash_layer: {len(part_vecs)} part vectors, expected {config.parts}")
    for vec in (*part_vecs, global_vec):
        if vec.shape != (config.refined_channels,):
            raise DimensionError(
                f"hash_layer: vector shape {vec.shape}, expected ({config.refined_channels},)"
            )
    descriptor = ad.concat([*part_vecs, global_vec])
    column = ad.reshape(descriptor, (config.descriptor_dim, 1))
    projected = ad.reshape(ad.matmul(params.hash_weight, column), (config.bits,))
    scores = ad.sub(projected, params.hash_bias)
    if mode == "relaxed":
        return ad.tanh(scores)
    return ad.sign_pm1(scores.data)


def descriptor_vector(features: RefinedFeatures) -> np.ndarray:
    """Concatenated real-valued descriptor used for re-ranking."""
    pieces = [vec.data for vec in features.part_vecs] + [features.global_vec.data]
    return np.concatenate(pieces)
