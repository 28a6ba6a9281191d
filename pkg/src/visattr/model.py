"""Trainable encoder: a small convolutional trunk plus per-task projection heads.

The trunk is conv -> relu -> max-pool stages followed by global mean
pooling and a linear map to the feature vector. Each pretext task gets its
own head; heads share the trunk but no parameters with each other. The
texture head taps the last pre-pool feature map through a 1x1 convolution
so its output keeps a spatial layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .imageops import check_image, resize_bilinear


@dataclass
class EncoderConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    n_feat: int = 64
    input_side: int = 64
    n_bins: int = 10
    d_slpd: int = 64
    td_channels: int = 16

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if any(w < 1 for w in self.widths):
            raise ValueError("conv widths must be >= 1")
        if self.n_feat < 8:
            raise ValueError("feature dim must be >= 8")
        if self.input_side % (2 ** len(self.widths)) != 0:
            raise ValueError(f"input side {self.input_side} must be divisible by "
                             f"{2 ** len(self.widths)} for {len(self.widths)} pooling stages")

    @property
    def gram_dim(self) -> int:
        return self.td_channels * self.td_channels


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ProjectionHead:
    """Two fully connected layers with a ReLU, optionally unit-normalized."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    normalize: bool

    def apply(self, feature: Tensor) -> Tensor:
        hidden = ad.relu(ad.fully_connected(feature, self.w1, self.b1))
        out = ad.fully_connected(hidden, self.w2, self.b2)
        if self.normalize:
            out = ad.l2_normalize(out)
        return out


def project(head: ProjectionHead, feature: Tensor) -> Tensor:
    return head.apply(feature)


class Encoder:
    """Convolutional feature extractor with RGB, patch, and texture heads."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        k = config.kernel

        c_in = 3
        for i, width in enumerate(config.widths):
            fan_in = c_in * k * k
            self._add(f"trunk/conv{i}/w", _kaiming_uniform(rng, (width, c_in, k, k), fan_in))
            self._add(f"trunk/conv{i}/b", np.zeros(width))
            c_in = width
        self._add("trunk/fc/w", _kaiming_uniform(rng, (config.n_feat, c_in), c_in))
        self._add("trunk/fc/b", np.zeros(config.n_feat))

        self.head_r = self._make_head(rng, "head_r", config.n_bins, normalize=False)
        self.head_g = self._make_head(rng, "head_g", config.n_bins, normalize=False)
        self.head_b = self._make_head(rng, "head_b", config.n_bins, normalize=False)
        self.head_slpd = self._make_head(rng, "head_slpd", config.d_slpd, normalize=True)

        fan_in = config.widths[-1]
        self._add("head_td/w", _kaiming_uniform(rng, (config.td_channels, fan_in, 1, 1), fan_in))
        self._add("head_td/b", np.zeros(config.td_channels))

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        tensor = Tensor(data, requires_grad=True)
        self.params[name] = tensor
        return tensor

    def _make_head(self, rng: np.random.Generator, name: str, out_dim: int,
                   normalize: bool) -> ProjectionHead:
        n = self.config.n_feat
        return ProjectionHead(
            w1=self._add(f"{name}/fc1/w", _kaiming_uniform(rng, (n, n), n)),
            b1=self._add(f"{name}/fc1/b", np.zeros(n)),
            w2=self._add(f"{name}/fc2/w", _kaiming_uniform(rng, (out_dim, n), n)),
            b2=self._add(f"{name}/fc2/b", np.zeros(out_dim)),
            normalize=normalize,
        )

    # -- forward passes ------------------------------------------------------

    def trunk_forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Batch [B,3,S,S] -> (features [B,n_feat], pre-pool map [B,C,h,w])."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected [B,3,S,S] batch, got {images.shape}")
        x = images
        pad = self.config.kernel // 2
        prepool = x
        for i in range(len(self.config.widths)):
            w = self.params[f"trunk/conv{i}/w"]
            b = self.params[f"trunk/conv{i}/b"]
            x = ad.conv2d(x, w, stride=1, padding=pad)
            x = ad.add(x, ad.reshape(b, (1, -1, 1, 1)))
            x = ad.relu(x)
            prepool = x
            x = ad.max_pool2d(x, 2)
        pooled = ad.mean_pool(x)
        features = ad.fully_connected(pooled, self.params["trunk/fc/w"], self.params["trunk/fc/b"])
        return features, prepool

    def td_map(self, prepool: Tensor) -> Tensor:
        """1x1 conv from the pre-pool map to the texture channel map."""
        out = ad.conv2d(prepool, self.params["head_td/w"], stride=1, padding=0)
        return ad.add(out, ad.reshape(self.params["head_td/b"], (1, -1, 1, 1)))

    def batch_from_images(self, images: list[np.ndarray] | np.ndarray) -> Tensor:
        """Stack H x W x 3 images into a constant [B,3,S,S] input tensor."""
        side = self.config.input_side
        stacked = np.empty((len(images), 3, side, side))
        for i, img in enumerate(images):
            img = check_image(img)
            if img.shape[0] != side or img.shape[1] != side:
                img = resize_bilinear(img, side)
            stacked[i] = img.transpose(2, 0, 1)
        return Tensor(stacked)

    def extract_features(self, image: np.ndarray) -> np.ndarray:
        """Feature vector of one image (no gradient, no normalization)."""
        batch = self.batch_from_images([image])
        features, _ = self.trunk_forward(batch)
        return features.data[0].copy()

    def extract_features_batch(self, images: list[np.ndarray]) -> np.ndarray:
        batch = self.batch_from_images(images)
        features, _ = self.trunk_forward(batch)
        return features.data.copy()

    # -- parameter plumbing ----------------------------------------------------

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"param/{name}": p.data for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            key = f"param/{name}"
            if key not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name}")
            if arrays[key].shape != p.data.shape:
                raise DimensionError(f"checkpoint parameter {name} has shape "
                                     f"{arrays[key].shape}, expected {p.data.shape}")
            p.data = arrays[key].copy()
