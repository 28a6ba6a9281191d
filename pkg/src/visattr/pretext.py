"""Self-supervised objectives: histogram prediction, patch and texture
discrimination over momentum memory banks, and the epoch training loop.

Three sub-losses share one trunk: color-histogram prediction (KL between
the softmaxed head output and the input's histogram), instance
discrimination of shapeless local patches against bank V, and instance
discrimination of Gram texture descriptors against bank T. A plain
instance-discrimination baseline over augmented whole images reuses the
same contrastive machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, NumericFailure
from .imageops import (AugmentConfig, ColorHistogram, PatchSpec, augment,
                       compute_histograms_batch, resize_bilinear,
                       sample_shapeless_patch)
from .model import Encoder, ProjectionHead
from .optim import Adam

HIST_LOG_EPS = 1e-8
JOINT_TASKS = ("rgb", "slpd", "td")


class MemoryBank:
    """Per-instance feature table with momentum updates.

    Rows stay unit-norm: they are initialized as random unit vectors and
    re-normalized after every momentum interpolation so the contrastive
    logits remain cosine similarities.
    """

    def __init__(self, entries: np.ndarray, momentum: float = 0.5):
        if entries.ndim != 2:
            raise DimensionError("memory bank entries must be a 2-D matrix")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        self.entries = np.asarray(entries, dtype=np.float64)
        self.momentum = momentum

    @classmethod
    def random(cls, n: int, dim: int, momentum: float = 0.5,
               rng: np.random.Generator | None = None) -> "MemoryBank":
        rng = rng or np.random.default_rng(0)
        entries = rng.standard_normal((n, dim))
        entries /= np.maximum(np.linalg.norm(entries, axis=1, keepdims=True), ad.NORM_EPS)
        return cls(entries, momentum)

    def __len__(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def update(self, index: int, fresh: np.ndarray) -> None:
        """row <- normalize((1 - eta) * row + eta * fresh)."""
        if not 0 <= index < len(self):
            raise IndexError(f"bank index {index} out of range for size {len(self)}")
        if fresh.shape != (self.dim,):
            raise DimensionError(f"fresh feature shape {fresh.shape} != ({self.dim},)")
        row = (1.0 - self.momentum) * self.entries[index] + self.momentum * fresh
        self.entries[index] = row / max(np.linalg.norm(row), ad.NORM_EPS)

    def update_batch(self, indices: np.ndarray, fresh: np.ndarray) -> None:
        rows = (1.0 - self.momentum) * self.entries[indices] + self.momentum * fresh
        rows /= np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), ad.NORM_EPS)
        self.entries[indices] = rows


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    bank: MemoryBank | None = None

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")


@dataclass
class LossWeights:
    rgb: float = 1.0
    slpd: float = 1e-2
    td: float = 1e-5

    def __post_init__(self):
        if min(self.rgb, self.slpd, self.td) < 0.0:
            raise ValueError("loss weights must be non-negative")
        if max(self.rgb, self.slpd, self.td) == 0.0:
            raise ValueError("at least one loss weight must be positive")


# -- loss functions ------------------------------------------------------------


def rgb_histogram_loss(feature: Tensor, target: ColorHistogram,
                       heads: tuple[ProjectionHead, ProjectionHead, ProjectionHead]) -> Tensor:
    """Sum over channels of KL(predicted distribution || target histogram).

    Predictions are softmaxed head outputs; the target gets an additive
    1e-8 inside the log to guard empty bins.
    """
    total: Tensor | None = None
    for head, h in zip(heads, target.values):
        z = head.apply(feature)
        if z.shape[-1] != target.n_bins:
            raise DimensionError(f"head emits {z.shape[-1]} bins, target has {target.n_bins}")
        term = _kl_to_target(z, h[None, :] if z.ndim == 2 else h)
        total = term if total is None else ad.add(total, term)
    return total


def _kl_to_target(logits: Tensor, target_hist: np.ndarray) -> Tensor:
    """KL(softmax(logits) || target) summed over bins (any leading batch dim)."""
    p = ad.softmax(logits)
    log_p = ad.log_softmax(logits)
    log_h = Tensor(np.log(target_hist + HIST_LOG_EPS))
    per = ad.mul(p, ad.add(log_p, ad.mul(log_h, -1.0)))
    return ad.sum_(per, axis=-1) if per.ndim > 1 else ad.sum_(per)


def _rgb_loss_batch(features: Tensor, targets: np.ndarray, encoder: Encoder) -> Tensor:
    """Mean over the batch of the 3-channel KL loss; targets [B,3,n_bins]."""
    heads = (encoder.head_r, encoder.head_g, encoder.head_b)
    total: Tensor | None = None
    for c, head in enumerate(heads):
        z = head.apply(features)
        term = _kl_to_target(z, targets[:, c])
        total = term if total is None else ad.add(total, term)
    return ad.mean(total)


def contrastive_instance_loss(query: Tensor, index: int, bank: MemoryBank,
                              temperature: float = 0.07) -> Tensor:
    """-log softmax probability of the query's own bank row.

    Logits are bank-row dot products divided by the temperature; the bank
    is a constant within the step, so gradient flows into the query only.
    """
    if not 0 <= index < len(bank):
        raise IndexError(f"bank index {index} out of range for size {len(bank)}")
    if query.shape != (bank.dim,):
        raise DimensionError(f"query shape {query.shape} != ({bank.dim},)")
    q = ad.reshape(query, (1, bank.dim))
    losses = _contrastive_batch(q, np.array([index]), bank, temperature)
    return ad.reshape(losses, ())


def _contrastive_batch(queries: Tensor, indices: np.ndarray, bank: MemoryBank,
                       temperature: float) -> Tensor:
    """Per-row contrastive losses for unit-norm queries [B,d]; returns [B]."""
    logits = ad.mul(ad.matmul(queries, Tensor(bank.entries.T)), 1.0 / temperature)
    log_probs = ad.log_softmax(logits)
    return ad.mul(ad.pick_rows(log_probs, indices), -1.0)


def gram_texture(feature_map: Tensor) -> Tensor:
    """Normalized flattened Gram matrix of a [C,h,w] channel map.

    Entry (j,k) is the inner product of channels j and k over all pixels,
    scaled by 1/(C*h*w); the flattened matrix is unit-normalized so it can
    serve directly as a contrastive query or bank row.
    """
    if feature_map.ndim != 3:
        raise DimensionError(f"expected [C,h,w] map, got {feature_map.shape}")
    c, h, w = feature_map.shape
    flat = _gram_batch(ad.reshape(feature_map, (1, c, h, w)))
    return ad.reshape(flat, (c * c,))


def _gram_batch(feature_maps: Tensor) -> Tensor:
    """[B,C,h,w] -> unit-normalized flattened Gram matrices [B, C*C]."""
    b, c, h, w = feature_maps.shape
    m = ad.reshape(feature_maps, (b, c, h * w))
    gram = ad.mul(ad.matmul(m, ad.transpose2d(m)), 1.0 / (c * h * w))
    return ad.l2_normalize(ad.reshape(gram, (b, c * c)))


# -- training loop --------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    rgb: float
    slpd: float
    td: float
    total: float

    def as_log_line(self) -> str:
        return f"{self.epoch}\t{self.rgb:.12g}\t{self.slpd:.12g}\t{self.td:.12g}\t{self.total:.12g}"


class PretextTrainer:
    """Joint trainer for the self-supervised objectives over one image set.

    ``pretext`` selects sub-tasks: any subset of {"rgb", "slpd", "td"}, or
    ("id",) for the plain instance-discrimination baseline on augmented
    whole images. Banks are sized to the training set and updated with the
    step's fresh head outputs after each optimizer step.
    """

    def __init__(self, model: Encoder, images: np.ndarray, *,
                 pretext: tuple[str, ...] = JOINT_TASKS,
                 weights: LossWeights | None = None,
                 temperature: float = 0.07,
                 momentum: float = 0.5,
                 patch_ratio_range: tuple[float, float] = (0.05, 0.15),
                 id_crop_range: tuple[float, float] = (0.2, 1.0),
                 color_distortion: bool = False,
                 id_flip: bool = True,
                 exclude_background: bool = True,
                 batch_size: int = 32,
                 lr: float = 5e-5,
                 seed: int = 0):
        self._validate_pretext(pretext)
        self.model = model
        self.images = images  # [N, S, S, 3] float64 HWC at the model input side
        self.pretext = tuple(pretext)
        self.weights = weights or LossWeights()
        self.temperature = ContrastiveConfig(temperature).temperature  # validated
        self.patch_spec = PatchSpec(patch_ratio_range)
        self.id_augment = AugmentConfig(flip=id_flip, crop_ratio_range=id_crop_range,
                                        color_distortion=color_distortion)
        self.exclude_background = exclude_background
        self.batch_size = batch_size
        self.seed = seed
        self.epochs_done = 0
        self.optimizer = Adam(model.params, lr=lr)

        n = images.shape[0]
        side = model.config.input_side
        if images.shape[1:] != (side, side, 3):
            raise DimensionError(f"images must be [N,{side},{side},3], got {images.shape}")
        self.n_bins = model.config.n_bins
        self.full_histograms = compute_histograms_batch(
            images.transpose(0, 3, 1, 2), self.n_bins, exclude_background)

        rng = np.random.default_rng((seed, 0xBA2C))
        self.bank_patch: MemoryBank | None = None
        self.bank_texture: MemoryBank | None = None
        if "slpd" in self.pretext or "id" in self.pretext:
            self.bank_patch = MemoryBank.random(n, model.config.d_slpd, momentum, rng)
        if "td" in self.pretext:
            self.bank_texture = MemoryBank.random(n, model.config.gram_dim, momentum, rng)

    @staticmethod
    def _validate_pretext(pretext: tuple[str, ...]) -> None:
        tasks = set(pretext)
        if not tasks:
            raise ValueError("at least one pretext task required")
        if "id" in tasks:
            if tasks != {"id"}:
                raise ValueError("the instance-discrimination baseline runs alone")
            return
        unknown = tasks - set(JOINT_TASKS)
        if unknown:
            raise ValueError(f"unknown pretext tasks: {sorted(unknown)}")

    # -- single steps ------------------------------------------------------------

    def _image_rng(self, epoch: int, index: int) -> np.random.Generator:
        return np.random.default_rng((self.seed, epoch, int(index)))

    def _patch_batch(self, indices: np.ndarray, epoch: int) -> np.ndarray:
        side = self.model.config.input_side
        out = np.empty((len(indices), 3, side, side))
        for row, i in enumerate(indices):
            patch = sample_shapeless_patch(self.images[i], self.patch_spec,
                                           self._image_rng(epoch, i), out_side=side)
            out[row] = patch.transpose(2, 0, 1)
        return out

    def joint_losses(self, indices: np.ndarray, epoch: int):
        """Build the joint loss graph for a batch without applying updates.

        Returns (loss_rgb, loss_slpd, loss_td, total, slpd_query, td_query);
        disabled sub-losses come back as constant zeros, absent queries as
        None. Deterministic per (seed, epoch, indices).
        """
        need_patch = "rgb" in self.pretext or "slpd" in self.pretext
        need_full = "rgb" in self.pretext or "td" in self.pretext

        feat_full = prepool = feat_patch = patch_arrays = None
        if need_full:
            full = Tensor(self.images[indices].transpose(0, 3, 1, 2))
            feat_full, prepool = self.model.trunk_forward(full)
        if need_patch:
            patch_arrays = self._patch_batch(indices, epoch)
            feat_patch, _ = self.model.trunk_forward(Tensor(patch_arrays))

        zero = Tensor(0.0)
        loss_rgb = loss_slpd = loss_td = zero
        slpd_query = td_query = None

        if "rgb" in self.pretext:
            full_loss = _rgb_loss_batch(feat_full, self.full_histograms[indices], self.model)
            patch_hists = compute_histograms_batch(patch_arrays, self.n_bins,
                                                   self.exclude_background)
            patch_loss = _rgb_loss_batch(feat_patch, patch_hists, self.model)
            loss_rgb = ad.mul(ad.add(full_loss, patch_loss), 0.5)
        if "slpd" in self.pretext:
            slpd_query = self.model.head_slpd.apply(feat_patch)
            loss_slpd = ad.mean(_contrastive_batch(slpd_query, indices, self.bank_patch,
                                                   self.temperature))
        if "td" in self.pretext:
            td_query = _gram_batch(self.model.td_map(prepool))
            loss_td = ad.mean(_contrastive_batch(td_query, indices, self.bank_texture,
                                                 self.temperature))

        total = ad.add(ad.add(ad.mul(loss_rgb, self.weights.rgb),
                              ad.mul(loss_slpd, self.weights.slpd)),
                       ad.mul(loss_td, self.weights.td))
        return loss_rgb, loss_slpd, loss_td, total, slpd_query, td_query

    def joint_step(self, indices: np.ndarray, epoch: int) -> EpochStats:
        """One joint optimization step over a batch of image indices."""
        loss_rgb, loss_slpd, loss_td, total, slpd_query, td_query = \
            self.joint_losses(indices, epoch)
        self._apply_step(total)
        if slpd_query is not None:
            self.bank_patch.update_batch(indices, slpd_query.data)
        if td_query is not None:
            self.bank_texture.update_batch(indices, td_query.data)
        return EpochStats(epoch, loss_rgb.item(), loss_slpd.item(), loss_td.item(),
                          total.item())

    def id_losses(self, indices: np.ndarray, epoch: int):
        """Loss graph for the instance-discrimination baseline batch."""
        side = self.model.config.input_side
        batch = np.empty((len(indices), 3, side, side))
        for row, i in enumerate(indices):
            view = augment(self.images[i], self.id_augment, self._image_rng(epoch, i))
            if view.shape[:2] != (side, side):
                view = resize_bilinear(view, side)
            batch[row] = view.transpose(2, 0, 1)
        features, _ = self.model.trunk_forward(Tensor(batch))
        query = self.model.head_slpd.apply(features)
        loss = ad.mean(_contrastive_batch(query, indices, self.bank_patch, self.temperature))
        return loss, query

    def id_baseline_step(self, indices: np.ndarray, epoch: int) -> EpochStats:
        """Instance discrimination on augmented whole images (baseline)."""
        loss, query = self.id_losses(indices, epoch)
        self._apply_step(loss)
        self.bank_patch.update_batch(indices, query.data)
        value = loss.item()
        return EpochStats(epoch, 0.0, value, 0.0, value)

    def _apply_step(self, total: Tensor) -> None:
        if not np.isfinite(total.data):
            raise NumericFailure("training loss became non-finite; aborting")
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()

    # -- epochs ------------------------------------------------------------------

    def train_epoch(self) -> EpochStats:
        epoch = self.epochs_done
        n = self.images.shape[0]
        order = np.random.default_rng((self.seed, epoch)).permutation(n)
        sums = np.zeros(4)
        steps = 0
        for start in range(0, n, self.batch_size):
            batch = order[start:start + self.batch_size]
            if "id" in self.pretext:
                stats = self.id_baseline_step(batch, epoch)
            else:
                stats = self.joint_step(batch, epoch)
            sums += (stats.rgb, stats.slpd, stats.td, stats.total)
            steps += 1
        self.epochs_done += 1
        mean = sums / max(steps, 1)
        return EpochStats(epoch, *mean)

    def run(self, epochs: int, on_epoch=None) -> list[EpochStats]:
        history = []
        while self.epochs_done < epochs:
            stats = self.train_epoch()
            history.append(stats)
            if on_epoch is not None:
                on_epoch(stats)
        return history

    # -- checkpoint integration -----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.model.state_arrays())
        arrays.update(self.optimizer.state_arrays())
        arrays["meta/epochs_done"] = np.asarray([float(self.epochs_done)])
        if self.bank_patch is not None:
            arrays["bank_patch/entries"] = self.bank_patch.entries
        if self.bank_texture is not None:
            arrays["bank_texture/entries"] = self.bank_texture.entries
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.model.load_state_arrays(arrays)
        self.optimizer.load_state_arrays(arrays)
        self.epochs_done = int(arrays["meta/epochs_done"][0])
        if self.bank_patch is not None:
            self.bank_patch.entries = arrays["bank_patch/entries"].copy()
        if self.bank_texture is not None:
            self.bank_texture.entries = arrays["bank_texture/entries"].copy()
