"""Alternating optimization of network weights, database codes, and anchors.

One outer iteration runs three phases:

1. weight phase: SGD on the relaxed similarity objective plus diversity
   terms, computed for a sampled subset of the training database against
   the full discrete code matrix;
2. code phase: closed-form sign updates of the database code matrix, one
   bit column at a time, which never increase the squared code objective;
3. anchor phase: per-class part-feature means over the full training
   database, used for feature exchanging once warm-up has passed.

Every random draw comes from a per-iteration stream seeded by
(seed, iteration + 1), so resuming from a checkpoint replays the exact
trajectory a straight run would have produced.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .anchors import AnchorBank, compute_anchor_bank, draw_keep_mask, exchange_features
from .checkpoint import load_arrays, save_arrays
from .data import Dataset, build_similarity
from .errors import ContractError, DimensionError, DomainError, FileFormatError
from .losses import LossWeights, auto_weights, total_objective
from .model import ModelConfig, ModelParams, descriptor_vector, forward_features, hash_layer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Schedule and optimizer settings for the alternating loop.

    spatial_weight and channel_weight default to None, meaning the auto
    scaling from the loss module; set explicit floats to override.
    """

    outer_iters: int = 15
    epochs_per_iter: int = 2
    batch_size: int = 64
    samples_per_epoch: int = 256
    learning_rate: float = 1e-3
    lr_drop_points: tuple[float, ...] = (0.6, 0.8)
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.25
    exchange: bool = True
    code_sweeps: int = 1
    spatial_weight: float | None = None
    channel_weight: float | None = None
    margin: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.outer_iters < 1:
            raise ContractError("TrainConfig: outer_iters must be >= 1")
        if self.epochs_per_iter < 0 or self.code_sweeps < 0:
            raise ContractError("TrainConfig: epochs_per_iter and code_sweeps must be >= 0")
        if self.batch_size < 1 or self.samples_per_epoch < 1:
            raise ContractError("TrainConfig: batch_size and samples_per_epoch must be >= 1")
        if self.learning_rate <= 0.0:
            raise ContractError("TrainConfig: learning_rate must be > 0")
        if not 0.0 < self.lr_drop_factor <= 1.0:
            raise ContractError("TrainConfig: lr_drop_factor must be in (0, 1]")
        for point in self.lr_drop_points:
            if not 0.0 < point <= 1.0:
                raise ContractError(f"TrainConfig: lr drop point {point} outside (0, 1]")
        if self.weight_decay < 0.0:
            raise ContractError("TrainConfig: weight_decay must be >= 0")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ContractError("TrainConfig: warmup_fraction must be in [0, 1]")
        for name in ("spatial_weight", "channel_weight"):
            value = getattr(self, name)
            if value is not None and value < 0.0:
                raise ContractError(f"TrainConfig: {name} must be >= 0")
        if self.margin < 0.0:
            raise ContractError("TrainConfig: margin must be >= 0")
        if self.seed < 0:
            raise ContractError("TrainConfig: seed must be >= 0")


def _ceil_fraction(fraction: float, total: int) -> int:
    # fuzz guards against 0.8 * 15 = 12.000000000000002 style float drift
    return int(math.ceil(fraction * total - 1e-9))


def warmup_iters(config: TrainConfig) -> int:
    """Number of leading outer iterations that run without exchanging."""
    return _ceil_fraction(config.warmup_fraction, config.outer_iters)


def learning_rate_at(config: TrainConfig, iteration: int) -> float:
    """Base rate divided by the drop factor at each schedule boundary."""
    rate = config.learning_rate
    for point in config.lr_drop_points:
        if iteration >= _ceil_fraction(point, config.outer_iters):
            rate *= config.lr_drop_factor
    return rate


def _check_pm1(values: np.ndarray, what: str) -> None:
    if not np.all(np.abs(values) == 1.0):
        raise DomainError(f"{what}: entries must be +/-1")


def update_code_column(
    relaxed: np.ndarray, codes: np.ndarray, sim: np.ndarray, bits: int, col: int
) -> np.ndarray:
    """Optimal +/-1 values for one code column with the others held fixed.

    Minimizes ||relaxed @ codes.T - bits * sim||_F^2 over the column, which
    separates per database item; a zero margin keeps the previous value.
    """
    relaxed = np.asarray(relaxed, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    sim = np.asarray(sim, dtype=np.float64)
    if relaxed.ndim != 2 or relaxed.shape[1] != bits:
        raise DimensionError(f"update_code_column: relaxed shape {relaxed.shape}, expected [m, {bits}]")
    if codes.ndim != 2 or codes.shape[1] != bits:
        raise DimensionError(f"update_code_column: codes shape {codes.shape}, expected [n, {bits}]")
    if sim.shape != (relaxed.shape[0], codes.shape[0]):
        raise DimensionError(
            f"update_code_column: sim shape {sim.shape}, expected "
            f"({relaxed.shape[0]}, {codes.shape[0]})"
        )
    if not 0 <= col < bits:
        raise ContractError(f"update_code_column: column {col} outside [0, {bits})")
    _check_pm1(codes, "update_code_column: codes")
    _check_pm1(sim, "update_code_column: sim")
    overlap = relaxed.T @ relaxed[:, col]  # [bits]
    cross = codes @ overlap - codes[:, col] * overlap[col]
    margin = bits * (sim.T @ relaxed[:, col]) - cross
    return np.where(margin > 0.0, 1.0, np.where(margin < 0.0, -1.0, codes[:, col]))


def sweep_codes(
    relaxed: np.ndarray, codes: np.ndarray, sim: np.ndarray, bits: int, sweeps: int = 1
) -> np.ndarray:
    """Cycle update_code_column over all columns, ``sweeps`` times."""
    if sweeps < 0:
        raise ContractError(f"sweep_codes: sweeps must be >= 0, got {sweeps}")
    codes = np.array(codes, dtype=np.float64)
    for _ in range(sweeps):
        for col in range(bits):
            codes[:, col] = update_code_column(relaxed, codes, sim, bits, col)
    return codes


def frobenius_objective(
    relaxed: np.ndarray, codes: np.ndarray, sim: np.ndarray, bits: int
) -> float:
    """||relaxed @ codes.T - bits * sim||_F^2, the code phase objective."""
    relaxed = np.asarray(relaxed, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    sim = np.asarray(sim, dtype=np.float64)
    if sim.shape != (relaxed.shape[0], codes.shape[0]):
        raise DimensionError(
            f"frobenius_objective: sim shape {sim.shape}, expected "
            f"({relaxed.shape[0]}, {codes.shape[0]})"
        )
    resid = relaxed @ codes.T - bits * sim
    return float(np.sum(resid * resid))


def encode_images(params: ModelParams, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Discrete codes and refined descriptors for a stack of images.

    Encoding never exchanges features: anchors are a training-time device,
    so the codes depend only on the network weights.
    """
    images = np.asarray(images, dtype=np.float64)
    count = images.shape[0]
    codes = np.empty((count, params.config.bits))
    descriptors = np.empty((count, params.config.descriptor_dim))
    for i in range(count):
        features = forward_features(params, images[i])
        codes[i] = hash_layer(params, features.part_vecs, features.global_vec, mode="discrete")
        descriptors[i] = descriptor_vector(features)
    return codes, descriptors


@dataclass
class TrainState:
    """Everything load_checkpoint recovers from a checkpoint file."""

    params: ModelParams
    train_config: TrainConfig
    codes: np.ndarray
    iteration: int
    anchors: AnchorBank | None


_MODEL_SCALARS = ("parts", "bits", "image_side", "in_channels", "refined_channels")
_TRAIN_SCALARS = (
    "outer_iters", "epochs_per_iter", "batch_size", "samples_per_epoch", "learning_rate",
    "lr_drop_factor", "weight_decay", "warmup_fraction", "exchange", "code_sweeps",
    "margin", "seed",
)
_TRAIN_OPTIONAL = ("spatial_weight", "channel_weight")
_TRAIN_INTS = ("outer_iters", "epochs_per_iter", "batch_size", "samples_per_epoch",
               "code_sweeps", "seed")


def save_checkpoint(
    path,
    params: ModelParams,
    train_config: TrainConfig,
    codes: np.ndarray,
    iteration: int,
    anchors: AnchorBank | None = None,
) -> None:
    """Write weights, codes, anchors, and both configs into one file."""
    arrays = dict(params.arrays())
    if anchors is not None and len(anchors):
        arrays.update(anchors.arrays())
    config = params.config
    for name in _MODEL_SCALARS:
        arrays[f"config.model.{name}"] = np.array(float(getattr(config, name)))
    arrays["config.model.backbone_channels"] = np.array(config.backbone_channels, dtype=np.float64)
    arrays["config.model.backbone_pools"] = np.array(config.backbone_pools, dtype=np.float64)
    for name in _TRAIN_SCALARS:
        arrays[f"config.train.{name}"] = np.array(float(getattr(train_config, name)))
    arrays["config.train.lr_drop_points"] = np.array(train_config.lr_drop_points, dtype=np.float64)
    for name in _TRAIN_OPTIONAL:
        value = getattr(train_config, name)
        arrays[f"config.train.{name}"] = np.array(np.nan if value is None else float(value))
    arrays["state.iteration"] = np.array(float(iteration))
    arrays["state.codes"] = np.asarray(codes, dtype=np.float64)
    save_arrays(path, arrays)


def load_checkpoint(path) -> TrainState:
    """Rebuild a TrainState from a file written by save_checkpoint."""
    arrays = load_arrays(path)

    def grab(name: str) -> np.ndarray:
        if name not in arrays:
            raise FileFormatError(f"{path}: checkpoint missing entry {name!r}")
        return arrays[name]

    model_kwargs = {name: int(grab(f"config.model.{name}").item()) for name in _MODEL_SCALARS}
    model_kwargs["backbone_channels"] = tuple(
        int(v) for v in grab("config.model.backbone_channels")
    )
    model_kwargs["backbone_pools"] = tuple(int(v) for v in grab("config.model.backbone_pools"))
    model_config = ModelConfig(**model_kwargs)

    train_kwargs = {}
    for name in _TRAIN_SCALARS:
        value = grab(f"config.train.{name}").item()
        train_kwargs[name] = int(value) if name in _TRAIN_INTS else value
    train_kwargs["exchange"] = bool(train_kwargs.pop("exchange"))
    train_kwargs["lr_drop_points"] = tuple(grab("config.train.lr_drop_points").tolist())
    for name in _TRAIN_OPTIONAL:
        value = grab(f"config.train.{name}").item()
        train_kwargs[name] = None if math.isnan(value) else value
    train_config = TrainConfig(**train_kwargs)

    param_arrays = {
        name: values
        for name, values in arrays.items()
        if not name.startswith(("config.", "state.", "anchors."))
    }
    params = ModelParams.from_arrays(model_config, param_arrays)
    codes = grab("state.codes")
    if codes.ndim != 2 or codes.shape[1] != model_config.bits:
        raise FileFormatError(f"{path}: stored codes have shape {codes.shape}")
    _check_pm1(codes, f"{path}: stored codes")
    anchors = AnchorBank.from_arrays(arrays)
    return TrainState(
        params=params,
        train_config=train_config,
        codes=codes,
        iteration=int(grab("state.iteration").item()),
        anchors=anchors if len(anchors) else None,
    )


class AlternatingTrainer:
    """Drives the three-phase loop over a dataset with both splits."""

    def __init__(self, dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig):
        dataset.require_both_splits()
        images = dataset.train_images
        if images.shape[1:] != (model_config.image_side, model_config.image_side,
                                model_config.in_channels):
            raise ContractError(
                f"AlternatingTrainer: dataset images {images.shape[1:]} do not match "
                f"model input {(model_config.image_side,) * 2 + (model_config.in_channels,)}"
            )
        self.dataset = dataset
        self.model_config = model_config
        self.train_config = train_config
        self.train_images = images
        self.train_labels = dataset.train_labels
        self.db_size = len(self.train_labels)
        init_rng = np.random.default_rng([train_config.seed, 0])
        self.params = ModelParams.initialize(model_config, init_rng)
        self._refresh_hash_bias()
        # Per-bit balanced random codes: a zero column mean removes the
        # class-independent pull that Sum_j sim_ij * code_j otherwise exerts
        # on every sampled query, which is what lets the first network phase
        # learn class structure instead of a shared common mode.
        column = np.repeat([-1.0, 1.0], [self.db_size // 2, self.db_size - self.db_size // 2])
        self.codes = np.stack(
            [init_rng.permutation(column) for _ in range(model_config.bits)], axis=1
        )
        self.anchors: AnchorBank | None = None
        self.iteration = 0
        self.history: list[dict] = []
        self._weights = self._resolve_weights()

    @classmethod
    def from_checkpoint(cls, path, dataset: Dataset) -> "AlternatingTrainer":
        state = load_checkpoint(path)
        trainer = cls(dataset, state.params.config, state.train_config)
        if state.codes.shape != (trainer.db_size, trainer.model_config.bits):
            raise ContractError(
                f"from_checkpoint: stored codes {state.codes.shape} do not match "
                f"{(trainer.db_size, trainer.model_config.bits)}"
            )
        trainer.params = state.params
        trainer.codes = state.codes
        trainer.anchors = state.anchors
        trainer.iteration = state.iteration
        return trainer

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.train_config, self.codes,
                        self.iteration, self.anchors)

    def _refresh_hash_bias(self) -> None:
        """Reset each bit's threshold to the mean training projection.

        Pooled relu descriptors are entrywise positive, so raw projections
        share one dominant direction: without recentering, every bit takes
        the same sign on the whole database and the code updates collapse
        onto a single constant code.  Thresholding each projection at its
        database mean keeps the bits balanced; rerunning this at every
        outer iteration tracks the slowly moving descriptor distribution.
        The reset is idempotent while the weights are unchanged, and the
        bias still receives ordinary gradients inside the network phase.
        """
        descriptors = encode_images(self.params, self.train_images)[1]
        mean = descriptors.mean(axis=0)
        self.params.hash_bias.data[...] = self.params.hash_weight.data @ mean

    def _resolve_weights(self) -> LossWeights:
        config = self.train_config
        if config.spatial_weight is None or config.channel_weight is None:
            subset = min(config.samples_per_epoch, self.db_size)
            auto = auto_weights(self.model_config.bits, subset * self.db_size, config.margin)
            return LossWeights(
                spatial=auto.spatial if config.spatial_weight is None else config.spatial_weight,
                channel=auto.channel if config.channel_weight is None else config.channel_weight,
                margin=config.margin,
            )
        return LossWeights(spatial=config.spatial_weight, channel=config.channel_weight,
                           margin=config.margin)

    def exchange_active(self, iteration: int) -> bool:
        return self.train_config.exchange and iteration >= warmup_iters(self.train_config)

    def _iteration_rng(self, iteration: int) -> np.random.Generator:
        return np.random.default_rng([self.train_config.seed, iteration + 1])

    def _relaxed_code(self, index: int, rng: np.random.Generator | None, exchanging: bool):
        """Forward one training image; returns (features, relaxed code tensor)."""
        features = forward_features(self.params, self.train_images[index])
        part_vecs = features.part_vecs
        if exchanging:
            mask = draw_keep_mask(rng, self.model_config.parts)
            part_vecs = exchange_features(
                part_vecs, self.anchors.get(int(self.train_labels[index])), mask
            )
        relaxed = hash_layer(self.params, part_vecs, features.global_vec, mode="relaxed")
        return features, relaxed

    def _theta_batch(self, batch: np.ndarray, rate: float, rng, exchanging: bool) -> float:
        """One SGD step on the batch mean of the per-sample objective."""
        with ad.Tape() as tape:
            feature_sets, relaxed_list = [], []
            for index in batch:
                features, relaxed = self._relaxed_code(int(index), rng, exchanging)
                feature_sets.append(features)
                relaxed_list.append(relaxed)
            sim_rows = build_similarity(self.train_labels[batch], self.train_labels)
            total = total_objective(relaxed_list, feature_sets, self.codes, sim_rows,
                                    self.model_config.bits, self._weights)
            loss = ad.scale(
                total, 1.0 / (len(batch) * self.db_size * self.model_config.bits)
            )
        tape.backward(loss)
        decay = self.train_config.weight_decay
        for tens in self.params.named().values():
            if tens.grad is None:
                continue
            tens.data -= rate * (tens.grad + decay * tens.data)
            tens.grad = None
        return loss.item()

    def _theta_phase(self, iteration: int, rng, subset: np.ndarray, exchanging: bool):
        config = self.train_config
        rate = learning_rate_at(config, iteration)
        losses = []
        for _ in range(config.epochs_per_iter):
            order = rng.permutation(subset)
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                losses.append(self._theta_batch(batch, rate, rng, exchanging))
        return (float(np.mean(losses)) if losses else None), rate

    def _code_phase(self, subset: np.ndarray):
        """Fit the discrete codes to the subset's own relaxed codes.

        Exchanging is never applied here: the stored codes stand in for the
        database items at query time, so they track what encoding each item
        would produce, not an anchor-blended variant of it.
        """
        config = self.train_config
        if config.code_sweeps == 0:
            return None
        relaxed = np.empty((len(subset), self.model_config.bits))
        for row, index in enumerate(subset):
            _, code = self._relaxed_code(int(index), rng=None, exchanging=False)
            relaxed[row] = code.data
        sim = build_similarity(self.train_labels[subset], self.train_labels)
        self.codes = sweep_codes(relaxed, self.codes, sim, self.model_config.bits,
                                 config.code_sweeps)
        return frobenius_objective(relaxed, self.codes, sim, self.model_config.bits)

    def _anchor_phase(self):
        by_class: dict[int, list[np.ndarray]] = {}
        for index in range(self.db_size):
            features = forward_features(self.params, self.train_images[index])
            stacked = np.stack([vec.data for vec in features.part_vecs])
            by_class.setdefault(int(self.train_labels[index]), []).append(stacked)
        fresh = compute_anchor_bank({c: np.stack(v) for c, v in by_class.items()}, self.anchors)
        if self.anchors is None:
            drift = 0.0
        else:
            drift = float(np.mean([
                np.linalg.norm(fresh.get(c) - self.anchors.get(c)) for c in fresh.classes
            ]))
        self.anchors = fresh
        return drift

    def run_iteration(self) -> dict:
        """One outer iteration: weight phase, code phase, anchor phase."""
        t = self.iteration
        if t >= self.train_config.outer_iters:
            raise ContractError(f"run_iteration: iteration {t} beyond schedule")
        rng = self._iteration_rng(t)
        exchanging = self.exchange_active(t)
        self._refresh_hash_bias()
        if exchanging and self.anchors is None:
            self._anchor_phase()  # resumed or hand-built state without a bank
        subset = rng.choice(self.db_size, size=min(self.train_config.samples_per_epoch,
                                                   self.db_size), replace=False)

        started = time.perf_counter()
        theta_loss, rate = self._theta_phase(t, rng, subset, exchanging)
        if theta_loss is not None:
            logger.info("iter=%d phase=theta loss=%.6f seconds=%.3f",
                        t, theta_loss, time.perf_counter() - started)
            # the weights moved, so re-center the thresholds before the code
            # phase reads relaxed codes (and before any later encode call)
            self._refresh_hash_bias()

        started = time.perf_counter()
        code_objective = self._code_phase(subset)
        if code_objective is not None:
            logger.info("iter=%d phase=v loss=%.6f seconds=%.3f",
                        t, code_objective, time.perf_counter() - started)

        anchor_drift = None
        if self.train_config.exchange:
            started = time.perf_counter()
            anchor_drift = self._anchor_phase()
            logger.info("iter=%d phase=anchor loss=%.6f seconds=%.3f",
                        t, anchor_drift, time.perf_counter() - started)

        metrics = {"iteration": t, "lr": rate, "theta_loss": theta_loss,
                   "code_objective": code_objective, "anchor_drift": anchor_drift}
        self.history.append(metrics)
        self.iteration = t + 1
        return metrics

    def train(self, checkpoint_path=None) -> list[dict]:
        """Run the remaining iterations; checkpoint after each if a path is given."""
        while self.iteration < self.train_config.outer_iters:
            self.run_iteration()
            if checkpoint_path is not None:
                self.save(checkpoint_path)
        return self.history

    def encode(self, images: np.ndarray) -> np.ndarray:
        """Discrete codes for new images (no exchange at encode time)."""
        return encode_images(self.params, images)[0]

    def encode_descriptors(self, images: np.ndarray) -> np.ndarray:
        return encode_images(self.params, images)[1]
