"""Training loop, optimizer, schedules, and Monte-Carlo-dropout inference.

Training runs decoupled-weight-decay Adam under a cosine learning-rate
schedule with early stopping on validation loss. Inference keeps dropout
active across several stochastic forward passes; the per-voxel mean is
the prediction and the per-voxel population variance is the uncertainty
map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import DropoutMode, Tensor, backward, derive_rng, no_grad
from .losses import combined_loss
from .metrics import (
    MetricReport,
    RegionMasks,
    UndefinedMetricError,
    compose_regions,
    dice_score,
    hausdorff,
)
from .network import NetworkConfig, TumorSegNet
from .prior import PriorConfig, build_input, derive_delta, generate_prior
from .volume_io import MultiModalVolume

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "AdamW",
    "cosine_lr",
    "EarlyStopping",
    "StopSignal",
    "EpochStats",
    "FitResult",
    "McResult",
    "prepare_case",
    "fit",
    "mc_infer",
    "evaluate_case",
    "format_history",
]


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during optimization."""


@dataclass
class TrainConfig:
    """Optimization hyperparameters plus the four ablation switches."""

    lr_init: float = 1e-4
    weight_decay: float = 1e-5
    cosine_T: int = 50
    lr_min: float = 0.0
    cosine_restarts: bool = False
    max_epochs: int = 1000
    patience: int = 150
    batch_size: int = 1
    seed: int = 0
    n_mc_passes: int = 20
    use_prior: bool = True
    use_msff: bool = True
    use_aam: bool = True
    use_mc: bool = True

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1")
        if self.patience > self.max_epochs:
            raise ValueError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.n_mc_passes < 1:
            raise ValueError("n_mc_passes must be >= 1")


class AdamW:
    """Adam with decoupled weight decay.

    Decay applies only to parameters with 2 or more axes (conv kernels);
    biases, normalization scales/shifts, and the attention gates are
    exempt. Betas and epsilon are the method's standard constants.
    """

    def __init__(self, named_params, lr: float = 1e-4, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        """One update from the gradients currently stored on the parameters."""
        if lr is None:
            lr = self.lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * update
            if self.weight_decay > 0.0 and p.data.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Cosine annealing from lr_init to lr_min over cosine_T epochs.

    Past cosine_T the rate stays clamped at lr_min unless
    `cosine_restarts` is set, in which case the cosine continues
    periodically (so the rate climbs back after each trough).
    """
    t = float(epoch) if config.cosine_restarts else float(min(epoch, config.cosine_T))
    span = config.lr_init - config.lr_min
    return config.lr_min + span * (1.0 + math.cos(math.pi * t / config.cosine_T)) / 2.0


class StopSignal(Enum):
    CONTINUE = "continue"
    STOP = "stop"
    ERROR = "error"


class EarlyStopping:
    """Stop when the validation loss has not strictly improved for more
    than `patience` epochs. NaN loss is an immediate error stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.epochs_since_best = 0

    def update(self, val_loss: float) -> StopSignal:
        if math.isnan(val_loss):
            return StopSignal.ERROR
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.epochs_since_best = 0
            return StopSignal.CONTINUE
        self.epochs_since_best += 1
        if self.epochs_since_best > self.patience:
            return StopSignal.STOP
        return StopSignal.CONTINUE

    @property
    def improved(self) -> bool:
        return self.epochs_since_best == 0


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class FitResult:
    net: TumorSegNet
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_loss: float
    history: list[EpochStats]
    stopped_early: bool
    prior_config: PriorConfig | None  # resolved config; reuse at inference


@dataclass
class McResult:
    """Aggregate of stochastic forward passes for one case."""

    mean: np.ndarray  # (3, D, H, W) in [0, 1]
    variance: np.ndarray  # (3, D, H, W), population variance
    masks: RegionMasks
    n_passes: int


def prepare_case(volume: MultiModalVolume, use_prior: bool,
                 prior_config: PriorConfig | None = None) -> tuple[Tensor, np.ndarray | None]:
    """Network input (and target channels when labels exist) for one case.

    The prior channel is generated from FLAIR when `use_prior` is set;
    targets are stacked (ET, WT, TC) region masks as float32.
    """
    prior = None
    if use_prior:
        prior = generate_prior(volume.flair, prior_config or PriorConfig())
    x = build_input(volume, prior if use_prior else None)
    target = None
    if volume.labels is not None:
        masks = compose_regions(volume.labels)
        target = np.stack([masks.et, masks.wt, masks.tc]).astype(np.float32)[None]
    return x, target


def fit(train_volumes, val_volumes, net_config: NetworkConfig | None,
        config: TrainConfig, prior_config: PriorConfig | None = None) -> FitResult:
    """Train on the given cases and return the best checkpoint plus history.

    Every epoch walks the training cases one at a time (batch size 1),
    accumulates the combined Dice/cross-entropy loss, and steps the
    optimizer at the cosine-scheduled rate. Validation runs with dropout
    off. The returned network carries the final-epoch parameters; the
    best-validation parameters are in `best_state`.

    When no prior configuration is given, the region-growing tolerance is
    derived from the labeled training split (median tumor-intensity std).
    """
    if not train_volumes or not val_volumes:
        raise ValueError("need non-empty train and validation splits")
    if net_config is None:
        net_config = NetworkConfig(
            in_channels=5 if config.use_prior else 4,
            use_msff=config.use_msff,
            use_aam=config.use_aam,
        )
    expected = 5 if config.use_prior else 4
    if net_config.in_channels != expected:
        raise ValueError(
            f"net_config.in_channels={net_config.in_channels} inconsistent with use_prior={config.use_prior}"
        )
    if prior_config is None and config.use_prior:
        prior_config = PriorConfig(delta=derive_delta(train_volumes), rng_seed=config.seed)

    train_cases = [prepare_case(v, config.use_prior, prior_config) for v in train_volumes]
    val_cases = [prepare_case(v, config.use_prior, prior_config) for v in val_volumes]
    for i, (_, target) in enumerate(train_cases + val_cases):
        if target is None:
            raise ValueError(f"case {i} has no labels")

    net = TumorSegNet(net_config, seed=config.seed)
    optimizer = AdamW(list(net.named_parameters()), lr=config.lr_init,
                      weight_decay=config.weight_decay)
    stopper = EarlyStopping(config.patience)
    history: list[EpochStats] = []
    best_state = net.state_dict()
    best_epoch = -1
    stopped_early = False

    for epoch in range(config.max_epochs):
        lr = cosine_lr(epoch, config)
        train_losses = []
        for case_idx, (x, target) in enumerate(train_cases):
            optimizer.zero_grad()
            rng = derive_rng(config.seed, 1, epoch, case_idx)
            try:
                pred = net.forward(x, DropoutMode.TRAIN, rng)
                loss = combined_loss(pred, target)
            except FloatingPointError as exc:
                raise TrainingDivergedError(
                    f"non-finite values at epoch {epoch}, case {case_idx}: {exc}"
                ) from exc
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, case {case_idx}")
            backward(loss)
            optimizer.step(lr)
            train_losses.append(loss_val)

        val_losses = []
        with no_grad():
            for x, target in val_cases:
                try:
                    pred = net.forward(x, DropoutMode.OFF)
                    val_losses.append(combined_loss(pred, target).item())
                except FloatingPointError as exc:
                    raise TrainingDivergedError(
                        f"non-finite values in validation at epoch {epoch}: {exc}"
                    ) from exc
        train_loss = float(np.mean(train_losses))
        val_loss = float(np.mean(val_losses))
        history.append(EpochStats(epoch, lr, train_loss, val_loss))

        signal = stopper.update(val_loss)
        if signal is StopSignal.ERROR:
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        if stopper.improved:
            best_state = net.state_dict()
            best_epoch = epoch
        if signal is StopSignal.STOP:
            stopped_early = True
            break

    return FitResult(net=net, best_state=best_state, best_epoch=best_epoch,
                     best_val_loss=stopper.best_loss, history=history,
                     stopped_early=stopped_early,
                     prior_config=prior_config if config.use_prior else None)


def mc_infer(net: TumorSegNet, x: Tensor, n_passes: int = 20, seed: int = 0,
             use_mc: bool = True) -> McResult:
    """Monte-Carlo-dropout inference: mean prediction, variance uncertainty.

    Dropout stays active across `n_passes` stochastic forwards (seeds
    derived from `seed` per pass); masks binarize the mean at 0.5. With
    `use_mc` off this is a single deterministic forward with zero
    variance.
    """
    if n_passes < 1:
        raise ValueError("n_passes must be >= 1")
    if not use_mc:
        n_passes = 1
    outputs = np.empty((n_passes,) + (net.config.out_channels,) + x.shape[2:], dtype=np.float64)
    with no_grad():
        for i in range(n_passes):
            if use_mc:
                rng = derive_rng(seed, 2, i)
                pred = net.forward(x, DropoutMode.MC_ACTIVE, rng)
            else:
                pred = net.forward(x, DropoutMode.OFF)
            outputs[i] = pred.data[0]
    mean = outputs.mean(axis=0)
    variance = outputs.var(axis=0)  # population variance over passes
    masks = RegionMasks(et=mean[0] >= 0.5, wt=mean[1] >= 0.5, tc=mean[2] >= 0.5)
    return McResult(mean=mean.astype(np.float32), variance=variance.astype(np.float32),
                    masks=masks, n_passes=n_passes)


def evaluate_case(mc: McResult, gt_labels: np.ndarray,
                  spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> MetricReport:
    """Dice and Hausdorff per region against coded ground-truth labels.

    Undefined Hausdorff distances (either mask empty) become NaN plus an
    explicit flag; both-empty Dice pairs are flagged as trivially perfect.
    """
    gt = compose_regions(gt_labels)
    values: dict[str, float] = {}
    flags: list[str] = []
    for region in ("et", "wt", "tc"):
        pred_mask = getattr(mc.masks, region)
        gt_mask = getattr(gt, region)
        values[f"dice_{region}"] = dice_score(pred_mask, gt_mask)
        if not pred_mask.any() and not gt_mask.any():
            flags.append(f"dice_{region}_both_empty")
        try:
            values[f"hd_{region}"] = hausdorff(pred_mask, gt_mask, spacing)
        except UndefinedMetricError:
            values[f"hd_{region}"] = float("nan")
            flags.append(f"hd_{region}_undefined")
    return MetricReport(flags=flags, **values)


def format_history(history: list[EpochStats]) -> str:
    """One `epoch,lr,train_loss,val_loss` line per epoch."""
    lines = ["epoch,lr,train_loss,val_loss"]
    for h in history:
        lines.append(f"{h.epoch},{h.lr!r},{h.train_loss!r},{h.val_loss!r}")
    return "\n".join(lines) + "\n"
