"""Two-stage few-shot adaptation of a frozen codec.

Stage 1 trains every adapter parameter on the rate-distortion loss with
additive-noise quantization.  Stage 2 switches to hard rounding and trains only
the last synthesis-stack adapter on distortion alone.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import codec as C
from . import tensor as T
from .adapters import STAGE2_SITE, AdapterSet, ConfigurationError, Structure, init_adapter_set
from .coder import pad_image
from .tensor import make_rng

log = logging.getLogger(__name__)

FULL_LR_STAGES = (5e-4, 1e-4, 7.5e-5, 5e-5, 2.5e-5, 1e-5)
FULL_EPOCHS = {5: 250, 10: 500, 25: 750}
STAGE2_LR = 5e-4
MIN_SAMPLES = 5
HISTORY_FIELDS = ("stage", "epoch", "split", "rate_y", "rate_z", "mse", "loss")


@dataclass
class FewShotDataset:
    samples: np.ndarray
    train: np.ndarray
    val: np.ndarray
    patch: int = 64
    batch: int = 4


def split_dataset(samples, seed: int, patch: int = 64, batch: int = 4) -> FewShotDataset:
    """Shuffle and split 4:1 into train/validation (train = round(0.8 N))."""
    samples = np.asarray(samples, dtype=np.float32)
    n = len(samples)
    if n < MIN_SAMPLES:
        raise ConfigurationError(f"need at least {MIN_SAMPLES} samples, got {n}")
    n_train = int(round(0.8 * n))
    order = make_rng(seed, 0x5D17).permutation(n)
    return FewShotDataset(
        samples=samples,
        train=samples[np.sort(order[:n_train])],
        val=samples[np.sort(order[n_train:])],
        patch=patch,
        batch=batch,
    )


@dataclass
class StagePlan:
    lr_stages: tuple[float, ...]
    max_epochs: int
    lmbda: float
    qmode: C.QuantMode
    selector: str  # "all" (every adapter parameter) or "stack4"
    patience: int = 1

    def __post_init__(self) -> None:
        if self.selector not in ("all", "stack4"):
            raise ConfigurationError(f"unknown trainable selector {self.selector!r}")
        if not self.lr_stages or any(lr <= 0 for lr in self.lr_stages):
            raise ConfigurationError("lr_stages must be a non-empty list of positive rates")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigurationError("max_epochs must be >= 0 and patience >= 1")


@dataclass
class AdaptConfig:
    """Adaptation recipe.  ``epochs`` maps N to the per-stage epoch budget."""

    patch: int = 64
    batch: int = 4
    lr_stages: tuple[float, ...] = FULL_LR_STAGES
    stage2_lr: float = STAGE2_LR
    epochs: dict[int, int] = field(default_factory=lambda: {5: 100, 10: 80, 25: 60})
    structure: Structure = Structure.CONV1X1
    rank: int = 10
    lora_std: float = 0.01
    early_stop: bool = True

    @classmethod
    def desk(cls) -> "AdaptConfig":
        return cls()

    @classmethod
    def full(cls) -> "AdaptConfig":
        return cls(
            patch=256,
            batch=4,
            lr_stages=FULL_LR_STAGES,
            stage2_lr=STAGE2_LR,
            epochs=dict(FULL_EPOCHS),
            early_stop=False,
        )

    def epochs_for(self, n: int) -> int:
        keys = sorted(self.epochs)
        eligible = [k for k in keys if k <= n]
        return self.epochs[eligible[-1] if eligible else keys[0]]

    def patience_for(self, n: int) -> int:
        return max(1, self.epochs_for(n) // 10)

    def stage_plans(self, n: int, lmbda: float) -> tuple[StagePlan, StagePlan]:
        epochs = self.epochs_for(n)
        patience = self.patience_for(n)
        s1 = StagePlan(tuple(self.lr_stages), epochs, lmbda, C.QuantMode.NOISE, "all", patience)
        s2 = StagePlan((self.stage2_lr,), epochs, lmbda, C.QuantMode.ROUND, "stack4", patience)
        return s1, s2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["structure"] = self.structure.name
        d["lr_stages"] = list(self.lr_stages)
        return d


# ---------------------------------------------------------------------------


@dataclass
class EvalTerms:
    loss: float
    rate_y: float
    rate_z: float
    mse: float

    @property
    def bpp(self) -> float:
        return self.rate_y + self.rate_z


def evaluate(model: C.CodecModel, adapters: AdapterSet | None, images, lmbda: float) -> EvalTerms:
    """Round-mode rate (model bits) and MSE averaged over full images."""
    totals = np.zeros(4)
    for img in images:
        img = np.asarray(img, dtype=np.float32)
        h, w = img.shape[1:]
        xp = pad_image(img)[None]
        x_hat, bundle = C.forward(model, adapters, xp, C.QuantMode.ROUND)
        x_hat = T.crop(x_hat, h, w)
        # rates are normalized by the true (unpadded) pixel count
        terms = C.rd_loss(img[None], x_hat, bundle, lmbda)
        totals += (float(terms.loss.data), terms.bpp_y, terms.bpp_z, terms.mse)
    totals /= len(images)
    return EvalTerms(*map(float, totals))


def _batches(data: FewShotDataset, rng: np.random.Generator):
    order = rng.permutation(len(data.train))
    patch = min(data.patch, data.train.shape[2], data.train.shape[3])
    patch -= patch % C.SPATIAL_MULTIPLE
    for start in range(0, len(order), data.batch):
        idx = order[start : start + data.batch]
        yield C.random_crops(data.train[idx], len(idx), patch, rng)


def _trainable(adapters: AdapterSet, selector: str) -> list[T.Param]:
    if selector == "all":
        adapters.set_trainable(None)
    else:
        adapters.set_trainable({p.name for p in adapters.stage2_params()})
    return [p for p in adapters.params() if p.trainable]


def _stage_objective(terms: EvalTerms, plan: StagePlan) -> float:
    return terms.mse if plan.selector == "stack4" else terms.loss


def _history_row(stage: int, epoch: int, split: str, terms: EvalTerms) -> dict:
    return {
        "stage": stage,
        "epoch": epoch,
        "split": split,
        "rate_y": terms.rate_y,
        "rate_z": terms.rate_z,
        "mse": terms.mse,
        "loss": terms.loss,
    }


def _run_stage(
    stage: int,
    model: C.CodecModel,
    adapters: AdapterSet,
    data: FewShotDataset,
    plan: StagePlan,
    seed: int,
    early_stop: bool,
) -> tuple[AdapterSet, list[dict]]:
    history: list[dict] = []
    if plan.max_epochs == 0:
        return adapters, history
    if model.param_list()[0].trainable:
        raise T.TrainingStateError("host model must be frozen before adaptation")
    params = _trainable(adapters, plan.selector)
    state = T.OptimState(lr=plan.lr_stages[0])
    rng = make_rng(seed, 0x57A6, stage)
    noise_rng = make_rng(seed, 0x4015, stage)

    best = _stage_objective(evaluate(model, adapters, data.val, plan.lmbda), plan)
    best_snap = adapters.snapshot()
    lr_idx, since_best = 0, 0
    for epoch in range(1, plan.max_epochs + 1):
        sums = np.zeros(4)
        count = 0
        for x in _batches(data, rng):
            T.zero_grad(params)
            x_hat, bundle = C.forward(model, adapters, x, plan.qmode, noise_rng)
            terms = C.rd_loss(x, x_hat, bundle, plan.lmbda, with_rate=plan.selector == "all")
            objective = terms.loss if plan.selector == "all" else T.mse(x_hat, x)
            value = float(objective.data)
            if not math.isfinite(value):
                adapters.restore(best_snap)
                raise C.NumericalError(f"non-finite loss in stage {stage} epoch {epoch}; restored best adapters")
            objective.backward()
            state.lr = plan.lr_stages[lr_idx]
            T.adam_step(params, state)
            full = terms.bpp + plan.lmbda * C.DISTORTION_SCALE * terms.mse
            sums += (full, terms.bpp_y, terms.bpp_z, terms.mse)
            count += 1
        history.append(_history_row(stage, epoch, "train", EvalTerms(*(sums / count))))
        val_terms = evaluate(model, adapters, data.val, plan.lmbda)
        history.append(_history_row(stage, epoch, "val", val_terms))
        current = _stage_objective(val_terms, plan)
        if not math.isfinite(current):
            adapters.restore(best_snap)
            raise C.NumericalError(f"non-finite validation loss in stage {stage} epoch {epoch}")
        if current < best:
            best, best_snap, since_best = current, adapters.snapshot(), 0
        else:
            since_best += 1
            if since_best >= plan.patience:
                since_best = 0
                if lr_idx + 1 < len(plan.lr_stages):
                    lr_idx += 1
                    log.info("stage %d epoch %d: lr -> %g", stage, epoch, plan.lr_stages[lr_idx])
                elif early_stop:
                    log.info("stage %d: plateau at the last lr stage, stopping at epoch %d", stage, epoch)
                    break
    adapters.restore(best_snap)
    T.zero_grad(adapters.params())
    adapters.set_trainable(None)
    return adapters, history


def train_stage1(model, adapters, data, plan: StagePlan, seed: int = 0, early_stop: bool = True):
    """Joint RD training of every adapter with noise quantization; returns the best-validation adapters."""
    if plan.selector != "all" or plan.qmode is not C.QuantMode.NOISE:
        raise ConfigurationError("stage 1 trains all adapters with additive noise")
    return _run_stage(1, model, adapters, data, plan, seed, early_stop)


def train_stage2(model, adapters, data, plan: StagePlan, seed: int = 0, early_stop: bool = True):
    """Distortion-only finetune of the last synthesis-stack adapter with hard rounding."""
    if plan.selector != "stack4" or plan.qmode is not C.QuantMode.ROUND:
        raise ConfigurationError("stage 2 trains the last synthesis adapter with rounding")
    if STAGE2_SITE not in adapters.conv:
        raise ConfigurationError(f"adapter set has no {STAGE2_SITE} adapter")
    return _run_stage(2, model, adapters, data, plan, seed, early_stop)


@dataclass
class AdaptReport:
    n_samples: int
    lmbda: float
    seed: int
    baseline_val: EvalTerms
    stage1_val: EvalTerms
    final_val: EvalTerms
    history: list[dict]
    seconds: float
    config: dict

    def summary(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "lambda": self.lmbda,
            "seed": self.seed,
            "baseline_val_loss": self.baseline_val.loss,
            "stage1_val_loss": self.stage1_val.loss,
            "final_val_loss": self.final_val.loss,
            "final_val_bpp": self.final_val.bpp,
            "final_val_psnr": C.psnr(self.final_val.mse),
            "seconds": self.seconds,
        }


def adapt(
    model: C.CodecModel,
    samples,
    n: int,
    lmbda: float,
    seed: int,
    config: AdaptConfig | None = None,
    domain_name: str = "",
) -> tuple[AdapterSet, AdaptReport]:
    """Split the first ``n`` samples, initialize adapters and run both stages."""
    config = config or AdaptConfig.desk()
    samples = np.asarray(samples, dtype=np.float32)
    if n > len(samples):
        raise ConfigurationError(f"requested N={n} but only {len(samples)} samples are available")
    start = time.perf_counter()
    data = split_dataset(samples[:n], seed, config.patch, config.batch)
    adapters = init_adapter_set(
        model, config.structure, rank=config.rank, seed=seed, lora_std=config.lora_std, domain_name=domain_name
    )
    phi_id = model.model_id
    baseline = evaluate(model, None, data.val, lmbda)
    s1, s2 = config.stage_plans(n, lmbda)
    adapters, h1 = train_stage1(model, adapters, data, s1, seed, config.early_stop)
    stage1_val = evaluate(model, adapters, data.val, lmbda)
    adapters, h2 = train_stage2(model, adapters, data, s2, seed, config.early_stop)
    final = evaluate(model, adapters, data.val, lmbda)
    model.invalidate_id()
    if model.model_id != phi_id:
        raise T.TrainingStateError("host model parameters changed during adaptation")
    report = AdaptReport(
        n_samples=n,
        lmbda=lmbda,
        seed=seed,
        baseline_val=baseline,
        stage1_val=stage1_val,
        final_val=final,
        history=h1 + h2,
        seconds=time.perf_counter() - start,
        config=config.to_dict(),
    )
    return adapters, report


def write_history(path, history: list[dict]) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_FIELDS})


def with_epochs(config: AdaptConfig, epochs: int) -> AdaptConfig:
    """Same recipe with a flat per-stage epoch budget for every N."""
    return replace(config, epochs={k: epochs for k in config.epochs})
