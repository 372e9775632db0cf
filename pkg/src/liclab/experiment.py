"""Desk-scale domain-adaptation experiment.

Pretrain the codec on SmoothNatural images at several lambdas, adapt each model
with a few PixelArt samples, then compare adapted and frozen RD curves on
held-out PixelArt images.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import codec as C
from .adapters import AdapterSet
from .analysis import AnalysisError, ChannelStats, RdCurve, bd_rate, channel_stats, rd_curve
from .datagen import DomainKind, DomainSpec, generate
from .trainer import AdaptConfig, AdaptReport, adapt

log = logging.getLogger(__name__)

DESK_LAMBDAS = (0.0018, 0.0067, 0.0250, 0.0483)


@dataclass
class ExperimentConfig:
    seed: int = 0
    lambdas: tuple[float, ...] = DESK_LAMBDAS
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    finetune_lr: float = 5e-4
    warm_start: bool = True
    pretrain_batch: int = 4
    pretrain_patch: int = 64
    source_count: int = 256
    source_size: int = 128
    target_size: int = 64
    n_samples: int = 25
    test_count: int = 32
    adapt: AdaptConfig = field(default_factory=AdaptConfig.desk)

    def source_spec(self) -> DomainSpec:
        return DomainSpec("smooth-natural", DomainKind.SMOOTH_NATURAL, seed=self.seed * 7 + 1, size=self.source_size)

    def target_train_spec(self) -> DomainSpec:
        return DomainSpec("pixel-art", DomainKind.PIXEL_ART, seed=self.seed * 7 + 2, size=self.target_size)

    def target_test_spec(self) -> DomainSpec:
        return DomainSpec("pixel-art", DomainKind.PIXEL_ART, seed=self.seed * 7 + 3, size=self.target_size)

    def pretrain_key(self, position: int) -> str:
        """Cache key for the model at ``position`` in the (possibly warm-started) lambda ladder."""
        lambdas = list(self.lambdas[: position + 1]) if self.warm_start else [self.lambdas[position]]
        blob = json.dumps(
            [self.seed, lambdas, self.pretrain_steps, self.pretrain_lr, self.finetune_lr, self.warm_start,
             self.pretrain_batch, self.pretrain_patch, self.source_count, self.source_size],
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EnergyReport:
    lmbda: float
    frozen_bottom_half: float
    adapted_bottom_half: float

    @property
    def delta(self) -> float:
        return self.adapted_bottom_half - self.frozen_bottom_half


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    frozen: RdCurve
    adapted: RdCurve
    bd_rate: float
    models: list[C.CodecModel]
    adapters: list[AdapterSet]
    reports: list[AdaptReport]
    energy: list[EnergyReport]
    frozen_stats: list[ChannelStats]
    adapted_stats: list[ChannelStats]
    seconds: dict[str, float]
    bd_error: str = ""

    def summary(self) -> dict:
        return {
            "seed": self.config.seed,
            "bd_rate_percent": self.bd_rate,
            "bd_error": self.bd_error,
            "frozen": [asdict(p) for p in self.frozen.points],
            "adapted": [asdict(p) for p in self.adapted.points],
            "energy": [
                {"lambda": e.lmbda, "frozen": e.frozen_bottom_half, "adapted": e.adapted_bottom_half, "delta": e.delta}
                for e in self.energy
            ],
            "seconds": self.seconds,
        }


def pretrain_models(cfg: ExperimentConfig, source: np.ndarray, cache_dir=None) -> list[C.CodecModel]:
    """Source-domain codecs for every lambda, in ``cfg.lambdas`` order.

    With ``warm_start`` the first model trains from scratch and each later one
    continues from its predecessor for another ``pretrain_steps`` steps, so the
    ladder is ordered by both lambda and training time.  Models are loaded from
    ``cache_dir`` when present.
    """
    models: list[C.CodecModel] = []
    prev = None
    for i, lmbda in enumerate(cfg.lambdas):
        path = Path(cache_dir) / f"pretrain-{cfg.pretrain_key(i)}.licm" if cache_dir else None
        if path is not None and path.exists():
            model = C.CodecModel.load(path)
        else:
            start = prev if cfg.warm_start else None
            model = C.pretrain_baseline(
                source,
                lmbda,
                cfg.pretrain_steps,
                seed=cfg.seed + i,
                batch=cfg.pretrain_batch,
                patch=cfg.pretrain_patch,
                lr=cfg.pretrain_lr if start is None else cfg.finetune_lr,
                model=start,
            )
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                model.save(path)
        models.append(model)
        prev = model
    return models


def run_experiment(cfg: ExperimentConfig | None = None, cache_dir=None, strict: bool = True) -> ExperimentResult:
    """Full pipeline.  With ``strict=False`` an undefined BD-rate (no PSNR
    overlap) is reported as NaN with the reason instead of raising."""
    cfg = cfg or ExperimentConfig()
    seconds = {"pretrain": 0.0, "adapt": 0.0, "evaluate": 0.0}
    source = generate(cfg.source_spec(), cfg.source_count)
    target = generate(cfg.target_train_spec(), cfg.n_samples)
    test = generate(cfg.target_test_spec(), cfg.test_count)

    t0 = time.perf_counter()
    models = pretrain_models(cfg, source, cache_dir)
    seconds["pretrain"] = time.perf_counter() - t0

    adapter_sets, reports, energy, f_stats, a_stats = [], [], [], [], []
    for lmbda, model in zip(cfg.lambdas, models):
        t0 = time.perf_counter()
        aset, report = adapt(model, target, cfg.n_samples, lmbda, cfg.seed, cfg.adapt, domain_name="pixel-art")
        seconds["adapt"] += time.perf_counter() - t0
        log.info("lambda %g: %s", lmbda, report.summary())

        t0 = time.perf_counter()
        fs = channel_stats(model, None, test)
        ads = channel_stats(model, aset, test, reference=fs)
        seconds["evaluate"] += time.perf_counter() - t0
        energy.append(EnergyReport(lmbda, fs.bottom_half_energy(), float(ads.energy[fs.bottom_half()].sum())))
        adapter_sets.append(aset)
        reports.append(report)
        f_stats.append(fs)
        a_stats.append(ads)

    t0 = time.perf_counter()
    frozen = rd_curve([(m, None) for m in models], test, "frozen")
    adapted = rd_curve(list(zip(models, adapter_sets)), test, "adapted")
    seconds["evaluate"] += time.perf_counter() - t0
    try:
        bd, bd_error = bd_rate(frozen, adapted), ""
    except AnalysisError as exc:
        if strict:
            raise
        bd, bd_error = float("nan"), str(exc)
    return ExperimentResult(
        config=cfg,
        frozen=frozen,
        adapted=adapted,
        bd_rate=bd,
        bd_error=bd_error,
        models=models,
        adapters=adapter_sets,
        reports=reports,
        energy=energy,
        frozen_stats=f_stats,
        adapted_stats=a_stats,
        seconds=seconds,
    )
