"""Run configuration: one flat schema shared by the config file, the presets,
and the CLI flag overrides (flags win).

The "desk" preset is the tested configuration (CPU-scale). The "paper"
preset carries the full-scale hyperparameters (4096-ray batches, 500k
iterations, 256/128-wide networks); it is runnable in principle but far
outside this package's CPU budget, and the schedule horizons there are the
unscaled 50k-iteration ones.

Schedule horizons (beta stages, perturbation/anneal/camera-freeze cutoffs)
default to "auto": the 50k-per-stage timetable scaled by iterations/500k,
which preserves the schedule's shape at any run length.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .fields import DeformSpec, MLPSpec, ModelConfig
from .losses import BetaPriorParams, BetaSchedule, LossWeights

FULL_SCALE_ITERS = 500_000
STAGE = 50_000


@dataclass
class RunConfig:
    # paths
    data: str = "data"
    out: str = "runs/run"
    # model
    latent_dim: int = 64
    trunk_depth: int = 2
    trunk_width: int = 64
    branch_depth: int = 4
    branch_width: int = 64
    skip_at: int = 3
    freq_spatial: int = 10
    freq_dir: int = 4
    deform_depth: int = 4
    deform_width: int = 64
    deform_skip: int = 2
    freq_deform: int = 4
    point_scale: float = 0.25
    precision: str = "float32"
    # optimization
    iterations: int = 20_000
    batch_rays: int = 256
    fg_fraction: float = 0.75
    k_coarse: int = 32
    k_fine: int = 32
    lr: float = 5e-4
    lr_final: float = 5e-5
    lambda_bg: float = 1.0
    lambda_sparse: float = 1e-3
    lambda_beta: float = 1e-4
    lambda_warp: float = 1e-5
    beta_alpha: float = 3.0
    beta_beta: float = 2.0
    beta_clip: float = 1e-4
    beta_contract: float = 0.4
    regularize_coarse: bool = True
    # schedule horizons; -1 means auto (50k scaled by iterations/500k)
    perturb_until: int = -1
    anneal_until: int = -1
    camera_opt: bool = False
    camera_freeze_until: int = -1
    camera_lr_scale: float = 0.1
    # rendering / evaluation
    tau_mass: float = 0.1
    amodal_threshold: float = 0.5
    # run control
    seed: int = 0
    checkpoint_every: int = 2_000
    threads: int = 0            # 0 = all cores
    deterministic: bool = False

    def __post_init__(self):
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")
        if not (0.0 < self.fg_fraction <= 1.0):
            raise ValueError("fg_fraction must lie in (0, 1]")
        if self.camera_freeze_until_resolved > self.iterations and self.camera_opt:
            raise ValueError("camera freeze horizon exceeds total iterations")

    # -- derived pieces -----------------------------------------------------

    @property
    def _auto_stage(self) -> int:
        return max(1, round(STAGE * self.iterations / FULL_SCALE_ITERS))

    def _horizon(self, value: int) -> int:
        return self._auto_stage if value < 0 else value

    @property
    def perturb_until_resolved(self) -> int:
        return self._horizon(self.perturb_until)

    @property
    def anneal_until_resolved(self) -> int:
        return self._horizon(self.anneal_until)

    @property
    def camera_freeze_until_resolved(self) -> int:
        return self._horizon(self.camera_freeze_until)

    def beta_schedule(self) -> BetaSchedule:
        return BetaSchedule().scaled(self._auto_stage / STAGE)

    def loss_weights(self) -> LossWeights:
        # joint camera optimization makes object scale ambiguous: warp prior off
        warp = 0.0 if self.camera_opt else self.lambda_warp
        return LossWeights(lambda_bg=self.lambda_bg, lambda_sparse=self.lambda_sparse,
                           lambda_beta=self.lambda_beta, lambda_warp=warp)

    def beta_params(self) -> BetaPriorParams:
        return BetaPriorParams(alpha=self.beta_alpha, beta=self.beta_beta,
                               clip_lo=self.beta_clip, clip_hi=1.0 - self.beta_clip,
                               contract_half_width=self.beta_contract)

    def model_config(self, n_instances: int) -> ModelConfig:
        return ModelConfig(
            n_instances=n_instances,
            latent_dim=self.latent_dim,
            mlp=MLPSpec(trunk_depth=self.trunk_depth, trunk_width=self.trunk_width,
                        branch_depth=self.branch_depth, branch_width=self.branch_width,
                        skip_at=self.skip_at, n_freq_spatial=self.freq_spatial,
                        n_freq_dir=self.freq_dir),
            deform=DeformSpec(depth=self.deform_depth, width=self.deform_width,
                              skip_at=self.deform_skip, n_freq_spatial=self.freq_deform),
            precision=self.precision,
            point_scale=self.point_scale,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PRESETS: dict[str, dict] = {
    "desk": {},  # the defaults above
    "paper": {
        "trunk_width": 256,
        "branch_depth": 8,
        "branch_width": 128,
        "skip_at": 5,
        "deform_depth": 6,
        "deform_width": 128,
        "deform_skip": 4,
        "freq_deform": 10,
        "point_scale": 1.0,
        "iterations": FULL_SCALE_ITERS,
        "batch_rays": 4096,
        "k_coarse": 64,
        "k_fine": 128,
        "precision": "float32",
    },
}

GENERATE_PRESETS: dict[str, dict] = {
    "desk": dict(n_instances=8, views_train=50, views_heldout=20, image_size=32),
}

_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def build_config(preset: str | None = None, config_file: str | Path | None = None,
                 overrides: dict | None = None) -> RunConfig:
    """preset < config file < explicit overrides. Unknown keys are rejected."""
    merged: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise KeyError(f"unknown preset {preset!r} (have {sorted(PRESETS)})")
        merged.update(PRESETS[preset])
    if config_file is not None:
        text = Path(config_file).read_text()
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as e:
            raise ValueError(f"{config_file}:{e.lineno}: {e.msg}") from None
        if not isinstance(loaded, dict):
            raise ValueError(f"{config_file}: config must be a JSON object")
        _reject_unknown(loaded, str(config_file))
        merged.update(loaded)
    if overrides:
        _reject_unknown(overrides, "overrides")
        merged.update(overrides)
    return RunConfig(**merged)


def _reject_unknown(d: dict, where: str) -> None:
    unknown = set(d) - _FIELDS
    if unknown:
        raise KeyError(f"{where}: unknown config keys {sorted(unknown)}")


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
