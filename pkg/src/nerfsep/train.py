"""Joint optimization of field weights, per-instance codes, and (optionally)
per-image camera-extrinsic offsets.

Each step draws two sub-batches: rays from the instance images (rendered with
the composite model, carrying the photometric term plus the separation
regularizers) and rays from the object-free background set (rendered with the
background model alone). Both the coarse and the fine pass contribute every
loss term. Per-iteration randomness is counter-derived from (seed, iteration,
purpose), so resuming from a checkpoint replays the exact stream.

Camera offsets are 6-vectors (axis-angle rotation about the camera center,
then translation). They stay out of the tape and the optimizer until the
freeze horizon, which keeps them bitwise zero through that phase; afterwards
ray origins/directions are built on the tape through a differentiable
Rodrigues rotation, and the warp prior is disabled (scale becomes gauge).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .fields import FieldModel, ModelConfig
from .optim import AdamHyper, DecaySchedule, adam_step
from .render import (Rays, composite_quadrature, importance_samples,
                     single_quadrature, stratified_samples)
from .rng import derive
from .synth import SceneDataset, apply_camera_offset


def anneal_window(iteration: int, horizon: int, num_freq: int) -> np.ndarray:
    """Cosine-eased coarse-to-fine band weights; all ones from the horizon on."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    progress = min(iteration / horizon, 1.0) * num_freq
    bands = np.arange(num_freq)
    return 0.5 * (1.0 - np.cos(np.pi * np.clip(progress - bands, 0.0, 1.0)))


def interpolate_codes(model: FieldModel, i: int, j: int, t: float, mode: str,
                      allow_extrapolation: bool = False):
    """Linear interpolation of the selected code components; the unselected
    component is instance i's row. Returns (psi_s, psi_a) arrays."""
    if mode not in ("shape", "appearance", "both"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if not (0.0 <= t <= 1.0) and not allow_extrapolation:
        raise ValueError("t outside [0,1]; pass allow_extrapolation to override")
    n = model.latents.n_instances
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError("instance index out of range")
    psi_s = model.latents.psi_s.numpy()
    psi_a = model.latents.psi_a.numpy()
    s = psi_s[i].copy()
    a = psi_a[i].copy()
    if mode in ("shape", "both"):
        s = (1.0 - t) * psi_s[i] + t * psi_s[j]
    if mode in ("appearance", "both"):
        a = (1.0 - t) * psi_a[i] + t * psi_a[j]
    return s, a


def rodrigues_rows(w: Tensor) -> Tensor:
    """(M,3) axis-angle rows -> (M,3,3) rotations, on the tape; safe at zero."""
    m = w.shape[0]
    sq = ad.tsum(ad.mul(w, w), axis=1, keepdims=True)
    theta = ad.sqrt(ad.add(sq, 1e-24))
    k = ad.div(w, theta)
    s = ad.sin(theta)
    c = ad.cos(theta)
    one_c = ad.sub(1.0, c)
    kx = ad.gather(k, np.array([0]), axis=1)
    ky = ad.gather(k, np.array([1]), axis=1)
    kz = ad.gather(k, np.array([2]), axis=1)
    sx, sy, sz = ad.mul(kx, s), ad.mul(ky, s), ad.mul(kz, s)
    xx, yy, zz = ad.mul(kx, kx), ad.mul(ky, ky), ad.mul(kz, kz)
    xy, xz, yz = ad.mul(kx, ky), ad.mul(kx, kz), ad.mul(ky, kz)
    rows = [
        ad.add(c, ad.mul(xx, one_c)), ad.sub(ad.mul(xy, one_c), sz), ad.add(ad.mul(xz, one_c), sy),
        ad.add(ad.mul(xy, one_c), sz), ad.add(c, ad.mul(yy, one_c)), ad.sub(ad.mul(yz, one_c), sx),
        ad.sub(ad.mul(xz, one_c), sy), ad.add(ad.mul(yz, one_c), sx), ad.add(c, ad.mul(zz, one_c)),
    ]
    return ad.reshape(ad.concat(rows, axis=1), (m, 3, 3))


@dataclass
class RayBank:
    """Flattened training pixels of one split (per-pixel rows)."""
    colors: np.ndarray        # (P,3)
    instance: np.ndarray      # (P,) latent row (bg row for the background set)
    view_row: np.ndarray      # (P,) camera-offset row
    near: np.ndarray          # (P,)
    far: np.ndarray           # (P,)
    world_dirs: np.ndarray    # (P,3) unit, from the stored (possibly jittered) cameras
    cam_dirs: np.ndarray      # (P,3) unit camera-frame dirs (for the offset path)
    origins: np.ndarray       # (P,3)


def _build_bank(dataset: SceneDataset, views, view_rows, bg_row: int) -> RayBank:
    colors, inst, rows, near, far, wdirs, cdirs, orig = [], [], [], [], [], [], [], []
    for view, row in zip(views, view_rows):
        img = dataset.load_rgb(view).reshape(-1, 3)
        cam = view.camera
        d_cam = cam.camera_dirs(cam.pixel_centers())
        d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
        d_world = d_cam @ cam.rotation.T
        n = d_cam.shape[0]
        colors.append(img)
        inst.append(np.full(n, bg_row if view.scene is None else view.scene))
        rows.append(np.full(n, row))
        near.append(np.full(n, view.near))
        far.append(np.full(n, view.far))
        wdirs.append(d_world)
        cdirs.append(d_cam)
        orig.append(np.broadcast_to(cam.translation, (n, 3)))
    return RayBank(*(np.concatenate(x).astype(np.float64) if x[0].dtype.kind == "f"
                     else np.concatenate(x) for x in
                     (colors, inst, rows, near, far, wdirs, cdirs, orig)))


class Trainer:
    """Owns the mutable state: model parameters, codes, offsets, iteration."""

    OFFSETS = "camera/offsets"

    def __init__(self, cfg: RunConfig, dataset: SceneDataset,
                 resume: str | Path | None = None):
        self.cfg = cfg
        self.dataset = dataset
        self.dtype = np.dtype(cfg.precision)
        model_cfg = cfg.model_config(dataset.n_instances)

        train_views = [v for v in dataset.views if v.split == "train"]
        self.train_views = train_views
        self.n_train_views = len(train_views)

        if resume is not None:
            store, it, seed, extra = load_checkpoint(resume)
            if seed != cfg.seed:
                raise ValueError(f"checkpoint seed {seed} != config seed {cfg.seed}")
            restored = ModelConfig.from_dict(extra["model"])
            if restored.to_dict() != model_cfg.to_dict():
                raise ValueError("checkpoint model topology differs from the config")
            self.model = _rewire(model_cfg, store)
            self.start_iteration = it
        else:
            self.model = FieldModel(model_cfg, seed=cfg.seed)
            self.model.store.add(self.OFFSETS,
                                 np.zeros((self.n_train_views, 6), dtype=self.dtype),
                                 lr_scale=cfg.camera_lr_scale)
            self.start_iteration = 0

        bg_row = self.model.latents.bg_row
        fg_views = [(v, r) for r, v in enumerate(train_views) if v.scene is not None]
        bg_views = [(v, r) for r, v in enumerate(train_views) if v.scene is None]
        self.fg_bank = _build_bank(dataset, [v for v, _ in fg_views],
                                   [r for _, r in fg_views], bg_row)
        self.bg_bank = _build_bank(dataset, [v for v, _ in bg_views],
                                   [r for _, r in bg_views], bg_row)

        self.hyper = AdamHyper(learning_rate=cfg.lr,
                               decay=DecaySchedule(cfg.lr, cfg.lr_final, cfg.iterations))
        self.beta_sched = cfg.beta_schedule()
        self.weights = cfg.loss_weights()
        self.beta_params = cfg.beta_params()

    # -- step ------------------------------------------------------------------

    def _windows(self, iteration: int):
        w_t = anneal_window(iteration, self.cfg.anneal_until_resolved,
                            self.cfg.freq_spatial)
        w_d = anneal_window(iteration, self.cfg.anneal_until_resolved,
                            self.cfg.freq_deform)
        return w_t, w_d

    def _offsets_active(self, iteration: int) -> bool:
        return self.cfg.camera_opt and iteration >= self.cfg.camera_freeze_until_resolved

    def _rays_for(self, bank: RayBank, pick: np.ndarray, iteration: int):
        """Rays plus (origins, dirs) as tensors when offsets are trainable."""
        rays = Rays(bank.origins[pick], bank.world_dirs[pick],
                    bank.near[pick], bank.far[pick])
        if not self._offsets_active(iteration):
            return rays, None, None
        view_rows = bank.view_row[pick]
        uniq, inv = np.unique(view_rows, return_inverse=True)
        offsets = self.model.store[self.OFFSETS]
        rows = ad.gather(offsets, uniq, axis=0)
        rot_off = rodrigues_rows(ad.gather(rows, np.array([0, 1, 2]), axis=1))
        base_r = np.stack([self.train_views[r].camera.rotation for r in uniq])
        r_total = ad.matmul(rot_off, base_r.astype(self.dtype))
        per_ray_r = ad.gather(r_total, inv, axis=0)
        d_cam = bank.cam_dirs[pick].astype(self.dtype)
        dirs_t = ad.reshape(ad.matmul(per_ray_r, d_cam.reshape(-1, 3, 1)), (-1, 3))
        trans = ad.gather(rows, np.array([3, 4, 5]), axis=1)
        origins_t = ad.add(bank.origins[pick].astype(self.dtype),
                           ad.gather(trans, inv, axis=0))
        return rays, origins_t, dirs_t

    def _points(self, rays: Rays, grid, origins_t, dirs_t):
        if origins_t is None:
            return grid.points(rays).astype(self.dtype), rays.dirs.astype(self.dtype)
        b, k = grid.t.shape
        t = grid.t[:, :, None].astype(self.dtype)
        pts = ad.add(ad.reshape(origins_t, (b, 1, 3)),
                     ad.mul(ad.reshape(dirs_t, (b, 1, 3)), t))
        return pts, dirs_t

    def _render_fg_batch(self, iteration: int, pick: np.ndarray, windows, stats_aux):
        cfg = self.cfg
        bank = self.fg_bank
        rays, origins_t, dirs_t = self._rays_for(bank, pick, iteration)
        inst = bank.instance[pick]
        target = bank.colors[pick]
        w_t, w_d = windows
        perturb_on = iteration < cfg.perturb_until_resolved

        parts = {}
        residuals = []
        grid = stratified_samples(rays, cfg.k_coarse, derive(cfg.seed, iteration,
                                                             "stratified_fg"))
        for level in ("coarse", "fine"):
            b, k = grid.t.shape
            pts, dirs = self._points(rays, grid, origins_t, dirs_t)
            flat = ad.reshape(pts, (b * k, 3)) if isinstance(pts, Tensor) \
                else pts.reshape(b * k, 3)
            sig_f, rgb_f, res = self.model.foreground(level, flat, dirs, inst, k,
                                                      w_t, w_d)
            sig_b, rgb_b = self.model.background_field(level, flat, dirs, inst, k, w_t)
            if perturb_on:
                sig_f = L.density_perturbation(sig_f, iteration, cfg.perturb_until_resolved,
                                               derive(cfg.seed, iteration, f"perturb_fg_{level}"))
                sig_b = L.density_perturbation(sig_b, iteration, cfg.perturb_until_resolved,
                                               derive(cfg.seed, iteration, f"perturb_bg_{level}"))
            out = composite_quadrature(ad.reshape(sig_f, (b, k)), ad.reshape(rgb_f, (b, k, 3)),
                                       ad.reshape(sig_b, (b, k)), ad.reshape(rgb_b, (b, k, 3)),
                                       grid)
            residuals.append(res)
            include_reg = level == "fine" or cfg.regularize_coarse
            _accumulate(parts, "fg", L.photometric_loss(out.rgb, target))
            if include_reg:
                _accumulate(parts, "sparse", L.sparsity_loss(out.alpha_fg))
                k_frac = L.schedule_kfrac(self.beta_sched, iteration)
                _accumulate(parts, "beta", L.beta_loss(out.alpha_fg, self.beta_params,
                                                       k_frac))
                _accumulate(parts, "warp", L.warp_loss(res))
            if level == "coarse":
                grid = importance_samples(grid, out.weights, cfg.k_fine,
                                          derive(cfg.seed, iteration, "importance_fg"))
            else:
                stats_aux["alpha_fg"] = float(out.alpha_fg.numpy().mean())
        return parts

    def _render_bg_batch(self, iteration: int, pick: np.ndarray, windows):
        cfg = self.cfg
        bank = self.bg_bank
        rays, origins_t, dirs_t = self._rays_for(bank, pick, iteration)
        inst = bank.instance[pick]
        target = bank.colors[pick]
        w_t, _ = windows
        perturb_on = iteration < cfg.perturb_until_resolved

        parts = {}
        grid = stratified_samples(rays, cfg.k_coarse, derive(cfg.seed, iteration,
                                                             "stratified_bg"))
        for level in ("coarse", "fine"):
            b, k = grid.t.shape
            pts, dirs = self._points(rays, grid, origins_t, dirs_t)
            flat = ad.reshape(pts, (b * k, 3)) if isinstance(pts, Tensor) \
                else pts.reshape(b * k, 3)
            sig, rgb = self.model.background_field(level, flat, dirs, inst, k, w_t)
            if perturb_on:
                sig = L.density_perturbation(sig, iteration, cfg.perturb_until_resolved,
                                             derive(cfg.seed, iteration,
                                                    f"perturb_only_bg_{level}"))
            out = single_quadrature(ad.reshape(sig, (b, k)), ad.reshape(rgb, (b, k, 3)),
                                    grid)
            _accumulate(parts, "bg", L.photometric_loss(out.rgb, target))
            if level == "coarse":
                grid = importance_samples(grid, out.weights, cfg.k_fine,
                                          derive(cfg.seed, iteration, "importance_bg"))
        return parts

    def train_step(self, iteration: int) -> dict:
        cfg = self.cfg
        t0 = time.perf_counter()
        n_fg = max(1, round(cfg.batch_rays * cfg.fg_fraction))
        n_bg = max(1, cfg.batch_rays - n_fg)
        pick_fg = derive(cfg.seed, iteration, "batch_fg").integers(
            0, self.fg_bank.colors.shape[0], n_fg)
        pick_bg = derive(cfg.seed, iteration, "batch_bg").integers(
            0, self.bg_bank.colors.shape[0], n_bg)
        windows = self._windows(iteration)
        windows = tuple(None if np.all(w == 1.0) else w for w in windows)

        stats_aux: dict = {}
        parts = self._render_fg_batch(iteration, pick_fg, windows, stats_aux)
        parts.update(self._render_bg_batch(iteration, pick_bg, windows))
        loss = L.total_loss(parts, self.weights)

        loss_val = loss.item()
        if not np.isfinite(loss_val):
            self._nan_dump(iteration, pick_fg, pick_bg, parts)
            raise FloatingPointError(
                f"non-finite loss at iteration {iteration}; batch dumped")

        grads = self.model.store.gradients(loss)
        names = self.model.store.names()
        if not self._offsets_active(iteration):
            names = [n for n in names if n != self.OFFSETS]
        adam_step(self.model.store, grads, self.hyper, iteration, names)

        return {
            "iter": iteration,
            "loss": loss_val,
            "fg": parts["fg"].item(),
            "bg": parts["bg"].item(),
            "sparse": parts["sparse"].item(),
            "beta": parts["beta"].item(),
            "warp": parts["warp"].item(),
            "alpha_fg": stats_aux.get("alpha_fg", 0.0),
            "lr": self.hyper.rate_at(iteration),
            "k_frac": L.schedule_kfrac(self.beta_sched, iteration),
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }

    def _nan_dump(self, iteration, pick_fg, pick_bg, parts):
        out = Path(self.cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        dump = {
            "iteration": iteration,
            "fg_pixels": pick_fg.tolist(),
            "bg_pixels": pick_bg.tolist(),
            "parts": {k: float(v.numpy()) for k, v in parts.items()},
        }
        (out / "nan_dump.json").write_text(json.dumps(dump, indent=2))

    # -- loop ------------------------------------------------------------------

    def checkpoint_extra(self) -> dict:
        return {"model": self.model.config.to_dict(),
                "config": self.cfg.to_dict(),
                "n_train_views": self.n_train_views}

    def save(self, iteration: int, path: str | Path) -> None:
        save_checkpoint(path, self.model.store, iteration, self.cfg.seed,
                        self.checkpoint_extra())

    def train(self, log_path: str | Path | None = None,
              checkpoint_dir: str | Path | None = None) -> dict:
        cfg = self.cfg
        out = Path(cfg.out)
        log_path = Path(log_path) if log_path else out / "metrics.log"
        ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        if self.start_iteration == 0:
            self.save(0, ckpt_dir / "ckpt_000000.nsep")
            mode = "w"
        else:
            mode = "a"
        last = {}
        with open(log_path, mode) as log:
            for it in range(self.start_iteration, cfg.iterations):
                last = self.train_step(it)
                log.write(json.dumps(last) + "\n")
                done = it + 1
                if done % cfg.checkpoint_every == 0 or done == cfg.iterations:
                    self.save(done, ckpt_dir / f"ckpt_{done:06d}.nsep")
        self.save(cfg.iterations, ckpt_dir / "ckpt_final.nsep")
        return last


def _accumulate(parts: dict, key: str, value) -> None:
    parts[key] = value if key not in parts else ad.add(parts[key], value)


def _rewire(model_cfg: ModelConfig, store) -> FieldModel:
    """Build a FieldModel whose layers reference tensors already in ``store``."""
    class _Reuse:
        def __init__(self, inner):
            self.inner = inner

        def add(self, name, value, lr_scale=1.0):
            try:
                return self.inner.params[name]
            except KeyError:
                raise ValueError(f"checkpoint is missing parameter {name!r}; "
                                 "model topology mismatch") from None

        def __getattr__(self, item):
            return getattr(self.inner, item)

    proxy = _Reuse(store)
    model = FieldModel(model_cfg, store=proxy, seed=0)
    model.store = store
    return model


# -- inference-time rendering -----------------------------------------------------


def render_view(model: FieldModel, camera, near: float, far: float,
                instance: int | None, k_coarse: int, k_fine: int,
                omega_row: int | None = None, chunk: int = 4096,
                codes: tuple | None = None, fg_only: bool = False,
                offset: np.ndarray | None = None, tau_mass: float = 0.1,
                amodal_threshold: float = 0.5) -> dict:
    """Full-image deterministic render (midpoint coarse pass, quantile-midpoint
    importance pass). ``instance`` picks the foreground codes; ``omega_row``
    defaults to the instance (background set rows use the table's last row).

    fg_only renders the foreground field alone (interpolation/inspection).
    ``offset`` applies a learned camera offset before ray generation.
    """
    from .render import amodal_mask, generate_rays, segmentation_mask

    if offset is not None and np.any(offset != 0):
        camera = apply_camera_offset(camera, offset)
    if omega_row is None:
        omega_row = instance if instance is not None else model.latents.bg_row
    h, w = camera.height, camera.width
    rays_all = generate_rays(camera, camera.pixel_centers(), (near, far))
    out = {
        "rgb": np.zeros((h * w, 3)),
        "alpha_fg": np.zeros(h * w),
        "alpha_total": np.zeros(h * w),
        "depth_fg": np.zeros(h * w),
        "depth_bg": np.zeros(h * w),
    }
    dtype = model.config.dtype
    with ad.no_grad():
        for lo in range(0, h * w, chunk):
            hi = min(lo + chunk, h * w)
            rays = Rays(rays_all.origins[lo:hi], rays_all.dirs[lo:hi],
                        rays_all.near[lo:hi], rays_all.far[lo:hi])
            b = len(rays)
            inst = np.full(b, instance if instance is not None else 0)
            om = np.full(b, omega_row)
            chunk_codes = None
            if codes is not None:
                s_row, a_row = codes
                chunk_codes = (np.broadcast_to(s_row, (b, len(s_row))).astype(dtype),
                               np.broadcast_to(a_row, (b, len(a_row))).astype(dtype))
            grid = stratified_samples(rays, k_coarse, None)
            for level in ("coarse", "fine"):
                k = grid.t.shape[1]
                pts = grid.points(rays).astype(dtype).reshape(-1, 3)
                dirs = rays.dirs.astype(dtype)
                if fg_only:
                    sig, rgb, _ = model.foreground(level, pts, dirs, inst, k,
                                                   codes=chunk_codes)
                    res = single_quadrature(ad.reshape(sig, (b, k)),
                                            ad.reshape(rgb, (b, k, 3)), grid)
                    weights = res.weights
                    if level == "fine":
                        out["rgb"][lo:hi] = res.rgb.numpy()
                        out["alpha_fg"][lo:hi] = res.alpha.numpy()
                        out["alpha_total"][lo:hi] = res.alpha.numpy()
                        out["depth_fg"][lo:hi] = res.depth
                        out["depth_bg"][lo:hi] = far
                else:
                    sig_f, rgb_f, _ = model.foreground(level, pts, dirs, inst, k,
                                                       codes=chunk_codes)
                    sig_b, rgb_b = model.background_field(level, pts, dirs, om, k)
                    res = composite_quadrature(ad.reshape(sig_f, (b, k)),
                                               ad.reshape(rgb_f, (b, k, 3)),
                                               ad.reshape(sig_b, (b, k)),
                                               ad.reshape(rgb_b, (b, k, 3)), grid)
                    weights = res.weights
                    if level == "fine":
                        out["rgb"][lo:hi] = res.rgb.numpy()
                        out["alpha_fg"][lo:hi] = res.alpha_fg.numpy()
                        out["alpha_total"][lo:hi] = res.alpha_total.numpy()
                        out["depth_fg"][lo:hi] = res.depth_fg
                        out["depth_bg"][lo:hi] = res.depth_bg
                if level == "coarse":
                    grid = importance_samples(grid, weights, k_fine, None)
    result = {k: v.reshape(h, w, -1).squeeze(-1) if v.ndim == 1 or v.shape[-1] == 1
              else v.reshape(h, w, 3) for k, v in out.items()}
    alpha = result["alpha_fg"]
    result["mask_depth"] = (alpha >= tau_mass) & (result["depth_fg"] < result["depth_bg"])
    result["mask_amodal"] = alpha >= amodal_threshold
    return result


def render_background_view(model: FieldModel, camera, near: float, far: float,
                           omega_row: int, k_coarse: int, k_fine: int,
                           chunk: int = 4096) -> np.ndarray:
    """Background-only image (no foreground field), deterministic sampling."""
    from .render import generate_rays

    h, w = camera.height, camera.width
    rays_all = generate_rays(camera, camera.pixel_centers(), (near, far))
    rgb = np.zeros((h * w, 3))
    dtype = model.config.dtype
    with ad.no_grad():
        for lo in range(0, h * w, chunk):
            hi = min(lo + chunk, h * w)
            rays = Rays(rays_all.origins[lo:hi], rays_all.dirs[lo:hi],
                        rays_all.near[lo:hi], rays_all.far[lo:hi])
            b = len(rays)
            om = np.full(b, omega_row)
            grid = stratified_samples(rays, k_coarse, None)
            for level in ("coarse", "fine"):
                k = grid.t.shape[1]
                pts = grid.points(rays).astype(dtype).reshape(-1, 3)
                dirs = rays.dirs.astype(dtype)
                sig, col = model.background_field(level, pts, dirs, om, k)
                res = single_quadrature(ad.reshape(sig, (b, k)),
                                        ad.reshape(col, (b, k, 3)), grid)
                if level == "coarse":
                    grid = importance_samples(grid, res.weights, k_fine, None)
                else:
                    rgb[lo:hi] = res.rgb.numpy()
    return rgb.reshape(h, w, 3)


def load_trained_model(checkpoint_path: str | Path):
    """(model, iteration, seed, extra) from a checkpoint archive."""
    store, iteration, seed, extra = load_checkpoint(checkpoint_path)
    model_cfg = ModelConfig.from_dict(extra["model"])
    model = _rewire(model_cfg, store)
    return model, iteration, seed, extra
