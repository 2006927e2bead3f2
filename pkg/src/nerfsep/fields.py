"""Coordinate-MLP radiance fields.

Two conditional fields share one wiring rule: density depends on position
only, while appearance codes and view direction feed the color branch.
The foreground is a canonical template queried at warped coordinates,
x' = x + D(x, shape_code), so per-instance geometry lives entirely in the
translation field and the template stays shared.

Evaluation batches are flattened to (P, C) where P = rays * samples; per-ray
conditioning (view direction, codes) is pushed through its own linear
weights at (B, C) and the result repeated per sample, which is equivalent to
the usual concat-then-matmul but skips the redundant arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamStore


@dataclass
class MLPSpec:
    """Topology of one conditional field network."""
    trunk_depth: int = 2
    trunk_width: int = 64
    branch_depth: int = 4
    branch_width: int = 64
    skip_at: int = 3            # 1-based hidden layer that re-reads the branch input
    n_freq_spatial: int = 10
    n_freq_dir: int = 4

    def __post_init__(self):
        if not (1 <= self.skip_at <= self.branch_depth):
            raise ValueError("skip_at must lie within the branch depth")


@dataclass
class DeformSpec:
    depth: int = 4
    width: int = 64
    skip_at: int = 2
    n_freq_spatial: int = 4

    def __post_init__(self):
        if not (1 <= self.skip_at <= self.depth):
            raise ValueError("skip_at must lie within the depth")


# Full-size topology preset (runnable in principle, untested at that scale).
PAPER_MLP = dict(trunk_depth=2, trunk_width=256, branch_depth=8, branch_width=128,
                 skip_at=5, n_freq_spatial=10, n_freq_dir=4)
PAPER_DEFORM = dict(depth=6, width=128, skip_at=4, n_freq_spatial=10)


def positional_encode(x: Tensor | np.ndarray, num_freq: int,
                      window: np.ndarray | None = None) -> Tensor:
    """[x, w1 sin(2^0 pi x), w1 cos(2^0 pi x), ..., wL sin(2^{L-1} pi x), wL cos(...)].

    ``window`` holds one weight in [0, 1] per frequency band (coarse-to-fine
    annealing); None or all-ones skips the multiply so an annealed-out window
    is bitwise identical to no window. Output width is k*(1 + 2L).
    """
    if num_freq < 1:
        raise ValueError("num_freq must be >= 1")
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if window is not None:
        window = np.asarray(window, dtype=x.dtype)
        if window.shape != (num_freq,):
            raise ValueError(f"window must have length {num_freq}")
        if np.all(window == 1.0):
            window = None
    k = x.shape[-1]
    freqs = (2.0 ** np.arange(num_freq) * np.pi).astype(x.dtype)
    scaled = ad.mul(x.reshape(-1, 1, k), freqs.reshape(1, num_freq, 1))
    s, c = ad.sin(scaled), ad.cos(scaled)
    if window is not None:
        w = window.reshape(1, num_freq, 1)
        s, c = ad.mul(s, w), ad.mul(c, w)
    bands = ad.concat([s, c], axis=2).reshape(-1, 2 * num_freq * k)
    return ad.concat([x.reshape(-1, k), bands], axis=1)


def encoded_width(k: int, num_freq: int) -> int:
    return k * (1 + 2 * num_freq)


class Linear:
    """y = x @ W + b with fan-in-scaled uniform init."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, dtype, zero_init: bool = False,
                 fan_in: int | None = None):
        bound = 0.0 if zero_init else 1.0 / np.sqrt(fan_in or n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)
        b = rng.uniform(-bound, bound, size=(n_out,)).astype(dtype)
        self.W = store.add(f"{name}/W", w)
        self.b = store.add(f"{name}/b", b)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.W), self.b)

    def raw(self, x: Tensor) -> Tensor:
        """x @ W without the bias (for the per-ray split of a fused layer)."""
        return ad.matmul(x, self.W)


class Branch:
    """Hidden stack with per-point/per-ray inputs and one skip re-injection."""

    def __init__(self, store: ParamStore, name: str, point_width: int, ray_width: int,
                 depth: int, width: int, skip_at: int, head_width: int,
                 rng: np.random.Generator, dtype, zero_head: bool = False):
        self.skip_at = skip_at
        self.hidden: list[dict] = []
        for i in range(depth):
            takes_input = (i == 0) or (i + 1 == skip_at and i > 0)
            prev = width if i > 0 else 0
            fan = prev + (point_width + ray_width if takes_input else 0)
            layer = {}
            if prev:
                layer["h"] = Linear(store, f"{name}/h{i}_h", prev, width, rng, dtype, fan_in=fan)
            if takes_input:
                layer["p"] = Linear(store, f"{name}/h{i}_p", point_width, width, rng, dtype, fan_in=fan)
                if ray_width:
                    layer["r"] = Linear(store, f"{name}/h{i}_r", ray_width, width, rng, dtype, fan_in=fan)
            self.hidden.append(layer)
        self.head = Linear(store, f"{name}/head", width, head_width, rng, dtype,
                           zero_init=zero_head)

    def __call__(self, point_in: Tensor, ray_in: Tensor | None, samples_per_ray: int) -> Tensor:
        h = None
        for i, layer in enumerate(self.hidden):
            pre = None
            if "h" in layer:
                pre = layer["h"](h)
            if "p" in layer:
                part = layer["p"](point_in) if pre is None else ad.add(pre, layer["p"].raw(point_in))
                pre = part
                if "r" in layer:
                    rp = layer["r"].raw(ray_in)
                    pre = ad.add(pre, ad.repeat_rows(rp, samples_per_ray))
            h = ad.relu(pre)
        return self.head(h)


class RadianceField:
    """Trunk + density branch + color branch; density sees position only."""

    def __init__(self, store: ParamStore, name: str, spec: MLPSpec, cond_dim: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.spec = spec
        enc_x = encoded_width(3, spec.n_freq_spatial)
        enc_d = encoded_width(3, spec.n_freq_dir)
        self.trunk = [Linear(store, f"{name}/trunk{i}",
                             enc_x if i == 0 else spec.trunk_width,
                             spec.trunk_width, rng, dtype)
                      for i in range(spec.trunk_depth)]
        self.density = Branch(store, f"{name}/density", spec.trunk_width, 0,
                              spec.branch_depth, spec.branch_width, spec.skip_at,
                              1, rng, dtype)
        self.color = Branch(store, f"{name}/color", spec.trunk_width, enc_d + cond_dim,
                            spec.branch_depth, spec.branch_width, spec.skip_at,
                            3, rng, dtype)

    def __call__(self, points: Tensor | np.ndarray, dirs: Tensor | np.ndarray,
                 cond: Tensor, samples_per_ray: int,
                 window: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """points (P,3), dirs (B,3), cond (B,C) -> density (P,), color (P,3)."""
        x = positional_encode(points, self.spec.n_freq_spatial, window)
        h = x
        for layer in self.trunk:
            h = ad.relu(layer(h))
        sigma = ad.softplus(self.density(h, None, samples_per_ray).reshape(-1))
        d_enc = positional_encode(dirs, self.spec.n_freq_dir, None)
        ray_in = ad.concat([d_enc, cond], axis=1) if cond is not None else d_enc
        rgb = ad.sigmoid(self.color(h, ray_in, samples_per_ray))
        return sigma, rgb


class DeformationField:
    """Residual translation field; final layer zero-initialized (identity warp)."""

    def __init__(self, store: ParamStore, name: str, spec: DeformSpec, code_dim: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.spec = spec
        self.net = Branch(store, name, encoded_width(3, spec.n_freq_spatial), code_dim,
                          spec.depth, spec.width, spec.skip_at, 3, rng, dtype,
                          zero_head=True)

    def __call__(self, points: Tensor | np.ndarray, code: Tensor, samples_per_ray: int,
                 window: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Returns (warped points x' = x + r, residual r), both (P, 3)."""
        if not isinstance(points, Tensor):
            points = Tensor(points)
        enc = positional_encode(points, self.spec.n_freq_spatial, window)
        r = self.net(enc, code, samples_per_ray)
        return ad.add(points, r), r


class LatentTable:
    """Per-instance GLO codes: shape, appearance, and background appearance.

    omega carries one extra row (index n_instances) for the object-free
    background image set, which has its own background appearance but no
    foreground instance.
    """

    def __init__(self, store: ParamStore, n_instances: int, dim: int,
                 rng: np.random.Generator, dtype=np.float64, init_std: float = 0.01):
        self.n_instances = n_instances
        self.dim = dim
        self.psi_s = store.add("latent/psi_s",
                               (rng.normal(0, init_std, (n_instances, dim))).astype(dtype))
        self.psi_a = store.add("latent/psi_a",
                               (rng.normal(0, init_std, (n_instances, dim))).astype(dtype))
        self.omega = store.add("latent/omega",
                               (rng.normal(0, init_std, (n_instances + 1, dim))).astype(dtype))

    def rows(self, which: str, idx: np.ndarray) -> Tensor:
        table = {"psi_s": self.psi_s, "psi_a": self.psi_a, "omega": self.omega}[which]
        idx = np.asarray(idx)
        if idx.min() < 0 or idx.max() >= table.shape[0]:
            raise IndexError(f"instance index out of range for {which}")
        return ad.gather(table, idx, axis=0)

    @property
    def bg_row(self) -> int:
        return self.n_instances


@dataclass
class ModelConfig:
    """Everything needed to rebuild the five networks + latents from a checkpoint."""
    n_instances: int = 8
    latent_dim: int = 64
    mlp: MLPSpec = field(default_factory=MLPSpec)
    deform: DeformSpec = field(default_factory=DeformSpec)
    precision: str = "float64"
    point_scale: float = 1.0   # world -> encoding input normalization

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return {
            "n_instances": self.n_instances,
            "latent_dim": self.latent_dim,
            "mlp": vars(self.mlp).copy(),
            "deform": vars(self.deform).copy(),
            "precision": self.precision,
            "point_scale": self.point_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(n_instances=d["n_instances"], latent_dim=d["latent_dim"],
                   mlp=MLPSpec(**d["mlp"]), deform=DeformSpec(**d["deform"]),
                   precision=d["precision"], point_scale=d.get("point_scale", 1.0))


class FieldModel:
    """The full two-component model: coarse/fine template and background pairs,
    one deformation field, and the latent table.

    Checkpoint key prefixes: template_coarse, template_fine, background_coarse,
    background_fine, deformation, latent/*.
    """

    LEVELS = ("coarse", "fine")

    def __init__(self, config: ModelConfig, store: ParamStore | None = None,
                 seed: int = 0):
        self.config = config
        self.store = store if store is not None else ParamStore()
        dtype = config.dtype
        rng = np.random.Generator(np.random.Philox(key=(np.uint64(seed), np.uint64(0))))
        d = config.latent_dim
        self.template = {lv: RadianceField(self.store, f"template_{lv}", config.mlp,
                                           d, rng, dtype) for lv in self.LEVELS}
        self.background = {lv: RadianceField(self.store, f"background_{lv}", config.mlp,
                                             d, rng, dtype) for lv in self.LEVELS}
        self.deformation = DeformationField(self.store, "deformation", config.deform,
                                            d, rng, dtype)
        self.latents = LatentTable(self.store, config.n_instances, d, rng, dtype)

    def _scale(self, points):
        s = self.config.point_scale
        if s == 1.0:
            return points
        if isinstance(points, Tensor):
            return ad.mul(points, np.asarray(s, dtype=points.dtype))
        return points * s

    def foreground(self, level: str, points, dirs, instance_idx: np.ndarray,
                   samples_per_ray: int, window: np.ndarray | None = None,
                   window_deform: np.ndarray | None = None,
                   codes: tuple[Tensor, Tensor] | None = None):
        """Warp then query the template. Returns (sigma (P,), rgb (P,3), residual (P,3)).

        Points are normalized by ``point_scale`` before encoding; the warp and
        its residual live in that normalized space.

        ``window``/``window_deform`` are the anneal windows sized to the
        template's and the deformation field's own frequency counts.
        ``codes`` overrides the latent-table lookup with explicit
        (shape, appearance) row tensors, used for interpolation renders.
        """
        if codes is None:
            psi_s = self.latents.rows("psi_s", instance_idx)
            psi_a = self.latents.rows("psi_a", instance_idx)
        else:
            psi_s, psi_a = codes
        pts = self._scale(points)
        warped, residual = self.deformation(pts, psi_s, samples_per_ray, window_deform)
        sigma, rgb = self.template[level](warped, dirs, psi_a, samples_per_ray, window)
        return sigma, rgb, residual

    def background_field(self, level: str, points, dirs, instance_idx: np.ndarray,
                         samples_per_ray: int, window: np.ndarray | None = None,
                         code: Tensor | None = None):
        omega = code if code is not None else self.latents.rows("omega", instance_idx)
        return self.background[level](self._scale(points), dirs, omega,
                                      samples_per_ray, window)
