"""Synthetic ground-truth scenes: SDF objects resting on a shared plane,
rendered by sphere tracing with Lambertian shading.

Every instance scene shares the identical plane geometry (z = 0); only the
plane albedo changes per scene, plus one object (sphere, box, or capsule)
with its own color and footprint. The renderer emits antialiased RGB, an
exact center-ray object mask, and a center-ray depth map, so segmentation
and depth claims can be checked against ground truth. A background-only
scene (just the plane, its own albedo) stands in for the object-free
image set.

Dataset layout on disk:

    out/
      inst_000/rgb_000.png, mask_000.png, depth_000.fdm, ...
      bg/rgb_000.png, ...
      manifest.txt

The manifest is line-oriented text; each view row carries the camera as a
row-major 3x3 intrinsic matrix and a row-major 3x4 world-from-camera
extrinsic [R|t], per-view near/far bounds, and the split tag. Jittered
datasets keep the unjittered extrinsics in an extra E_true field.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio
from .render import CameraModel
from .rng import derive

LIGHT_DIR = np.array([0.35, 0.2, 0.91])
AMBIENT = 0.35


# -- signed distance fields -----------------------------------------------------

def _sd_sphere(p, center, radius):
    return np.linalg.norm(p - center, axis=-1) - radius


def _sd_box(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def _sd_capsule(p, base, tip, radius):
    pa = p - base
    ba = tip - base
    h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
    return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - radius


@dataclass
class SyntheticScene:
    """One object instance on the shared plane (or the object-free plane)."""
    kind: str                      # sphere | box | capsule | none
    size: np.ndarray               # kind-specific extents
    position: np.ndarray           # (x, y) footprint center on the plane
    color: np.ndarray              # object albedo
    plane_albedo: np.ndarray
    light_dir: np.ndarray = field(default_factory=lambda: LIGHT_DIR.copy())

    def __post_init__(self):
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)

    def object_sdf(self, p: np.ndarray) -> np.ndarray:
        x, y = self.position
        if self.kind == "none":
            return np.full(p.shape[:-1], np.inf)
        if self.kind == "sphere":
            r = self.size[0]
            return _sd_sphere(p, np.array([x, y, r]), r)
        if self.kind == "box":
            half = self.size
            return _sd_box(p, np.array([x, y, half[2]]), half)
        if self.kind == "capsule":
            r, hh = self.size[0], self.size[1]
            return _sd_capsule(p, np.array([x, y, r]), np.array([x, y, r + 2 * hh]), r)
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def plane_sdf(self, p: np.ndarray) -> np.ndarray:
        return p[..., 2]

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.minimum(self.plane_sdf(p), self.object_sdf(p))


def _normals(scene: SyntheticScene, p: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    offsets = np.eye(3) * eps
    n = np.stack([scene.sdf(p + offsets[i]) - scene.sdf(p - offsets[i])
                  for i in range(3)], axis=-1)
    return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)


def sphere_trace(scene: SyntheticScene, origins: np.ndarray, dirs: np.ndarray,
                 t_max: float = 12.0, eps: float = 1e-4,
                 max_steps: int = 192) -> tuple[np.ndarray, np.ndarray]:
    """Returns (t, hit) per ray; rays that exhaust steps or escape report hit=False."""
    t = np.zeros(origins.shape[0])
    hit = np.zeros(origins.shape[0], dtype=bool)
    alive = np.ones(origins.shape[0], dtype=bool)
    for _ in range(max_steps):
        p = origins[alive] + t[alive, None] * dirs[alive]
        d = scene.sdf(p)
        newly_hit = d < eps
        idx = np.flatnonzero(alive)
        hit[idx[newly_hit]] = True
        t[idx[~newly_hit]] += d[~newly_hit]
        alive[idx[newly_hit]] = False
        alive &= t < t_max
        if not alive.any():
            break
    return t, hit


def _shade(scene: SyntheticScene, p: np.ndarray, is_object: np.ndarray,
           shadows: bool) -> np.ndarray:
    n = _normals(scene, p)
    lambert = np.maximum(n @ scene.light_dir, 0.0)
    if shadows and scene.kind != "none":
        # hard shadow: march toward the light against the object alone
        # (the light sits above the plane, so the plane never occludes)
        start = p + n * 2e-3
        dirs = np.broadcast_to(scene.light_dir, p.shape)
        t = np.full(p.shape[0], 1e-3)
        occluded = np.zeros(p.shape[0], dtype=bool)
        for _ in range(96):
            d = scene.object_sdf(start + t[:, None] * dirs)
            occluded |= d < 1e-4
            t += np.maximum(d, 1e-4)
            if np.all(occluded | (t > 4.0)):
                break
        lambert = np.where(occluded & ~is_object, lambert * 0.25, lambert)
    albedo = np.where(is_object[:, None], scene.color, scene.plane_albedo)
    return albedo * (AMBIENT + (1.0 - AMBIENT) * lambert[:, None])


def reference_render(scene: SyntheticScene, camera: CameraModel,
                     supersample: int = 3, shadows: bool = False):
    """Sphere-traced ground truth: (rgb (H,W,3), mask (H,W), depth (H,W)).

    Color is averaged over supersample^2 subpixel rays; mask and depth come
    from the pixel-center ray. Pixels whose center ray escapes are marked
    background with depth t_max.
    """
    camera.validate()
    h, w = camera.height, camera.width
    t_max = 12.0

    def trace_pixels(pixels):
        d_cam = camera.camera_dirs(pixels)
        d = d_cam @ camera.rotation.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(camera.translation, d.shape)
        t, hit = sphere_trace(scene, o, d, t_max=t_max)
        p = o + t[:, None] * d
        is_obj = hit & (scene.object_sdf(p) < scene.plane_sdf(p))
        color = np.empty_like(p)
        if hit.any():
            color[hit] = _shade(scene, p[hit], is_obj[hit], shadows)
        if (~hit).any():
            # horizon: flat plane color at grazing light
            color[~hit] = scene.plane_albedo * AMBIENT
        return color, is_obj, np.where(hit, t, t_max)

    # color: supersampled
    base = camera.pixel_centers()
    acc = np.zeros((h * w, 3))
    ss = max(1, supersample)
    for i in range(ss):
        for j in range(ss):
            off = np.array([(j + 0.5) / ss - 0.5, (i + 0.5) / ss - 0.5])
            color, _, _ = trace_pixels(base + off)
            acc += color
    rgb = (acc / (ss * ss)).reshape(h, w, 3)
    _, mask, depth = trace_pixels(base)
    return np.clip(rgb, 0.0, 1.0), mask.reshape(h, w), depth.reshape(h, w)


# -- scene and camera sampling -----------------------------------------------------

def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def sample_scene(rng: np.random.Generator, index: int) -> SyntheticScene:
    kind = ("sphere", "box", "capsule")[index % 3]
    if kind == "sphere":
        size = np.array([rng.uniform(0.24, 0.38)])
    elif kind == "box":
        size = rng.uniform(0.18, 0.32, 3)
    else:
        size = np.array([rng.uniform(0.13, 0.20), rng.uniform(0.16, 0.28)])
    position = rng.uniform(-0.12, 0.12, 2)
    color = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0))
    plane = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.15, 0.45), rng.uniform(0.45, 0.95))
    return SyntheticScene(kind, size, position, color, plane)


def background_scene(rng: np.random.Generator) -> SyntheticScene:
    plane = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.15, 0.45), rng.uniform(0.45, 0.95))
    return SyntheticScene("none", np.zeros(1), np.zeros(2), np.zeros(3), plane)


def _look_at(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-from-camera rotation: +z forward (toward target), +y image-down."""
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def ring_cameras(rng: np.random.Generator, count: int, azimuth_range: float,
                 image_size: int, phase: float = 0.0) -> list[CameraModel]:
    """Roughly even azimuths over [0, azimuth_range) on a jittered elevation ring."""
    focal = (image_size / 2) / np.tan(np.deg2rad(40.0) / 2)
    cams = []
    spacing = azimuth_range / count
    for k in range(count):
        az = (k + phase) * spacing + rng.uniform(-0.15, 0.15) * spacing
        elev = rng.uniform(0.75, 1.2)
        radius = rng.uniform(2.0, 2.5)
        eye = radius * np.array([np.cos(az) * np.cos(elev),
                                 np.sin(az) * np.cos(elev),
                                 np.sin(elev)])
        rot = _look_at(eye, np.array([0.0, 0.0, 0.15]))
        cams.append(CameraModel(fx=focal, fy=focal, cx=image_size / 2, cy=image_size / 2,
                                width=image_size, height=image_size,
                                rotation=rot, translation=eye))
    return cams


# -- dataset generation / loading ----------------------------------------------------


@dataclass
class GenerateConfig:
    n_instances: int = 8
    views_train: int = 50
    views_heldout: int = 20
    image_size: int = 32
    azimuth_range: float = 2 * np.pi
    seed: int = 0
    shadows: bool = False
    supersample: int = 3


@dataclass
class DatasetView:
    view_id: int
    scene: int | None            # None for the background-only set
    split: str                   # train | heldout
    rgb_path: Path
    mask_path: Path
    depth_path: Path
    camera: CameraModel
    near: float
    far: float
    camera_true: CameraModel | None = None

    @property
    def is_background(self) -> bool:
        return self.scene is None


@dataclass
class SceneDataset:
    root: Path
    image_size: int
    n_instances: int
    azimuth_range: float
    views: list[DatasetView]

    def subset(self, scene=..., split: str | None = None) -> list[DatasetView]:
        out = []
        for v in self.views:
            if scene is not ... and v.scene != scene:
                continue
            if split is not None and v.split != split:
                continue
            out.append(v)
        return out

    def load_rgb(self, view: DatasetView) -> np.ndarray:
        return imgio.read_rgb(view.rgb_path)

    def load_mask(self, view: DatasetView) -> np.ndarray:
        return imgio.read_mask(view.mask_path)


def _cam_row(cam: CameraModel) -> str:
    k = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1]])
    e = np.concatenate([cam.rotation, cam.translation[:, None]], axis=1)
    return ("K=" + ",".join(f"{v:.17g}" for v in k.ravel()) +
            " E=" + ",".join(f"{v:.17g}" for v in e.ravel()))


def _parse_cam(tokens: dict, image_size: int, key: str = "E") -> CameraModel:
    k = np.array([float(x) for x in tokens["K"].split(",")]).reshape(3, 3)
    e = np.array([float(x) for x in tokens[key].split(",")]).reshape(3, 4)
    return CameraModel(fx=k[0, 0], fy=k[1, 1], cx=k[0, 2], cy=k[1, 2],
                       width=image_size, height=image_size,
                       rotation=e[:, :3], translation=e[:, 3])


def generate_dataset(config: GenerateConfig, out_path: str | Path) -> Path:
    """Render every scene from ring cameras and write images, masks, depths,
    and the manifest. Deterministic for a fixed config."""
    out = Path(out_path)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    rng = derive(config.seed, 0, "dataset")

    scenes = [sample_scene(rng, i) for i in range(config.n_instances)]
    scenes.append(background_scene(rng))

    lines = [
        "nerfsep-dataset v1",
        f"image_size {config.image_size} {config.image_size}",
        f"instances {config.n_instances}",
        f"azimuth_range {config.azimuth_range:.17g}",
        f"seed {config.seed}",
    ]
    view_id = 0
    for si, scene in enumerate(scenes):
        is_bg = si == config.n_instances
        sub = out / ("bg" if is_bg else f"inst_{si:03d}")
        sub.mkdir()
        cams_train = ring_cameras(rng, config.views_train, config.azimuth_range,
                                  config.image_size, phase=0.25)
        cams_held = ring_cameras(rng, config.views_heldout, config.azimuth_range,
                                 config.image_size, phase=0.75)
        rendered = []
        for split, cams in (("train", cams_train), ("heldout", cams_held)):
            for cam in cams:
                rgb, mask, depth = reference_render(scene, cam, config.supersample,
                                                    config.shadows)
                rendered.append((split, cam, rgb, mask, depth))
        depths = np.concatenate([r[4].ravel() for r in rendered])
        near = max(0.05, 0.85 * float(depths.min()))
        far = 1.15 * float(depths.max())
        for vi, (split, cam, rgb, mask, depth) in enumerate(rendered):
            rgb_p = sub / f"rgb_{vi:03d}.png"
            mask_p = sub / f"mask_{vi:03d}.png"
            depth_p = sub / f"depth_{vi:03d}.fdm"
            imgio.write_rgb(rgb_p, rgb)
            imgio.write_mask(mask_p, mask)
            imgio.write_depth(depth_p, depth)
            scene_tag = "bg" if is_bg else str(si)
            lines.append(
                f"view id={view_id} scene={scene_tag} split={split} "
                f"rgb={rgb_p.relative_to(out)} mask={mask_p.relative_to(out)} "
                f"depth={depth_p.relative_to(out)} near={near:.17g} far={far:.17g} "
                + _cam_row(cam))
            view_id += 1
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(path: str | Path) -> SceneDataset:
    """Parse and validate a dataset directory (or its manifest path)."""
    path = Path(path)
    manifest = path / "manifest.txt" if path.is_dir() else path
    root = manifest.parent
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    lines = manifest.read_text().splitlines()
    if not lines or not lines[0].startswith("nerfsep-dataset"):
        raise ValueError(f"{manifest}: not a dataset manifest")
    header = {}
    views = []
    for line in lines[1:]:
        if not line.strip():
            continue
        if not line.startswith("view "):
            key, _, val = line.partition(" ")
            header[key] = val
            continue
        tokens = dict(tok.split("=", 1) for tok in line[5:].split(" "))
        image_size = int(header["image_size"].split()[0])
        scene = None if tokens["scene"] == "bg" else int(tokens["scene"])
        cam = _parse_cam(tokens, image_size)
        cam_true = _parse_cam(tokens, image_size, "E_true") if "E_true" in tokens else None
        view = DatasetView(
            view_id=int(tokens["id"]), scene=scene, split=tokens["split"],
            rgb_path=root / tokens["rgb"], mask_path=root / tokens["mask"],
            depth_path=root / tokens["depth"], camera=cam,
            near=float(tokens["near"]), far=float(tokens["far"]),
            camera_true=cam_true)
        views.append(view)

    ds = SceneDataset(root=root, image_size=int(header["image_size"].split()[0]),
                      n_instances=int(header["instances"]),
                      azimuth_range=float(header["azimuth_range"]), views=views)
    _validate(ds)
    return ds


def _validate(ds: SceneDataset) -> None:
    for v in ds.views:
        for p in (v.rgb_path, v.mask_path, v.depth_path):
            if not p.exists():
                raise FileNotFoundError(f"view {v.view_id}: missing file {p}")
        try:
            v.camera.validate()
        except ValueError as e:
            raise ValueError(f"view {v.view_id}: {e}") from None
        if v.near >= v.far:
            raise ValueError(f"view {v.view_id}: near >= far")
        mask = imgio.read_mask(v.mask_path)
        if mask.shape != (ds.image_size, ds.image_size):
            raise ValueError(f"view {v.view_id}: mask size {mask.shape} "
                             f"does not match image size {ds.image_size}")


# -- camera jitter ---------------------------------------------------------------------


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle (3,) -> rotation matrix, safe at zero angle."""
    theta = np.sqrt(axis_angle @ axis_angle + 1e-24)
    k = axis_angle / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def apply_camera_offset(camera: CameraModel, offset: np.ndarray) -> CameraModel:
    """Left-compose a rotation about the camera center and translate it:
    R' = R_off @ R, c' = c + dt. A zero offset is the identity."""
    offset = np.asarray(offset, dtype=np.float64)
    r_off = rodrigues(offset[:3])
    return CameraModel(fx=camera.fx, fy=camera.fy, cx=camera.cx, cy=camera.cy,
                       width=camera.width, height=camera.height,
                       rotation=r_off @ camera.rotation,
                       translation=camera.translation + offset[3:])


def jitter_cameras(dataset_path: str | Path, rot_mag: float, trans_mag: float,
                   seed: int) -> Path:
    """Perturb every view's extrinsics in place (manifest rewrite), retaining
    the unjittered cameras in an E_true field. Random axis-angle of magnitude
    exactly rot_mag and a random translation of magnitude trans_mag."""
    if rot_mag < 0 or trans_mag < 0:
        raise ValueError("magnitudes must be nonnegative")
    ds = load_dataset(dataset_path)
    rng = derive(seed, 0, "jitter")
    lines = (ds.root / "manifest.txt").read_text().splitlines()
    out_lines = []
    vi = 0
    for line in lines:
        if not line.startswith("view "):
            out_lines.append(line)
            continue
        v = ds.views[vi]
        vi += 1
        true_cam = v.camera_true if v.camera_true is not None else v.camera
        axis = rng.normal(0, 1, 3)
        axis /= np.linalg.norm(axis)
        dt = rng.normal(0, 1, 3)
        dt = dt / np.linalg.norm(dt) * trans_mag
        jittered = apply_camera_offset(true_cam, np.concatenate([axis * rot_mag, dt]))
        tokens = dict(tok.split("=", 1) for tok in line[5:].split(" "))
        e_true = np.concatenate([true_cam.rotation, true_cam.translation[:, None]], axis=1)
        row = (f"view id={tokens['id']} scene={tokens['scene']} split={tokens['split']} "
               f"rgb={tokens['rgb']} mask={tokens['mask']} depth={tokens['depth']} "
               f"near={tokens['near']} far={tokens['far']} " + _cam_row(jittered) +
               " E_true=" + ",".join(f"{x:.17g}" for x in e_true.ravel()))
        out_lines.append(row)
    manifest = ds.root / "manifest.txt"
    manifest.write_text("\n".join(out_lines) + "\n")
    return manifest
