"""Dataset manifests, SPEED-style label ingestion and a synthetic scene generator.

Manifest files are JSON lines. The first line is a header::

    {"format": "lsp-manifest/1", "quat_order": "wxyz", "fx": ..., "fy": ...,
     "cx": ..., "cy": ..., "seed": ...}

followed by one record per sample::

    {"filename": "img_000000.png", "q": [w, x, y, z], "t": [x, y, z], "w": 128, "h": 128}

Filenames are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .geometry import (CameraIntrinsics, GeometryError, PixelCoord, Pose, convert_quat_order,
                       project_center, quat_to_rotmat, random_quaternions)
from .heatmap import pixel_to_normalized

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "lsp-manifest/1"
QUAT_ORDERS = ("wxyz", "xyzw")


class DataError(ValueError):
    """Malformed, missing or inconsistent dataset input."""


@dataclass(frozen=True)
class Sample:
    image_path: str
    pose: Pose
    intrinsics: CameraIntrinsics
    center_px: PixelCoord = None

    def __post_init__(self):
        center = project_center(self.pose.t, self.intrinsics, sample=self.image_path)
        if self.center_px is None:
            object.__setattr__(self, "center_px", center)
        elif max(abs(center[0] - self.center_px[0]), abs(center[1] - self.center_px[1])) > 1e-6:
            raise DataError(f"{self.image_path}: cached center {self.center_px} disagrees with projection {center}")


@dataclass
class Manifest:
    samples: list[Sample]
    split_tag: str = "all"
    quaternion_order: str = "wxyz"
    source: str = "synthetic"
    seed: int | None = None

    def __post_init__(self):
        paths = [s.image_path for s in self.samples]
        if len(set(paths)) != len(paths):
            raise DataError("manifest contains duplicate image paths")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def validate(self, check_files: bool = True) -> list[str]:
        """Return a list of problems (empty when the manifest is consistent)."""
        problems = []
        for s in self.samples:
            c = project_center(s.pose.t, s.intrinsics)
            if max(abs(c[0] - s.center_px[0]), abs(c[1] - s.center_px[1])) > 1e-6:
                problems.append(f"{s.image_path}: center mismatch")
            if check_files and not Path(s.image_path).exists():
                problems.append(f"{s.image_path}: missing image")
        return problems


# --------------------------------------------------------------------------- manifest I/O


def save_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not manifest.samples:
        raise DataError("refusing to write an empty manifest")
    K = manifest.samples[0].intrinsics
    header = {"format": MANIFEST_FORMAT, "quat_order": "wxyz", "fx": K.fx, "fy": K.fy,
              "cx": K.cx, "cy": K.cy, "seed": manifest.seed, "source": manifest.source,
              "split": manifest.split_tag}
    base = path.parent.resolve()
    lines = [json.dumps(header)]
    for s in manifest.samples:
        if s.intrinsics != replace(K, width=s.intrinsics.width, height=s.intrinsics.height):
            raise DataError("all samples in a manifest must share fx, fy, cx, cy")
        fname = os.path.relpath(Path(s.image_path).resolve(), base)
        lines.append(json.dumps({"filename": fname, "q": s.pose.q.tolist(), "t": s.pose.t.tolist(),
                                 "w": s.intrinsics.width, "h": s.intrinsics.height}))
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    if not lines:
        raise DataError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed header: {e}") from e
    if header.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    order = header.get("quat_order", "wxyz")
    samples, problems = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            q = convert_quat_order(np.asarray(rec["q"], dtype=np.float64), order)
            t = np.asarray(rec["t"], dtype=np.float64)
            if q.shape != (4,) or t.shape != (3,):
                raise DataError("q must have 4 and t 3 components")
            K = CameraIntrinsics(header["fx"], header["fy"], header["cx"], header["cy"],
                                 int(rec["w"]), int(rec["h"]))
            image_path = str((path.parent / rec["filename"]).resolve())
            if check_files and not Path(image_path).exists():
                raise DataError(f"missing image {image_path}")
            samples.append(Sample(image_path, Pose(t, q), K))
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
            problems.append(f"line {lineno}: {e}")
    if problems:
        raise DataError(f"{path}: invalid records:\n  " + "\n  ".join(problems))
    return Manifest(samples, header.get("split", "all"), order, header.get("source", "synthetic"),
                    header.get("seed"))


# --------------------------------------------------------------------------- SPEED-style ingestion

DEFAULT_KEY_MAP = {"filename_key": "filename", "q_key": "q", "t_key": "t"}


def ingest_speed_format(root_dir, label_file, quaternion_order: str, intrinsics: CameraIntrinsics,
                        key_map: dict | None = None) -> tuple[Manifest, list[str]]:
    """Build a manifest from a JSON array of labeled records.

    ``key_map`` renames the vendor keys (see ``DEFAULT_KEY_MAP``). Records with
    non-positive depth are dropped and reported in the returned diagnostics;
    structural problems (missing images, wrong arity, bad JSON) raise
    :class:`DataError` listing every offending record.
    """
    if quaternion_order not in QUAT_ORDERS:
        raise DataError(f"quaternion_order must be one of {QUAT_ORDERS}")
    keys = {**DEFAULT_KEY_MAP, **(key_map or {})}
    root = Path(root_dir)
    try:
        records = json.loads(Path(label_file).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot parse label file {label_file}: {e}") from e
    if not isinstance(records, list):
        raise DataError(f"{label_file}: expected a JSON array of records")

    samples, errors, rejected = [], [], []
    for i, rec in enumerate(records):
        name = rec.get(keys["filename_key"], f"#{i}") if isinstance(rec, dict) else f"#{i}"
        try:
            q = np.asarray(rec[keys["q_key"]], dtype=np.float64)
            t = np.asarray(rec[keys["t_key"]], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            errors.append(f"record {i} ({name}): missing or non-numeric field {e}")
            continue
        if q.shape != (4,):
            errors.append(f"record {i} ({name}): quaternion has {q.size} components, expected 4")
            continue
        if t.shape != (3,):
            errors.append(f"record {i} ({name}): translation has {t.size} components, expected 3")
            continue
        path = root / str(name)
        if not path.exists():
            errors.append(f"record {i} ({name}): image file {path} not found")
            continue
        if not t[2] > 0:
            rejected.append(f"record {i} ({name}): rejected, z={t[2]} is not positive")
            continue
        qn = convert_quat_order(q, quaternion_order)
        norm = np.linalg.norm(qn)
        if not norm > 0:
            errors.append(f"record {i} ({name}): zero quaternion")
            continue
        samples.append(Sample(str(path.resolve()), Pose(t, qn / norm), intrinsics))
    if errors:
        raise DataError(f"{label_file}: {len(errors)} invalid record(s):\n  " + "\n  ".join(errors))
    for msg in rejected:
        log.warning(msg)
    return Manifest(samples, "all", quaternion_order, "speed_format"), rejected


# --------------------------------------------------------------------------- synthetic scenes


@dataclass
class SceneConfig:
    width: int = 128
    height: int = 128
    fx: float = 200.0
    fy: float = 200.0
    z_range: tuple[float, float] = (5.0, 40.0)
    center_fraction: float = 0.8
    clutter_prob: float = 0.5
    noise_std: float = 0.01
    supersample: int = 2

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.width / 2, self.height / 2, self.width, self.height)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "fx": self.fx, "fy": self.fy,
                "z_range": list(self.z_range), "center_fraction": self.center_fraction,
                "clutter_prob": self.clutter_prob, "noise_std": self.noise_std,
                "supersample": self.supersample}


def _quad(c, a, b):
    c, a, b = (np.asarray(v, dtype=np.float64) for v in (c, a, b))
    return np.array([c - a - b, c + a - b, c + a + b, c - a + b])


def _body_faces():
    """Planar faces ``(vertices (4, 3), front albedo, back albedo or None)`` of the target.

    A box bus with one long and one short solar panel on different sides so
    that no nontrivial rotation maps the silhouette onto itself.
    """
    hx, hy, hz = 0.5, 0.4, 0.3
    ex, ey, ez = np.eye(3)
    faces = [
        (_quad([hx, 0, 0], [0, hy, 0], [0, 0, hz]), 0.95, None),
        (_quad([-hx, 0, 0], [0, -hy, 0], [0, 0, hz]), 0.30, None),
        (_quad([0, hy, 0], [0, 0, hz], [hx, 0, 0]), 0.75, None),
        (_quad([0, -hy, 0], [-hx, 0, 0], [0, 0, hz]), 0.45, None),
        (_quad([0, 0, hz], [hx, 0, 0], [0, hy, 0]), 0.85, None),
        (_quad([0, 0, -hz], [0, hy, 0], [hx, 0, 0]), 0.60, None),
        # long panel along +x, short panel along -y
        (_quad([1.25, 0, 0], [0.75, 0, 0], [0, 0.3, 0]), 0.55, 0.20),
        (_quad([0, -0.8, 0.1], [0.25, 0, 0], [0, 0.4, 0]), 0.65, 0.25),
    ]
    return faces


BODY_FACES = _body_faces()
ANTENNA = np.array([[0.3, 0.2, 0.3], [0.3, 0.2, 1.1]])
BODY_POINTS = np.concatenate([f[0] for f in BODY_FACES] + [ANTENNA])
LIGHT_DIR = np.array([0.4, -0.6, -0.7]) / np.linalg.norm([0.4, -0.6, -0.7])


def _outward_normal(v: np.ndarray) -> np.ndarray:
    n = np.cross(v[1] - v[0], v[3] - v[0])
    n /= np.linalg.norm(n)
    # box faces: orient away from the body center
    if np.dot(n, v.mean(axis=0)) < 0:
        n = -n
    return n


def project_points(points: np.ndarray, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    cam = points @ quat_to_rotmat(pose.q).T + pose.t
    return np.stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy], axis=1)


def _background(rng: np.random.Generator, cfg: SceneConfig, s: int) -> Image.Image:
    h, w = cfg.height * s, cfg.width * s
    if rng.random() >= cfg.clutter_prob:
        return Image.new("L", (w, h), 0)
    ang = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    grad = (np.cos(ang) * xx + np.sin(ang) * yy)
    grad = (grad - grad.min()) / max(np.ptp(grad), 1e-9) * rng.uniform(0.05, 0.35)
    img = Image.fromarray((grad * 255).astype(np.uint8), "L")
    draw = ImageDraw.Draw(img)
    for _ in range(rng.integers(1, 4)):
        r = rng.uniform(0.1, 0.8) * max(h, w)
        cx, cy = rng.uniform(-0.2, 1.2) * w, rng.uniform(-0.2, 1.2) * h
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=int(rng.uniform(20, 110)))
    return img


def render_scene(pose: Pose, cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Render the target at ``pose`` into an 8-bit grayscale array."""
    s = cfg.supersample
    K = cfg.intrinsics
    Ks = CameraIntrinsics(K.fx * s, K.fy * s, K.cx * s, K.cy * s, K.width * s, K.height * s)
    img = _background(rng, cfg, s)
    draw = ImageDraw.Draw(img)
    R = quat_to_rotmat(pose.q)

    polys = []
    for verts, front, back in BODY_FACES:
        cam = verts @ R.T + pose.t
        n = R @ _outward_normal(verts) if back is None else R @ np.cross(verts[1] - verts[0], verts[3] - verts[0])
        n = n / np.linalg.norm(n)
        facing = np.dot(n, cam.mean(axis=0)) < 0
        if back is None and not facing:
            continue
        albedo = front if facing else back
        lit = n if facing else -n
        shade = albedo * (0.35 + 0.65 * max(0.0, -float(np.dot(lit, LIGHT_DIR))))
        polys.append((cam[:, 2].mean(), project_points(verts, pose, Ks), shade))
    for _, pts, shade in sorted(polys, key=lambda p: -p[0]):
        value = int(round(255 * min(1.0, shade + 0.05)))
        draw.polygon([tuple(p) for p in pts], fill=value, outline=min(255, value + 40))
    ant = project_points(ANTENNA, pose, Ks)
    draw.line([tuple(p) for p in ant], fill=230, width=max(1, s))

    arr = np.asarray(img.resize((cfg.width, cfg.height), Image.BOX), dtype=np.float64) / 255.0
    if cfg.noise_std > 0:
        arr = arr + rng.normal(0.0, cfg.noise_std, arr.shape)
    return (np.clip(arr, 0.0, 1.0) * 255).round().astype(np.uint8)


def sample_pose(rng: np.random.Generator, cfg: SceneConfig) -> Pose:
    q = random_quaternions(rng, 1)[0]
    z = rng.uniform(*cfg.z_range)
    K = cfg.intrinsics
    margin = (1 - cfg.center_fraction) / 2
    u = rng.uniform(margin, 1 - margin) * cfg.width
    v = rng.uniform(margin, 1 - margin) * cfg.height
    t = np.array([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z])
    return Pose(t, q)


def _render_one(args):
    index, seed, cfg, out_dir = args
    rng = np.random.default_rng([seed, index])
    pose = sample_pose(rng, cfg)
    pixels = render_scene(pose, cfg, rng)
    path = out_dir / f"img_{index:06d}.png"
    Image.fromarray(pixels, "L").save(path, optimize=False)
    return Sample(str(path.resolve()), pose, cfg.intrinsics)


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("LSP_NUM_WORKERS", os.cpu_count() or 1)))
    except ValueError:
        return os.cpu_count() or 1


def generate_synthetic(n: int, out_dir, cfg: SceneConfig | None = None, seed: int = 0) -> Manifest:
    """Render ``n`` labeled images plus ``manifest.jsonl`` into ``out_dir``.

    Each sample draws from its own stream seeded by ``(seed, index)`` so the
    output does not depend on how many workers render it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or SceneConfig()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out_dir}: {e}") from e
    if not os.access(out_dir, os.W_OK):
        raise DataError(f"output directory {out_dir} is not writable")
    jobs = [(i, seed, cfg, out_dir) for i in range(n)]
    with ThreadPoolExecutor(num_workers()) as pool:
        samples = list(pool.map(_render_one, jobs))
    manifest = Manifest(samples, "all", "wxyz", "synthetic", seed)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    (out_dir / "scene.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return manifest


# --------------------------------------------------------------------------- split / preprocess


def split_manifest(m: Manifest, n_train: int, n_val: int, seed: int = 0) -> tuple[Manifest, Manifest]:
    if n_train < 0 or n_val < 0 or n_train + n_val > len(m):
        raise DataError(f"cannot take {n_train}+{n_val} samples from a manifest of {len(m)}")
    order = np.random.default_rng(seed).permutation(len(m))
    train = [m.samples[i] for i in sorted(order[:n_train])]
    val = [m.samples[i] for i in sorted(order[n_train:n_train + n_val])]
    return (Manifest(train, "train", m.quaternion_order, m.source, m.seed),
            Manifest(val, "val", m.quaternion_order, m.source, m.seed))


def load_image(path) -> torch.Tensor:
    """Grayscale image as a ``(1, H, W)`` float tensor in ``[0, 1]``."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return torch.from_numpy(arr)[None]


def resize_image(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    return F.interpolate(image[None], size=tuple(size), mode="bilinear", align_corners=False,
                         antialias=True)[0]


def preprocess(sample: Sample, target: tuple[int, int] = (256, 409), image: torch.Tensor | None = None):
    """Resample the sample's image to ``target`` (rows, cols) and build its training targets.

    Returns ``(resized, original, targets)`` where ``targets`` holds ``t`` in
    meters, ``center`` in normalized coordinates and the unit quaternion ``q``.
    """
    original = load_image(sample.image_path) if image is None else image
    H, W = original.shape[-2:]
    rows, cols = target
    resized = resize_image(original, target)
    center = (sample.center_px.u * cols / W, sample.center_px.v * rows / H)
    targets = {
        "t": torch.as_tensor(sample.pose.t, dtype=torch.float32),
        "center": pixel_to_normalized(torch.tensor(center, dtype=torch.float64), cols, rows).float(),
        "center_px": torch.tensor(center, dtype=torch.float32),
        "q": torch.as_tensor(sample.pose.q, dtype=torch.float32),
    }
    return resized, original, targets


class PoseDataset:
    """All samples of a manifest decoded into memory as stacked tensors."""

    def __init__(self, manifest: Manifest, input_size: tuple[int, int]):
        if len(manifest) == 0:
            raise DataError("empty manifest")
        self.manifest = manifest
        with ThreadPoolExecutor(num_workers()) as pool:
            items = list(pool.map(lambda s: preprocess(s, input_size), manifest.samples))
        self.images = torch.stack([it[0] for it in items])
        shapes = {tuple(it[1].shape) for it in items}
        if len(shapes) != 1:
            raise DataError(f"original images differ in size: {sorted(shapes)}")
        same = tuple(items[0][1].shape[-2:]) == tuple(input_size)
        self.originals = None if same else torch.stack([it[1] for it in items])
        self.t = torch.stack([it[2]["t"] for it in items])
        self.center = torch.stack([it[2]["center"] for it in items])
        self.q = torch.stack([it[2]["q"] for it in items])

    def __len__(self):
        return self.images.shape[0]

    def batch(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        orig = None if self.originals is None else self.originals[idx]
        return self.images[idx], orig, self.t[idx], self.center[idx], self.q[idx]


# --------------------------------------------------------------------------- K_O calibration


def _centered_extent(points_px: np.ndarray, center: PixelCoord) -> float:
    return 2.0 * float(np.max(np.abs(points_px - np.asarray(center)[None])))


def _image_extent(sample: Sample, threshold: float = 0.5) -> float | None:
    img = load_image(sample.image_path)[0].numpy()
    mask = img > threshold * img.max()
    if not mask.any():
        return None
    ys, xs = np.nonzero(mask)
    pts = np.stack([xs + 0.5, ys + 0.5], axis=1)
    return _centered_extent(pts, sample.center_px)


def calibrate_k_object(manifest: Manifest, fill: float = 0.8, max_samples: int = 500,
                       seed: int = 0) -> dict:
    """Pick ``K_O`` so that the target fills ``fill`` of the median box side.

    For synthetic manifests the target extent comes from projecting the known
    body; otherwise from a bright-pixel mask of the image, which is only a
    rough estimate on cluttered backgrounds.
    """
    if not 0 < fill <= 1:
        raise ValueError("fill must be in (0, 1]")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(manifest))[:max_samples]
    products = []
    for i in idx:
        s = manifest.samples[i]
        if manifest.source == "synthetic":
            extent = _centered_extent(project_points(BODY_POINTS, s.pose, s.intrinsics), s.center_px)
        else:
            extent = _image_extent(s)
        if extent:
            products.append(extent * s.pose.t[2])
    if not products:
        raise DataError("no usable samples for K_O calibration")
    products = np.asarray(products)
    k = float(np.median(products) / fill)
    return {"k_object": k, "fill": fill, "n": int(products.size),
            "extent_z_median": float(np.median(products)),
            "extent_z_p10": float(np.percentile(products, 10)),
            "extent_z_p90": float(np.percentile(products, 90))}
