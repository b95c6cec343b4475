"""Synthetic sharp-video generation, blur formation, augmentation, and
dataset persistence.

Scenes are textured sprites moving over a low-contrast textured background,
rendered at sub-pixel positions with a bilinear splat (mass- and
moment-preserving, so sprite centroids track the specified trajectories
exactly). Blur is the arithmetic mean of the frames. Datasets are 8-bit
PNGs plus a JSON manifest carrying each sequence's (spec, seed), from which
the exact float ground truth is regenerable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .models import BlurPair, VideoSequence

MANIFEST_VERSION = 1

BG_LO, BG_HI = 0.18, 0.30
SPRITE_LO, SPRITE_HI = 0.65, 1.0


class DatasetError(Exception):
    """Raised for missing, inconsistent, or corrupt dataset files."""


@dataclass
class SpriteSpec:
    shape: str  # "disk" | "square"
    texture_seed: int
    position: tuple[float, float]  # (x, y) center in pixels at frame 0
    velocity: tuple[float, float]  # pixels per frame
    radius: float = 6.0
    acceleration: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.shape not in ("disk", "square"):
            raise ValueError(f"unknown sprite shape {self.shape!r}")
        if self.radius <= 0:
            raise ValueError("sprite radius must be positive")

    def center_at(self, n: int) -> tuple[float, float]:
        return (self.position[0] + self.velocity[0] * n
                + 0.5 * self.acceleration[0] * n * n,
                self.position[1] + self.velocity[1] * n
                + 0.5 * self.acceleration[1] * n * n)


@dataclass
class SceneSpec:
    size: int
    frames: int
    background_seed: int = 0
    sprites: list[SpriteSpec] = field(default_factory=list)

    def validate(self) -> None:
        if self.frames < 1:
            raise ValueError("scene needs at least one frame")
        limit = self.size / 8.0
        for si, sp in enumerate(self.sprites):
            prev = None
            for n in range(self.frames):
                x, y = sp.center_at(n)
                r = sp.radius
                if not (r <= x <= self.size - 1 - r
                        and r <= y <= self.size - 1 - r):
                    raise ValueError(
                        f"sprite {si} leaves the canvas at frame {n}: "
                        f"center ({x:.1f},{y:.1f}), radius {r}")
                if prev is not None:
                    step = math.hypot(x - prev[0], y - prev[1])
                    if step > limit:
                        raise ValueError(
                            f"sprite {si} moves {step:.1f}px at frame {n}, "
                            f"above the {limit:.1f}px per-frame limit")
                prev = (x, y)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        sprites = [SpriteSpec(shape=s["shape"], texture_seed=s["texture_seed"],
                              position=tuple(s["position"]),
                              velocity=tuple(s["velocity"]),
                              radius=s["radius"],
                              acceleration=tuple(s["acceleration"]))
                   for s in d["sprites"]]
        return cls(size=d["size"], frames=d["frames"],
                   background_seed=d["background_seed"], sprites=sprites)


def _smooth_noise(rng: np.random.Generator, size: int, lo: float,
                  hi: float) -> np.ndarray:
    coarse = rng.uniform(lo, hi, size=(3, max(2, size // 8), max(2, size // 8)))
    return kernels.resize(coarse.astype(np.float32), (size, size))


def render_background(spec: SceneSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, spec.background_seed, 0xB6])
    return _smooth_noise(rng, spec.size, BG_LO, BG_HI)


def _sprite_patch(sp: SpriteSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(texture (3,D,D), alpha (D,D)) for one sprite, D = 2*ceil(r)+1."""
    rc = int(math.ceil(sp.radius))
    d = 2 * rc + 1
    rng = np.random.default_rng([seed, sp.texture_seed, 0x59])
    coarse = rng.uniform(SPRITE_LO, SPRITE_HI,
                         size=(3, max(2, d // 3), max(2, d // 3)))
    tex = kernels.resize(coarse.astype(np.float32), (d, d))
    yy, xx = np.mgrid[0:d, 0:d].astype(np.float32)
    cx = cy = (d - 1) / 2.0
    if sp.shape == "disk":
        dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    else:
        dist = np.maximum(np.abs(xx - cx), np.abs(yy - cy))
    alpha = np.clip(sp.radius + 0.5 - dist, 0.0, 1.0).astype(np.float32)
    return tex, alpha


def _splat_shift(patch: np.ndarray, fy: float, fx: float) -> np.ndarray:
    """Bilinear sub-pixel shift onto a one-pixel-larger canvas; preserves
    total mass and first moments exactly."""
    h, w = patch.shape[-2:]
    out = np.zeros(patch.shape[:-2] + (h + 1, w + 1), dtype=patch.dtype)
    out[..., :h, :w] += (1 - fy) * (1 - fx) * patch
    out[..., :h, 1:] += (1 - fy) * fx * patch
    out[..., 1:, :w] += fy * (1 - fx) * patch
    out[..., 1:, 1:] += fy * fx * patch
    return out


def _composite(canvas: np.ndarray, premult: np.ndarray, alpha: np.ndarray,
               top: int, left: int) -> None:
    size = canvas.shape[-1]
    h, w = alpha.shape
    y0, y1 = max(0, top), min(size, top + h)
    x0, x1 = max(0, left), min(size, left + w)
    if y0 >= y1 or x0 >= x1:
        return
    sy, sx = y0 - top, x0 - left
    a = alpha[sy:sy + y1 - y0, sx:sx + x1 - x0]
    p = premult[:, sy:sy + y1 - y0, sx:sx + x1 - x0]
    region = canvas[:, y0:y1, x0:x1]
    canvas[:, y0:y1, x0:x1] = p + (1.0 - a) * region


def synth_sequence(spec: SceneSpec, seed: int) -> VideoSequence:
    """Render the scene's N frames; deterministic in (spec, seed)."""
    spec.validate()
    bg = render_background(spec, seed)
    patches = [_sprite_patch(sp, seed) for sp in spec.sprites]
    frames = []
    for n in range(spec.frames):
        canvas = bg.copy()
        for sp, (tex, alpha) in zip(spec.sprites, patches):
            x, y = sp.center_at(n)
            rc = (alpha.shape[0] - 1) / 2.0
            base_x = math.floor(x - rc)
            base_y = math.floor(y - rc)
            fx = (x - rc) - base_x
            fy = (y - rc) - base_y
            a_shift = _splat_shift(alpha, fy, fx)
            p_shift = _splat_shift(alpha * tex, fy, fx)
            _composite(canvas, p_shift, a_shift, base_y, base_x)
        frames.append(np.clip(canvas, 0.0, 1.0).astype(np.float32))
    return VideoSequence(frames)


def form_blur(video: VideoSequence) -> BlurPair:
    """Blur as the arithmetic mean of the latent frames."""
    stack = np.stack(video.frames)
    blurred = stack.mean(axis=0, dtype=np.float64).astype(np.float32)
    return BlurPair(blurred, video)


def random_scene(rng: np.random.Generator, size: int, frames: int,
                 sprites: int = 2) -> SceneSpec:
    """Sample a valid scene: sprite trajectories centered so the full path
    stays at least one radius inside the canvas."""
    specs = []
    for _ in range(sprites):
        radius = float(rng.uniform(size / 12, size / 7))
        speed = float(rng.uniform(0.3, min(3.0, size / 16)))
        angle = float(rng.uniform(0, 2 * math.pi))
        vx, vy = speed * math.cos(angle), speed * math.sin(angle)
        travel = (frames - 1)
        lo_x = radius + max(0.0, -vx * travel)
        hi_x = size - 1 - radius - max(0.0, vx * travel)
        lo_y = radius + max(0.0, -vy * travel)
        hi_y = size - 1 - radius - max(0.0, vy * travel)
        if lo_x >= hi_x or lo_y >= hi_y:
            vx *= 0.25
            vy *= 0.25
            lo_x = radius + max(0.0, -vx * travel)
            hi_x = size - 1 - radius - max(0.0, vx * travel)
            lo_y = radius + max(0.0, -vy * travel)
            hi_y = size - 1 - radius - max(0.0, vy * travel)
        pos = (float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y)))
        specs.append(SpriteSpec(
            shape="disk" if rng.random() < 0.5 else "square",
            texture_seed=int(rng.integers(1 << 31)),
            position=pos, velocity=(vx, vy), radius=radius))
    return SceneSpec(size=size, frames=frames,
                     background_seed=int(rng.integers(1 << 31)),
                     sprites=specs)


# ---------------------------------------------------------------------------
# augmentation


def _resize_to(arr: np.ndarray, size: int) -> np.ndarray:
    return kernels.resize(arr, (size, size)).astype(np.float32)


def augment(pair: BlurPair, seed: int, flip: bool | None = None,
            zoom: float | None = None) -> BlurPair:
    """Apply one flip/zoom draw identically to every frame and the blur.

    Zooming center-crops size/zoom pixels then resizes back, so factors
    below 1 degenerate to the identity (the crop must fit the canvas).
    Explicit flip/zoom arguments override the seeded draw.
    """
    rng = np.random.default_rng([seed, 0xA6])
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if zoom is None:
        zoom = float(rng.uniform(0.2, 2.0))
    size = pair.blurred.shape[-1]
    crop = min(size, max(8, int(round(size / zoom))))
    lo = (size - crop) // 2
    hi = lo + crop

    def apply(img: np.ndarray) -> np.ndarray:
        out = img[:, :, ::-1] if flip else img
        if crop != size:
            out = _resize_to(out[:, lo:hi, lo:hi], size)
        return np.ascontiguousarray(out, dtype=np.float32)

    frames = [apply(f) for f in pair.source.frames]
    return BlurPair(apply(pair.blurred),
                    VideoSequence(frames, pair.source.center_index))


# ---------------------------------------------------------------------------
# persistence (8-bit PNG + JSON manifest)


def _to_png(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), "RGB").save(path)


def _from_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    try:
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    except Exception as exc:
        raise DatasetError(f"corrupt image file: {path} ({exc})") from exc
    return (arr / 255.0).transpose(2, 0, 1).copy()


def write_dataset(pairs: list[BlurPair], root,
                  provenance: list[tuple[SceneSpec, int]] | None = None) -> None:
    """Write sequences as seq_%05d/frame_%02d.png + blur.png and a manifest.

    `provenance` supplies the (spec, seed) recorded per sequence so exact
    float ground truth can be regenerated later.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if provenance is not None and len(provenance) != len(pairs):
        raise ValueError("provenance list must match pair count")
    n_frames = len(pairs[0].source.frames) if pairs else 0
    sequences = []
    for i, pair in enumerate(pairs):
        if len(pair.source.frames) != n_frames:
            raise ValueError("all sequences must share the same frame count")
        seq_dir = root / f"seq_{i:05d}"
        seq_dir.mkdir(exist_ok=True)
        for k, frame in enumerate(pair.source.frames):
            _to_png(seq_dir / f"frame_{k:02d}.png", frame)
        _to_png(seq_dir / "blur.png", pair.blurred)
        if provenance is not None:
            spec, seed = provenance[i]
            sequences.append({"seed": seed, "spec": spec.to_dict()})
        else:
            sequences.append({"seed": None, "spec": None})
    manifest = {
        "version": MANIFEST_VERSION,
        "frames": n_frames,
        "count": len(pairs),
        "size": int(pairs[0].blurred.shape[-1]) if pairs else 0,
        "sequences": sequences,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1,
                                                   sort_keys=True))


def read_manifest(root) -> dict:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"empty dataset: no manifest.json in {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest: {path} ({exc})") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(
            f"unsupported manifest version {manifest.get('version')} in {path}")
    if manifest.get("count", 0) < 1:
        raise DatasetError(f"empty dataset: manifest in {root} lists no sequences")
    return manifest


def read_dataset(root) -> list[BlurPair]:
    """Load all pairs; frame tensors match the originals within 1/255."""
    root = Path(root)
    manifest = read_manifest(root)
    count, n_frames = manifest["count"], manifest["frames"]
    seq_dirs = sorted(d for d in root.iterdir()
                      if d.is_dir() and d.name.startswith("seq_"))
    if len(seq_dirs) != count:
        raise DatasetError(
            f"manifest lists {count} sequences but {root} has {len(seq_dirs)}")
    pairs = []
    for i in range(count):
        seq_dir = root / f"seq_{i:05d}"
        frame_files = sorted(seq_dir.glob("frame_*.png"))
        if len(frame_files) != n_frames:
            raise DatasetError(
                f"manifest says {n_frames} frames but {seq_dir} has "
                f"{len(frame_files)}")
        frames = [_from_png(seq_dir / f"frame_{k:02d}.png")
                  for k in range(n_frames)]
        blurred = _from_png(seq_dir / "blur.png")
        pairs.append(BlurPair(blurred, VideoSequence(frames)))
    return pairs
