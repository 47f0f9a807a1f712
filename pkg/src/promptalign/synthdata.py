"""Synthetic traffic scenes with parametric domain shift.

Every scene is a pure function of ``(spec.seed, index)``. Shifts are applied
in a fixed order: brightness, then blur, then additive noise.
"""
from __future__ import annotations

import contextlib
import contextvars
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import uniform_filter, zoom

from .boxes import BoxLabel

CLASS_NAMES = ("car", "bus", "truck")

# (min width px, max width px, min aspect w/h, max aspect w/h, shape)
CLASS_GEOMETRY = {
    0: (8, 13, 1.4, 1.8, "rect"),
    1: (16, 24, 2.6, 3.2, "rect"),
    2: (10, 15, 1.0, 1.0, "disc"),
}

DEFAULT_PALETTE = ((0.85, 0.20, 0.20), (0.90, 0.80, 0.15), (0.20, 0.35, 0.85))


@dataclass(frozen=True)
class DomainSpec:
    name: str = "source"
    brightness: float = 1.0
    noise_std: float = 0.0
    blur_radius: int = 0
    object_density: float = 3.0
    palette: tuple = DEFAULT_PALETTE
    palette_std: float = 0.05
    background: tuple = (0.45, 0.47, 0.45)
    texture: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.brightness <= 0:
            raise ValueError("brightness must be positive")
        if self.noise_std < 0 or self.blur_radius < 0 or self.object_density < 0:
            raise ValueError("noise_std, blur_radius and object_density must be non-negative")
        object.__setattr__(self, "palette", tuple(tuple(float(v) for v in c) for c in self.palette))
        object.__setattr__(self, "background", tuple(float(v) for v in self.background))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["palette"] = [list(c) for c in self.palette]
        d["background"] = list(self.background)
        return d


@dataclass
class SceneSample:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    annotations: list[BoxLabel]
    domain_tag: str


def _sample_count(rng: np.random.Generator, density: float, max_objects: int) -> int:
    if density <= 0:
        return 0
    while True:
        n = int(rng.poisson(density))
        if n <= max_objects:
            return n


def _overlaps(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def render_clean(spec: DomainSpec, index: int, size: int = 64, max_objects: int = 8):
    """Scene before the brightness/blur/noise shift, plus its annotations."""
    rng = np.random.default_rng([spec.seed, index])
    coarse = rng.normal(0.0, 1.0, size=(8, 8, 3))
    texture = zoom(coarse, (size / 8, size / 8, 1), order=1)
    image = np.asarray(spec.background)[None, None, :] + spec.texture * texture
    yy, xx = np.mgrid[0:size, 0:size]

    n = _sample_count(rng, spec.object_density, max_objects)
    placed: list[tuple[int, int, int, int]] = []
    labels: list[BoxLabel] = []
    for _ in range(n):
        cls = int(rng.integers(len(CLASS_GEOMETRY)))
        w_min, w_max, a_min, a_max, shape = CLASS_GEOMETRY[cls]
        for _attempt in range(20):
            w = int(rng.integers(w_min, w_max + 1))
            h = max(2, int(round(w / rng.uniform(a_min, a_max))))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            rect = (x0, y0, x0 + w, y0 + h)
            if not any(_overlaps(rect, r) for r in placed):
                break
        else:
            continue
        placed.append(rect)
        colour = np.clip(np.asarray(spec.palette[cls]) + rng.normal(0, spec.palette_std, 3), 0, 1)
        if shape == "rect":
            mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        else:
            cx, cy, r = x0 + w / 2 - 0.5, y0 + h / 2 - 0.5, w / 2
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        image[mask] = colour
        labels.append(BoxLabel(cls, ((x0 + w / 2) / size, (y0 + h / 2) / size, w / size, h / size)))
    return np.clip(image, 0.0, 1.0), labels, rng


def generate_scene(spec: DomainSpec, index: int, size: int = 64, max_objects: int = 8) -> SceneSample:
    image, labels, rng = render_clean(spec, index, size, max_objects)
    if spec.brightness != 1.0:
        image = image * spec.brightness
    if spec.blur_radius > 0:
        image = uniform_filter(image, size=(2 * spec.blur_radius + 1, 2 * spec.blur_radius + 1, 1), mode="nearest")
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SceneSample(image, labels, spec.name)


class TargetLabelLeak(RuntimeError):
    """Raised when training code reads target-domain ground truth."""


_TRAINING = contextvars.ContextVar("promptalign_training", default=False)


@contextlib.contextmanager
def training_guard():
    """Within this block, reading target-domain annotations raises."""
    token = _TRAINING.set(True)
    try:
        yield
    finally:
        _TRAINING.reset(token)


class DomainDataset:
    """Images ``[N, 3, H, W]`` plus annotations.

    Target-role annotations exist only for evaluation; any read inside
    ``training_guard`` is counted and refused.
    """

    def __init__(self, images: torch.Tensor, annotations: list[list[BoxLabel]] | None, role: str,
                 name: str = "", ids: list[int] | None = None):
        if role not in ("source", "target"):
            raise ValueError(f"role must be 'source' or 'target', got {role!r}")
        if role == "source" and annotations is None:
            raise ValueError("source datasets must be annotated")
        if annotations is not None and len(annotations) != len(images):
            raise ValueError("annotation count does not match image count")
        self.images = images
        self._annotations = annotations
        self.role = role
        self.name = name
        self.ids = list(ids) if ids is not None else list(range(len(images)))
        self.guarded_reads = 0

    def __len__(self) -> int:
        return len(self.images)

    @property
    def has_truth(self) -> bool:
        return self._annotations is not None

    def truth(self, i: int | None = None):
        """Ground truth for one sample (or all samples when ``i`` is None)."""
        if self.role == "target" and _TRAINING.get():
            self.guarded_reads += 1
            raise TargetLabelLeak(f"target annotations of {self.name!r} read during training")
        if self._annotations is None:
            raise ValueError(f"dataset {self.name!r} has no annotations")
        return self._annotations if i is None else self._annotations[i]

    def subset(self, idx: list[int], name: str | None = None) -> "DomainDataset":
        ann = None if self._annotations is None else [self._annotations[i] for i in idx]
        return DomainDataset(self.images[idx], ann, self.role, name or self.name, [self.ids[i] for i in idx])


def make_dataset(spec: DomainSpec, indices, role: str, size: int = 64, max_objects: int = 8) -> DomainDataset:
    samples = [generate_scene(spec, int(i), size, max_objects) for i in indices]
    if samples:
        images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
    else:
        images = torch.zeros(0, 3, size, size)
    return DomainDataset(images, [s.annotations for s in samples], role, spec.name, list(indices))


@dataclass
class TargetStream:
    spec: DomainSpec
    adapt: DomainDataset
    evaluation: DomainDataset


def default_target_specs(seed: int = 1000) -> list[DomainSpec]:
    """Eight shifted domains: 2 brightness x 2 noise x 2 density levels."""
    specs = []
    i = 0
    for brightness in (0.7, 0.45):
        for noise in (0.04, 0.1):
            for density in (2.0, 4.0):
                specs.append(
                    DomainSpec(
                        name=f"stream{i + 1}",
                        brightness=brightness,
                        noise_std=noise,
                        blur_radius=0,
                        object_density=density,
                        seed=seed + i,
                    )
                )
                i += 1
    return specs


def medium_shift_spec(seed: int = 2000) -> DomainSpec:
    """Single target halfway along the severity ramp of the default streams."""
    return DomainSpec(name="medium", brightness=0.55, noise_std=0.07, blur_radius=0,
                      object_density=3.0, seed=seed)


@dataclass
class BenchmarkConfig:
    image_size: int = 64
    max_objects: int = 8
    n_source: int = 400
    n_target: int = 200
    adapt_fraction: float = 0.5
    source: DomainSpec = field(default_factory=DomainSpec)
    targets: list[DomainSpec] = field(default_factory=default_target_specs)


def split_indices(n: int, adapt_fraction: float) -> tuple[list[int], list[int]]:
    """First part adapts, second part evaluates, like a chronological video split."""
    n_adapt = int(round(n * adapt_fraction))
    adapt, held = list(range(n_adapt)), list(range(n_adapt, n))
    if set(adapt) & set(held):
        raise ValueError("adaptation and evaluation splits overlap")
    return adapt, held


def build_benchmark(cfg: BenchmarkConfig) -> tuple[DomainDataset, list[TargetStream]]:
    if not cfg.targets:
        raise ValueError("benchmark needs at least one target domain")
    source = make_dataset(cfg.source, range(cfg.n_source), "source", cfg.image_size, cfg.max_objects)
    streams = []
    for spec in cfg.targets:
        adapt_idx, eval_idx = split_indices(cfg.n_target, cfg.adapt_fraction)
        adapt = make_dataset(spec, adapt_idx, "target", cfg.image_size, cfg.max_objects)
        evaluation = make_dataset(spec, eval_idx, "target", cfg.image_size, cfg.max_objects)
        streams.append(TargetStream(spec, adapt, evaluation))
    return source, streams


# ---------------------------------------------------------------- on-disk form

def save_dataset(ds: DomainDataset, directory: str | Path, split: str) -> None:
    """Raw little-endian float32 NHWC images + manifest + annotation JSON."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = ds.images.permute(0, 2, 3, 1).contiguous().numpy().astype("<f4")
    (directory / f"{split}.f32").write_bytes(images.tobytes())
    n, h, w, c = images.shape if images.size else (0, 0, 0, 3)
    manifest = {"split": split, "count": int(n), "height": int(h), "width": int(w), "channels": int(c),
                "dtype": "<f4", "layout": "NHWC", "role": ds.role, "name": ds.name, "ids": ds.ids}
    (directory / f"{split}.manifest.json").write_text(json.dumps(manifest, indent=2))
    ann = {}
    if ds.has_truth:
        ann = {str(sid): [lb.to_dict() for lb in labels] for sid, labels in zip(ds.ids, ds.truth())}
    (directory / f"{split}.annotations.json").write_text(json.dumps(ann, indent=2))


def load_dataset(directory: str | Path, split: str) -> DomainDataset:
    directory = Path(directory)
    manifest = json.loads((directory / f"{split}.manifest.json").read_text())
    if manifest.get("dtype") != "<f4" or manifest.get("layout") != "NHWC":
        raise ValueError(f"unsupported dataset layout in manifest: {manifest.get('dtype')} {manifest.get('layout')}")
    raw = (directory / f"{split}.f32").read_bytes()
    shape = (manifest["count"], manifest["height"], manifest["width"], manifest["channels"])
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ValueError(f"image file holds {len(raw)} bytes, manifest implies {expected}")
    images = np.frombuffer(raw, dtype="<f4").reshape(shape)
    ann_raw = json.loads((directory / f"{split}.annotations.json").read_text())
    ids = manifest["ids"]
    if len(ids) != shape[0]:
        raise ValueError("manifest ids do not match image count")
    annotations = None
    if ann_raw:
        missing = [sid for sid in ids if str(sid) not in ann_raw]
        if missing:
            raise ValueError(f"annotations missing for sample ids {missing[:5]}")
        annotations = [[BoxLabel.from_dict(d) for d in ann_raw[str(sid)]] for sid in ids]
    tensor = torch.from_numpy(images.copy()).permute(0, 3, 1, 2).contiguous()
    return DomainDataset(tensor, annotations, manifest["role"], manifest["name"], ids)


def with_overrides(spec: DomainSpec, **kw) -> DomainSpec:
    return replace(spec, **kw)
