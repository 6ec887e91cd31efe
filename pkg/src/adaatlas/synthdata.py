"""Synthetic nested-ellipsoid anatomy with intensity-only domain shifts.

Every subject is a pure function of ``(ShapeSpec, seed)``; every shifted
image is a pure function of ``(image, ShiftSpec, seed)``. Shifts never see
label maps, so anatomy statistics are shared by all domains.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .volumes import load_labels, load_volume, save_volume, standardize

FG_RANGE = (0.02, 0.20)


@dataclass
class ShapeSpec:
    """Sampler parameters for one subject's anatomy and its source appearance."""
    grid: int = 16
    num_classes: int = 3
    # anatomy varies modestly between subjects, as organs do after rough
    # field-of-view alignment; a wider spread blurs the atlas core
    center_jitter: float = 0.04
    outer_radii: tuple = (0.58, 0.66)
    inner_fraction: tuple = (0.6, 0.66)
    inner_offset: float = 0.03
    max_rotation: float = 0.15
    perturbation: float = 0.06
    # source appearance, pre-standardization, in (0, 1)
    levels: tuple = (0.30, 0.55, 0.80)
    distractor_level: float = 0.45
    num_distractors: int = 2
    texture: float = 0.04
    noise: float = 0.02
    blur: float = 0.6

    def __post_init__(self):
        self.outer_radii = tuple(self.outer_radii)
        self.inner_fraction = tuple(self.inner_fraction)
        self.levels = tuple(self.levels)
        if self.num_classes not in (2, 3):
            raise ValueError("num_classes must be 2 or 3")
        if len(self.levels) < self.num_classes:
            raise ValueError("need one intensity level per class")
        lo, hi = self.inner_fraction
        if not 0 < lo <= hi:
            raise ValueError("inner_fraction must be an increasing positive pair")
        # the core ellipsoid plus its offset must fit inside the smallest outer radius
        if hi * self.outer_radii[0] + self.inner_offset >= self.outer_radii[0] * (1 - self.perturbation):
            raise ValueError("inner structure would not be contained in the outer one")
        if self.grid < 4:
            raise ValueError("grid must be >= 4")

    def to_dict(self):
        # lists, so the dict survives a JSON round trip unchanged
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class ShiftSpec:
    """Appearance shift: gamma, multiplicative bias field, contrast and noise.

    Applied to a [0, 1]-rescaled image in the order gamma, bias, contrast,
    additive noise, followed by re-standardization. Contrast multiplies the
    image before noise is added, so it acts on the signal-to-noise ratio.
    """
    gamma: float = 1.0
    bias_field: float = 0.0
    noise_sigma: float = 0.0
    contrast_scale: float = 1.0

    def __post_init__(self):
        checks = [
            ("gamma", 0.4, 2.5, self.gamma),
            ("bias_field", 0.0, 0.5, self.bias_field),
            ("noise_sigma", 0.0, 0.3, self.noise_sigma),
            ("contrast_scale", 0.5, 2.0, self.contrast_scale),
        ]
        for name, lo, hi, v in checks:
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")

    @property
    def is_identity(self):
        return (self.gamma == 1.0 and self.bias_field == 0.0
                and self.noise_sigma == 0.0 and self.contrast_scale == 1.0)

    def to_dict(self):
        return asdict(self)


def _grid(n):
    ax = np.linspace(-1.0, 1.0, n)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"))


def _ellipsoid_radius(coords, center, radii, rot):
    local = np.einsum("ij,jhwd->ihwd", rot.T, coords - center[:, None, None, None])
    scaled = local / np.asarray(radii)[:, None, None, None]
    return np.sqrt((scaled ** 2).sum(axis=0)), local


def _boundary_wobble(local, rng, amplitude):
    # low-frequency modulation of the boundary as a function of direction
    norm = np.sqrt((local ** 2).sum(axis=0)) + 1e-9
    u = local / norm
    w = np.zeros_like(norm)
    for _ in range(3):
        k = rng.normal(size=3)
        k /= np.linalg.norm(k)
        freq = rng.integers(1, 3)
        phase = rng.uniform(0, 2 * np.pi)
        w += np.cos(freq * np.pi * np.einsum("i,ihwd->hwd", k, u) + phase)
    return amplitude * w / 3.0


def render_labels(spec: ShapeSpec, rng) -> np.ndarray:
    coords = _grid(spec.grid)
    center = rng.uniform(-spec.center_jitter, spec.center_jitter, size=3)
    radii = rng.uniform(*spec.outer_radii, size=3)
    rot = Rotation.from_rotvec(rng.uniform(-spec.max_rotation, spec.max_rotation, size=3)).as_matrix()
    r, local = _ellipsoid_radius(coords, center, radii, rot)
    organ = r < 1.0 + _boundary_wobble(local, rng, spec.perturbation)
    labels = organ.astype(np.int64)
    if spec.num_classes == 3:
        frac = rng.uniform(*spec.inner_fraction)
        offset = rng.uniform(-spec.inner_offset, spec.inner_offset, size=3)
        r_in, _ = _ellipsoid_radius(coords, center + offset, radii * frac, rot)
        core = (r_in < 1.0) & ndimage.binary_erosion(organ)
        labels[core] = 2
    return labels


def _distractors(spec: ShapeSpec, labels, rng):
    """Background blobs away from the organ, brighter than plain background."""
    coords = _grid(spec.grid)
    mask = np.zeros(labels.shape, dtype=bool)
    far = ndimage.distance_transform_edt(labels == 0) > 2
    for _ in range(spec.num_distractors):
        for _attempt in range(20):
            center = rng.uniform(-0.85, 0.85, size=3)
            idx = tuple(np.clip(((center + 1) / 2 * (spec.grid - 1)).round().astype(int), 0, spec.grid - 1))
            if far[idx]:
                break
        radii = rng.uniform(0.12, 0.22, size=3)
        r, _ = _ellipsoid_radius(coords, center, radii, np.eye(3))
        mask |= r < 1.0
    return mask & far


def _fg_fraction(labels):
    return float((labels > 0).mean())


def generate_subject(spec: ShapeSpec, seed: int):
    """Render ``(image, labels)``; the image is ``(1, H, W, D)`` and standardized."""
    rng = np.random.default_rng(seed)
    for _ in range(50):
        labels = render_labels(spec, rng)
        if FG_RANGE[0] <= _fg_fraction(labels) <= FG_RANGE[1]:
            break
    else:
        raise ValueError(f"could not sample an anatomy within foreground range {FG_RANGE}")
    img = np.asarray(spec.levels, dtype=np.float64)[labels]
    if spec.num_distractors:
        img[_distractors(spec, labels, rng)] = spec.distractor_level
    texture = ndimage.gaussian_filter(rng.normal(size=labels.shape), 1.5)
    texture /= np.abs(texture).max() + 1e-12
    img = img + spec.texture * texture
    if spec.blur > 0:
        img = ndimage.gaussian_filter(img, spec.blur)
    img = img + spec.noise * rng.normal(size=labels.shape)
    return standardize(img)[None], labels


def bias_field(shape, amplitude: float, seed: int) -> np.ndarray:
    """Multiplicative field ``1 + amplitude * q`` with ``q`` a quadratic polynomial, ``max|q| = 1``."""
    rng = np.random.default_rng(seed)
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    monomials = [x, y, z, x * y, x * z, y * z, x ** 2, y ** 2, z ** 2]
    coef = rng.normal(size=len(monomials))
    q = sum(c * m for c, m in zip(coef, monomials))
    q = q / (np.abs(q).max() + 1e-12)
    return 1.0 + amplitude * q


def apply_shift(x, shift: ShiftSpec, seed: int) -> np.ndarray:
    """Intensity-only domain shift of a ``(1, H, W, D)`` volume; output is re-standardized."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    y = np.ones_like(x) if hi - lo < 1e-12 else (x - lo) / (hi - lo)
    rng = np.random.default_rng(seed)
    field_seed = int(rng.integers(2 ** 31))
    y = y ** shift.gamma
    if shift.bias_field > 0:
        y = y * bias_field(x.shape[1:], shift.bias_field, field_seed)[None]
    y = y * shift.contrast_scale
    if shift.noise_sigma > 0:
        y = y + shift.noise_sigma * rng.normal(size=x.shape)
    return standardize(y)


# -- datasets ---------------------------------------------------------------

DEFAULT_SHIFTS = {
    "mild": ShiftSpec(gamma=0.7, bias_field=0.15, noise_sigma=0.02, contrast_scale=1.0),
    "medium": ShiftSpec(gamma=2.2, bias_field=0.4, noise_sigma=0.07, contrast_scale=0.65),
    "strong": ShiftSpec(gamma=2.5, bias_field=0.45, noise_sigma=0.08, contrast_scale=0.6),
}


def _seed(*keys) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


@dataclass
class DomainEntry:
    name: str
    shift: dict | None
    subjects: list  # [{"shape_seed": int, "shift_seed": int}]


@dataclass
class DatasetManifest:
    seed: int
    shape: dict
    domains: list = field(default_factory=list)

    def domain(self, name) -> DomainEntry:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(f"no domain named {name!r}")

    @property
    def domain_names(self):
        return [d.name for d in self.domains]

    def to_dict(self):
        return {"format": "aaatlas-dataset-1", "seed": self.seed, "shape": self.shape,
                "domains": [asdict(d) for d in self.domains]}

    @classmethod
    def from_dict(cls, d):
        return cls(seed=d["seed"], shape=d["shape"],
                   domains=[DomainEntry(**e) for e in d["domains"]])


def make_domains(n_source: int, n_targets_per_domain: int, domain_shifts, seed: int,
                 shape: ShapeSpec | None = None) -> DatasetManifest:
    """Build a manifest with an unshifted source domain followed by shifted targets.

    ``domain_shifts`` maps domain names to :class:`ShiftSpec` (a list is
    named ``target0, target1, ...``).
    """
    if isinstance(domain_shifts, (list, tuple)):
        domain_shifts = {f"target{i}": s for i, s in enumerate(domain_shifts)}
    if len(domain_shifts) < 1:
        raise ValueError("need at least one target domain")
    if n_source < 1 or n_targets_per_domain < 1:
        raise ValueError("domains need at least one subject")
    shape = shape or ShapeSpec()
    domains = [DomainEntry("source", None, [
        {"shape_seed": _seed(seed, 0, i), "shift_seed": 0} for i in range(n_source)
    ])]
    for k, (name, shift) in enumerate(domain_shifts.items(), start=1):
        if name == "source":
            raise ValueError("'source' is reserved for the unshifted domain")
        domains.append(DomainEntry(name, shift.to_dict(), [
            {"shape_seed": _seed(seed, k, i), "shift_seed": _seed(seed, k, i, 1)}
            for i in range(n_targets_per_domain)
        ]))
    return DatasetManifest(seed=seed, shape=shape.to_dict(), domains=domains)


def materialize(manifest: DatasetManifest, domain: str):
    """Regenerate ``(images, labels)`` lists for one domain of a manifest."""
    spec = ShapeSpec(**manifest.shape)
    entry = manifest.domain(domain)
    shift = ShiftSpec(**entry.shift) if entry.shift else None
    images, labels = [], []
    for s in entry.subjects:
        x, y = generate_subject(spec, s["shape_seed"])
        if shift is not None:
            x = apply_shift(x, shift, s["shift_seed"])
        images.append(x)
        labels.append(y)
    return images, labels


def identity_domain(manifest: DatasetManifest, n: int, name: str = "identity") -> DomainEntry:
    """Fresh unshifted subjects (target = source appearance) for no-harm checks."""
    return DomainEntry(name, ShiftSpec().to_dict(), [
        {"shape_seed": _seed(manifest.seed, 10_000, i), "shift_seed": _seed(manifest.seed, 10_000, i, 1)}
        for i in range(n)
    ])


def write_dataset(manifest: DatasetManifest, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for entry in manifest.domains:
        ddir = out / entry.name
        ddir.mkdir(exist_ok=True)
        images, labels = materialize(manifest, entry.name)
        for i, (x, y) in enumerate(zip(images, labels)):
            save_volume(ddir / f"{i:03d}_image.aavol", x.astype(np.float32))
            save_volume(ddir / f"{i:03d}_label.aavol", y[None].astype(np.uint8))
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return DatasetManifest.from_dict(json.loads(path.read_text()))


def read_domain(data_dir, name: str):
    """Load ``(images, labels)`` of one domain from a written dataset."""
    ddir = Path(data_dir) / name
    if not ddir.is_dir():
        raise FileNotFoundError(f"domain directory {ddir} missing")
    images, labels = [], []
    for img_path in sorted(ddir.glob("*_image.aavol")):
        images.append(load_volume(img_path)[:1].astype(np.float64))
        labels.append(load_labels(img_path.with_name(img_path.name.replace("_image", "_label"))))
    return images, labels
