"""Synthetic class taxonomy and sample rendering.

Classes come in groups that share appearance attributes (a texture
frequency band and a base hue) while differing in per-class attributes
(polygon corner count and size range).  Classes of the same group
therefore produce genuinely similar embeddings - the property the
hyperclass machinery exists to exploit - while classes from different
groups stay visually distinct.

A sample is one textured polygon on a noise background; the mask marks
the polygon exactly.  Rendering is deterministic per (class, seed) and
quantizes to a 16-bit grid so the in-memory values round-trip exactly
through the text image format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUANT = 65535

# distinct base hues, one per group (extend `hues` in the spec for more)
_PALETTE = [
    (1.00, 0.35, 0.25),
    (0.30, 1.00, 0.35),
    (0.30, 0.45, 1.00),
    (1.00, 0.95, 0.30),
    (1.00, 0.40, 1.00),
    (0.40, 1.00, 1.00),
]


class TaxonomyError(ValueError):
    """Infeasible taxonomy specification."""


class RenderError(RuntimeError):
    """Repeated degenerate geometry while rendering a sample."""


@dataclass
class TaxonomySpec:
    groups: int = 4
    classes_per_group: int = 4
    image_size: int = 32
    channels: int = 3
    freq_bands: list[tuple[float, float]] | None = None  # cycles per image, per group
    hues: list[tuple[float, float, float]] | None = None
    size_range: tuple[float, float] = (0.22, 0.42)  # polygon radius / image size
    min_corners: int = 3

    def resolved_bands(self) -> list[tuple[float, float]]:
        if self.freq_bands is not None:
            bands = self.freq_bands
        else:
            # evenly spaced disjoint bands; several texture periods fit any
            # valid object so per-sample statistics stay stable
            lo, hi, gap = 5.0, 15.0, 0.5
            width = (hi - lo - gap * (self.groups - 1)) / self.groups
            if width <= 0:
                raise TaxonomyError(f"cannot fit {self.groups} disjoint frequency bands")
            bands = [(lo + g * (width + gap), lo + g * (width + gap) + width) for g in range(self.groups)]
        if len(bands) != self.groups:
            raise TaxonomyError("one frequency band per group required")
        for a in range(len(bands)):
            for b in range(a + 1, len(bands)):
                if not (bands[a][1] < bands[b][0] or bands[b][1] < bands[a][0]):
                    raise TaxonomyError(f"frequency bands {a} and {b} overlap")
        return bands

    def resolved_hues(self) -> list[tuple[float, float, float]]:
        hues = self.hues if self.hues is not None else _PALETTE[: self.groups]
        if len(hues) < self.groups:
            raise TaxonomyError(f"need {self.groups} hues, have {len(hues)}")
        if len(set(hues[: self.groups])) != self.groups:
            raise TaxonomyError("group hues must be distinct")
        return list(hues[: self.groups])


@dataclass
class ClassDef:
    class_id: int
    group_id: int
    freq: float  # texture frequency, cycles per image
    hue: tuple[float, float, float]
    tex_angle: float  # class-fixed texture orientation (radians)
    corners: int
    size_lo: float  # radius bounds as fraction of image size
    size_hi: float


@dataclass
class Taxonomy:
    spec: TaxonomySpec
    classes: list[ClassDef] = field(default_factory=list)

    def by_id(self, class_id: int) -> ClassDef:
        return self.classes[class_id]

    def group_of(self, class_id: int) -> int:
        return self.classes[class_id].group_id


def generate_taxonomy(seed: int, spec: TaxonomySpec) -> Taxonomy:
    """Deterministically lay out G*L class definitions.

    Within a group, classes take distinct frequency slots inside the
    group band, distinct texture orientations, distinct corner counts,
    and distinct size sub-ranges; slot pairings are shuffled per group
    so the distinct attributes do not correlate trivially.
    """
    bands = spec.resolved_bands()
    hues = spec.resolved_hues()
    rng = np.random.default_rng(seed)
    l = spec.classes_per_group
    s_lo, s_hi = spec.size_range
    if s_hi <= s_lo or s_hi >= 0.47:
        raise TaxonomyError(f"unusable size range {spec.size_range}")
    classes = []
    for g in range(spec.groups):
        lo, hi = bands[g]
        size_perm = rng.permutation(l)
        angle_perm = rng.permutation(l)
        for i in range(l):
            freq = lo + (i + 0.5) * (hi - lo) / l
            k = int(size_perm[i])
            classes.append(
                ClassDef(
                    class_id=g * l + i,
                    group_id=g,
                    freq=float(freq),
                    hue=hues[g],
                    tex_angle=float(angle_perm[i]) * np.pi / l,
                    corners=spec.min_corners + i,
                    size_lo=s_lo + k * (s_hi - s_lo) / l,
                    size_hi=s_lo + (k + 1) * (s_hi - s_lo) / l,
                )
            )
    return Taxonomy(spec, classes)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _polygon_mask(size: int, cx: float, cy: float, radii: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Even-odd rasterization of a star-convex polygon at pixel centers."""
    xs = radii * np.cos(angles) + cx
    ys = radii * np.sin(angles) + cy
    px, py = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="xy")
    inside = np.zeros((size, size), dtype=bool)
    n = len(xs)
    for k in range(n):
        x1, y1 = xs[k], ys[k]
        x2, y2 = xs[(k + 1) % n], ys[(k + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < x_at)
    return inside.T  # row-major (i=row=y, j=col=x)


def render_sample(class_def: ClassDef, seed: int, image_size: int = 32):
    """One textured polygon on a noise background; mask marks it exactly.

    Returns (image (3, S, S) float64 on the 16-bit grid, mask (S, S) uint8).
    Degenerate geometry (too small, or invisible at feature resolution)
    retries with the next sub-seed; persistent failure raises.
    """
    s = image_size
    for attempt in range(100):
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, attempt])
        r = rng.uniform(class_def.size_lo, class_def.size_hi) * s
        margin = r + 1.0
        if 2 * margin >= s:
            raise RenderError(f"object radius {r:.1f} cannot fit in a {s}px image")
        cx = rng.uniform(margin, s - margin)
        cy = rng.uniform(margin, s - margin)
        theta = rng.uniform(0, 2 * np.pi)
        n = class_def.corners
        angles = theta + 2 * np.pi * np.arange(n) / n
        radii = r * rng.uniform(0.85, 1.0, size=n)
        mask = _polygon_mask(s, cx, cy, radii, angles)
        # must survive nearest-neighbor downsampling to feature resolution
        if mask.sum() >= 16 and mask[::4, ::4].sum() >= 1:
            break
    else:
        raise RenderError(f"no valid geometry for class {class_def.class_id} seed {seed}")

    # oriented sinusoid texture: the class's frequency slot and base
    # orientation, with a small per-sample orientation wobble
    tex_angle = class_def.tex_angle + rng.uniform(-0.15, 0.15)
    phase = rng.uniform(0, 2 * np.pi)
    ii, jj = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    wave = (jj * np.cos(tex_angle) + ii * np.sin(tex_angle)) * class_def.freq / s
    tex = 0.5 + 0.45 * np.sin(2 * np.pi * wave + phase)

    img = rng.uniform(0.25, 0.75, size=(3, s, s))  # hueless noise background
    for c, h in enumerate(class_def.hue):
        img[c][mask] = tex[mask] * h
    img = np.round(img * QUANT) / QUANT
    return img, mask.astype(np.uint8)


def attribute_vector(c: ClassDef, spec: TaxonomySpec) -> np.ndarray:
    """Normalized attribute coordinates for distance computations."""
    bands = spec.resolved_bands()
    f_lo = min(b[0] for b in bands)
    f_hi = max(b[1] for b in bands)
    return np.array(
        [
            (c.freq - f_lo) / (f_hi - f_lo),
            *c.hue,
            c.tex_angle / np.pi,
            (c.corners - spec.min_corners) / max(1, spec.classes_per_group - 1),
            ((c.size_lo + c.size_hi) / 2 - spec.size_range[0])
            / (spec.size_range[1] - spec.size_range[0]),
        ]
    )
