"""Concept vocabularies, synthetic datasets, and analytic oracles.

Two data worlds are supported: 2-D isotropic Gaussian mixtures (one
component per concept) and 16x16 grayscale glyphs (one shape per concept).
Both come with closed-form or brute-force oracles: the exact mixture score
(optionally under forward-diffusion noising), the Bayes classifier, and a
template-correlation classifier for glyphs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, StructuralError

GLYPH_RESOLUTION = 16
GLYPH_DIM = GLYPH_RESOLUTION * GLYPH_RESOLUTION

KNOWN_SHAPES = ("circle", "square", "cross", "triangle", "stripes")


@dataclass(frozen=True)
class ConceptDef:
    name: str
    concept_id: int


@dataclass(frozen=True)
class ConceptVocab:
    """Ordered concept set with a reserved unconditional token.

    Concept ids are dense 0..K-1; the null token gets the distinct id K.
    """

    concepts: tuple[ConceptDef, ...]

    def __post_init__(self):
        ids = [c.concept_id for c in self.concepts]
        if ids != list(range(len(ids))):
            raise ConfigError(f"concept ids must be dense 0..K-1, got {ids}")
        names = [c.name for c in self.concepts]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate concept names: {names}")

    @property
    def size(self) -> int:
        return len(self.concepts)

    @property
    def null_id(self) -> int:
        return len(self.concepts)

    def id_of(self, name: str) -> int:
        for c in self.concepts:
            if c.name == name:
                return c.concept_id
        raise ConfigError(f"unknown concept name {name!r}; "
                          f"known: {[c.name for c in self.concepts]}")

    def name_of(self, concept_id: int) -> str:
        if concept_id == self.null_id:
            return "<null>"
        return self.concepts[concept_id].name

    def validate_id(self, concept_id: int, allow_null: bool = False) -> None:
        limit = self.size + (1 if allow_null else 0)
        if not 0 <= concept_id < limit:
            raise ConfigError(f"concept id {concept_id} out of range "
                              f"(K={self.size}, null={self.null_id})")

    @staticmethod
    def from_names(names: Sequence[str]) -> "ConceptVocab":
        return ConceptVocab(tuple(ConceptDef(n, i) for i, n in enumerate(names)))


@dataclass(frozen=True)
class PointMixtureSpec:
    """Isotropic 2-D Gaussian mixture, one component per concept."""

    means: tuple[tuple[float, float], ...]
    sigma: float
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.means) == 0:
            raise ConfigError("mixture needs at least one component")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if len(self.weights) != len(self.means):
            raise ConfigError("one weight per component required")
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ConfigError(f"weights must sum to 1, got {sum(self.weights)!r}")
        if any(w < 0 for w in self.weights):
            raise ConfigError("weights must be non-negative")

    @property
    def n_components(self) -> int:
        return len(self.means)

    def mean_array(self) -> np.ndarray:
        return np.asarray(self.means, dtype=np.float64)


@dataclass(frozen=True)
class GlyphSpec:
    """16x16 glyph renderer config: one shape kind per concept.

    Jitter ranges are symmetric: position offsets in [-jitter_pos, jitter_pos]
    pixels, scale factors in [1-jitter_scale, 1+jitter_scale]. Rendered
    intensity is drawn uniformly from [intensity_low, intensity_high].
    """

    shape_kinds: tuple[str, ...]
    jitter_pos: float = 1.0
    jitter_scale: float = 0.10
    intensity_low: float = 0.75
    intensity_high: float = 1.0
    resolution: int = GLYPH_RESOLUTION

    def __post_init__(self):
        for kind in self.shape_kinds:
            if kind not in KNOWN_SHAPES:
                raise ConfigError(f"unknown shape kind {kind!r}; known: {KNOWN_SHAPES}")
        if self.resolution != GLYPH_RESOLUTION:
            raise ConfigError(f"glyph resolution is fixed at {GLYPH_RESOLUTION}")
        if not 0.0 <= self.intensity_low <= self.intensity_high <= 1.0:
            raise ConfigError("intensity range must satisfy 0 <= low <= high <= 1")
        if self.jitter_pos < 0 or self.jitter_scale < 0:
            raise ConfigError("jitter ranges must be non-negative")

    @property
    def n_concepts(self) -> int:
        return len(self.shape_kinds)


@dataclass
class Dataset:
    """Labeled sample matrix; d=2 for points2d, d=256 for glyphs16."""

    samples: np.ndarray
    labels: np.ndarray
    mode: str
    n_concepts: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.shape[0]:
            raise StructuralError("samples and labels must align")
        if self.labels.size and self.labels.max() >= self.n_concepts:
            raise StructuralError("label exceeds concept count")

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def of_concept(self, concept_id: int) -> np.ndarray:
        return self.samples[self.labels == concept_id]


def default_points_vocab(n_concepts: int = 8, radius: float = 1.0,
                         sigma: float = 0.15) -> tuple[ConceptVocab, PointMixtureSpec]:
    """Equal-weight concepts with means on a circle; well-separated so that
    erasure-rate changes are attributable to fine-tuning, not oracle confusion."""
    if n_concepts < 1:
        raise ConfigError("need at least one concept")
    vocab = ConceptVocab.from_names([f"c{i}" for i in range(n_concepts)])
    angles = 2.0 * np.pi * np.arange(n_concepts) / n_concepts
    means = tuple((radius * float(np.cos(a)), radius * float(np.sin(a))) for a in angles)
    weights = tuple([1.0 / n_concepts] * n_concepts)
    return vocab, PointMixtureSpec(means=means, sigma=sigma, weights=weights)


def default_glyph_vocab(shapes: Sequence[str] = KNOWN_SHAPES,
                        **kwargs) -> tuple[ConceptVocab, GlyphSpec]:
    vocab = ConceptVocab.from_names(list(shapes))
    return vocab, GlyphSpec(shape_kinds=tuple(shapes), **kwargs)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def gen_points2d(spec: PointMixtureSpec, n_per_concept: int, seed: int) -> Dataset:
    """Draw n_per_concept i.i.d. points from each labeled component."""
    if n_per_concept < 1:
        raise ConfigError(f"n_per_concept must be >= 1, got {n_per_concept}")
    rng = np.random.default_rng(seed)
    means = spec.mean_array()
    k = spec.n_components
    samples = np.empty((k * n_per_concept, 2), dtype=np.float64)
    labels = np.empty(k * n_per_concept, dtype=np.int64)
    for i in range(k):
        block = slice(i * n_per_concept, (i + 1) * n_per_concept)
        samples[block] = means[i] + spec.sigma * rng.standard_normal((n_per_concept, 2))
        labels[block] = i
    return Dataset(samples, labels, mode="points2d", n_concepts=k)


def _shape_mask(kind: str, cx: float, cy: float, scale: float,
                resolution: int = GLYPH_RESOLUTION) -> np.ndarray:
    """Soft-edged shape indicator in [0,1] on the pixel grid."""
    ys, xs = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    soft = 1.0  # edge softness in pixels; keeps data smooth for diffusion

    if kind == "circle":
        dist = np.hypot(dx, dy) - 5.0 * scale
    elif kind == "square":
        dist = np.maximum(np.abs(dx), np.abs(dy)) - 4.2 * scale
    elif kind == "cross":
        bar_v = np.maximum(np.abs(dx) - 1.6 * scale, np.abs(dy) - 5.4 * scale)
        bar_h = np.maximum(np.abs(dy) - 1.6 * scale, np.abs(dx) - 5.4 * scale)
        dist = np.minimum(bar_v, bar_h)
    elif kind == "triangle":
        # upward triangle: three half-plane distances, apex at top
        h = 5.2 * scale
        d_base = dy - h * 0.8                      # below the base
        d_left = (-dy * 0.5 - dx * 0.866) - h * 0.5
        d_right = (-dy * 0.5 + dx * 0.866) - h * 0.5
        dist = np.maximum(d_base, np.maximum(d_left, d_right))
    elif kind == "stripes":
        # fixed-frequency horizontal stripes: scale jitter does not apply,
        # position jitter shifts the phase; returns the smooth pattern directly
        return 0.5 + 0.5 * np.cos(2.0 * np.pi * dy / 5.0)
    else:
        raise ConfigError(f"unknown shape kind {kind!r}")
    return np.clip(0.5 - dist / soft, 0.0, 1.0)


def canonical_template(spec: GlyphSpec, concept_id: int) -> np.ndarray:
    """Deterministic centered glyph at nominal scale and peak intensity."""
    if not 0 <= concept_id < spec.n_concepts:
        raise ConfigError(f"concept id {concept_id} out of range")
    center = (spec.resolution - 1) / 2.0
    mask = _shape_mask(spec.shape_kinds[concept_id], center, center, 1.0, spec.resolution)
    return (spec.intensity_high * mask).reshape(-1)


def gen_glyphs(spec: GlyphSpec, n_per_concept: int, seed: int) -> Dataset:
    """Render jittered glyphs; each sample is a flattened image in [0,1]^256."""
    if n_per_concept < 1:
        raise ConfigError(f"n_per_concept must be >= 1, got {n_per_concept}")
    rng = np.random.default_rng(seed)
    k = spec.n_concepts
    center = (spec.resolution - 1) / 2.0
    samples = np.empty((k * n_per_concept, GLYPH_DIM), dtype=np.float64)
    labels = np.empty(k * n_per_concept, dtype=np.int64)
    row = 0
    for i in range(k):
        for _ in range(n_per_concept):
            dx, dy = rng.uniform(-spec.jitter_pos, spec.jitter_pos, size=2)
            scale = rng.uniform(1.0 - spec.jitter_scale, 1.0 + spec.jitter_scale)
            amp = rng.uniform(spec.intensity_low, spec.intensity_high)
            mask = _shape_mask(spec.shape_kinds[i], center + dx, center + dy,
                               scale, spec.resolution)
            samples[row] = np.clip(amp * mask, 0.0, 1.0).reshape(-1)
            labels[row] = i
            row += 1
    return Dataset(samples, labels, mode="glyphs16", n_concepts=k)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def _noised_params(spec: PointMixtureSpec, alpha_bar: float | None):
    """Component means/variance of the mixture after forward diffusion.

    Convolving each component with the diffusion Gaussian at level a=alpha_bar
    gives means sqrt(a)*mu and isotropic variance a*sigma^2 + (1-a).
    """
    means = spec.mean_array()
    if alpha_bar is None:
        return means, spec.sigma ** 2
    if not 0.0 < alpha_bar <= 1.0:
        raise ConfigError(f"alpha_bar must lie in (0, 1], got {alpha_bar}")
    return np.sqrt(alpha_bar) * means, alpha_bar * spec.sigma ** 2 + (1.0 - alpha_bar)


def mixture_log_density_grad(spec: PointMixtureSpec, x: np.ndarray,
                             alpha_bar: float | None = None) -> np.ndarray:
    """Exact score of the (optionally noised) mixture at x.

    grad log p(x) = sum_k r_k(x) * (mu_k - x) / var with posterior
    responsibilities r_k computed in log space.
    """
    x = np.asarray(x, dtype=np.float64)
    means, var = _noised_params(spec, alpha_bar)
    diff = x[None, :] - means                      # (K, 2)
    log_w = np.log(np.maximum(np.asarray(spec.weights), 1e-300))
    log_comp = log_w - (diff ** 2).sum(axis=1) / (2.0 * var)
    resp = np.exp(log_comp - logsumexp(log_comp))
    return -(resp[:, None] * diff).sum(axis=0) / var


def bayes_classify(spec: PointMixtureSpec, x: np.ndarray) -> tuple[int, np.ndarray]:
    """Posterior over components at x; argmax id, ties broken by lowest id."""
    x = np.asarray(x, dtype=np.float64)
    means, var = _noised_params(spec, None)
    diff = x[None, :] - means
    log_w = np.log(np.maximum(np.asarray(spec.weights), 1e-300))
    log_comp = log_w - (diff ** 2).sum(axis=1) / (2.0 * var)
    posterior = np.exp(log_comp - logsumexp(log_comp))
    posterior /= posterior.sum()
    return int(np.argmax(posterior)), posterior


TEMPLATE_SEARCH_RADIUS = 2


def template_classify(spec: GlyphSpec, image: np.ndarray) -> tuple[int, float]:
    """Best-matching concept by centered normalized cross-correlation.

    The correlation is alignment-searched: per template, the maximum over
    integer displacements within +-TEMPLATE_SEARCH_RADIUS pixels (cyclic),
    so position jitter does not defeat recognition. Confidence rescales the
    winning NCC from [-1,1] to [0,1]; degenerate (constant) images get
    confidence 0 so evaluation loops stay total.
    """
    image = np.asarray(image, dtype=np.float64).reshape(-1)
    if image.shape[0] != spec.resolution ** 2:
        raise StructuralError(f"expected a flattened {spec.resolution}x{spec.resolution} "
                              f"image, got length {image.shape[0]}")
    centered = image - image.mean()
    norm = np.linalg.norm(centered)
    if norm == 0.0:
        return 0, 0.0
    img2 = centered.reshape(spec.resolution, spec.resolution)
    r = TEMPLATE_SEARCH_RADIUS
    best_id, best_ncc = 0, -np.inf
    for cid in range(spec.n_concepts):
        tmpl = canonical_template(spec, cid).reshape(spec.resolution, spec.resolution)
        for sy in range(-r, r + 1):
            for sx in range(-r, r + 1):
                shifted = np.roll(np.roll(tmpl, sy, axis=0), sx, axis=1)
                t_centered = shifted - shifted.mean()
                t_norm = np.linalg.norm(t_centered)
                ncc = float((img2 * t_centered).sum() / (norm * t_norm))
                if ncc > best_ncc:
                    best_id, best_ncc = cid, ncc
    return best_id, (best_ncc + 1.0) / 2.0


def bayes_oracle(spec: PointMixtureSpec) -> Callable[[np.ndarray], tuple[int, float]]:
    """Classifier closure returning (label, max-posterior confidence)."""
    def classify(x: np.ndarray) -> tuple[int, float]:
        label, posterior = bayes_classify(spec, x)
        return label, float(posterior[label])
    return classify


def template_oracle(spec: GlyphSpec) -> Callable[[np.ndarray], tuple[int, float]]:
    def classify(image: np.ndarray) -> tuple[int, float]:
        return template_classify(spec, image)
    return classify


def bayes_rate_quadrature(spec: PointMixtureSpec, extent: float = 2.5,
                          n_grid: int = 501) -> float:
    """Bayes accuracy of the mixture by 2-D Riemann quadrature (independent
    of bayes_classify's code path)."""
    means, var = _noised_params(spec, None)
    lo = means.min() - extent
    hi = means.max() + extent
    axis = np.linspace(lo, hi, n_grid)
    h = axis[1] - axis[0]
    xs, ys = np.meshgrid(axis, axis)
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    weights = np.asarray(spec.weights)
    dens = np.empty((spec.n_components, grid.shape[0]))
    for k in range(spec.n_components):
        d2 = ((grid - means[k]) ** 2).sum(axis=1)
        dens[k] = weights[k] * np.exp(-d2 / (2 * var)) / (2 * np.pi * var)
    return float(dens.max(axis=0).sum() * h * h)


# ---------------------------------------------------------------------------
# CSV persistence for datasets (header: label,x0..x{d-1})
# ---------------------------------------------------------------------------

def dataset_to_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"x{i}" for i in range(dataset.dim)])
        for label, row in zip(dataset.labels, dataset.samples):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def dataset_from_csv(path, mode: str, n_concepts: int) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label":
            raise ConfigError(f"{path}: expected dataset header starting with 'label'")
        rows = list(reader)
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    samples = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    return Dataset(samples, labels, mode=mode, n_concepts=n_concepts)
