"""Random cascaded image transforms and correspondence bookkeeping.

A sampled transform is the composition of a photometric stage (gray
inversion, Gaussian blur, additive Gaussian noise, applied to pixel values
in that order) followed by a geometric stage (flip / 90-degree rotation /
quadrilateral projection / rotation / scaling, all folded into a single
3x3 homography). Applying the photometric stage first and the geometric
warp second keeps the ground-truth pixel mapping between the original and
the augmented image exactly equal to the geometric homography.

Coordinate convention used throughout the package: the pixel at array
position ``(row i, col j)`` has continuous image coordinates
``(x, y) = (j + 0.5, i + 0.5)``, so an ``H x W`` image occupies the
rectangle ``[0, W] x [0, H]`` and its center is ``(W / 2, H / 2)``.
Homographies act on homogeneous ``(x, y, 1)`` coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage


class TransformConfigError(ValueError):
    """Raised for invalid transform ranges or degenerate direct inputs."""


@dataclass(frozen=True)
class TransformConfig:
    """Sampling ranges for the random transform cascade.

    Defaults follow the training augmentation used for co-registered pairs:
    scale in [1, 1.2], rotation in [-10, 10] degrees, corner projection
    offsets in [0, 0.2] of the image size, random flips and 90-degree
    rotations, plus additive noise of variance 0.01, a sigma-1 Gaussian
    blur, and gray inversion above a random threshold.
    """

    scale_range: tuple[float, float] = (1.0, 1.2)
    rotation_range: tuple[float, float] = (-10.0, 10.0)
    quad_ratio: float = 0.2
    flip_prob: float = 0.5
    rot90: bool = True
    noise_std: float = 0.1
    blur_sigma: float = 1.0
    invert_prob: float = 0.5
    invert_threshold_range: tuple[float, float] = (0.3, 0.7)

    def validate(self) -> None:
        for name in ("scale_range", "rotation_range", "invert_threshold_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise TransformConfigError(f"{name} has min > max: ({lo}, {hi})")
        if self.quad_ratio < 0:
            raise TransformConfigError(f"quad_ratio must be >= 0, got {self.quad_ratio}")
        if self.noise_std < 0 or self.blur_sigma < 0:
            raise TransformConfigError("noise_std and blur_sigma must be >= 0")
        if not 0 <= self.flip_prob <= 1 or not 0 <= self.invert_prob <= 1:
            raise TransformConfigError("flip_prob and invert_prob must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "TransformConfig":
        """Config whose samples are always the identity transform."""
        return cls(
            scale_range=(1.0, 1.0),
            rotation_range=(0.0, 0.0),
            quad_ratio=0.0,
            flip_prob=0.0,
            rot90=False,
            noise_std=0.0,
            blur_sigma=0.0,
            invert_prob=0.0,
        )


@dataclass(frozen=True)
class GeometricParams:
    """Parameters of the geometric stage.

    ``quad_offsets`` holds four (dx, dy) corner displacements as fractions
    of (W, H); each corner of the image rectangle is moved inward by its
    offset before the projective fit, so offsets in [0, ratio] with
    ratio < 0.5 always yield a convex quadrilateral.
    """

    scale: float = 1.0
    rotation: float = 0.0
    quad_offsets: np.ndarray = field(default_factory=lambda: np.zeros((4, 2)))
    flip: bool = False
    rot90: int = 0

    def __post_init__(self):
        object.__setattr__(self, "quad_offsets", np.asarray(self.quad_offsets, dtype=float))
        if self.quad_offsets.shape != (4, 2):
            raise TransformConfigError("quad_offsets must have shape (4, 2)")
        if self.rot90 not in (0, 90, 180, 270):
            raise TransformConfigError(f"rot90 must be one of 0/90/180/270, got {self.rot90}")


@dataclass(frozen=True)
class PhotometricParams:
    """Parameters of the photometric stage (inversion, blur, noise)."""

    noise_std: float = 0.1
    blur_sigma: float = 1.0
    invert_threshold: float = 0.5
    invert_enabled: bool = False

    def __post_init__(self):
        if self.noise_std < 0 or self.blur_sigma < 0:
            raise TransformConfigError("noise_std and blur_sigma must be >= 0")
        if not 0.0 <= self.invert_threshold <= 1.0:
            raise TransformConfigError("invert_threshold must lie in [0, 1]")


class Homography:
    """A 3x3 projective map on homogeneous (x, y, 1) pixel coordinates.

    The stored matrix is normalized so its bottom-right entry is 1 and is
    checked to be invertible.
    """

    __slots__ = ("matrix",)

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix, dtype=float)
        if m.shape != (3, 3):
            raise TransformConfigError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) < 1e-12:
            raise TransformConfigError("homography has (2,2) entry ~ 0, cannot normalize")
        if m[2, 2] != 1.0:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise TransformConfigError("homography is not invertible")
        self.matrix = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 2) array of (x, y) points. Returns an (N, 2) array."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ones = np.ones((pts.shape[0], 1))
        h = np.hstack([pts, ones]) @ self.matrix.T
        return h[:, :2] / h[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix)

    def is_identity(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.matrix - np.eye(3)) <= tol))

    def __repr__(self):
        return f"Homography({self.matrix!r})"


@dataclass(frozen=True)
class CorrespondenceMap:
    """Ground-truth pixel mapping from a source image to a target image.

    ``forward`` is None for the identity mapping of aligned pairs;
    otherwise it is the homography sending source (x, y) to target (x, y).
    ``valid`` reports which mapped points land inside the target bounds.
    """

    kind: str  # one of {"identity", "homography", "composed"}
    forward: Homography | None
    source_size: tuple[int, int]  # (H, W)
    target_size: tuple[int, int]

    @classmethod
    def identity(cls, size: tuple[int, int]) -> "CorrespondenceMap":
        return cls(kind="identity", forward=None, source_size=size, target_size=size)

    @classmethod
    def from_homography(
        cls,
        h: Homography,
        source_size: tuple[int, int],
        target_size: tuple[int, int] | None = None,
        kind: str = "homography",
    ) -> "CorrespondenceMap":
        if target_size is None:
            target_size = source_size
        if h.is_identity():
            return cls(kind="identity", forward=None, source_size=source_size, target_size=target_size)
        return cls(kind=kind, forward=h, source_size=source_size, target_size=target_size)

    @property
    def matrix(self) -> np.ndarray:
        return np.eye(3) if self.forward is None else self.forward.matrix

    def valid(self, points: np.ndarray) -> np.ndarray:
        """In-bounds predicate on target coordinates (closed rectangle)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        h, w = self.target_size
        return (
            (pts[:, 0] >= 0.0)
            & (pts[:, 0] <= float(w))
            & (pts[:, 1] >= 0.0)
            & (pts[:, 1] <= float(h))
        )

    def inverse(self) -> "CorrespondenceMap":
        if self.forward is None:
            return CorrespondenceMap(
                kind="identity", forward=None,
                source_size=self.target_size, target_size=self.source_size,
            )
        return CorrespondenceMap(
            kind=self.kind, forward=self.forward.inverse(),
            source_size=self.target_size, target_size=self.source_size,
        )


@dataclass(frozen=True)
class TransformSpec:
    """A fully sampled transform: parameters plus the derived homography.

    ``seed`` feeds the apply-time randomness (the additive noise field),
    so a spec alone reproduces the augmented image bit for bit.
    """

    geometric: GeometricParams
    photometric: PhotometricParams
    homography: Homography
    seed: int

    def noise_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def to_record(self) -> str:
        """Serialize to a flat key = value text record."""
        g, p = self.geometric, self.photometric
        lines = [
            f"seed = {self.seed}",
            f"scale = {float(g.scale)!r}",
            f"rotation = {float(g.rotation)!r}",
            "quad_offsets = " + " ".join(repr(float(v)) for v in g.quad_offsets.ravel()),
            f"flip = {int(g.flip)}",
            f"rot90 = {g.rot90}",
            f"noise_std = {float(p.noise_std)!r}",
            f"blur_sigma = {float(p.blur_sigma)!r}",
            f"invert_threshold = {float(p.invert_threshold)!r}",
            f"invert_enabled = {int(p.invert_enabled)}",
            "homography = " + " ".join(repr(float(v)) for v in self.homography.matrix.ravel()),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_record(cls, text: str) -> "TransformSpec":
        kv = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        g = GeometricParams(
            scale=float(kv["scale"]),
            rotation=float(kv["rotation"]),
            quad_offsets=np.array([float(v) for v in kv["quad_offsets"].split()]).reshape(4, 2),
            flip=bool(int(kv["flip"])),
            rot90=int(kv["rot90"]),
        )
        p = PhotometricParams(
            noise_std=float(kv["noise_std"]),
            blur_sigma=float(kv["blur_sigma"]),
            invert_threshold=float(kv["invert_threshold"]),
            invert_enabled=bool(int(kv["invert_enabled"])),
        )
        h = Homography(np.array([float(v) for v in kv["homography"].split()]).reshape(3, 3))
        return cls(geometric=g, photometric=p, homography=h, seed=int(kv["seed"]))


# ---------------------------------------------------------------------------
# homography construction
# ---------------------------------------------------------------------------

def _translation(tx: float, ty: float) -> np.ndarray:
    m = np.eye(3)
    m[0, 2] = tx
    m[1, 2] = ty
    return m


def _about_center(m2: np.ndarray, center: tuple[float, float]) -> np.ndarray:
    """Lift a 2x2 linear map to a homography acting about ``center``."""
    cx, cy = center
    m = np.eye(3)
    m[:2, :2] = m2
    return _translation(cx, cy) @ m @ _translation(-cx, -cy)


def _rotation2(degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def _quad_homography(offsets: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Projective map moving each image corner inward by its offset.

    Corners are ordered top-left, top-right, bottom-right, bottom-left.
    Offsets are fractions of (W, H) and are applied with signs pointing
    into the image, so nonnegative offsets below 0.5 keep the target
    quadrilateral convex.
    """
    if not np.any(offsets):
        return np.eye(3)
    h, w = image_size
    src = np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])
    signs = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    dst = src + signs * offsets * np.array([w, h])
    _check_convex(dst)
    # direct linear transform with h33 fixed to 1
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * k] = u
        b[2 * k + 1] = v
    try:
        coeffs = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise TransformConfigError(f"degenerate quad offsets {offsets.tolist()}") from exc
    return np.append(coeffs, 1.0).reshape(3, 3)


def _check_convex(quad: np.ndarray) -> None:
    crosses = []
    for k in range(4):
        a = quad[(k + 1) % 4] - quad[k]
        b = quad[(k + 2) % 4] - quad[(k + 1) % 4]
        crosses.append(a[0] * b[1] - a[1] * b[0])
    crosses = np.array(crosses)
    if np.any(crosses == 0) or not (np.all(crosses > 0) or np.all(crosses < 0)):
        raise TransformConfigError("quad corners are degenerate or self-intersecting")


def geometric_factors(geometric: GeometricParams, image_size: tuple[int, int]) -> list[np.ndarray]:
    """The geometric stack as separate matrices, innermost (applied first) last.

    Order applied to a point: flip, 90-degree rotation, quadrilateral
    projection, rotation, scaling; every factor acts about the image center.
    """
    h, w = image_size
    center = (w / 2.0, h / 2.0)
    factors = []
    factors.append(_about_center(np.diag([geometric.scale, geometric.scale]), center))
    factors.append(_about_center(_rotation2(geometric.rotation), center))
    factors.append(_quad_homography(geometric.quad_offsets, image_size))
    if geometric.rot90:
        factors.append(_about_center(_rotation2(float(geometric.rot90)), center))
    if geometric.flip:
        factors.append(_about_center(np.diag([-1.0, 1.0]), center))
    return factors


def compose_homography(geometric: GeometricParams, image_size: tuple[int, int]) -> Homography:
    """Compose the geometric stack into one homography.

    Equivalent to applying, in order, flip, 90-degree rotation, quad
    projection, rotation and scaling about the image center; the returned
    matrix is the product scale @ rotate @ quad (@ rot90 @ flip).
    """
    m = np.eye(3)
    for factor in geometric_factors(geometric, image_size):
        m = m @ factor
    return Homography(m)


def sample_transform(
    rng: np.random.Generator,
    config: TransformConfig,
    image_size: tuple[int, int],
) -> TransformSpec:
    """Draw a TransformSpec from ``config`` ranges using ``rng``.

    The draw order is fixed, so a seeded generator reproduces the spec
    exactly. ``image_size`` is (H, W) and both must be >= 8.
    """
    config.validate()
    h, w = image_size
    if h < 8 or w < 8:
        raise TransformConfigError(f"image size must be at least 8x8, got {image_size}")
    geometric = GeometricParams(
        scale=float(rng.uniform(*config.scale_range)),
        rotation=float(rng.uniform(*config.rotation_range)),
        quad_offsets=rng.uniform(0.0, config.quad_ratio, size=(4, 2)) if config.quad_ratio > 0
        else np.zeros((4, 2)),
        flip=bool(rng.random() < config.flip_prob),
        rot90=int(rng.integers(4)) * 90 if config.rot90 else 0,
    )
    photometric = PhotometricParams(
        noise_std=config.noise_std,
        blur_sigma=config.blur_sigma,
        invert_threshold=float(rng.uniform(*config.invert_threshold_range)),
        invert_enabled=bool(rng.random() < config.invert_prob),
    )
    seed = int(rng.integers(2**63))
    return TransformSpec(
        geometric=geometric,
        photometric=photometric,
        homography=compose_homography(geometric, image_size),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------

def apply_geometric(
    image: np.ndarray,
    h: Homography,
    out_size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Warp ``image`` by ``h`` via inverse mapping with bilinear sampling.

    Output pixels whose preimage falls outside the source are 0. Values
    stay in [0, 1]. Accepts (H, W) grayscale or (H, W, 3) arrays.
    """
    image = np.asarray(image, dtype=float)
    if image.size == 0:
        raise TransformConfigError("empty image")
    if out_size is None:
        out_size = image.shape[:2]
    oh, ow = out_size
    inv = h.inverse().matrix
    jj, ii = np.meshgrid(np.arange(ow), np.arange(oh))
    x = jj + 0.5
    y = ii + 0.5
    denom = inv[2, 0] * x + inv[2, 1] * y + inv[2, 2]
    xs = (inv[0, 0] * x + inv[0, 1] * y + inv[0, 2]) / denom
    ys = (inv[1, 0] * x + inv[1, 1] * y + inv[1, 2]) / denom
    coords = np.stack([ys - 0.5, xs - 0.5])
    if image.ndim == 2:
        out = ndimage.map_coordinates(image, coords, order=1, mode="grid-constant", cval=0.0)
    else:
        out = np.stack(
            [ndimage.map_coordinates(image[..., c], coords, order=1, mode="grid-constant", cval=0.0)
             for c in range(image.shape[2])],
            axis=-1,
        )
    return np.clip(out, 0.0, 1.0)


def apply_photometric(
    image: np.ndarray,
    params: PhotometricParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """Apply gray inversion, Gaussian blur and additive noise, in that order.

    Inversion replaces v by 1 - v wherever v > invert_threshold. The blur
    kernel is normalized to unit sum and truncated at 3 sigma. Noise is
    i.i.d. Normal(0, noise_std**2) drawn from ``rng``. The result is
    clamped to [0, 1].
    """
    out = np.asarray(image, dtype=float)
    if out.min() < 0.0 or out.max() > 1.0:
        raise TransformConfigError("image values must lie in [0, 1]")
    if params.invert_enabled:
        out = np.where(out > params.invert_threshold, 1.0 - out, out)
    if params.blur_sigma > 0:
        sigma = (params.blur_sigma, params.blur_sigma) + (0.0,) * (out.ndim - 2)
        out = ndimage.gaussian_filter(out, sigma=sigma, truncate=3.0, mode="reflect")
    if params.noise_std > 0:
        out = out + rng.normal(0.0, params.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def apply_transform(image: np.ndarray, spec: TransformSpec, out_size=None) -> np.ndarray:
    """Full cascade: photometric stage on values, then the geometric warp."""
    photo = apply_photometric(image, spec.photometric, spec.noise_rng())
    return apply_geometric(photo, spec.homography, out_size=out_size)


def map_points(points: np.ndarray, corr: CorrespondenceMap) -> tuple[np.ndarray, np.ndarray]:
    """Map (N, 2) points through a correspondence map.

    Returns (mapped_points, valid) where ``valid`` flags points landing
    inside the target image bounds.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if not np.all(np.isfinite(pts)):
        raise TransformConfigError("points must be finite")
    mapped = pts if corr.forward is None else corr.forward.apply(pts)
    return mapped, corr.valid(mapped)


def chain_correspondence(
    corr: CorrespondenceMap,
    spec_a: TransformSpec,
    spec_b: TransformSpec,
    target_size: tuple[int, int] | None = None,
) -> CorrespondenceMap:
    """Correspondence between two independently transformed images.

    If ``corr`` maps raw image A to raw image B, the returned map sends a
    point of transform_a(A) to its true correspondent in transform_b(B):
    H_b o corr o H_a^{-1}.
    """
    h_a_inv = spec_a.homography.inverse().matrix
    m = spec_b.homography.matrix @ corr.matrix @ h_a_inv
    homog = Homography(m)
    tsize = target_size if target_size is not None else corr.target_size
    if homog.is_identity():
        return CorrespondenceMap(kind="identity", forward=None,
                                 source_size=corr.source_size, target_size=tsize)
    return CorrespondenceMap(kind="composed", forward=homog,
                             source_size=corr.source_size, target_size=tsize)
