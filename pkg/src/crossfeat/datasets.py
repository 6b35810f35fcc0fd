"""Aligned cross-modality pair datasets: loading, splits, crops, synthesis.

Three directory layouts are recognized:

* ``generic``:   ``root/visible/<id>.png`` + ``root/other/<id>.png`` with an
  optional ``root/scenes.tsv`` (tab-separated ``id<TAB>scene`` rows).
* ``roadscene``: ``root/vi/<id>.png`` + ``root/ir/<id>.png`` (visible /
  thermal infrared pairs).
* ``rgbnir``:    ``root/<scene>/<id>_rgb.png`` + ``root/<scene>/<id>_nir.png``.

Images may be 8- or 16-bit PNG, grayscale or RGB; they are converted to
single-channel float arrays in [0, 1] (RGB via the 0.299/0.587/0.114 luma
weights). All pairs in these layouts are co-registered, so the ground
truth correspondence is the identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .transforms import CorrespondenceMap, Homography, chain_correspondence

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class DatasetError(ValueError):
    """Raised for malformed dataset roots, orphan files or bad parameters."""


@dataclass(frozen=True)
class PairEntry:
    pair_id: str
    visible_path: Path
    other_path: Path
    scene: str


@dataclass(frozen=True)
class ImagePair:
    """An aligned visible / other-modality image pair with ground truth."""

    visible: np.ndarray
    other: np.ndarray
    correspondence: CorrespondenceMap
    pair_id: str
    scene: str


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[PairEntry, ...]
    split: str = "all"

    def __len__(self) -> int:
        return len(self.entries)

    def scenes(self) -> list[str]:
        return sorted({e.scene for e in self.entries})

    def load_pair(self, index: int) -> ImagePair:
        entry = self.entries[index]
        visible = read_image_gray(entry.visible_path)
        other = read_image_gray(entry.other_path)
        if visible.shape != other.shape:
            raise DatasetError(
                f"pair {entry.pair_id}: dimension mismatch "
                f"{visible.shape} vs {other.shape}"
            )
        return ImagePair(
            visible=visible,
            other=other,
            correspondence=CorrespondenceMap.identity(visible.shape),
            pair_id=entry.pair_id,
            scene=entry.scene,
        )

    def load_all(self) -> list[ImagePair]:
        return [self.load_pair(i) for i in range(len(self))]

    def save(self, path: Path | str) -> None:
        path = Path(path)
        lines = [f"# crossfeat manifest\troot={self.root}\tsplit={self.split}"]
        for e in self.entries:
            lines.append(f"{e.pair_id}\t{e.visible_path}\t{e.other_path}\t{e.scene}")
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "DatasetManifest":
        path = Path(path)
        lines = path.read_text().strip().splitlines()
        if not lines or not lines[0].startswith("# crossfeat manifest"):
            raise DatasetError(f"{path} is not a crossfeat manifest")
        header = dict(field.split("=", 1) for field in lines[0].split("\t")[1:])
        entries = []
        for line in lines[1:]:
            pair_id, vis, other, scene = line.split("\t")
            entries.append(PairEntry(pair_id, Path(vis), Path(other), scene))
        return cls(root=Path(header["root"]), entries=tuple(entries),
                   split=header.get("split", "all"))


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def read_image_gray(path: Path | str) -> np.ndarray:
    """Read a PNG as a single-channel float image in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 3:
        rgb = arr[..., :3].astype(float)
        gray = rgb @ np.array(LUMA_WEIGHTS)
    else:
        gray = arr.astype(float)
    if arr.dtype == np.uint8:
        return gray / 255.0
    if arr.dtype in (np.uint16, np.int32):  # PIL mode I;16 decodes to int32
        return gray / 65535.0
    raise DatasetError(f"{path}: unsupported PNG sample type {arr.dtype}")


def write_image_gray(path: Path | str, image: np.ndarray) -> None:
    """Write a [0, 1] float image as 8-bit grayscale PNG."""
    data = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray(np.round(data * 255.0).astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# loading and splitting
# ---------------------------------------------------------------------------

def _pair_up(vis_dir: Path, other_dir: Path, scene_of=None) -> list[PairEntry]:
    vis = {p.stem: p for p in sorted(vis_dir.glob("*.png"))}
    other = {p.stem: p for p in sorted(other_dir.glob("*.png"))}
    orphans = sorted(set(vis) ^ set(other))
    if orphans:
        raise DatasetError(
            f"unpaired ids under {vis_dir.parent}: {', '.join(orphans[:10])}"
            + (" ..." if len(orphans) > 10 else "")
        )
    entries = []
    for pair_id in sorted(vis):
        scene = scene_of(pair_id) if scene_of else pair_id
        entries.append(PairEntry(pair_id, vis[pair_id], other[pair_id], scene))
    return entries


def load_dataset(root: Path | str, layout: str = "generic") -> DatasetManifest:
    """Scan a dataset root and return a manifest sorted by pair id."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if layout == "generic":
        scenes = {}
        scene_file = root / "scenes.tsv"
        if scene_file.exists():
            for line in scene_file.read_text().strip().splitlines():
                pair_id, scene = line.split("\t")
                scenes[pair_id] = scene
        entries = _pair_up(root / "visible", root / "other",
                           scene_of=lambda pid: scenes.get(pid, pid))
    elif layout == "roadscene":
        entries = _pair_up(root / "vi", root / "ir")
    elif layout == "rgbnir":
        entries = []
        for scene_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            rgb = {p.stem[:-4]: p for p in sorted(scene_dir.glob("*_rgb.png"))}
            nir = {p.stem[:-4]: p for p in sorted(scene_dir.glob("*_nir.png"))}
            orphans = sorted(set(rgb) ^ set(nir))
            if orphans:
                raise DatasetError(f"unpaired ids under {scene_dir}: {', '.join(orphans[:10])}")
            for pid in sorted(rgb):
                entries.append(PairEntry(f"{scene_dir.name}/{pid}", rgb[pid], nir[pid],
                                         scene=scene_dir.name))
        entries.sort(key=lambda e: e.pair_id)
    else:
        raise DatasetError(f"unknown layout {layout!r}; expected generic/roadscene/rgbnir")
    if not entries:
        raise DatasetError(f"no image pairs found under {root} (layout {layout})")
    return DatasetManifest(root=root, entries=tuple(entries))


def split_dataset(
    manifest: DatasetManifest,
    *,
    test_fraction: float | None = None,
    per_scene_count: int | None = None,
    seed: int = 0,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split into disjoint, exhaustive (train, test) manifests.

    Exactly one of ``test_fraction`` or ``per_scene_count`` must be given;
    the latter draws that many test pairs from every scene.
    """
    if (test_fraction is None) == (per_scene_count is None):
        raise DatasetError("give exactly one of test_fraction or per_scene_count")
    rng = np.random.default_rng(seed)
    entries = list(manifest.entries)
    if test_fraction is not None:
        if not 0.0 <= test_fraction <= 1.0:
            raise DatasetError(f"test_fraction must lie in [0, 1], got {test_fraction}")
        n_test = int(round(test_fraction * len(entries)))
        order = rng.permutation(len(entries))
        test_idx = set(order[:n_test].tolist())
    else:
        test_idx = set()
        by_scene: dict[str, list[int]] = {}
        for i, e in enumerate(entries):
            by_scene.setdefault(e.scene, []).append(i)
        for scene in sorted(by_scene):
            members = by_scene[scene]
            if per_scene_count > len(members):
                raise DatasetError(
                    f"scene {scene!r} has {len(members)} pairs, "
                    f"cannot reserve {per_scene_count} for testing"
                )
            picked = rng.choice(len(members), size=per_scene_count, replace=False)
            test_idx.update(members[k] for k in picked)
    train = tuple(e for i, e in enumerate(entries) if i not in test_idx)
    test = tuple(e for i, e in enumerate(entries) if i in test_idx)
    return (
        DatasetManifest(root=manifest.root, entries=train, split="train"),
        DatasetManifest(root=manifest.root, entries=test, split="test"),
    )


# ---------------------------------------------------------------------------
# cropping
# ---------------------------------------------------------------------------

def _crop_translation(x0: int, y0: int) -> Homography:
    return Homography(np.array([[1.0, 0.0, -x0], [0.0, 1.0, -y0], [0.0, 0.0, 1.0]]))


def random_crop_pair(
    pair: ImagePair, size: tuple[int, int], rng: np.random.Generator
) -> ImagePair:
    """Crop both images around a randomly chosen valid correspondence.

    The window is centered on a uniformly drawn pixel whose correspondent
    is in bounds, then clamped to the image; for identity-aligned pairs
    the identical window (hence an identity correspondence) applies to
    both sides.
    """
    ch, cw = size
    ha, wa = pair.visible.shape
    hb, wb = pair.other.shape
    if ch > ha or cw > wa or ch > hb or cw > wb:
        raise DatasetError(f"crop {size} exceeds pair {pair.pair_id} dimensions")
    corr = pair.correspondence
    for _ in range(100):
        cx = float(rng.uniform(0, wa))
        cy = float(rng.uniform(0, ha))
        mapped = np.array([[cx, cy]]) if corr.forward is None else corr.forward.apply([[cx, cy]])
        if corr.valid(mapped).all():
            break
    else:
        raise DatasetError(f"pair {pair.pair_id}: no valid correspondence found for cropping")
    bx, by = float(mapped[0, 0]), float(mapped[0, 1])

    def window(c, lo_max):
        return int(np.clip(round(c), 0, lo_max))

    x0a = window(cx - cw / 2, wa - cw)
    y0a = window(cy - ch / 2, ha - ch)
    if corr.forward is None:
        x0b, y0b = x0a, y0a
    else:
        x0b = window(bx - cw / 2, wb - cw)
        y0b = window(by - ch / 2, hb - ch)
    vis = pair.visible[y0a:y0a + ch, x0a:x0a + cw]
    other = pair.other[y0b:y0b + ch, x0b:x0b + cw]
    if corr.forward is None and (x0a, y0a) == (x0b, y0b):
        new_corr = CorrespondenceMap.identity((ch, cw))
    else:
        m = _crop_translation(x0b, y0b).matrix @ corr.matrix @ _crop_translation(x0a, y0a).inverse().matrix
        new_corr = CorrespondenceMap.from_homography(
            Homography(m), (ch, cw), (ch, cw), kind="composed")
    return ImagePair(visible=vis, other=other, correspondence=new_corr,
                     pair_id=pair.pair_id, scene=pair.scene)


# ---------------------------------------------------------------------------
# synthetic pseudo-infrared data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticParams:
    """Knobs of the procedural generator and the pseudo-IR recipe."""

    size: tuple[int, int] = (128, 128)
    n_polygons: int = 9
    n_texture_patches: int = 3
    ir_blur_sigma: float = 2.0
    ir_noise_std: float = 0.02
    ir_gain_range: tuple[float, float] = (0.8, 1.1)
    ir_offset_range: tuple[float, float] = (-0.05, 0.05)


def _procedural_image(rng: np.random.Generator, params: SyntheticParams) -> tuple[np.ndarray, int]:
    """Draw polygons, gradients and texture patches; returns (image, n_corners)."""
    h, w = params.size
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * jj / w + np.sin(theta) * ii / h
    base = 0.5 + 0.45 * ramp  # wide-range gradient keeps polarity flips visible
    img = Image.fromarray(np.round(np.clip(base, 0, 1) * 255).astype(np.uint8), mode="L")
    draw = ImageDraw.Draw(img)
    n_corners = 0
    for _ in range(params.n_polygons):
        n_vertices = int(rng.integers(3, 7))
        cx, cy = rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h
        radius = rng.uniform(0.08, 0.22) * min(h, w)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_vertices))
        pts = [(cx + radius * rng.uniform(0.6, 1.4) * np.cos(a),
                cy + radius * rng.uniform(0.6, 1.4) * np.sin(a)) for a in angles]
        # bimodal shades: strongly dark or strongly bright regions
        shade = rng.uniform(0.0, 0.2) if rng.random() < 0.5 else rng.uniform(0.8, 1.0)
        draw.polygon(pts, fill=int(round(shade * 255)))
        n_corners += n_vertices
    out = np.asarray(img).astype(float) / 255.0
    for _ in range(params.n_texture_patches):
        ph = int(rng.integers(h // 8, h // 3))
        pw = int(rng.integers(w // 8, w // 3))
        y0 = int(rng.integers(0, h - ph))
        x0 = int(rng.integers(0, w - pw))
        texture = ndimage.gaussian_filter(rng.uniform(0, 1, size=(ph, pw)), 1.0)
        lo, hi = texture.min(), texture.max()
        texture = (texture - lo) / (hi - lo + 1e-12)
        out[y0:y0 + ph, x0:x0 + pw] = 0.7 * out[y0:y0 + ph, x0:x0 + pw] + 0.3 * texture
        n_corners += 4
    return np.clip(out, 0.0, 1.0), n_corners


def procedural_image(rng: np.random.Generator,
                     params: SyntheticParams = SyntheticParams()) -> np.ndarray:
    """A synthetic corner-rich grayscale image in [0, 1]."""
    image, _ = _procedural_image(rng, params)
    return image


def pseudo_infrared(
    visible: np.ndarray, rng: np.random.Generator, params: SyntheticParams = SyntheticParams()
) -> np.ndarray:
    """Fake the visible->thermal appearance gap while keeping structure.

    Polarity is flipped (1 - v), fine texture is lost to a sigma-2 blur, a
    random affine contrast remap shifts the response, and mild sensor
    noise is added; the result is clamped to [0, 1].
    """
    base = ndimage.gaussian_filter(1.0 - np.asarray(visible, dtype=float), params.ir_blur_sigma,
                               truncate=3.0, mode="reflect")
    gain = rng.uniform(*params.ir_gain_range)
    offset = rng.uniform(*params.ir_offset_range)
    remapped = gain * (base - 0.5) + 0.5 + offset
    noisy = remapped + rng.normal(0.0, params.ir_noise_std, size=base.shape)
    return np.clip(noisy, 0.0, 1.0)


def make_synthetic_dataset(
    out_root: Path | str,
    n_pairs: int,
    params: SyntheticParams = SyntheticParams(),
    seed: int = 0,
    source_dir: Path | str | None = None,
) -> DatasetManifest:
    """Write a generic-layout dataset of (visible, pseudo-IR) pairs.

    Visible images come from ``source_dir`` PNGs when given, otherwise
    from the procedural generator (each containing at least 20 corner-like
    structures). Pairs are pixel-aligned by construction.
    """
    if n_pairs < 1:
        raise DatasetError(f"n_pairs must be >= 1, got {n_pairs}")
    if source_dir is None and 3 * params.n_polygons + 4 * params.n_texture_patches < 20:
        raise DatasetError("procedural params guarantee fewer than 20 corner structures")
    out_root = Path(out_root)
    vis_dir = out_root / "visible"
    other_dir = out_root / "other"
    vis_dir.mkdir(parents=True, exist_ok=True)
    other_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    sources: list[Path] | None = None
    if source_dir is not None:
        sources = sorted(Path(source_dir).glob("*.png"))
        if not sources:
            raise DatasetError(f"source directory {source_dir} contains no PNG images")
    for k in range(n_pairs):
        if sources is not None:
            visible = read_image_gray(sources[k % len(sources)])
        else:
            visible, _ = _procedural_image(rng, params)
        other = pseudo_infrared(visible, rng, params)
        pair_id = f"synth_{k:04d}"
        write_image_gray(vis_dir / f"{pair_id}.png", visible)
        write_image_gray(other_dir / f"{pair_id}.png", other)
    return load_dataset(out_root, layout="generic")
