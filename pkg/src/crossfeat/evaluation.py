"""Matching metrics (NC / NCM / CMR), dataset evaluation and the λ sweep.

Keypoints from the two images are matched by mutual nearest neighbor over
Euclidean descriptor distance. Against a ground-truth correspondence map
U and a pixel threshold ε:

* NC  — extracted points in image A whose mapped location U(p) is in
  bounds and has some extracted point of image B within ε;
* NCM — mutual-NN matches whose endpoints agree with U within ε;
* CMR — 100 * NCM / NC (undefined when NC = 0).

Metrics are computed per pair and per K (the number of extracted points)
and aggregated by averaging over pairs; the aggregation mode is recorded
in every report since summing counts first gives a different CMR.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .datasets import DatasetManifest, ImagePair
from .model import FeatureNet, KeypointSet, extract_keypoints, load_model
from .trainer import TrainConfig, train
from .transforms import CorrespondenceMap, map_points

DEFAULT_KS = (1024, 2048, 4096)
DEFAULT_EPSILON = 3.0

REPORT_COLUMNS = ("pair_id", "K", "NC", "NCM", "CMR")


class EvaluationError(ValueError):
    """Raised for invalid metric arguments or malformed inputs."""


@dataclass
class MatchSet:
    """Mutual-nearest-neighbor matches between two keypoint sets."""

    pairs: np.ndarray  # (M, 2) int indices into (a, b)
    distances: np.ndarray  # (M,)
    correct: np.ndarray | None = None  # filled by count_ncm
    epsilon: float | None = None

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class PairMetrics:
    pair_id: str
    k: int
    nc: int
    ncm: int
    cmr: float | None


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[PairMetrics, ...]
    epsilon: float
    aggregation: str = "per_pair_mean"

    def aggregate(self) -> list[dict]:
        out = []
        for k in sorted({r.k for r in self.rows}):
            rows = [r for r in self.rows if r.k == k]
            cmrs = [r.cmr for r in rows if r.cmr is not None]
            out.append({
                "K": k,
                "mean_NC": float(np.mean([r.nc for r in rows])),
                "mean_NCM": float(np.mean([r.ncm for r in rows])),
                "mean_CMR": float(np.mean(cmrs)) if cmrs else None,
                "n_pairs": len(rows),
            })
        return out

    def to_tsv(self) -> str:
        lines = ["\t".join(REPORT_COLUMNS)]
        for r in self.rows:
            cmr = "nan" if r.cmr is None else f"{r.cmr:.4f}"
            lines.append(f"{r.pair_id}\t{r.k}\t{r.nc}\t{r.ncm}\t{cmr}")
        lines.append("")
        lines.append("# aggregate (mode: %s, epsilon: %g px)" % (self.aggregation, self.epsilon))
        lines.append("\t".join(["K", "mean_NC", "mean_NCM", "mean_CMR", "n_pairs"]))
        for agg in self.aggregate():
            cmr = "nan" if agg["mean_CMR"] is None else f"{agg['mean_CMR']:.4f}"
            lines.append(f"{agg['K']}\t{agg['mean_NC']:.2f}\t{agg['mean_NCM']:.2f}"
                         f"\t{cmr}\t{agg['n_pairs']}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "epsilon": self.epsilon,
            "aggregation": self.aggregation,
            "rows": [{"pair_id": r.pair_id, "K": r.k, "NC": r.nc, "NCM": r.ncm,
                      "CMR": r.cmr} for r in self.rows],
            "aggregate": self.aggregate(),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def save(self, stem: Path | str) -> tuple[Path, Path]:
        stem = Path(stem)
        tsv = stem.with_suffix(".tsv")
        js = stem.with_suffix(".json")
        tsv.write_text(self.to_tsv())
        js.write_text(self.to_json())
        return tsv, js


@dataclass(frozen=True)
class SweepResult:
    """Seed-averaged NCM (and CMR) per λ and K."""

    rows: tuple[dict, ...]  # {"lambda", "K", "mean_NCM", "mean_CMR"}
    seeds: tuple[int, ...]
    ks: tuple[int, ...]

    def to_tsv(self) -> str:
        lines = ["lambda\tK\tmean_NCM\tmean_CMR"]
        for r in self.rows:
            cmr = "nan" if r["mean_CMR"] is None else f"{r['mean_CMR']:.4f}"
            lines.append(f"{r['lambda']:g}\t{r['K']}\t{r['mean_NCM']:.4f}\t{cmr}")
        return "\n".join(lines) + "\n"

    def ncm_for(self, lam: float, k: int) -> float:
        for r in self.rows:
            if r["lambda"] == lam and r["K"] == k:
                return r["mean_NCM"]
        raise KeyError((lam, k))


# ---------------------------------------------------------------------------
# matching and counting
# ---------------------------------------------------------------------------

def mutual_nn_match(desc_a: np.ndarray, desc_b: np.ndarray) -> MatchSet:
    """Mutual nearest neighbors under Euclidean descriptor distance.

    A pair (i, j) is kept iff j is i's nearest descriptor in B and i is
    j's nearest in A; ties resolve to the lowest index (argmin order).
    """
    desc_a = np.asarray(desc_a, dtype=float)
    desc_b = np.asarray(desc_b, dtype=float)
    if desc_a.size == 0 or desc_b.size == 0:
        raise EvaluationError("descriptor sets must be non-empty")
    dist = np.sqrt(np.maximum(
        (desc_a ** 2).sum(1)[:, None] + (desc_b ** 2).sum(1)[None, :]
        - 2.0 * desc_a @ desc_b.T, 0.0))
    nn_ab = dist.argmin(axis=1)
    nn_ba = dist.argmin(axis=0)
    ids = np.arange(len(desc_a))
    mutual = nn_ba[nn_ab] == ids
    pairs = np.column_stack([ids[mutual], nn_ab[mutual]])
    return MatchSet(pairs=pairs, distances=dist[pairs[:, 0], pairs[:, 1]])


def count_nc(
    kps_a: KeypointSet,
    kps_b: KeypointSet,
    corr: CorrespondenceMap,
    epsilon: float = DEFAULT_EPSILON,
) -> int:
    """Extracted points of A whose correspondent has a B point within ε."""
    if epsilon <= 0:
        raise EvaluationError(f"epsilon must be > 0, got {epsilon}")
    if len(kps_a) == 0 or len(kps_b) == 0:
        return 0
    mapped, valid = map_points(kps_a.points, corr)
    if not valid.any():
        return 0
    diff = mapped[valid][:, None, :] - kps_b.points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    return int((dist.min(axis=1) <= epsilon).sum())


def count_ncm(
    matches: MatchSet,
    kps_a: KeypointSet,
    kps_b: KeypointSet,
    corr: CorrespondenceMap,
    epsilon: float = DEFAULT_EPSILON,
) -> int:
    """Matches whose endpoints agree with the ground truth within ε.

    Also writes per-match correctness flags and the threshold into
    ``matches``.
    """
    if epsilon <= 0:
        raise EvaluationError(f"epsilon must be > 0, got {epsilon}")
    if len(matches) == 0:
        matches.correct = np.zeros(0, dtype=bool)
        matches.epsilon = epsilon
        return 0
    pts_a = kps_a.points[matches.pairs[:, 0]]
    pts_b = kps_b.points[matches.pairs[:, 1]]
    mapped, valid = map_points(pts_a, corr)
    dist = np.sqrt(((mapped - pts_b) ** 2).sum(-1))
    correct = valid & (dist <= epsilon)
    matches.correct = correct
    matches.epsilon = epsilon
    return int(correct.sum())


def cmr(ncm: int, nc: int) -> float | None:
    """Correctly matched ratio 100 * NCM / NC in percent; None when NC = 0."""
    if nc < 0:
        raise EvaluationError(f"NC must be >= 0, got {nc}")
    if ncm > nc:
        raise EvaluationError(f"NCM ({ncm}) cannot exceed NC ({nc})")
    if nc == 0:
        return None
    return 100.0 * ncm / nc


def relative_improvement(new: float, base: float) -> float:
    """Percent change of ``new`` over ``base``; base must be positive."""
    if base <= 0:
        raise EvaluationError(f"baseline must be > 0, got {base}")
    return 100.0 * (new - base) / base


# ---------------------------------------------------------------------------
# dataset evaluation
# ---------------------------------------------------------------------------

def evaluate_keypoint_sets(
    kps_a: KeypointSet,
    kps_b: KeypointSet,
    corr: CorrespondenceMap,
    epsilon: float = DEFAULT_EPSILON,
) -> tuple[int, int, float | None, MatchSet]:
    """NC, NCM, CMR and the match set for one pair of keypoint sets."""
    matches = mutual_nn_match(kps_a.descriptors, kps_b.descriptors)
    nc = count_nc(kps_a, kps_b, corr, epsilon)
    ncm = count_ncm(matches, kps_a, kps_b, corr, epsilon)
    # every correct match endpoint is itself a correspondence, so NCM <= NC
    return nc, ncm, cmr(ncm, nc), matches


def evaluate_pair(
    model: FeatureNet,
    pair: ImagePair,
    ks: tuple[int, ...],
    epsilon: float = DEFAULT_EPSILON,
    nms_radius: int | None = None,
) -> list[PairMetrics]:
    radius = nms_radius if nms_radius is not None else model.config.nms_radius
    out_a = model(pair.visible)
    out_b = model(pair.other)
    rows = []
    for k in ks:
        kps_a = extract_keypoints(out_a, k, radius)
        kps_b = extract_keypoints(out_b, k, radius)
        nc, ncm, ratio, _ = evaluate_keypoint_sets(kps_a, kps_b, pair.correspondence, epsilon)
        rows.append(PairMetrics(pair_id=pair.pair_id, k=k, nc=nc, ncm=ncm, cmr=ratio))
    return rows


def evaluate_dataset(
    checkpoint: Path | str | FeatureNet,
    manifest: DatasetManifest,
    ks: tuple[int, ...] = DEFAULT_KS,
    epsilon: float = DEFAULT_EPSILON,
    nms_radius: int | None = None,
) -> MetricsReport:
    """Forward every pair, extract top-K keypoints, match and count."""
    if len(manifest) == 0:
        raise EvaluationError("test manifest is empty")
    model = checkpoint if isinstance(checkpoint, FeatureNet) else load_model(checkpoint)[0]
    rows: list[PairMetrics] = []
    for i in range(len(manifest)):
        pair = manifest.load_pair(i)
        rows.extend(evaluate_pair(model, pair, tuple(ks), epsilon, nms_radius))
    return MetricsReport(rows=tuple(rows), epsilon=epsilon)


# ---------------------------------------------------------------------------
# λ sweep
# ---------------------------------------------------------------------------

def sweep_lambda(
    base_config: TrainConfig,
    model_config,
    train_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    lambdas: tuple[float, ...],
    seeds: tuple[int, ...] = (1,),
    ks: tuple[int, ...] = DEFAULT_KS,
    epsilon: float = DEFAULT_EPSILON,
    out_dir: Path | str | None = None,
    progress=None,
) -> SweepResult:
    """Train one model per (λ, seed) from shared initialization and compare.

    The model seed lives in ``model_config``, so every run starts from the
    same weights; the training seed varies data order and augmentation.
    Returns seed-mean NCM/CMR per (λ, K), sorted by λ.
    """
    if not lambdas:
        raise EvaluationError("need at least one lambda")
    if len(set(lambdas)) != len(lambdas):
        raise EvaluationError("lambdas must be distinct")
    if not seeds:
        raise EvaluationError("need at least one seed")
    import tempfile

    out_dir = Path(out_dir) if out_dir is not None else None
    scratch = None if out_dir is not None else tempfile.TemporaryDirectory(
        prefix="crossfeat_sweep_")
    run_dir = out_dir if out_dir is not None else Path(scratch.name)
    per_run: dict[tuple[float, int], MetricsReport] = {}
    try:
        for lam in lambdas:
            for seed in seeds:
                name = f"lam{lam:g}_seed{seed}"
                config = replace(base_config, lam=lam, seed=seed,
                                 checkpoint_path=str(run_dir / f"{name}.ckpt"),
                                 log_path=str(run_dir / f"{name}_log.tsv"))
                result = train(config, train_manifest, model_config)
                report = evaluate_dataset(result.model, test_manifest, ks, epsilon)
                per_run[(lam, seed)] = report
                if out_dir is not None:
                    report.save(out_dir / f"{name}_metrics")
                if progress is not None:
                    progress(lam, seed, report)
    finally:
        if scratch is not None:
            scratch.cleanup()
    rows = []
    for lam in sorted(lambdas):
        aggregates = [per_run[(lam, seed)].aggregate() for seed in seeds]
        for k_idx, k in enumerate(sorted(ks)):
            ncms = [agg[k_idx]["mean_NCM"] for agg in aggregates]
            cmrs = [agg[k_idx]["mean_CMR"] for agg in aggregates
                    if agg[k_idx]["mean_CMR"] is not None]
            rows.append({
                "lambda": float(lam),
                "K": int(k),
                "mean_NCM": float(np.mean(ncms)),
                "mean_CMR": float(np.mean(cmrs)) if cmrs else None,
            })
    result = SweepResult(rows=tuple(rows), seeds=tuple(seeds), ks=tuple(sorted(ks)))
    if out_dir is not None:
        (out_dir / "sweep.tsv").write_text(result.to_tsv())
        plot_sweep(result, out_dir / "sweep.png")
    return result


def plot_sweep(result: SweepResult, path: Path | str) -> None:
    """Line plot of seed-mean NCM against λ, one series per K."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for k in result.ks:
        lams = [r["lambda"] for r in result.rows if r["K"] == k]
        ncms = [r["mean_NCM"] for r in result.rows if r["K"] == k]
        ax.plot(lams, ncms, marker="o", label=f"K={k}")
    ax.set_xlabel("SSL weight λ")
    ax.set_ylabel("mean NCM")
    ax.set_title(f"NCM vs λ (seed mean over {len(result.seeds)} seeds)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# external keypoint interchange format
# ---------------------------------------------------------------------------

KEYPOINT_HEADER = "# crossfeat keypoints v1: x y score d_1 ... d_C"


def write_keypoints_file(path: Path | str, kps: KeypointSet) -> None:
    """One line per point: x y score then the descriptor components."""
    lines = [KEYPOINT_HEADER]
    for p, s, d in zip(kps.points, kps.scores, kps.descriptors):
        comps = " ".join(repr(float(v)) for v in d)
        lines.append(f"{float(p[0])!r} {float(p[1])!r} {float(s)!r} {comps}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_keypoints_file(path: Path | str) -> KeypointSet:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or not lines[0].startswith("# crossfeat keypoints v1"):
        raise EvaluationError(f"{path} is not a crossfeat keypoint file")
    points, scores, descriptors = [], [], []
    for line in lines[1:]:
        parts = line.split()
        if len(parts) < 4:
            raise EvaluationError(f"{path}: malformed keypoint line: {line!r}")
        points.append([float(parts[0]), float(parts[1])])
        scores.append(float(parts[2]))
        descriptors.append([float(v) for v in parts[3:]])
    return KeypointSet(points=np.array(points), scores=np.array(scores),
                       descriptors=np.array(descriptors))


def evaluate_external_pair(
    file_a: Path | str,
    file_b: Path | str,
    corr: CorrespondenceMap,
    ks: tuple[int, ...],
    epsilon: float = DEFAULT_EPSILON,
    pair_id: str = "external",
) -> list[PairMetrics]:
    """Metrics for externally produced keypoint/descriptor files.

    For each K the K highest-scoring points of each file are used.
    """
    kps_a = read_keypoints_file(file_a)
    kps_b = read_keypoints_file(file_b)
    rows = []
    for k in ks:
        def top(kps):
            order = np.argsort(-kps.scores, kind="stable")[:k]
            return KeypointSet(points=kps.points[order], scores=kps.scores[order],
                               descriptors=kps.descriptors[order])

        a, b = top(kps_a), top(kps_b)
        nc, ncm, ratio, _ = evaluate_keypoint_sets(a, b, corr, epsilon)
        rows.append(PairMetrics(pair_id=pair_id, k=k, nc=nc, ncm=ncm, cmr=ratio))
    return rows
