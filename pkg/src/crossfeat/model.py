"""Detect-and-describe feature network and keypoint extraction.

A small fully convolutional network maps a single-channel image to a raw
feature map, from which two heads are derived in closed form:

* dense descriptors: the per-cell feature vector L2-normalized;
* a detection score map combining a local softmax over each 3x3
  neighborhood with a channel-wise ratio-to-max response, normalized to
  sum to 1 over the image.

Keypoints are read off the score map by greedy non-maximum suppression.
Feature cells are addressed with the same half-pixel-center convention as
images: cell (i, j) of a stride-s map sits at image coordinates
``((j + 0.5) * s, (i + 0.5) * s)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

SCORE_EPS = 1e-8


class ModelError(ValueError):
    """Raised for invalid model configuration or inputs."""


class CheckpointError(IOError):
    """Raised when a checkpoint file is missing, corrupt or incompatible."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of the reference network."""

    channels: tuple[int, int, int] = (32, 32, 64)
    descriptor_dim: int = 32
    stride: int = 1
    nms_radius: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.descriptor_dim < 4:
            raise ModelError(f"descriptor_dim must be >= 4, got {self.descriptor_dim}")
        if self.stride not in (1, 2, 4):
            raise ModelError(f"stride must be one of 1/2/4, got {self.stride}")
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ModelError(f"channels must be three positive widths, got {self.channels}")

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "descriptor_dim": self.descriptor_dim,
            "stride": self.stride,
            "nms_radius": self.nms_radius,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            channels=tuple(d["channels"]),
            descriptor_dim=int(d["descriptor_dim"]),
            stride=int(d["stride"]),
            nms_radius=int(d["nms_radius"]),
            seed=int(d["seed"]),
        )


@dataclass
class FeatureOutput:
    """Dense network output for one image.

    ``features`` and ``descriptors`` are (H', W', C) tensors, ``scores``
    is (H', W'); all gradient-capable when the model requires grad.
    """

    features: torch.Tensor
    descriptors: torch.Tensor
    scores: torch.Tensor
    stride: int

    @property
    def map_size(self) -> tuple[int, int]:
        return tuple(self.scores.shape)

    def scores_numpy(self) -> np.ndarray:
        return self.scores.detach().cpu().numpy()

    def descriptors_numpy(self) -> np.ndarray:
        return self.descriptors.detach().cpu().numpy()


@dataclass
class KeypointSet:
    """Sparse keypoints in image coordinates with unit descriptors."""

    points: np.ndarray  # (N, 2) of (x, y)
    scores: np.ndarray  # (N,)
    descriptors: np.ndarray  # (N, C)

    def __len__(self) -> int:
        return len(self.points)


class FeatureNet(nn.Module):
    """Four 3x3 convolution blocks; the last block emits the raw features.

    Blocks use dilations 1/2/4/8: a receptive field of 31 px at stride 1,
    where plain 3x3 stacks see only 9 px, far too little context for
    distinctive descriptors. Inputs are centered to [-0.5, 0.5]. Strides 2
    and 4 downsample in the final one or two blocks. Weights are He-normal
    from a numpy generator seeded by the config, so initialization is
    identical across runs and platforms.
    """

    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.channels
        strides = {1: (1, 1), 2: (1, 2), 4: (2, 2)}[config.stride]
        self.conv1 = nn.Conv2d(1, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=2, dilation=2)
        self.conv3 = nn.Conv2d(c2, c3, 3, padding=4, dilation=4, stride=strides[0])
        self.conv4 = nn.Conv2d(c3, config.descriptor_dim, 3, padding=8, dilation=8,
                               stride=strides[1])
        self.relu = nn.ReLU()
        self._init_weights(config.seed)
        self.to(dtype)

    def _init_weights(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for conv in (self.conv1, self.conv2, self.conv3, self.conv4):
            fan_in = conv.in_channels * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(conv.weight.shape))
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(w))
                conv.bias.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.conv1.weight.dtype

    def forward(self, image) -> FeatureOutput:
        """Compute features, unit descriptors and the detection score map.

        ``image`` is an (H, W) array or tensor in [0, 1] with H and W
        divisible by the configured stride.
        """
        x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
        if x.ndim != 2:
            raise ModelError(f"expected a single-channel (H, W) image, got shape {tuple(x.shape)}")
        h, w = x.shape
        if h % self.config.stride or w % self.config.stride:
            raise ModelError(
                f"image size {(h, w)} not divisible by stride {self.config.stride}")
        if not torch.is_tensor(image):
            x = x.to(self.dtype)
        y = x[None, None] - 0.5
        y = self.relu(self.conv1(y))
        y = self.relu(self.conv2(y))
        y = self.relu(self.conv3(y))
        y = self.conv4(y)
        features = y[0].permute(1, 2, 0)  # (H', W', C)
        norms = torch.sqrt((features * features).sum(dim=-1, keepdim=True) + 1e-12)
        descriptors = features / norms
        scores = soft_detection_scores(y)
        return FeatureOutput(features=features, descriptors=descriptors,
                             scores=scores, stride=self.config.stride)

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.detach().cpu().numpy() for name, p in self.named_parameters()}

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint is missing parameter {name}")
            value = arrays[name]
            if tuple(value.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"parameter {name}: checkpoint shape {tuple(value.shape)} "
                    f"!= model shape {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(np.ascontiguousarray(value)))


def soft_detection_scores(features_nchw: torch.Tensor) -> torch.Tensor:
    """Differentiable saliency from raw features.

    For rectified features a = relu(F): each channel is passed through a
    softmax over its 3x3 neighborhood (alpha), multiplied by the cell's
    ratio to its channel-wise maximum (beta), and the best channel
    response per cell is normalized to sum 1 over the map. A uniform map
    is returned when everything is rectified away.
    """
    dtype = features_nchw.dtype
    a = torch.relu(features_nchw)
    # neighborhood softmax via logsumexp over the 3x3 shifts: alpha_ij =
    # exp(a_ij - LSE over the neighborhood), which is internally max-
    # stabilized, so nothing overflows however large the activations grow;
    # -inf padding makes border cells sum over in-bounds neighbors only
    padded = nn.functional.pad(a, (1, 1, 1, 1), value=float("-inf"))
    h, w = a.shape[2], a.shape[3]
    shifts = torch.stack([padded[:, :, dy:dy + h, dx:dx + w]
                          for dy in range(3) for dx in range(3)])
    alpha = torch.exp(a - torch.logsumexp(shifts, dim=0))
    # the ratio-to-channel-max and global normalization run in float64:
    # their backward carries 1/eps and 1/sum(gamma) factors that can blow
    # past float32 range when the score mass concentrates
    a64 = a.to(torch.float64)
    beta = a64 / (a64.amax(dim=1, keepdim=True) + SCORE_EPS)
    gamma = (alpha.to(torch.float64) * beta).amax(dim=1)[0]  # (H', W')
    total = gamma.sum()
    if float(total.detach()) <= 0.0:
        hh, ww = gamma.shape
        uniform = torch.full_like(gamma, 1.0 / (hh * ww))
        return (uniform + 0.0 * gamma).to(dtype)  # keep graph connectivity
    return (gamma / total).to(dtype)


def cell_centers(rows: np.ndarray, cols: np.ndarray, stride: int) -> np.ndarray:
    """Image coordinates of feature cells under the half-center convention."""
    x = (cols + 0.5) * stride
    y = (rows + 0.5) * stride
    return np.column_stack([x, y]).astype(float)


def extract_keypoints(out: FeatureOutput, k: int, nms_radius: int | None = None) -> KeypointSet:
    """Greedy top-K selection with Euclidean non-maximum suppression.

    Cells are visited in descending score order (ties by flat index);
    selecting a cell suppresses every cell within ``nms_radius`` (in cell
    units). Returns min(K, available) keypoints at cell centers.
    """
    if k < 1:
        raise ModelError(f"k must be >= 1, got {k}")
    radius = nms_radius if nms_radius is not None else 4
    scores = out.scores_numpy()
    h, w = scores.shape
    order = np.argsort(-scores.ravel(), kind="stable")
    suppressed = np.zeros((h, w), dtype=bool)
    # offsets of the suppression disk
    r = int(np.floor(radius))
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    disk = (dy * dy + dx * dx) <= radius * radius
    dy, dx = dy[disk], dx[disk]
    rows, cols = [], []
    for flat in order:
        i, j = divmod(int(flat), w)
        if suppressed[i, j]:
            continue
        rows.append(i)
        cols.append(j)
        if len(rows) == k:
            break
        yy = dy + i
        xx = dx + j
        keep = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        suppressed[yy[keep], xx[keep]] = True
    rows = np.array(rows, dtype=int)
    cols = np.array(cols, dtype=int)
    descriptors = out.descriptors_numpy()[rows, cols]
    return KeypointSet(
        points=cell_centers(rows, cols, out.stride),
        scores=scores[rows, cols],
        descriptors=descriptors,
    )


def _bilinear_gather(grid: torch.Tensor, points: np.ndarray, stride: int) -> torch.Tensor:
    """Sample an (H', W', ...) tensor at image-coordinate points.

    Uses bilinear weights on the cell-center lattice with border
    replication, so every in-bounds image point is defined.
    """
    h, w = grid.shape[0], grid.shape[1]
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    gx = pts[:, 0] / stride - 0.5
    gy = pts[:, 1] / stride - 0.5
    gx = np.clip(gx, 0.0, w - 1.0)
    gy = np.clip(gy, 0.0, h - 1.0)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = torch.as_tensor(gx - x0, dtype=grid.dtype)
    fy = torch.as_tensor(gy - y0, dtype=grid.dtype)
    while fx.ndim < grid[y0, x0].ndim:
        fx = fx.unsqueeze(-1)
        fy = fy.unsqueeze(-1)
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bottom = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def _check_in_bounds(points: np.ndarray, out: FeatureOutput) -> None:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    h, w = out.map_size
    hi_x, hi_y = w * out.stride, h * out.stride
    bad = (pts[:, 0] < 0) | (pts[:, 0] > hi_x) | (pts[:, 1] < 0) | (pts[:, 1] > hi_y)
    if bad.any():
        raise ModelError(f"points out of image bounds: {pts[bad].tolist()}")


def describe_at(out: FeatureOutput, points: np.ndarray) -> torch.Tensor:
    """Unit descriptors sampled at arbitrary image points (differentiable)."""
    _check_in_bounds(points, out)
    d = _bilinear_gather(out.descriptors, points, out.stride)
    norms = torch.sqrt((d * d).sum(dim=-1, keepdim=True) + 1e-12)
    return d / norms


def score_at(out: FeatureOutput, points: np.ndarray) -> torch.Tensor:
    """Detection scores sampled at arbitrary image points (differentiable)."""
    _check_in_bounds(points, out)
    return _bilinear_gather(out.scores, points, out.stride)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"XFCK"
_VERSION = 1


def write_checkpoint(
    path: Path | str,
    config: ModelConfig,
    arrays: dict[str, np.ndarray],
    meta: dict | None = None,
) -> None:
    """Write a versioned binary checkpoint.

    Layout: magic ``XFCK``, u32 version, u64 header length, UTF-8 JSON
    header (model config, caller metadata, array directory), then the raw
    little-endian array payload in directory order.
    """
    path = Path(path)
    directory = []
    payload = b""
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        directory.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)})
        payload += arr.tobytes()
    header = json.dumps(
        {"model_config": config.to_dict(), "meta": meta or {}, "arrays": directory},
        sort_keys=True,
    ).encode("utf-8")
    blob = _MAGIC + struct.pack("<IQ", _VERSION, len(header)) + header + payload
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def read_checkpoint(path: Path | str) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    """Read a checkpoint; raises CheckpointError on corruption or mismatch."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != _MAGIC:
        raise CheckpointError(f"{path} is not a crossfeat checkpoint (bad magic)")
    version, header_len = struct.unpack("<IQ", blob[4:16])
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    config = ModelConfig.from_dict(header["model_config"])
    arrays = {}
    offset = 16 + header_len
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = dtype.itemsize * count
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return config, arrays, header["meta"]


def save_model(path: Path | str, model: FeatureNet, meta: dict | None = None) -> None:
    write_checkpoint(path, model.config, model.parameter_arrays(), meta)


def load_model(path: Path | str, dtype: torch.dtype = torch.float32) -> tuple[FeatureNet, dict]:
    config, arrays, meta = read_checkpoint(path)
    model = FeatureNet(config, dtype=dtype)
    model.load_parameter_arrays({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    return model, meta
