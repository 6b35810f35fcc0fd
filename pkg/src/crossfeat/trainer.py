"""Joint SL+SSL optimization loop with deterministic checkpoint/resume.

Each step samples pair(s) from the training manifest, takes a
correspondence-centered crop, evaluates the joint objective and applies
one Adam step with decoupled weight decay. All randomness flows through a
single numpy generator whose state is checkpointed, so a fixed seed gives
bit-identical runs and a resumed run continues exactly where the
uninterrupted one would have been (single-threaded mode, which is the
supported deterministic mode).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .datasets import DatasetManifest, ImagePair, random_crop_pair
from .losses import LossBreakdown, LossError, reference_df_loss, total_loss
from .model import FeatureNet, ModelConfig, read_checkpoint, write_checkpoint
from .transforms import TransformConfig

LOG_COLUMNS = ("step", "total", "sl", "ssl_vis", "ssl_ir", "lambda", "ms")

PRESETS = {
    "d2_style": {"learning_rate": 1e-4, "weight_decay": 1e-5, "batch_size": 1, "crop_size": 256},
    "r2d2_style": {"learning_rate": 1e-4, "weight_decay": 5e-4, "batch_size": 2, "crop_size": 192},
}


class TrainingError(RuntimeError):
    """Raised when training aborts (non-finite loss, bad config, IO)."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    The named presets pin the published settings: d2_style trains with
    lr 1e-4 / weight decay 1e-5 / batch 1 / 256-crops, r2d2_style with
    lr 1e-4 / weight decay 5e-4 / batch 2 / 192-crops.
    """

    preset: str = "custom"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 1
    crop_size: int = 256
    max_steps: int | None = None
    epochs: int | None = None
    lam: float = 0.8
    seed: int = 0
    transform_config: TransformConfig = field(default_factory=TransformConfig)
    n_correspondences: int = 128
    margin: float = 1.0
    safe_radius: float = 8.0
    checkpoint_interval: int = 0  # 0 = final checkpoint only
    threads: int = 1
    checkpoint_path: str = "model.ckpt"
    log_path: str = "train_log.tsv"

    def __post_init__(self):
        if self.preset not in ("custom", *PRESETS):
            raise TrainingError(f"unknown preset {self.preset!r}")
        if self.preset in PRESETS:
            for key, value in PRESETS[self.preset].items():
                if getattr(self, key) != value:
                    raise TrainingError(
                        f"preset {self.preset} requires {key}={value}, got {getattr(self, key)}")
        if self.lam < 0:
            raise TrainingError(f"lambda weight must be >= 0, got {self.lam}")
        if self.max_steps is None and self.epochs is None:
            raise TrainingError("one of max_steps or epochs must be set")
        if self.batch_size < 1 or self.crop_size < 8:
            raise TrainingError("batch_size must be >= 1 and crop_size >= 8")

    @classmethod
    def d2_style(cls, **overrides) -> "TrainConfig":
        return cls(preset="d2_style", **PRESETS["d2_style"], **overrides)

    @classmethod
    def r2d2_style(cls, **overrides) -> "TrainConfig":
        return cls(preset="r2d2_style", **PRESETS["r2d2_style"], **overrides)

    def resolve_max_steps(self, n_pairs: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return self.epochs * max(1, n_pairs // self.batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transform_config"] = asdict(self.transform_config)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        tc = d.pop("transform_config")
        for key in ("scale_range", "rotation_range", "invert_threshold_range"):
            tc[key] = tuple(tc[key])
        return cls(transform_config=TransformConfig(**tc), **d)


@dataclass(frozen=True)
class TrainLogRow:
    step: int
    breakdown: LossBreakdown
    ms: float
    rng_id: str

    def to_tsv(self) -> str:
        b = self.breakdown
        return "\t".join([
            str(self.step), repr(b.total), repr(b.sl), repr(b.ssl_vis),
            repr(b.ssl_ir), repr(b.lam), f"{self.ms:.3f}",
        ])


@dataclass
class TrainResult:
    model: FeatureNet
    log_rows: list[TrainLogRow]
    checkpoint_path: Path
    log_path: Path


def _rng_state_id(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha1(state.encode()).hexdigest()[:12]


def _optimizer_arrays(model: FeatureNet, optimizer: torch.optim.AdamW):
    arrays: dict[str, np.ndarray] = {}
    steps: dict[str, float] = {}
    for name, param in model.named_parameters():
        state = optimizer.state.get(param)
        if not state:
            continue
        arrays[f"opt.{name}.exp_avg"] = state["exp_avg"].detach().numpy()
        arrays[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
        steps[name] = float(state["step"])
    return arrays, steps


def _restore_optimizer(model, optimizer, arrays, steps) -> None:
    for name, param in model.named_parameters():
        if name not in steps:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(steps[name]),
            "exp_avg": torch.from_numpy(arrays[f"opt.{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt.{name}.exp_avg_sq"].copy()),
        }


def _save_state(
    path: Path,
    model: FeatureNet,
    optimizer: torch.optim.AdamW,
    config: TrainConfig,
    step: int,
    rng: np.random.Generator,
) -> None:
    arrays = model.parameter_arrays()
    opt_arrays, opt_steps = _optimizer_arrays(model, optimizer)
    arrays.update(opt_arrays)
    meta = {
        "step": step,
        "train_config": config.to_dict(),
        "optimizer_steps": opt_steps,
        "rng_state": rng.bit_generator.state,
    }
    write_checkpoint(path, model.config, arrays, meta)


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    model_config: ModelConfig,
    loss_fn=reference_df_loss,
    resume_from: Path | str | None = None,
) -> TrainResult:
    """Run the optimization loop; returns the model, log rows and paths.

    With ``resume_from``, parameters, optimizer moments, step counter and
    rng state are restored from the checkpoint and the loop continues to
    ``config.max_steps`` total steps.
    """
    if len(manifest) == 0:
        raise TrainingError("training manifest is empty")
    torch.set_num_threads(config.threads)
    rng = np.random.default_rng(config.seed)
    model = FeatureNet(model_config)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999),
        eps=1e-8, weight_decay=config.weight_decay)
    start_step = 0
    if resume_from is not None:
        ckpt_config, arrays, meta = read_checkpoint(resume_from)
        if ckpt_config != model_config:
            raise TrainingError(
                f"checkpoint model config {ckpt_config} does not match {model_config}")
        model.load_parameter_arrays(
            {k: v for k, v in arrays.items() if not k.startswith("opt.")})
        _restore_optimizer(model, optimizer,
                           {k: v for k, v in arrays.items() if k.startswith("opt.")},
                           meta["optimizer_steps"])
        rng.bit_generator.state = meta["rng_state"]
        start_step = int(meta["step"])

    pairs = manifest.load_all()
    max_steps = config.resolve_max_steps(len(manifest))
    checkpoint_path = Path(config.checkpoint_path)
    log_path = Path(config.log_path)
    checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_rows: list[TrainLogRow] = []
    mode = "a" if start_step > 0 else "w"
    with open(log_path, mode) as log:
        if start_step == 0:
            log.write("#" + "\t".join(LOG_COLUMNS) + "\n")
        for step in range(start_step + 1, max_steps + 1):
            t0 = time.perf_counter()
            rng_id = _rng_state_id(rng)
            optimizer.zero_grad()
            sl_sum = vis_sum = ir_sum = 0.0
            graph_terms = []
            n_used = (0, 0, 0)
            for _ in range(config.batch_size):
                index = int(rng.integers(len(pairs)))
                crop = random_crop_pair(pairs[index], (config.crop_size, config.crop_size), rng)
                try:
                    breakdown, loss_t = total_loss(
                        model, crop, config.lam, config.transform_config, rng,
                        n_correspondences=config.n_correspondences,
                        margin=config.margin, safe_radius=config.safe_radius,
                        loss_fn=loss_fn)
                except LossError as exc:
                    log.write(f"# aborted at step {step}: {exc}\n")
                    raise TrainingError(f"loss failure at step {step}: {exc}") from exc
                sl_sum += breakdown.sl
                vis_sum += breakdown.ssl_vis
                ir_sum += breakdown.ssl_ir
                n_used = tuple(a + b for a, b in zip(n_used, breakdown.n_correspondences_used))
                graph_terms.append(loss_t)
            batch_loss = sum(graph_terms) / config.batch_size
            if not np.isfinite(float(batch_loss.detach())):
                log.write(f"# aborted at step {step}: non-finite loss\n")
                raise TrainingError(f"non-finite loss at step {step}")
            if batch_loss.requires_grad:
                batch_loss.backward()
            optimizer.step()
            for name, param in model.named_parameters():
                if not bool(torch.isfinite(param.detach()).all()):
                    log.write(f"# aborted at step {step}: non-finite parameter {name}\n")
                    raise TrainingError(f"non-finite parameter {name} at step {step}")
            b = config.batch_size
            breakdown = LossBreakdown(
                total=sl_sum / b + config.lam * (vis_sum / b + ir_sum / b),
                sl=sl_sum / b, ssl_vis=vis_sum / b, ssl_ir=ir_sum / b,
                lam=config.lam, n_correspondences_used=n_used)
            row = TrainLogRow(step=step, breakdown=breakdown,
                              ms=(time.perf_counter() - t0) * 1e3, rng_id=rng_id)
            log_rows.append(row)
            log.write(row.to_tsv() + "\n")
            if config.checkpoint_interval and step % config.checkpoint_interval == 0:
                _save_state(checkpoint_path, model, optimizer, config, step, rng)
        _save_state(checkpoint_path, model, optimizer, config, max_steps, rng)
    return TrainResult(model=model, log_rows=log_rows,
                       checkpoint_path=checkpoint_path, log_path=log_path)


def resume(
    checkpoint_path: Path | str,
    config: TrainConfig,
    manifest: DatasetManifest,
    loss_fn=reference_df_loss,
) -> TrainResult:
    """Continue a checkpointed run up to ``config.max_steps`` total steps."""
    ckpt_config, _, meta = read_checkpoint(checkpoint_path)
    saved = TrainConfig.from_dict(meta["train_config"])
    if replace(saved, max_steps=config.max_steps, epochs=config.epochs) != config:
        raise TrainingError(
            "resume config differs from the checkpointed one in fields other "
            "than max_steps/epochs")
    return train(config, manifest, ckpt_config, loss_fn=loss_fn,
                 resume_from=checkpoint_path)
