"""Self-supervised adaptation loop.

Each step runs both branches on a batch of registered pairs, computes
the domain-adversarial loss on extractor levels 3-5 (through gradient
reversal) plus the foreground-masked pyramid alignment loss, and takes
one Adam step. The RGB branch and the shared heads stay frozen; a
single optimizer instance covers the thermal branch and the
discriminators, with the reversal layer realizing the min-max split.

Foreground masks are computed once per pair and cached on disk keyed by
the RGB file's content hash; watershed flooding would otherwise
dominate the step time.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import masks as mask_ops
from .adversarial import adversarial_loss, build_discriminators, grl_factor
from .alignment import ALIGN_WEIGHTS_DEFAULT, pyramid_alignment_loss
from .checkpoint import load_modules, read_config, read_state, save_checkpoint
from .data import PairRecord, load_image, read_keyvalue, read_manifest
from .detector import EXTRACTOR_STRIDES, ModelConfig, TwoBranchDetector, image_to_tensor
from .fusion import LEVEL_SCALES_DEFAULT, THERMAL_WEIGHT_DEFAULT, FusionWeights, infer

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "L_D3", "L_D4", "L_D5", "L_FPN", "lambda_adapt", "lr")


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; silent NaN skipping would
    hide min-max instability."""


@dataclass
class TrainConfig:
    # Optimization
    batch_size: int = 16
    iterations: int = 10_000
    lr: float = 1e-3
    lr_decay: float = 0.9
    gamma: float = 2.0
    seed: int = 0
    # Loss weights
    align_weights: tuple[float, ...] = ALIGN_WEIGHTS_DEFAULT
    thermal_weight: float = THERMAL_WEIGHT_DEFAULT
    level_scales: tuple[float, ...] = LEVEL_SCALES_DEFAULT
    align_average: str = "masked"
    # Ablation switches
    no_dat: bool = False
    no_fg_mask: bool = False
    detector_pred_mask: bool = False
    pixelwise_dat: bool = False
    # Model
    backbone_widths: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    fpn_channels: int = 64
    anchor_ratios: tuple[float, ...] = (0.7, 1.0, 1.4)
    anchor_scale: float = 4.0
    score_threshold: float = 0.1
    nms_threshold: float = 0.15
    max_detections: int = 100
    # Bookkeeping
    checkpoint_every: int = 1000
    math_threads: int = 0  # 0 = leave torch defaults; 1 = bitwise determinism

    def __post_init__(self) -> None:
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone_widths=tuple(self.backbone_widths),
            blocks_per_stage=self.blocks_per_stage,
            fpn_channels=self.fpn_channels,
            anchor_ratios=tuple(self.anchor_ratios),
            anchor_scale=self.anchor_scale,
            score_threshold=self.score_threshold,
            nms_threshold=self.nms_threshold,
            max_detections=self.max_detections,
        )

    def fusion_weights(self) -> FusionWeights:
        return FusionWeights(self.thermal_weight, tuple(self.level_scales))

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                out[f.name] = ",".join(repr(v) for v in value)
            elif isinstance(value, bool):
                out[f.name] = "true" if value else "false"
            else:
                out[f.name] = str(value)
        return out

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name].strip()
            default = getattr(cls, f.name, f.default)
            if isinstance(default, bool):
                kwargs[f.name] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, tuple):
                elem = int if f.name == "backbone_widths" else float
                kwargs[f.name] = tuple(elem(v) for v in raw.split(",") if v)
            elif isinstance(default, int):
                kwargs[f.name] = int(raw)
            elif isinstance(default, float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(read_keyvalue(path))


def lr_at_epoch(epoch: int, base_lr: float = 1e-3, decay: float = 0.9) -> float:
    """Exponentially decayed rate, one decay per complete dataset pass."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * decay**epoch


def parameter_checksum(module: torch.nn.Module) -> str:
    """SHA-1 over all parameters and buffers, in state-dict order."""
    digest = hashlib.sha1()
    for key, tensor in module.state_dict().items():
        digest.update(key.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def _mask_cache_key(rgb_path: Path, pred_mask: bool) -> str:
    digest = hashlib.sha1(rgb_path.read_bytes())
    if pred_mask:
        digest.update(b"detector-pred-mask")
    return digest.hexdigest()


def _prediction_mask(detector: TwoBranchDetector, rgb: np.ndarray) -> np.ndarray:
    """Alternative masking: FG = union of the frozen RGB detector's boxes."""
    boxes, _ = infer(detector, rgb, None, mode="rgb_only")
    mask = np.zeros(rgb.shape[:2], dtype=bool)
    h, w = mask.shape
    for x1, y1, x2, y2 in boxes:
        mask[
            int(np.clip(y1, 0, h)): int(np.clip(np.ceil(y2), 0, h)),
            int(np.clip(x1, 0, w)): int(np.clip(np.ceil(x2), 0, w)),
        ] = True
    return mask


def prepare_fg_masks(
    records: list[PairRecord],
    cache_dir: Path,
    detector: TwoBranchDetector | None = None,
    use_prediction_mask: bool = False,
) -> list[Path]:
    """Compute (or reuse) the full-resolution FG_ONE mask per pair."""
    cache_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in records:
        key = _mask_cache_key(rec.rgb_path, use_prediction_mask)
        path = cache_dir / f"{key}.npy"
        if not path.exists():
            rgb = load_image(rec.rgb_path)
            if use_prediction_mask:
                if detector is None:
                    raise ValueError("prediction masking needs the detector")
                mask = _prediction_mask(detector, rgb)
            else:
                mask = mask_ops.foreground_mask(rgb)
            np.save(path, mask)
        paths.append(path)
    return paths


def _resize_batch_masks(
    fg_full: np.ndarray, level_dims: list[tuple[int, int]]
) -> list[torch.Tensor]:
    """(B, H, W) bool -> one (B, h, w) bool tensor per level."""
    out = []
    for hw in level_dims:
        level = np.stack([mask_ops.resize_mask(m, hw) for m in fg_full])
        out.append(torch.from_numpy(level))
    return out


def train_step(
    detector: TwoBranchDetector,
    discriminators,
    optimizer: torch.optim.Optimizer,
    rgb_batch: torch.Tensor,
    thermal_batch: torch.Tensor,
    fg_full: np.ndarray,
    grl: float,
    config: TrainConfig,
) -> dict[str, float]:
    """One optimization step; returns the per-loss scalars for logging."""
    if rgb_batch.shape[0] == 0:
        raise ValueError("empty batch")
    detector.train()
    if discriminators is not None:
        discriminators.train()

    with torch.no_grad():
        rgb_levels = detector.rgb.extract(rgb_batch)
        rgb_pyramid = detector.rgb.fpn(rgb_levels)
    thermal_levels = detector.thermal.extract(thermal_batch)
    thermal_pyramid = detector.thermal.fpn(thermal_levels)

    image_hw = rgb_batch.shape[-2:]
    if config.no_fg_mask:
        align_masks = [
            torch.ones((rgb_batch.shape[0], *f.shape[-2:]), dtype=torch.bool)
            for f in thermal_pyramid
        ]
    else:
        align_masks = _resize_batch_masks(
            fg_full, [tuple(f.shape[-2:]) for f in thermal_pyramid]
        )

    per_level_adv = [0.0, 0.0, 0.0]
    total = None
    if not config.no_dat:
        extractor_masks = None
        if config.pixelwise_dat:
            dims = [(image_hw[0] // s, image_hw[1] // s) for s in EXTRACTOR_STRIDES]
            extractor_masks = _resize_batch_masks(fg_full, dims)
        adv, per_level_adv = adversarial_loss(
            rgb_levels, thermal_levels, discriminators, grl,
            gamma=config.gamma, fg_masks=extractor_masks,
        )
        total = adv

    align, _ = pyramid_alignment_loss(
        rgb_pyramid, thermal_pyramid, align_masks,
        tuple(config.align_weights), config.align_average,
    )
    total = align if total is None else total + align

    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite training loss: {float(total.detach())}")

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    return {
        "L_D3": per_level_adv[0],
        "L_D4": per_level_adv[1],
        "L_D5": per_level_adv[2],
        "L_FPN": float(align.detach()),
        "total": float(total.detach()),
    }


def _load_batch(records: list[PairRecord], mask_paths: list[Path], indices) -> tuple:
    rgbs, thermals, fg = [], [], []
    for i in indices:
        rec = records[i]
        try:
            rgb = load_image(rec.rgb_path)
            thermal = load_image(rec.thermal_path)
        except (OSError, ValueError) as exc:
            raise RuntimeError(f"failed to load pair {rec.pair_id}: {exc}") from exc
        if rgb.shape[:2] != thermal.shape[:2]:
            raise ValueError(f"pair {rec.pair_id} is not registered: {rgb.shape} vs {thermal.shape}")
        rgbs.append(image_to_tensor(rgb))
        thermals.append(image_to_tensor(thermal))
        fg.append(np.load(mask_paths[i]))
    return torch.cat(rgbs), torch.cat(thermals), np.stack(fg)


def build_model_from_checkpoint(checkpoint_dir: str | Path) -> tuple[TwoBranchDetector, TrainConfig]:
    """Rebuild the detector described by a checkpoint bundle."""
    config = TrainConfig.from_dict(read_config(checkpoint_dir))
    detector = TwoBranchDetector(config.model_config())
    load_modules(checkpoint_dir, {"model": detector})
    return detector, config


def train(
    manifest_path: str | Path,
    config: TrainConfig,
    out_dir: str | Path,
    init_checkpoint: str | Path | None = None,
) -> Path:
    """Run the full adaptation; returns the final checkpoint directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.math_threads > 0:
        torch.set_num_threads(config.math_threads)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    records = read_manifest(manifest_path)
    if len(records) < config.batch_size:
        raise ValueError(
            f"manifest has {len(records)} pairs, fewer than batch size {config.batch_size}"
        )

    if init_checkpoint is not None:
        stored = TrainConfig.from_dict(read_config(init_checkpoint))
        model_fields = (
            "backbone_widths", "blocks_per_stage", "fpn_channels",
            "anchor_ratios", "anchor_scale",
        )
        adopted = {f: getattr(stored, f) for f in model_fields}
        if any(getattr(config, f) != v for f, v in adopted.items()):
            logger.info("adopting model dimensions from checkpoint %s", init_checkpoint)
            config = replace(config, **adopted)
        detector = TwoBranchDetector(config.model_config())
        load_modules(init_checkpoint, {"model": detector})
        phase = read_state(init_checkpoint).get("phase", "pretrained")
    else:
        detector = TwoBranchDetector(config.model_config())
        phase = "init"

    if phase != "adapted":
        detector.sync_thermal_from_rgb()
    detector.freeze_rgb_and_heads()

    discriminators = None
    named_params: list[tuple[str, torch.Tensor]] = [
        (f"model.{n}", p) for n, p in detector.named_parameters() if p.requires_grad
    ]
    if not config.no_dat:
        discriminators = build_discriminators(
            detector.config.extractor_channels, pixelwise=config.pixelwise_dat
        )
        named_params += [
            (f"discriminators.{n}", p) for n, p in discriminators.named_parameters()
        ]
    optimizer = torch.optim.Adam([p for _, p in named_params], lr=config.lr)

    mask_paths = prepare_fg_masks(
        records, out_dir / "mask_cache",
        detector=detector, use_prediction_mask=config.detector_pred_mask,
    )

    modules = {"model": detector}
    if discriminators is not None:
        modules["discriminators"] = discriminators

    def save(directory: Path, iteration: int) -> Path:
        return save_checkpoint(
            directory, modules, config.to_dict(), iteration,
            optimizer=optimizer, optimizer_params=named_params, phase="adapted",
        )

    epoch_len = max(1, len(records) // config.batch_size)
    order = rng.permutation(len(records))
    log_path = out_dir / "training_log.csv"
    with open(log_path, "w", newline="") as log_file:
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)
        for iteration in range(config.iterations):
            epoch = iteration // epoch_len
            step_in_epoch = iteration % epoch_len
            if step_in_epoch == 0 and iteration > 0:
                order = rng.permutation(len(records))
            lr = lr_at_epoch(epoch, config.lr, config.lr_decay)
            for group in optimizer.param_groups:
                group["lr"] = lr
            indices = order[
                step_in_epoch * config.batch_size: (step_in_epoch + 1) * config.batch_size
            ]
            rgb_batch, thermal_batch, fg_full = _load_batch(records, mask_paths, indices)
            grl = grl_factor(iteration, config.iterations)
            losses = train_step(
                detector, discriminators, optimizer,
                rgb_batch, thermal_batch, fg_full, grl, config,
            )
            writer.writerow([
                iteration,
                f"{losses['L_D3']:.6f}", f"{losses['L_D4']:.6f}", f"{losses['L_D5']:.6f}",
                f"{losses['L_FPN']:.6f}", f"{grl:.6f}", f"{lr:.8f}",
            ])
            if (iteration + 1) % 100 == 0 or iteration == 0:
                log_file.flush()
                logger.info(
                    "iter %d/%d adv=%.4f align=%.4f lr=%.2e",
                    iteration + 1, config.iterations,
                    losses["L_D3"] + losses["L_D4"] + losses["L_D5"],
                    losses["L_FPN"], lr,
                )
            if config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0:
                save(out_dir / "checkpoints" / f"iter_{iteration + 1:06d}", iteration + 1)

    return save(out_dir / "checkpoint_final", config.iterations)
