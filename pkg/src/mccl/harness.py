"""Training and evaluation orchestration.

One training step is: forward both routes per selected stage, classify,
asymmetric loss, AdamW step under a 1-cycle schedule, EMA shadow update,
then one momentum prototype update per stage (after the optimizer step,
using the assignments computed in the forward pass). Evaluation always
runs with the EMA shadow parameters and never touches the bank.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .allocation import allocate_prototypes
from .backbone import MODE_CONV, BackboneConfig, ConvBackbone
from .clustering import momentum_update
from .config import RunConfig, config_to_text, parse_config_text
from .data import Dataset, DatasetManifest, read_dataset
from .errors import ConfigError, DataError, NumericalError
from .label_prior import load_label_embeddings
from .losses import asymmetric_loss
from .metrics import MetricsReport, evaluate_predictions
from .model import (
    IntentClassifier,
    collate_labels,
    collate_stage_features,
    resolve_stage_indices,
)
from .prototypes import PrototypeBank, build_prototype_bank, load_bank

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------


def one_cycle_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    warmup_frac: float = 0.3,
    div_factor: float = 25.0,
    final_div_factor: float = 1e4,
) -> float:
    """Cosine 1-cycle: ramp from max_lr/div_factor to exactly max_lr at the
    warmup fraction, then anneal to max_lr/final_div_factor."""
    if total_steps < 1:
        raise ConfigError("schedule: total_steps must be >= 1")
    start = max_lr / div_factor
    end = max_lr / final_div_factor
    peak = int(round(warmup_frac * (total_steps - 1)))
    if total_steps == 1 or step >= total_steps:
        return max_lr if step == peak else end
    if step <= peak:
        frac = 1.0 if peak == 0 else step / peak
        return start + (max_lr - start) * 0.5 * (1.0 - math.cos(math.pi * frac))
    frac = (step - peak) / (total_steps - 1 - peak)
    return end + (max_lr - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# EMA shadow parameters
# ---------------------------------------------------------------------------


class EmaShadow:
    """Exponential moving average of model parameters.

    ``decay`` 1.0 freezes the shadow at initialization exactly.
    """

    def __init__(self, model: torch.nn.Module, decay: float):
        if not 0.0 <= decay <= 1.0:
            raise ConfigError(f"ema: decay {decay} outside [0, 1]")
        self.decay = decay
        self.shadow = {
            name: param.detach().clone() for name, param in model.named_parameters()
        }

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        if self.decay == 1.0:
            return
        for name, param in model.named_parameters():
            self.shadow[name].mul_(self.decay).add_(param.detach(), alpha=1.0 - self.decay)

    @contextmanager
    def applied(self, model: torch.nn.Module):
        """Temporarily swap the shadow weights into the model."""
        backup = {name: p.detach().clone() for name, p in model.named_parameters()}
        with torch.no_grad():
            for name, param in model.named_parameters():
                param.copy_(self.shadow[name])
        try:
            yield
        finally:
            with torch.no_grad():
                for name, param in model.named_parameters():
                    param.copy_(backup[name])


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------


def _conv_grid_sizes(h: int, w: int, strides) -> list[int]:
    lens = []
    for s in strides:
        h = (h - 1) // s + 1
        w = (w - 1) // s + 1
        lens.append(h * w)
    return lens


def stage_geometry(config: RunConfig, manifest: DatasetManifest):
    """(all_dims, all_memory_lens, resolved stage indices) for a run."""
    if config.backbone_mode == MODE_CONV:
        if len(manifest.stage_shapes) != 1:
            raise ConfigError("conv backbone expects a single raw input stage")
        h, w, _ = manifest.stage_shapes[0]
        dims = list(config.backbone_widths)
        lens = _conv_grid_sizes(h, w, config.backbone_downsamples)
    else:
        dims = [d for _, _, d in manifest.stage_shapes]
        lens = [h * w for h, w, _ in manifest.stage_shapes]
    indices = resolve_stage_indices(config.stages, len(dims))
    return dims, lens, indices


def build_model(
    config: RunConfig,
    manifest: DatasetManifest,
    bank: PrototypeBank | None,
    label_embeddings: torch.Tensor | None = None,
) -> IntentClassifier:
    dims, lens, indices = stage_geometry(config, manifest)
    backbone = None
    backbone_config = BackboneConfig(mode=config.backbone_mode)
    if config.backbone_mode == MODE_CONV:
        backbone_config = BackboneConfig(
            mode=MODE_CONV,
            widths=tuple(config.backbone_widths),
            downsamples=tuple(config.backbone_downsamples),
        )
        backbone = ConvBackbone(backbone_config, manifest.stage_shapes[0][2])
    if label_embeddings is None:
        label_embeddings = load_label_embeddings(
            manifest.label_names,
            config.label_embed_dim,
            config.label_embeddings_path or None,
        )
    return IntentClassifier(
        num_classes=manifest.num_classes,
        stage_dims=[dims[i] for i in indices],
        memory_lens=[lens[i] for i in indices],
        stage_indices=indices,
        label_embeddings=label_embeddings,
        bank=bank,
        d_model=config.d_model,
        num_heads=config.num_heads,
        decoder_layers=config.decoder_layers,
        ffn_factor=config.ffn_factor,
        tau=config.tau,
        use_reconstructed=config.use_reconstructed,
        share_branch_weights=config.share_branch_weights,
        backbone=backbone,
        backbone_config=backbone_config,
    )


def extract_feature_dataset(dataset: Dataset, model: IntentClassifier) -> Dataset:
    """Materialize backbone-stage features as a passthrough-style dataset.

    Used to seed prototypes in conv mode: per-class clustering runs on the
    (freshly initialized) backbone's stage outputs, not on raw grids.
    """
    from .data import MultiLabelSample, PatchFeatureMap

    conv = model.backbone
    if conv is None:
        return dataset
    new_samples = []
    shapes = None
    with torch.no_grad():
        for sample in dataset.samples:
            feats = collate_stage_features([sample], range(len(sample.features_by_stage)))
            stages = conv(
                feats[0].reshape(
                    1, sample.features_by_stage[0].grid[0],
                    sample.features_by_stage[0].grid[1], -1,
                )
            )
            maps = []
            shapes = []
            for t in stages:
                p, d = t.shape[1], t.shape[2]
                side = int(round(p**0.5))
                maps.append(PatchFeatureMap(t[0].numpy(), (side, p // side)))
                shapes.append((side, p // side, d))
            new_samples.append(MultiLabelSample(sample.sample_id, maps, sample.labels))
    manifest = DatasetManifest(
        num_classes=dataset.manifest.num_classes,
        label_names=dataset.manifest.label_names,
        stage_shapes=shapes,
        mode=dataset.manifest.mode,
        counts=dataset.manifest.counts.copy(),
        num_samples=len(new_samples),
    )
    return Dataset(manifest, new_samples)


def init_bank(
    config: RunConfig,
    train_ds: Dataset,
    model: IntentClassifier | None = None,
    stage_indices: list[int] | None = None,
) -> PrototypeBank:
    """Allocate per-class budgets from label frequencies and cluster."""
    counts = train_ds.manifest.counts
    plan = allocate_prototypes(counts, config.k)
    source = train_ds
    if config.backbone_mode == MODE_CONV:
        if model is None:
            raise ConfigError("conv mode: bank initialization needs the model's backbone")
        source = extract_feature_dataset(train_ds, model)
    if stage_indices is None:
        _, _, stage_indices = stage_geometry(config, train_ds.manifest)
    return build_prototype_bank(
        source,
        plan,
        stage_indices=stage_indices,
        seed=config.seed,
        kmeans_batch=config.kmeans_batch,
        kmeans_iters=config.kmeans_iters,
        epsilon=config.epsilon,
        momentum=config.momentum,
    )


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: RunConfig
    manifest_info: dict
    model: IntentClassifier
    bank: PrototypeBank | None
    ema: EmaShadow
    optimizer_state: dict | None = None
    rng: dict | None = None
    epoch: int = 0
    global_step: int = 0


def _manifest_info(manifest: DatasetManifest) -> dict:
    return {
        "num_classes": manifest.num_classes,
        "label_names": list(manifest.label_names),
        "stage_shapes": [list(s) for s in manifest.stage_shapes],
        "mode": manifest.mode,
    }


def _manifest_from_info(info: dict) -> DatasetManifest:
    return DatasetManifest(
        num_classes=info["num_classes"],
        label_names=list(info["label_names"]),
        stage_shapes=[tuple(s) for s in info["stage_shapes"]],
        mode=info["mode"],
        counts=np.zeros(info["num_classes"], dtype=np.int64),
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    bank_payload = None
    if ckpt.bank is not None:
        bank_payload = {
            "stages": [m.detach().clone() for m in ckpt.bank.stages],
            "owner": torch.from_numpy(ckpt.bank.owner.copy()),
            "stage_indices": list(ckpt.bank.stage_indices),
            "epsilon": ckpt.bank.epsilon,
            "momentum": ckpt.bank.momentum,
            "version": ckpt.bank.version,
        }
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config_text": config_to_text(ckpt.config),
        "manifest": ckpt.manifest_info,
        "model_state": ckpt.model.state_dict(),
        "ema_shadow": ckpt.ema.shadow,
        "ema_decay": ckpt.ema.decay,
        "optimizer_state": ckpt.optimizer_state,
        "bank": bank_payload,
        "rng": ckpt.rng,
        "epoch": ckpt.epoch,
        "global_step": ckpt.global_step,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version")
    config = parse_config_text(payload["config_text"])
    manifest = _manifest_from_info(payload["manifest"])

    bank = None
    if payload["bank"] is not None:
        b = payload["bank"]
        bank = PrototypeBank(
            stages=[m.clone() for m in b["stages"]],
            owner=b["owner"].numpy().copy(),
            stage_indices=list(b["stage_indices"]),
            epsilon=b["epsilon"],
            momentum=b["momentum"],
            version=b["version"],
        )

    embed_dim = payload["model_state"]["label_embeddings"].shape[1]
    placeholder = load_label_embeddings(manifest.label_names, embed_dim)
    model = build_model(config, manifest, bank, label_embeddings=placeholder)
    model.load_state_dict(payload["model_state"])

    ema = EmaShadow(model, payload["ema_decay"])
    ema.shadow = {k: v.clone() for k, v in payload["ema_shadow"].items()}
    return Checkpoint(
        config=config,
        manifest_info=payload["manifest"],
        model=model,
        bank=bank,
        ema=ema,
        optimizer_state=payload["optimizer_state"],
        rng=payload["rng"],
        epoch=payload["epoch"],
        global_step=payload["global_step"],
    )


# ---------------------------------------------------------------------------
# Train / evaluate
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metric_log: list[tuple[int, MetricsReport]] = field(default_factory=list)
    lr_log: list[float] = field(default_factory=list)


def _batches(n: int, batch_size: int, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def predict_scores(
    model: IntentClassifier, dataset: Dataset, batch_size: int = 64
) -> np.ndarray:
    """Probability matrix over a dataset with the model's current weights."""
    model.eval()
    num_stages = len(dataset.manifest.stage_shapes)
    outs = []
    with torch.no_grad():
        for chunk in _batches(len(dataset), batch_size):
            samples = [dataset.samples[i] for i in chunk]
            feats = collate_stage_features(samples, range(num_stages))
            outs.append(model(feats).probs.numpy())
    model.train()
    return np.concatenate(outs) if outs else np.zeros((0, dataset.manifest.num_classes))


def evaluate_model(
    model: IntentClassifier,
    ema: EmaShadow | None,
    dataset: Dataset,
    threshold: float = 0.5,
    batch_size: int = 64,
) -> MetricsReport:
    """Metric suite with EMA parameters; the bank is never touched."""
    if len(dataset) == 0:
        raise DataError("evaluate: empty dataset")
    if ema is not None:
        with ema.applied(model):
            scores = predict_scores(model, dataset, batch_size)
    else:
        scores = predict_scores(model, dataset, batch_size)
    return evaluate_predictions(scores, dataset.labels_matrix(), threshold)


def _check_compatible(manifest_info: dict, manifest: DatasetManifest) -> None:
    if manifest_info["num_classes"] != manifest.num_classes:
        raise ConfigError(
            f"checkpoint expects {manifest_info['num_classes']} classes, "
            f"dataset has {manifest.num_classes}"
        )
    if [list(s) for s in manifest.stage_shapes] != manifest_info["stage_shapes"]:
        raise ConfigError(
            f"checkpoint stage shapes {manifest_info['stage_shapes']} do not "
            f"match dataset {manifest.stage_shapes}"
        )


def evaluate_checkpoint(
    ckpt: Checkpoint, dataset: Dataset, threshold: float | None = None
) -> MetricsReport:
    _check_compatible(ckpt.manifest_info, dataset.manifest)
    t = ckpt.config.threshold if threshold is None else threshold
    return evaluate_model(ckpt.model, ckpt.ema, dataset, t, ckpt.config.batch_size)


def resolve_split_dir(data_path: str | Path, split: str) -> Path:
    """Dataset root with split subdirectories, or a single split directory."""
    root = Path(data_path)
    if (root / split / "manifest").exists():
        return root / split
    if (root / "manifest").exists():
        return root
    raise DataError(f"{data_path}: no dataset found (looked for {split}/manifest and manifest)")


def train(
    config: RunConfig,
    train_ds: Dataset,
    val_ds: Dataset | None = None,
    out_dir: str | Path | None = None,
    bank: PrototypeBank | None = None,
    bank_path: str | Path | None = None,
) -> TrainResult:
    """Full training run; returns the checkpoint and per-epoch metric log."""
    config.validate()
    torch.manual_seed(config.seed)
    data_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))

    manifest = train_ds.manifest
    model = build_model(config, manifest, bank=None)
    if config.use_reconstructed:
        if bank is None:
            bank = load_bank(bank_path) if bank_path is not None else init_bank(
                config, train_ds, model
            )
        model.attach_bank(bank)
    ema = EmaShadow(model, config.ema_decay)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.max_lr, weight_decay=config.weight_decay
    )

    n = len(train_ds)
    if n == 0 and config.epochs > 0:
        raise DataError("train: empty training split")
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = max(1, steps_per_epoch * max(1, config.epochs))
    eval_ds = val_ds if val_ds is not None and len(val_ds) > 0 else train_ds

    num_stages = len(manifest.stage_shapes)
    lr_log: list[float] = []
    metric_log: list[tuple[int, MetricsReport]] = []
    global_step = 0

    for epoch in range(config.epochs):
        order = data_rng.permutation(n)
        for chunk in _batches(n, config.batch_size, order):
            lr = one_cycle_lr(global_step, total_steps, config.max_lr, config.warmup_frac)
            for group in optimizer.param_groups:
                group["lr"] = lr
            lr_log.append(lr)

            samples = [train_ds.samples[i] for i in chunk]
            feats = collate_stage_features(samples, range(num_stages))
            labels = collate_labels(samples)
            out = model(feats)
            loss = asymmetric_loss(out.probs, labels, config.gamma_pos, config.gamma_neg)

            optimizer.zero_grad()
            loss.backward()
            loss_value = float(loss.detach())
            grad_norm = math.sqrt(
                sum(
                    float(p.grad.detach().pow(2).sum())
                    for p in model.parameters()
                    if p.grad is not None
                )
            )
            if not math.isfinite(loss_value) or not math.isfinite(grad_norm):
                raise NumericalError(
                    f"non-finite loss at step {global_step} "
                    f"(loss {loss_value!r}, lr {lr:.3e}, grad norm {grad_norm!r})"
                )
            optimizer.step()
            ema.update(model)
            if config.use_reconstructed:
                for pos, assignment in enumerate(out.assignments):
                    if assignment is not None:
                        momentum_update(
                            bank,
                            out.stage_features[pos],
                            assignment,
                            pos,
                            config.momentum,
                            config.mass_floor,
                        )
            global_step += 1

        report = evaluate_model(model, ema, eval_ds, config.threshold, config.batch_size)
        metric_log.append((epoch + 1, report))
        logger.info(
            "epoch %d/%d: loss %.4f, samples_f1 %.4f",
            epoch + 1,
            config.epochs,
            loss_value,
            report.samples_f1,
        )

    ckpt = Checkpoint(
        config=config,
        manifest_info=_manifest_info(manifest),
        model=model,
        bank=bank,
        ema=ema,
        optimizer_state=optimizer.state_dict(),
        rng={
            "torch": torch.get_rng_state(),
            "data": data_rng.bit_generator.state,
        },
        epoch=config.epochs,
        global_step=global_step,
    )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out / "checkpoint.pt")
        (out / "config.txt").write_text(config_to_text(config), encoding="utf-8")
        (out / "lr_log.txt").write_text(
            "".join(f"{lr!r}\n" for lr in lr_log), encoding="utf-8"
        )
        with open(out / "metrics_log.txt", "w", encoding="utf-8") as fh:
            for epoch, report in metric_log:
                scalars = " ".join(f"{k}={v:.6f}" for k, v in report.scalar_items())
                fh.write(f"epoch={epoch} {scalars}\n")
    return TrainResult(checkpoint=ckpt, metric_log=metric_log, lr_log=lr_log)


def train_from_dir(
    config: RunConfig,
    data_dir: str | Path,
    out_dir: str | Path | None = None,
    bank_path: str | Path | None = None,
) -> TrainResult:
    train_ds = read_dataset(resolve_split_dir(data_dir, "train"))
    val_ds = None
    try:
        val_dir = resolve_split_dir(data_dir, "val")
        if val_dir != resolve_split_dir(data_dir, "train"):
            val_ds = read_dataset(val_dir)
    except DataError:
        val_ds = None
    return train(config, train_ds, val_ds, out_dir=out_dir, bank_path=bank_path)
