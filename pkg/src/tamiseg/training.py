"""Two-phase training orchestration.

Phase I pretrains the encoder with a lightweight head under the consistency
objective on (image, perturbed-image) pairs. Phase II fine-tunes the full
segmenter end-to-end: hybrid mask loss on the decoded prediction plus a
lambda-weighted distillation loss against the frozen teacher.

Checkpoints are a single file: a canonical JSON header (format version,
architecture, identities, byte offsets) followed by named raw little-endian
tensor blocks. Saving the result of a load is byte-identical to the
original file.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .distill import HashPatchTeacher, TeacherModel
from .encoder import ARCH_PRESETS, ArchConfig, ConsistencyEncoder, PretrainHead
from .evaluation import dice_metric
from .losses import binarize, consistency_loss, mask_loss, total_loss
from .model import TextGuidedSegmenter
from .synth_data import PerturbConfig, perturb
from .text_align import HashTextEncoder, TextModel


class TrainingError(RuntimeError):
    """Training aborted (empty dataset, non-finite loss, bad phase wiring)."""


class CheckpointError(RuntimeError):
    """Malformed checkpoint file or architecture mismatch on load."""


CHECKPOINT_MAGIC = b"TSEGCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    phase: str = "pretrain"            # "pretrain" | "finetune"
    arch: str = "tiny"                 # preset name, see encoder.ARCH_PRESETS
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 300
    patience: int = 100
    max_steps: int | None = None       # optional hard cap across epochs
    seed: int = 0
    theta: float = 0.5
    lam: float = 0.1
    eps_clamp: float = 1e-7
    eps_dice: float = 1.0
    consistency: bool = True           # Phase-I agreement term on/off
    freeze_encoder: bool = False       # Phase-II encoder freeze switch
    use_cma: bool = True
    use_sed: bool = True
    use_sad: bool = True
    teacher: str = "hash:0"
    text_encoder: str = "hash:0"
    val_fraction: float = 0.1
    deterministic: bool = False
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    out_dir: str | None = None

    def validate(self) -> None:
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.arch not in ARCH_PRESETS:
            raise ValueError(f"unknown arch preset {self.arch!r}")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if self.patience < 0 or self.patience > self.max_epochs:
            raise ValueError(f"patience must be in [0, max_epochs], got {self.patience}")
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must be in (0,1), got {self.theta}")
        if self.lam < 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0,1), got {self.val_fraction}")

    def arch_config(self) -> ArchConfig:
        return ARCH_PRESETS[self.arch]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["perturb"] = self.perturb.to_dict()
        return d


@dataclass
class Checkpoint:
    phase: str
    arch: dict
    flags: dict
    epoch: int
    step: int
    best_metric: float
    teacher_id: str | None
    text_encoder_id: str | None
    rng_numpy: dict | None
    tensors: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION
    extra: dict = field(default_factory=dict)


_DTYPES = {"float32": np.float32, "uint8": np.uint8, "int64": np.int64}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    names = sorted(ckpt.tensors)
    index = {}
    offset = 0
    for name in names:
        arr = ckpt.tensors[name]
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        nbytes = arr.nbytes
        index[name] = {
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": nbytes,
        }
        offset += nbytes
    header = {
        "format_version": ckpt.version,
        "phase": ckpt.phase,
        "arch": ckpt.arch,
        "flags": ckpt.flags,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "best_metric": ckpt.best_metric,
        "teacher": ckpt.teacher_id,
        "text_encoder": ckpt.text_encoder_id,
        "rng_numpy": ckpt.rng_numpy,
        "extra": ckpt.extra,
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            arr = np.ascontiguousarray(ckpt.tensors[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            fh.write(arr.tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {header.get('format_version')}")
    base = 16 + hlen
    tensors = {}
    for name, meta in header["tensors"].items():
        dt = _DTYPES[meta["dtype"]]
        start = base + meta["offset"]
        arr = np.frombuffer(data[start:start + meta["nbytes"]], dtype=dt)
        tensors[name] = arr.reshape(meta["shape"]).copy()
    return Checkpoint(
        phase=header["phase"],
        arch=header["arch"],
        flags=header["flags"],
        epoch=header["epoch"],
        step=header["step"],
        best_metric=header["best_metric"],
        teacher_id=header["teacher"],
        text_encoder_id=header["text_encoder"],
        rng_numpy=header["rng_numpy"],
        tensors=tensors,
        version=header["format_version"],
        extra=header["extra"],
    )


def _model_tensors(model: torch.nn.Module, optimizer: torch.optim.Optimizer | None) -> dict:
    tensors = {}
    for name, value in model.state_dict().items():
        tensors[f"model/{name}"] = value.detach().cpu().numpy().astype(np.float32)
    if optimizer is not None:
        name_of = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                pname = name_of[id(p)]
                tensors[f"opt/{pname}/exp_avg"] = (
                    state["exp_avg"].detach().cpu().numpy().astype(np.float32))
                tensors[f"opt/{pname}/exp_avg_sq"] = (
                    state["exp_avg_sq"].detach().cpu().numpy().astype(np.float32))
                tensors[f"opt/{pname}/step"] = np.asarray(
                    [float(state["step"])], dtype=np.float32)
    tensors["rng/torch"] = torch.get_rng_state().numpy().astype(np.uint8)
    return tensors


def load_model_weights(model: torch.nn.Module, ckpt: Checkpoint, prefix: str = "model/",
                       submodule: str | None = None) -> None:
    """Copies `prefix`-keyed tensors into the model (or one submodule of it).
    Missing keys fail loudly."""
    target = model if submodule is None else getattr(model, submodule)
    want = dict(target.state_dict())
    state = {}
    skey = f"{prefix}{submodule}." if submodule is not None else prefix
    for key, arr in ckpt.tensors.items():
        if key.startswith(skey):
            state[key[len(skey):]] = torch.from_numpy(arr)
    missing = sorted(set(want) - set(state))
    if missing:
        raise CheckpointError(f"checkpoint lacks weights for: {missing[:4]}...")
    for key, value in state.items():
        if key in want and tuple(want[key].shape) != tuple(value.shape):
            raise CheckpointError(
                f"shape mismatch for {key}: checkpoint {tuple(value.shape)} "
                f"vs model {tuple(want[key].shape)}")
    target.load_state_dict({k: v for k, v in state.items() if k in want})


def make_teacher(spec: str, token_dim: int) -> TeacherModel:
    kind, _, arg = spec.partition(":")
    if kind != "hash":
        raise ValueError(f"unknown teacher {spec!r}; expected 'hash:<seed>'")
    return HashPatchTeacher(seed=int(arg or 0), token_dim=token_dim)


def make_text_encoder(spec: str, dim: int) -> TextModel:
    kind, _, arg = spec.partition(":")
    if kind != "hash":
        raise ValueError(f"unknown text encoder {spec!r}; expected 'hash:<seed>'")
    return HashTextEncoder(seed=int(arg or 0), dim=dim)


def stable_val_split(samples, val_fraction: float):
    """Seed-stable split: a sample goes to validation when the integer digest
    of its id falls below the fraction."""
    train, val = [], []
    for s in samples:
        digest = hashlib.sha1(s.sample_id.encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:4], "little") / 2**32
        (val if bucket < val_fraction else train).append(s)
    if not train:
        train = list(samples)
    return train, val


def _to_image_tensor(images_np) -> torch.Tensor:
    arr = np.stack(images_np).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _to_mask_tensor(masks_np) -> torch.Tensor:
    return torch.from_numpy(np.stack(masks_np).astype(np.float32))


def _pad_text(matrices):
    """Stack per-sample (L_i, C) embeddings into (B, Lmax, C) plus a validity mask."""
    lmax = max(m.shape[0] for m in matrices)
    dim = matrices[0].shape[1]
    batch = torch.zeros(len(matrices), lmax, dim)
    mask = torch.zeros(len(matrices), lmax, dtype=torch.bool)
    for i, m in enumerate(matrices):
        batch[i, :m.shape[0]] = m
        mask[i, :m.shape[0]] = True
    return batch, mask


def _check_finite(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()!r} at step {step}; aborting")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    checkpoint_path: Path | None
    step_history: list[dict]
    epoch_history: list[dict]
    best_epoch: int
    best_metric: float


def _write_curves(out_dir, step_history, epoch_history) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if step_history:
        with (out / "loss_curve.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(step_history[0]))
            writer.writeheader()
            writer.writerows(step_history)
    if epoch_history:
        with (out / "val_curve.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(epoch_history[0]))
            writer.writeheader()
            writer.writerows(epoch_history)


def _setup_run(cfg: TrainConfig) -> np.random.Generator:
    cfg.validate()
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    return np.random.default_rng(cfg.seed)


class PretrainModel(torch.nn.Module):
    """Phase-I network: encoder plus the lightweight prediction head."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.encoder = ConsistencyEncoder(arch)
        self.head = PretrainHead(arch.widths, arch.head_width)

    def forward(self, images):
        return self.head(self.encoder(images))


def pretrain(cfg: TrainConfig, samples) -> TrainResult:
    """Consistency pretraining on (image, perturbed image) pairs."""
    if cfg.phase != "pretrain":
        raise ValueError(f"pretrain called with phase {cfg.phase!r}")
    rng = _setup_run(cfg)
    if not samples:
        raise TrainingError("dataset is empty")
    arch = cfg.arch_config()
    model = PretrainModel(arch)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                 betas=(0.9, 0.999), eps=1e-8)
    train, val = stable_val_split(samples, cfg.val_fraction)
    monitor = val if val else train
    images = np.stack([s.image for s in train])
    masks = _to_mask_tensor([s.mask for s in train])
    mon_images = _to_image_tensor([s.image for s in monitor])
    mon_masks = _to_mask_tensor([s.mask for s in monitor])

    step_history, epoch_history = [], []
    best_metric = float("inf")
    best_epoch = -1
    best_snapshot = None
    best_rng = rng.bit_generator.state
    epochs_since_best = 0
    step = 0
    stop = False
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train))
        model.train()
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_np = images[idx]
            perturbed = np.stack([
                perturb(img, int(rng.integers(2**31)), cfg.perturb) for img in batch_np])
            xa = _to_image_tensor(batch_np)
            xb = _to_image_tensor(perturbed)
            g = masks[idx]
            pa = model(xa)
            pb = model(xb)
            # same term order as pretrain_loss, with components kept for curves
            l_mask = (mask_loss(g, pa, cfg.eps_clamp, cfg.eps_dice)
                      + mask_loss(g, pb, cfg.eps_clamp, cfg.eps_dice))
            l_cons = None
            loss = l_mask
            if cfg.consistency:
                l_cons = consistency_loss(pa, pb, cfg.theta, cfg.eps_clamp)
                loss = loss + l_cons
            _check_finite(loss, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            step_history.append({
                "step": step, "epoch": epoch, "loss": loss.item(),
                "l_mask": l_mask.item(),
                "l_cons": l_cons.item() if l_cons is not None else "",
            })
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
                break
        model.eval()
        with torch.no_grad():
            val_loss = 0.0
            for start in range(0, len(mon_images), cfg.batch_size):
                xb = mon_images[start:start + cfg.batch_size]
                gb = mon_masks[start:start + cfg.batch_size]
                val_loss += float(mask_loss(gb, model(xb), cfg.eps_clamp, cfg.eps_dice)) * len(xb)
            val_loss /= len(mon_images)
        epoch_history.append({"epoch": epoch, "val_mask_loss": val_loss})
        if val_loss < best_metric:
            best_metric = val_loss
            best_epoch = epoch
            best_snapshot = _model_tensors(model, optimizer)
            best_rng = rng.bit_generator.state
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if stop or epochs_since_best >= cfg.patience:
            break

    ckpt = Checkpoint(
        phase="pretrain",
        arch=arch.to_dict(),
        flags={},
        epoch=best_epoch,
        step=step,
        best_metric=best_metric,
        teacher_id=None,
        text_encoder_id=None,
        rng_numpy=best_rng,
        tensors=best_snapshot,
        extra={"config": cfg.to_dict()},
    )
    path = None
    if cfg.out_dir is not None:
        path = save_checkpoint(ckpt, Path(cfg.out_dir) / "pretrain.ckpt")
    _write_curves(cfg.out_dir, step_history, epoch_history)
    return TrainResult(ckpt, path, step_history, epoch_history, best_epoch, best_metric)


def build_segmenter(cfg: TrainConfig, init: Checkpoint | None) -> TextGuidedSegmenter:
    """Constructs the Phase-II model (seeded by the caller) and loads encoder
    weights from a Phase-I checkpoint when given."""
    arch = cfg.arch_config()
    model = TextGuidedSegmenter(arch, use_cma=cfg.use_cma, use_sed=cfg.use_sed,
                                use_sad=cfg.use_sad)
    if init is not None:
        if init.arch != arch.to_dict():
            raise CheckpointError(
                f"architecture mismatch: checkpoint {init.arch} vs config {arch.to_dict()}")
        load_model_weights(model, init, submodule="encoder")
    return model


def finetune(cfg: TrainConfig, samples, init: Checkpoint | None) -> TrainResult:
    """End-to-end fine-tuning with text alignment and teacher distillation."""
    if cfg.phase != "finetune":
        raise ValueError(f"finetune called with phase {cfg.phase!r}")
    rng = _setup_run(cfg)
    if not samples:
        raise TrainingError("dataset is empty")
    if any(not s.prompt for s in samples):
        raise TrainingError("finetune requires a prompt for every sample")
    arch = cfg.arch_config()
    model = build_segmenter(cfg, init)
    teacher = make_teacher(cfg.teacher, arch.teacher_dim) if cfg.use_sed else None
    text_enc = make_text_encoder(cfg.text_encoder, arch.text_dim) if cfg.use_cma else None

    if cfg.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=cfg.learning_rate,
                                 betas=(0.9, 0.999), eps=1e-8)

    train, val = stable_val_split(samples, cfg.val_fraction)
    monitor = val if val else train
    images = np.stack([s.image for s in train])
    masks = _to_mask_tensor([s.mask for s in train])
    text_mats = [text_enc.embed(s.prompt).matrix for s in train] if text_enc else None
    mon_images = _to_image_tensor([s.image for s in monitor])
    mon_masks = torch.from_numpy(np.stack([s.mask for s in monitor]).astype(np.float32))
    mon_text = [text_enc.embed(s.prompt).matrix for s in monitor] if text_enc else None

    step_history, epoch_history = [], []
    best_metric = -float("inf")
    best_epoch = -1
    best_snapshot = None
    best_rng = rng.bit_generator.state
    epochs_since_best = 0
    step = 0
    stop = False
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train))
        model.train()
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = _to_image_tensor(images[idx])
            gb = masks[idx]
            text, key_mask = (None, None)
            if text_enc is not None:
                text, key_mask = _pad_text([text_mats[i] for i in idx])
            l_pred, l_distill, _ = model.training_losses(
                xb, gb, teacher=teacher, text=text, key_mask=key_mask,
                eps_clamp=cfg.eps_clamp, eps_dice=cfg.eps_dice)
            loss = l_pred if l_distill is None else total_loss(l_pred, l_distill, cfg.lam)
            _check_finite(loss, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            row = {"step": step, "epoch": epoch, "loss": loss.item(),
                   "l_pred": l_pred.item(),
                   "l_distill": l_distill.item() if l_distill is not None else ""}
            step_history.append(row)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
                break
        model.eval()
        with torch.no_grad():
            dices = []
            for start in range(0, len(mon_images), cfg.batch_size):
                xb = mon_images[start:start + cfg.batch_size]
                text, key_mask = (None, None)
                if text_enc is not None:
                    text, key_mask = _pad_text(mon_text[start:start + cfg.batch_size])
                pred = model(xb, text, key_mask)
                hard = binarize(pred, cfg.theta)
                for j in range(len(xb)):
                    dices.append(dice_metric(hard[j].numpy(), mon_masks[start + j].numpy()))
            val_dice = float(np.mean(dices))
        epoch_history.append({"epoch": epoch, "val_dice": val_dice})
        if val_dice > best_metric:
            best_metric = val_dice
            best_epoch = epoch
            best_snapshot = _model_tensors(model, optimizer)
            best_rng = rng.bit_generator.state
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if stop or epochs_since_best >= cfg.patience:
            break

    ckpt = Checkpoint(
        phase="finetune",
        arch=arch.to_dict(),
        flags=model.flags(),
        epoch=best_epoch,
        step=step,
        best_metric=best_metric,
        teacher_id=teacher.identity() if teacher is not None else None,
        text_encoder_id=text_enc.identity() if text_enc is not None else None,
        rng_numpy=best_rng,
        tensors=best_snapshot,
        extra={"config": cfg.to_dict()},
    )
    path = None
    if cfg.out_dir is not None:
        path = save_checkpoint(ckpt, Path(cfg.out_dir) / "finetune.ckpt")
    _write_curves(cfg.out_dir, step_history, epoch_history)
    return TrainResult(ckpt, path, step_history, epoch_history, best_epoch, best_metric)


def load_segmenter(ckpt: Checkpoint) -> tuple[TextGuidedSegmenter, TeacherModel | None, TextModel | None]:
    """Rebuilds a fine-tuned segmenter (and its frozen companions) from a checkpoint."""
    if ckpt.phase != "finetune":
        raise CheckpointError(f"expected a finetune checkpoint, got phase {ckpt.phase!r}")
    arch = ArchConfig.from_dict(ckpt.arch)
    model = TextGuidedSegmenter(arch, **ckpt.flags)
    load_model_weights(model, ckpt)
    model.eval()
    teacher = None
    if ckpt.teacher_id:
        _, seed, dim = ckpt.teacher_id.split(":")
        teacher = HashPatchTeacher(seed=int(seed), token_dim=int(dim))
    text_enc = None
    if ckpt.text_encoder_id:
        _, seed, dim = ckpt.text_encoder_id.split(":")
        text_enc = HashTextEncoder(seed=int(seed), dim=int(dim))
    return model, teacher, text_enc
