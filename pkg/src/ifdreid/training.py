"""Two-phase training.

Phase 1 trains the attention stream alone on clothing-masked images with its
identity loss. Phase 2 trains everything the variant contains under
``id_main + id_attn + lambda * ccl``. Every random draw is keyed on
(seed, epoch) or (seed, step), so a run restored from a checkpoint continues
exactly as an uninterrupted one.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .datamodel import DatasetIndex, RegionVocabulary
from .errors import NumericError, ValidationError
from .losses import clothing_contrastive_loss, id_loss, total_loss
from .masking import clothing_masked_image, clothing_region_mask, downsample_mask
from .network import (
    IFDNetwork,
    get_variant,
    load_checkpoint,
    load_state_into,
    network_header,
    save_checkpoint,
)
from .sampler import epoch_plan

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "id_main", "id_attn", "ccl", "total", "lr")


@dataclass
class TensorSet:
    """A dataset materialised as tensors for training or feature extraction."""

    images: torch.Tensor  # N x 3 x H x W
    masked: torch.Tensor  # N x 3 x H x W
    clothing_mask: torch.Tensor  # N x h x w, feature resolution
    identities: torch.Tensor  # contiguous labels 0..K-1
    appearances: torch.Tensor  # globally unique appearance ids
    meta: list[tuple[int, int, int]]  # original (identity, clothing, camera)
    id_list: list[int]

    def __len__(self) -> int:
        return len(self.meta)


def prepare_tensors(index: DatasetIndex, vocab: RegionVocabulary, output_stride: int, fill: float = 0.0) -> TensorSet:
    if len(index) == 0:
        raise ValidationError("empty dataset")
    sizes = {s.image.shape[:2] for s in index}
    if len(sizes) != 1:
        raise ValidationError(f"all images must share one size, found {sorted(sizes)}")
    (h, w), = sizes
    target = (h // output_stride, w // output_stride)
    images = np.stack([s.image.transpose(2, 0, 1) for s in index]).astype(np.float32)
    masked = np.stack([clothing_masked_image(s, vocab, fill).transpose(2, 0, 1) for s in index]).astype(np.float32)
    cmask = np.stack([downsample_mask(clothing_region_mask(s.parsing, vocab), target) for s in index]).astype(np.float32)
    ids, id_list = index.identity_labels()
    return TensorSet(
        torch.from_numpy(images),
        torch.from_numpy(masked),
        torch.from_numpy(cmask),
        torch.from_numpy(ids),
        torch.from_numpy(index.appearance_ids()),
        [(s.identity, s.clothing, s.camera) for s in index],
        id_list,
    )


@dataclass
class TrainState:
    model: IFDNetwork
    optimizer: torch.optim.Optimizer | None
    phase: int = 1
    epoch: int = 0  # epochs completed within the current phase
    step: int = 0  # global optimisation steps taken
    step_in_epoch: int = 0

    def main_parameter_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.model.state_dict().items():
            if name.startswith(("main.", "main_head.")):
                h.update(name.encode())
                h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def init_state(config: RunConfig, num_ids: int) -> TrainState:
    torch.manual_seed(config.train.seed)
    model = IFDNetwork(config.backbone.backbone(), num_ids, config.train.variant, config.backbone.ikt_kernel)
    return TrainState(model, None)


def _make_optimizer(params, config: RunConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=config.train.lr, weight_decay=config.train.weight_decay)


def phase2_lr(config: RunConfig, epoch: int) -> float:
    n = config.train.phase2_epochs
    passed = sum(epoch >= math.floor(m * n) for m in config.train.milestones) if n else 0
    return config.train.lr * config.train.gamma**passed


class MetricsLog:
    """Append-only tab-separated step log; absent loss components are ``-``."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path and not self.path.exists():
            stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
            self.path.write_text(f"# started {stamp}\n" + "\t".join(LOG_COLUMNS) + "\n", encoding="utf-8")

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            cells = []
            for col in LOG_COLUMNS:
                v = row.get(col)
                cells.append("-" if v is None else (str(v) if isinstance(v, int) else f"{v:.8g}"))
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write("\t".join(cells) + "\n")


def read_metrics_log(path: str | Path) -> list[dict]:
    rows, header = [], None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or not line.strip():
            continue
        cells = line.split("\t")
        if header is None:
            header = cells
            continue
        row = {}
        for k, v in zip(header, cells):
            row[k] = None if v == "-" else (int(v) if k in ("step", "epoch") else float(v))
        rows.append(row)
    return rows


def _batch(data: TensorSet, positions: list[int], flip: bool, seed: int, step: int):
    idx = torch.as_tensor(positions, dtype=torch.long)
    images, masked, cmask = data.images[idx], data.masked[idx], data.clothing_mask[idx]
    if flip:
        rng = np.random.default_rng([seed, 7, step])
        sel = torch.from_numpy(rng.random(len(positions)) < 0.5)
        images = torch.where(sel[:, None, None, None], images.flip(-1), images)
        masked = torch.where(sel[:, None, None, None], masked.flip(-1), masked)
        cmask = torch.where(sel[:, None, None], cmask.flip(-1), cmask)
    return images, masked, cmask, data.identities[idx], data.appearances[idx]


def _check_finite(components: dict, positions: list[int], step: int) -> None:
    vals = {k: (None if v is None else float(v.detach()) if torch.is_tensor(v) else float(v)) for k, v in components.items()}
    bad = {k: v for k, v in vals.items() if v is not None and not math.isfinite(v)}
    if bad:
        raise NumericError(f"non-finite loss at step {step}: components {vals}; batch positions {positions}")


def _run_phase(state, config, index, data, log, phase, max_steps):
    """Shared epoch/step loop; returns False when max_steps stopped it early."""
    epochs = config.train.phase1_epochs if phase == 1 else config.train.phase2_epochs
    model = state.model
    variant = model.variant
    offset = 0 if phase == 1 else config.train.phase1_epochs
    while state.epoch < epochs:
        epoch = state.epoch
        plan = epoch_plan(index, config.sampler, offset + epoch)
        lr = config.train.lr if phase == 1 else phase2_lr(config, epoch)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        while state.step_in_epoch < len(plan):
            if max_steps is not None and state.step >= max_steps:
                return False
            positions = plan[state.step_in_epoch]
            images, masked, cmask, ids, apps = _batch(data, positions, config.train.flip, config.train.seed, state.step)
            comp = {"id_main": None, "id_attn": None, "ccl": None}
            if phase == 1:
                model.attn.train()
                comp["id_attn"] = id_loss(model.forward_attention(masked)["logits_attn"], ids)
            else:
                model.train()
                if config.train.freeze_attention and variant.attention_stream:
                    model.attn.eval()
                out = model(images, masked if variant.attention_stream else None, cmask if variant.cbd else None)
                comp["id_main"] = id_loss(out["logits_main"], ids)
                if variant.attention_stream and not config.train.freeze_attention:
                    comp["id_attn"] = id_loss(out["logits_attn"], ids)
                if variant.cbd and config.loss.lam > 0:
                    T = config.loss.T if variant.weighted_ccl else 1.0
                    comp["ccl"] = clothing_contrastive_loss(out["f_c"], ids, apps, config.loss.tau, T)
            zero = torch.zeros(())
            loss = total_loss(
                comp["id_main"] if comp["id_main"] is not None else zero,
                comp["id_attn"] if comp["id_attn"] is not None else zero,
                comp["ccl"] if comp["ccl"] is not None else zero,
                config.loss,
            )
            _check_finite({**comp, "total": loss}, positions, state.step)
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            state.optimizer.step()
            log.write(
                {
                    "step": state.step,
                    "epoch": offset + epoch,
                    **{k: (None if v is None else v.item()) for k, v in comp.items()},
                    "total": loss.item(),
                    "lr": lr,
                }
            )
            state.step += 1
            state.step_in_epoch += 1
        state.epoch += 1
        state.step_in_epoch = 0
    return True


def _phase2_parameters(state: TrainState, config: RunConfig):
    model = state.model
    if config.train.freeze_attention and model.has_attention:
        frozen = {id(p) for p in model.attention_parameters()}
        for p in model.attention_parameters():
            p.requires_grad_(False)
        return [p for p in model.parameters() if id(p) not in frozen]
    return list(model.parameters())


def train_phase1(state: TrainState, config: RunConfig, index: DatasetIndex, data: TensorSet, log: MetricsLog | None = None, max_steps: int | None = None) -> TrainState:
    """Attention stream only. No-op for variants without one."""
    log = log or MetricsLog(None)
    if state.phase != 1:
        return state
    if not state.model.has_attention:
        state.phase, state.epoch, state.optimizer = 2, 0, None
        return state
    if state.optimizer is None:
        state.optimizer = _make_optimizer(state.model.attention_parameters(), config)
    if _run_phase(state, config, index, data, log, 1, max_steps):
        state.phase, state.epoch, state.step_in_epoch, state.optimizer = 2, 0, 0, None
    return state


def train_phase2(state: TrainState, config: RunConfig, index: DatasetIndex, data: TensorSet, log: MetricsLog | None = None, max_steps: int | None = None) -> TrainState:
    """Joint training under the total loss."""
    log = log or MetricsLog(None)
    if state.phase == 1:
        raise ValidationError("phase 1 has not finished")
    if state.phase == 3:
        if state.epoch >= config.train.phase2_epochs:
            return state
        state.phase = 2  # finished run extended with more epochs
    if state.optimizer is None:
        state.optimizer = _make_optimizer(_phase2_parameters(state, config), config)
    if _run_phase(state, config, index, data, log, 2, max_steps):
        state.phase = 3
    return state


def train(config: RunConfig, index: DatasetIndex, data: TensorSet, log: MetricsLog | None = None, state: TrainState | None = None, max_steps: int | None = None) -> TrainState:
    state = state or init_state(config, len(data.id_list))
    state = train_phase1(state, config, index, data, log, max_steps)
    if state.phase >= 2:
        state = train_phase2(state, config, index, data, log, max_steps)
    return state


def build_variant(name: str, config: RunConfig, num_ids: int) -> IFDNetwork:
    """Model assembly for one ablation row (baseline, ikt, cbd, ifd-cl, ifd)."""
    get_variant(name)
    torch.manual_seed(config.train.seed)
    return IFDNetwork(config.backbone.backbone(), num_ids, name, config.backbone.ikt_kernel)


# --------------------------------------------------------------------------
# checkpoints


def save_state(state: TrainState, path: str | Path, config: RunConfig | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    header = network_header(state.model)
    header["train"] = {"phase": state.phase, "epoch": state.epoch, "step": state.step, "step_in_epoch": state.step_in_epoch}
    if config is not None:
        header["config"] = config.to_dict()
    if state.optimizer is not None:
        opt = state.optimizer.state_dict()
        header["optimizer"] = {"param_groups": opt["param_groups"], "state_keys": {}}
        for pid, entry in opt["state"].items():
            header["optimizer"]["state_keys"][str(pid)] = sorted(entry)
            for key, value in entry.items():
                tensors[f"optim.{pid}.{key}"] = value
    save_checkpoint(path, tensors, header)


def load_state(path: str | Path, config: RunConfig) -> TrainState:
    tensors, header = load_checkpoint(path)
    if header.get("variant") != config.train.variant:
        raise ValidationError(f"checkpoint variant {header.get('variant')!r} differs from {config.train.variant!r}")
    state = init_state(config, header["num_ids"])
    load_state_into(state.model, {k: v for k, v in tensors.items() if k.startswith("model.")}, prefix="model.")
    t = header["train"]
    state.phase, state.epoch, state.step, state.step_in_epoch = t["phase"], t["epoch"], t["step"], t["step_in_epoch"]
    if "optimizer" in header:
        if state.phase == 1:
            params = state.model.attention_parameters()
        else:
            params = _phase2_parameters(state, config)
        state.optimizer = _make_optimizer(params, config)
        opt_state = {}
        for pid, keys in header["optimizer"]["state_keys"].items():
            opt_state[int(pid)] = {k: torch.from_numpy(tensors[f"optim.{pid}.{k}"]) for k in keys}
        state.optimizer.load_state_dict({"state": opt_state, "param_groups": header["optimizer"]["param_groups"]})
    elif state.phase == 2 and config.train.freeze_attention:
        _phase2_parameters(state, config)
    return state
