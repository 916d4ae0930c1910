"""Desk-scale CNN classifiers: declarative layer specs, gate-aware forward
passes, exact per-layer FLOPs accounting, training, and evaluation.

Two families are provided: a small residual net (3 stages of basic blocks)
and a small depthwise-separable net (inverted-residual blocks). In both,
only block-internal channels carry pruning gates; identity-path widths are
fixed, so block outputs always compose.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from salprune.rng import derive_seed, make_rng, seed_everything


# ---------------------------------------------------------------------------
# Specs and layer records


@dataclass(frozen=True)
class LayerRecord:
    """One conv/fc layer from the compute-accounting point of view.

    ``in_gate`` / ``out_gate`` name the gate group governing that side's
    channel count, or None when the width is fixed.
    """

    name: str
    kind: str  # "conv" | "dwconv" | "fc"
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    out_hw: tuple[int, int]
    in_gate: str | None = None
    out_gate: str | None = None

    @property
    def gated(self) -> bool:
        return self.in_gate is not None or self.out_gate is not None


@dataclass(frozen=True)
class ClassifierSpec:
    """Layer-by-layer description of a desk classifier; the unit of pruning
    and FLOPs accounting. ``hidden`` overrides per-group internal widths
    (populated by subnetwork export)."""

    arch: str  # "resnet" | "dsnet"
    input_hw: tuple[int, int] = (32, 32)
    in_channels: int = 3
    num_classes: int = 10
    stem_width: int = 16
    stage_widths: tuple[int, ...] = (16, 32, 64)
    stage_strides: tuple[int, ...] = (1, 2, 2)
    blocks_per_stage: tuple[int, ...] = (3, 3, 3)
    expansion: float = 2.0  # dsnet hidden multiplier
    hidden: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ("resnet", "dsnet"):
            raise ValueError(f"unknown architecture '{self.arch}'")
        if not (len(self.stage_widths) == len(self.stage_strides) == len(self.blocks_per_stage)):
            raise ValueError("stage_widths, stage_strides, blocks_per_stage must align")
        object.__setattr__(self, "hidden", dict(self.hidden))

    def default_hidden(self, stage: int, block: int) -> int:
        if self.arch == "resnet":
            return self.stage_widths[stage]
        c_in = self._block_in(stage, block)
        return int(round(self.expansion * c_in))

    def _block_in(self, stage: int, block: int) -> int:
        if block > 0:
            return self.stage_widths[stage]
        return self.stem_width if stage == 0 else self.stage_widths[stage - 1]

    def gate_name(self, stage: int, block: int) -> str:
        return f"s{stage}b{block}"

    def hidden_width(self, stage: int, block: int) -> int:
        return self.hidden.get(self.gate_name(stage, block), self.default_hidden(stage, block))

    def gate_groups(self) -> dict[str, int]:
        """Ordered map gate-group name -> channel count."""
        groups: dict[str, int] = {}
        for s in range(len(self.stage_widths)):
            for b in range(self.blocks_per_stage[s]):
                groups[self.gate_name(s, b)] = self.hidden_width(s, b)
        return groups

    def stage_hw(self) -> list[tuple[int, int]]:
        """Spatial dims of each stage's feature maps."""
        h, w = self.input_hw
        out = []
        for s in self.stage_strides:
            h, w = h // s, w // s
            out.append((h, w))
        return out

    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    def layer_records(self) -> list[LayerRecord]:
        recs: list[LayerRecord] = []
        h, w = self.input_hw
        recs.append(LayerRecord("stem", "conv", self.in_channels, self.stem_width, 3, 1, (h, w)))
        c_prev = self.stem_width
        for s, (width, stride, blocks) in enumerate(
            zip(self.stage_widths, self.stage_strides, self.blocks_per_stage)
        ):
            for b in range(blocks):
                g = self.gate_name(s, b)
                hid = self.hidden_width(s, b)
                st = stride if b == 0 else 1
                bh, bw = h // st, w // st
                pfx = f"stage{s}.block{b}."
                if self.arch == "resnet":
                    recs.append(LayerRecord(pfx + "conv1", "conv", c_prev, hid, 3, st,
                                            (bh, bw), out_gate=g))
                    recs.append(LayerRecord(pfx + "conv2", "conv", hid, width, 3, 1,
                                            (bh, bw), in_gate=g))
                    if st != 1 or c_prev != width:
                        recs.append(LayerRecord(pfx + "shortcut", "conv", c_prev, width, 1, st,
                                                (bh, bw)))
                else:
                    recs.append(LayerRecord(pfx + "pw1", "conv", c_prev, hid, 1, 1,
                                            (h, w), out_gate=g))
                    recs.append(LayerRecord(pfx + "dw", "dwconv", hid, hid, 3, st,
                                            (bh, bw), in_gate=g, out_gate=g))
                    recs.append(LayerRecord(pfx + "pw2", "conv", hid, width, 1, 1,
                                            (bh, bw), in_gate=g))
                h, w = bh, bw
                c_prev = width
        recs.append(LayerRecord("fc", "fc", c_prev, self.num_classes, 1, 1, (1, 1)))
        return recs


def spec_to_dict(spec: ClassifierSpec) -> dict:
    return {
        "arch": spec.arch,
        "input_hw": list(spec.input_hw),
        "in_channels": spec.in_channels,
        "num_classes": spec.num_classes,
        "stem_width": spec.stem_width,
        "stage_widths": list(spec.stage_widths),
        "stage_strides": list(spec.stage_strides),
        "blocks_per_stage": list(spec.blocks_per_stage),
        "expansion": spec.expansion,
        "hidden": dict(spec.hidden),
    }


def spec_from_dict(d: Mapping) -> ClassifierSpec:
    return ClassifierSpec(
        arch=d["arch"],
        input_hw=tuple(d["input_hw"]),
        in_channels=d["in_channels"],
        num_classes=d["num_classes"],
        stem_width=d["stem_width"],
        stage_widths=tuple(d["stage_widths"]),
        stage_strides=tuple(d["stage_strides"]),
        blocks_per_stage=tuple(d["blocks_per_stage"]),
        expansion=d["expansion"],
        hidden={k: int(v) for k, v in d.get("hidden", {}).items()},
    )


def resnet_desk_spec(num_classes: int = 10, input_hw=(32, 32),
                     blocks_per_stage=(3, 3, 3)) -> ClassifierSpec:
    return ClassifierSpec(arch="resnet", num_classes=num_classes, input_hw=tuple(input_hw),
                          blocks_per_stage=tuple(blocks_per_stage))


def dsnet_desk_spec(num_classes: int = 10, input_hw=(32, 32),
                    blocks_per_stage=(2, 2, 2), expansion: float = 2.0) -> ClassifierSpec:
    return ClassifierSpec(arch="dsnet", num_classes=num_classes, input_hw=tuple(input_hw),
                          blocks_per_stage=tuple(blocks_per_stage), expansion=expansion)


# ---------------------------------------------------------------------------
# FLOPs accounting


def flops_of_layer(rec: LayerRecord, c_in_active: int, c_out_active: int) -> int:
    """Multiply-accumulate count of one layer at the given active widths.

    Depthwise layers use a single active count (both sides share channels);
    normalization and activations are excluded.
    """
    if c_in_active < 0 or c_out_active < 0:
        raise ValueError("active channel counts must be non-negative")
    if c_in_active > rec.in_channels or c_out_active > rec.out_channels:
        raise ValueError(
            f"active counts ({c_in_active}, {c_out_active}) exceed declared "
            f"({rec.in_channels}, {rec.out_channels}) for layer {rec.name}"
        )
    oh, ow = rec.out_hw
    if rec.kind == "conv":
        return oh * ow * rec.kernel * rec.kernel * c_in_active * c_out_active
    if rec.kind == "dwconv":
        return oh * ow * rec.kernel * rec.kernel * c_out_active
    if rec.kind == "fc":
        return c_in_active * c_out_active
    raise ValueError(f"unknown layer kind '{rec.kind}'")


def layer_full_flops(rec: LayerRecord) -> int:
    return flops_of_layer(rec, rec.in_channels, rec.out_channels)


@dataclass(frozen=True)
class FlopsModel:
    """Closed-form FLOPs of a classifier as a function of gate activity.

    ``t_all`` is the total over prunable layers (those whose channels carry
    gates); ungated layers contribute fixed compute and are excluded from
    the budget the resource loss controls.
    """

    records: tuple[LayerRecord, ...]
    group_sizes: Mapping[str, int]
    t_all: int

    @classmethod
    def from_spec(cls, spec: ClassifierSpec) -> "FlopsModel":
        recs = tuple(spec.layer_records())
        t_all = sum(layer_full_flops(r) for r in recs if r.gated)
        return cls(records=recs, group_sizes=spec.gate_groups(), t_all=t_all)

    def current(self, gates: Mapping[str, torch.Tensor]) -> torch.Tensor:
        """Expected FLOPs over prunable layers for the given gate values.

        Soft gates contribute fractionally: each gated side scales the
        layer's count by its mean activity. Accumulates in float64, so hard
        0/1 vectors reproduce the integer recount exactly.
        """
        total = torch.zeros((), dtype=torch.float64)
        for rec in self.records:
            if not rec.gated:
                continue
            term = torch.tensor(float(layer_full_flops(rec)), dtype=torch.float64)
            if rec.kind == "dwconv":
                v = gates[rec.out_gate]
                term = term * v.sum().double() / rec.out_channels
            else:
                if rec.in_gate is not None:
                    v = gates[rec.in_gate]
                    term = term * v.sum().double() / rec.in_channels
                if rec.out_gate is not None:
                    v = gates[rec.out_gate]
                    term = term * v.sum().double() / rec.out_channels
            total = total + term
        return total


# ---------------------------------------------------------------------------
# Modules


def _gate_value(gates, name: str):
    if gates is None:
        return None
    values = getattr(gates, "values", gates)
    return values.get(name)


def _scale_channels(x: torch.Tensor, v: torch.Tensor | None) -> torch.Tensor:
    if v is None:
        return x
    return x * v.to(x.dtype).view(1, -1, 1, 1)


class BasicBlock(nn.Module):
    """Residual basic block; the hidden (conv1 output) channels are gated."""

    def __init__(self, c_in: int, hidden: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, hidden, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(hidden)
        self.conv2 = nn.Conv2d(hidden, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride, bias=False)
            self.shortcut_bn = nn.BatchNorm2d(c_out)
        else:
            self.shortcut = None
            self.shortcut_bn = None

    def forward(self, x: torch.Tensor, gate: torch.Tensor | None = None) -> torch.Tensor:
        h = F.relu(self.bn1(self.conv1(x)))
        h = _scale_channels(h, gate)
        h = self.bn2(self.conv2(h))
        s = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return F.relu(h + s)


class InvertedBlock(nn.Module):
    """Depthwise-separable block with expansion; the expanded channels are
    gated after both of their activations so a closed channel contributes
    nothing downstream."""

    def __init__(self, c_in: int, hidden: int, c_out: int, stride: int):
        super().__init__()
        self.pw1 = nn.Conv2d(c_in, hidden, 1, 1, 0, bias=False)
        self.bn1 = nn.BatchNorm2d(hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, stride, 1, groups=hidden, bias=False)
        self.bn2 = nn.BatchNorm2d(hidden)
        self.pw2 = nn.Conv2d(hidden, c_out, 1, 1, 0, bias=False)
        self.bn3 = nn.BatchNorm2d(c_out)
        self.residual = stride == 1 and c_in == c_out

    def forward(self, x: torch.Tensor, gate: torch.Tensor | None = None) -> torch.Tensor:
        h = F.relu(self.bn1(self.pw1(x)))
        h = _scale_channels(h, gate)
        h = F.relu(self.bn2(self.dw(h)))
        h = _scale_channels(h, gate)
        h = self.bn3(self.pw2(h))
        return h + x if self.residual else h


class DeskClassifier(nn.Module):
    """A classifier built from a :class:`ClassifierSpec`. The forward pass
    optionally takes per-group gate vectors; ``backbone`` exposes the
    per-stage feature maps the selector's decoder consumes."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        self.stem_conv = nn.Conv2d(spec.in_channels, spec.stem_width, 3, 1, 1, bias=False)
        self.stem_bn = nn.BatchNorm2d(spec.stem_width)
        self.stages = nn.ModuleList()
        c_prev = spec.stem_width
        block_cls = BasicBlock if spec.arch == "resnet" else InvertedBlock
        for s, (width, stride, blocks) in enumerate(
            zip(spec.stage_widths, spec.stage_strides, spec.blocks_per_stage)
        ):
            stage = nn.ModuleList()
            for b in range(blocks):
                st = stride if b == 0 else 1
                stage.append(block_cls(c_prev, spec.hidden_width(s, b), width, st))
                c_prev = width
            self.stages.append(stage)
        self.fc = nn.Linear(c_prev, spec.num_classes)

    def backbone(self, x: torch.Tensor, gates=None) -> list[torch.Tensor]:
        feats = []
        h = F.relu(self.stem_bn(self.stem_conv(x)))
        for s, stage in enumerate(self.stages):
            for b, block in enumerate(stage):
                h = block(h, _gate_value(gates, self.spec.gate_name(s, b)))
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor, gates=None) -> torch.Tensor:
        h = self.backbone(x, gates)[-1]
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.fc(h)


def build_classifier(spec: ClassifierSpec, seed: int = 0) -> DeskClassifier:
    """Construct and deterministically initialize a classifier."""
    seed_everything(derive_seed(seed, f"build:{spec.arch}"))
    return DeskClassifier(spec)


# ---------------------------------------------------------------------------
# Subnetwork export (channel slicing)


def export_classifier(model: DeskClassifier, keep: Mapping[str, Sequence[int]]) -> DeskClassifier:
    """Physically remove closed hidden channels.

    ``keep`` maps each gate group to the kept channel indices (ascending).
    Both the producing filters and all consuming filters are sliced; the
    returned model's forward (without gates) matches the original under
    hard gating of exactly those channels.
    """
    spec = model.spec
    hidden = dict(spec.hidden)
    for name, idx in keep.items():
        if len(idx) == 0:
            raise ValueError(f"gate group {name} would keep zero channels")
        hidden[name] = len(idx)
    new_spec = replace(spec, hidden=hidden)
    new_model = DeskClassifier(new_spec)
    new_model.stem_conv.load_state_dict(model.stem_conv.state_dict())
    new_model.stem_bn.load_state_dict(model.stem_bn.state_dict())
    new_model.fc.load_state_dict(model.fc.state_dict())

    def slice_bn(dst: nn.BatchNorm2d, src: nn.BatchNorm2d, idx: torch.Tensor) -> None:
        dst.weight.data = src.weight.data[idx].clone()
        dst.bias.data = src.bias.data[idx].clone()
        dst.running_mean.data = src.running_mean.data[idx].clone()
        dst.running_var.data = src.running_var.data[idx].clone()
        dst.num_batches_tracked.data = src.num_batches_tracked.data.clone()

    for s, stage in enumerate(model.stages):
        for b, block in enumerate(stage):
            name = spec.gate_name(s, b)
            idx = torch.as_tensor(keep[name], dtype=torch.long)
            dst = new_model.stages[s][b]
            if spec.arch == "resnet":
                dst.conv1.weight.data = block.conv1.weight.data[idx].clone()
                slice_bn(dst.bn1, block.bn1, idx)
                dst.conv2.weight.data = block.conv2.weight.data[:, idx].clone()
                dst.bn2.load_state_dict(block.bn2.state_dict())
                if block.shortcut is not None:
                    dst.shortcut.weight.data = block.shortcut.weight.data.clone()
                    dst.shortcut_bn.load_state_dict(block.shortcut_bn.state_dict())
            else:
                dst.pw1.weight.data = block.pw1.weight.data[idx].clone()
                slice_bn(dst.bn1, block.bn1, idx)
                dst.dw.weight.data = block.dw.weight.data[idx].clone()
                slice_bn(dst.bn2, block.bn2, idx)
                dst.pw2.weight.data = block.pw2.weight.data[:, idx].clone()
                dst.bn3.load_state_dict(block.bn3.state_dict())
    return new_model


# ---------------------------------------------------------------------------
# Training and evaluation


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = False
    seed: int = 0


def _augment_batch(x: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    """Horizontal flip + 4-pixel-pad random crop."""
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=rng) < 0.5
    x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
    padded = F.pad(x, (4, 4, 4, 4))
    dz = torch.randint(0, 9, (n,), generator=rng)
    dt = torch.randint(0, 9, (n,), generator=rng)
    out = torch.empty_like(x)
    for i in range(n):
        out[i] = padded[i, :, dz[i]:dz[i] + h, dt[i]:dt[i] + w]
    return out


def iter_batches(n: int, batch_size: int, rng: torch.Generator | None = None,
                 shuffle: bool = True) -> Iterable[torch.Tensor]:
    order = torch.randperm(n, generator=rng) if shuffle else torch.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


@torch.no_grad()
def evaluate(model: nn.Module, images: torch.Tensor, labels: torch.Tensor,
             gates=None, batch_size: int = 256) -> float:
    """Top-1 accuracy; optional gates scale feature maps channelwise."""
    was_training = model.training
    model.eval()
    correct = 0
    for ids in iter_batches(len(images), batch_size, shuffle=False):
        logits = model(images[ids], gates)
        correct += int((logits.argmax(dim=1) == labels[ids]).sum())
    if was_training:
        model.train()
    return correct / max(len(images), 1)


def train_classifier(
    model: DeskClassifier,
    train_images: torch.Tensor,
    train_labels: torch.Tensor,
    val_images: torch.Tensor,
    val_labels: torch.Tensor,
    cfg: TrainConfig,
) -> dict:
    """Momentum-SGD supervised training; restores the best-validation
    weights into ``model`` and returns the loss/accuracy history."""
    history = {"train_loss": [], "val_acc": []}
    if cfg.epochs == 0:
        history["val_acc"].append(evaluate(model, val_images, val_labels))
        return history
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    data_rng = make_rng(derive_seed(cfg.seed, "classifier-batches"))
    aug_rng = make_rng(derive_seed(cfg.seed, "classifier-augment"))
    best_acc, best_state = -1.0, None
    for _ in range(cfg.epochs):
        model.train()
        losses = []
        for ids in iter_batches(len(train_images), cfg.batch_size, data_rng):
            x, y = train_images[ids], train_labels[ids]
            if cfg.augment:
                x = _augment_batch(x, aug_rng)
            opt.zero_grad()
            loss = F.cross_entropy(model(x), y)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        sched.step()
        acc = evaluate(model, val_images, val_labels)
        history["train_loss"].append(sum(losses) / len(losses))
        history["val_acc"].append(acc)
        if acc >= best_acc:
            best_acc = acc
            best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    return history
