"""Saliency-steered channel pruning: differentiable gates, the joint
classification / explanation-reconstruction / FLOPs-budget objective,
subnetwork export, and fine-tuning.

Gate logits are the only trainable state here; classifier weights and the
selector's decoder stay frozen (enforced by checksum guards).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from salprune.aem import SelectorNet
from salprune.checkpoint import module_checksum
from salprune.classifiers import (
    DeskClassifier,
    FlopsModel,
    TrainConfig,
    evaluate,
    export_classifier,
    iter_batches,
    train_classifier,
)
from salprune.rng import derive_seed, gumbel_noise, make_rng


@dataclass
class PruneConfig:
    gamma1: float = 0.5
    gamma2: float = 2.0
    target_rate: float = 0.5  # kept fraction of prunable FLOPs
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    gate_bias: float = 3.0
    tau: float = 0.4
    use_class_loss: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma weights must be non-negative")
        if not 0 < self.target_rate <= 1:
            raise ValueError(f"target rate must lie in (0, 1], got {self.target_rate}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class ArchVector:
    """Per-gated-layer gate values; ``soft`` entries in (0, 1), ``hard`` in
    {0, 1}. Layout mirrors the GateSet that produced it."""

    values: dict[str, torch.Tensor]
    kind: str  # "soft" | "hard"

    @classmethod
    def ones(cls, group_sizes: Mapping[str, int]) -> "ArchVector":
        return cls({g: torch.ones(n) for g, n in group_sizes.items()}, kind="hard")

    @classmethod
    def zeros(cls, group_sizes: Mapping[str, int]) -> "ArchVector":
        return cls({g: torch.zeros(n) for g, n in group_sizes.items()}, kind="hard")

    def active_counts(self) -> dict[str, int]:
        return {g: int((v > 0.5).sum()) for g, v in self.values.items()}


class GateSet(nn.Module):
    """Trainable per-channel gate logits plus the fixed relaxation constants
    (offset ``b`` opens gates at the start; temperature ``tau`` sharpens)."""

    def __init__(self, group_sizes: Mapping[str, int], gate_bias: float = 3.0,
                 tau: float = 0.4):
        super().__init__()
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.logits = nn.ParameterDict(
            {name: nn.Parameter(torch.zeros(n)) for name, n in group_sizes.items()}
        )
        self.gate_bias = float(gate_bias)
        self.tau = float(tau)

    def group_sizes(self) -> dict[str, int]:
        return {name: p.numel() for name, p in self.logits.items()}


def gates_forward(gates: GateSet, rng: torch.Generator | None = None,
                  noise=None, hard: bool = False) -> ArchVector:
    """Gate values from logits.

    Soft: sigmoid((theta + g + b) / tau) with standard-Gumbel noise g per
    channel. Hard: noise-free threshold, open iff theta + b > 0.
    """
    values: dict[str, torch.Tensor] = {}
    for name, theta in gates.logits.items():
        if hard:
            values[name] = ((theta + gates.gate_bias) > 0).to(theta.dtype)
            continue
        if noise is None:
            g = gumbel_noise(theta.shape, rng, dtype=theta.dtype)
        elif isinstance(noise, Mapping):
            g = torch.as_tensor(noise[name], dtype=theta.dtype)
        else:
            g = torch.as_tensor(noise, dtype=theta.dtype).expand_as(theta)
        values[name] = torch.sigmoid((theta + g + gates.gate_bias) / gates.tau)
    return ArchVector(values, kind="hard" if hard else "soft")


def gate_features(features: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Per-channel scaling of a feature map (applied after the activation)."""
    v = torch.as_tensor(v, dtype=features.dtype)
    channel_dim = 0 if features.dim() == 3 else 1
    if v.numel() != features.shape[channel_dim]:
        raise ValueError(
            f"{v.numel()} gate values for {features.shape[channel_dim]} channels"
        )
    shape = [1] * features.dim()
    shape[channel_dim] = -1
    return features * v.view(shape)


def current_flops(v: ArchVector, fm: FlopsModel) -> torch.Tensor:
    """Absolute expected FLOPs of the gated network's prunable layers;
    divide by ``fm.t_all`` for the rate."""
    return fm.current(v.values)


def resource_loss(t_current, t_target) -> torch.Tensor:
    """log(max(t, target) / target): zero exactly when the budget is met,
    growing logarithmically above it."""
    t_target = float(t_target)
    if t_target <= 0:
        raise ValueError(f"target must be positive, got {t_target}")
    t_current = torch.as_tensor(
        t_current, dtype=None if torch.is_tensor(t_current) else torch.float64
    )
    return torch.log(t_current.clamp_min(t_target) / t_target)


def interpretation_loss(c_x: torch.Tensor, predicted: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance between cached and current RBF parameter
    triples, in raw pixel units. Batched inputs give per-sample values."""
    c_x = torch.as_tensor(c_x)
    predicted = torch.as_tensor(predicted, dtype=c_x.dtype)
    diff = c_x - predicted
    return (diff * diff).sum(dim=-1)


@dataclass
class PruningPair:
    """A sample id with the original (ungated) model's cached explanation:
    the class index used for conditioning and the RBF parameter triple."""

    sample_id: int
    class_idx: int
    c_x: tuple[float, float, float]


@torch.no_grad()
def build_pruning_pairs(classifier: DeskClassifier, selector: SelectorNet,
                        dataset, ids: torch.Tensor | None = None,
                        batch_size: int = 256) -> list[PruningPair]:
    """Cache explanations of the original model, once, before any gating.

    The conditioning class is the ungated classifier's prediction; the same
    index is reused for the gated selector forward during pruning so the
    reconstruction target is fixed.
    """
    classifier.eval()
    selector.eval()
    if ids is None:
        ids = dataset.prune_ids
    pairs: list[PruningPair] = []
    for batch in iter_batches(len(ids), batch_size, shuffle=False):
        sample_ids = ids[batch]
        x = dataset.images[sample_ids]
        cls = classifier(x).argmax(dim=1)
        params = selector(x, cls)
        for sid, c, p in zip(sample_ids.tolist(), cls.tolist(), params.tolist()):
            pairs.append(PruningPair(sid, c, (p[0], p[1], p[2])))
    return pairs


@dataclass
class PruneResult:
    gates: GateSet
    trace: list[dict] = field(default_factory=list)

    def final_resource_loss(self) -> float:
        return self.trace[-1]["resource_loss"] if self.trace else float("nan")

    def final_rate(self) -> float:
        return self.trace[-1]["flops_rate"] if self.trace else float("nan")


def prune(classifier: DeskClassifier, selector: SelectorNet,
          pairs: Sequence[PruningPair], fm: FlopsModel, cfg: PruneConfig,
          dataset) -> PruneResult:
    """Optimize gate logits under the joint objective

        [cross-entropy of the gated classifier]  (optional)
        + gamma1 * ||C_x - gated selector output||^2
        + gamma2 * resource_loss(T(v)/T_all, p)

    Classifier weights and selector parameters stay frozen (checksummed);
    gates apply identically inside the classifier forward and the
    selector-encoder forward.
    """
    classifier.eval()
    classifier.requires_grad_(False)
    selector.eval()
    selector.requires_grad_(False)
    w_sum = module_checksum(classifier)
    beta_sum = module_checksum(selector)

    gates = GateSet(fm.group_sizes, gate_bias=cfg.gate_bias, tau=cfg.tau)
    opt = torch.optim.Adam(gates.parameters(), lr=cfg.lr, betas=cfg.betas)
    sample_ids = torch.tensor([p.sample_id for p in pairs], dtype=torch.long)
    class_idx = torch.tensor([p.class_idx for p in pairs], dtype=torch.long)
    c_x = torch.tensor([p.c_x for p in pairs], dtype=torch.float32)
    labels = dataset.labels[sample_ids]

    data_rng = make_rng(derive_seed(cfg.seed, "prune-batches"))
    noise_rng = make_rng(derive_seed(cfg.seed, "prune-noise"))
    trace: list[dict] = []
    for epoch in range(cfg.epochs):
        for step, batch in enumerate(iter_batches(len(pairs), cfg.batch_size, data_rng)):
            x = dataset.images[sample_ids[batch]]
            v = gates_forward(gates, rng=noise_rng)
            # one gated backbone pass feeds both the classification head and
            # the selector decoder, so the gating is identical by construction
            feats = classifier.backbone(x, v)
            ce = torch.zeros((), dtype=torch.float64)
            if cfg.use_class_loss:
                pooled = F.adaptive_avg_pool2d(feats[-1], 1).flatten(1)
                ce = F.cross_entropy(classifier.fc(pooled), labels[batch]).double()
            li = torch.zeros((), dtype=torch.float64)
            if cfg.gamma1 > 0:
                predicted = selector.from_features(feats, class_idx[batch])
                li = interpretation_loss(c_x[batch], predicted).mean().double()
            rate = current_flops(v, fm) / fm.t_all
            res = resource_loss(rate, cfg.target_rate)
            loss = cfg.gamma1 * li + cfg.gamma2 * res + ce
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append({
                "epoch": epoch,
                "step": step,
                "class_loss": float(ce),
                "interp_loss": float(li),
                "resource_loss": float(res),
                "flops_rate": float(rate),
            })
    if module_checksum(classifier) != w_sum:
        raise RuntimeError("classifier weights changed during pruning")
    if module_checksum(selector) != beta_sum:
        raise RuntimeError("selector parameters changed during pruning")
    return PruneResult(gates=gates, trace=trace)


def hard_keep_indices(gates: GateSet) -> dict[str, list[int]]:
    """Noise-free hard decisions (theta + b > 0) per group; a group that
    would close completely keeps its single highest-logit channel."""
    keep: dict[str, list[int]] = {}
    for name, theta in gates.logits.items():
        idx = torch.nonzero(theta + gates.gate_bias > 0).flatten().tolist()
        if not idx:
            idx = [int(theta.argmax())]
        keep[name] = idx
    return keep


def effective_hard_vector(gates: GateSet) -> ArchVector:
    """The hard architecture vector the export realizes (hard decisions plus
    the keep-one adjustment for fully closed groups)."""
    keep = hard_keep_indices(gates)
    values = {}
    for name, theta in gates.logits.items():
        v = torch.zeros(theta.numel())
        v[torch.as_tensor(keep[name])] = 1.0
        values[name] = v
    return ArchVector(values, kind="hard")


def export_subnetwork(classifier: DeskClassifier, gates: GateSet
                      ) -> tuple[DeskClassifier, ArchVector]:
    """Physically remove closed channels; returns the sliced model and the
    effective hard vector it realizes. The exported forward matches the
    full model gated with that vector."""
    keep = hard_keep_indices(gates)
    exported = export_classifier(classifier, keep)
    return exported, effective_hard_vector(gates)


def finetune(model: DeskClassifier, train_images, train_labels, val_images,
             val_labels, cfg: TrainConfig) -> dict:
    """Momentum-SGD fine-tuning of all remaining weights; restores the
    best-validation checkpoint into ``model``."""
    return train_classifier(model, train_images, train_labels, val_images,
                            val_labels, cfg)


__all__ = [
    "ArchVector",
    "GateSet",
    "PruneConfig",
    "PruneResult",
    "PruningPair",
    "build_pruning_pairs",
    "current_flops",
    "effective_hard_vector",
    "export_subnetwork",
    "finetune",
    "gate_features",
    "gates_forward",
    "hard_keep_indices",
    "interpretation_loss",
    "prune",
    "resource_loss",
    "evaluate",
]
