"""Amortized explanation model: a predictor that estimates the classifier's
output distribution on masked inputs, and a selector that emits compact RBF
mask parameters (or per-pixel logits for the independent-mask baseline).

The selector reuses the classifier's convolutional backbone as a frozen
encoder; only its decoder, feature-filter embedding, and output head train.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from salprune.checkpoint import module_checksum
from salprune.classifiers import DeskClassifier, iter_batches
from salprune.masks import (
    SIGMA_EPS,
    center_nonlinearity,
    gumbel_sigmoid,
    mask_l0,
    mask_smoothness,
    rbf_grid,
    sample_random_rbf_params_batch,
    sigma_nonlinearity,
)
from salprune.rng import derive_seed, make_rng, seed_everything


@dataclass
class AemConfig:
    """Hyperparameters for predictor and selector training. Defaults are the
    32x32 settings; 224x224 runs use lambda1=1.0, lambda2=1e-4, sigma_bias=80."""

    lambda1: float = 0.2
    lambda2: float = 0.001
    tau_selector: float = 1.0
    predictor_epochs: int = 300
    predictor_batch: int = 128
    selector_epochs: int = 10
    selector_batch: int = 16
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    mask_family: str = "rbf"  # "rbf" | "independent"
    sigma_bias: float = 10.0
    center_scale: float | None = None   # default picked from input size
    center_offset: float | None = None

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.tau_selector <= 0:
            raise ValueError("tau_selector must be positive")
        if self.mask_family not in ("rbf", "independent"):
            raise ValueError(f"unknown mask family '{self.mask_family}'")


def center_range_for(height: int) -> tuple[float, float]:
    """(scale, offset) of the center nonlinearity for a given input height:
    (14, 16) on 32-pixel inputs, (108, 112) on 224-pixel inputs."""
    if height == 32:
        return 14.0, 16.0
    if height == 224:
        return 108.0, 112.0
    return height / 2.0 - 2.0, height / 2.0


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) = sum p (log p - log q), with 0 log 0 = 0 and q clamped to
    1e-8. Accepts (K,) vectors or (B, K) batches (per-row values)."""
    p = torch.as_tensor(p)
    q = torch.as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {tuple(p.shape)} vs {tuple(q.shape)}")
    qc = q.clamp_min(1e-8)
    return (torch.xlogy(p, p) - p * torch.log(qc)).sum(dim=-1)


def predictor_loss(classifier_out: torch.Tensor, predictor_out: torch.Tensor) -> torch.Tensor:
    """Discrepancy the predictor minimizes; the classifier's distribution is
    the target (first argument)."""
    return kl_divergence(classifier_out, predictor_out)


def feature_filter(x: torch.Tensor, embedding: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Class-conditioned gating of encoder features:
    Z[i,j] = X[i,j] * sigmoid(<X[i,j], C_y>) per spatial location."""
    if x.dim() != 4:
        raise ValueError(f"expected (B, d, h, w) features, got {tuple(x.shape)}")
    if embedding.shape[1] != x.shape[1]:
        raise ValueError(
            f"embedding dim {embedding.shape[1]} != feature channels {x.shape[1]}"
        )
    y = torch.as_tensor(y, dtype=torch.long)
    if y.min() < 0 or y.max() >= embedding.shape[0]:
        raise IndexError(f"class index out of range [0, {embedding.shape[0]})")
    c = embedding[y]  # (B, d)
    inner = torch.einsum("bdhw,bd->bhw", x, c)
    return x * torch.sigmoid(inner).unsqueeze(1)


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand with a residual connection."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        mid = max(c_out // 4, 8)
        self.conv1 = nn.Conv2d(c_in, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, c_out, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(c_out)
        if c_in != c_out:
            self.proj = nn.Sequential(nn.Conv2d(c_in, c_out, 1, bias=False),
                                      nn.BatchNorm2d(c_out))
        else:
            self.proj = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        s = x if self.proj is None else self.proj(x)
        return F.relu(h + s)


class UpsampleBlock(nn.Module):
    """x2 upsample (conv + pixel shuffle), skip concatenation, then three
    bottleneck blocks."""

    def __init__(self, c_in: int, c_skip: int, c_out: int):
        super().__init__()
        self.up = nn.Conv2d(c_in, 4 * c_out, 3, 1, 1, bias=False)
        self.shuffle = nn.PixelShuffle(2)
        self.blocks = nn.Sequential(
            Bottleneck(c_out + c_skip, c_out),
            Bottleneck(c_out, c_out),
            Bottleneck(c_out, c_out),
        )

    def forward(self, low: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        h = self.shuffle(self.up(low))
        return self.blocks(torch.cat([h, skip], dim=1))


class SelectorNet(nn.Module):
    """U-Net selector over a frozen classifier backbone.

    The encoder is the classifier itself (held by reference, excluded from
    this module's parameters/state); trainable parts are the feature-filter
    embedding, the upsampling decoder, and the output head. The ``rbf`` head
    emits (c_z, c_t, sigma) through the center/sigma nonlinearities; the
    ``independent`` head emits per-pixel mask logits.
    """

    def __init__(self, classifier: DeskClassifier, head: str = "rbf",
                 sigma_bias: float = 10.0, center_scale: float | None = None,
                 center_offset: float | None = None):
        super().__init__()
        if head not in ("rbf", "independent"):
            raise ValueError(f"unknown head '{head}'")
        self._encoder_ref = (classifier,)
        spec = classifier.spec
        widths = spec.stage_widths
        self.head_kind = head
        scale, offset = center_range_for(spec.input_hw[0])
        self.center_scale = center_scale if center_scale is not None else scale
        self.center_offset = center_offset if center_offset is not None else offset
        self.embedding = nn.Parameter(0.1 * torch.randn(spec.num_classes, widths[-1]))
        self.up1 = UpsampleBlock(widths[-1], widths[-2], widths[-2])
        self.up2 = UpsampleBlock(widths[-2], widths[-3], widths[-3])
        out_hw = spec.stage_hw()[0]
        if head == "rbf":
            self.head = nn.Conv2d(widths[-3], 3, kernel_size=out_hw[0])
            with torch.no_grad():
                # Small weights keep initial outputs near the biases; the
                # sigma bias starts kernels at roughly a third of the image.
                self.head.weight.mul_(0.1)
                self.head.bias.zero_()
                self.head.bias[2] = sigma_bias
        else:
            self.head = nn.Conv2d(widths[-3], 1, kernel_size=1)

    @property
    def encoder(self) -> DeskClassifier:
        return self._encoder_ref[0]

    def decode(self, feats: list[torch.Tensor], y: torch.Tensor) -> torch.Tensor:
        z = feature_filter(feats[-1], self.embedding, y)
        h = self.up1(z, feats[-2])
        h = self.up2(h, feats[-3])
        return self.head(h)

    def from_features(self, feats: list[torch.Tensor],
                      y: torch.Tensor | None = None) -> torch.Tensor:
        """Selector output from precomputed encoder features (lets pruning
        share one gated backbone pass between classifier and selector)."""
        if y is None:
            with torch.no_grad():
                pooled = F.adaptive_avg_pool2d(feats[-1], 1).flatten(1)
                y = self.encoder.fc(pooled).argmax(dim=1)
        out = self.decode(feats, torch.as_tensor(y, dtype=torch.long))
        if self.head_kind == "independent":
            return out[:, 0]
        u = out.flatten(1)
        c_z = center_nonlinearity(u[:, 0], self.center_scale, self.center_offset)
        c_t = center_nonlinearity(u[:, 1], self.center_scale, self.center_offset)
        # additive floor keeps the grid's 1/sigma^2 finite if the head
        # underflows softplus to exactly zero mid-training
        sigma = sigma_nonlinearity(u[:, 2]) + SIGMA_EPS
        return torch.stack([c_z, c_t, sigma], dim=1)

    def forward(self, x: torch.Tensor, y: torch.Tensor | None = None,
                gates=None) -> torch.Tensor:
        """Returns (B, 3) RBF parameters, or (B, H, W) logits for the
        independent head. When no class indices are given, uses the
        classifier's (gated) argmax prediction."""
        return self.from_features(self.encoder.backbone(x, gates), y)

    def mask_grids(self, out: torch.Tensor, height: int, width: int) -> torch.Tensor:
        """Bernoulli-parameter grids from a forward output."""
        if self.head_kind == "rbf":
            return rbf_grid(out[:, 0], out[:, 1], out[:, 2], height, width)
        return torch.sigmoid(out)


def selector_forward(net: SelectorNet, x: torch.Tensor, y=None) -> torch.Tensor:
    return net(x, y)


def classifier_probs(classifier: nn.Module, x: torch.Tensor, gates=None) -> torch.Tensor:
    return F.softmax(classifier(x, gates), dim=-1)


def selector_loss(x: torch.Tensor, classifier_out: torch.Tensor, predictor: nn.Module,
                  soft_mask: torch.Tensor, cfg: AemConfig) -> torch.Tensor:
    """Per-sample selector objective: masked-prediction KL plus the mask-size
    and smoothness regularizers."""
    masked = x * soft_mask.unsqueeze(1)
    q = F.softmax(predictor(masked), dim=-1)
    kl = kl_divergence(classifier_out, q)
    return kl + cfg.lambda1 * mask_l0(soft_mask) + cfg.lambda2 * mask_smoothness(soft_mask)


@torch.no_grad()
def masked_kl(classifier: nn.Module, predictor: nn.Module, images: torch.Tensor,
              masks: torch.Tensor, batch_size: int = 256) -> float:
    """Mean KL between classifier-on-full-input and predictor-on-masked-input."""
    classifier.eval()
    predictor.eval()
    total, count = 0.0, 0
    for ids in iter_batches(len(images), batch_size, shuffle=False):
        x = images[ids]
        target = classifier_probs(classifier, x)
        q = F.softmax(predictor(x * masks[ids].unsqueeze(1)), dim=-1)
        total += float(kl_divergence(target, q).sum())
        count += len(ids)
    return total / max(count, 1)


def _adam(params, cfg: AemConfig):
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas,
                            weight_decay=cfg.weight_decay)


def draw_predictor_masks(n: int, height: int, width: int, family: str,
                         rng: torch.Generator) -> torch.Tensor:
    """Hard training masks for the predictor: pixelwise Bernoulli draws from
    random radial grids (``rbf``) or from rate-0.5 coin flips (``independent``)."""
    if family == "rbf":
        params = sample_random_rbf_params_batch(n, height, width, rng)
        grids = rbf_grid(params[:, 0], params[:, 1], params[:, 2], height, width)
    else:
        grids = torch.full((n, height, width), 0.5)
    return torch.bernoulli(grids, generator=rng)


def train_predictor(classifier: DeskClassifier, dataset, cfg: AemConfig,
                    seed: int = 0) -> tuple[DeskClassifier, dict]:
    """Train a classifier-architecture predictor on masked inputs to match
    the classifier's full-input distribution. Returns the best-validation
    predictor and the loss history."""
    from salprune.classifiers import build_classifier

    h, w = dataset.image_hw
    predictor = build_classifier(classifier.spec, seed=derive_seed(seed, "predictor-init"))
    history = {"train_kl": [], "val_kl": []}
    if cfg.predictor_epochs == 0:
        return predictor, history
    classifier.eval()
    classifier.requires_grad_(False)
    train_x, _ = dataset.split_tensors("train")
    val_x, _ = dataset.split_tensors("val")
    val_masks = draw_predictor_masks(len(val_x), h, w, cfg.mask_family,
                                     make_rng(derive_seed(seed, "predictor-valmask")))
    opt = _adam(predictor.parameters(), cfg)
    data_rng = make_rng(derive_seed(seed, "predictor-batches"))
    mask_rng = make_rng(derive_seed(seed, "predictor-masks"))
    best_kl, best_state = float("inf"), None
    for _ in range(cfg.predictor_epochs):
        predictor.train()
        losses = []
        for ids in iter_batches(len(train_x), cfg.predictor_batch, data_rng):
            x = train_x[ids]
            with torch.no_grad():
                target = classifier_probs(classifier, x)
            masks = draw_predictor_masks(len(ids), h, w, cfg.mask_family, mask_rng)
            q = F.softmax(predictor(x * masks.unsqueeze(1)), dim=-1)
            loss = predictor_loss(target, q).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        val = masked_kl(classifier, predictor, val_x, val_masks)
        history["train_kl"].append(sum(losses) / len(losses))
        history["val_kl"].append(val)
        if val <= best_kl:
            best_kl = val
            best_state = copy.deepcopy(predictor.state_dict())
    if best_state is not None:
        predictor.load_state_dict(best_state)
    return predictor, history


def train_selector(classifier: DeskClassifier, predictor: DeskClassifier, dataset,
                   cfg: AemConfig, seed: int = 0) -> tuple[SelectorNet, dict]:
    """Train the selector's decoder/head/embedding against a frozen predictor
    and frozen encoder; one Monte-Carlo mask sample per image per step."""
    h, w = dataset.image_hw
    seed_everything(derive_seed(seed, "selector-init"))
    selector = SelectorNet(classifier, head=cfg.mask_family, sigma_bias=cfg.sigma_bias,
                           center_scale=cfg.center_scale, center_offset=cfg.center_offset)
    classifier.eval()
    classifier.requires_grad_(False)
    predictor.eval()
    predictor.requires_grad_(False)
    encoder_sum = module_checksum(classifier)
    history = {"train_loss": [], "val_kl": [], "val_l0": []}
    train_x, train_y = dataset.split_tensors("train")
    val_x, _ = dataset.split_tensors("val")
    opt = _adam(selector.parameters(), cfg)
    data_rng = make_rng(derive_seed(seed, "selector-batches"))
    noise_rng = make_rng(derive_seed(seed, "selector-noise"))
    for _ in range(cfg.selector_epochs):
        selector.train()
        losses = []
        for ids in iter_batches(len(train_x), cfg.selector_batch, data_rng):
            x, y = train_x[ids], train_y[ids]
            with torch.no_grad():
                target = classifier_probs(classifier, x)
            out = selector(x, y)
            grids = selector.mask_grids(out, h, w)
            soft = gumbel_sigmoid(grids, cfg.tau_selector, rng=noise_rng)
            loss = selector_loss(x, target, predictor, soft, cfg).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        val_kl, val_l0 = _selector_val_metrics(selector, classifier, predictor, val_x, h, w)
        history["train_loss"].append(sum(losses) / len(losses))
        history["val_kl"].append(val_kl)
        history["val_l0"].append(val_l0)
    if module_checksum(classifier) != encoder_sum:
        raise RuntimeError("frozen encoder changed during selector training")
    return selector, history


def train_selector_realx(classifier: DeskClassifier, predictor_bernoulli: DeskClassifier,
                         dataset, cfg: AemConfig, seed: int = 0) -> tuple[SelectorNet, dict]:
    """Independent-mask baseline: per-pixel logits trained with the KL +
    mask-size objective against a predictor trained on Bernoulli(0.5) masks."""
    base = copy.copy(cfg)
    base.mask_family = "independent"
    base.lambda2 = 0.0
    return train_selector(classifier, predictor_bernoulli, dataset, base, seed=seed)


@torch.no_grad()
def _selector_val_metrics(selector, classifier, predictor, val_x, h, w,
                          batch_size: int = 256) -> tuple[float, float]:
    """Validation KL (hardened masks) and mean relaxed mask size."""
    selector.eval()
    kl_total, l0_total, count = 0.0, 0.0, 0
    for ids in iter_batches(len(val_x), batch_size, shuffle=False):
        x = val_x[ids]
        out = selector(x)  # argmax labels: explanation-time path
        grids = selector.mask_grids(out, h, w)
        hard = (grids > 0.5).float()
        target = classifier_probs(classifier, x)
        q = F.softmax(predictor(x * hard.unsqueeze(1)), dim=-1)
        kl_total += float(kl_divergence(target, q).sum())
        l0_total += float(mask_l0(grids).sum())
        count += len(ids)
    return kl_total / max(count, 1), l0_total / max(count, 1)


@torch.no_grad()
def explain(selector: SelectorNet, x: torch.Tensor, y=None):
    """Full explanation bundle for a batch: parameters/logits, the
    Bernoulli-parameter grids, hardened masks, and masked inputs."""
    selector.eval()
    h, w = x.shape[-2], x.shape[-1]
    out = selector(x, y)
    grids = selector.mask_grids(out, h, w)
    hard = (grids > 0.5).to(x.dtype)
    masked = x * hard.unsqueeze(1)
    return out, grids, hard, masked
