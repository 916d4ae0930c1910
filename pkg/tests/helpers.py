"""Shared test machinery: central finite differences and the gradient
checks reused by the acceptance suite."""

from __future__ import annotations

import torch

from salprune import masks
from salprune.aem import AemConfig, SelectorNet, classifier_probs, selector_loss
from salprune.classifiers import FlopsModel, build_classifier, resnet_desk_spec
from salprune.pruning import (
    GateSet,
    current_flops,
    gates_forward,
    interpretation_loss,
    resource_loss,
)


def central_diff(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar f at x (elementwise)."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    """Norm-relative error ||a - b|| / max(||a||, ||b||)."""
    a = a.reshape(-1).double()
    b = b.reshape(-1).double()
    scale = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / scale


def autograd_vs_fd(f, x0: torch.Tensor, eps: float = 1e-6) -> float:
    """Max relative error between autograd and central differences."""
    x = x0.clone().double().requires_grad_(True)
    f(x).backward()
    analytic = x.grad.detach().clone()
    numeric = central_diff(lambda t: f(t.detach()), x0.clone().double(), eps)
    return max_rel_err(analytic, numeric)


# ---------------------------------------------------------------------------
# The gradient checks named by the module invariants


def check_rbf_param_gradients() -> float:
    torch.manual_seed(0)
    weights = torch.rand(12, 12, dtype=torch.float64)

    def f(p):
        return (masks.rbf_grid(p[0], p[1], p[2], 12, 12) * weights).sum()

    return autograd_vs_fd(f, torch.tensor([5.3, 7.1, 3.7], dtype=torch.float64))


def check_center_nonlinearity_gradient() -> float:
    def f(u):
        return masks.center_nonlinearity(u, 14.0, 16.0).sum()

    return autograd_vs_fd(f, torch.tensor([-20.0, -3.0, 0.5, 9.0], dtype=torch.float64))


def check_sigma_nonlinearity_gradient() -> float:
    def f(u):
        return masks.sigma_nonlinearity(u).sum()

    return autograd_vs_fd(f, torch.tensor([-4.0, 0.0, 2.5, 11.0], dtype=torch.float64))


def check_smoothness_gradient() -> float:
    torch.manual_seed(1)
    m0 = torch.rand(9, 11, dtype=torch.float64)
    return autograd_vs_fd(lambda m: masks.mask_smoothness(m), m0)


def check_soft_sample_gradient() -> float:
    """Gradient through the soft-sample path with frozen noise, back to the
    RBF parameters."""
    torch.manual_seed(2)
    noise = torch.empty(10, 10, dtype=torch.float64).exponential_(1.0)
    weights = torch.rand(10, 10, dtype=torch.float64)

    def f(p):
        grid = masks.rbf_grid(p[0], p[1], p[2], 10, 10)
        soft = masks.gumbel_sigmoid(grid, tau=1.0, noise=noise)
        return (soft * weights).sum()

    return autograd_vs_fd(f, torch.tensor([4.2, 6.8, 2.9], dtype=torch.float64))


def tiny_resnet_spec(num_classes: int = 4):
    return resnet_desk_spec(num_classes=num_classes, blocks_per_stage=(1, 1, 1))


def check_selector_bias_gradient() -> float:
    """d(selector loss)/d(output-head bias) with frozen mask noise.

    The decoder trunk is evaluated once; the loss is rebuilt from the head
    convolution so the bias is an autograd leaf the FD check can perturb.
    """
    import torch.nn.functional as F

    from salprune.aem import feature_filter

    spec = tiny_resnet_spec()
    classifier = build_classifier(spec, seed=0).double().eval()
    predictor = build_classifier(spec, seed=1).double().eval()
    classifier.requires_grad_(False)
    predictor.requires_grad_(False)
    torch.manual_seed(3)
    selector = SelectorNet(classifier).double().eval()
    selector.requires_grad_(False)
    x = torch.randn(2, 3, 32, 32, dtype=torch.float64)
    y = torch.tensor([1, 3])
    noise = torch.empty(2, 32, 32, dtype=torch.float64).exponential_(1.0)
    cfg = AemConfig(lambda1=0.01, lambda2=0.001)
    target = classifier_probs(classifier, x)

    weight = selector.head.weight.detach()
    feats = selector.encoder.backbone(x)
    z = feature_filter(feats[-1], selector.embedding, y)
    h = selector.up2(selector.up1(z, feats[-2]), feats[-3]).detach()

    def head_loss(bias):
        u = F.conv2d(h, weight, bias).flatten(1)
        c_z = masks.center_nonlinearity(u[:, 0], selector.center_scale, selector.center_offset)
        c_t = masks.center_nonlinearity(u[:, 1], selector.center_scale, selector.center_offset)
        sigma = masks.sigma_nonlinearity(u[:, 2])
        grids = masks.rbf_grid(c_z, c_t, sigma, 32, 32)
        soft = masks.gumbel_sigmoid(grids, cfg.tau_selector, noise=noise)
        return selector_loss(x, target, predictor, soft, cfg).mean()

    bias0 = selector.head.bias.detach().clone()
    return autograd_vs_fd(head_loss, bias0, eps=1e-5)


def check_gate_gradient() -> float:
    """d(joint pruning loss)/d(gate logits) with frozen Gumbel noise."""
    spec = tiny_resnet_spec()
    classifier = build_classifier(spec, seed=0).double().eval()
    classifier.requires_grad_(False)
    torch.manual_seed(4)
    selector = SelectorNet(classifier).double().eval()
    selector.requires_grad_(False)
    fm = FlopsModel.from_spec(spec)
    gates = GateSet(fm.group_sizes).double()
    noise = {name: torch.randn(n, dtype=torch.float64)
             for name, n in fm.group_sizes.items()}
    x = torch.randn(2, 3, 32, 32, dtype=torch.float64)
    labels = torch.tensor([0, 2])
    cls_idx = torch.tensor([1, 3])
    c_x = torch.tensor([[14.0, 18.0, 6.0], [20.0, 9.0, 4.0]], dtype=torch.float64)

    import torch.nn.functional as F

    def joint_loss(theta_flat):
        offset = 0
        values = {}
        for name, n in fm.group_sizes.items():
            theta = theta_flat[offset:offset + n]
            values[name] = torch.sigmoid((theta + noise[name] + gates.gate_bias) / gates.tau)
            offset += n
        from salprune.pruning import ArchVector

        v = ArchVector(values, kind="soft")
        ce = F.cross_entropy(classifier(x, v), labels).double()
        li = interpretation_loss(c_x, selector(x, cls_idx, gates=v)).mean()
        rate = current_flops(v, fm) / fm.t_all
        return ce + 0.5 * li + 2.0 * resource_loss(rate, 0.5)

    theta0 = 0.3 * torch.randn(sum(fm.group_sizes.values()), dtype=torch.float64)
    return autograd_vs_fd(joint_loss, theta0, eps=1e-5)


def check_resource_loss_derivative() -> tuple[float, float, float]:
    """(rel err above target, |grad| below target, analytic-above) triple."""
    target = 0.5

    def f(t):
        return resource_loss(t, target).sum()

    above = torch.tensor([0.8], dtype=torch.float64)
    err_above = autograd_vs_fd(f, above)
    t = torch.tensor([0.3], dtype=torch.float64, requires_grad=True)
    resource_loss(t, target).sum().backward()
    below_grad = float(t.grad.abs().max())
    t2 = torch.tensor([0.8], dtype=torch.float64, requires_grad=True)
    resource_loss(t2, target).sum().backward()
    analytic = float(t2.grad[0])
    return err_above, below_grad, abs(analytic - 1.0 / 0.8)
