import math

import pytest
import torch

from salprune.aem import AemConfig, SelectorNet, train_predictor, train_selector
from salprune.checkpoint import module_checksum
from salprune.classifiers import (
    ClassifierSpec,
    FlopsModel,
    LayerRecord,
    TrainConfig,
    build_classifier,
    flops_of_layer,
    resnet_desk_spec,
)
from salprune.data import make_synthetic
from salprune.pruning import (
    ArchVector,
    GateSet,
    PruneConfig,
    build_pruning_pairs,
    current_flops,
    effective_hard_vector,
    export_subnetwork,
    finetune,
    gate_features,
    gates_forward,
    hard_keep_indices,
    interpretation_loss,
    prune,
    resource_loss,
)
from salprune.rng import make_rng

ATOL = 1e-6


def tiny_spec(num_classes=4):
    return resnet_desk_spec(num_classes=num_classes, blocks_per_stage=(1, 1, 1))


class TestGatesForward:
    def test_open_start(self):
        g = GateSet({"a": 1}, gate_bias=3.0, tau=0.4)
        v = gates_forward(g, noise=0.0)
        expected = 1.0 / (1.0 + math.exp(-7.5))
        assert float(v.values["a"][0]) == pytest.approx(expected, abs=ATOL)
        assert expected == pytest.approx(0.999447, abs=1e-6)

    def test_zero_logit_point(self):
        g = GateSet({"a": 1}, gate_bias=3.0, tau=0.4)
        with torch.no_grad():
            g.logits["a"].fill_(-3.0)
        v = gates_forward(g, noise=0.0)
        assert float(v.values["a"][0]) == pytest.approx(0.5, abs=ATOL)

    def test_hard_mode(self):
        g = GateSet({"a": 2}, gate_bias=3.0, tau=0.4)
        with torch.no_grad():
            g.logits["a"][0] = -4.0
            g.logits["a"][1] = -2.0
        v = gates_forward(g, hard=True)
        assert v.values["a"].tolist() == [0.0, 1.0]
        assert v.kind == "hard"

    def test_nonpositive_tau_rejected(self):
        with pytest.raises(ValueError):
            GateSet({"a": 2}, tau=0.0)

    def test_soft_values_in_open_interval(self):
        # moderate constants avoid float32 saturation at exactly 1.0
        g = GateSet({"a": 64}, gate_bias=0.0, tau=1.0)
        v = gates_forward(g, rng=make_rng(0))
        assert torch.all(v.values["a"] > 0) and torch.all(v.values["a"] < 1)
        sharp = gates_forward(GateSet({"a": 64}), rng=make_rng(0))
        assert torch.all(sharp.values["a"] > 0) and torch.all(sharp.values["a"] <= 1)


class TestGateFeatures:
    def test_identity(self):
        f = torch.rand(2, 3, 4, 4)
        assert torch.equal(gate_features(f, torch.ones(3)), f)

    def test_zeros(self):
        f = torch.rand(2, 3, 4, 4)
        assert torch.all(gate_features(f, torch.zeros(3)) == 0)

    def test_per_channel_scaling(self):
        f = torch.rand(1, 2, 4, 4)
        out = gate_features(f, torch.tensor([1.0, 0.5]))
        assert torch.allclose(out[:, 0].norm(), f[:, 0].norm())
        assert torch.allclose(out[:, 1].norm(), 0.5 * f[:, 1].norm())

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            gate_features(torch.rand(1, 3, 2, 2), torch.ones(4))


class TestCurrentFlops:
    def test_all_ones_gives_t_all(self):
        fm = FlopsModel.from_spec(resnet_desk_spec())
        ones = ArchVector.ones(fm.group_sizes)
        assert float(current_flops(ones, fm)) == fm.t_all

    def test_bilinear_half_gates_on_toy_chain(self):
        # conv_a: out gated g1; conv_b: in g1, out g2 -> 0.25 factor at 0.5
        recs = (
            LayerRecord("a", "conv", 3, 8, 3, 1, (8, 8), out_gate="g1"),
            LayerRecord("b", "conv", 8, 8, 3, 1, (8, 8), in_gate="g1", out_gate="g2"),
        )
        t_all = sum(flops_of_layer(r, r.in_channels, r.out_channels) for r in recs)
        fm = FlopsModel(records=recs, group_sizes={"g1": 8, "g2": 8}, t_all=t_all)
        half = ArchVector({"g1": torch.full((8,), 0.5), "g2": torch.full((8,), 0.5)},
                          kind="soft")
        full_a = flops_of_layer(recs[0], 3, 8)
        full_b = flops_of_layer(recs[1], 8, 8)
        expected = 0.5 * full_a + 0.25 * full_b
        assert float(current_flops(half, fm)) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_hard_matches_integer_recount(self, seed):
        fm = FlopsModel.from_spec(resnet_desk_spec())
        rng = make_rng(seed)
        values = {g: (torch.rand(n, generator=rng) < 0.5).float()
                  for g, n in fm.group_sizes.items()}
        v = ArchVector(values, kind="hard")
        counts = v.active_counts()
        recount = 0
        for rec in fm.records:
            if not rec.gated:
                continue
            ci = counts[rec.in_gate] if rec.in_gate else rec.in_channels
            co = counts[rec.out_gate] if rec.out_gate else rec.out_channels
            recount += flops_of_layer(rec, ci, co)
        assert float(current_flops(v, fm)) == recount


class TestResourceLoss:
    def test_below_target_is_zero(self):
        assert float(resource_loss(0.4, 0.5)) == 0.0

    def test_double_overshoot(self):
        assert float(resource_loss(2.0, 1.0)) == pytest.approx(math.log(2.0), abs=ATOL)

    def test_exact_target(self):
        assert float(resource_loss(0.5, 0.5)) == 0.0

    def test_nonpositive_target_rejected(self):
        with pytest.raises(ValueError):
            resource_loss(0.5, 0.0)

    def test_scale_invariant(self):
        t_all = 40108032
        assert float(resource_loss(0.4 * t_all, 0.5 * t_all)) == 0.0


class TestInterpretationLoss:
    def test_identical(self):
        p = torch.tensor([16.0, 16.0, 10.0])
        assert float(interpretation_loss(p, p)) == 0.0

    def test_center_shift(self):
        a = torch.tensor([16.0, 16.0, 10.0])
        b = torch.tensor([18.0, 16.0, 10.0])
        assert float(interpretation_loss(a, b)) == pytest.approx(4.0, abs=ATOL)

    def test_two_component_shift(self):
        a = torch.tensor([16.0, 16.0, 10.0])
        b = torch.tensor([16.0, 13.0, 14.0])
        assert float(interpretation_loss(a, b)) == pytest.approx(25.0, abs=ATOL)

    def test_batched(self):
        a = torch.zeros(2, 3)
        b = torch.tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
        assert interpretation_loss(a, b).tolist() == [1.0, 4.0]


class TestExport:
    def test_all_open_unchanged(self):
        model = build_classifier(resnet_desk_spec(), seed=0).eval()
        fm = FlopsModel.from_spec(model.spec)
        gates = GateSet(fm.group_sizes)  # zero logits + b=3: all open
        exported, v = export_subnetwork(model, gates)
        assert exported.spec.gate_groups() == model.spec.gate_groups()
        x = torch.randn(2, 3, 32, 32, generator=make_rng(4))
        with torch.no_grad():
            assert torch.equal(model(x), exported.eval()(x))
        assert all(torch.all(t == 1) for t in v.values.values())

    @pytest.mark.parametrize("arch", ["resnet", "dsnet"])
    def test_random_gates_equivalence(self, arch):
        from salprune.classifiers import dsnet_desk_spec

        spec = resnet_desk_spec() if arch == "resnet" else dsnet_desk_spec()
        model = build_classifier(spec, seed=1).eval()
        fm = FlopsModel.from_spec(spec)
        gates = GateSet(fm.group_sizes)
        with torch.no_grad():
            for p in gates.logits.values():
                p.uniform_(-8, 2, generator=None)
        exported, v = export_subnetwork(model, gates)
        exported.eval()
        x = torch.randn(8, 3, 32, 32, generator=make_rng(5))
        with torch.no_grad():
            diff = (model(x, v) - exported(x)).abs().max()
        assert float(diff) <= 1e-5

    def test_exported_flops_match(self):
        model = build_classifier(resnet_desk_spec(), seed=2).eval()
        fm = FlopsModel.from_spec(model.spec)
        gates = GateSet(fm.group_sizes)
        with torch.no_grad():
            for p in gates.logits.values():
                p.uniform_(-6, 1)
        exported, v = export_subnetwork(model, gates)
        fm_exported = FlopsModel.from_spec(exported.spec)
        assert fm_exported.t_all == float(current_flops(v, fm))

    def test_keep_one_rule(self):
        model = build_classifier(tiny_spec(), seed=0).eval()
        fm = FlopsModel.from_spec(model.spec)
        gates = GateSet(fm.group_sizes)
        with torch.no_grad():
            gates.logits["s0b0"].fill_(-5.0)
            gates.logits["s0b0"][7] = -4.0  # highest logit, still closed
        keep = hard_keep_indices(gates)
        assert keep["s0b0"] == [7]
        exported, v = export_subnetwork(model, gates)
        assert exported.spec.hidden_width(0, 0) == 1
        assert float(v.values["s0b0"].sum()) == 1.0
        x = torch.randn(2, 3, 32, 32, generator=make_rng(6))
        with torch.no_grad():
            diff = (model(x, v) - exported.eval()(x)).abs().max()
        assert float(diff) <= 1e-5


class TestPruneLoop:
    @pytest.fixture(scope="class")
    def artifacts(self):
        ds = make_synthetic(n=180, num_classes=4, seed=2)
        classifier = build_classifier(tiny_spec(), seed=0).eval()
        acfg = AemConfig(predictor_epochs=1, predictor_batch=64,
                         selector_epochs=1, selector_batch=32)
        predictor, _ = train_predictor(classifier, ds, acfg, seed=1)
        selector, _ = train_selector(classifier, predictor, ds, acfg, seed=1)
        return ds, classifier, selector

    def test_defaults_pinned(self):
        cfg = PruneConfig()
        assert cfg.gamma1 == 0.5 and cfg.gamma2 == 2.0
        assert cfg.gate_bias == 3.0 and cfg.tau == 0.4

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            PruneConfig(target_rate=0.0)
        with pytest.raises(ValueError):
            PruneConfig(gamma1=-1.0)

    def test_prune_freezes_weights_and_traces(self, artifacts):
        ds, classifier, selector = artifacts
        fm = FlopsModel.from_spec(classifier.spec)
        pairs = build_pruning_pairs(classifier, selector, ds)
        assert len(pairs) == len(ds.prune_ids)
        w_before = module_checksum(classifier)
        b_before = module_checksum(selector)
        cfg = PruneConfig(epochs=2, batch_size=64, lr=0.05, seed=0)
        result = prune(classifier, selector, pairs, fm, cfg, ds)
        assert module_checksum(classifier) == w_before
        assert module_checksum(selector) == b_before
        assert result.trace
        rec = result.trace[-1]
        assert {"epoch", "step", "class_loss", "interp_loss", "resource_loss",
                "flops_rate"} <= set(rec)
        assert 0.0 < rec["flops_rate"] <= 1.001

    def test_prune_deterministic(self, artifacts):
        ds, classifier, selector = artifacts
        fm = FlopsModel.from_spec(classifier.spec)
        pairs = build_pruning_pairs(classifier, selector, ds)
        cfg = PruneConfig(epochs=1, batch_size=64, seed=3)
        r1 = prune(classifier, selector, pairs, fm, cfg, ds)
        r2 = prune(classifier, selector, pairs, fm, cfg, ds)
        assert module_checksum(r1.gates) == module_checksum(r2.gates)
        assert r1.trace == r2.trace

    def test_pairs_cached_before_gating(self, artifacts):
        ds, classifier, selector = artifacts
        p1 = build_pruning_pairs(classifier, selector, ds)
        p2 = build_pruning_pairs(classifier, selector, ds)
        assert all(a.c_x == b.c_x and a.class_idx == b.class_idx
                   for a, b in zip(p1, p2))


class TestFinetune:
    def test_zero_epochs_unchanged(self):
        ds = make_synthetic(n=120, num_classes=4, seed=3)
        model = build_classifier(tiny_spec(), seed=0)
        before = module_checksum(model)
        x, y = ds.split_tensors("train")
        vx, vy = ds.split_tensors("val")
        finetune(model, x, y, vx, vy, TrainConfig(epochs=0))
        assert module_checksum(model) == before

    def test_finetune_defaults(self):
        cfg = TrainConfig()
        assert cfg.momentum == 0.9 and cfg.weight_decay == 1e-4 and cfg.lr == 0.1
