"""Finite-difference gradient suite (module invariants)."""

import helpers


def test_rbf_param_gradients():
    assert helpers.check_rbf_param_gradients() <= 1e-4


def test_center_nonlinearity_gradient():
    assert helpers.check_center_nonlinearity_gradient() <= 1e-4


def test_sigma_nonlinearity_gradient():
    assert helpers.check_sigma_nonlinearity_gradient() <= 1e-4


def test_smoothness_gradient():
    assert helpers.check_smoothness_gradient() <= 1e-4


def test_soft_sample_path_gradient():
    assert helpers.check_soft_sample_gradient() <= 1e-4


def test_selector_head_bias_gradient():
    assert helpers.check_selector_bias_gradient() <= 1e-3


def test_gate_logit_gradient():
    assert helpers.check_gate_gradient() <= 1e-3


def test_resource_loss_derivative():
    err_above, below_grad, analytic_gap = helpers.check_resource_loss_derivative()
    assert err_above <= 1e-6
    assert below_grad == 0.0
    assert analytic_gap <= 1e-9
