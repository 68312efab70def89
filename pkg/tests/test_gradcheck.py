import numpy as np
import pytest
import torch

import avmaster.gradcheck as gc
from avmaster import ModelConfig
from avmaster.model import PARAMETER_GROUPS


def test_numeric_gradient_of_quadratic():
    x = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    g = gc.numeric_gradient(lambda: (x**2).sum() + 3 * x[1], x, [0, 1, 2])
    assert np.allclose(g, [2.0, -1.0, 1.0], atol=1e-8)
    assert x.tolist() == [1.0, -2.0, 0.5]


def test_relative_error():
    assert gc.relative_error([0, 0], [0, 0]) == 0.0
    assert gc.relative_error([1, 0], [1, 0]) == 0.0
    assert gc.relative_error([3, 4], [0, 0]) == 1.0


def test_report_covers_every_group():
    report = gc.gradient_check(ModelConfig.tiny(), entries_per_tensor=1)
    assert report.passed, report.as_dict()
    assert set(report.groups) == set(PARAMETER_GROUPS.values())
    assert all(err <= 1e-4 for err in report.groups.values())
    assert report.inert and report.inert_max_abs <= 1e-8
    assert report.as_dict()["max_relative_error_per_group"] == report.groups


def test_dead_parameter_is_reported(monkeypatch):
    real = gc.init_parameters

    def with_unused(config, seed=None):
        model = real(config, seed)
        model.dec_qa.register_parameter("unused", torch.nn.Parameter(torch.ones(3, dtype=torch.float64)))
        return model

    monkeypatch.setattr(gc, "init_parameters", with_unused)
    report = gc.gradient_check(ModelConfig.tiny(), entries_per_tensor=1)
    assert "dec_qa.unused" in report.dead
    assert not report.passed
