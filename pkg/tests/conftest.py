import numpy as np
import pytest
import torch

from querydistill.harness.config import config_from_dict
from querydistill.harness.train import set_reference_mode


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, verdict, detail in VERDICTS:
        terminalreporter.write_line(f"criterion {criterion}: {verdict} - {detail}")


@pytest.fixture(autouse=True)
def _single_thread():
    set_reference_mode()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def tiny_overrides(**distill):
    """A config small enough for per-test training."""
    return {
        "data": {"train_scenes": 24, "val_scenes": 8},
        "schedule": {"epochs": 2, "batch_size": 8, "lr_decay_epoch": 1},
        "distill": distill,
    }


@pytest.fixture
def tiny_config():
    return config_from_dict(tiny_overrides())


@pytest.fixture
def tiny_distill_config():
    cfg = config_from_dict(tiny_overrides(md=True, pd=True, aux=True))
    cfg.ema.stop_update = True
    return cfg


def central_diff(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Independent central-difference gradient oracle over a flat tensor."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        plus = float(fn(x))
        flat[i] = orig - h
        minus = float(fn(x))
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2 * h)
    return grad


def rel_err(a: float, b: float, floor: float = 1e-10) -> float:
    denom = max(abs(a), abs(b))
    if denom < floor:
        return abs(a - b)
    return abs(a - b) / denom
