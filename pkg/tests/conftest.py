"""Shared test setup: put local `src/` on the path and provide gradient checking."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pytest

# Prepend the project's `src/` directory so local package modules are used
ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from gated_fusion.tensor import ComputationGraph, Tensor, backward, mul, no_grad, reduce_sum  # noqa: E402

GRAD_STEP = 1e-2
GRAD_RTOL = 1e-3
# float32 round-off in the forward pass, divided by 2 * GRAD_STEP
GRAD_FLOOR = 5e-5


def gradient_error(
    forward: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    seed: int = 0,
    step: float = GRAD_STEP,
) -> float:
    """Largest relative error between backprop and central differences over ``inputs``.

    ``forward`` may return a tensor of any shape; it is contracted with a
    fixed random weighting so every output element contributes. The
    contraction happens in float64 on the numeric side.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    with no_grad():
        probe = forward()
    weights = np.random.default_rng(seed).uniform(-1.0, 1.0, size=probe.shape)

    with ComputationGraph() as graph:
        out = forward()
        loss = reduce_sum(mul(out, Tensor(weights)))
        backward(loss, graph)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    def objective() -> float:
        with no_grad():
            return float(np.sum(forward().data.astype(np.float64) * weights))

    worst = 0.0
    for t, grad in zip(inputs, analytic):
        numeric = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + np.float32(step)
            hi_x = float(flat[i])
            hi = objective()
            flat[i] = orig - np.float32(step)
            lo_x = float(flat[i])
            lo = objective()
            flat[i] = orig
            numeric.reshape(-1)[i] = (hi - lo) / (hi_x - lo_x)
        scale = max(float(np.linalg.norm(grad)), float(np.linalg.norm(numeric)), GRAD_FLOOR)
        worst = max(worst, float(np.linalg.norm(grad - numeric)) / scale)
    return worst


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def gradcheck() -> Callable[..., float]:
    return gradient_error


# ---------------------------------------------------------------------------
# tiny models and data shared by the detector, gating and evaluation tests


def tiny_arch():
    from gated_fusion.detector import DetectorConfig

    return DetectorConfig(image_size=(16, 16), backbone_channels=(4,), head_channels=4, anchor_scales=(6.0,))


def tiny_spec(domain_id: str, hue: float):
    from gated_fusion.domains import DomainSpec

    return DomainSpec(
        domain_id=domain_id,
        background_hue=hue,
        object_count_range=(1, 2),
        object_scale_range=(4.0, 7.0),
        object_hue=(hue + 0.5) % 1.0,
    )


def tiny_samples(domain_id: str = "S1", hue: float = 0.1, n: int = 6, seed: int = 0):
    from gated_fusion.domains import generate_domain_dataset

    return generate_domain_dataset(tiny_spec(domain_id, hue), n, seed=seed, image_size=(16, 16))


@pytest.fixture(scope="session")
def tiny_experts():
    """Three briefly trained experts on three differently coloured domains."""
    from gated_fusion.detector import TrainConfig, train_expert

    config = TrainConfig(epochs=2, batch_size=4, learning_rate=0.01, seed=3)
    return [
        train_expert(tiny_samples(f"S{i + 1}", hue, n=8, seed=i), config, tiny_arch(), expert_id=f"S{i + 1}")
        for i, hue in enumerate((0.0, 0.33, 0.66))
    ]
