import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from semsdf import (
    CompositeField,
    DensityParams,
    GlobalMode,
    Sphere,
    face_scene,
    init_triplane_sphere,
    two_sphere_scene,
)

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def two_sphere():
    return two_sphere_scene()


@pytest.fixture(scope="session")
def face():
    return face_scene()


@pytest.fixture()
def unit_sphere_field():
    field = CompositeField(
        locals=[Sphere((0.0, 0.0, 0.0), 1.0, class_id=0, color=(0.8, 0.2, 0.2))],
        global_mode=GlobalMode.EXACT_COMPOSITE,
        extent=4.0,
    )
    return field, DensityParams(alpha=0.04)


@pytest.fixture(scope="session")
def tiny_pair():
    """4x4x8 tri-plane pair used by the finite-difference gradient checks."""
    return init_triplane_sphere(
        radius=1.0, n_classes=2, resolution=4, features=8, extent=4.0, shape_hidden=16, seed=11
    )


def rel_err(analytic, numeric, floor=1e-8):
    a = float(analytic)
    n = float(numeric)
    scale = max(abs(a), abs(n), floor)
    return abs(a - n) / scale


def fd_scalar(fn, tensor, index, h):
    """Central finite difference of scalar fn wrt one tensor element."""
    flat = tensor.reshape(-1)
    with torch.no_grad():
        orig = float(flat[index])
        flat[index] = orig + h
        hi = float(fn())
        flat[index] = orig - h
        lo = float(fn())
        flat[index] = orig
    return (hi - lo) / (2.0 * h)


def param_grad_check(fn, params, rng, h=1e-4, max_per_tensor=6, tol=1e-3, floor=1e-6):
    """Compare autograd gradients of scalar fn() against central differences.

    Checks up to max_per_tensor random elements per parameter tensor; entries
    where both gradients are below ``floor`` are skipped as numerically zero.
    Returns the number of compared entries.
    """
    for p in params:
        p.grad = None
    value = fn()
    value.backward()
    checked = 0
    for p in params:
        grad = torch.zeros_like(p) if p.grad is None else p.grad
        flat_grad = grad.reshape(-1)
        count = min(max_per_tensor, flat_grad.numel())
        idx = rng.choice(flat_grad.numel(), size=count, replace=False)
        for i in idx:
            numeric = fd_scalar(lambda: fn().detach(), p.data, int(i), h)
            analytic = float(flat_grad[int(i)])
            if max(abs(analytic), abs(numeric)) < floor:
                continue
            err = rel_err(analytic, numeric)
            assert err < tol, (
                f"gradient mismatch at element {int(i)}: autograd {analytic:.6e} "
                f"vs finite difference {numeric:.6e} (rel err {err:.2e})"
            )
            checked += 1
    return checked
