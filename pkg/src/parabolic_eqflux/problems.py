"""Manufactured solutions of ``d_t u - Laplace u = f`` on the unit square.

Every problem vanishes on the boundary and supplies the exact value,
gradient and time derivative in closed form.  Points ``x`` have shape
(..., 2) and times are scalars.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = ["ManufacturedProblem", "get_problem", "PROBLEMS", "S4_WIDTH", "s4_centre"]

PI = np.pi


@dataclass(frozen=True)
class ManufacturedProblem:
    name: str
    u: Callable
    grad: Callable
    dt: Callable
    laplacian: Callable
    T: float = 1.0
    description: str = ""
    min_q: int = 0
    spatial_degree: int | None = None  # degree that makes the problem discrete
    meta: dict = field(default_factory=dict)

    def f(self, x, t):
        return self.dt(x, t) - self.laplacian(x, t)

    def u0(self, x):
        return self.u(x, 0.0)


def _sinsin(x):
    return np.sin(PI * x[..., 0]) * np.sin(PI * x[..., 1])


def _sinsin_grad(x):
    sx, sy = np.sin(PI * x[..., 0]), np.sin(PI * x[..., 1])
    cx, cy = np.cos(PI * x[..., 0]), np.cos(PI * x[..., 1])
    return PI * np.stack([cx * sy, sx * cy], axis=-1)


def _separable(name, phi, grad_phi, lap_phi, a, da, **kw):
    return ManufacturedProblem(
        name=name,
        u=lambda x, t: phi(x) * a(t),
        grad=lambda x, t: grad_phi(x) * a(t),
        dt=lambda x, t: phi(x) * da(t),
        laplacian=lambda x, t: lap_phi(x) * a(t),
        **kw,
    )


def _bubble(x):
    X, Y = x[..., 0], x[..., 1]
    return X * (1 - X) * Y * (1 - Y)


def _bubble_grad(x):
    X, Y = x[..., 0], x[..., 1]
    return np.stack([(1 - 2 * X) * Y * (1 - Y), X * (1 - X) * (1 - 2 * Y)], axis=-1)


def _bubble_lap(x):
    X, Y = x[..., 0], x[..., 1]
    return -2 * Y * (1 - Y) - 2 * X * (1 - X)


# moving Gaussian times the bubble: u = 16 B(x) exp(-|x - c(t)|^2 / (2 s^2))
S4_WIDTH = 0.08


def s4_centre(t):
    return np.array([0.25 + 0.5 * t, 0.5 + 0.2 * np.sin(PI * t)])


def _s4_centre_dt(t):
    return np.array([0.5, 0.2 * PI * np.cos(PI * t)])


def _s4_parts(x, t):
    s2 = S4_WIDTH**2
    r = x - s4_centre(t)
    G = np.exp(-np.sum(r * r, axis=-1) / (2 * s2))
    return r, s2, G


def _s4_u(x, t):
    _, _, G = _s4_parts(x, t)
    return 16 * _bubble(x) * G


def _s4_grad(x, t):
    r, s2, G = _s4_parts(x, t)
    gG = -G[..., None] * r / s2
    return 16 * (_bubble_grad(x) * G[..., None] + _bubble(x)[..., None] * gG)


def _s4_dt(x, t):
    r, s2, G = _s4_parts(x, t)
    return 16 * _bubble(x) * G * (r @ _s4_centre_dt(t)) / s2


def _s4_lap(x, t):
    r, s2, G = _s4_parts(x, t)
    rr = np.sum(r * r, axis=-1)
    lapG = G * (rr / s2**2 - 2 / s2)
    gG = -G[..., None] * r / s2
    return 16 * (lapG * _bubble(x) + 2 * np.sum(gG * _bubble_grad(x), axis=-1) + G * _bubble_lap(x))


PROBLEMS = {
    "S1": _separable(
        "S1",
        _sinsin,
        _sinsin_grad,
        lambda x: -2 * PI**2 * _sinsin(x),
        lambda t: np.exp(-t),
        lambda t: -np.exp(-t),
        description="sin(pi x) sin(pi y) exp(-t)",
    ),
    "S2": _separable(
        "S2",
        _sinsin,
        _sinsin_grad,
        lambda x: -2 * PI**2 * _sinsin(x),
        lambda t: 1 + t**3,
        lambda t: 3 * t**2,
        description="sin(pi x) sin(pi y) (1 + t^3)",
    ),
    "S3": _separable(
        "S3",
        _bubble,
        _bubble_grad,
        _bubble_lap,
        lambda t: t,
        lambda t: np.ones_like(t),
        description="t x(1-x) y(1-y), exactly representable for p >= 4, q >= 1",
        min_q=1,
        spatial_degree=4,
    ),
    "S4": ManufacturedProblem(
        "S4",
        _s4_u,
        _s4_grad,
        _s4_dt,
        _s4_lap,
        description="Gaussian bump moving along a curved path, times the bubble",
        meta={"width": S4_WIDTH},
    ),
}


def get_problem(name) -> ManufacturedProblem:
    try:
        return PROBLEMS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
