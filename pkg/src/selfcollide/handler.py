"""Optimization-based collision handling in the latent space.

Projects a user latent code into the learned collision-free set by solving
min E(z) s.t. c(z) <= 0 with an augmented Lagrangian outer loop (psi =
max(0, c), term mu*psi + rho/2 psi^2) and gradient descent with Armijo
backtracking inside.  Whatever the mesh size, the constraint is the single
scalar detector output, so problem size never grows with |V|.

An infeasible exit still returns the final iterate: the method drives the
constraint violation down as far as the penalty schedule allows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .autoencoder import BilevelAutoencoder
from .detector import Detector


class HandlerError(RuntimeError):
    pass


@dataclass
class AlmConfig:
    rho0: float = 10.0
    rho_factor: float = 10.0
    rho_max: float = 1e6
    outer_max: int = 20
    inner_max: int = 500
    inner_tol: float = 1e-6
    armijo_c: float = 1e-4
    shrink: float = 0.5
    step0: float = 1.0
    feas_tol: float = 1e-6


# -- constraints (c(z) <= 0 feasible) ----------------------------------------

class DetectorConstraint:
    """Neural collision constraint: sigmoid classifier output minus 0.5."""

    def __init__(self, detector: Detector):
        self.detector = detector

    def value(self, z: np.ndarray) -> float:
        return float(self.detector.forward(z)[0] - 0.5)

    def grad(self, z: np.ndarray) -> np.ndarray:
        return self.detector.prob_and_grad(z)[1]


class DiskConstraint:
    """||z - c|| <= R as (||z - c||^2 - R^2)/2; analytic test double."""

    def __init__(self, center: np.ndarray, radius: float):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def value(self, z: np.ndarray) -> float:
        d = np.asarray(z) - self.center
        return 0.5 * (float(d @ d) - self.radius ** 2)

    def grad(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) - self.center


# -- objectives ----------------------------------------------------------------

class LatentTarget:
    """E(z) = ||z - z_user||^2 / 2."""

    def __init__(self, z_user: np.ndarray):
        self.z_user = np.asarray(z_user, dtype=np.float64)

    def value(self, z: np.ndarray) -> float:
        d = z - self.z_user
        return 0.5 * float(d @ d)

    def grad(self, z: np.ndarray) -> np.ndarray:
        return z - self.z_user


class CartesianTarget:
    """E(z) = ||decoded mesh vertices - V_user||^2 / 2.

    The decoded vertices are rest + displacement, so the objective reduces
    to a least-squares fit of the decoder output to V_user - rest.
    """

    def __init__(self, v_user: np.ndarray, model: BilevelAutoencoder, rest_vertices: np.ndarray):
        self.f_target = (np.asarray(v_user, dtype=np.float64)
                         - np.asarray(rest_vertices, dtype=np.float64)).ravel()
        self.model = model

    def value(self, z: np.ndarray) -> float:
        d = self.model.decode(z) - self.f_target
        return 0.5 * float(d @ d)

    def grad(self, z: np.ndarray) -> np.ndarray:
        tape = nn.Tape()
        leaves = nn.leaves_for(tape, self.model.params)
        zvar = tape.leaf(np.asarray(z, dtype=np.float64)[None, :], "z")
        recon = self.model.decode_var(tape, leaves, zvar)
        diff = tape.sub(recon, tape.leaf(self.f_target[None, :], "target"))
        loss = tape.scale(tape.sum(tape.square(diff)), 0.5)
        tape.backward(loss)
        return tape.grad(zvar)[0]


# -- solver ---------------------------------------------------------------------

@dataclass
class AlmTraceRow:
    outer: int
    mu: float
    rho: float
    constraint: float
    objective: float
    inner_iters: int


@dataclass
class AlmResult:
    z: np.ndarray
    feasible: bool
    trace: list = field(default_factory=list)

    def trace_json(self) -> str:
        return json.dumps([row.__dict__ for row in self.trace])


def _inner_minimize(z, objective, constraint, mu, rho, config):
    """Gradient descent with Armijo backtracking on the augmented objective."""

    def lagrangian(zz):
        psi = max(0.0, constraint.value(zz))
        return objective.value(zz) + mu * psi + 0.5 * rho * psi * psi

    def lagrangian_grad(zz):
        c = constraint.value(zz)
        g = objective.grad(zz)
        if c > 0.0:
            g = g + (mu + rho * c) * constraint.grad(zz)
        return g

    value = lagrangian(z)
    if not np.isfinite(value):
        raise HandlerError("non-finite objective at inner start")
    for it in range(config.inner_max):
        g = lagrangian_grad(z)
        if not np.all(np.isfinite(g)):
            raise HandlerError(f"non-finite gradient at inner iteration {it}")
        gnorm2 = float(g @ g)
        if np.sqrt(gnorm2) <= config.inner_tol:
            return z, it
        t = config.step0
        accepted = False
        for _ in range(40):
            z_try = z - t * g
            v_try = lagrangian(z_try)
            if np.isfinite(v_try) and v_try <= value - config.armijo_c * t * gnorm2:
                z, value = z_try, v_try
                accepted = True
                break
            t *= config.shrink
        if not accepted:
            return z, it + 1  # step collapsed below resolution
    return z, config.inner_max


def alm_solve(z_user: np.ndarray, constraint, objective=None,
              config: AlmConfig | None = None) -> AlmResult:
    """Augmented Lagrangian projection of z_user into {c(z) <= 0}.

    Exits feasible as soon as the inner solution satisfies the constraint
    within feas_tol; otherwise ramps the penalty and re-solves, returning
    the best-effort final iterate.
    """
    config = config or AlmConfig()
    z = np.array(z_user, dtype=np.float64)
    if objective is None:
        objective = LatentTarget(z_user)
    mu = 0.0
    rho = config.rho0
    trace = []
    try:
        for outer in range(config.outer_max):
            z, inner_iters = _inner_minimize(z, objective, constraint, mu, rho, config)
            c = constraint.value(z)
            psi = max(0.0, c)
            trace.append(AlmTraceRow(
                outer=outer, mu=mu, rho=rho, constraint=c,
                objective=objective.value(z), inner_iters=inner_iters))
            if psi <= config.feas_tol:
                break
            mu = mu + rho * psi
            rho = min(rho * config.rho_factor, config.rho_max)
    except HandlerError:
        if not trace:
            raise
        return AlmResult(z=z, feasible=False, trace=trace)
    feasible = constraint.value(z) <= config.feas_tol
    return AlmResult(z=z, feasible=feasible, trace=trace)


def relative_pd_reduction(z_user: np.ndarray, z: np.ndarray, oracle) -> float:
    """(PD_user - PD_out) / PD_user on positive-part depths.

    Collision-free output gives exactly 1; the input must penetrate.
    """
    pd_user = oracle.positive_pd(z_user)
    if pd_user <= 0.0:
        raise HandlerError("relative PD reduction needs a penetrating input")
    pd_out = oracle.positive_pd(z)
    return (pd_user - pd_out) / pd_user
