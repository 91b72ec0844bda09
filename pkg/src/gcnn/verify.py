"""Finite-difference gradient checks for the convolution layer and whole networks.

Percent error is ``100 * |g_analytic - g_numeric| / max(|g_numeric|, 1e-12)``
with Euclidean norms over the whole tensor; the largest per-coordinate
absolute error is reported alongside it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gcnn import conv
from gcnn.errors import InvalidArgument, NumericalFailure
from gcnn.graph import Graph, build_grid_graph, laplacian
from gcnn.spectral import SpectralBasis, eigendecompose

TARGETS = ("data", "filters", "tracked")
VARIANTS = ("proposed", "naive")
EPS = 1e-12


def percent_error(analytic, numeric, eps: float = EPS) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return 100.0 * float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), eps))


def relative_error(analytic, numeric, eps: float = EPS) -> float:
    return percent_error(analytic, numeric, eps) / 100.0


def finite_difference_grad(loss_fn, x, step: float = 1e-6, forward: bool = False, batch_loss=None, chunk: int = 512):
    """Numerical gradient of a scalar ``loss_fn`` at ``x``, one coordinate at a time.

    Central differences by default; ``forward=True`` uses one-sided ones.
    ``batch_loss``, if given, maps a stack of perturbed copies ``(B, *x.shape)``
    to B losses and is used instead of calling ``loss_fn`` per coordinate.
    """
    if step <= 0:
        raise InvalidArgument(f"step must be positive, got {step}")
    x = np.array(x, dtype=np.float64)
    n = x.size
    flat = x.ravel()

    if batch_loss is None:
        def evaluate(points):
            return np.array([loss_fn(p.reshape(x.shape)) for p in points])
    else:
        def evaluate(points):
            return np.asarray(batch_loss(points.reshape((-1,) + x.shape)), dtype=np.float64)

    base = None
    if forward:
        base = float(loss_fn(x))
        if not np.isfinite(base):
            raise NumericalFailure("loss is not finite at the expansion point")
    grad = np.empty(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        plus = np.repeat(flat[None, :], idx.size, axis=0)
        plus[np.arange(idx.size), idx] += step
        lp = evaluate(plus)
        if forward:
            lm, denom = base, step
        else:
            minus = np.repeat(flat[None, :], idx.size, axis=0)
            minus[np.arange(idx.size), idx] -= step
            lm, denom = evaluate(minus), 2.0 * step
        if not np.all(np.isfinite(lp)) or not np.all(np.isfinite(lm)):
            raise NumericalFailure("loss became non-finite under perturbation")
        grad[idx] = (lp - lm) / denom
    return grad.reshape(x.shape)


def directional_check(loss_fn, grad, x, step: float = 1e-4, directions: int = 10, rng=None) -> float:
    """Percent error of ``grad . d`` against central differences along random unit ``d``."""
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    analytic, numeric = [], []
    for _ in range(directions):
        d = rng.standard_normal(x.shape)
        d /= np.linalg.norm(d)
        numeric.append((loss_fn(x + step * d) - loss_fn(x - step * d)) / (2 * step))
        analytic.append(float(np.sum(grad * d)))
    return percent_error(analytic, numeric)


# ---------------------------------------------------------------- protocol


@dataclass
class GradCheckReport:
    target: str
    variant: str
    tracked_weights: int
    errors: list[float] = field(default_factory=list)
    max_coord_errors: list[float] = field(default_factory=list)
    failures: int = 0

    @property
    def runs(self) -> int:
        return len(self.errors)

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors)) if self.errors else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.errors)) if self.errors else float("nan")

    def row(self) -> dict:
        return {
            "target": self.target,
            "variant": self.variant,
            "tracked_weights": self.tracked_weights,
            "runs": self.runs,
            "mean_percent_error": self.mean,
            "std_percent_error": self.std,
            "max_coord_error": max(self.max_coord_errors) if self.max_coord_errors else float("nan"),
            "failures": self.failures,
        }


@dataclass
class GradCheckSetup:
    """Random single-layer instances on a fixed graph."""

    graph: Graph = field(default_factory=lambda: build_grid_graph(28, 28))
    samples: int = 1
    in_ch: int = 1
    out_ch: int = 1
    step: float = 1e-4
    forward_diff: bool = False
    knot_domain: str = "rank"
    basis: SpectralBasis | None = None

    def __post_init__(self):
        if self.basis is None:
            self.basis = eigendecompose(laplacian(self.graph))

    @property
    def n(self) -> int:
        return self.graph.n

    def instance(self, m: int, rng):
        f = rng.standard_normal((self.samples, self.in_ch, self.n))
        k_hat = rng.standard_normal((self.in_ch, self.out_ch, m))
        t = rng.standard_normal((self.samples, self.out_ch, self.n))
        return f, k_hat, t


def _analytic(variant, target, basis, interp, f, k, dy):
    if target == "data":
        fn = conv.conv_backward_data if variant == "proposed" else conv.naive_backward_data
        return fn(basis, dy, k)
    fn = conv.conv_backward_filters if variant == "proposed" else conv.naive_backward_filters
    dk = fn(basis, dy, f)
    return dk if target == "filters" else conv.project_filter_grads(interp, dk)


def _numeric(setup: GradCheckSetup, target, interp, f, k_hat, t):
    basis, U = setup.basis, setup.basis.U
    k = conv.interpolate_filters(interp, k_hat)

    def loss_of(y):
        return 0.5 * np.sum((y - t) ** 2, axis=tuple(range(y.ndim - 3, y.ndim)))

    if target == "data":
        x0 = f
        loss = lambda x: float(loss_of(conv.conv_forward(basis, x, k)))
        batch = lambda xs: loss_of(np.einsum("bsin,ion->bson", xs @ U, k) @ U.T)
    elif target == "filters":
        x0 = k
        fc = f @ U
        loss = lambda x: float(loss_of(conv.conv_forward(basis, f, x)))
        batch = lambda xs: loss_of(np.einsum("sin,bion->bson", fc, xs) @ U.T)
    else:
        x0 = k_hat
        fc = f @ U
        loss = lambda x: float(loss_of(conv.conv_forward(basis, f, conv.interpolate_filters(interp, x))))
        batch = lambda xs: loss_of(np.einsum("sin,bion->bson", fc, xs @ interp.phi.T) @ U.T)
    return finite_difference_grad(loss, x0, setup.step, forward=setup.forward_diff, batch_loss=batch)


def run_protocol(setup: GradCheckSetup, target: str, m_values, runs: int = 100, seed=0, variant: str = "both"):
    """Analytic-vs-numeric gradient errors over fresh random instances.

    For each tracked-weight count and run a new instance is drawn from a
    generator seeded by ``(seed, m, run)``, so both variants see identical
    inputs and a single numerical gradient.  Returns one report per
    ``(m, variant)``.
    """
    if target not in TARGETS:
        raise InvalidArgument(f"unknown target {target!r}")
    if runs < 1:
        raise InvalidArgument("runs must be at least 1")
    variants = VARIANTS if variant == "both" else (variant,)
    for v in variants:
        if v not in VARIANTS:
            raise InvalidArgument(f"unknown variant {v!r}")

    reports = []
    for m in m_values:
        interp = conv.build_interpolator(int(m), setup.n, setup.knot_domain, setup.basis.lam)
        group = {v: GradCheckReport(target, v, int(m)) for v in variants}
        for run in range(runs):
            rng = np.random.default_rng([int(seed), int(m), run])
            f, k_hat, t = setup.instance(int(m), rng)
            try:
                numeric = _numeric(setup, target, interp, f, k_hat, t)
                k = conv.interpolate_filters(interp, k_hat)
                dy = conv.conv_forward(setup.basis, f, k) - t
            except NumericalFailure:
                for rep in group.values():
                    rep.failures += 1
                continue
            for v, rep in group.items():
                analytic = _analytic(v, target, setup.basis, interp, f, k, dy)
                rep.errors.append(percent_error(analytic, numeric))
                rep.max_coord_errors.append(float(np.abs(analytic - numeric).max()))
        reports.extend(group.values())
    return reports


def compare_variants(setup: GradCheckSetup, m_values=(60,), runs: int = 100, seed=0, targets=TARGETS):
    """Proposed and naive gradients side by side for every target."""
    reports = []
    for target in targets:
        reports.extend(run_protocol(setup, target, m_values, runs, seed, "both"))
    return reports


def write_reports_csv(path, reports) -> None:
    rows = [r.row() for r in reports]
    fields = list(GradCheckReport("data", "proposed", 1).row())
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def format_reports(reports) -> str:
    lines = [f"{'target':8s} {'variant':9s} {'M':>5s} {'runs':>5s} {'mean %':>12s} {'std %':>12s}"]
    for r in reports:
        lines.append(f"{r.target:8s} {r.variant:9s} {r.tracked_weights:5d} {r.runs:5d} {r.mean:12.4g} {r.std:12.4g}")
    return "\n".join(lines)


# ---------------------------------------------------------------- networks


def network_gradient_errors(net, batch, labels, step: float = 1e-6) -> dict:
    """Relative error of every parameter gradient and the input gradient."""
    batch = np.array(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[:, None, :]
    _, _, acts = net.forward(batch, labels)
    grads = net.backward(acts, labels, input_grad=True)
    out = {}
    for name in net.params:
        original = net.params[name]

        def loss(p, name=name):
            net.params[name] = p
            return net.forward(batch, labels)[0]

        try:
            numeric = finite_difference_grad(loss, original, step)
        finally:
            net.params[name] = original
        out[name] = relative_error(grads[name], numeric)
    numeric = finite_difference_grad(lambda x: net.forward(x, labels)[0], batch, step)
    out["input"] = relative_error(grads["input"], numeric)
    return out
