"""Geodesic shooting of curves in a Gaussian-kernel deformation space.

A deformation is parameterised by initial momenta ``p0`` attached to control
points ``q0`` on the source curve.  The flow follows the Hamiltonian system

    dq_a/dt =  sum_b k(q_a, q_b) p_b
    dp_a/dt = -sum_b grad_{q_a} k(q_a, q_b) (p_a . p_b)

with ``k(a, b) = exp(-|a - b|^2 / sigma^2)``, integrated by classical RK4 on
``t in [0, 1]``.  Matching minimises

    J(p0) = 2 H(q0, p0) + gamma * D(q(1), target)

where ``D`` is the squared currents distance between oriented polylines.
The gradient is obtained by an exact reverse sweep through the RK4 steps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from diffeo_pa import _kernels
from diffeo_pa.errors import DivergenceError, ValidationError
from diffeo_pa.prep import DiurnalCurve, N_MINUTES


@dataclass(frozen=True)
class KernelConfig:
    sigma_v: float = 0.2
    sigma_w: float = 0.1
    gamma_data: float = 10.0
    n_steps: int = 15
    control_stride: int = 10
    max_iters: int = 500
    rel_tol: float = 1e-6
    max_ls_fail: int = 30
    precond_eps: float = 1e-3

    def __post_init__(self):
        for name in ("sigma_v", "sigma_w", "gamma_data", "rel_tol"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.precond_eps < 0:
            raise ValidationError("precond_eps must be non-negative")
        for name in ("n_steps", "control_stride", "max_iters", "max_ls_fail"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if N_MINUTES % self.control_stride:
            raise ValidationError(f"control_stride must divide {N_MINUTES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MomentaField:
    participant_id: str
    period: int
    control_points: np.ndarray
    momenta: np.ndarray
    energy: float

    def __post_init__(self):
        q = np.asarray(self.control_points, dtype=float)
        p = np.asarray(self.momenta, dtype=float)
        if q.ndim != 2 or q.shape[1] != 2 or p.shape != q.shape:
            raise ValidationError(f"control points {q.shape} and momenta {p.shape} must both be (P, 2)")
        if abs(self.energy - float(np.sum(p**2))) > 1e-10:
            raise ValidationError("energy does not equal the sum of squared momenta")
        object.__setattr__(self, "control_points", q)
        object.__setattr__(self, "momenta", p)

    @classmethod
    def from_momenta(cls, participant_id, period, control_points, momenta) -> "MomentaField":
        p = np.asarray(momenta, dtype=float)
        return cls(str(participant_id), int(period), control_points, p, float(np.sum(p**2)))


@dataclass
class Trajectory:
    q: np.ndarray  # (n_steps + 1, P, 2)
    p: np.ndarray
    x: np.ndarray | None = None  # passive points carried by the flow


@dataclass
class DeformationResult:
    momenta_field: MomentaField
    trajectory: np.ndarray
    deformed_curve: np.ndarray
    attachment_residual: float
    objective_trace: list[float]
    converged: bool
    iterations: int
    kernel_energy: float
    message: str = ""
    grad_norm: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


# --- kernels ----------------------------------------------------------------


def gauss_kernel(a, b, sigma: float) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.exp(-np.dot(d, d) / sigma**2))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = a[:, 0, None] - b[None, :, 0]
    dy = a[:, 1, None] - b[None, :, 1]
    return dx * dx + dy * dy


def kernel_matrix(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-_sqdist(a, b) / sigma**2)


def hamiltonian(q, p, sigma_v: float) -> float:
    """``H = 1/2 sum_ab (p_a . p_b) k(q_a, q_b)``."""
    q = np.asarray(q, dtype=float).reshape(-1, 2)
    p = np.asarray(p, dtype=float).reshape(-1, 2)
    if q.shape != p.shape:
        raise ValidationError("q and p must have the same shape")
    K = kernel_matrix(q, q, sigma_v)
    return 0.5 * float(np.sum(K * (p @ p.T)))


def hamiltonian_field(q: np.ndarray, p: np.ndarray, sigma: float):
    """Right-hand side ``(dH/dp, -dH/dq)`` of the geodesic equations."""
    K = kernel_matrix(q, q, sigma)
    dq = K @ p
    C = K * (p @ p.T)
    dp = (2.0 / sigma**2) * (C.sum(axis=1)[:, None] * q - C @ q)
    return dq, dp


def hamiltonian_field_vjp(q, p, u, w, sigma):
    """Transpose-Jacobian of :func:`hamiltonian_field` applied to ``(u, w)``.

    ``u`` is the cotangent of ``dq`` and ``w`` the cotangent of ``dp``.
    Returns the cotangents ``(gq, gp)`` of ``q`` and ``p``.
    """
    s = 2.0 / sigma**2
    K = kernel_matrix(q, q, sigma)
    Dx = q[:, 0, None] - q[None, :, 0]
    Dy = q[:, 1, None] - q[None, :, 1]
    PP = p @ p.T
    # e_ab = w_a . (q_a - q_b)
    E = w[:, 0, None] * Dx + w[:, 1, None] * Dy
    # (w_a - w_b) . (q_a - q_b)
    Wsym = E - (w[None, :, 0] * Dx + w[None, :, 1] * Dy)
    gp = K @ u + s * ((K * Wsym) @ p)

    M = u @ p.T + s * PP * E
    G = K * (M + M.T)
    gq = -s * (G.sum(axis=1)[:, None] * q - G @ q)
    KPP = K * PP
    gq += s * (KPP.sum(axis=1)[:, None] * w - KPP @ w)
    return gq, gp


# --- shooting ---------------------------------------------------------------


def _check_finite(step, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"non-finite state at integration step {step}", step=step)


def _integrate(q, p, sigma, n, keep_stages=False):
    h = 1.0 / n
    Q = np.empty((n + 1,) + q.shape)
    Pm = np.empty_like(Q)
    Q[0], Pm[0] = q, p
    stages = np.empty((n, 6) + q.shape) if keep_stages else None
    for i in range(n):
        k1q, k1p = _kernels.field(q, p, sigma)
        q2, p2 = q + 0.5 * h * k1q, p + 0.5 * h * k1p
        k2q, k2p = _kernels.field(q2, p2, sigma)
        q3, p3 = q + 0.5 * h * k2q, p + 0.5 * h * k2p
        k3q, k3p = _kernels.field(q3, p3, sigma)
        q4, p4 = q + h * k3q, p + h * k3p
        k4q, k4p = _kernels.field(q4, p4, sigma)
        if keep_stages:
            stages[i] = (q2, p2, q3, p3, q4, p4)
        q = q + h / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
        p = p + h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        _check_finite(i + 1, q, p)
        Q[i + 1], Pm[i + 1] = q, p
    return Q, Pm, stages


def shoot(q0, p0, config: KernelConfig | None = None, *, sigma_v=None, n_steps=None, passive=None) -> Trajectory:
    """Integrate the geodesic equations with RK4 over ``t in [0, 1]``.

    Returns ``n_steps + 1`` frames.  ``passive`` points, if given, are
    transported by the same velocity field without influencing it (used to
    deform dense polylines).
    """
    config = config or KernelConfig()
    sigma = config.sigma_v if sigma_v is None else sigma_v
    n = config.n_steps if n_steps is None else int(n_steps)
    q = np.array(q0, dtype=float).reshape(-1, 2)
    p = np.array(p0, dtype=float).reshape(-1, 2)
    if q.shape != p.shape:
        raise ValidationError("q0 and p0 must have the same shape")
    if passive is None:
        Q, Pm, _ = _integrate(q, p, sigma, n)
        return Trajectory(Q, Pm)
    Q, Pm, st = _integrate(q, p, sigma, n, keep_stages=True)
    h = 1.0 / n
    x = np.array(passive, dtype=float).reshape(-1, 2)
    X = np.empty((n + 1,) + x.shape)
    X[0] = x
    v = _kernels.passive_velocity
    for i in range(n):
        q2, p2, q3, p3, q4, p4 = st[i]
        k1 = v(x, Q[i], Pm[i], sigma)
        k2 = v(x + 0.5 * h * k1, q2, p2, sigma)
        k3 = v(x + 0.5 * h * k2, q3, p3, sigma)
        k4 = v(x + h * k3, q4, p4, sigma)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(i + 1, x)
        X[i + 1] = x
    return Trajectory(Q, Pm, X)


def _shoot_adjoint(Q, Pm, stages, gq_end, sigma, n):
    """Reverse sweep: cotangent of ``q(1)`` -> cotangents of ``(q0, p0)``."""
    h = 1.0 / n
    vjp = _kernels.field_vjp
    lq = np.array(gq_end, dtype=float)
    lp = np.zeros_like(lq)
    for i in range(n - 1, -1, -1):
        q2, p2, q3, p3, q4, p4 = stages[i]
        # cotangents of the stage slopes k1..k4 are (h/6, h/3, h/3, h/6) * l
        aq, ap = (h / 6.0) * lq, (h / 6.0) * lp
        bq, bp = (h / 3.0) * lq, (h / 3.0) * lp
        gq, gp = lq.copy(), lp.copy()

        zq, zp = vjp(q4, p4, aq, ap, sigma)
        gq += zq
        gp += zp
        zq, zp = vjp(q3, p3, bq + h * zq, bp + h * zp, sigma)
        gq += zq
        gp += zp
        zq, zp = vjp(q2, p2, bq + 0.5 * h * zq, bp + 0.5 * h * zp, sigma)
        gq += zq
        gp += zp
        zq, zp = vjp(Q[i], Pm[i], aq + 0.5 * h * zq, ap + 0.5 * h * zp, sigma)
        lq = gq + zq
        lp = gp + zp
    return lq, lp


# --- currents attachment ----------------------------------------------------


def _segments(poly: np.ndarray):
    poly = np.asarray(poly, dtype=float).reshape(-1, 2)
    if poly.shape[0] < 2:
        raise ValidationError("polyline needs at least two vertices")
    t = np.diff(poly, axis=0)
    c = 0.5 * (poly[1:] + poly[:-1])
    keep = np.einsum("ij,ij->i", t, t) > 0
    if not keep.any():
        raise ValidationError("polyline has only zero-length segments")
    return c, t, keep


def _currents_dot(ca, ta, cb, tb, sigma) -> float:
    return float(np.sum(kernel_matrix(ca, cb, sigma) * (ta @ tb.T)))


def currents_distance(curve_a, curve_b, sigma_w: float) -> float:
    """Squared currents distance between two oriented polylines (always >= 0)."""
    ca, ta, ka = _segments(curve_a)
    cb, tb, kb = _segments(curve_b)
    ca, ta, cb, tb = ca[ka], ta[ka], cb[kb], tb[kb]
    d = _currents_dot(ca, ta, ca, ta, sigma_w) - 2 * _currents_dot(ca, ta, cb, tb, sigma_w) + _currents_dot(
        cb, tb, cb, tb, sigma_w
    )
    return max(d, 0.0)


class _Attachment:
    """Currents distance to a fixed target with gradient in the moving vertices."""

    def __init__(self, target: np.ndarray, sigma: float):
        cb, tb, kb = _segments(target)
        self.cb, self.tb = np.ascontiguousarray(cb[kb]), np.ascontiguousarray(tb[kb])
        self.sigma = sigma
        self.bb = _currents_dot(self.cb, self.tb, self.cb, self.tb, sigma)

    def value_and_grad(self, x: np.ndarray):
        val, gx = _kernels.currents_value_grad(np.ascontiguousarray(x), self.cb, self.tb, self.bb, self.sigma)
        return max(val, 0.0), gx

    def value_and_grad_dense(self, x: np.ndarray):
        """Dense-matrix form of :meth:`value_and_grad` (reference implementation)."""
        s = self.sigma
        c = 0.5 * (x[1:] + x[:-1])
        t = np.diff(x, axis=0)
        Kaa = kernel_matrix(c, c, s)
        Kab = kernel_matrix(c, self.cb, s)
        A = Kaa * (t @ t.T)
        B = Kab * (t @ self.tb.T)
        val = float(np.sum(A) - 2 * np.sum(B) + self.bb)
        gt = 2.0 * (Kaa @ t) - 2.0 * (Kab @ self.tb)
        gc = (-4.0 / s**2) * (A.sum(axis=1)[:, None] * c - A @ c)
        gc += (4.0 / s**2) * (B.sum(axis=1)[:, None] * c - B @ self.cb)
        gx = np.zeros_like(x)
        gx[:-1] += 0.5 * gc - gt
        gx[1:] += 0.5 * gc + gt
        return max(val, 0.0), gx


# --- matching ---------------------------------------------------------------


def control_indices(n_vertices: int, stride: int) -> np.ndarray:
    return np.arange(0, n_vertices, stride)


def _as_polyline(curve, stride: int) -> np.ndarray:
    if isinstance(curve, DiurnalCurve):
        return curve.points[control_indices(len(curve.grid), stride)]
    return np.asarray(curve, dtype=float).reshape(-1, 2)


class MatchingProblem:
    """Objective ``J(p0)`` and its adjoint gradient for fixed ``q0`` and target."""

    def __init__(self, q0: np.ndarray, target: np.ndarray, config: KernelConfig):
        self.q0 = np.ascontiguousarray(np.asarray(q0, dtype=float).reshape(-1, 2))
        self.config = config
        self.attach = _Attachment(target, config.sigma_w)
        self.K0 = kernel_matrix(self.q0, self.q0, config.sigma_v)

    def energy(self, p0: np.ndarray) -> float:
        """``2 H(q0, p0)``, the geodesic path energy."""
        return float(np.sum(self.K0 * (p0 @ p0.T)))

    def objective(self, p0: np.ndarray) -> float:
        cfg = self.config
        Q, _, _ = _integrate(self.q0, np.asarray(p0, dtype=float), cfg.sigma_v, cfg.n_steps)
        d, _ = self.attach.value_and_grad(Q[-1])
        return self.energy(p0) + cfg.gamma_data * d

    def value_and_grad(self, p0: np.ndarray):
        cfg = self.config
        p0 = np.asarray(p0, dtype=float)
        Q, Pm, stages = _integrate(self.q0, p0, cfg.sigma_v, cfg.n_steps, keep_stages=True)
        d, gx = self.attach.value_and_grad(Q[-1])
        _, gp = _shoot_adjoint(Q, Pm, stages, cfg.gamma_data * gx, cfg.sigma_v, cfg.n_steps)
        grad = gp + 2.0 * (self.K0 @ p0)
        return self.energy(p0) + cfg.gamma_data * d, grad, Q, d


def match_curves(
    source,
    target,
    config: KernelConfig | None = None,
    *,
    participant_id: str = "",
    period: int = 0,
    p_init: np.ndarray | None = None,
) -> DeformationResult:
    """Estimate initial momenta deforming ``source`` onto ``target``.

    Curves given as :class:`DiurnalCurve` are subsampled every
    ``control_stride`` vertices; raw ``(P, 2)`` arrays are used as-is.

    Gradient descent with Armijo backtracking from zero momenta (or
    ``p_init``).  The descent direction is the gradient expressed in the
    kernel metric, ``-(K0 + eps I)^{-1} grad`` with ``eps = precond_eps``; the
    first trial step of each iteration is the Barzilai-Borwein step measured
    in the same metric.  ``precond_eps = 0`` disables the metric and gives
    plain Euclidean descent.
    """
    config = config or KernelConfig()
    q0 = _as_polyline(source, config.control_stride)
    tgt = _as_polyline(target, config.control_stride)
    if isinstance(source, DiurnalCurve) and isinstance(target, DiurnalCurve):
        if not np.allclose(source.grid, target.grid, rtol=0, atol=1e-12):
            raise ValidationError("source and target are not on the same grid")
    prob = MatchingProblem(q0, tgt, config)
    P = q0.shape[0]
    if config.precond_eps > 0:
        metric = prob.K0 + config.precond_eps * np.eye(P)
        chol = cho_factor(metric)
        precondition = lambda g: cho_solve(chol, g)  # noqa: E731
    else:
        metric = np.eye(P)
        precondition = lambda g: g  # noqa: E731
    p = np.zeros_like(q0) if p_init is None else np.array(p_init, dtype=float).reshape(q0.shape)

    J, g, Q, d = prob.value_and_grad(p)
    trace = [J]
    converged, message = False, "max_iters reached"
    step = None
    c_armijo = 1e-4
    it = 0
    for it in range(1, config.max_iters + 1):
        direction = -precondition(g)
        slope = float(np.sum(g * direction))
        if -slope <= (1e-10 * max(1.0, abs(J))) ** 2:
            converged, message = True, "gradient vanished"
            it -= 1
            break
        alpha = step if step is not None else 0.1 / np.sqrt(-slope)
        fails = 0
        while True:
            p_new = p + alpha * direction
            try:
                J_new = prob.objective(p_new)
            except DivergenceError:
                J_new = np.inf
            if J_new <= J + c_armijo * alpha * slope:
                break
            fails += 1
            if fails >= config.max_ls_fail:
                break
            alpha *= 0.5
        if fails >= config.max_ls_fail:
            message = f"line search failed {fails} consecutive times"
            it -= 1
            break
        J_acc, g_new, Q, d = prob.value_and_grad(p_new)
        s_vec = p_new - p
        sy = float(np.sum(s_vec * (g_new - g)))
        step = float(np.sum(s_vec * (metric @ s_vec))) / sy if sy > 0 else 2.0 * alpha
        rel = (J - J_acc) / max(abs(J), 1e-300)
        p, g, J = p_new, g_new, J_acc
        trace.append(J)
        if rel < config.rel_tol:
            converged, message = True, "relative decrease below tolerance"
            break

    field_ = MomentaField.from_momenta(participant_id, period, q0, p)
    return DeformationResult(
        momenta_field=field_,
        trajectory=Q,
        deformed_curve=Q[-1].copy(),
        attachment_residual=float(d),
        objective_trace=trace,
        converged=converged,
        iterations=it,
        kernel_energy=prob.energy(p),
        message=message,
        grad_norm=float(np.sqrt(np.sum(g * g))),
    )


def deformation_energy(momenta_field: MomentaField | np.ndarray) -> float:
    """Plain sum of squared momentum components over all control points."""
    p = momenta_field.momenta if isinstance(momenta_field, MomentaField) else np.asarray(momenta_field, dtype=float)
    return float(np.sum(p**2))


def apply_momenta(source, momenta_field: MomentaField, config: KernelConfig | None = None, *, dense: bool = False):
    """Shoot ``momenta_field`` from its control points; return the deformed polyline.

    With ``dense=True`` and a :class:`DiurnalCurve` source, every source
    vertex is carried by the flow instead of just the control points.
    """
    config = config or KernelConfig()
    q0 = momenta_field.control_points
    if dense:
        pts = source.points if isinstance(source, DiurnalCurve) else np.asarray(source, dtype=float)
        return shoot(q0, momenta_field.momenta, config, passive=pts).x[-1]
    return shoot(q0, momenta_field.momenta, config).q[-1]
