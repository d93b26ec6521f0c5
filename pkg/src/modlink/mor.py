"""Modular model-order reduction and relative-error verification.

Subsystems are reduced individually (balanced truncation, Craig-Bampton or
Hintz-Herting component mode synthesis) and re-assembled through the
*unchanged* interconnection matrix, so one reduction serves every operating
point.  ``relative_error`` checks the assembled reduced response against the
full-order one entry by entry, and ``minimal_order_search`` hunts for the
smallest per-subsystem orders that keep that error below a threshold at all
requested operating points.
"""

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import (
    DescriptorStateSpace,
    FrfSweep,
    SecondOrderSystem,
    frf_eval,
    to_descriptor,
)
from .errors import (
    NumericalError,
    PortMismatchError,
    ValidationError,
)
from .interconnect import block_collect, block_frf, lft_assemble, posdep_k11

logger = logging.getLogger(__name__)

BT = "bt"
CB = "cb"
HH = "hh"

# Eigenvalues within this fraction of the spectral radius count as rigid.
# Defective rigid pairs (double integrators) split numerically like
# sqrt(eps) * radius, so the default cannot go much below 1e-8; systems
# mixing rigid modes with poles slower than 1e-8 * radius need an
# explicit rigid_tol.
RIGID_TOL = 1e-8


@dataclass(frozen=True)
class ReductionBasis:
    """Projection bases V, W (n x r) plus per-method metadata.

    For balanced truncation V/W live in the standard-form state space and
    metadata carries the full list of Hankel singular values.  For the CMS
    methods V = W acts on generalized coordinates, the boundary DOFs are
    represented exactly (identity pattern in the constraint-mode columns),
    and metadata records the kept-mode cutoff frequency.
    """

    method: str
    V: np.ndarray
    W: np.ndarray
    boundary: tuple
    r: int
    metadata: dict

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.V, dtype=np.float64))
        W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "boundary", tuple(int(b) for b in self.boundary))
        if V.shape != W.shape:
            raise ValidationError("V and W must have equal shapes")
        if V.size and np.linalg.matrix_rank(V) < V.shape[1]:
            raise ValidationError("projection basis V is column-rank deficient")
        if self.method == BT:
            hsv = np.asarray(self.metadata.get("hsv", ()))
            if hsv.size:
                slack = 1e-12 * max(hsv[0], 1.0)
                if np.any(hsv < 0) or np.any(np.diff(hsv) > slack):
                    raise ValidationError(
                        "Hankel singular values must be >= 0 and non-increasing"
                    )
        elif self.method in (CB, HH):
            nb = len(self.boundary)
            if V[self.boundary, :nb].shape == (nb, nb):
                if not np.allclose(V[self.boundary, :nb], np.eye(nb)):
                    raise ValidationError(
                        "constraint-mode columns must hit boundary DOFs with identity"
                    )


# ---------------------------------------------------------------------------
# balanced truncation
# ---------------------------------------------------------------------------

def _psd_factor(P, tol=1e-13):
    """Low-rank factor L with L L^T ~= P for a symmetric PSD matrix."""
    P = 0.5 * (P + P.T)
    w, v = scipy.linalg.eigh(P)
    w = np.clip(w, 0.0, None)
    keep = w > tol * max(w[-1], 1e-300)
    return v[:, keep] * np.sqrt(w[keep])


def reduce_bt(ss, r, rigid_tol=RIGID_TOL):
    """Balanced truncation to r states, rigid-body modes deflated first.

    Marginal (zero) eigenvalues are split off with an ordered Schur
    decomposition and a Sylvester decoupling, the asymptotically stable
    remainder is balanced with gramian square roots and truncated, and the
    rigid block is reattached untouched.  Undamped oscillatory or unstable
    modes outside the rigid cluster are an error.  The returned metadata
    lists all Hankel singular values of the stable part, so the usual
    additive bound 2 * sum(sigma_k, k > r) can be checked against measured
    responses.
    """
    if r < 1:
        raise ValidationError(f"reduced order must be >= 1, got {r}")
    n = ss.n
    if r >= n:
        basis = ReductionBasis(
            method=BT, V=np.eye(n), W=np.eye(n), boundary=(),
            r=n, metadata={"hsv": np.zeros(0), "n_rigid": 0, "identity": True},
        )
        return ss, basis

    E = ss.E_dense
    A = ss.A_dense
    B, C = ss.B, ss.C
    if not np.allclose(E, np.eye(n)):
        try:
            lu = scipy.linalg.lu_factor(E)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise NumericalError(f"E is singular; cannot reach standard form: {exc}") from exc
        A = scipy.linalg.lu_solve(lu, A)
        B = scipy.linalg.lu_solve(lu, B)

    eigs = np.linalg.eigvals(A)
    scale = max(np.abs(eigs).max(), 1e-300)
    tol_abs = rigid_tol * scale
    try:
        T, Z, sdim = scipy.linalg.schur(
            A, output="real", sort=lambda re, im: re >= -tol_abs
        )
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Schur decomposition failed: {exc}") from exc
    n1 = int(sdim)

    cluster = eigs[np.real(eigs) >= -tol_abs]
    if np.any(np.abs(cluster) > 10.0 * tol_abs):
        raise NumericalError(
            "system is not asymptotically stable after rigid-mode deflation "
            f"({np.sum(np.abs(cluster) > 10.0 * tol_abs)} undamped/unstable modes)"
        )
    if r < n1:
        raise ValidationError(
            f"requested order {r} is below the rigid-mode count {n1}"
        )

    Bz = Z.T @ B
    Cz = C @ Z
    if n1 > 0 and n1 < n:
        T11, T12, T22 = T[:n1, :n1], T[:n1, n1:], T[n1:, n1:]
        try:
            Y = scipy.linalg.solve_sylvester(T11, -T22, -T12)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise NumericalError(f"rigid-mode decoupling failed: {exc}") from exc
        # x = Z [[I, Y], [0, I]] w  block-diagonalizes the dynamics
        B1 = Bz[:n1] - Y @ Bz[n1:]
        B2 = Bz[n1:]
        C1 = Cz[:, :n1]
        C2 = Cz[:, :n1] @ Y + Cz[:, n1:]
        A22 = T22
    elif n1 == n:
        raise NumericalError(
            "no asymptotically stable part remains after deflation; "
            "balanced truncation is not applicable"
        )
    else:
        T11 = np.zeros((0, 0))
        Y = np.zeros((0, n))
        B1, B2 = Bz[:0], Bz
        C1, C2 = Cz[:, :0], Cz
        A22 = T

    try:
        P = scipy.linalg.solve_continuous_lyapunov(A22, -B2 @ B2.T)
        Q = scipy.linalg.solve_continuous_lyapunov(A22.T, -C2.T @ C2)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalError(f"Lyapunov solve failed: {exc}") from exc
    Lp = _psd_factor(P)
    Lq = _psd_factor(Q)
    U, s, Vt = scipy.linalg.svd(Lq.T @ Lp, full_matrices=False)

    n2 = A22.shape[0]
    hsv = np.zeros(n2)
    hsv[: s.size] = s
    r2 = r - n1
    rank = int(np.sum(s > max(s[0] if s.size else 0.0, 1e-300) * 1e-14))
    r2_eff = min(r2, rank)
    if r2_eff < r2:
        logger.info(
            "bt: stable part has numerical rank %d < requested %d states", rank, r2
        )
    sig = s[:r2_eff]
    Tsr = Lp @ Vt[:r2_eff].T / np.sqrt(sig)
    Wsr = Lq @ U[:, :r2_eff] / np.sqrt(sig)

    A_red = np.zeros((n1 + r2_eff, n1 + r2_eff))
    A_red[:n1, :n1] = T11
    A_red[n1:, n1:] = Wsr.T @ A22 @ Tsr
    B_red = np.vstack([B1, Wsr.T @ B2])
    C_red = np.hstack([C1, C2 @ Tsr])

    reduced = DescriptorStateSpace(
        E=np.eye(n1 + r2_eff), A=A_red, B=B_red, C=C_red, D_ss=ss.D_ss,
        name=ss.name,
    )
    # x = Z [[I, Y], [0, I]] w, so the direct map is X = Z R and the adjoint
    # rows come from X^-1 = R^-1 Z^T; W^T V = I by construction.
    V = np.zeros((n, n1 + r2_eff))
    W = np.zeros((n, n1 + r2_eff))
    if n1 > 0:
        V[:, :n1] = Z[:, :n1]
        V[:, n1:] = (Z[:, :n1] @ Y + Z[:, n1:]) @ Tsr
        W[:, :n1] = Z[:, :n1] - Z[:, n1:] @ Y.T
        W[:, n1:] = Z[:, n1:] @ Wsr
    else:
        V[:, :] = Z @ Tsr
        W[:, :] = Z @ Wsr
    basis = ReductionBasis(
        method=BT, V=V, W=W, boundary=(), r=n1 + r2_eff,
        metadata={
            "hsv": hsv,
            "n_rigid": n1,
            "bound_tail": 2.0 * float(np.sum(hsv[r2_eff:])),
        },
    )
    return reduced, basis

# ---------------------------------------------------------------------------
# component mode synthesis
# ---------------------------------------------------------------------------

def _split_boundary(sys, boundary):
    boundary = tuple(sorted({int(b) for b in boundary}))
    if not boundary:
        raise ValidationError("boundary set must not be empty")
    n = sys.n_dof
    for b in boundary:
        if not 0 <= b < n:
            raise ValidationError(f"boundary dof {b} outside [0, {n})")
    port_dofs = {d for d, _ in sys.input_map} | {d for d, _, _ in sys.output_map}
    missing = port_dofs - set(boundary)
    if missing:
        raise PortMismatchError(
            f"ports on dofs {sorted(missing)} are not in the boundary set; "
            "CMS reduction must retain every port"
        )
    interior = tuple(i for i in range(n) if i not in set(boundary))
    return boundary, interior


def _constraint_modes(K, boundary, interior):
    """Static condensation columns -K_ii^-1 K_ib (interior rows only)."""
    if not interior:
        return np.zeros((0, len(boundary)))
    Kd = K.toarray()
    K_ii = Kd[np.ix_(interior, interior)]
    K_ib = Kd[np.ix_(interior, boundary)]
    try:
        cho = scipy.linalg.cho_factor(K_ii)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(
            "interior stiffness block is singular (unconstrained interior "
            "rigid motion); augment the boundary set"
        ) from exc
    return -scipy.linalg.cho_solve(cho, K_ib)


def _project_second_order(sys, V, boundary, name):
    Vs = np.asarray(V)
    M = 0.5 * ((Vs.T @ sys.M.toarray() @ Vs) + (Vs.T @ sys.M.toarray() @ Vs).T)
    D = 0.5 * ((Vs.T @ sys.D.toarray() @ Vs) + (Vs.T @ sys.D.toarray() @ Vs).T)
    K = 0.5 * ((Vs.T @ sys.K.toarray() @ Vs) + (Vs.T @ sys.K.toarray() @ Vs).T)
    b_pos = {dof: i for i, dof in enumerate(boundary)}
    input_map = tuple((b_pos[d], s) for d, s in sys.input_map)
    output_map = tuple((b_pos[d], s, kind) for d, s, kind in sys.output_map)
    return SecondOrderSystem(
        M=M, D=D, K=K,
        input_map=input_map, output_map=output_map,
        input_labels=sys.input_labels, output_labels=sys.output_labels,
        name=name,
    )


def reduce_cb(sys, boundary, n_modes):
    """Craig-Bampton reduction: constraint modes plus fixed-interface modes.

    Boundary DOFs stay physical coordinates (the first block of the reduced
    generalized coordinates), so port maps transfer as exact selections and
    the static response to boundary-only loads is reproduced exactly for any
    number of kept modes.  Reduced second-order order is
    len(boundary) + n_modes.
    """
    boundary, interior = _split_boundary(sys, boundary)
    nb, ni = len(boundary), len(interior)
    if not 0 <= n_modes <= ni:
        raise ValidationError(f"n_modes must lie in [0, {ni}], got {n_modes}")

    psi = _constraint_modes(sys.K, boundary, interior)
    if ni and n_modes:
        M_ii = sys.M.toarray()[np.ix_(interior, interior)]
        K_ii = sys.K.toarray()[np.ix_(interior, interior)]
        try:
            lam, phi = scipy.linalg.eigh(K_ii, M_ii)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"fixed-interface eigen-solve failed: {exc}") from exc
        phi = phi[:, :n_modes]
        omegas = np.sqrt(np.clip(lam[:n_modes], 0.0, None))
    else:
        phi = np.zeros((ni, 0))
        omegas = np.zeros(0)

    n = sys.n_dof
    V = np.zeros((n, nb + phi.shape[1]))
    V[boundary, :nb] = np.eye(nb)
    if ni:
        V[interior, :nb] = psi
        V[interior, nb:] = phi

    reduced = _project_second_order(sys, V, boundary, sys.name)
    basis = ReductionBasis(
        method=CB, V=V, W=V, boundary=boundary, r=2 * V.shape[1],
        metadata={
            "n_modes": int(phi.shape[1]),
            "fixed_interface_omegas": omegas,
            "cutoff_omega": float(omegas[-1]) if omegas.size else 0.0,
        },
    )
    return reduced, basis


def reduce_hh(sys, boundary, n_modes, rigid_tol=1e-10, rank_tol=1e-10):
    """Free-interface CMS: rigid + constraint + free elastic modes.

    The candidate set (rigid-body modes and the lowest free-interface
    elastic modes) has its boundary content removed through the constraint
    modes, is orthonormalized by SVD, and rank-reduced; boundary DOFs remain
    physical exactly as in Craig-Bampton, so statics stay exact.  Rank lost
    in the orthogonalization is reported through the achieved order.
    """
    boundary, interior = _split_boundary(sys, boundary)
    nb, ni = len(boundary), len(interior)
    if n_modes < 0:
        raise ValidationError("n_modes must be >= 0")

    psi = _constraint_modes(sys.K, boundary, interior)
    try:
        lam, phi = scipy.linalg.eigh(sys.K.toarray(), sys.M.toarray())
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"free-interface eigen-solve failed: {exc}") from exc
    lam = np.clip(lam, 0.0, None)
    lam_max = lam[-1] if lam.size else 0.0
    rigid = lam <= rigid_tol * max(lam_max, 1e-300)
    n_rigid = int(np.sum(rigid))
    n_elastic = sys.n_dof - n_rigid
    if n_modes > n_elastic:
        raise ValidationError(
            f"n_modes={n_modes} exceeds the {n_elastic} elastic modes available"
        )
    Z = np.hstack([phi[:, rigid], phi[:, ~rigid][:, :n_modes]])

    # remove boundary content via constraint-mode interpolation, then
    # orthonormalize what remains in the interior
    psi_full = np.zeros((sys.n_dof, nb))
    psi_full[boundary, :] = np.eye(nb)
    if ni:
        psi_full[interior, :] = psi
    Zc = Z - psi_full @ Z[boundary, :]
    Zi = Zc[interior, :] if ni else np.zeros((0, Z.shape[1]))
    if Zi.size:
        U, s, _ = scipy.linalg.svd(Zi, full_matrices=False)
        rank = int(np.sum(s > rank_tol * max(s[0] if s.size else 0.0, 1e-300)))
        U_r = U[:, :rank]
    else:
        rank = 0
        U_r = np.zeros((ni, 0))
    requested = Z.shape[1]
    if rank < requested:
        logger.info(
            "hh: %d of %d candidate modes survive orthogonalization on %r",
            rank, requested, sys.name,
        )

    n = sys.n_dof
    V = np.zeros((n, nb + rank))
    V[boundary, :nb] = np.eye(nb)
    if ni:
        V[interior, :nb] = psi
        V[interior, nb:] = U_r

    reduced = _project_second_order(sys, V, boundary, sys.name)
    elastic_omegas = np.sqrt(lam[~rigid][:n_modes])
    basis = ReductionBasis(
        method=HH, V=V, W=V, boundary=boundary, r=2 * V.shape[1],
        metadata={
            "n_modes": int(n_modes),
            "n_rigid": n_rigid,
            "achieved_rank": rank,
            "free_elastic_omegas": elastic_omegas,
            "cutoff_omega": float(elastic_omegas[-1]) if elastic_omegas.size else 0.0,
        },
    )
    return reduced, basis


# ---------------------------------------------------------------------------
# assembly of reduced blocks and error verification
# ---------------------------------------------------------------------------

def assemble_reduced(blocks, k_outer, omega, interfaces=(), op=None,
                     names=None, reference_block=None, **lft_kwargs):
    """Assemble (possibly reduced) subsystem blocks through the unchanged K.

    ``blocks`` may mix reduced and full-order descriptor systems; each must
    expose exactly the port counts of its full-order original (checked
    against ``reference_block`` when given).  The interconnection matrix is
    exactly the one of the full-order assembly: reduction never touches it.
    """
    descriptors = [
        to_descriptor(b) if isinstance(b, SecondOrderSystem) else b
        for b in blocks
    ]
    block = block_collect(descriptors, names)
    if reference_block is not None:
        for j, (red, full) in enumerate(zip(block.subsystems,
                                            reference_block.subsystems)):
            if (red.m, red.p) != (full.m, full.p):
                raise PortMismatchError(
                    f"subsystem {block.names[j]!r}: reduced model exposes "
                    f"{red.m}x{red.p} ports, original {full.m}x{full.p}; "
                    "reduction must preserve ports"
                )
    gb = block_frf(block, omega)
    if interfaces:
        if op is None:
            raise ValidationError("assembling with interfaces needs an operating point")
        k = k_outer.with_k11(posdep_k11(interfaces, op, block))
    else:
        k = k_outer
    return lft_assemble(gb, k, **lft_kwargs)


@dataclass(frozen=True)
class ErrorEntry:
    output: object
    input: object
    op_index: int
    max_rel_error: float
    worst_omega: float
    passed: bool


@dataclass(frozen=True)
class ErrorReport:
    """Per-entry, per-operating-point relative FRF error summary."""

    entries: tuple
    threshold: float
    floor_rel: float

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self):
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def worst(self):
        return max(self.entries, key=lambda e: e.max_rel_error)

    @classmethod
    def combine(cls, reports):
        entries = tuple(e for r in reports for e in r.entries)
        first = reports[0]
        return cls(entries, first.threshold, first.floor_rel)

    def to_json_dict(self):
        return {
            "threshold": self.threshold,
            "floor_rel": self.floor_rel,
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "entries": [
                {
                    "output": e.output,
                    "input": e.input,
                    "op_index": e.op_index,
                    "max_rel_error": e.max_rel_error,
                    "worst_omega": e.worst_omega,
                    "passed": e.passed,
                }
                for e in self.entries
            ],
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["output", "input", "op_index", "max_rel_error",
                 "worst_omega", "passed"]
            )
            for e in self.entries:
                writer.writerow(
                    [e.output, e.input, e.op_index,
                     f"{e.max_rel_error:.16e}", f"{e.worst_omega:.16e}",
                     int(e.passed)]
                )


def relative_error(full, reduced, entries=None, floor_rel=1e-12,
                   threshold=0.1, op_index=0):
    """Worst-case relative FRF error per (output, input) entry.

    The error |G_hat - G| / |G| is maximized over all grid frequencies where
    |G| exceeds ``floor_rel`` times its own maximum (antiresonance dips are
    excluded from the quotient).  An entry passes when its maximum stays
    below ``threshold``.
    """
    if not np.array_equal(full.frequencies, reduced.frequencies):
        raise ValidationError("relative_error requires identical frequency grids")
    if entries is None:
        entries = [(i, j) for i in range(full.p) for j in range(full.m)]
    rows = []
    for out, inp in entries:
        g = full.entry(out, inp)
        gh = reduced.entry(out, inp)
        denom = np.abs(g)
        mask = denom >= floor_rel * max(denom.max(), 1e-300)
        if not mask.any():
            raise NumericalError(
                f"entry ({out}, {inp}) is zero everywhere; relative error undefined"
            )
        rel = np.abs(gh[mask] - g[mask]) / denom[mask]
        worst = int(np.argmax(rel))
        err = float(rel[worst])
        if not np.isfinite(err):
            raise NumericalError(f"non-finite relative error in entry ({out}, {inp})")
        rows.append(ErrorEntry(
            output=out, input=inp, op_index=op_index,
            max_rel_error=err,
            worst_omega=float(full.frequencies[mask][worst]),
            passed=bool(err < threshold),
        ))
    return ErrorReport(tuple(rows), threshold, floor_rel)


# ---------------------------------------------------------------------------
# minimal-order search
# ---------------------------------------------------------------------------

def verification_grid(omega, reference_sweeps, factor=4):
    """Refine a log grid around detected resonance peaks of reference FRFs.

    Local maxima of the worst-entry magnitude get ``factor`` times the local
    point density across their neighbouring intervals.
    """
    omega = np.asarray(omega, dtype=np.float64)
    extra = []
    for sw in reference_sweeps:
        mag = np.abs(sw.data).max(axis=(1, 2))
        interior = np.arange(1, omega.size - 1)
        peaks = interior[(mag[1:-1] > mag[:-2]) & (mag[1:-1] > mag[2:])]
        for i in peaks:
            local = np.geomspace(omega[i - 1], omega[i + 1], 2 * factor + 1)
            extra.append(local[1:-1])
    if not extra:
        return omega
    return np.unique(np.concatenate([omega, *extra]))


def _rigid_state_count(ss, rigid_tol=RIGID_TOL):
    E, A = ss.E_dense, ss.A_dense
    if not np.allclose(E, np.eye(ss.n)):
        A = np.linalg.solve(E, A)
    eigs = np.linalg.eigvals(A)
    tol_abs = rigid_tol * max(np.abs(eigs).max(), 1e-300)
    return int(np.sum(np.real(eigs) >= -tol_abs))


class _Candidates:
    """Per-subsystem reduction ladder with memoized FRF evaluation."""

    def __init__(self, sys, method, omega, rigid_tol=RIGID_TOL):
        self.sys = sys
        self.method = method
        self.omega = omega
        self.desc_full = to_descriptor(sys)
        self.full_order = self.desc_full.n
        boundary = sorted(
            {d for d, _ in sys.input_map} | {d for d, _, _ in sys.output_map}
        )
        self.boundary = tuple(boundary)
        if method == BT:
            self.step_min = max(1, _rigid_state_count(self.desc_full, rigid_tol))
            self.step_max = self.desc_full.n
        elif method == CB:
            self.step_min = 0
            self.step_max = sys.n_dof - len(boundary)
        elif method == HH:
            self.step_min = 0
            lam = scipy.linalg.eigvalsh(sys.K.toarray(), sys.M.toarray())
            lam = np.clip(lam, 0.0, None)
            n_rigid = int(np.sum(lam <= 1e-10 * max(lam[-1], 1e-300)))
            self.step_max = sys.n_dof - n_rigid
        else:
            raise ValidationError(f"unknown reduction method {method!r}")
        self._cache = {}

    def reduce(self, step):
        if step in self._cache:
            return self._cache[step]
        if self.method == BT:
            red, basis = reduce_bt(self.desc_full, step)
            desc = red
        elif self.method == CB:
            red, basis = reduce_cb(self.sys, self.boundary, step)
            desc = to_descriptor(red)
        else:
            red, basis = reduce_hh(self.sys, self.boundary, step)
            desc = to_descriptor(red)
        sweep = None  # filled lazily by sweep()
        self._cache[step] = [desc, basis, sweep]
        return self._cache[step]

    def sweep(self, step):
        entry = self.reduce(step)
        if entry[2] is None:
            entry[2] = frf_eval(entry[0], self.omega)
        return entry[2]

    def order(self, step):
        return self.reduce(step)[1].r


@dataclass(frozen=True)
class SearchWitness:
    """Evidence that one basis step less violates the requirement somewhere."""

    step: int
    order: int
    op_index: object
    max_rel_error: float


@dataclass(frozen=True)
class OrderSearchResult:
    names: tuple
    methods: tuple
    full_orders: tuple
    per_op_orders: dict
    combined_steps: dict
    combined_orders: dict
    witnesses: dict
    final_report: object
    threshold: float
    n_evaluations: int

    def table_per_op(self):
        """Rows (subsystem, method, op index, minimal order) per operating point."""
        rows = []
        for name, method in zip(self.names, self.methods):
            for op_idx, r in enumerate(self.per_op_orders[name]):
                rows.append({"subsystem": name, "method": method,
                             "op_index": op_idx, "r": r})
        return rows

    def table_final(self):
        """Rows (subsystem, method, n, r, reduction %) for the combined orders.

        The percentage column is 100 * (1 - r/n) by definition; it is
        printed from this formula, never adjusted to match external tables.
        """
        rows = []
        for name, method, n in zip(self.names, self.methods, self.full_orders):
            r = self.combined_orders[name]
            rows.append({
                "subsystem": name, "method": method, "n": n, "r": r,
                "reduction_pct": round(100.0 * (1.0 - r / n), 1),
            })
        total_n = sum(self.full_orders)
        total_r = sum(self.combined_orders[n] for n in self.names)
        rows.append({
            "subsystem": "total", "method": "", "n": total_n, "r": total_r,
            "reduction_pct": round(100.0 * (1.0 - total_r / total_n), 1),
        })
        return rows


def minimal_order_search(systems, methods, interfaces, op_list, omega, k_outer,
                         threshold=0.1, names=None, entries=None,
                         floor_rel=1e-12, refine=True, rigid_tol=RIGID_TOL,
                         reference_sweeps=None):
    """Smallest per-subsystem reduced orders meeting the relative-error bound.

    Stage 1 bisects each subsystem's basis size (one state for balanced
    truncation, one kept mode for the CMS methods) with every other
    subsystem at full order, per operating point and over all points.
    Stage 2 verifies the all-reduced assembly and, on failure, grows the
    subsystem whose restoration to full order would help most.  A final
    descent pass shrinks any order whose decrement still passes, so each
    returned order carries a witness: one basis step less fails at some
    operating point (or sits at the minimum admissible size).

    ``reference_sweeps`` may supply external reference FRFs per operating
    point (e.g. a static-construction ground truth); the default reference
    is the full-order assembly itself.  If even the full-order assembly
    misses the threshold against an external reference, the requirement is
    unreachable and an error says so.
    """
    systems = list(systems)
    if names is None:
        names = [s.name or f"s{j}" for j, s in enumerate(systems)]
    names = list(names)
    if isinstance(methods, dict):
        methods = [methods[n] for n in names]
    methods = [m.lower() for m in methods]
    op_list = list(op_list)
    omega = np.asarray(omega, dtype=np.float64)

    descs_full = [to_descriptor(s) for s in systems]
    block = block_collect(descs_full, names)
    k11_per_op = [posdep_k11(interfaces, op, block) for op in op_list]
    gb_base = block_frf(block, omega)
    refs_base = [
        lft_assemble(gb_base, k_outer.with_k11(k11)) for k11 in k11_per_op
    ]
    grid = verification_grid(omega, refs_base) if refine else omega

    cands = [
        _Candidates(s, m, grid, rigid_tol)
        for s, m in zip(systems, methods)
    ]
    full_sweeps = [frf_eval(d, grid) for d in descs_full]
    p_b, m_b = block.p_b, block.m_b
    row_ranges = [
        (block.output_offsets[j], block.output_offsets[j + 1]) for j in range(block.k)
    ]
    col_ranges = [
        (block.input_offsets[j], block.input_offsets[j + 1]) for j in range(block.k)
    ]

    counter = {"evals": 0}

    def assemble(steps, op_idx):
        data = np.zeros((grid.size, p_b, m_b), dtype=np.complex128)
        for j in range(block.k):
            sw = full_sweeps[j] if steps[j] is None else cands[j].sweep(steps[j])
            r0, r1 = row_ranges[j]
            c0, c1 = col_ranges[j]
            data[:, r0:r1, c0:c1] = sw.data
        gb = FrfSweep(grid, data)
        return lft_assemble(gb, k_outer.with_k11(k11_per_op[op_idx]))

    refs = [
        reference_sweeps[i] if reference_sweeps is not None
        else assemble([None] * block.k, i)
        for i in range(len(op_list))
    ]

    def report_for(steps, op_indices):
        counter["evals"] += 1
        reports = []
        for i in op_indices:
            cand = assemble(steps, i)
            reports.append(relative_error(
                refs[i], cand, entries=entries, floor_rel=floor_rel,
                threshold=threshold, op_index=i,
            ))
        return ErrorReport.combine(reports)

    if reference_sweeps is not None:
        full_check = report_for([None] * block.k, range(len(op_list)))
        if not full_check.passed:
            raise NumericalError(
                "threshold unreachable at full order: the assembly itself "
                f"misses the requirement (max error {full_check.max_rel_error:.3g}); "
                "the interconnection modeling error exceeds the threshold"
            )
    if threshold <= 0:
        raise ValidationError("threshold must be positive")

    def passes(steps, op_indices):
        return report_for(steps, op_indices).passed

    def steps_with(j, step):
        steps = [None] * block.k
        steps[j] = step
        return steps

    def least_passing(j, op_indices, lo=None):
        lo = cands[j].step_min if lo is None else lo
        hi = cands[j].step_max
        if passes(steps_with(j, lo), op_indices):
            return lo
        # invariant: lo fails, hi passes (full order reproduces the reference)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if passes(steps_with(j, mid), op_indices):
                hi = mid
            else:
                lo = mid
        return hi

    per_op_orders = {}
    stage1 = []
    for j, name in enumerate(names):
        mins = [least_passing(j, [i]) for i in range(len(op_list))]
        per_op_orders[name] = [cands[j].order(s) for s in mins]
        combined = least_passing(j, range(len(op_list)), lo=max(mins))
        stage1.append(combined)

    steps = list(stage1)
    while not passes(steps, range(len(op_list))):
        candidates = []
        for j in range(block.k):
            if steps[j] >= cands[j].step_max:
                continue
            restored = list(steps)
            restored[j] = None
            err = report_for(restored, range(len(op_list))).max_rel_error
            candidates.append((err, j))
        if not candidates:
            raise NumericalError(
                "combined verification failed with every subsystem at full order"
            )
        _, bump = min(candidates)
        steps[bump] += 1
        logger.info("search: growing %s to step %d", names[bump], steps[bump])

    # descent pass: shrink any order whose decrement still passes everywhere
    changed = True
    while changed:
        changed = False
        for j in range(block.k):
            while steps[j] > cands[j].step_min:
                trial = list(steps)
                trial[j] = steps[j] - 1
                if passes(trial, range(len(op_list))):
                    steps = trial
                    changed = True
                else:
                    break

    witnesses = {}
    for j, name in enumerate(names):
        if steps[j] > cands[j].step_min:
            trial = list(steps)
            trial[j] = steps[j] - 1
            rep = report_for(trial, range(len(op_list)))
            worst = rep.worst()
            witnesses[name] = SearchWitness(
                step=trial[j], order=cands[j].order(trial[j]),
                op_index=worst.op_index,
                max_rel_error=rep.max_rel_error,
            )
        else:
            witnesses[name] = None

    final_report = report_for(steps, range(len(op_list)))
    if not final_report.passed:
        raise NumericalError("final verification failed; search is inconsistent")

    return OrderSearchResult(
        names=tuple(names),
        methods=tuple(methods),
        full_orders=tuple(d.n for d in descs_full),
        per_op_orders=per_op_orders,
        combined_steps={n: s for n, s in zip(names, steps)},
        combined_orders={n: cands[j].order(s) if s is not None else descs_full[j].n
                         for j, (n, s) in enumerate(zip(names, steps))},
        witnesses=witnesses,
        final_report=final_report,
        threshold=threshold,
        n_evaluations=counter["evals"],
    )
