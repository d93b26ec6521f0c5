"""Subsystem models: second-order form, descriptor state space, FRF evaluation.

A flexible body enters the toolkit as a :class:`SecondOrderSystem` (sparse
mass/damping/stiffness matrices plus force-input and displacement/velocity
output maps), is lifted to a :class:`DescriptorStateSpace`, and is sampled
along the imaginary axis into a :class:`FrfSweep`.  All three types are
immutable after construction and every operation here is a pure function, so
callers may evaluate disjoint frequency subsets concurrently and merge the
results in order.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _accel
from .errors import NumericalError, SingularFrequencyError, ValidationError

DISPLACEMENT = "displacement"
VELOCITY = "velocity"

# Pencil regularity is probed at one fixed, arbitrary complex point; a fresh
# random point per call would make construction non-deterministic.
_REGULARITY_PROBE = 0.7310582938 + 1.3127945021j

# Systems at or below this state dimension take the dense LAPACK path in
# frf_eval; larger sparse systems get one sparse LU per frequency.
DENSE_LIMIT = 1200


def _as_csr(mat, name):
    if sp.issparse(mat):
        out = mat.tocsr().astype(np.float64)
    else:
        arr = np.asarray(mat, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"{name} must be a 2-D matrix")
        out = sp.csr_matrix(arr)
    out.sort_indices()
    return out


def _check_symmetric(mat, name, tol):
    scale = abs(mat).max() if mat.nnz else 0.0
    if scale == 0.0:
        return
    asym = abs(mat - mat.T).max()
    if asym > tol * scale:
        raise ValidationError(
            f"{name} is not symmetric: max |X - X^T| = {asym:.3e} "
            f"(allowed {tol:.1e} relative)"
        )


@dataclass(frozen=True)
class SecondOrderSystem:
    """Mechanical subsystem M q'' + D q' + K q = F with port maps.

    ``input_map`` rows are ``(dof, scale)`` pairs: input j applies a force
    ``scale * u_j`` at that generalized coordinate.  ``output_map`` rows are
    ``(dof, scale, kind)`` with kind ``"displacement"`` or ``"velocity"``.
    Matrices must be symmetric within ``symmetry_tol`` (relative) and M must
    be positive semidefinite; the eigenvalue check runs on instances small
    enough to afford it (``psd_check_limit``).
    """

    M: sp.csr_matrix
    D: sp.csr_matrix
    K: sp.csr_matrix
    input_map: tuple
    output_map: tuple
    input_labels: tuple = ()
    output_labels: tuple = ()
    name: str = ""
    symmetry_tol: float = 1e-10
    psd_floor: float = 1e-8
    psd_check_limit: int = 400

    def __post_init__(self):
        for attr in ("M", "D", "K"):
            object.__setattr__(self, attr, _as_csr(getattr(self, attr), attr))
        n = self.M.shape[0]
        for attr in ("M", "D", "K"):
            mat = getattr(self, attr)
            if mat.shape != (n, n):
                raise ValidationError(
                    f"{attr} has shape {mat.shape}, expected ({n}, {n})"
                )
            _check_symmetric(mat, attr, self.symmetry_tol)

        in_map = tuple((int(d), float(s)) for d, s in self.input_map)
        out_map = tuple(
            (int(d), float(s), str(kind)) for d, s, kind in self.output_map
        )
        object.__setattr__(self, "input_map", in_map)
        object.__setattr__(self, "output_map", out_map)
        for dof, _ in in_map:
            if not 0 <= dof < n:
                raise ValidationError(f"input dof {dof} outside [0, {n})")
        for dof, _, kind in out_map:
            if not 0 <= dof < n:
                raise ValidationError(f"output dof {dof} outside [0, {n})")
            if kind not in (DISPLACEMENT, VELOCITY):
                raise ValidationError(f"unknown output kind {kind!r}")

        in_labels = tuple(self.input_labels) or tuple(
            f"u{j}" for j in range(len(in_map))
        )
        out_labels = tuple(self.output_labels) or tuple(
            f"y{j}" for j in range(len(out_map))
        )
        if len(in_labels) != len(in_map) or len(out_labels) != len(out_map):
            raise ValidationError("port label counts do not match port maps")
        object.__setattr__(self, "input_labels", in_labels)
        object.__setattr__(self, "output_labels", out_labels)

        if n <= self.psd_check_limit and n > 0:
            lam_min = scipy.linalg.eigvalsh(self.M.toarray())[0]
            floor = -self.psd_floor * max(abs(self.M).max(), 1e-300)
            if lam_min < floor:
                raise ValidationError(
                    f"M is not positive semidefinite: lambda_min = {lam_min:.3e}"
                )

    @property
    def n_dof(self):
        return self.M.shape[0]

    @property
    def n_inputs(self):
        return len(self.input_map)

    @property
    def n_outputs(self):
        return len(self.output_map)

    def input_matrix(self):
        """Force distribution matrix: n_dof x m, column j loads dof of input j."""
        bf = np.zeros((self.n_dof, self.n_inputs))
        for j, (dof, scale) in enumerate(self.input_map):
            bf[dof, j] += scale
        return bf

    def output_matrices(self):
        """Displacement and velocity selection rows (each p x n_dof)."""
        cq = np.zeros((self.n_outputs, self.n_dof))
        cv = np.zeros((self.n_outputs, self.n_dof))
        for i, (dof, scale, kind) in enumerate(self.output_map):
            (cq if kind == DISPLACEMENT else cv)[i, dof] += scale
        return cq, cv


@dataclass(frozen=True)
class DescriptorStateSpace:
    """Realization E x' = A x + B u, y = C x + D_ss u.

    The pencil (E, A) must be regular; this is checked once at a fixed
    complex probe point.  Mechanical realizations produced by
    :func:`to_descriptor` carry E = [[I, 0], [0, M]] and
    A = [[0, I], [-K, -D]].
    """

    E: object
    A: object
    B: np.ndarray
    C: np.ndarray
    D_ss: np.ndarray = None
    name: str = ""
    check_regular: bool = True

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.E.shape != (n, n):
            raise ValidationError("E and A must be square and equally sized")
        B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        if B.shape[0] != n:
            raise ValidationError(f"B has {B.shape[0]} rows, expected {n}")
        if C.shape[1] != n:
            raise ValidationError(f"C has {C.shape[1]} columns, expected {n}")
        D_ss = self.D_ss
        if D_ss is None:
            D_ss = np.zeros((C.shape[0], B.shape[1]))
        D_ss = np.atleast_2d(np.asarray(D_ss, dtype=np.float64))
        if D_ss.shape != (C.shape[0], B.shape[1]):
            raise ValidationError(
                f"D_ss has shape {D_ss.shape}, expected {(C.shape[0], B.shape[1])}"
            )
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D_ss", D_ss)
        if self.check_regular:
            self._check_regularity()

    def _check_regularity(self):
        s0 = _REGULARITY_PROBE
        try:
            if self.is_sparse and self.n > DENSE_LIMIT:
                pencil = (s0 * self.E - self.A).tocsc()
                spla.splu(pencil)
            else:
                Ed, Ad = self.E_dense, self.A_dense
                sign, logdet = np.linalg.slogdet(s0 * Ed - Ad)
                if sign == 0 or not np.isfinite(logdet):
                    raise NumericalError("pencil (E, A) is singular")
        except (RuntimeError, np.linalg.LinAlgError) as exc:
            raise NumericalError(f"pencil (E, A) is not regular: {exc}") from exc

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def p(self):
        return self.C.shape[0]

    @property
    def is_sparse(self):
        return sp.issparse(self.A)

    @property
    def E_dense(self):
        return self.E.toarray() if sp.issparse(self.E) else np.asarray(self.E, float)

    @property
    def A_dense(self):
        return self.A.toarray() if sp.issparse(self.A) else np.asarray(self.A, float)

    def is_mechanical_form(self, sys, tol=1e-12):
        """Check entry-wise that E, A carry the block structure built from sys."""
        n = sys.n_dof
        eye = sp.identity(n, format="csr")
        E_ref = sp.bmat([[eye, None], [None, sys.M]], format="csr")
        A_ref = sp.bmat([[None, eye], [-sys.K, -sys.D]], format="csr")
        E = sp.csr_matrix(self.E)
        A = sp.csr_matrix(self.A)
        scale = max(abs(E_ref).max(), abs(A_ref).max(), 1.0)
        return (
            abs(E - E_ref).max() <= tol * scale
            and abs(A - A_ref).max() <= tol * scale
        )


@dataclass(frozen=True)
class FrfSweep:
    """Complex p x m response matrices sampled on a strictly increasing grid."""

    frequencies: np.ndarray
    data: np.ndarray
    input_labels: tuple = ()
    output_labels: tuple = ()

    def __post_init__(self):
        freq = np.asarray(self.frequencies, dtype=np.float64)
        data = np.asarray(self.data, dtype=np.complex128)
        if freq.ndim != 1:
            raise ValidationError("frequencies must be a 1-D array")
        if np.any(np.diff(freq) <= 0):
            raise ValidationError("frequencies must be strictly increasing")
        if data.ndim != 3 or data.shape[0] != freq.shape[0]:
            raise ValidationError(
                "data must have shape (n_freq, p, m) matching the grid"
            )
        if not np.all(np.isfinite(data.view(np.float64))):
            bad = np.where(~np.isfinite(data).all(axis=(1, 2)))[0]
            raise NumericalError(
                f"non-finite FRF entries at omega = {freq[bad[0]]:g}"
            )
        object.__setattr__(self, "frequencies", freq)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "input_labels", tuple(self.input_labels))
        object.__setattr__(self, "output_labels", tuple(self.output_labels))

    @property
    def n_freq(self):
        return self.frequencies.shape[0]

    @property
    def p(self):
        return self.data.shape[1]

    @property
    def m(self):
        return self.data.shape[2]

    def entry(self, output, inp):
        """Complex response vector for one (output, input) pair.

        Ports may be addressed by integer index or by label.
        """
        i = self._resolve(output, self.output_labels)
        j = self._resolve(inp, self.input_labels)
        return self.data[:, i, j]

    @staticmethod
    def _resolve(key, labels):
        if isinstance(key, str):
            try:
                return labels.index(key)
            except ValueError:
                raise ValidationError(f"unknown port label {key!r}") from None
        return int(key)

    @classmethod
    def merge(cls, parts):
        """Concatenate sweeps over disjoint, ordered frequency subsets."""
        parts = list(parts)
        freq = np.concatenate([p.frequencies for p in parts])
        data = np.concatenate([p.data for p in parts], axis=0)
        first = parts[0]
        return cls(freq, data, first.input_labels, first.output_labels)


def to_descriptor(sys, D_ss=None):
    """Lift a second-order system to descriptor state-space form.

    States are [q; q'].  B routes force inputs into the momentum partition;
    displacement outputs read the q partition and velocity outputs the q'
    partition.  D_ss defaults to zero.

    Raises if a velocity output sits on a massless coordinate (the row of M
    is zero there), since the realization would hide an algebraic output.
    """
    n = sys.n_dof
    m_rowsums = np.asarray(abs(sys.M).sum(axis=1)).ravel()
    for dof, _, kind in sys.output_map:
        if kind == VELOCITY and m_rowsums[dof] == 0.0:
            raise ValidationError(
                f"velocity output on massless dof {dof}: M row is zero"
            )

    eye = sp.identity(n, format="csr")
    E = sp.bmat([[eye, None], [None, sys.M]], format="csr")
    A = sp.bmat([[None, eye], [-sys.K, -sys.D]], format="csr")

    bf = sys.input_matrix()
    B = np.vstack([np.zeros_like(bf), bf])
    cq, cv = sys.output_matrices()
    C = np.hstack([cq, cv])
    return DescriptorStateSpace(
        E=E, A=A, B=B, C=C, D_ss=D_ss, name=sys.name,
    )


def _labels_from(ss, p, m):
    return tuple(f"u{j}" for j in range(m)), tuple(f"y{i}" for i in range(p))


def frf_eval(ss, omega, dense_limit=DENSE_LIMIT, input_labels=None,
             output_labels=None):
    """Sample G(i w) = C (i w E - A)^-1 B + D_ss on a frequency grid.

    One factorization is performed per frequency: dense LAPACK for systems
    with n <= dense_limit (through the selected kernel backend), sparse LU
    above it.  The function is pure; disjoint frequency subsets evaluated
    separately and merged in order reproduce a single full-grid call.
    """
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim != 1 or omega.size == 0:
        raise ValidationError("omega grid must be a non-empty 1-D array")

    if ss.is_sparse and ss.n > dense_limit:
        data = _frf_sparse(ss, omega)
    else:
        E, A, B, C = _accel.as_kernel_args(
            ss.E_dense, ss.A_dense, ss.B, ss.C
        )
        try:
            data = _accel.descriptor_response(E, A, B, C, omega)
        except np.linalg.LinAlgError:
            _locate_singular_pencil(ss, omega)
            raise
    data = data + ss.D_ss[None, :, :]

    bad = np.where(~np.isfinite(data).all(axis=(1, 2)))[0]
    if bad.size:
        raise SingularFrequencyError(
            f"(i w E - A) is singular at omega = {omega[bad[0]]:g} "
            "(undamped resonance exactly on the grid?)",
            omega=float(omega[bad[0]]),
        )
    in_labels = tuple(input_labels or _labels_from(ss, ss.p, ss.m)[0])
    out_labels = tuple(output_labels or _labels_from(ss, ss.p, ss.m)[1])
    return FrfSweep(omega, data, in_labels, out_labels)


def _frf_sparse(ss, omega):
    E = sp.csc_matrix(ss.E, dtype=np.complex128)
    A = sp.csc_matrix(ss.A, dtype=np.complex128)
    B = np.asarray(ss.B, dtype=np.complex128)
    out = np.empty((omega.size, ss.p, ss.m), dtype=np.complex128)
    for k, w in enumerate(omega):
        try:
            lu = spla.splu((1j * w) * E - A)
            out[k] = ss.C @ lu.solve(B)
        except RuntimeError as exc:
            raise SingularFrequencyError(
                f"(i w E - A) is singular at omega = {w:g}", omega=float(w)
            ) from exc
    return out


def _locate_singular_pencil(ss, omega):
    """Replay a failed dense sweep frequency by frequency to name the culprit."""
    E, A = ss.E_dense, ss.A_dense
    for w in omega:
        try:
            np.linalg.solve(1j * w * E - A, ss.B)
        except np.linalg.LinAlgError:
            raise SingularFrequencyError(
                f"(i w E - A) is singular at omega = {w:g} "
                "(undamped resonance exactly on the grid?)",
                omega=float(w),
            ) from None


def build_modal_damping(M, K, zeta, rigid_tol=1e-10):
    """Damping matrix giving every elastic mode the ratio zeta.

    Solves the undamped generalized eigenproblem of (K, M), mass-normalizes
    the mode shapes, and assembles D = M Phi diag(2 zeta w_r) Phi^T M.  Modes
    with eigenvalue below ``rigid_tol`` times the largest one count as
    rigid-body motion and receive zero damping.
    """
    if not 0.0 <= zeta < 1.0:
        raise ValidationError(f"zeta must lie in [0, 1), got {zeta}")
    M = _as_csr(M, "M")
    K = _as_csr(K, "K")
    n = M.shape[0]
    if zeta == 0.0:
        return sp.csr_matrix((n, n))
    try:
        lam, phi = scipy.linalg.eigh(K.toarray(), M.toarray())
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"modal eigen-solve failed: {exc}") from exc
    lam = np.clip(lam, 0.0, None)
    lam_max = lam[-1] if lam.size else 0.0
    elastic = lam > rigid_tol * max(lam_max, 1e-300)
    omega_r = np.sqrt(lam[elastic])
    phi_e = phi[:, elastic]
    core = phi_e @ np.diag(2.0 * zeta * omega_r) @ phi_e.T
    D = M @ sp.csr_matrix(core) @ M
    D = (D + D.T) * 0.5
    return sp.csr_matrix(D)
