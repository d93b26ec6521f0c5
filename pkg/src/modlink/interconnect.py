"""Assembly of subsystem collections through static and position-dependent couplings.

Subsystem responses are stacked block-diagonally (:func:`block_collect`,
:func:`block_frf`) and closed through an interconnection matrix with the
upper linear fractional transformation (:func:`lft_assemble`).  The coupling
block K11 comes either from springs placed exactly on existing ports
(:func:`static_k11`) or from the position-dependent construction that
interpolates each physical spring between the two adjacent virtual
interconnection points of a fixed grid on each interface side
(:func:`spring_k11`, :func:`posdep_k11`).  Only K11 depends on the operating
point; K12/K21/K22 and the subsystem responses never change, which is what
makes operating-point sweeps cheap (:func:`sweep_operating_points`).
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _accel
from .core import FrfSweep, frf_eval
from .errors import (
    CacheMissError,
    GridRangeError,
    SingularFrequencyError,
    ValidationError,
)

logger = logging.getLogger(__name__)

# Reciprocal-condition thresholds for the feedback solve I - K11 G_b.
RCOND_WARN = 1e-10
RCOND_ERROR = 1e-14

# Springs must land this close (absolute, in grid units) to a port to count
# as coincident in the static construction.
SNAP_TOL = 1e-9


@dataclass(frozen=True)
class BlockSystem:
    """Ordered subsystem collection with global port index bookkeeping.

    Input/output indices of subsystem j occupy the contiguous ranges
    ``[input_offsets[j], input_offsets[j+1])`` and likewise for outputs, so
    m_b and p_b are the sums of the per-subsystem port counts.
    """

    subsystems: tuple
    names: tuple
    input_offsets: tuple
    output_offsets: tuple

    @property
    def k(self):
        return len(self.subsystems)

    @property
    def m_b(self):
        return self.input_offsets[-1]

    @property
    def p_b(self):
        return self.output_offsets[-1]

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown subsystem {name!r}") from None

    def global_input(self, name, local):
        j = self.index(name)
        m_j = self.subsystems[j].m
        if not 0 <= local < m_j:
            raise ValidationError(
                f"input {local} outside [0, {m_j}) on subsystem {name!r}"
            )
        return self.input_offsets[j] + local

    def global_output(self, name, local):
        j = self.index(name)
        p_j = self.subsystems[j].p
        if not 0 <= local < p_j:
            raise ValidationError(
                f"output {local} outside [0, {p_j}) on subsystem {name!r}"
            )
        return self.output_offsets[j] + local


def block_collect(systems, names=None):
    """Collect descriptor subsystems into a block system with port offsets."""
    systems = tuple(systems)
    if not systems:
        raise ValidationError("block_collect needs at least one subsystem")
    if names is None:
        names = tuple(s.name or f"s{j}" for j, s in enumerate(systems))
    names = tuple(names)
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate subsystem names in {names}")
    in_off = [0]
    out_off = [0]
    for s in systems:
        in_off.append(in_off[-1] + s.m)
        out_off.append(out_off[-1] + s.p)
    return BlockSystem(systems, names, tuple(in_off), tuple(out_off))


def block_frf(block, omega, subsystem_sweeps=None):
    """FRF of the block system: block-diagonal in the subsystem FRFs.

    ``subsystem_sweeps`` may supply precomputed per-subsystem sweeps (e.g.
    from a cache); missing entries are evaluated with :func:`frf_eval`.
    """
    omega = np.asarray(omega, dtype=np.float64)
    data = np.zeros((omega.size, block.p_b, block.m_b), dtype=np.complex128)
    for j, ss in enumerate(block.subsystems):
        if subsystem_sweeps is not None and subsystem_sweeps[j] is not None:
            sub = _aligned_data(subsystem_sweeps[j], omega, block.names[j])
        else:
            sub = frf_eval(ss, omega).data
        r0, r1 = block.output_offsets[j], block.output_offsets[j + 1]
        c0, c1 = block.input_offsets[j], block.input_offsets[j + 1]
        data[:, r0:r1, c0:c1] = sub
    labels_u = tuple(
        f"{name}/u{j}"
        for name, s in zip(block.names, block.subsystems)
        for j in range(s.m)
    )
    labels_y = tuple(
        f"{name}/y{i}"
        for name, s in zip(block.names, block.subsystems)
        for i in range(s.p)
    )
    return FrfSweep(omega, data, labels_u, labels_y)


def _aligned_data(sweep, omega, name):
    """Select the rows of a cached sweep matching omega exactly; no re-evaluation."""
    if sweep.n_freq == omega.size and np.array_equal(sweep.frequencies, omega):
        return sweep.data
    idx = np.searchsorted(sweep.frequencies, omega)
    inside = idx < sweep.n_freq
    if not (inside.all() and np.array_equal(sweep.frequencies[idx], omega)):
        raise CacheMissError(
            f"cached FRF of {name!r} does not cover the requested grid"
        )
    return sweep.data[idx]


@dataclass(frozen=True)
class InterconnectionMatrix:
    """Partitioned static interconnection: [u_b; y_c] = K [y_b; u_c]."""

    k11: sp.spmatrix
    k12: np.ndarray
    k21: np.ndarray
    k22: np.ndarray

    def __post_init__(self):
        k11 = sp.csr_matrix(self.k11)
        k12 = np.atleast_2d(np.asarray(self.k12, dtype=np.float64))
        k21 = np.atleast_2d(np.asarray(self.k21, dtype=np.float64))
        k22 = np.atleast_2d(np.asarray(self.k22, dtype=np.float64))
        m_b, p_b = k11.shape
        m_c = k12.shape[1]
        p_c = k21.shape[0]
        if k12.shape[0] != m_b:
            raise ValidationError(f"K12 must have {m_b} rows, got {k12.shape[0]}")
        if k21.shape[1] != p_b:
            raise ValidationError(f"K21 must have {p_b} cols, got {k21.shape[1]}")
        if k22.shape != (p_c, m_c):
            raise ValidationError(
                f"K22 must have shape {(p_c, m_c)}, got {k22.shape}"
            )
        object.__setattr__(self, "k11", k11)
        object.__setattr__(self, "k12", k12)
        object.__setattr__(self, "k21", k21)
        object.__setattr__(self, "k22", k22)

    @property
    def m_b(self):
        return self.k11.shape[0]

    @property
    def p_b(self):
        return self.k11.shape[1]

    @property
    def m_c(self):
        return self.k12.shape[1]

    @property
    def p_c(self):
        return self.k21.shape[0]

    def with_k11(self, k11):
        return InterconnectionMatrix(k11, self.k12, self.k21, self.k22)


def external_io(block, inputs, outputs):
    """K12/K21/K22 selecting external ports, as an InterconnectionMatrix.

    ``inputs`` / ``outputs`` are (subsystem name, local port index) pairs;
    K11 starts out empty and is filled in per operating point.
    """
    k12 = np.zeros((block.m_b, len(inputs)))
    for col, (name, local) in enumerate(inputs):
        k12[block.global_input(name, local), col] = 1.0
    k21 = np.zeros((len(outputs), block.p_b))
    for row, (name, local) in enumerate(outputs):
        k21[row, block.global_output(name, local)] = 1.0
    k22 = np.zeros((len(outputs), len(inputs)))
    return InterconnectionMatrix(
        sp.csr_matrix((block.m_b, block.p_b)), k12, k21, k22
    )


@dataclass(frozen=True)
class VirtualPoint:
    """One grid point of an interface side: coordinate plus its port pair."""

    coord: float
    input_index: int
    output_index: int


@dataclass(frozen=True)
class InterfaceSide:
    """One side of an interface: the virtual-point grid of a subsystem.

    ``static_points`` optionally lists *all* ports with a coordinate on this
    side (a superset of the grid); the static, non-interpolating coupling
    snaps springs to these.  It defaults to the virtual grid itself.
    """

    subsystem: str
    points: tuple
    static_points: tuple = ()

    def __post_init__(self):
        pts = tuple(self.points)
        coords = [p.coord for p in pts]
        if any(b <= a for a, b in zip(coords, coords[1:])):
            raise ValidationError(
                f"virtual-point coordinates on {self.subsystem!r} must be "
                f"strictly increasing, got {coords}"
            )
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "static_points", tuple(self.static_points) or pts)

    @property
    def coords(self):
        return np.array([p.coord for p in self.points])


@dataclass(frozen=True)
class SpringSpec:
    """Translational spring: anchored on side j, base position on side ell."""

    stiffness: float
    anchor_j: float
    anchor_ell_base: float

    def __post_init__(self):
        if not self.stiffness > 0:
            raise ValidationError(f"spring stiffness must be > 0, got {self.stiffness}")


@dataclass(frozen=True)
class InterfaceSpec:
    """Translating interface between two subsystem sides.

    ``slide_on`` picks the side whose spring positions shift with the
    operating-point displacement delta: with the default ``"ell"`` a spring
    sits at ``anchor_j`` on side j for every delta and at
    ``anchor_ell_base + delta`` on side ell.  ``"j"`` flips the convention.
    """

    id: str
    side_j: InterfaceSide
    side_ell: InterfaceSide
    springs: tuple
    axis: str = "y"
    slide_on: str = "ell"

    def __post_init__(self):
        object.__setattr__(self, "springs", tuple(self.springs))
        if self.slide_on not in ("j", "ell"):
            raise ValidationError(f"slide_on must be 'j' or 'ell', got {self.slide_on!r}")

    def spring_positions(self, spring, delta):
        """(position on side j, position on side ell) at displacement delta."""
        if self.slide_on == "ell":
            return spring.anchor_j, spring.anchor_ell_base + delta
        return spring.anchor_j + delta, spring.anchor_ell_base


@dataclass(frozen=True)
class OperatingPoint:
    """Relative displacement of side ell w.r.t. side j, one entry per interface."""

    deltas: tuple

    def __init__(self, deltas):
        object.__setattr__(
            self, "deltas", tuple(sorted((str(k), float(v)) for k, v in dict(deltas).items()))
        )

    def delta(self, interface_id):
        for key, value in self.deltas:
            if key == interface_id:
                return value
        raise ValidationError(f"operating point has no entry for interface {interface_id!r}")

    def as_dict(self):
        return dict(self.deltas)

    def check_covers(self, interfaces):
        ids = {i.id for i in interfaces}
        given = {k for k, _ in self.deltas}
        if ids != given:
            raise ValidationError(
                f"operating point must carry exactly one delta per interface; "
                f"model has {sorted(ids)}, point has {sorted(given)}"
            )


def interp_weights(grid, position):
    """Bracketing indices and interpolation weights on one grid side.

    Returns ``(alpha, beta, w_alpha, w_beta)`` with the weight of each
    virtual point proportional to the distance from the position to the
    *other* point, so a coincident point receives weight one and
    w_alpha + w_beta = 1.  Positions outside the grid span are an error;
    no extrapolation is defined.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size < 2:
        raise ValidationError("interpolation grid needs at least 2 points")
    if position < grid[0] or position > grid[-1]:
        raise GridRangeError(
            f"position {position:g} outside grid span [{grid[0]:g}, {grid[-1]:g}]"
        )
    hi = int(np.searchsorted(grid, position, side="right"))
    if hi >= grid.size:  # exactly on the last point
        hi = grid.size - 1
    alpha, beta = hi - 1, hi
    if position == grid[alpha] and alpha + 1 < grid.size:
        beta = alpha + 1  # coincident point keeps the [alpha, alpha+1] bracket
    d_a = position - grid[alpha]
    d_b = grid[beta] - position
    span = d_a + d_b
    w_alpha = d_b / span
    w_beta = d_a / span
    return alpha, beta, w_alpha, w_beta


def _side_weights(side, position):
    alpha, beta, w_a, w_b = interp_weights(side.coords, position)
    return (side.points[alpha], side.points[beta]), (w_a, w_b)


def spring_k11(spring, interface, op, block):
    """Coupling contribution of one spring, interpolated onto active ports.

    Builds the 4x4 active block Q [[-k, k], [k, -k]] Q^T from the
    interpolation weights of both sides and scatters it between the global
    port indices of the four active virtual points.
    """
    delta = op.delta(interface.id)
    pos_j, pos_ell = interface.spring_positions(spring, delta)
    try:
        pts_j, w_j = _side_weights(interface.side_j, pos_j)
        pts_ell, w_ell = _side_weights(interface.side_ell, pos_ell)
    except GridRangeError as exc:
        raise GridRangeError(
            f"interface {interface.id!r}, spring at "
            f"(j={spring.anchor_j:g}, ell={spring.anchor_ell_base:g}), "
            f"delta={delta:g}: {exc}"
        ) from None

    k = spring.stiffness
    q = np.zeros((4, 2))
    q[0, 0], q[1, 0] = w_j
    q[2, 1], q[3, 1] = w_ell
    kernel = np.array([[-k, k], [k, -k]])
    khat = q @ kernel @ q.T

    name_j = interface.side_j.subsystem
    name_ell = interface.side_ell.subsystem
    points = (*pts_j, *pts_ell)
    names = (name_j, name_j, name_ell, name_ell)
    rows = [block.global_input(n, p.input_index) for n, p in zip(names, points)]
    cols = [block.global_output(n, p.output_index) for n, p in zip(names, points)]
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return sp.coo_matrix(
        (khat.ravel(), (rr.ravel(), cc.ravel())),
        shape=(block.m_b, block.p_b),
    ).tocsr()


def posdep_k11(interfaces, op, block):
    """Position-dependent K11: sum of every spring contribution of every interface."""
    op.check_covers(interfaces)
    k11 = sp.csr_matrix((block.m_b, block.p_b))
    for interface in interfaces:
        for spring in interface.springs:
            k11 = k11 + spring_k11(spring, interface, op, block)
    return k11


def static_k11(interfaces, op, block, snap_tol=SNAP_TOL):
    """Ground-truth K11 from springs placed exactly on existing ports.

    Every spring position must coincide (within ``snap_tol``) with a virtual
    point on both sides; this construction never interpolates.
    """
    op.check_covers(interfaces)
    rows, cols, vals = [], [], []
    for interface in interfaces:
        delta = op.delta(interface.id)
        for spring in interface.springs:
            pos_j, pos_ell = interface.spring_positions(spring, delta)
            pt_j = _coincident_point(interface.side_j, pos_j, snap_tol,
                                     interface.id)
            pt_ell = _coincident_point(interface.side_ell, pos_ell, snap_tol,
                                       interface.id)
            k = spring.stiffness
            u = [
                block.global_input(interface.side_j.subsystem, pt_j.input_index),
                block.global_input(interface.side_ell.subsystem, pt_ell.input_index),
            ]
            y = [
                block.global_output(interface.side_j.subsystem, pt_j.output_index),
                block.global_output(interface.side_ell.subsystem, pt_ell.output_index),
            ]
            kernel = np.array([[-k, k], [k, -k]])
            for a in range(2):
                for b in range(2):
                    rows.append(u[a])
                    cols.append(y[b])
                    vals.append(kernel[a, b])
    return sp.coo_matrix(
        (vals, (rows, cols)), shape=(block.m_b, block.p_b)
    ).tocsr()


def _coincident_point(side, position, snap_tol, interface_id):
    points = side.static_points
    coords = np.array([p.coord for p in points])
    idx = int(np.argmin(np.abs(coords - position)))
    if abs(coords[idx] - position) > snap_tol:
        raise ValidationError(
            f"interface {interface_id!r}: spring position {position:g} on "
            f"{side.subsystem!r} does not coincide with any port "
            f"(nearest {coords[idx]:g}, snap tolerance {snap_tol:g})"
        )
    return points[idx]


def lft_assemble(gb, k, rcond_warn=RCOND_WARN, rcond_error=RCOND_ERROR,
                 input_labels=None, output_labels=None):
    """Close the loop: G_c(i w) = K21 G_b (I - K11 G_b)^-1 K12 + K22.

    Evaluated per frequency through the kernel backend.  The reciprocal
    condition of the feedback matrix is estimated at every frequency; the
    worst value is logged, values below ``rcond_warn`` trigger a warning
    and below ``rcond_error`` an error naming the frequency.
    """
    if (gb.p, gb.m) != (k.p_b, k.m_b):
        raise ValidationError(
            f"block FRF is {gb.p}x{gb.m} but K11 expects p_b={k.p_b}, m_b={k.m_b}"
        )
    gb_arr, k11, k12, k21, k22 = _accel.as_kernel_args(
        gb.data, k.k11.toarray(), k.k12, k.k21, k.k22
    )
    try:
        gc, rcond = _accel.lft_response(gb_arr, k11, k12, k21, k22)
    except np.linalg.LinAlgError:
        raise SingularFrequencyError(
            "feedback matrix I - K11 G_b is singular on the grid", omega=None
        ) from None

    worst = int(np.argmin(rcond))
    logger.debug(
        "lft_assemble: min rcond %.3e at omega = %g",
        rcond[worst], gb.frequencies[worst],
    )
    if rcond[worst] < rcond_error:
        raise SingularFrequencyError(
            f"feedback matrix I - K11 G_b is numerically singular at "
            f"omega = {gb.frequencies[worst]:g} (rcond = {rcond[worst]:.3e})",
            omega=float(gb.frequencies[worst]),
            rcond=float(rcond[worst]),
        )
    if rcond[worst] < rcond_warn:
        logger.warning(
            "ill-conditioned feedback solve at omega = %g (rcond = %.3e)",
            gb.frequencies[worst], rcond[worst],
        )
    in_labels = tuple(input_labels or (f"uc{j}" for j in range(k.m_c)))
    out_labels = tuple(output_labels or (f"yc{i}" for i in range(k.p_c)))
    return FrfSweep(gb.frequencies, gc, in_labels, out_labels)


def sweep_operating_points(block_sweep, interfaces, op_list, k_outer, omega,
                           block=None, **lft_kwargs):
    """Assemble the interconnected FRF at each operating point.

    Only K11 is rebuilt per point; the block FRF is reused untouched (a grid
    it does not cover raises :class:`CacheMissError` instead of silently
    re-evaluating).  ``block`` supplies the port bookkeeping for the K11
    builders and defaults to requiring interfaces resolved against the sweep
    labels, so it must be passed whenever interfaces are present.
    """
    omega = np.asarray(omega, dtype=np.float64)
    if not np.array_equal(block_sweep.frequencies, omega):
        data = _aligned_data(block_sweep, omega, "block system")
        block_sweep = FrfSweep(
            omega, data, block_sweep.input_labels, block_sweep.output_labels
        )
    results = []
    for op in op_list:
        if interfaces:
            if block is None:
                raise ValidationError(
                    "sweep_operating_points needs the BlockSystem to place springs"
                )
            k11 = posdep_k11(interfaces, op, block)
        else:
            k11 = k_outer.k11
        k_op = k_outer.with_k11(k11)
        results.append(lft_assemble(block_sweep, k_op, **lft_kwargs))
    return results
