"""Deterministic desk-scale test models.

``make_chain`` builds lumped mass-spring-damper chains (the workhorse for
oracle tests), ``make_two_stage_bench`` a two-stage assembly of a grounded
rail and a free carriage coupled by three translational springs across a
translating interface, and ``make_operating_grid`` Cartesian grids of
operating points.  All generators are pure and bit-reproducible for equal
configurations.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import DISPLACEMENT, SecondOrderSystem, build_modal_damping
from .errors import ValidationError
from .interconnect import (
    InterfaceSide,
    InterfaceSpec,
    OperatingPoint,
    SpringSpec,
    VirtualPoint,
)

# Base per-length properties of the bench stages.  The config's
# stiffness/mass scales multiply these.
_BASE_EA = 3.0e6   # axial rigidity surrogate, N
_BASE_RHO = 15.0   # lumped line density, kg/m


def _per_element(value, count, name):
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (count,)).copy()
    if np.any(arr < 0):
        raise ValidationError(f"{name} values must be non-negative")
    return arr


def make_chain(n, m=1.0, k=1.0, d=0.0, bc="fixed-free", ports=(0,), name=""):
    """Lumped mass-spring-damper chain with selectable boundary conditions.

    ``bc`` picks the spring topology: ``fixed-free`` grounds the first mass
    (n spring elements), ``free-free`` couples neighbours only (n-1
    elements), ``fixed-fixed`` grounds both ends (n+1 elements).  ``m``,
    ``k`` and ``d`` may be scalars or per-element arrays.  ``ports`` lists
    the DOFs that receive a collocated force input / displacement output.
    """
    if n < 1:
        raise ValidationError("chain needs at least one mass")
    n_springs = {"fixed-free": n, "free-free": n - 1, "fixed-fixed": n + 1}
    if bc not in n_springs:
        raise ValidationError(f"unknown boundary condition {bc!r}")
    masses = _per_element(m, n, "m")
    ks = _per_element(k, n_springs[bc], "k")
    ds = _per_element(d, n_springs[bc], "d")

    M = sp.diags(masses, format="csr")
    K = np.zeros((n, n))
    D = np.zeros((n, n))
    # each spring couples (left node, right node); node -1 means ground
    if bc == "fixed-free":
        links = [(-1, 0)] + [(i, i + 1) for i in range(n - 1)]
    elif bc == "free-free":
        links = [(i, i + 1) for i in range(n - 1)]
    else:
        links = [(-1, 0)] + [(i, i + 1) for i in range(n - 1)] + [(n - 1, -1)]
    for (a, b), ke, de in zip(links, ks, ds):
        for mat, val in ((K, ke), (D, de)):
            if a >= 0:
                mat[a, a] += val
            if b >= 0:
                mat[b, b] += val
            if a >= 0 and b >= 0:
                mat[a, b] -= val
                mat[b, a] -= val

    ports = tuple(int(p) for p in ports)
    return SecondOrderSystem(
        M=M,
        D=sp.csr_matrix(D),
        K=sp.csr_matrix(K),
        input_map=tuple((p, 1.0) for p in ports),
        output_map=tuple((p, 1.0, DISPLACEMENT) for p in ports),
        input_labels=tuple(f"p{p}" for p in ports),
        output_labels=tuple(f"p{p}" for p in ports),
        name=name,
    )


@dataclass(frozen=True)
class StageModelConfig:
    """Parameters of the two-stage bench.

    Index 0 is the grounded rail, index 1 the free carriage.  Anchors are
    spring positions: ``anchors_carriage`` in the carriage frame (fixed to
    the carriage), ``anchors_rail_base`` on the rail at zero displacement.
    ``n_v`` virtual interconnection points per interface side are spread
    evenly over each stage span and must land on discretization nodes.
    """

    n_elements: tuple = (24, 24)
    lengths: tuple = (1.2, 0.96)
    stiffness_scale: float = 1.0
    mass_scale: float = 1.0
    spring_stiffness: float = 2.0e6
    anchors_carriage: tuple = (0.16, 0.48, 0.8)
    anchors_rail_base: tuple = (0.35, 0.6, 0.85)
    n_v: int = 5
    zeta: float = 0.03
    external_input_node: int = 3
    external_output_node: int = 21
    port_set: str = "full"

    def __post_init__(self):
        if self.port_set not in ("full", "interface"):
            raise ValidationError("port_set must be 'full' or 'interface'")
        if len(self.n_elements) != 2 or any(n < 2 for n in self.n_elements):
            raise ValidationError("n_elements must be two counts >= 2")
        if any(l <= 0 for l in self.lengths):
            raise ValidationError("stage lengths must be positive")
        if self.stiffness_scale <= 0 or self.mass_scale <= 0:
            raise ValidationError("physical scales must be positive")
        if self.spring_stiffness <= 0:
            raise ValidationError("spring stiffness must be positive")
        if self.n_v < 2:
            raise ValidationError("n_v must be at least 2")
        for a in self.anchors_carriage:
            if not 0 <= a <= self.lengths[1]:
                raise ValidationError(f"carriage anchor {a} outside stage span")
        for a in self.anchors_rail_base:
            if not 0 <= a <= self.lengths[0]:
                raise ValidationError(f"rail anchor {a} outside stage span")
        if len(self.anchors_carriage) != len(self.anchors_rail_base):
            raise ValidationError("anchor lists must pair up one spring each")


@dataclass(frozen=True)
class TwoStageBench:
    """Generated bench: subsystems, interface, external ports, static grid."""

    systems: tuple
    names: tuple
    interfaces: tuple
    external_inputs: tuple
    external_outputs: tuple
    port_nodes: dict
    static_ports: dict
    config: StageModelConfig

    def system(self, name):
        return self.systems[self.names.index(name)]


def _stage_system(n_nodes, length, ea, rho, zeta, grounded, name, port_nodes):
    h = length / (n_nodes - 1)
    k_e = ea / h
    mass = rho * h
    sys0 = make_chain(
        n_nodes,
        m=mass,
        k=k_e,
        bc="fixed-fixed" if grounded else "free-free",
        ports=port_nodes,
        name=name,
    )
    D = build_modal_damping(sys0.M, sys0.K, zeta)
    return SecondOrderSystem(
        M=sys0.M,
        D=D,
        K=sys0.K,
        input_map=sys0.input_map,
        output_map=sys0.output_map,
        input_labels=sys0.input_labels,
        output_labels=sys0.output_labels,
        name=name,
    )


def _grid_nodes(n_nodes, n_v, stage):
    if (n_nodes - 1) % (n_v - 1) != 0:
        raise ValidationError(
            f"n_v={n_v} does not divide the {stage} discretization "
            f"({n_nodes - 1} elements); virtual points must sit on nodes"
        )
    step = (n_nodes - 1) // (n_v - 1)
    return tuple(range(0, n_nodes, step))


def _points_for(nodes, port_nodes, h):
    local = {node: i for i, node in enumerate(port_nodes)}
    return tuple(
        VirtualPoint(coord=node * h, input_index=local[node],
                     output_index=local[node])
        for node in nodes
    )


def make_two_stage_bench(cfg=StageModelConfig()):
    """Rail + carriage bench coupled by springs across one translating interface.

    Every discretization node of both stages carries a collocated port, so
    any spring position landing on a node admits the exact static coupling
    as ground truth while the virtual grids stay restricted to ``n_v``
    points.  The carriage is side j (springs fixed to it); spring positions
    on the rail shift with the operating-point displacement.
    """
    n_rail = cfg.n_elements[0] + 1
    n_car = cfg.n_elements[1] + 1
    h_rail = cfg.lengths[0] / (n_rail - 1)
    h_car = cfg.lengths[1] / (n_car - 1)
    if not 0 <= cfg.external_input_node < n_car:
        raise ValidationError("external input node outside the carriage")
    if not 0 <= cfg.external_output_node < n_car:
        raise ValidationError("external output node outside the carriage")
    for a in cfg.anchors_carriage:
        _require_on_node(a, h_car, "carriage anchor")
    for a in cfg.anchors_rail_base:
        _require_on_node(a, h_rail, "rail anchor")

    grid_rail = _grid_nodes(n_rail, cfg.n_v, "rail")
    grid_car = _grid_nodes(n_car, cfg.n_v, "carriage")
    if cfg.port_set == "full":
        ports_rail = tuple(range(n_rail))
        ports_car = tuple(range(n_car))
    else:
        ports_rail = grid_rail
        ports_car = tuple(sorted(set(grid_car) | {cfg.external_input_node,
                                                  cfg.external_output_node}))

    ea = cfg.stiffness_scale * _BASE_EA
    rho = cfg.mass_scale * _BASE_RHO
    rail = _stage_system(n_rail, cfg.lengths[0], ea, rho, cfg.zeta,
                         grounded=True, name="rail", port_nodes=ports_rail)
    carriage = _stage_system(n_car, cfg.lengths[1], ea, rho, cfg.zeta,
                             grounded=False, name="carriage",
                             port_nodes=ports_car)

    springs = tuple(
        SpringSpec(
            stiffness=cfg.spring_stiffness,
            anchor_j=aj,
            anchor_ell_base=al,
        )
        for aj, al in zip(cfg.anchors_carriage, cfg.anchors_rail_base)
    )
    interface = InterfaceSpec(
        id="rail0",
        side_j=InterfaceSide(
            "carriage",
            _points_for(grid_car, ports_car, h_car),
            static_points=_points_for(ports_car, ports_car, h_car),
        ),
        side_ell=InterfaceSide(
            "rail",
            _points_for(grid_rail, ports_rail, h_rail),
            static_points=_points_for(ports_rail, ports_rail, h_rail),
        ),
        springs=springs,
        axis="y",
        slide_on="ell",
    )

    car_local = {node: i for i, node in enumerate(ports_car)}
    return TwoStageBench(
        systems=(carriage, rail),
        names=("carriage", "rail"),
        interfaces=(interface,),
        external_inputs=(("carriage", car_local[cfg.external_input_node]),),
        external_outputs=(("carriage", car_local[cfg.external_output_node]),),
        port_nodes={"rail": ports_rail, "carriage": ports_car},
        static_ports={
            "rail": tuple(i * h_rail for i in ports_rail),
            "carriage": tuple(i * h_car for i in ports_car),
        },
        config=cfg,
    )


def _require_on_node(coord, h, what):
    if abs(coord / h - round(coord / h)) > 1e-9:
        raise ValidationError(
            f"{what} at {coord:g} is not on a discretization node (h = {h:g})"
        )


def make_operating_grid(ranges, counts):
    """Cartesian grid of operating points over per-interface delta ranges.

    ``ranges`` maps interface id to (low, high); ``counts`` to the number of
    samples (1 yields the midpoint).  Points iterate with the last interface
    varying fastest.
    """
    axes = []
    ids = list(ranges)
    for iface in ids:
        lo, hi = ranges[iface]
        n = int(counts[iface]) if not np.isscalar(counts) else int(counts)
        if n < 1:
            raise ValidationError("counts must be >= 1")
        if n == 1:
            axes.append(np.array([(lo + hi) / 2.0]))
        else:
            axes.append(np.linspace(lo, hi, n))
    return [
        OperatingPoint(dict(zip(ids, combo)))
        for combo in itertools.product(*axes)
    ]
