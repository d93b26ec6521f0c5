"""JSON model manifest: parsing, validation, and runtime model construction.

A manifest names the subsystem matrix files (Matrix Market), declares ports,
interfaces with their virtual grids and springs, the external port
selection, the frequency grid, and the operating points.  ``load_manifest``
validates everything and reports *all* problems at once;
``build_model`` turns a manifest into ready-to-assemble runtime objects.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from . import cache as cache_mod
from .core import (
    DISPLACEMENT,
    VELOCITY,
    SecondOrderSystem,
    build_modal_damping,
    to_descriptor,
)
from .errors import ValidationError
from .interconnect import (
    InterfaceSide,
    InterfaceSpec,
    OperatingPoint,
    SpringSpec,
    VirtualPoint,
    block_collect,
    external_io,
)

SCHEMA_VERSION = 1


class ManifestError(ValidationError):
    """Validation failed; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__(
            "manifest validation failed:\n" + "\n".join(f"- {e}" for e in self.errors)
        )


def read_matrix_file(path):
    """Read a Matrix Market file into CSR (symmetric storage expanded)."""
    mat = scipy.io.mmread(str(path))
    return sp.csr_matrix(mat)


def write_matrix_file(path, mat, symmetry="general", comment=""):
    """Write a matrix in Matrix Market format with round-trip precision."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(mat), comment=comment,
                     precision=17, symmetry=symmetry)


@dataclass(frozen=True)
class ModelManifest:
    """Parsed, validated manifest plus the directory its paths resolve against."""

    spec: dict
    base_dir: Path

    @property
    def name(self):
        return self.spec.get("name", "")

    def subsystem_names(self):
        return [s["name"] for s in self.spec["subsystems"]]

    def to_json_dict(self):
        return json.loads(json.dumps(self.spec))


def _port_defaults(port):
    return {
        "name": port["name"],
        "dof": int(port["dof"]),
        "scale": float(port.get("scale", 1.0)),
        "input": bool(port.get("input", True)),
        "output": port.get("output", DISPLACEMENT),
        "coord": port.get("coord"),
    }


def load_manifest(path):
    """Parse and validate a manifest file; never fails on the first error."""
    path = Path(path)
    errors = []
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError([f"manifest file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ManifestError(
            [f"manifest is not valid JSON (line {exc.lineno}, col {exc.colno}): {exc.msg}"]
        ) from None

    if raw.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        errors.append(f"unsupported schema version {raw.get('schema')!r}")

    subsystems = raw.get("subsystems")
    if not subsystems:
        errors.append("manifest declares no subsystems")
        subsystems = []

    port_index = {}
    seen_names = set()
    for sub in subsystems:
        name = sub.get("name")
        if not name:
            errors.append("subsystem without a name")
            continue
        if name in seen_names:
            errors.append(f"duplicate subsystem name {name!r}")
        seen_names.add(name)
        matrices = sub.get("matrices", {})
        for key in ("M", "K"):
            if key not in matrices:
                errors.append(f"subsystem {name!r}: missing matrix path {key!r}")
            else:
                file = path.parent / matrices[key]
                if not file.exists():
                    errors.append(f"subsystem {name!r}: matrix file not found: {file}")
        if "D" in matrices:
            file = path.parent / matrices["D"]
            if not file.exists():
                errors.append(f"subsystem {name!r}: matrix file not found: {file}")
            if "damping" in sub:
                errors.append(
                    f"subsystem {name!r}: both a D file and a damping recipe given"
                )
        if "damping" in sub:
            recipe = sub["damping"]
            if "modal" not in recipe or "zeta" not in recipe.get("modal", {}):
                errors.append(
                    f"subsystem {name!r}: damping recipe must be {{'modal': {{'zeta': ...}}}}"
                )
        ports = sub.get("ports", [])
        if not ports:
            errors.append(f"subsystem {name!r}: declares no ports")
        local = {}
        for port in ports:
            if "name" not in port or "dof" not in port:
                errors.append(f"subsystem {name!r}: port needs 'name' and 'dof'")
                continue
            p = _port_defaults(port)
            if p["output"] not in (DISPLACEMENT, VELOCITY, False, None):
                errors.append(
                    f"subsystem {name!r}, port {p['name']!r}: bad output kind "
                    f"{p['output']!r}"
                )
            if p["name"] in local:
                errors.append(f"subsystem {name!r}: duplicate port {p['name']!r}")
            local[p["name"]] = p
        port_index[name] = local

    def resolve_port(ref, where):
        if "." not in str(ref):
            errors.append(f"{where}: port reference {ref!r} must be 'subsystem.port'")
            return None
        sub_name, port_name = str(ref).split(".", 1)
        port = port_index.get(sub_name, {}).get(port_name)
        if port is None:
            errors.append(f"{where}: unknown port {ref!r}")
        return port

    interface_ids = []
    for iface in raw.get("interfaces", []):
        iid = iface.get("id")
        if not iid:
            errors.append("interface without an id")
            continue
        if iid in interface_ids:
            errors.append(f"duplicate interface id {iid!r}")
        interface_ids.append(iid)
        if iface.get("slide_on", "ell") not in ("j", "ell"):
            errors.append(f"interface {iid!r}: slide_on must be 'j' or 'ell'")
        for side_key in ("side_j", "side_ell"):
            side = iface.get(side_key)
            if not side or "subsystem" not in side or not side.get("grid"):
                errors.append(f"interface {iid!r}: {side_key} needs a subsystem and a grid")
                continue
            sub_name = side["subsystem"]
            if sub_name not in port_index:
                errors.append(f"interface {iid!r}: unknown subsystem {sub_name!r}")
                continue
            coords = []
            for port_name in side["grid"]:
                port = port_index[sub_name].get(port_name)
                if port is None:
                    errors.append(
                        f"interface {iid!r}: unknown port {sub_name}.{port_name}"
                    )
                    continue
                if port["coord"] is None:
                    errors.append(
                        f"interface {iid!r}: port {sub_name}.{port_name} has no coord"
                    )
                elif not (port["input"] and port["output"]):
                    errors.append(
                        f"interface {iid!r}: port {sub_name}.{port_name} must be an "
                        "input/output pair"
                    )
                else:
                    coords.append(port["coord"])
            if any(b <= a for a, b in zip(coords, coords[1:])):
                errors.append(
                    f"interface {iid!r}: grid coordinates on {sub_name!r} must be "
                    "strictly increasing"
                )
        springs = iface.get("springs", [])
        if not springs:
            errors.append(f"interface {iid!r}: declares no springs")
        for s_idx, spring in enumerate(springs):
            if spring.get("stiffness", 0) <= 0:
                errors.append(
                    f"interface {iid!r}, spring {s_idx}: stiffness must be > 0"
                )
            for key in ("anchor_j", "anchor_ell_base"):
                if key not in spring:
                    errors.append(f"interface {iid!r}, spring {s_idx}: missing {key}")

    external = raw.get("external", {})
    for kind in ("inputs", "outputs"):
        refs = external.get(kind, [])
        if not refs:
            errors.append(f"external.{kind} must list at least one port")
        for ref in refs:
            port = resolve_port(ref, f"external.{kind}")
            if port and kind == "inputs" and not port["input"]:
                errors.append(f"external input {ref!r} is not an input port")
            if port and kind == "outputs" and port["output"] in (False, None):
                errors.append(f"external output {ref!r} is not an output port")

    grid = raw.get("frequency_grid")
    if not grid:
        errors.append("manifest needs a frequency_grid")
    else:
        for key in ("min", "max", "count"):
            if key not in grid:
                errors.append(f"frequency_grid: missing {key!r}")
        if grid.get("min", 0) <= 0 and grid.get("spacing", "log") == "log":
            errors.append("frequency_grid: log spacing needs min > 0")
        if grid.get("spacing", "log") not in ("log", "linear"):
            errors.append(f"frequency_grid: unknown spacing {grid.get('spacing')!r}")

    ops = raw.get("operating_points", {})
    if ops:
        if "points" in ops:
            for i, point in enumerate(ops["points"]):
                if set(point) != set(interface_ids):
                    errors.append(
                        f"operating point {i} must give one delta per interface "
                        f"{interface_ids}"
                    )
        elif "ranges" in ops:
            for iid in ops["ranges"]:
                if iid not in interface_ids:
                    errors.append(f"operating_points.ranges: unknown interface {iid!r}")
            for iid in ops.get("counts", {}):
                if iid not in interface_ids:
                    errors.append(f"operating_points.counts: unknown interface {iid!r}")
        else:
            errors.append("operating_points needs 'points' or 'ranges'/'counts'")
    elif interface_ids:
        errors.append("manifest has interfaces but no operating_points")

    if errors:
        raise ManifestError(errors)
    return ModelManifest(spec=raw, base_dir=path.parent)


def save_manifest(manifest, path):
    path = Path(path)
    path.write_text(json.dumps(manifest.spec, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class RuntimeModel:
    """Manifest materialized into assembly-ready objects."""

    manifest: ModelManifest
    systems: tuple
    names: tuple
    descriptors: tuple
    block: object
    interfaces: tuple
    k_outer: object
    omega: np.ndarray
    op_list: tuple
    digests: tuple
    external_input_labels: tuple
    external_output_labels: tuple


def _build_system(sub, base_dir, errors):
    name = sub["name"]
    matrices = sub["matrices"]
    digest_parts = []
    M = read_matrix_file(base_dir / matrices["M"])
    K = read_matrix_file(base_dir / matrices["K"])
    digest_parts.append(cache_mod.digest_file(base_dir / matrices["M"]))
    digest_parts.append(cache_mod.digest_file(base_dir / matrices["K"]))
    if "D" in matrices:
        D = read_matrix_file(base_dir / matrices["D"])
        digest_parts.append(cache_mod.digest_file(base_dir / matrices["D"]))
    elif "damping" in sub:
        zeta = float(sub["damping"]["modal"]["zeta"])
        D = build_modal_damping(M, K, zeta)
        digest_parts.append(f"modal:{zeta!r}")
    else:
        D = sp.csr_matrix(M.shape)
        digest_parts.append("undamped")

    ports = [_port_defaults(p) for p in sub["ports"]]
    input_map, output_map = [], []
    input_labels, output_labels = [], []
    for p in ports:
        if p["input"]:
            input_map.append((p["dof"], p["scale"]))
            input_labels.append(p["name"])
        if p["output"] not in (False, None):
            output_map.append((p["dof"], p["scale"], p["output"]))
            output_labels.append(p["name"])
    try:
        sys = SecondOrderSystem(
            M=M, D=D, K=K,
            input_map=tuple(input_map), output_map=tuple(output_map),
            input_labels=tuple(input_labels), output_labels=tuple(output_labels),
            name=name,
        )
    except ValidationError as exc:
        errors.append(f"subsystem {name!r}: {exc}")
        return None, None, ports
    digest = cache_mod.digest_bytes(
        *(d.encode() for d in digest_parts),
        repr(sys.input_map).encode(),
        repr(sys.output_map).encode(),
    )
    return sys, digest, ports


def _port_indices(ports):
    u_idx, y_idx = {}, {}
    u, y = 0, 0
    for p in ports:
        if p["input"]:
            u_idx[p["name"]] = u
            u += 1
        if p["output"] not in (False, None):
            y_idx[p["name"]] = y
            y += 1
    return u_idx, y_idx


def frequency_grid(spec):
    if spec.get("spacing", "log") == "log":
        return np.geomspace(spec["min"], spec["max"], int(spec["count"]))
    return np.linspace(spec["min"], spec["max"], int(spec["count"]))


def operating_points(spec, interface_ids):
    if "points" in spec:
        return tuple(OperatingPoint(p) for p in spec["points"])
    ranges = {k: tuple(v) for k, v in spec["ranges"].items()}
    counts = {k: int(v) for k, v in spec.get("counts", {}).items()}
    from .models import make_operating_grid

    full_counts = {k: counts.get(k, 1) for k in ranges}
    return tuple(make_operating_grid(ranges, full_counts))


def build_model(manifest):
    """Materialize systems, interfaces, external maps, grid, and operating points."""
    errors = []
    base = manifest.base_dir
    systems, digests, names = [], [], []
    ports_by_sub = {}
    for sub in manifest.spec["subsystems"]:
        sys, digest, ports = _build_system(sub, base, errors)
        if sys is not None:
            systems.append(sys)
            digests.append(digest)
            names.append(sub["name"])
            ports_by_sub[sub["name"]] = ports
    if errors:
        raise ManifestError(errors)

    descriptors = tuple(to_descriptor(s) for s in systems)
    block = block_collect(descriptors, names)

    interfaces = []
    for iface in manifest.spec.get("interfaces", []):
        sides = {}
        for side_key in ("side_j", "side_ell"):
            side = iface[side_key]
            sub_name = side["subsystem"]
            ports = ports_by_sub[sub_name]
            u_idx, y_idx = _port_indices(ports)
            by_name = {p["name"]: p for p in ports}
            points = tuple(
                VirtualPoint(
                    coord=float(by_name[nm]["coord"]),
                    input_index=u_idx[nm],
                    output_index=y_idx[nm],
                )
                for nm in side["grid"]
            )
            static_names = side.get("static_ports")
            if static_names is None:
                static_candidates = [
                    p for p in ports
                    if p["coord"] is not None and p["input"]
                    and p["output"] not in (False, None)
                ]
                static_candidates.sort(key=lambda p: p["coord"])
                static_points = tuple(
                    VirtualPoint(float(p["coord"]), u_idx[p["name"]], y_idx[p["name"]])
                    for p in static_candidates
                )
            else:
                static_points = tuple(
                    VirtualPoint(
                        coord=float(by_name[nm]["coord"]),
                        input_index=u_idx[nm],
                        output_index=y_idx[nm],
                    )
                    for nm in static_names
                )
            sides[side_key] = InterfaceSide(sub_name, points, static_points)
        interfaces.append(InterfaceSpec(
            id=iface["id"],
            side_j=sides["side_j"],
            side_ell=sides["side_ell"],
            springs=tuple(
                SpringSpec(float(s["stiffness"]), float(s["anchor_j"]),
                           float(s["anchor_ell_base"]))
                for s in iface["springs"]
            ),
            axis=iface.get("axis", "y"),
            slide_on=iface.get("slide_on", "ell"),
        ))

    ext = manifest.spec["external"]

    def to_pairs(refs, which):
        pairs = []
        labels = []
        for ref in refs:
            sub_name, port_name = str(ref).split(".", 1)
            u_idx, y_idx = _port_indices(ports_by_sub[sub_name])
            idx = (u_idx if which == "in" else y_idx)[port_name]
            pairs.append((sub_name, idx))
            labels.append(str(ref))
        return pairs, tuple(labels)

    in_pairs, in_labels = to_pairs(ext["inputs"], "in")
    out_pairs, out_labels = to_pairs(ext["outputs"], "out")
    k_outer = external_io(block, in_pairs, out_pairs)

    omega = frequency_grid(manifest.spec["frequency_grid"])
    ops_spec = manifest.spec.get("operating_points", {})
    interface_ids = [i["id"] for i in manifest.spec.get("interfaces", [])]
    op_list = operating_points(ops_spec, interface_ids) if ops_spec \
        else (OperatingPoint({}),)

    return RuntimeModel(
        manifest=manifest,
        systems=tuple(systems),
        names=tuple(names),
        descriptors=descriptors,
        block=block,
        interfaces=tuple(interfaces),
        k_outer=k_outer,
        omega=omega,
        op_list=op_list,
        digests=tuple(digests),
        external_input_labels=in_labels,
        external_output_labels=out_labels,
    )


def bench_to_manifest_files(bench, out_dir):
    """Write a generated bench as manifest + Matrix Market files.

    The emitted tree is exactly what the ingestion path consumes, so
    generated models round-trip through save/load.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = bench.config
    subsystems = []
    for name in bench.names:
        sys = bench.system(name)
        m_file = f"{name}_M.mtx"
        k_file = f"{name}_K.mtx"
        write_matrix_file(out_dir / m_file, sys.M, symmetry="symmetric")
        write_matrix_file(out_dir / k_file, sys.K, symmetry="symmetric")
        ports = []
        for dof, coord in zip(bench.port_nodes[name], bench.static_ports[name]):
            ports.append({"name": f"n{dof}", "dof": dof, "coord": coord})
        subsystems.append({
            "name": name,
            "matrices": {"M": m_file, "K": k_file},
            "damping": {"modal": {"zeta": cfg.zeta}},
            "ports": ports,
        })

    iface = bench.interfaces[0]

    def grid_names(side, name):
        nodes = bench.port_nodes[name]
        return [f"n{nodes[p.input_index]}" for p in side.points]

    spec_iface = {
        "id": iface.id,
        "axis": iface.axis,
        "slide_on": iface.slide_on,
        "side_j": {
            "subsystem": iface.side_j.subsystem,
            "grid": grid_names(iface.side_j, iface.side_j.subsystem),
        },
        "side_ell": {
            "subsystem": iface.side_ell.subsystem,
            "grid": grid_names(iface.side_ell, iface.side_ell.subsystem),
        },
        "springs": [
            {"stiffness": s.stiffness, "anchor_j": s.anchor_j,
             "anchor_ell_base": s.anchor_ell_base}
            for s in iface.springs
        ],
    }

    spec = {
        "schema": SCHEMA_VERSION,
        "name": "two-stage-bench",
        "subsystems": subsystems,
        "interfaces": [spec_iface],
        "external": {
            "inputs": [
                f"{n}.n{bench.port_nodes[n][i]}" for n, i in bench.external_inputs
            ],
            "outputs": [
                f"{n}.n{bench.port_nodes[n][i]}" for n, i in bench.external_outputs
            ],
        },
        "frequency_grid": {"min": 20.0, "max": 2.0e4, "count": 400,
                           "spacing": "log"},
        "operating_points": {"ranges": {iface.id: [-0.1, 0.1]},
                             "counts": {iface.id: 5}},
    }
    manifest = ModelManifest(spec=spec, base_dir=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return out_dir / "manifest.json"
