"""Ground-truth generation: flows, sources, true solves, and datasets.

The steady advection-diffusion model is

    -(1/Pe) lap(u) + v . grad(u) = f   in Omega,   u = g on the boundary,

with a divergence-free velocity v of unit magnitude. Sources are sums of
isotropic Gaussian bumps normalized to unit total mass. Every random choice
flows from the configuration seed through per-sample counter keys, so
datasets are byte-identical across reruns.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fem
from .mesh import (
    DomainSpec,
    Mesh,
    build_mesh,
    default_hallway,
    load_mesh_binary,
    save_mesh_binary,
)
from .sensing import Measurement, SensorSet
from .util import (
    read_f64,
    read_i64,
    rng_from_key,
    write_f64,
    write_i64,
    write_kv_manifest,
    read_kv_manifest,
)


class RejectedConfigurationError(ValueError):
    """Velocity port configuration cannot drive a flow (e.g. no open outlet)."""


@dataclass(frozen=True)
class SourceSpec:
    """Generative parameters of a source field: Gaussian bump mixture."""

    centers: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n,), positive, sums to 1
    width: float

    def __post_init__(self):
        n = self.centers.shape[0]
        if not 1 <= n <= 5:
            raise ValueError(f"source count must be in [1, 5], got {n}")
        if not (self.weights > 0).all() or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        if self.width <= 0:
            raise ValueError("bump width must be positive")


@dataclass(frozen=True)
class VelocityField:
    vectors: np.ndarray  # (n_elements, 2)
    provenance: str  # "uniform" | "potential_flow"
    params: dict
    boundary_flux: np.ndarray  # prescribed normal flux density per boundary segment


@dataclass
class ScenarioConfig:
    domain_kind: str = "disk"
    h: float = 1.0 / 16.0
    radius: float = 1.0
    peclet: float = 10.0
    g_value: float = 0.0
    velocity_kind: str = "uniform"  # uniform | potential_flow
    sigma: float | None = None  # None: 1% of the dataset's dynamic range
    source_width: float | None = None  # None: 0.05 * domain diameter
    n_sources: tuple[int, int] = (1, 5)
    sensors_per_sample: tuple[int, int] = (5, 25)
    size: int = 16
    seed: int = 0
    sample_offset: int = 0  # train/test disjointness by index range

    def domain_spec(self) -> DomainSpec:
        hallway = default_hallway() if self.domain_kind == "hallway" else None
        return DomainSpec(self.domain_kind, self.h, self.radius, hallway, self.peclet)

    def sample_keys(self) -> list[int]:
        return list(range(self.sample_offset, self.sample_offset + self.size))


@dataclass
class DatasetSample:
    index: int
    velocity: VelocityField
    source: SourceSpec
    f: np.ndarray
    u: np.ndarray
    sensors: SensorSet


@dataclass
class Dataset:
    config: ScenarioConfig
    mesh: Mesh
    sigma: float
    samples: list[DatasetSample] = field(default_factory=list)


def default_source_width(mesh: Mesh) -> float:
    return 0.05 * mesh.diameter()


def sample_sources(
    rng: np.random.Generator,
    mesh: Mesh,
    M: "np.ndarray | object" = None,
    width: float | None = None,
    n_range: tuple[int, int] = (1, 5),
) -> tuple[SourceSpec, np.ndarray]:
    """Draw a random bump mixture and rasterize it to mesh nodes.

    The node field is normalized so its M-weighted total mass is exactly 1.
    Centers are rejection-sampled until they land inside the domain.
    """
    if M is None:
        ops = fem.assemble_operators(mesh, np.zeros((mesh.n_elements, 2)), 1.0)
        M = ops.M
    if width is None:
        width = default_source_width(mesh)
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    centers = []
    while len(centers) < n:
        cand = lo + (hi - lo) * rng.uniform(size=2)
        if fem.point_in_domain(mesh, cand):
            centers.append(cand)
    centers = np.array(centers)
    weights = rng.uniform(0.5, 1.5, size=n)
    weights = weights / weights.sum()
    spec = SourceSpec(centers, weights, width)
    f = rasterize_source(mesh, spec, M)
    return spec, f


def rasterize_source(mesh: Mesh, spec: SourceSpec, M) -> np.ndarray:
    """Nodal values of the bump mixture, unit M-weighted mass."""
    d2 = ((mesh.nodes[:, None, :] - spec.centers[None, :, :]) ** 2).sum(axis=2)
    f = (spec.weights[None, :] * np.exp(-0.5 * d2 / spec.width**2)).sum(axis=1)
    mass = float(np.ones(mesh.n_nodes) @ (M @ f))
    if mass <= 0:
        raise ValueError("source rasterized to zero mass; width too small for the mesh")
    return f / mass


def _segment_geometry(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Lengths and outward unit normals of the boundary segments.

    Boundary segments inherit the CCW orientation of their element, so the
    domain lies to the left of a->b and the outward normal is (dy, -dx).
    """
    a = mesh.nodes[mesh.boundary_segments[:, 0]]
    b = mesh.nodes[mesh.boundary_segments[:, 1]]
    d = b - a
    lengths = np.linalg.norm(d, axis=1)
    normals = np.column_stack([d[:, 1], -d[:, 0]]) / lengths[:, None]
    return lengths, normals


def divergence_residual(mesh: Mesh, vel: VelocityField) -> np.ndarray:
    """Weak divergence of the element velocity against every P1 hat function.

    r_i = sum_e |e| v_e . grad(phi_i) - boundary integral of the prescribed
    normal flux against phi_i. Zero (to solver precision) certifies the
    field is discretely divergence-free for the prescribed in/outflow.
    """
    areas, grads = fem.element_geometry(mesh)
    contrib = np.einsum("ed,eid->ei", vel.vectors, grads) * areas[:, None]
    r = np.zeros(mesh.n_nodes)
    np.add.at(r, mesh.elements, contrib)
    lengths, _ = _segment_geometry(mesh)
    edge_mass = vel.boundary_flux * lengths / 2.0
    np.add.at(r, mesh.boundary_segments[:, 0], -edge_mass)
    np.add.at(r, mesh.boundary_segments[:, 1], -edge_mass)
    return r


def make_velocity(
    mesh: Mesh,
    kind: str,
    rng: np.random.Generator,
    open_outlets: list[int] | None = None,
) -> VelocityField:
    """Draw a divergence-free velocity field of the requested provenance.

    uniform: v = (cos a, sin a) with a ~ U[0, 2 pi), |v| = 1 exactly.
    potential_flow: v = grad(phi) with unit influx on the inlets and a
    balancing efflux split over the drawn open outlets, normalized to
    max |v| = 1.
    """
    if kind == "uniform":
        alpha = float(rng.uniform(0.0, 2.0 * np.pi))
        v = np.array([np.cos(alpha), np.sin(alpha)])
        vectors = np.tile(v, (mesh.n_elements, 1))
        _, normals = _segment_geometry(mesh)
        flux = normals @ v
        return VelocityField(vectors, "uniform", {"angle": alpha}, flux)

    if kind != "potential_flow":
        raise ValueError(f"unknown velocity kind {kind!r}")

    tags = np.array(mesh.boundary_tags)
    inlet_names = sorted({t for t in tags if t.startswith("inlet_")})
    outlet_names = sorted({t for t in tags if t.startswith("outlet_")})
    if not inlet_names or not outlet_names:
        raise RejectedConfigurationError("potential_flow needs tagged inlets and outlets")
    if open_outlets is None:
        # uniform over non-empty outlet subsets
        mask_bits = int(rng.integers(1, 2 ** len(outlet_names)))
        open_outlets = [k for k in range(len(outlet_names)) if mask_bits >> k & 1]
    if len(open_outlets) == 0:
        raise RejectedConfigurationError("all outlets closed")

    lengths, _ = _segment_geometry(mesh)
    w = np.zeros(len(tags))
    inlet_mask = np.isin(tags, inlet_names)
    open_names = [outlet_names[k] for k in open_outlets]
    outlet_mask = np.isin(tags, open_names)
    inlet_len = lengths[inlet_mask].sum()
    outlet_len = lengths[outlet_mask].sum()
    w[inlet_mask] = -1.0  # influx: v . n < 0
    w[outlet_mask] = inlet_len / outlet_len

    ops = fem.assemble_operators(mesh, np.zeros((mesh.n_elements, 2)), 1.0)
    rhs = np.zeros(mesh.n_nodes)
    edge_mass = w * lengths / 2.0
    np.add.at(rhs, mesh.boundary_segments[:, 0], edge_mass)
    np.add.at(rhs, mesh.boundary_segments[:, 1], edge_mass)
    # pure Neumann problem: pin the potential at node 0 by row replacement
    # (system is compatible, so the remaining equations stay exact)
    K = ops.L.tolil()
    K.rows[0] = [0]
    K.data[0] = [1.0]
    rhs = rhs.copy()
    rhs[0] = 0.0
    phi = fem.solve_linear(K.tocsr(), rhs)

    _, grads = fem.element_geometry(mesh)
    vectors = np.einsum("eid,ei->ed", grads, phi[mesh.elements])
    scale = float(np.linalg.norm(vectors, axis=1).max())
    vectors = vectors / scale
    w = w / scale
    vel = VelocityField(
        vectors, "potential_flow", {"open_outlets": tuple(open_outlets)}, w
    )
    resid = np.abs(divergence_residual(mesh, vel)).max()
    if resid > 1e-8:
        raise fem.SolverError(f"potential flow divergence residual {resid:.3e}")
    return vel


def solve_true_pde(
    mesh: Mesh,
    velocity: VelocityField,
    peclet: float,
    f: np.ndarray,
    g,
    ops: fem.Operators | None = None,
) -> np.ndarray:
    """Exact forward operator u = G(f): Dirichlet advection-diffusion solve."""
    if ops is None:
        ops = fem.assemble_operators(mesh, velocity.vectors, peclet)
    diam = mesh.element_diameters()
    speed = np.linalg.norm(velocity.vectors, axis=1)
    pe_elem = 0.5 * peclet * (diam * speed).max()
    if pe_elem > 2.0 + 1e-9:
        raise ValueError(f"element Peclet {pe_elem:.2f} exceeds 2; refine the mesh")
    K, rhs = fem.apply_dirichlet(ops.system(peclet), ops.M @ f, mesh, g)
    return fem.solve_linear(K, rhs)


def boundary_outflux(
    mesh: Mesh, ops: fem.Operators, peclet: float, u: np.ndarray, f: np.ndarray
) -> float:
    """Consistent total (diffusive + advective) outflux through the boundary.

    Computed from the unconstrained residual at the solution; balances the
    injected mass 1' M f when the interior equations hold.
    """
    r = ops.L @ u / peclet + ops.A @ u - ops.M @ f
    boundary = mesh.boundary_nodes
    return float((ops.A @ u).sum() - r[boundary].sum())


def sense(
    mesh: Mesh, u: np.ndarray, x, sigma: float, rng: np.random.Generator
) -> float:
    """One noisy point measurement: u(x) plus one N(0, sigma^2) draw."""
    value = fem.evaluate_field(mesh, u, x)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    return value + (float(rng.normal(0.0, sigma)) if sigma > 0 else 0.0)


def _uniform_point_in_domain(mesh: Mesh, rng: np.random.Generator) -> np.ndarray:
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    while True:
        cand = lo + (hi - lo) * rng.uniform(size=2)
        if fem.point_in_domain(mesh, cand):
            return cand


def generate_dataset(config: ScenarioConfig, mesh: Mesh | None = None) -> Dataset:
    """Build the supervised training container for the surrogate.

    Each sample draws a fresh velocity and source mixture, solves the true
    PDE, and synthesizes a noisy sensor set at uniform random locations.
    When ``config.sigma`` is None, the noise level is calibrated to 1% of
    the dynamic range of u across the generated solutions (second pass).
    """
    if mesh is None:
        mesh = build_mesh(config.domain_spec())
    ops0 = fem.assemble_operators(mesh, np.zeros((mesh.n_elements, 2)), config.peclet)
    width = config.source_width or default_source_width(mesh)

    solved = []
    for idx in config.sample_keys():
        vel = make_velocity(mesh, config.velocity_kind, rng_from_key(config.seed, "velocity", idx))
        spec, f = sample_sources(
            rng_from_key(config.seed, "sources", idx), mesh, ops0.M, width, config.n_sources
        )
        try:
            u = solve_true_pde(mesh, vel, config.peclet, f, config.g_value)
        except fem.SolverError as exc:
            raise fem.SolverError(f"sample {idx}: {exc}") from exc
        solved.append((idx, vel, spec, f, u))

    if config.sigma is not None:
        sigma = float(config.sigma)
    else:
        lo = min(float(s[4].min()) for s in solved)
        hi = max(float(s[4].max()) for s in solved)
        sigma = 0.01 * (hi - lo)

    lo_n, hi_n = config.sensors_per_sample
    samples = []
    for idx, vel, spec, f, u in solved:
        rng = rng_from_key(config.seed, "sensors", idx)
        m = int(rng.integers(lo_n, hi_n + 1))
        sensors = SensorSet()
        for s in range(m):
            pos = _uniform_point_in_domain(mesh, rng)
            val = sense(mesh, u, pos, sigma, rng)
            sensors.add(Measurement(float(pos[0]), float(pos[1]), val, robot=s, iteration=idx))
        samples.append(DatasetSample(idx, vel, spec, f, u, sensors))
    return Dataset(config, mesh, sigma, samples)


# ---------------------------------------------------------------------------
# dataset container (manifest + flat little-endian float64 columns)
# ---------------------------------------------------------------------------

_DATASET_FORMAT = "fluxtaxis-dataset-v1"


def _config_entries(config: ScenarioConfig) -> dict[str, object]:
    return {
        "config.domain_kind": config.domain_kind,
        "config.h": repr(config.h),
        "config.radius": repr(config.radius),
        "config.peclet": repr(config.peclet),
        "config.g_value": repr(config.g_value),
        "config.velocity_kind": config.velocity_kind,
        "config.sigma": "auto" if config.sigma is None else repr(config.sigma),
        "config.source_width": (
            "auto" if config.source_width is None else repr(config.source_width)
        ),
        "config.n_sources": f"{config.n_sources[0]} {config.n_sources[1]}",
        "config.sensors_per_sample": (
            f"{config.sensors_per_sample[0]} {config.sensors_per_sample[1]}"
        ),
        "config.size": config.size,
        "config.seed": config.seed,
        "config.sample_offset": config.sample_offset,
    }


def config_from_entries(entries: dict[str, str]) -> ScenarioConfig:
    def pair(key):
        a, b = entries[key].split()
        return (int(a), int(b))

    return ScenarioConfig(
        domain_kind=entries["config.domain_kind"],
        h=float(entries["config.h"]),
        radius=float(entries["config.radius"]),
        peclet=float(entries["config.peclet"]),
        g_value=float(entries["config.g_value"]),
        velocity_kind=entries["config.velocity_kind"],
        sigma=None if entries["config.sigma"] == "auto" else float(entries["config.sigma"]),
        source_width=(
            None
            if entries["config.source_width"] == "auto"
            else float(entries["config.source_width"])
        ),
        n_sources=pair("config.n_sources"),
        sensors_per_sample=pair("config.sensors_per_sample"),
        size=int(entries["config.size"]),
        seed=int(entries["config.seed"]),
        sample_offset=int(entries["config.sample_offset"]),
    )


def save_dataset(ds: Dataset, directory: Path | str) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_mesh_binary(ds.mesh, d / "mesh")

    n = len(ds.samples)
    n_f = ds.mesh.n_nodes
    write_f64(d / "u.f64", np.stack([s.u for s in ds.samples]) if n else np.zeros((0, n_f)))
    write_f64(d / "f.f64", np.stack([s.f for s in ds.samples]) if n else np.zeros((0, n_f)))

    def ragged(chunks, path):
        offsets = np.zeros(len(chunks) + 1, dtype=np.int64)
        np.cumsum([len(c) for c in chunks], out=offsets[1:])
        write_f64(path, np.concatenate(chunks) if chunks else np.zeros(0))
        return offsets

    sx, sy, sd = [], [], []
    for s in ds.samples:
        pos, val = s.sensors.as_arrays()
        sx.append(pos[:, 0])
        sy.append(pos[:, 1])
        sd.append(val)
    offsets = ragged(sx, d / "sensor_x.f64")
    ragged(sy, d / "sensor_y.f64")
    ragged(sd, d / "sensor_d.f64")
    write_i64(d / "sensor_offsets.i64", offsets)

    cx = [s.source.centers[:, 0] for s in ds.samples]
    cy = [s.source.centers[:, 1] for s in ds.samples]
    cw = [s.source.weights for s in ds.samples]
    src_offsets = ragged(cx, d / "source_x.f64")
    ragged(cy, d / "source_y.f64")
    ragged(cw, d / "source_w.f64")
    write_i64(d / "source_offsets.i64", src_offsets)
    write_f64(d / "source_width.f64", np.array([s.source.width for s in ds.samples]))

    kind = ds.config.velocity_kind
    if kind == "uniform":
        write_f64(d / "velocity_params.f64", np.array([s.velocity.params["angle"] for s in ds.samples]))
        vel_cols = 1
    else:
        n_out = len({t for t in ds.mesh.boundary_tags if t.startswith("outlet_")})
        flags = np.zeros((n, n_out))
        for i, s in enumerate(ds.samples):
            for k in s.velocity.params["open_outlets"]:
                flags[i, k] = 1.0
        write_f64(d / "velocity_params.f64", flags)
        vel_cols = n_out

    entries = _config_entries(ds.config)
    entries.update(
        {
            "format": _DATASET_FORMAT,
            "endianness": "little",
            "samples": n,
            "nodes": n_f,
            "sigma": repr(ds.sigma),
            "velocity_columns": vel_cols,
            "sample_keys": " ".join(str(s.index) for s in ds.samples),
        }
    )
    write_kv_manifest(d / "manifest.txt", entries)


def load_dataset(directory: Path | str) -> Dataset:
    d = Path(directory)
    entries = read_kv_manifest(d / "manifest.txt")
    if entries.get("format") != _DATASET_FORMAT:
        raise ValueError(f"{directory}: not a {_DATASET_FORMAT} container")
    config = config_from_entries(entries)
    mesh = load_mesh_binary(d / "mesh")
    n = int(entries["samples"])
    n_f = int(entries["nodes"])
    sigma = float(entries["sigma"])
    keys = [int(k) for k in entries["sample_keys"].split()] if n else []

    u = read_f64(d / "u.f64", (n, n_f))
    f = read_f64(d / "f.f64", (n, n_f))
    s_off = read_i64(d / "sensor_offsets.i64")
    sx = read_f64(d / "sensor_x.f64")
    sy = read_f64(d / "sensor_y.f64")
    sd = read_f64(d / "sensor_d.f64")
    c_off = read_i64(d / "source_offsets.i64")
    cx = read_f64(d / "source_x.f64")
    cy = read_f64(d / "source_y.f64")
    cw = read_f64(d / "source_w.f64")
    widths = read_f64(d / "source_width.f64")
    vel_cols = int(entries["velocity_columns"])
    vp = read_f64(d / "velocity_params.f64", (n, vel_cols))

    samples = []
    for i in range(n):
        idx = keys[i]
        a, b = s_off[i], s_off[i + 1]
        sensors = SensorSet(
            Measurement(float(sx[j]), float(sy[j]), float(sd[j]), robot=j - a, iteration=idx)
            for j in range(a, b)
        )
        ca, cb = c_off[i], c_off[i + 1]
        spec = SourceSpec(
            np.column_stack([cx[ca:cb], cy[ca:cb]]), cw[ca:cb].copy(), float(widths[i])
        )
        if config.velocity_kind == "uniform":
            angle = float(vp[i, 0])
            vel = make_velocity(mesh, "uniform", _FixedAngle(angle))
        else:
            open_outlets = [k for k in range(vel_cols) if vp[i, k] > 0.5]
            vel = make_velocity(mesh, "potential_flow", rng_from_key(0), open_outlets)
        samples.append(DatasetSample(idx, vel, spec, f[i], u[i], sensors))
    return Dataset(config, mesh, sigma, samples)


class _FixedAngle:
    """Minimal generator stand-in that replays a stored uniform angle."""

    def __init__(self, angle: float):
        self._angle = angle

    def uniform(self, lo, hi):
        return self._angle


# ---------------------------------------------------------------------------
# live instances for active-sensing episodes
# ---------------------------------------------------------------------------


@dataclass
class ScenarioInstance:
    """One concrete ground truth an episode runs against."""

    mesh: Mesh
    ops: fem.Operators
    velocity: VelocityField
    source: SourceSpec
    f_true: np.ndarray
    u_true: np.ndarray
    g_value: float
    sigma: float


def make_instance(
    config: ScenarioConfig, seed: int, sigma: float, mesh: Mesh | None = None
) -> ScenarioInstance:
    """Fresh ground truth drawn from the scenario configuration.

    ``sigma`` must be concrete here (episodes cannot calibrate it); pass the
    value stored with the training dataset or checkpoint.
    """
    if mesh is None:
        mesh = build_mesh(config.domain_spec())
    vel = make_velocity(mesh, config.velocity_kind, rng_from_key(seed, "instance-velocity"))
    ops = fem.assemble_operators(mesh, vel.vectors, config.peclet)
    width = config.source_width or default_source_width(mesh)
    spec, f = sample_sources(
        rng_from_key(seed, "instance-sources"), mesh, ops.M, width, config.n_sources
    )
    u = solve_true_pde(mesh, vel, config.peclet, f, config.g_value, ops)
    return ScenarioInstance(mesh, ops, vel, spec, f, u, config.g_value, sigma)
