"""Skeleton topology, bone-length factor graph and its Levenberg-Marquardt solver."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from edgepose.errors import EmptyGraph, NonMonotoneTimestamp
from edgepose.geometry import Gaussian3D

DEFAULT_BONE_SIGMA = 0.05
PROCESS_NOISE = 0.01  # m^2/s
VELOCITY_SMOOTHING = 0.5
INFO_JITTER = 1e-9
NORM_FLOOR = 1e-9

JOINT_CLASSES = ("hips", "knees", "ankles", "shoulders", "elbows", "wrists")
_CLASS_KEYS = {"hip": "hips", "knee": "knees", "ankle": "ankles", "shoulder": "shoulders", "elbow": "elbows", "wrist": "wrists"}


def _joint_class(name: str) -> str:
    lowered = name.lower()
    if lowered in ("pelvis", "root"):
        return "other"
    for key, cls in _CLASS_KEYS.items():
        if key in lowered:
            return cls
    return "other"


@dataclass
class SkeletonTopology:
    joint_names: list[str]
    bones: list[tuple[int, int]]
    bone_lengths: np.ndarray
    bone_sigmas: np.ndarray

    def __post_init__(self):
        J = len(self.joint_names)
        self.bones = [(int(p), int(c)) for p, c in self.bones]
        self.bone_lengths = np.asarray(self.bone_lengths, dtype=np.float64)
        self.bone_sigmas = np.asarray(self.bone_sigmas, dtype=np.float64)
        if len(set(self.joint_names)) != J:
            raise ValueError("joint names must be unique")
        if len(self.bones) != J - 1:
            raise ValueError(f"a tree over {J} joints needs {J - 1} bones, got {len(self.bones)}")
        if self.bone_lengths.shape != (J - 1,) or self.bone_sigmas.shape != (J - 1,):
            raise ValueError("one length and one sigma per bone")
        if np.any(self.bone_lengths <= 0) or np.any(self.bone_sigmas <= 0):
            raise ValueError("bone lengths and sigmas must be positive")
        # union-find: J-1 edges without a cycle span all joints
        parent = list(range(J))

        def root(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for p, c in self.bones:
            if not (0 <= p < J and 0 <= c < J) or p == c:
                raise ValueError(f"bone ({p}, {c}) references an invalid joint")
            rp, rc = root(p), root(c)
            if rp == rc:
                raise ValueError("bones contain a cycle")
            parent[rp] = rc
        self.joint_classes = {name: [] for name in JOINT_CLASSES + ("other",)}
        for j, name in enumerate(self.joint_names):
            self.joint_classes[_joint_class(name)].append(j)

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def class_of(self, joint: int) -> str:
        return _joint_class(self.joint_names[joint])

    def bone_name(self, b: int) -> str:
        p, c = self.bones[b]
        return f"{self.joint_names[p]}-{self.joint_names[c]}"

    @property
    def root(self) -> int:
        return self.index("pelvis") if "pelvis" in self.joint_names else 0

    @classmethod
    def from_dict(cls, doc: dict) -> "SkeletonTopology":
        if set(doc) != {"joints", "bones"}:
            raise ValueError("topology document needs exactly the keys 'joints' and 'bones'")
        names = [str(n) for n in doc["joints"]]
        bones, lengths, sigmas = [], [], []
        for entry in doc["bones"]:
            if len(entry) not in (3, 4):
                raise ValueError("bone entries are [parent, child, length] or [parent, child, length, sigma]")
            ends = [names.index(e) if isinstance(e, str) else int(e) for e in entry[:2]]
            bones.append(tuple(ends))
            lengths.append(float(entry[2]))
            sigmas.append(float(entry[3]) if len(entry) == 4 else DEFAULT_BONE_SIGMA)
        return cls(names, bones, np.array(lengths), np.array(sigmas))

    def to_dict(self) -> dict:
        return {
            "joints": list(self.joint_names),
            "bones": [
                [self.joint_names[p], self.joint_names[c], float(l), float(s)]
                for (p, c), l, s in zip(self.bones, self.bone_lengths, self.bone_sigmas)
            ],
        }

    @classmethod
    def load(cls, path) -> "SkeletonTopology":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "SkeletonTopology":
        text = resources.files("edgepose").joinpath("data/topology_default.json").read_text()
        return cls.from_dict(json.loads(text))


@dataclass
class Skeleton3D:
    person_id: int
    timestamp_us: int
    means: np.ndarray
    covs: np.ndarray
    valid: np.ndarray
    velocity: np.ndarray = None
    velocity_valid: np.ndarray = None

    def __post_init__(self):
        J = len(self.valid)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.velocity is None:
            self.velocity = np.zeros((J, 3))
        if self.velocity_valid is None:
            self.velocity_valid = np.zeros(J, dtype=bool)

    @property
    def n_joints(self) -> int:
        return len(self.valid)

    def joint(self, j: int) -> Gaussian3D:
        return Gaussian3D(self.means[j].copy(), self.covs[j].copy())

    def copy(self) -> "Skeleton3D":
        return Skeleton3D(
            self.person_id,
            self.timestamp_us,
            self.means.copy(),
            self.covs.copy(),
            self.valid.copy(),
            self.velocity.copy(),
            self.velocity_valid.copy(),
        )


@dataclass
class FactorGraph:
    joints: np.ndarray  # joint index of each variable
    unary_mean: np.ndarray  # (V, 3)
    unary_cov: np.ndarray  # (V, 3, 3)
    unary_whiten: np.ndarray  # (V, 3, 3), W^T W = jittered inverse covariance
    pair_vars: np.ndarray  # (E, 2) variable indices
    pair_length: np.ndarray
    pair_sigma: np.ndarray

    @property
    def n_vars(self) -> int:
        return len(self.joints)

    @property
    def n_unary(self) -> int:
        return len(self.joints)

    @property
    def n_pairwise(self) -> int:
        return len(self.pair_length)

    @property
    def unary_info(self) -> np.ndarray:
        return np.einsum("vki,vkj->vij", self.unary_whiten, self.unary_whiten)


def _whitening(cov: np.ndarray) -> np.ndarray:
    lam, V = np.linalg.eigh(0.5 * (cov + cov.T))
    return (V / np.sqrt(np.maximum(lam, 0.0) + INFO_JITTER)).T


def build_graph(means, covs, valid, topology: SkeletonTopology) -> FactorGraph:
    valid = np.asarray(valid, dtype=bool)
    joints = np.flatnonzero(valid)
    if joints.size == 0:
        raise EmptyGraph("no valid joint to optimise")
    var_of = {int(j): v for v, j in enumerate(joints)}
    pairs, lengths, sigmas = [], [], []
    for b, (p, c) in enumerate(topology.bones):
        if p in var_of and c in var_of:
            pairs.append((var_of[p], var_of[c]))
            lengths.append(topology.bone_lengths[b])
            sigmas.append(topology.bone_sigmas[b])
    covs = np.asarray(covs, dtype=np.float64)[joints]
    return FactorGraph(
        joints=joints,
        unary_mean=np.asarray(means, dtype=np.float64)[joints].copy(),
        unary_cov=covs.copy(),
        unary_whiten=np.stack([_whitening(c) for c in covs]),
        pair_vars=np.array(pairs, dtype=int).reshape(-1, 2),
        pair_length=np.array(lengths, dtype=np.float64),
        pair_sigma=np.array(sigmas, dtype=np.float64),
    )


def pairwise_residual(xj, xk, length: float, sigma: float) -> float:
    return (np.linalg.norm(np.asarray(xj) - np.asarray(xk)) - length) / sigma


def pairwise_jacobian(xj, xk, length: float, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the bone residual w.r.t. both endpoints."""
    d = np.asarray(xj, dtype=np.float64) - np.asarray(xk, dtype=np.float64)
    g = d / (max(np.linalg.norm(d), NORM_FLOOR) * sigma)
    return g, -g


def _residuals(graph: FactorGraph, x: np.ndarray) -> np.ndarray:
    r_u = np.einsum("vij,vj->vi", graph.unary_whiten, x - graph.unary_mean).ravel()
    if graph.n_pairwise == 0:
        return r_u
    d = x[graph.pair_vars[:, 0]] - x[graph.pair_vars[:, 1]]
    r_p = (np.linalg.norm(d, axis=1) - graph.pair_length) / graph.pair_sigma
    return np.concatenate([r_u, r_p])


def _jacobian(graph: FactorGraph, x: np.ndarray) -> np.ndarray:
    V, E = graph.n_vars, graph.n_pairwise
    Jac = np.zeros((3 * V + E, 3 * V))
    for v in range(V):
        Jac[3 * v : 3 * v + 3, 3 * v : 3 * v + 3] = graph.unary_whiten[v]
    if E:
        d = x[graph.pair_vars[:, 0]] - x[graph.pair_vars[:, 1]]
        norm = np.maximum(np.linalg.norm(d, axis=1), NORM_FLOOR)
        g = d / (norm * graph.pair_sigma)[:, None]
        for e, (a, b) in enumerate(graph.pair_vars):
            Jac[3 * V + e, 3 * a : 3 * a + 3] = g[e]
            Jac[3 * V + e, 3 * b : 3 * b + 3] = -g[e]
    return Jac


@dataclass
class LMSettings:
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    max_iters: int = 50
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    max_damping: float = 1e12


@dataclass
class OptimizeResult:
    joints: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    cost: float
    iterations: int
    converged: bool
    marginals_ok: bool
    cost_history: list[float] = field(default_factory=list)

    def gaussians(self) -> dict[int, Gaussian3D]:
        return {int(j): Gaussian3D(m, c) for j, m, c in zip(self.joints, self.means, self.covs)}


def graph_cost(graph: FactorGraph, x: np.ndarray) -> float:
    r = _residuals(graph, x)
    return float(r @ r)


def optimize(graph: FactorGraph, init, settings: LMSettings = LMSettings()) -> OptimizeResult:
    """Levenberg-Marquardt on the unary + bone-length least-squares problem.

    ``init`` is indexed by joint (shape (J, 3)); rows for joints that are not
    variables are ignored. The returned covariances are the 3x3 diagonal
    blocks of the inverse Gauss-Newton information at the solution; when that
    matrix cannot be inverted the unary covariances are returned and
    ``marginals_ok`` is False. ``converged`` is False when ``max_iters`` ran out.
    """
    x = np.array(np.asarray(init, dtype=np.float64)[graph.joints], copy=True)
    r = _residuals(graph, x)
    cost = float(r @ r)
    history = [cost]
    lam = settings.initial_damping
    n = 3 * graph.n_vars
    converged = cost < settings.abs_tol
    iterations = 0

    while not converged and iterations < settings.max_iters:
        iterations += 1
        Jac = _jacobian(graph, x)
        H = Jac.T @ Jac
        g = Jac.T @ r
        while True:
            try:
                step = np.linalg.solve(H + lam * np.eye(n), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                x_new = x + step.reshape(-1, 3)
                r_new = _residuals(graph, x_new)
                cost_new = float(r_new @ r_new)
                if cost_new < cost:
                    rel = (cost - cost_new) / cost
                    x, r, cost = x_new, r_new, cost_new
                    history.append(cost)
                    lam *= settings.damping_down
                    converged = rel < settings.rel_tol or cost < settings.abs_tol
                    break
            lam *= settings.damping_up
            if lam > settings.max_damping:
                # no descent direction left at machine precision
                converged = True
                break

    Jac = _jacobian(graph, x)
    H = Jac.T @ Jac
    marginals_ok = True
    try:
        if np.linalg.cond(H) > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned information matrix")
        Hinv = np.linalg.inv(H)
        covs = np.stack([Hinv[3 * v : 3 * v + 3, 3 * v : 3 * v + 3] for v in range(graph.n_vars)])
        covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    except np.linalg.LinAlgError:
        covs = graph.unary_cov.copy()
        marginals_ok = False
    return OptimizeResult(graph.joints.copy(), x, covs, cost, iterations, converged, marginals_ok, history)


def predict(skel: Skeleton3D, dt: float, process_noise: float = PROCESS_NOISE) -> Skeleton3D:
    """Constant-velocity extrapolation by ``dt`` seconds with covariance inflation q*dt*I."""
    if dt < 0:
        raise ValueError("prediction horizon must be non-negative")
    out = skel.copy()
    if dt == 0:
        return out
    out.means = skel.means + skel.velocity * dt
    out.covs = skel.covs + process_noise * dt * np.eye(3)
    out.timestamp_us = skel.timestamp_us + int(round(dt * 1e6))
    return out


def update_velocity(prev: Skeleton3D, curr: Skeleton3D, smoothing: float = VELOCITY_SMOOTHING) -> Skeleton3D:
    """Finite-difference joint velocities, exponentially smoothed.

    A joint valid in both frames gets (curr - prev) / dt; if ``prev`` already
    carried a velocity for it, the new value is mixed in with weight
    ``smoothing``, otherwise the raw difference seeds the filter. Joints not
    valid in both frames get zero velocity.
    """
    if prev.person_id != curr.person_id:
        raise ValueError("velocity update across different persons")
    if curr.timestamp_us <= prev.timestamp_us:
        raise NonMonotoneTimestamp(f"{curr.timestamp_us} does not follow {prev.timestamp_us}")
    dt = (curr.timestamp_us - prev.timestamp_us) * 1e-6
    out = curr.copy()
    both = prev.valid & curr.valid
    raw = (curr.means - prev.means) / dt
    seeded = both & prev.velocity_valid
    vel = np.zeros_like(raw)
    vel[both] = raw[both]
    vel[seeded] = smoothing * raw[seeded] + (1.0 - smoothing) * prev.velocity[seeded]
    out.velocity = vel
    out.velocity_valid = both
    return out
