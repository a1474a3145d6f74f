"""P1 finite elements for diffusion on a triangulated 2D domain.

Vertices are ordered so that the ``n`` unknowns (interior and Neumann
vertices) come first and the Dirichlet vertices last.  The semi-discrete
system is

    M dx/dt + S x + S_D gamma = 0

and implicit Euler with step ``dt`` gives ``(M + dt S) x+ = M x + dt u`` with
``u = -S_D gamma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DegenerateTriangle, InvalidParameter, ParseError, PointOutsideDomain, SingularSystem
from .model import LinearSystem

INTERIOR, NEUMANN, DIRICHLET = 0, 1, 2
MARKER_NAMES = {INTERIOR: "interior", NEUMANN: "neumann", DIRICHLET: "dirichlet"}
_MARKER_CODES = {v: k for k, v in MARKER_NAMES.items()}

# L-shaped domain used by the experiments: a 3.1 m x 2.8 m rectangle with a
# 1.0 m x 1.24 m notch removed at the bottom right, 7.44 m^2 in total.  The
# Dirichlet edge is the bottom edge of the remaining leg, y = 0.
LSHAPE_WIDTH = 3.1
LSHAPE_HEIGHT = 2.8
LSHAPE_NOTCH = (1.0, 1.24)


@dataclass(frozen=True, eq=False)
class FemMesh:
    vertices: np.ndarray     # (n_phi, 2)
    triangles: np.ndarray    # (n_T, 3), counter-clockwise
    markers: np.ndarray      # (n_phi,), INTERIOR / NEUMANN / DIRICHLET
    areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        V = np.ascontiguousarray(self.vertices, dtype=float)
        T = np.ascontiguousarray(self.triangles, dtype=np.int64)
        mk = np.ascontiguousarray(self.markers, dtype=np.int8)
        if V.ndim != 2 or V.shape[1] != 2:
            raise InvalidParameter("vertices must be (n, 2)")
        if T.ndim != 2 or T.shape[1] != 3:
            raise InvalidParameter("triangles must be (m, 3)")
        if mk.shape != (V.shape[0],) or not np.isin(mk, list(MARKER_NAMES)).all():
            raise InvalidParameter("one marker per vertex required")
        if T.size and (T.min() < 0 or T.max() >= V.shape[0]):
            raise InvalidParameter("triangle index out of range")
        dirichlet = mk == DIRICHLET
        if dirichlet.any() and not dirichlet[np.argmax(dirichlet):].all():
            raise InvalidParameter("Dirichlet vertices must come after all other vertices")
        areas = _signed_areas(V, T)
        bad = np.flatnonzero(areas <= 1e-14)
        if bad.size:
            raise DegenerateTriangle(f"triangle {bad[0]} has signed area {areas[bad[0]]:.3e}")
        edges = np.sort(T[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if counts.size and counts.max() > 2:
            raise InvalidParameter("an edge is shared by more than two triangles")
        for name, value in (("vertices", V), ("triangles", T), ("markers", mk), ("areas", areas)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_unordered(cls, vertices, triangles, markers):
        """Build a mesh after moving Dirichlet vertices last and orienting triangles CCW."""
        V = np.asarray(vertices, dtype=float)
        T = np.asarray(triangles, dtype=np.int64).copy()
        mk = np.asarray(markers, dtype=np.int8)
        order = np.argsort(mk == DIRICHLET, kind="stable")
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)
        T = inverse[T]
        V, mk = V[order], mk[order]
        flip = _signed_areas(V, T) < 0
        T[flip] = T[flip][:, [0, 2, 1]]
        return cls(V, T, mk)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_free(self) -> int:
        """Number of unknowns (non-Dirichlet vertices)."""
        return int(np.count_nonzero(self.markers != DIRICHLET))

    @property
    def n_dirichlet(self) -> int:
        return self.n_vertices - self.n_free

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    def boundary_edges(self):
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        return uniq[counts == 1]

    def same_as(self, other: "FemMesh") -> bool:
        return (np.array_equal(self.vertices, other.vertices) and np.array_equal(self.triangles, other.triangles)
                and np.array_equal(self.markers, other.markers))


def _signed_areas(V, T):
    P = V[T]
    d1 = P[:, 1] - P[:, 0]
    d2 = P[:, 2] - P[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _breaks(points, h=None, counts=None):
    out = [points[0]]
    for s, (a, b) in enumerate(zip(points[:-1], points[1:])):
        k = counts[s] if counts is not None else max(1, math.ceil((b - a) / h - 1e-9))
        out.extend(a + (b - a) * np.arange(1, k + 1) / k)
    out[-1] = points[-1]
    return np.array(out)


def make_lshape_mesh(target_h: float | None = None, dirichlet: bool = True, width=LSHAPE_WIDTH,
                     height=LSHAPE_HEIGHT, notch=LSHAPE_NOTCH, divisions=None) -> FemMesh:
    """Structured triangulation of the L-shaped domain.

    Grid lines pass through every corner of the domain, so the total area is
    exact.  Segment counts come from ``target_h`` or are given directly as
    ``divisions = (x left of the notch, x over the notch, y beside the notch,
    y above it)``; ``(7, 5, 4, 4)`` gives 97 vertices and 152 triangles.
    With ``dirichlet=False`` the whole boundary is zero-flux.
    """
    if divisions is not None:
        divisions = tuple(int(k) for k in divisions)
        if len(divisions) != 4 or min(divisions) < 1:
            raise InvalidParameter(f"divisions must be four positive counts, got {divisions}")
    elif target_h is None or not (target_h > 0 and math.isfinite(target_h)):
        raise InvalidParameter(f"target_h must be positive, got {target_h}")
    nw, nh = notch
    if not (0 < nw < width and 0 < nh < height):
        raise InvalidParameter("notch must fit inside the rectangle")
    xcut = width - nw
    xs = _breaks([0.0, xcut, width], target_h, None if divisions is None else divisions[:2])
    ys = _breaks([0.0, nh, height], target_h, None if divisions is None else divisions[2:])
    ix_cut = int(np.argmin(np.abs(xs - xcut)))
    iy_cut = int(np.argmin(np.abs(ys - nh)))

    def in_notch(i, j):   # strictly inside the removed block
        return i > ix_cut and j < iy_cut

    ids = -np.ones((xs.size, ys.size), dtype=np.int64)
    verts = []
    for j in range(ys.size):
        for i in range(xs.size):
            if not in_notch(i, j):
                ids[i, j] = len(verts)
                verts.append((xs[i], ys[j]))
    tris = []
    for j in range(ys.size - 1):
        for i in range(xs.size - 1):
            if i >= ix_cut and j < iy_cut:
                continue
            a, b, c, d = ids[i, j], ids[i + 1, j], ids[i + 1, j + 1], ids[i, j + 1]
            tris.append((a, b, c))
            tris.append((a, c, d))
    V = np.array(verts)
    T = np.array(tris, dtype=np.int64)
    markers = np.full(V.shape[0], INTERIOR, dtype=np.int8)
    bnd = np.unique(_boundary_edges(T))
    markers[bnd] = NEUMANN
    if dirichlet:
        on_ab = (np.abs(V[:, 1]) < 1e-12) & (V[:, 0] <= xcut + 1e-12)
        markers[on_ab] = DIRICHLET
    return FemMesh.from_unordered(V, T, markers)


def _boundary_edges(T):
    edges = np.sort(T[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return uniq[counts == 1]


# --------------------------------------------------------------------------
# assembly


def element_matrices(points, diffusivity: float = 1.0):
    """Exact P1 mass and stiffness matrices of one triangle given as (3, 2)."""
    p = np.asarray(points, dtype=float)
    area = _signed_areas(p, np.array([[0, 1, 2]]))[0]
    if area <= 1e-14:
        raise DegenerateTriangle(f"signed area {area:.3e}")
    grads = _basis_gradients(p[None])[0]
    mass = area / 12.0 * (np.ones((3, 3)) + np.eye(3))
    stiff = diffusivity * area * grads @ grads.T
    return mass, stiff


def _basis_gradients(P):
    """Gradients of the three barycentric basis functions, (m, 3, 2)."""
    x, y = P[..., 0], P[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (y[:, 1] - y[:, 0]) * (x[:, 2] - x[:, 0])
    g = np.empty(P.shape)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        g[:, i, 0] = (y[:, j] - y[:, k]) / det
        g[:, i, 1] = (x[:, k] - x[:, j]) / det
    return g


@dataclass(frozen=True, eq=False)
class AssembledSystem:
    mesh: FemMesh
    mass: sp.csr_matrix                 # n x n
    stiffness: sp.csr_matrix            # n x n
    dirichlet_coupling: sp.csr_matrix   # n x n_D
    gamma: np.ndarray                   # n_D
    diffusivity: float
    mass_full: sp.csr_matrix
    stiffness_full: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.mass.shape[0]

    @property
    def input(self) -> np.ndarray:
        """Constant input ``u = -S_D gamma``."""
        return -(self.dirichlet_coupling @ self.gamma)


def assemble(mesh: FemMesh, diffusivity: float, dirichlet_value=0.0) -> AssembledSystem:
    """Mass/stiffness assembly; the Neumann boundary integral vanishes."""
    if not diffusivity > 0:
        raise InvalidParameter("diffusivity must be positive")
    P = mesh.vertices[mesh.triangles]
    grads = _basis_gradients(P)
    area = mesh.areas
    Ke = diffusivity * area[:, None, None] * (grads @ grads.transpose(0, 2, 1))
    Me = area[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    nphi = mesh.n_vertices
    Mf = sp.coo_matrix((Me.ravel(), (rows, cols)), shape=(nphi, nphi)).tocsr()
    Sf = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(nphi, nphi)).tocsr()
    n = mesh.n_free
    gamma = np.broadcast_to(np.asarray(dirichlet_value, dtype=float), (nphi - n,)).copy()
    return AssembledSystem(mesh, Mf[:n, :n].tocsr(), Sf[:n, :n].tocsr(), Sf[:n, n:].tocsr(), gamma,
                           float(diffusivity), Mf, Sf)


class DiscreteModel:
    """Implicit-Euler stepping through a cached factorization of ``M + dt S``.

    Algebraically ``x+ = A x + B u`` with ``A = (I + dt M^-1 S)^-1`` and
    ``B = (I + dt M^-1 S)^-1 M^-1 dt``, without ever forming the inverses.
    """

    def __init__(self, assembled: AssembledSystem, dt: float):
        if not dt > 0:
            raise InvalidParameter("dt must be positive")
        self.assembled = assembled
        self.dt = float(dt)
        K = (assembled.mass + self.dt * assembled.stiffness).tocsc()
        try:
            self._lu = splu(K)
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from None
        self.input = assembled.input
        self._forcing = self.dt * self.input

    @property
    def n(self) -> int:
        return self.assembled.n

    def step(self, x):
        return self._lu.solve(self.assembled.mass @ x + self._forcing)

    def solve(self, rhs):
        """Apply ``(M + dt S)^-1``."""
        return self._lu.solve(np.asarray(rhs, dtype=float))

    def transition_matrix(self) -> np.ndarray:
        return self._lu.solve(self.assembled.mass.toarray())

    def input_matrix(self) -> np.ndarray:
        return self._lu.solve(self.dt * np.eye(self.n))

    def linear_system(self, prior_mean, prior_information, process_information, process_covariance=None):
        """Dense :class:`LinearSystem` (A, B) for the estimators; the input is :attr:`input`."""
        n = self.n
        return LinearSystem(self.transition_matrix(), self.input_matrix(),
                            np.broadcast_to(np.asarray(prior_mean, float), (n,)),
                            _as_matrix(prior_information, n), _as_matrix(process_information, n),
                            process_covariance)


def discretize(assembled: AssembledSystem, dt: float) -> DiscreteModel:
    return DiscreteModel(assembled, dt)


def _as_matrix(value, n):
    value = np.asarray(value, dtype=float)
    return value * np.eye(n) if value.ndim == 0 else value


# --------------------------------------------------------------------------
# point location and interpolation


@dataclass
class InterpRow:
    C: np.ndarray        # basis values at the free vertices, (n,)
    D: np.ndarray        # basis values at the Dirichlet vertices, (n_D,)
    triangle: int


def _barycentric_search(mesh: FemMesh, pts, tol):
    """First containing triangle per point (-1 if none) and its weights."""
    P = mesh.vertices[mesh.triangles]
    p0 = P[:, 0]
    d1 = P[:, 1] - p0
    d2 = P[:, 2] - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    tri = np.full(pts.shape[0], -1, dtype=np.int64)
    bary = np.zeros((pts.shape[0], 3))
    chunk = max(1, 2_000_000 // max(1, mesh.n_triangles))
    for s in range(0, pts.shape[0], chunk):
        q = pts[s:s + chunk]
        dx = q[:, None, 0] - p0[None, :, 0]
        dy = q[:, None, 1] - p0[None, :, 1]
        l1 = (dx * d2[:, 1] - dy * d2[:, 0]) / det
        l2 = (d1[:, 0] * dy - d1[:, 1] * dx) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
        found = inside.any(axis=1)
        t = np.argmax(inside, axis=1)
        r = np.arange(q.shape[0])
        w = np.clip(np.stack([l0[r, t], l1[r, t], l2[r, t]], axis=1), 0.0, None)
        tri[s:s + chunk] = np.where(found, t, -1)
        bary[s:s + chunk] = w / w.sum(axis=1, keepdims=True)
    return tri, bary


def locate(mesh: FemMesh, points, tol: float = 1e-12):
    """Containing triangle (lowest index on ties) and barycentric weights."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri, bary = _barycentric_search(mesh, pts, tol)
    if np.any(tri < 0):
        bad = pts[np.argmax(tri < 0)]
        raise PointOutsideDomain(f"point ({bad[0]:.6g}, {bad[1]:.6g}) is outside the mesh")
    return tri, bary


def interp_matrices(mesh: FemMesh, points):
    """Sparse rows ``C`` (P x n) and ``D`` (P x n_D) with ``c(p) = C x + D gamma``."""
    tri, bary = locate(mesh, points)
    cols = mesh.triangles[tri]
    rows = np.repeat(np.arange(tri.size), 3)
    W = sp.coo_matrix((bary.ravel(), (rows, cols.ravel())), shape=(tri.size, mesh.n_vertices)).tocsr()
    n = mesh.n_free
    return W[:, :n].tocsr(), W[:, n:].tocsr()


def interp_row(mesh: FemMesh, point) -> InterpRow:
    tri, _ = locate(mesh, point)
    C, D = interp_matrices(mesh, point)
    return InterpRow(C.toarray()[0], D.toarray()[0], int(tri[0]))


def contains(mesh: FemMesh, points, tol: float = 1e-12) -> np.ndarray:
    """Boolean mask of points lying in some triangle."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return _barycentric_search(mesh, pts, tol)[0] >= 0


# --------------------------------------------------------------------------
# mesh files
#
#   vertices <n_phi> triangles <n_T>
#   <xi> <eta> <interior|neumann|dirichlet>      (n_phi lines)
#   <i> <j> <k>                                  (n_T lines, 0-based)


def write_mesh(mesh: FemMesh, path) -> None:
    lines = [f"vertices {mesh.n_vertices} triangles {mesh.n_triangles}"]
    lines += [f"{x!r} {y!r} {MARKER_NAMES[int(m)]}" for (x, y), m in zip(mesh.vertices.tolist(), mesh.markers)]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mesh(path) -> FemMesh:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    body = [(i + 1, ln.split()) for i, ln in enumerate(text) if ln.strip() and not ln.lstrip().startswith("#")]
    if not body:
        raise ParseError("empty mesh file", 1)
    lineno, head = body[0]
    if len(head) != 4 or head[0] != "vertices" or head[2] != "triangles":
        raise ParseError("expected header 'vertices <n> triangles <m>'", lineno)
    try:
        nv, nt = int(head[1]), int(head[3])
    except ValueError:
        raise ParseError("vertex/triangle counts must be integers", lineno) from None
    if len(body) != 1 + nv + nt:
        raise ParseError(f"expected {nv} vertex and {nt} triangle lines, found {len(body) - 1} lines",
                         body[-1][0])
    V = np.empty((nv, 2))
    markers = np.empty(nv, dtype=np.int8)
    for r, (lineno, tok) in enumerate(body[1:1 + nv]):
        if len(tok) != 3:
            raise ParseError("vertex line needs 'xi eta marker'", lineno)
        try:
            V[r] = float(tok[0]), float(tok[1])
        except ValueError:
            raise ParseError(f"bad coordinate in {tok[:2]}", lineno) from None
        if tok[2] not in _MARKER_CODES:
            raise ParseError(f"unknown marker {tok[2]!r}", lineno)
        markers[r] = _MARKER_CODES[tok[2]]
    T = np.empty((nt, 3), dtype=np.int64)
    for r, (lineno, tok) in enumerate(body[1 + nv:]):
        try:
            if len(tok) != 3:
                raise ValueError
            T[r] = [int(t) for t in tok]
        except ValueError:
            raise ParseError("triangle line needs three integer vertex indices", lineno) from None
        if T[r].min() < 0 or T[r].max() >= nv:
            raise ParseError("triangle vertex index out of range", lineno)
    return FemMesh.from_unordered(V, T, markers)
