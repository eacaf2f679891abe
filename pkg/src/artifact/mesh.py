"""Triangular disk meshes and P1 finite-element assembly."""

import hashlib

import numpy as np
import scipy.sparse as sps
from scipy.spatial import Delaunay


class DiskMesh:
    """Ring-structured Delaunay mesh of the disk of radius ``radius``.

    Nodes sit on concentric rings with near-uniform spacing ``h``; the
    outer ring is uniform in angle starting at angle 0 so boundary
    functions can be transformed with an FFT.
    """

    def __init__(self, radius=1.0, h=0.05):
        self.radius = float(radius)
        self.h = float(h)
        nr = max(2, int(np.ceil(radius / h)))
        nb = max(6, int(round(2 * np.pi * radius / h)))
        nb += nb % 2
        pts = [np.zeros((1, 2))]
        for k in range(1, nr + 1):
            rk = radius * k / nr
            m = max(6, int(round(2 * np.pi * rk / h)))
            # the outer layers share the boundary count so the boundary strip is structured
            if k >= nr - 2 and nr > 4:
                m = nb
            if k == nr:
                m = nb
            phase = ((nr - k) % 2) * np.pi / m
            a = phase + 2 * np.pi * np.arange(m) / m
            pts.append(rk * np.stack([np.cos(a), np.sin(a)], axis=1))
        self.points = np.vstack(pts)
        self.delaunay = Delaunay(self.points)
        tris = self.delaunay.simplices.copy()
        p = self.points
        area = 0.5 * ((p[tris[:, 1], 0] - p[tris[:, 0], 0]) * (p[tris[:, 2], 1] - p[tris[:, 0], 1])
                      - (p[tris[:, 2], 0] - p[tris[:, 0], 0]) * (p[tris[:, 1], 1] - p[tris[:, 0], 1]))
        flip = area < 0
        tris[flip] = tris[flip][:, [0, 2, 1]]
        self.tris = tris
        self.area = np.abs(area)
        nb = m
        self.boundary = np.arange(len(p) - nb, len(p))
        self.boundary_angle = 2 * np.pi * np.arange(nb) / nb
        mask = np.zeros(len(p), dtype=bool)
        mask[self.boundary] = True
        self.is_boundary = mask
        self.interior = np.flatnonzero(~mask)
        e = np.sort(np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
        self.edges = np.unique(e, axis=0)
        self._fem = {}

    @property
    def n(self):
        return len(self.points)

    @property
    def mesh_id(self):
        digest = hashlib.sha1(self.points.tobytes()).hexdigest()[:10]
        return f"disk-R{self.radius:g}-h{self.h:g}-{digest}"

    def grads(self):
        """Gradients of the barycentric basis per triangle, shape (nt, 3, 2)."""
        p = self.points[self.tris]
        d = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        return np.stack([-d[..., 1], d[..., 0]], axis=-1) / (2 * self.area[:, None, None])

    def locate(self, x):
        """Containing triangle and barycentric weights; simplex -1 outside."""
        x = np.asarray(x, dtype=float)
        s = self.delaunay.find_simplex(x)
        T = self.delaunay.transform[s]
        b = np.einsum("nij,nj->ni", T[:, :2], x - T[:, 2])
        bary = np.column_stack([b, 1 - b.sum(axis=1)])
        verts = self.delaunay.simplices[s]
        bary[s < 0] = 0.0
        return s, verts, bary

    def interp_matrix(self, x):
        """Sparse P1 evaluation matrix, zero rows for points off the mesh."""
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        s, verts, bary = self.locate(x)
        rows = np.repeat(np.arange(len(x)), 3)
        return sps.csr_matrix((bary.ravel(), (rows, verts.ravel())), shape=(len(x), self.n))

    def fem(self, metric):
        """Cached P1 data for a metric (see :class:`FEMData`)."""
        key = id(metric)
        if key not in self._fem:
            self._fem[key] = FEMData(self, metric)
        return self._fem[key]


class FEMData:
    """Metric-dependent P1 matrices on a mesh.

    Attributes
    ----------
    K : csr_matrix
        Stiffness matrix of the Laplace-Beltrami operator.
    mass : ndarray
        Lumped mass (vertex share of the Riemannian area).
    Mc : csr_matrix
        Consistent mass matrix.
    w : ndarray
        Edge weights w_e = -K_ij, the discrete Hodge star on 1-cochains.
    bmass : ndarray
        Lumped Riemannian arclength of the boundary nodes.
    D : csr_matrix
        Edge-node incidence, (D f)_e = f_j - f_i for edge (i, j), i < j.
    """

    def __init__(self, mesh, metric):
        self.mesh = mesh
        self.metric = metric
        p, t = mesh.points, mesh.tris
        c = p[t].mean(axis=1)
        G = mesh.grads()
        gi = metric.ginv(c)
        sq = metric.sqrt_det(c)
        loc = np.einsum("tai,tij,tbj->tab", G, gi, G) * (mesh.area * sq)[:, None, None]
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        n = mesh.n
        K = sps.csr_matrix((loc.ravel(), (rows, cols)), shape=(n, n))
        K = 0.5 * (K + K.T)
        self.K = K.tocsr()
        share = np.zeros(n)
        np.add.at(share, t.ravel(), np.repeat(mesh.area / 3, 3))
        self.mass = share * metric.sqrt_det(p)
        mc = (mesh.area * sq / 12)[:, None, None] * (np.ones((3, 3)) + np.eye(3))
        self.Mc = sps.csr_matrix((mc.ravel(), (rows, cols)), shape=(n, n))
        e = mesh.edges
        self.w = -np.asarray(self.K[e[:, 0], e[:, 1]]).ravel()
        ne = len(e)
        self.D = sps.csr_matrix((np.r_[-np.ones(ne), np.ones(ne)],
                                 (np.r_[np.arange(ne), np.arange(ne)], np.r_[e[:, 0], e[:, 1]])),
                                shape=(ne, n))
        b = mesh.boundary
        pb = p[b]
        nxt = np.roll(pb, -1, axis=0)
        mid = 0.5 * (pb + nxt)
        seg = metric.norm(mid, nxt - pb)
        self.bmass = 0.5 * (seg + np.roll(seg, 1))
