"""Ground-truth shape sources: analytic solids and triangle meshes.

Every source casts oriented rays under the same line convention as the
atom geometry (the observer sits at infinity, so the reported hit is the
intersection with the smallest parameter t of any sign). Casting runs in
float64 numpy and is deliberately independent of the torch geometry so the
two act as cross-checks on each other.

Shapes live in normalized space: meshes are translated and scaled so their
minimal enclosing sphere becomes the unit sphere; analytic shapes must be
parameterized to fit inside it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_PARALLEL_EPS = 1e-14


class ShapeError(ValueError):
    """Invalid shape specification or unreadable mesh file."""


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Analytic casters


class AnalyticSphere:
    def __init__(self, radius: float, center=(0.0, 0.0, 0.0)):
        if radius <= 0:
            raise ShapeError("sphere radius must be positive")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)

    def cast(self, origins, dirs):
        oc = origins - self.center
        b = np.einsum("ij,ij->i", dirs, oc)
        delta = b * b - (np.einsum("ij,ij->i", oc, oc) - self.radius ** 2)
        hit = delta >= 0
        t = np.where(hit, -b - np.sqrt(np.maximum(delta, 0.0)), 0.0)
        p = origins + t[:, None] * dirs
        n = np.zeros_like(p)
        n[hit] = (p[hit] - self.center) / self.radius
        p[~hit] = 0.0
        return hit, p, n


class SphereUnion:
    """Union of disjoint spheres; the first entry point from infinity wins."""

    def __init__(self, centers, radii):
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(radii, dtype=np.float64).reshape(-1)
        if np.any(self.radii <= 0):
            raise ShapeError("sphere radii must be positive")

    def cast(self, origins, dirs):
        oc = origins[:, None, :] - self.centers[None, :, :]
        b = np.einsum("ij,ikj->ik", dirs, oc)
        delta = b * b - (np.einsum("ikj,ikj->ik", oc, oc) - self.radii[None, :] ** 2)
        hit_k = delta >= 0
        t_k = np.where(hit_k, -b - np.sqrt(np.maximum(delta, 0.0)), np.inf)
        best = np.argmin(t_k, axis=1)
        rows = np.arange(len(origins))
        hit = hit_k[rows, best]
        t = np.where(hit, t_k[rows, best], 0.0)
        p = origins + t[:, None] * dirs
        n = np.zeros_like(p)
        c = self.centers[best]
        r = self.radii[best]
        n[hit] = (p[hit] - c[hit]) / r[hit, None]
        p[~hit] = 0.0
        return hit, p, n


class AnalyticBox:
    """Axis-aligned box given by half extents, via the slab method."""

    def __init__(self, half_extents):
        self.half = np.asarray(half_extents, dtype=np.float64).reshape(3)
        if np.any(self.half <= 0):
            raise ShapeError("box half extents must be positive")

    def cast(self, origins, dirs):
        safe = np.where(np.abs(dirs) > _PARALLEL_EPS, dirs, _PARALLEL_EPS)
        t1 = (-self.half - origins) / safe
        t2 = (self.half - origins) / safe
        parallel = np.abs(dirs) <= _PARALLEL_EPS
        inside = np.abs(origins) <= self.half
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
        tn = lo.max(axis=1)
        tf = hi.min(axis=1)
        hit = tn <= tf
        axis = np.argmax(lo, axis=1)
        t = np.where(hit, tn, 0.0)
        p = origins + t[:, None] * dirs
        n = np.zeros_like(p)
        rows = np.arange(len(origins))
        n[rows, axis] = -np.sign(dirs[rows, axis])
        n[~hit] = 0.0
        p[~hit] = 0.0
        return hit, p, n


class AnalyticCapsule:
    """Capsule along the z axis: segment half-length plus cap radius."""

    def __init__(self, half_length: float, radius: float):
        if half_length <= 0 or radius <= 0:
            raise ShapeError("capsule dimensions must be positive")
        self.a = float(half_length)
        self.r = float(radius)

    def cast(self, origins, dirs):
        n_rays = len(origins)
        t_best = np.full(n_rays, np.inf)
        n_best = np.zeros((n_rays, 3))

        # Side cylinder, valid while |z| <= a.
        A = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
        B = 2.0 * (origins[:, 0] * dirs[:, 0] + origins[:, 1] * dirs[:, 1])
        C = origins[:, 0] ** 2 + origins[:, 1] ** 2 - self.r ** 2
        ok = A > _PARALLEL_EPS
        disc = B * B - 4.0 * A * C
        ok &= disc >= 0
        t_cyl = np.where(ok, (-B - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * np.where(ok, A, 1.0)), np.inf)
        z = origins[:, 2] + t_cyl * dirs[:, 2]
        ok &= np.abs(z) <= self.a
        upd = ok & (t_cyl < t_best)
        t_best[upd] = t_cyl[upd]
        pxy = origins[upd] + t_cyl[upd, None] * dirs[upd]
        n_best[upd] = np.column_stack([pxy[:, 0], pxy[:, 1], np.zeros(upd.sum())]) / self.r

        # Cap spheres, valid on their outward hemispheres.
        for sign in (1.0, -1.0):
            center = np.array([0.0, 0.0, sign * self.a])
            oc = origins - center
            b = np.einsum("ij,ij->i", dirs, oc)
            delta = b * b - (np.einsum("ij,ij->i", oc, oc) - self.r ** 2)
            okc = delta >= 0
            t_cap = np.where(okc, -b - np.sqrt(np.maximum(delta, 0.0)), np.inf)
            pz = origins[:, 2] + t_cap * dirs[:, 2]
            okc &= (pz - sign * self.a) * sign >= -1e-12
            upd = okc & (t_cap < t_best)
            t_best[upd] = t_cap[upd]
            p = origins[upd] + t_cap[upd, None] * dirs[upd]
            n_best[upd] = (p - center) / self.r

        hit = np.isfinite(t_best)
        t = np.where(hit, t_best, 0.0)
        p = origins + t[:, None] * dirs
        p[~hit] = 0.0
        return hit, p, n_best


class AnalyticTorus:
    """Torus about the z axis: major radius in the xy plane, minor radius.

    Intersections solve the standard quartic, whose roots come from the
    companion-matrix eigenvalues and are polished with a few Newton steps.
    """

    def __init__(self, major: float, minor: float):
        if not (0 < minor < major):
            raise ShapeError("torus needs 0 < minor < major")
        self.R = float(major)
        self.r = float(minor)

    def _quartic_coeffs(self, origins, dirs):
        beta = 2.0 * np.einsum("ij,ij->i", origins, dirs)
        gamma = np.einsum("ij,ij->i", origins, origins) + self.R ** 2 - self.r ** 2
        dxy2 = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
        odxy = origins[:, 0] * dirs[:, 0] + origins[:, 1] * dirs[:, 1]
        oxy2 = origins[:, 0] ** 2 + origins[:, 1] ** 2
        four_r2 = 4.0 * self.R ** 2
        # f(t) = (t^2 + beta t + gamma)^2 - 4R^2 ((ox + t dx)^2 + (oy + t dy)^2)
        a3 = 2.0 * beta
        a2 = beta * beta + 2.0 * gamma - four_r2 * dxy2
        a1 = 2.0 * beta * gamma - 2.0 * four_r2 * odxy
        a0 = gamma * gamma - four_r2 * oxy2
        return a3, a2, a1, a0

    def _implicit(self, pts):
        s = np.einsum("ij,ij->i", pts, pts) + self.R ** 2 - self.r ** 2
        return s * s - 4.0 * self.R ** 2 * (pts[:, 0] ** 2 + pts[:, 1] ** 2)

    def _implicit_grad(self, pts):
        s = np.einsum("ij,ij->i", pts, pts) + self.R ** 2 - self.r ** 2
        g = 4.0 * pts * s[:, None]
        g[:, 0] -= 8.0 * self.R ** 2 * pts[:, 0]
        g[:, 1] -= 8.0 * self.R ** 2 * pts[:, 1]
        return g

    def cast(self, origins, dirs):
        n_rays = len(origins)
        a3, a2, a1, a0 = self._quartic_coeffs(origins, dirs)
        comp = np.zeros((n_rays, 4, 4))
        comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
        comp[:, 0, 3] = -a0
        comp[:, 1, 3] = -a1
        comp[:, 2, 3] = -a2
        comp[:, 3, 3] = -a3
        roots = np.linalg.eigvals(comp)
        real = np.abs(roots.imag) <= 1e-7 * (1.0 + np.abs(roots.real))
        t = roots.real

        # Newton polish on f(t) = ((o+td).(o+td) + R^2 - r^2)^2 - 4R^2 |xy|^2
        for _ in range(4):
            pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
            flat = pts.reshape(-1, 3)
            f = self._implicit(flat).reshape(n_rays, 4)
            df = np.einsum("ikj,ij->ik", self._implicit_grad(flat).reshape(n_rays, 4, 3), dirs)
            step = f / np.where(np.abs(df) > 1e-30, df, 1.0)
            t = np.where(real & (np.abs(df) > 1e-30), t - step, t)

        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        resid = np.abs(self._implicit(pts.reshape(-1, 3)).reshape(n_rays, 4))
        valid = real & (resid <= 1e-8 * (1.0 + np.abs(t) ** 4))
        t = np.where(valid, t, np.inf)
        t_min = t.min(axis=1)
        hit = np.isfinite(t_min)
        t_min = np.where(hit, t_min, 0.0)
        p = origins + t_min[:, None] * dirs
        n = np.zeros_like(p)
        g = self._implicit_grad(p[hit])
        n[hit] = _unit(g)
        p[~hit] = 0.0
        return hit, p, n


class TriangleMeshCaster:
    """Vectorized one-sided-tolerance ray/triangle casting over a mesh.

    Degenerate triangles are dropped at construction. Returns the triangle
    winding normal; back-face policy is applied by the caller.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        v0 = self.vertices[faces[:, 0]]
        e1 = self.vertices[faces[:, 1]] - v0
        e2 = self.vertices[faces[:, 2]] - v0
        area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
        keep = area2 > 1e-14
        self.faces = faces[keep]
        self.v0 = v0[keep]
        self.e1 = e1[keep]
        self.e2 = e2[keep]
        self.normals = np.cross(self.e1, self.e2)
        self.normals /= np.linalg.norm(self.normals, axis=1, keepdims=True)

    def cast(self, origins, dirs, chunk: int = 128):
        n_rays = len(origins)
        t_best = np.full(n_rays, np.inf)
        tri_best = np.full(n_rays, -1, dtype=np.int64)
        for lo in range(0, n_rays, chunk):
            hi = lo + chunk
            o = origins[lo:hi, None, :]
            d = dirs[lo:hi, None, :]
            h = np.cross(d, self.e2[None, :, :])
            a = np.einsum("tj,rtj->rt", self.e1, h)
            ok = np.abs(a) > 1e-14
            f = 1.0 / np.where(ok, a, 1.0)
            s = o - self.v0[None, :, :]
            u = f * np.einsum("rtj,rtj->rt", s, h)
            q = np.cross(s, self.e1[None, :, :])
            v = f * np.einsum("rtj,rtj->rt", d.repeat(q.shape[1], axis=1), q)
            t = f * np.einsum("tj,rtj->rt", self.e2, q)
            eps = 1e-12
            ok &= (u >= -eps) & (v >= -eps) & (u + v <= 1.0 + eps)
            t = np.where(ok, t, np.inf)
            idx = np.argmin(t, axis=1)
            rows = np.arange(t.shape[0])
            tt = t[rows, idx]
            better = tt < t_best[lo:hi]
            t_best[lo:hi][better] = tt[better]
            tri_best[lo:hi][better] = idx[better]
        hit = np.isfinite(t_best)
        t = np.where(hit, t_best, 0.0)
        p = origins + t[:, None] * dirs
        n = np.zeros_like(p)
        n[hit] = self.normals[tri_best[hit]]
        p[~hit] = 0.0
        return hit, p, n


# ---------------------------------------------------------------------------
# Minimal enclosing ball (for mesh normalization)


def _circum2(a, b):
    c = 0.5 * (a + b)
    return c, float(np.dot(a - c, a - c))


def _circum3(a, b, c):
    u, v = b - a, c - a
    gram = np.array([[u @ u, u @ v], [u @ v, v @ v]])
    rhs = 0.5 * np.array([u @ u, v @ v])
    try:
        ab = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return _circum2(a, b) if (b - a) @ (b - a) >= (c - a) @ (c - a) else _circum2(a, c)
    center = a + ab[0] * u + ab[1] * v
    return center, float(np.dot(a - center, a - center))


def _circum4(a, b, c, d):
    m = np.stack([b - a, c - a, d - a])
    rhs = 0.5 * np.einsum("ij,ij->i", m, m)
    try:
        x = np.linalg.solve(m, rhs)
    except np.linalg.LinAlgError:
        return _circum3(a, b, c)
    center = a + x
    return center, float(np.dot(a - center, a - center))


def minimal_enclosing_ball(points: np.ndarray, seed: int = 0) -> tuple[np.ndarray, float]:
    """Exact smallest enclosing sphere (move-to-front Welzl, expected O(n))."""
    pts = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    P = pts[rng.permutation(len(pts))]
    tol = 1e-12

    def outside(p, c, r2):
        return float(np.dot(p - c, p - c)) > r2 * (1 + tol) + tol

    def ball3(P, q1, q2, q3):
        c, r2 = _circum3(q1, q2, q3)
        for i in range(len(P)):
            if outside(P[i], c, r2):
                c, r2 = _circum4(q1, q2, q3, P[i])
        return c, r2

    def ball2(P, q1, q2):
        c, r2 = _circum2(q1, q2)
        for i in range(len(P)):
            if outside(P[i], c, r2):
                c, r2 = ball3(P[:i], q1, q2, P[i])
        return c, r2

    def ball1(P, q1):
        c, r2 = q1.copy(), 0.0
        for i in range(len(P)):
            if outside(P[i], c, r2):
                c, r2 = ball2(P[:i], q1, P[i])
        return c, r2

    c, r2 = P[0].copy(), 0.0
    for i in range(1, len(P)):
        if outside(P[i], c, r2):
            c, r2 = ball1(P[:i], P[i])
    return c, float(np.sqrt(r2))


# ---------------------------------------------------------------------------
# Mesh file loading


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Minimal OBJ reader: v and f records, fan triangulation of polygons."""
    verts, faces = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v" and len(parts) >= 4:
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f" and len(parts) >= 4:
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not faces:
        raise ShapeError(f"no usable geometry in OBJ file {path}")
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)


def load_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Binary little-endian PLY reader for plain vertex/face meshes."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ShapeError("not a PLY file")
        fmt = fh.readline().split()
        if len(fmt) < 2 or fmt[1] != b"binary_little_endian":
            raise ShapeError("only binary little-endian PLY is supported")
        counts, order, vert_props = {}, [], []
        current = None
        while True:
            line = fh.readline()
            if not line:
                raise ShapeError("unterminated PLY header")
            parts = line.split()
            if parts[0] == b"end_header":
                break
            if parts[0] == b"element":
                current = parts[1].decode()
                counts[current] = int(parts[2])
                order.append(current)
            elif parts[0] == b"property" and current == "vertex":
                vert_props.append((parts[1].decode(), parts[-1].decode()))
        sizes = {"float": 4, "float32": 4, "double": 8, "float64": 8,
                 "uchar": 1, "uint8": 1, "char": 1, "int8": 1,
                 "short": 2, "ushort": 2, "int": 4, "int32": 4, "uint": 4, "uint32": 4}
        np_types = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}
        verts = faces = None
        for elem in order:
            if elem == "vertex":
                stride = sum(sizes[t] for t, _ in vert_props)
                raw = fh.read(stride * counts["vertex"])
                offs, cols = 0, {}
                for typ, name in vert_props:
                    if name in ("x", "y", "z"):
                        cols[name] = (offs, np_types.get(typ))
                        if cols[name][1] is None:
                            raise ShapeError("vertex coordinates must be float")
                    offs += sizes[typ]
                verts = np.empty((counts["vertex"], 3))
                for j, name in enumerate(("x", "y", "z")):
                    off, dt = cols[name]
                    verts[:, j] = np.ndarray((counts["vertex"],), dt, raw, off, (stride,))
            elif elem == "face":
                out = []
                for _ in range(counts["face"]):
                    (k,) = struct.unpack("<B", fh.read(1))
                    idx = struct.unpack(f"<{k}i", fh.read(4 * k))
                    for j in range(1, k - 1):
                        out.append([idx[0], idx[j], idx[j + 1]])
                faces = np.array(out, dtype=np.int64)
        if verts is None or faces is None:
            raise ShapeError("PLY file lacks vertex or face data")
        return verts, faces


# ---------------------------------------------------------------------------
# The shape source facade


@dataclass
class ShapeSource:
    """A normalized shape with its casting oracle and provenance.

    transform = (scale, cx, cy, cz) maps original coordinates into the
    normalized frame: x_norm = scale * (x - c). Analytic shapes carry the
    identity transform and must already fit inside the unit sphere.
    """

    kind: str
    caster: object
    spec: str
    transform: tuple = (1.0, 0.0, 0.0, 0.0)

    def cast(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest intersection (line convention) in normalized space."""
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = _unit(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
        return self.caster.cast(origins, dirs)

    @property
    def is_mesh(self) -> bool:
        return self.kind == "triangle_mesh"


def cast_oracle(shape: ShapeSource, origins, dirs):
    """Module-level alias for the ground-truth ray caster."""
    return shape.cast(origins, dirs)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x != ""]


def parse_shape(spec: str) -> ShapeSource:
    """Parse a shape spec string into a normalized ShapeSource.

    Forms: sphere:R | torus:MAJOR,MINOR | box:EX,EY,EZ | capsule:HALF,R |
    spheres:CX,CY,CZ,R[;...] | mesh:PATH(.obj|.ply)
    """
    if ":" not in spec:
        raise ShapeError(f"malformed shape spec {spec!r} (expected kind:params)")
    kind, _, arg = spec.partition(":")
    try:
        if kind == "sphere":
            (r,) = _floats(arg)
            if r > 1.0:
                raise ShapeError("sphere must fit inside the unit sphere")
            return ShapeSource("analytic_sphere", AnalyticSphere(r), spec)
        if kind == "torus":
            major, minor = _floats(arg)
            if major + minor > 1.0:
                raise ShapeError("torus must fit inside the unit sphere")
            return ShapeSource("analytic_torus", AnalyticTorus(major, minor), spec)
        if kind == "box":
            ex, ey, ez = _floats(arg)
            if np.linalg.norm([ex, ey, ez]) > 1.0:
                raise ShapeError("box must fit inside the unit sphere")
            return ShapeSource("analytic_box", AnalyticBox([ex, ey, ez]), spec)
        if kind == "capsule":
            half, r = _floats(arg)
            if half + r > 1.0:
                raise ShapeError("capsule must fit inside the unit sphere")
            return ShapeSource("analytic_capsule", AnalyticCapsule(half, r), spec)
        if kind == "spheres":
            centers, radii = [], []
            for part in arg.split(";"):
                cx, cy, cz, r = _floats(part)
                if np.linalg.norm([cx, cy, cz]) + r > 1.0:
                    raise ShapeError("every sphere must fit inside the unit sphere")
                centers.append([cx, cy, cz])
                radii.append(r)
            return ShapeSource("analytic_spheres", SphereUnion(centers, radii), spec)
        if kind == "mesh":
            return load_mesh_source(arg, spec)
    except ShapeError:
        raise
    except (ValueError, TypeError) as exc:
        raise ShapeError(f"malformed shape spec {spec!r}: {exc}") from exc
    raise ShapeError(f"unknown shape kind {kind!r}")


def load_mesh_source(path: str, spec: str | None = None) -> ShapeSource:
    """Load a mesh, normalize it into the unit sphere, build its caster."""
    p = Path(path)
    if not p.exists():
        raise ShapeError(f"mesh file not found: {path}")
    if p.suffix.lower() == ".obj":
        verts, faces = load_obj(p)
    elif p.suffix.lower() == ".ply":
        verts, faces = load_ply(p)
    else:
        raise ShapeError(f"unsupported mesh format {p.suffix!r}")
    center, radius = minimal_enclosing_ball(verts)
    if radius == 0:
        raise ShapeError("degenerate mesh: all vertices coincide")
    scale = 1.0 / radius
    verts = (verts - center) * scale
    caster = TriangleMeshCaster(verts, faces)
    return ShapeSource("triangle_mesh", caster, spec or f"mesh:{path}",
                       (scale, float(center[0]), float(center[1]), float(center[2])))
