"""Differentiation-friendly geometry of oriented rays and medial atoms.

An oriented ray is treated as a full line (the observer sits at infinity),
so intersection parameters may be negative. Rays are canonicalized into the
9D embedding (q_hat, moment, foot) which is invariant to positive scaling
of the direction and to sliding the origin along the line.

All operations are pure, broadcast over leading batch dimensions, and
differentiable wherever the math is (masked branches are guarded so no NaN
leaks into gradients of the taken branch).
"""

from __future__ import annotations

from typing import NamedTuple

import torch

Tensor = torch.Tensor

# Perpendicular distances below this are considered degenerate when
# normalizing a medial normal.
_DEGENERATE_EPS = 1e-12


class InvalidRayError(ValueError):
    """Raised for rays with a zero-length direction."""


class DegenerateNormalError(ValueError):
    """Raised when a medial normal is requested at the atom center."""


class Ray(NamedTuple):
    """Oriented ray: origin (..., 3) and direction (..., 3), any length > 0."""

    origin: Tensor
    direction: Tensor


class CanonicalRay(NamedTuple):
    """Unique 4-DoF line encoding: unit direction, moment, perpendicular foot.

    moment = origin x q_hat, foot = q_hat x moment. The moment and foot are
    both orthogonal to q_hat and of equal length (the line's distance from
    the coordinate origin).
    """

    q_hat: Tensor
    moment: Tensor
    foot: Tensor

    def embedding(self) -> Tensor:
        """The 9D network input vector (q_hat, m, o_perp)."""
        return torch.cat([self.q_hat, self.moment, self.foot], dim=-1)


class MedialAtom(NamedTuple):
    """Sphere candidate: center (..., 3) and radius (...) > 0."""

    center: Tensor
    radius: Tensor


class IntersectionOutcome(NamedTuple):
    """Result of testing one ray against one atom (fields broadcast together).

    point is the near intersection when hit, otherwise the perpendicular
    projection of the atom center onto the line. silhouette_raw is the
    signed clearance at that projection (negative when the atom overlaps
    the line); silhouette clamps it at zero. normal is the medial normal
    (point - center)/|point - center| where hit, zero elsewhere.
    """

    hit: Tensor
    delta: Tensor
    point: Tensor
    silhouette_raw: Tensor
    silhouette: Tensor
    normal: Tensor


class CandidateSelection(NamedTuple):
    """argmin candidate per ray plus the per-candidate metric values."""

    winner: Tensor
    metric: Tensor


def canonicalize(ray: Ray) -> CanonicalRay:
    """Map a ray to its canonical (q_hat, moment, foot) line encoding.

    Raises InvalidRayError if any direction has zero length.
    """
    norm = torch.linalg.vector_norm(ray.direction, dim=-1, keepdim=True)
    if not bool((norm > 0).all()):
        raise InvalidRayError("ray direction must have nonzero length")
    q_hat = ray.direction / norm
    moment = torch.linalg.cross(ray.origin, q_hat, dim=-1)
    foot = torch.linalg.cross(q_hat, moment, dim=-1)
    return CanonicalRay(q_hat, moment, foot)


def embed_with_origin(origin: Tensor, q: Tensor) -> Tensor:
    """9D embedding (q, o x q, q x (o x q)) without re-normalizing q.

    Differentiation w.r.t. the raw direction 3-vector goes through this map;
    for unit q it coincides with canonicalize(...).embedding().
    """
    moment = torch.linalg.cross(origin, q, dim=-1)
    foot = torch.linalg.cross(q, moment, dim=-1)
    return torch.cat([q, moment, foot], dim=-1)


def intersect_atom(ray: Ray, atom: MedialAtom) -> IntersectionOutcome:
    """Line-sphere intersection with silhouette and medial normal.

    delta = (q.(o-c))^2 - (|o-c|^2 - r^2) classifies hit (delta >= 0) vs
    miss. On a hit the near root -sqrt(delta) is always taken (first entry
    point along q_hat, possibly behind the origin). On a miss the point is
    the perpendicular projection of the center onto the line.
    """
    norm = torch.linalg.vector_norm(ray.direction, dim=-1, keepdim=True)
    q_hat = ray.direction / norm
    oc = ray.origin - atom.center
    b = (q_hat * oc).sum(dim=-1)
    delta = b * b - ((oc * oc).sum(dim=-1) - atom.radius * atom.radius)
    hit = delta >= 0

    # Perpendicular foot of the center onto the line (the miss-side point,
    # also where the signed silhouette is measured).
    t_proj = -b
    proj = ray.origin + q_hat * t_proj.unsqueeze(-1)
    perp = torch.linalg.vector_norm(proj - atom.center, dim=-1)
    s_raw = perp - atom.radius
    s = torch.clamp(s_raw, min=0.0)

    # sqrt only on hit lanes; the masked value keeps gradients NaN-free.
    delta_safe = torch.where(hit, delta, torch.ones_like(delta))
    t_hit = -b - torch.sqrt(delta_safe)
    p_hit = ray.origin + q_hat * t_hit.unsqueeze(-1)
    point = torch.where(hit.unsqueeze(-1), p_hit, proj)

    radial = point - atom.center
    rnorm = torch.linalg.vector_norm(radial, dim=-1, keepdim=True)
    safe = torch.where(rnorm > _DEGENERATE_EPS, rnorm, torch.ones_like(rnorm))
    normal = torch.where(hit.unsqueeze(-1), radial / safe, torch.zeros_like(radial))
    return IntersectionOutcome(hit, delta, point, s_raw, s, normal)


def medial_normal(point: Tensor, atom: MedialAtom) -> Tensor:
    """Unit vector from the atom center to a point on its surface.

    Raises DegenerateNormalError when the point coincides with the center.
    """
    radial = point - atom.center
    norm = torch.linalg.vector_norm(radial, dim=-1, keepdim=True)
    if bool((norm <= _DEGENERATE_EPS).any()):
        raise DegenerateNormalError("medial normal undefined at the atom center")
    return radial / norm


def select_candidate(ray: Ray, outcomes: IntersectionOutcome) -> CandidateSelection:
    """Pick the winning atom among n candidates stacked on the last axis.

    Metric: hitting candidates score their signed displacement q.(p - o)
    along the ray; missing candidates score +inf if any other hits, else
    fall back on the (clamped) silhouette distance. Ties break toward the
    smallest index.
    """
    if outcomes.hit.shape[-1] < 1:
        raise ValueError("need at least one candidate")
    norm = torch.linalg.vector_norm(ray.direction, dim=-1, keepdim=True)
    q_hat = (ray.direction / norm).unsqueeze(-2)
    o = ray.origin.unsqueeze(-2)
    displacement = ((outcomes.point - o) * q_hat).sum(dim=-1)
    any_hit = outcomes.hit.any(dim=-1, keepdim=True)
    inf = torch.full_like(displacement, float("inf"))
    metric = torch.where(
        outcomes.hit,
        displacement,
        torch.where(any_hit.expand_as(outcomes.hit), inf, outcomes.silhouette),
    )
    winner = torch.argmin(metric, dim=-1)
    return CandidateSelection(winner, metric)


def gather_winner(values: Tensor, winner: Tensor) -> Tensor:
    """Select per-ray winner entries from (..., n) or (..., n, 3) tensors."""
    if values.dim() == winner.dim() + 1:
        return values.gather(-1, winner.unsqueeze(-1)).squeeze(-1)
    if values.dim() == winner.dim() + 2:
        idx = winner.unsqueeze(-1).unsqueeze(-1).expand(*winner.shape, 1, values.shape[-1])
        return values.gather(-2, idx).squeeze(-2)
    raise ValueError("values must have one or two trailing dims beyond winner")
