"""Training losses, supervision gates, schedules, and their composition.

A batch is a list of items (strided sub-images, possibly from different
shapes and views). Every loss is computed per item and averaged across the
batch, matching the convention that each sub-image carries its own loss.
The specialization centroid and the inscription permutation therefore live
within an item.

Gate conventions: h_gt marks rays with ground-truth intersections, m_gt
marks rays with a positive ground-truth silhouette. Pixels with neither
(missing data on non-watertight meshes) still ride along in the batch and
feed the regularizers, but provide no direct supervision. The predicted-hit
indicator h (winning atom intersects) is a constant per ray, never a
gradient path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from . import autodiff, network
from .geometry import (CandidateSelection, IntersectionOutcome, MedialAtom,
                       Ray, embed_with_origin, gather_winner, intersect_atom,
                       select_candidate)

Tensor = torch.Tensor

TERM_NAMES = ("p", "n", "s", "h", "r", "ih", "im", "sigma", "mv", "z")

_DEGENERATE_NORMAL_EPS = 0.5


# ---------------------------------------------------------------------------
# Schedules and weights


def linear_ease(epoch: float, duration: float, offset: float = 0.0) -> float:
    """Clamped ramp from 0 at `offset` to 1 at `offset + duration`."""
    if duration <= 0:
        return 1.0 if epoch >= offset else 0.0
    return min(max((epoch - offset) / duration, 0.0), 1.0)


def sinusoidal_ease(epoch: float, duration: float, offset: float = 0.0) -> float:
    """Smooth monotone ease-in: -(cos(pi * linear) - 1) / 2."""
    return -0.5 * (math.cos(math.pi * linear_ease(epoch, duration, offset)) - 1.0)


_EASE_FNS = {
    "constant": lambda epoch, duration, offset: 1.0,
    "linear_ease": linear_ease,
    "sinusoidal_ease": sinusoidal_ease,
}


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"
    duration: float = 0.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in _EASE_FNS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def value(self, epoch: float) -> float:
        return _EASE_FNS[self.kind](epoch, self.duration, self.offset)


@dataclass(frozen=True)
class WeightSpec:
    """Affine combination of a constant and an easing curve: base + scale*ease."""

    base: float = 0.0
    scale: float = 0.0
    schedule: Schedule = Schedule()

    def value(self, epoch: float) -> float:
        v = self.base + self.scale * self.schedule.value(epoch)
        if v < 0:
            raise ValueError("loss weights must stay nonnegative")
        return v

    @classmethod
    def constant(cls, value: float) -> "WeightSpec":
        return cls(base=value)


def default_weights() -> dict:
    """The published weight table: constants plus eased-in/out schedules."""
    return {
        "p": WeightSpec.constant(2.0),
        "n": WeightSpec(scale=0.25, schedule=Schedule("sinusoidal_ease", 85, 15)),
        "s": WeightSpec.constant(10.0),
        "h": WeightSpec.constant(100.0),
        "r": WeightSpec.constant(5e-4),
        "ih": WeightSpec.constant(20.0),
        "im": WeightSpec.constant(300.0),
        "sigma": WeightSpec(base=0.10, scale=-0.09, schedule=Schedule("linear_ease", 40)),
        "mv": WeightSpec(scale=0.1, schedule=Schedule("linear_ease", 50)),
        "z": WeightSpec(scale=1e-4, schedule=Schedule("linear_ease", 30)),
    }


class LossWeights:
    """Per-term weight specs; evaluates to plain floats at a given epoch."""

    def __init__(self, specs: dict | None = None):
        self.specs = default_weights()
        if specs:
            for k, v in specs.items():
                if k not in TERM_NAMES:
                    raise ValueError(f"unknown loss term {k!r}")
                self.specs[k] = v

    def scaled(self, factors: dict) -> "LossWeights":
        """New weights with some terms multiplied by a factor (for ablations)."""
        out = LossWeights()
        out.specs = dict(self.specs)
        for k, f in factors.items():
            s = out.specs[k]
            out.specs[k] = WeightSpec(s.base * f, s.scale * f, s.schedule)
        return out

    def values_at(self, epoch: float) -> dict:
        return {k: spec.value(epoch) for k, spec in self.specs.items()}


# ---------------------------------------------------------------------------
# Batch items and gates


@dataclass
class BatchItem:
    """One strided sub-image worth of supervised rays (flattened)."""

    origins: Tensor          # (N, 3)
    directions: Tensor       # (N, 3), unit
    p_gt: Tensor             # (N, 3), zeros where absent
    n_gt: Tensor             # (N, 3), zeros where absent
    s_gt: Tensor             # (N,), zeros where absent
    h_gt: Tensor             # (N,) bool
    m_gt: Tensor             # (N,) bool
    shape_id: int = 0

    def __post_init__(self):
        if bool((self.h_gt & self.m_gt).any()):
            raise ValueError("a ray cannot be gated both hit and miss")

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0]

    def ray(self) -> Ray:
        return Ray(self.origins, self.directions)


def gates(has_hit_point, s_gt) -> tuple[Tensor, Tensor]:
    """Supervision gates: h_gt = intersection data exists, m_gt = s_gt > 0.

    Back-face pixels with missing data get (0, 0): they neither hit nor
    miss for supervision purposes.
    """
    h = torch.as_tensor(has_hit_point, dtype=torch.bool)
    s = torch.as_tensor(s_gt, dtype=torch.float64)
    m = (~h) & (s > 0)
    return h, m


def item_latent(params: network.NetworkParams, item: BatchItem) -> Tensor | None:
    if params.config.latent_dim == 0:
        return None
    return params.latents[item.shape_id]


# ---------------------------------------------------------------------------
# Individual loss terms (each returns a scalar over one item)


def intersection_loss(h_pred: Tensor, h_gt: Tensor, p_pred: Tensor,
                      p_gt: Tensor) -> Tensor:
    """Mean gated Euclidean distance |p - p_gt| (unsquared)."""
    gate = (h_pred & h_gt).to(p_pred.dtype)
    dist = torch.linalg.vector_norm(p_pred - p_gt, dim=-1)
    return (gate * dist).sum() / h_pred.shape[0]


def normal_loss(h_pred: Tensor, h_gt: Tensor, n_pred: Tensor,
                n_gt: Tensor) -> tuple[Tensor, int]:
    """Mean gated (1 - cosine similarity) between predicted and true normals.

    Rays whose predicted normal degenerates to zero length are excluded and
    counted. Returns (loss, excluded_count).
    """
    gate = h_pred & h_gt
    norm_p = torch.linalg.vector_norm(n_pred, dim=-1)
    degenerate = gate & (norm_p < _DEGENERATE_NORMAL_EPS)
    gate = gate & ~degenerate
    gate_f = gate.to(n_pred.dtype)
    norm_g = torch.linalg.vector_norm(n_gt, dim=-1)
    denom = torch.where(gate, norm_p * norm_g, torch.ones_like(norm_p))
    cos = (n_pred * n_gt).sum(dim=-1) / denom
    return (gate_f * (1.0 - cos)).sum() / h_pred.shape[0], int(degenerate.sum())


def silhouette_losses(s_raw: Tensor, s_gt: Tensor, h_gt: Tensor,
                      m_gt: Tensor) -> tuple[Tensor, Tensor]:
    """Silhouette regression on misses and the should-hit penalty.

    L_s uses the signed silhouette so overlapping atoms still receive a
    gradient; L_h penalizes positive clearance on rays that should hit (a
    hitting prediction has s_raw <= 0 and contributes nothing).
    """
    n = s_raw.shape[0]
    l_s = (m_gt.to(s_raw.dtype) * (s_raw - s_gt) ** 2).sum() / n
    l_h = (h_gt.to(s_raw.dtype) * torch.clamp(s_raw, min=0.0) ** 2).sum() / n
    return l_s, l_h


def maximality_loss(radii: Tensor) -> Tensor:
    """Constant positive pressure |sg(r) + 1 - r| on every candidate radius.

    The value is identically 1; the gradient w.r.t. each radius is
    -1/(|B| n), a constant outward push.
    """
    return (autodiff.stop_gradient(radii) + 1.0 - radii).abs().mean()


def inscription_losses(atoms: MedialAtom, item: BatchItem,
                       perm: Tensor) -> tuple[Tensor, Tensor]:
    """Test every candidate of ray a against partner ray b = rho(a).

    L_ih penalizes atoms whose near intersection with the partner ray sits
    in front of the partner's true hit point; L_im penalizes atoms closer
    to a missing partner ray than its true silhouette permits (clamped
    silhouette, squared hinge).
    """
    n_rays, n_atoms = atoms.radius.shape
    partner = Ray(item.origins[perm].unsqueeze(-2),
                  item.directions[perm].unsqueeze(-2))
    out = intersect_atom(partner, atoms)
    q_b = item.directions[perm].unsqueeze(-2)
    p_gt_b = item.p_gt[perm].unsqueeze(-2)
    h_gt_b = item.h_gt[perm].to(torch.float64).unsqueeze(-1)
    m_gt_b = item.m_gt[perm].to(torch.float64).unsqueeze(-1)

    ahead = ((p_gt_b - out.point) * q_b).sum(dim=-1)
    l_ih = (h_gt_b * out.hit.to(torch.float64)
            * torch.clamp(ahead, min=0.0)).sum() / (n_rays * n_atoms)

    s_gt_b = item.s_gt[perm].unsqueeze(-1)
    l_im = (m_gt_b * torch.clamp(s_gt_b - out.silhouette, min=0.0) ** 2
            ).sum() / (n_rays * n_atoms)
    return l_ih, l_im


def specialization_loss(centers: Tensor) -> Tensor:
    """Mean squared spread of each candidate's centers about their centroid.

    centers: (N, n, 3). The centroid is the current-item mean and stays in
    the differentiation graph.
    """
    centroid = centers.mean(dim=0, keepdim=True)
    return ((centers - centroid) ** 2).sum(dim=-1).mean()


def latent_loss(latents: Tensor) -> Tensor:
    """Spherical prior: mean squared norm over the latent table."""
    if latents is None or latents.numel() == 0:
        return torch.zeros((), dtype=torch.float64)
    return (latents ** 2).sum(dim=-1).mean()


def multiview_loss(params: network.NetworkParams, item: BatchItem,
                   winner: Tensor, h_pred: Tensor,
                   dropout_masks: list | None = None,
                   method: str = "analytic", fd_step: float = 1e-5) -> Tensor:
    """Change of the winning atom under view rotation about the true hit.

    Only rays with h * h_gt contribute. The ray is re-pivoted to the ground
    truth hit point, then the winning candidate's center and radius are
    differentiated w.r.t. the raw direction vector along the three
    coordinate axes; the loss is the mean (over the whole item) of the
    squared Jacobian norms. This is a second-order term: its value is built
    from forward-mode tangents and itself carries gradients to the
    parameters.

    method "analytic" uses forward-mode tangents; "finite_difference" uses
    central differences over the direction (two extra forward passes per
    axis), as a cross-check and fallback.
    """
    contrib = h_pred & item.h_gt
    n_total = item.n_rays
    if not bool(contrib.any()):
        return torch.zeros((), dtype=torch.float64)
    idx = contrib.nonzero(as_tuple=True)[0]
    origins = item.p_gt[idx]
    q = item.directions[idx]
    win = winner[idx]
    masks = None
    if dropout_masks is not None:
        masks = [m[idx] for m in dropout_masks]
    latent = item_latent(params, item)

    def predict(q_var: Tensor):
        emb = embed_with_origin(origins, q_var)
        atoms = network.forward(params, emb, latent, masks)
        c = gather_winner(atoms.center, win)
        r = gather_winner(atoms.radius, win)
        return c, r

    eye = torch.eye(3, dtype=torch.float64)
    dirs = [eye[k].expand_as(q) for k in range(3)]
    if method == "analytic":
        dual = autodiff.jvp(predict, q, dirs)
    elif method == "finite_difference":
        dual = autodiff.jvp_finite_difference(predict, q, dirs, step=fd_step)
    else:
        raise ValueError(f"unknown multi-view method {method!r}")

    total = torch.zeros((), dtype=torch.float64)
    for tc, tr in dual.tangents:
        total = total + (tc ** 2).sum() + (tr ** 2).sum()
    return total / n_total


def prif_multiview_loss(params: network.NetworkParams, item: BatchItem,
                        h_pred: Tensor, dropout_masks: list | None = None,
                        method: str = "analytic", fd_step: float = 1e-5) -> Tensor:
    """Multi-view penalty for the baseline head: || d p / d q ||^2."""
    contrib = h_pred & item.h_gt
    if not bool(contrib.any()):
        return torch.zeros((), dtype=torch.float64)
    idx = contrib.nonzero(as_tuple=True)[0]
    origins = item.p_gt[idx]
    q = item.directions[idx]
    masks = [m[idx] for m in dropout_masks] if dropout_masks is not None else None
    latent = item_latent(params, item)

    def predict(q_var: Tensor):
        emb = embed_with_origin(origins, q_var)
        t, _ = network.prif_forward(params, emb, latent, masks)
        foot = emb[..., 6:9]
        return foot + t.unsqueeze(-1) * q_var

    eye = torch.eye(3, dtype=torch.float64)
    dirs = [eye[k].expand_as(q) for k in range(3)]
    if method == "analytic":
        dual = autodiff.jvp(predict, q, dirs)
    else:
        dual = autodiff.jvp_finite_difference(predict, q, dirs, step=fd_step)
    total = torch.zeros((), dtype=torch.float64)
    for tp in dual.tangents:
        total = total + (tp ** 2).sum()
    return total / item.n_rays


# ---------------------------------------------------------------------------
# Composition


@dataclass
class LossBreakdown:
    """Per-term scalars, the weights used, and the weighted total."""

    terms: dict
    weights: dict
    total: Tensor
    extras: dict = field(default_factory=dict)

    def detached(self) -> dict:
        out = {k: float(v) for k, v in self.terms.items()}
        out["total"] = float(self.total)
        return out


def item_predictions(params: network.NetworkParams, item: BatchItem,
                     dropout_masks: list | None = None
                     ) -> tuple[MedialAtom, IntersectionOutcome, CandidateSelection]:
    """Forward one item and intersect every candidate with its own ray."""
    from .geometry import canonicalize
    emb = canonicalize(item.ray()).embedding()
    atoms = network.forward(params, emb, item_latent(params, item), dropout_masks)
    ray = Ray(item.origins.unsqueeze(-2), item.directions.unsqueeze(-2))
    outcomes = intersect_atom(ray, atoms)
    selection = select_candidate(item.ray(), outcomes)
    return atoms, outcomes, selection


def total_loss(params: network.NetworkParams, items: list, epoch: float,
               weights: LossWeights, rng: torch.Generator,
               dropout_masks: list | None = None,
               mv_method: str = "analytic", mv_fd_step: float = 1e-5,
               ) -> LossBreakdown:
    """Weighted sum of all terms at the given epoch's schedule values.

    `rng` drives the per-item inscription permutations (one draw per item,
    in item order). `dropout_masks` is an optional per-item list of
    per-layer masks; omit it outside training.
    """
    lam = weights.values_at(epoch)
    acc = {name: torch.zeros((), dtype=torch.float64) for name in TERM_NAMES}
    extras = {"normal_excluded": 0}

    for j, item in enumerate(items):
        masks = dropout_masks[j] if dropout_masks is not None else None
        atoms, outcomes, sel = item_predictions(params, item, masks)

        h_pred = gather_winner(outcomes.hit, sel.winner)
        p_win = gather_winner(outcomes.point, sel.winner)
        n_win = gather_winner(outcomes.normal, sel.winner)
        s_raw_win = gather_winner(outcomes.silhouette_raw, sel.winner)

        acc["p"] = acc["p"] + intersection_loss(h_pred, item.h_gt, p_win, item.p_gt)
        l_n, excluded = normal_loss(h_pred, item.h_gt, n_win, item.n_gt)
        acc["n"] = acc["n"] + l_n
        extras["normal_excluded"] += excluded
        l_s, l_h = silhouette_losses(s_raw_win, item.s_gt, item.h_gt, item.m_gt)
        acc["s"] = acc["s"] + l_s
        acc["h"] = acc["h"] + l_h
        acc["r"] = acc["r"] + maximality_loss(atoms.radius)
        perm = torch.randperm(item.n_rays, generator=rng)
        l_ih, l_im = inscription_losses(atoms, item, perm)
        acc["ih"] = acc["ih"] + l_ih
        acc["im"] = acc["im"] + l_im
        acc["sigma"] = acc["sigma"] + specialization_loss(atoms.center)
        acc["mv"] = acc["mv"] + multiview_loss(
            params, item, sel.winner, h_pred, masks, mv_method, mv_fd_step)

    n_items = max(len(items), 1)
    terms = {name: acc[name] / n_items for name in TERM_NAMES}
    terms["z"] = latent_loss(params.latents)

    total = torch.zeros((), dtype=torch.float64)
    for name in TERM_NAMES:
        total = total + lam[name] * terms[name]
    return LossBreakdown(terms, lam, total, extras)


def prif_total_loss(params: network.NetworkParams, items: list, epoch: float,
                    weights: LossWeights, rng: torch.Generator,
                    dropout_masks: list | None = None,
                    use_normal_loss: bool = False, use_multiview: bool = False,
                    mv_method: str = "analytic", mv_fd_step: float = 1e-5,
                    ) -> LossBreakdown:
    """Baseline training loss: L1 displacement + hit-logit cross entropy.

    Optional additions mirror the experiments that transplant the normal
    loss (weighted 2x its table value, computed through the differential
    surface normal) and the multi-view loss onto the baseline. Pixels with
    missing data are excluded from the classification term.
    """
    from .geometry import canonicalize
    from .rendering import analytical_normals

    lam = weights.values_at(epoch)
    acc = {"disp": torch.zeros((), dtype=torch.float64),
           "bce": torch.zeros((), dtype=torch.float64),
           "n": torch.zeros((), dtype=torch.float64),
           "mv": torch.zeros((), dtype=torch.float64)}

    for j, item in enumerate(items):
        masks = dropout_masks[j] if dropout_masks is not None else None
        latent = item_latent(params, item)
        emb = canonicalize(item.ray()).embedding()
        t, logit = network.prif_forward(params, emb, latent, masks)
        foot = emb[..., 6:9]
        q_hat = emb[..., 0:3]
        p_pred = foot + t.unsqueeze(-1) * q_hat
        h_pred = logit.detach() > 0

        h_gt_f = item.h_gt.to(torch.float64)
        acc["disp"] = acc["disp"] + (
            h_gt_f * torch.linalg.vector_norm(p_pred - item.p_gt, dim=-1)
        ).sum() / item.n_rays

        labeled = item.h_gt | item.m_gt
        if bool(labeled.any()):
            bce = F.binary_cross_entropy_with_logits(
                logit[labeled], h_gt_f[labeled], reduction="mean")
            acc["bce"] = acc["bce"] + bce

        if use_normal_loss:
            gate = h_pred & item.h_gt
            if bool(gate.any()):
                idx = gate.nonzero(as_tuple=True)[0]
                sub_masks = [m[idx] for m in masks] if masks is not None else None

                def p_of_origin(o_var: Tensor):
                    e = embed_with_origin(o_var, item.directions[idx])
                    tt, _ = network.prif_forward(params, e, latent, sub_masks)
                    return e[..., 6:9] + tt.unsqueeze(-1) * item.directions[idx]

                n_hat = analytical_normals(p_of_origin, item.origins[idx],
                                           item.directions[idx])
                cos = (n_hat * item.n_gt[idx]).sum(dim=-1)
                acc["n"] = acc["n"] + (1.0 - cos).sum() / item.n_rays

        if use_multiview:
            acc["mv"] = acc["mv"] + prif_multiview_loss(
                params, item, h_pred, masks, mv_method, mv_fd_step)

    n_items = max(len(items), 1)
    terms = {k: v / n_items for k, v in acc.items()}
    terms["z"] = latent_loss(params.latents)

    lam_out = {"disp": 1.0, "bce": 1.0,
               "n": 2.0 * lam["n"] if use_normal_loss else 0.0,
               "mv": lam["mv"] if use_multiview else 0.0,
               "z": lam["z"]}
    total = torch.zeros((), dtype=torch.float64)
    for k, w in lam_out.items():
        total = total + w * terms[k]
    return LossBreakdown(terms, lam_out, total)
