"""Dual-level feature alignment: losses and hand-derived gradients.

Instance level: query features are soft-clustered per class into K batch
prototypes by Sinkhorn normalization of a random affinity, then pulled toward
the reference prototypes with an InfoNCE-style loss whose reference side runs
through a 3-layer ReLU perceptron. Image level: each backbone map is mapped
per-cell by a 1x1-conv analog and compared to the bilinearly resized encoder
map by mean (1 - cosine).

Gradients are analytic; Sinkhorn assignments are constants to the gradients
(stop-gradient). ReLU takes subgradient 0 at the kink. Everything is checked
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import FeatureMap
from .errors import DomainError
from .rng import Rng

SINKHORN_EPS = 0.05
SINKHORN_TOL = 1e-9
SINKHORN_MAX_ITER = 2000
TEMPERATURE = 0.1


@dataclass
class QueryBatch:
    """Per-proposal student features with foreground logits.

    `labels` is derived: argmax of sigmoid(logits) per row (sigmoid is
    monotone, so argmax of the raw logits).
    """

    features: np.ndarray  # (N, dq)
    logits: np.ndarray  # (N, C)
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.features.ndim != 2 or self.logits.ndim != 2:
            raise DomainError("QueryBatch needs 2-d features and logits")
        if self.features.shape[0] != self.logits.shape[0]:
            raise DomainError("features and logits row counts differ")
        if self.logits.shape[0]:
            self.labels = np.argmax(self.logits, axis=1)
        else:
            self.labels = np.zeros(0, dtype=np.int64)


def collect_class_queries(batch: QueryBatch, class_id: int) -> np.ndarray:
    """Rows of the query matrix predicted to belong to `class_id`, order kept."""
    return batch.features[batch.labels == class_id]


@dataclass
class AssignmentMatrix:
    a: np.ndarray  # (N_c, K), rows sum to 1, columns to N_c/K at convergence
    converged: bool
    iterations: int

    def marginal_violation(self) -> float:
        n, k = self.a.shape
        row_err = np.abs(self.a.sum(axis=1) - 1.0).max()
        col_err = np.abs(self.a.sum(axis=0) - n / k).max()
        return float(max(row_err, col_err))


def sinkhorn_assign(
    init: np.ndarray,
    eps: float = SINKHORN_EPS,
    max_iter: int = SINKHORN_MAX_ITER,
    tol: float = SINKHORN_TOL,
) -> AssignmentMatrix:
    """Alternating row/column rescaling of exp(init/eps).

    Rows are normalized to 1, columns scaled to N_c/K; stops when the largest
    marginal violation drops below `tol`. exp is max-shifted for stability.
    """
    init = np.asarray(init, dtype=np.float64)
    if init.ndim != 2 or min(init.shape) < 1:
        raise DomainError(f"init must be a non-empty 2-d array, got shape {init.shape}")
    if not np.isfinite(init).all():
        raise DomainError("sinkhorn init contains non-finite values")
    n, k = init.shape
    scaled = init / eps
    s = np.exp(scaled - scaled.max())
    col_target = n / k
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        s = s / s.sum(axis=1, keepdims=True)
        s = s * (col_target / s.sum(axis=0, keepdims=True))
        violation = np.abs(s.sum(axis=1) - 1.0).max()
        if violation < tol:
            converged = True
            break
    return AssignmentMatrix(a=s, converged=converged, iterations=iterations)


def aggregate_prototypes(queries: np.ndarray, assignment: AssignmentMatrix):
    """Column-weighted means: p_k = sum_i A_ik q_i / sum_i A_ik.

    Returns (K, dq) prototypes and a presence mask; zero-mass columns are
    absent (their prototype row is zero).
    """
    a = assignment.a
    if a.shape[0] != queries.shape[0]:
        raise DomainError(
            f"assignment rows {a.shape[0]} != query rows {queries.shape[0]}"
        )
    mass = a.sum(axis=0)  # (K,)
    present = mass > 0.0
    protos = np.zeros((a.shape[1], queries.shape[1]))
    if present.any():
        protos[present] = (a.T[present] @ queries) / mass[present, None]
    return protos, present


def prototype_grads_to_queries(assignment: AssignmentMatrix, grad_protos: np.ndarray) -> np.ndarray:
    """Chain rule through the weighted mean at fixed assignments: (N_c, dq)."""
    a = assignment.a
    mass = a.sum(axis=0)
    safe = np.where(mass > 0.0, mass, 1.0)
    return (a / safe[None, :]) @ grad_protos


@dataclass
class ProjectionHead:
    """Reference-side MLP (d -> hidden -> hidden -> dq, ReLU between) plus
    per-level 1x1-conv analogs (dq -> d) for image alignment."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    conv_w: list[np.ndarray]  # per level, (d, dq)
    conv_b: list[np.ndarray]  # per level, (d,)

    @staticmethod
    def init(ref_dim: int, query_dim: int, rng: Rng, hidden: int | None = None, levels: int = 2):
        """Seeded uniform init scaled by fan-in; hidden width defaults to query_dim."""
        h = hidden if hidden is not None else query_dim

        def u(r, rows, cols):
            bound = 1.0 / np.sqrt(cols)
            return r.uniform(-bound, bound, size=(rows, cols))

        r = rng.derive("mlp")
        head = ProjectionHead(
            w1=u(r.derive(1), h, ref_dim),
            b1=np.zeros(h),
            w2=u(r.derive(2), h, h),
            b2=np.zeros(h),
            w3=u(r.derive(3), query_dim, h),
            b3=np.zeros(query_dim),
            conv_w=[u(rng.derive("conv", l), ref_dim, query_dim) for l in range(levels)],
            conv_b=[np.zeros(ref_dim) for _ in range(levels)],
        )
        return head

    def params(self) -> dict[str, np.ndarray]:
        out = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2, "w3": self.w3, "b3": self.b3}
        for l, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"conv_w{l}"] = w
            out[f"conv_b{l}"] = b
        return out

    def mlp_forward(self, x: np.ndarray):
        a1 = x @ self.w1.T + self.b1
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ self.w2.T + self.b2
        h2 = np.maximum(a2, 0.0)
        out = h2 @ self.w3.T + self.b3
        return out, (x, a1, h1, a2, h2)

    def mlp_backward(self, grad_out: np.ndarray, cache) -> dict[str, np.ndarray]:
        x, a1, h1, a2, h2 = cache
        grads = {}
        grads["w3"] = grad_out.T @ h2
        grads["b3"] = grad_out.sum(axis=0)
        d_h2 = grad_out @ self.w3
        d_a2 = d_h2 * (a2 > 0.0)
        grads["w2"] = d_a2.T @ h1
        grads["b2"] = d_a2.sum(axis=0)
        d_h1 = d_a2 @ self.w2
        d_a1 = d_h1 * (a1 > 0.0)
        grads["w1"] = d_a1.T @ x
        grads["b1"] = d_a1.sum(axis=0)
        return grads


def _normalize_rows(x: np.ndarray):
    norms = np.linalg.norm(x, axis=1)
    safe = np.maximum(norms, 1e-12)
    return x / safe[:, None], safe


@dataclass
class ContrastiveResult:
    loss: float
    grad_prototypes: np.ndarray  # (C, K, dq)
    head_grads: dict[str, np.ndarray]  # w1..b3
    terms: int  # number of batch prototypes contributing


def contrastive_loss(
    batch_protos: np.ndarray,
    batch_present: np.ndarray,
    ref_protos: np.ndarray,
    ref_present: np.ndarray,
    head: ProjectionHead,
    temperature: float = TEMPERATURE,
    normalize: bool = True,
) -> ContrastiveResult:
    """InfoNCE pull of batch prototypes toward same-(class, component) references.

    Shapes: batch_protos (C, K, dq) with mask batch_present (C, K);
    ref_protos (C, K, d) with mask ref_present. The positive for slot (i, k)
    is reference slot (i, k); the denominator runs over every present
    reference slot. With `normalize` both sides are L2-normalized and
    similarities divided by `temperature`; otherwise raw dot products are
    used (the literal form, prone to overflow for unconstrained vectors).

    A batch slot contributes only if its own reference slot is present.
    Returns loss 0 with zero gradients when nothing contributes.
    """
    c, k, dq = batch_protos.shape
    if ref_protos.shape[:2] != (c, k):
        raise DomainError(
            f"reference grid {ref_protos.shape[:2]} != batch grid {(c, k)}"
        )
    zero = ContrastiveResult(
        loss=0.0,
        grad_prototypes=np.zeros_like(batch_protos),
        head_grads={n: np.zeros_like(p) for n, p in head.params().items() if not n.startswith("conv")},
        terms=0,
    )
    ref_mask = np.asarray(ref_present, dtype=bool)
    if not ref_mask.any():
        return zero
    ref_slots = np.argwhere(ref_mask)  # (Mr, 2)
    slot_index = {(int(i), int(j)): idx for idx, (i, j) in enumerate(ref_slots)}

    batch_mask = np.asarray(batch_present, dtype=bool).copy()
    # exclude batch slots whose positive reference is missing
    batch_mask &= ref_mask
    norms = np.linalg.norm(batch_protos, axis=2)
    batch_mask &= norms > 1e-12
    if not batch_mask.any():
        return zero
    batch_slots = np.argwhere(batch_mask)
    m = batch_slots.shape[0]

    b = batch_protos[batch_mask]  # (M, dq)
    rx = ref_protos[ref_mask]  # (Mr, d)
    r_out, cache = head.mlp_forward(rx)  # (Mr, dq)

    pos = np.array([slot_index[(int(i), int(j))] for i, j in batch_slots])

    if normalize:
        z, bn = _normalize_rows(b)
        u, rn = _normalize_rows(r_out)
        sims = (z @ u.T) / temperature
    else:
        z, u = b, r_out
        sims = z @ u.T

    shifted = sims - sims.max(axis=1, keepdims=True)
    log_denom = np.log(np.exp(shifted).sum(axis=1)) + sims.max(axis=1)
    loss = float(np.mean(log_denom - sims[np.arange(m), pos]))

    d_sims = np.exp(sims - log_denom[:, None])  # softmax rows
    d_sims[np.arange(m), pos] -= 1.0
    d_sims /= m

    if normalize:
        d_z = (d_sims @ u) / temperature
        d_u = (d_sims.T @ z) / temperature
        d_b = (d_z - (np.einsum("md,md->m", d_z, z))[:, None] * z) / bn[:, None]
        d_r = (d_u - (np.einsum("md,md->m", d_u, u))[:, None] * u) / rn[:, None]
    else:
        d_b = d_sims @ u
        d_r = d_sims.T @ z

    head_grads = head.mlp_backward(d_r, cache)
    grad_protos = np.zeros_like(batch_protos)
    grad_protos[batch_mask] = d_b
    return ContrastiveResult(loss=loss, grad_prototypes=grad_protos, head_grads=head_grads, terms=m)


def resize_bilinear(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-aligned bilinear resize of an (h, w, c) array."""
    h, w, _ = data.shape
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1)
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1)
    gx = np.broadcast_to(xs[None, :], (out_h, out_w)).reshape(-1)
    gy = np.broadcast_to(ys[:, None], (out_h, out_w)).reshape(-1)
    return kernels.bilinear_many(data, gx, gy).reshape(out_h, out_w, data.shape[2])


@dataclass
class ImageAlignResult:
    loss: float
    conv_w_grads: list[np.ndarray]
    conv_b_grads: list[np.ndarray]
    map_grads: list[np.ndarray]  # gradient w.r.t. each student map's data
    zero_norm_cells: int


def image_alignment_loss(
    student_maps: list[FeatureMap],
    vfm_map: FeatureMap,
    head: ProjectionHead,
) -> ImageAlignResult:
    """Mean per-cell (1 - cosine) between conv-projected student maps and the
    resized encoder map, averaged over levels.

    Zero-norm cells (either side) contribute the orthogonal value 1 with zero
    gradient and are counted.
    """
    if len(student_maps) != len(head.conv_w):
        raise DomainError(
            f"{len(student_maps)} student levels but {len(head.conv_w)} conv heads"
        )
    levels = len(student_maps)
    total = 0.0
    conv_w_grads = []
    conv_b_grads = []
    map_grads = []
    zero_cells = 0
    for level, smap in enumerate(student_maps):
        w = head.conv_w[level]
        bias = head.conv_b[level]
        if w.shape != (vfm_map.channels, smap.channels):
            raise DomainError(
                f"level {level}: conv shape {w.shape} != ({vfm_map.channels}, {smap.channels})"
            )
        s = smap.data  # (h, w, dq)
        y = s @ w.T + bias  # (h, w, d)
        v = resize_bilinear(vfm_map.data, smap.height, smap.width)
        ny = np.linalg.norm(y, axis=2)
        nv = np.linalg.norm(v, axis=2)
        ok = (ny > 1e-12) & (nv > 1e-12)
        zero_cells += int((~ok).sum())
        dots = np.einsum("hwc,hwc->hw", y, v)
        cells = smap.height * smap.width
        cos = np.zeros_like(dots)
        denom = np.where(ok, ny * nv, 1.0)
        cos[ok] = (dots / denom)[ok]
        level_loss = float(np.sum(np.where(ok, 1.0 - cos, 1.0))) / cells

        scale = -1.0 / (cells * levels)
        vhat = np.zeros_like(v)
        vhat[ok] = v[ok] / nv[ok, None]
        yhat = np.zeros_like(y)
        yhat[ok] = y[ok] / ny[ok, None]
        grad_y = np.zeros_like(y)
        grad_y[ok] = scale * (vhat[ok] - cos[ok, None] * yhat[ok]) / ny[ok, None]

        conv_w_grads.append(np.einsum("hwd,hwq->dq", grad_y, s))
        conv_b_grads.append(grad_y.sum(axis=(0, 1)))
        map_grads.append(grad_y @ w)
        total += level_loss
    return ImageAlignResult(
        loss=total / levels,
        conv_w_grads=conv_w_grads,
        conv_b_grads=conv_b_grads,
        map_grads=map_grads,
        zero_norm_cells=zero_cells,
    )
