"""Surface fitting: Poisson-disk sampling, exact nearest neighbors, the
symmetric squared-distance loss between posed vertices and target samples,
and per-frame displacement optimization.

The fit is plain fixed-step gradient descent on

    loss(d) = sum_s min_v |v - s|^2 + sum_v min_s |v - s|^2 + lam * |L d|^2

where the posed vertices are linear in the displacements for a fixed pose
(v_i = R_i y_i + t_i with R_i, t_i from the skinning blend), so the chain rule
is a single rotation transpose per vertex.  Nearest-neighbor ties resolve to
the lowest point index, which keeps gradients reproducible.
"""

from __future__ import annotations

import logging
import tempfile
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .character import EmbeddedGraph, HandMask, SkinningWeights, apply_hand_freeze, dqs_vertex_transforms, embedded_deform
from .errors import NumericError, ValidationError
from .geometry import MotionFrame, Skeleton, TemplateMesh, euler_to_matrix, euler_to_matrix_jacobian

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampledSurface:
    """Point samples of a target surface (stand-in for a per-frame reconstruction)."""

    points: np.ndarray  # (S, 3)
    radius: float | None = None  # spacing guarantee when produced by poisson_disk_sample

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or len(p) == 0:
            raise ValidationError("sampled surface must be a nonempty (S, 3) array")
        if not np.isfinite(p).all():
            raise ValidationError("sampled surface contains non-finite points")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "points", p)


@dataclass
class FitConfig:
    learning_rate: float = 0.05
    iterations: int = 200
    lambda_lap: float | None = None  # None -> 0.1 / mean_edge_length^2
    chamfer_samples: int = 10_000
    grid_cell: float | None = None  # None -> auto from point density
    optimize_graph: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.iterations <= 0:
            raise ValidationError("learning rate and iteration budget must be positive")
        if self.lambda_lap is not None and self.lambda_lap < 0:
            raise ValidationError("lambda_lap must be >= 0")


class NearestNeighborIndex:
    """Uniform spatial hash grid over a fixed point set.

    The grid only accelerates: queries always return the true nearest point,
    with distance ties resolved to the lowest point index.  Ring-by-ring
    search stops once the best candidate provably beats every unvisited cell.
    """

    def __init__(self, points: np.ndarray, cell_size: float | None = None):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise ValidationError("index needs a nonempty (N, 3) point set")
        self.points = points
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        if cell_size is None:
            vol = float(np.prod(np.maximum(hi - lo, 1e-12)))
            cell_size = max((vol / len(points)) ** (1.0 / 3.0), 1e-9)
        self.cell = float(cell_size)
        self.lo = lo
        self.dims = np.maximum(((hi - lo) / self.cell).astype(np.int64) + 1, 1)
        coords = self._cell_of(points)
        flat = self._flatten(coords)
        order = np.argsort(flat, kind="stable")
        self._order = order.astype(np.int64)
        sorted_flat = flat[order]
        ncells = int(np.prod(self.dims))
        self._starts = np.searchsorted(sorted_flat, np.arange(ncells + 1))

    def _cell_of(self, p: np.ndarray) -> np.ndarray:
        return np.floor((p - self.lo) / self.cell).astype(np.int64)

    def _flatten(self, c: np.ndarray) -> np.ndarray:
        c = np.clip(c, 0, self.dims - 1)
        return (c[:, 0] * self.dims[1] + c[:, 1]) * self.dims[2] + c[:, 2]

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exact nearest neighbors: returns (indices (Q,), squared distances (Q,))."""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        q = len(queries)
        best_idx = np.full(q, -1, dtype=np.int64)
        best_d2 = np.full(q, np.inf)
        qcell = self._cell_of(queries)
        pending = np.arange(q)
        max_ring = int(np.max(self.dims)) + 2
        ring = 0
        while len(pending):
            offsets = _ring_offsets(ring)
            cells = qcell[pending][:, None, :] + offsets[None, :, :]  # (p, m, 3)
            inside = ((cells >= 0) & (cells < self.dims)).all(axis=2)
            flat = self._flatten(cells.reshape(-1, 3)).reshape(cells.shape[:2])
            starts = self._starts[flat]
            ends = self._starts[flat + 1]
            counts = np.where(inside, ends - starts, 0)
            total = counts.sum(axis=1)
            with_cand = total > 0
            if with_cand.any():
                rows = np.nonzero(with_cand)[0]
                reps = total[rows]
                qid = np.repeat(pending[rows], reps)
                # Expand candidate point ids across the ragged cell lists.
                cand = _expand_candidates(starts[rows], counts[rows])
                cand = self._order[cand]
                d = self.points[cand] - queries[qid]
                d2 = np.einsum("nk,nk->n", d, d)
                # Lowest index wins ties: lexsort by (query, d2, index).
                order = np.lexsort((cand, d2, qid))
                qid_s = qid[order]
                first = np.ones(len(qid_s), dtype=bool)
                first[1:] = qid_s[1:] != qid_s[:-1]
                sel = np.nonzero(first)[0]
                winners_q = qid_s[sel]
                winners_i = cand[order][sel]
                winners_d2 = d2[order][sel]
                better = winners_d2 < best_d2[winners_q]
                tie = (winners_d2 == best_d2[winners_q]) & (winners_i < best_idx[winners_q])
                upd = better | tie
                best_d2[winners_q[upd]] = winners_d2[upd]
                best_idx[winners_q[upd]] = winners_i[upd]
            # A point in an unvisited cell (Chebyshev ring > `ring`) is at least
            # ring * cell away from the query, so anything found within that
            # bound is final.
            bound = ring * self.cell
            found = best_d2[pending] <= bound * bound
            pending = pending[~found]
            ring += 1
            if ring > max_ring and len(pending):
                # Query far outside the populated grid: brute force the rest.
                rest = pending
                d = self.points[None, :, :] - queries[rest][:, None, :]
                d2 = np.einsum("qnk,qnk->qn", d, d)
                best = np.argmin(d2, axis=1)
                best_idx[rest] = best
                best_d2[rest] = d2[np.arange(len(rest)), best]
                break
        return best_idx, best_d2


def _ring_offsets(ring: int) -> np.ndarray:
    """Integer offsets whose Chebyshev norm equals `ring` (0 -> just the origin)."""
    if ring == 0:
        return np.zeros((1, 3), dtype=np.int64)
    rng = np.arange(-ring, ring + 1)
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    cheb = np.abs(grid).max(axis=1)
    return grid[cheb == ring]


def _expand_candidates(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Flatten ragged [start, start+count) ranges into one index vector."""
    starts = starts.reshape(-1)
    counts = counts.reshape(-1)
    nz = counts > 0
    starts = starts[nz]
    counts = counts[nz]
    total = int(counts.sum())
    out = np.ones(total, dtype=np.int64)
    ends = np.cumsum(counts)
    out[0] = starts[0]
    out[ends[:-1]] = starts[1:] - (starts[:-1] + counts[:-1] - 1)
    return np.cumsum(out)


# ---------------------------------------------------------------------------
# Poisson disk sampling


def _surface_candidates(mesh, count: int, rng: np.random.Generator) -> np.ndarray:
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    probs = areas / areas.sum()
    pick = rng.choice(len(areas), size=count, p=probs)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    return w0[:, None] * a[pick] + w1[:, None] * b[pick] + w2[:, None] * c[pick]


def _dart_throw(candidates: np.ndarray, radius: float) -> np.ndarray:
    """Greedy dart throwing: keep candidates at least `radius` from all kept points."""
    cell = radius / np.sqrt(3.0)
    lo = candidates.min(axis=0)
    dims = np.maximum(((candidates.max(axis=0) - lo) / cell).astype(np.int64) + 1, 1)
    grid: dict[tuple[int, int, int], list[int]] = {}
    kept: list[int] = []
    pts = candidates
    r2 = radius * radius
    cells = np.floor((pts - lo) / cell).astype(np.int64)
    for i in range(len(pts)):
        cx, cy, cz = cells[i]
        ok = True
        for dx in range(-2, 3):
            for dy in range(-2, 3):
                for dz in range(-2, 3):
                    bucket = grid.get((cx + dx, cy + dy, cz + dz))
                    if not bucket:
                        continue
                    d = pts[bucket] - pts[i]
                    if (np.einsum("nk,nk->n", d, d) < r2).any():
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            kept.append(i)
            grid.setdefault((int(cx), int(cy), int(cz)), []).append(i)
    return pts[np.asarray(kept, dtype=np.int64)]


def poisson_disk_sample(
    source,
    radius: float | None = None,
    count: int | None = None,
    seed: int = 0,
    candidate_factor: int = 30,
) -> SampledSurface:
    """Blue-noise surface samples with a guaranteed minimum spacing.

    `source` is a mesh (surface dart throwing over area-weighted candidates)
    or an (N, 3) point array (subset selection).  Give either `radius` or
    `count`; for a count, the radius is bisected until the kept sample count
    lands within +/-5%.
    """
    if (radius is None) == (count is None):
        raise ValidationError("give exactly one of radius or count")
    rng = np.random.default_rng(seed)
    is_mesh = hasattr(source, "faces")
    if is_mesh:
        a = source.vertices[source.faces[:, 0]]
        b = source.vertices[source.faces[:, 1]]
        c = source.vertices[source.faces[:, 2]]
        area = float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())
    else:
        source = np.asarray(source, dtype=np.float64)
        if source.ndim != 2 or source.shape[1] != 3 or len(source) == 0:
            raise ValidationError("point source must be nonempty (N, 3)")
        area = None

    def run(r: float) -> np.ndarray:
        if is_mesh:
            want = max(int(candidate_factor * max(area / (r * r), 1.0)), 64)
            want = min(want, 2_000_000)
            cands = _surface_candidates(source, want, np.random.default_rng(seed))
        else:
            cands = source
        return _dart_throw(cands, r)

    if radius is not None:
        pts = run(float(radius))
        return SampledSurface(pts, float(radius))

    if count < 1:
        raise ValidationError("count must be >= 1")
    if not is_mesh and count > len(source):
        raise ValidationError(f"requested {count} samples, point source has only {len(source)}")
    if is_mesh:
        r = float(np.sqrt(area / count * 2.0 / np.sqrt(3.0)))
    else:
        bbox = source.max(axis=0) - source.min(axis=0)
        r = float(np.linalg.norm(bbox) / max(count, 1) ** (1.0 / 3.0))
    lo_r, hi_r = None, None
    best = None
    for _ in range(30):
        pts = run(r)
        n = len(pts)
        if best is None or abs(n - count) < abs(len(best) - count):
            best = pts
        if abs(n - count) <= 0.05 * count:
            return SampledSurface(pts, r)
        if n < count:
            hi_r = r
            r = r / 2.0 if lo_r is None else 0.5 * (lo_r + r)
        else:
            lo_r = r
            r = r * 2.0 if hi_r is None else 0.5 * (r + hi_r)
    raise ValidationError(
        f"could not reach {count} samples within 5%; achievable maximum here was {len(best)}"
    )


# ---------------------------------------------------------------------------
# Chamfer loss


def chamfer(
    vertices: np.ndarray,
    samples: np.ndarray,
    sample_index: NearestNeighborIndex | None = None,
    grid_cell: float | None = None,
) -> tuple[float, np.ndarray]:
    """Symmetric sum of squared nearest-neighbor distances and its vertex gradient.

    Both directions contribute: each vertex pulls toward its nearest sample,
    and each sample pulls its nearest vertex.  Returns (loss, grad (N, 3)).
    """
    v = np.asarray(vertices, dtype=np.float64)
    s = np.asarray(samples, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3 or len(v) == 0:
        raise ValidationError("chamfer: vertices must be nonempty (N, 3)")
    if s.ndim != 2 or s.shape[1] != 3 or len(s) == 0:
        raise ValidationError("chamfer: samples must be nonempty (S, 3)")
    if sample_index is None:
        sample_index = NearestNeighborIndex(s, grid_cell)
    v_index = NearestNeighborIndex(v, grid_cell)

    nn_s, d2_vs = sample_index.query(v)  # vertex -> sample
    nn_v, d2_sv = v_index.query(s)  # sample -> vertex
    loss = float(d2_vs.sum() + d2_sv.sum())
    grad = 2.0 * (v - s[nn_s])
    # Scatter the sample-side term onto its matched vertices deterministically.
    np.add.at(grad, nn_v, 2.0 * (v[nn_v] - s))
    return loss, grad


def chamfer_report(vertices: np.ndarray, samples: np.ndarray) -> dict:
    """Distance-unit metrics: root-mean squared NN distance pooled over both
    directions (cd) and the symmetric max NN distance (hd)."""
    v = np.asarray(vertices, dtype=np.float64)
    s = np.asarray(samples, dtype=np.float64)
    _, d2_vs = NearestNeighborIndex(s).query(v)
    _, d2_sv = NearestNeighborIndex(v).query(s)
    cd = float(np.sqrt((d2_vs.sum() + d2_sv.sum()) / (len(v) + len(s))))
    hd = float(np.sqrt(max(d2_vs.max(), d2_sv.max())))
    return {"cd": cd, "hd": hd}


def uniform_laplacian(faces: np.ndarray, n: int) -> sp.csr_matrix:
    """L = I - D^-1 A over the mesh edge graph."""
    rows, cols = [], []
    for i in range(3):
        rows.append(faces[:, i])
        cols.append(faces[:, (i + 1) % 3])
        rows.append(faces[:, (i + 1) % 3])
        cols.append(faces[:, i])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    adj.data[:] = 1.0  # collapse duplicated edges to a binary adjacency
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    deg[deg == 0] = 1.0
    dinv = sp.diags(1.0 / deg)
    return (sp.eye(n) - dinv @ adj).tocsr()


@dataclass
class FitResult:
    displacements: np.ndarray
    graph: EmbeddedGraph
    loss_history: list = field(default_factory=list)
    best_loss: float = np.inf
    best_iteration: int = -1
    initial_loss: float = np.inf


def fit_frame(
    template: TemplateMesh,
    graph: EmbeddedGraph,
    skinning: SkinningWeights,
    skeleton: Skeleton,
    frame: MotionFrame,
    target: SampledSurface,
    config: FitConfig,
    hand_mask: HandMask | None = None,
    initial_displacements: np.ndarray | None = None,
) -> FitResult:
    """Optimize per-vertex displacements (optionally graph parameters) against
    a target surface sample set.

    Returns the best-loss iterate seen along the trajectory.  Hand-frozen
    parameters stay exactly zero, values and gradients both.
    """
    mask = hand_mask if hand_mask is not None else HandMask.empty(graph)
    d = np.zeros_like(template.vertices) if initial_displacements is None else np.array(initial_displacements, dtype=np.float64)
    graph, d = apply_hand_freeze(graph, d, mask)
    rot_vertex, tra_vertex = dqs_vertex_transforms(skeleton, skinning, frame)  # fixed pose

    lap = uniform_laplacian(template.faces, template.num_vertices)
    if config.lambda_lap is None:
        edges = template.vertices[template.faces[:, [0, 1, 2]]] - template.vertices[template.faces[:, [1, 2, 0]]]
        mean_edge = float(np.linalg.norm(edges.reshape(-1, 3), axis=1).mean())
        lam = 0.1 / (mean_edge * mean_edge)
    else:
        lam = float(config.lambda_lap)

    sample_index = NearestNeighborIndex(target.points, config.grid_cell)
    rot = np.array(graph.rotations)
    tra = np.array(graph.translations)
    a_idx = np.where(graph.vertex_nodes < 0, 0, graph.vertex_nodes)
    w = graph.vertex_weights

    best = FitResult(d.copy(), graph.with_params(rot.copy(), tra.copy()))
    history: list[float] = []
    for it in range(config.iterations + 1):
        g = graph.with_params(rot, tra)
        y = embedded_deform(template, g, d)
        v = np.einsum("nij,nj->ni", rot_vertex, y) + tra_vertex
        loss_ch, grad_v = chamfer(v, target.points, sample_index, config.grid_cell)
        ld = lap @ d
        loss = loss_ch + lam * float((ld * ld).sum())
        if not np.isfinite(loss):
            dump = tempfile.NamedTemporaryFile(prefix="holochar_fit_dump_", suffix=".npz", delete=False)
            np.savez(dump, displacements=d, rotations=rot, translations=tra, iteration=it)
            raise NumericError(f"non-finite fit loss at iteration {it}; iterate dumped to {dump.name}")
        history.append(loss)
        if it == 0:
            best.initial_loss = loss
        if loss < best.best_loss:
            best.best_loss = loss
            best.best_iteration = it
            best.displacements = d.copy()
            best.graph = g
        if it == config.iterations:
            break

        grad_y = np.einsum("nji,nj->ni", rot_vertex, grad_v)  # R^T g
        grad_d = grad_y + 2.0 * lam * (lap.T @ ld)
        grad_d[mask.vertex_mask] = 0.0
        d = d - config.learning_rate * grad_d
        d[mask.vertex_mask] = 0.0

        if config.optimize_graph:
            diff = template.vertices[:, None, :] - graph.nodes[a_idx]  # (N, M, 3)
            wg = w[..., None] * grad_y[:, None, :]  # (N, M, 3)
            grad_t = np.zeros_like(tra)
            np.add.at(grad_t, a_idx.reshape(-1), wg.reshape(-1, 3))
            jac = euler_to_matrix_jacobian(rot)  # (K, 3, 3, 3)
            rotated = np.einsum("nmaij,nmj->nmai", jac[a_idx], diff)  # dR/da applied
            contrib = np.einsum("nmai,nmi->nma", rotated, wg)
            grad_a = np.zeros_like(rot)
            np.add.at(grad_a, a_idx.reshape(-1), contrib.reshape(-1, 3))
            grad_t[mask.node_mask] = 0.0
            grad_a[mask.node_mask] = 0.0
            tra = tra - config.learning_rate * grad_t
            rot = rot - config.learning_rate * grad_a
            tra[mask.node_mask] = 0.0
            rot[mask.node_mask] = 0.0

    best.loss_history = history
    return best
