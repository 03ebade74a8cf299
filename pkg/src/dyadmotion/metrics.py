"""Evaluation metrics: FD, P-FD, MSE, SID, Var, PCC/rPCC, LVE, FDD.

All statistics use population (1/N) normalization. Fréchet distance fits a
Gaussian to each sample set and uses a symmetric-PSD route for the covariance
square root. SID clusters frames with a seeded Lloyd k-means (40 clusters for
expression, 20 for pose) and reports the base-2 Shannon index of each
sequence's cluster histogram.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import EXPR_DIM, MotionSequence

_RIDGE = 1e-6


def gaussian_stats(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population covariance of an N x d sample set."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"expected N x d samples, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples for a covariance")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / x.shape[0]
    return mu, cov


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(A: np.ndarray, B: np.ndarray) -> float:
    """||mu_A - mu_B||^2 + tr[C_A + C_B - 2 (C_A C_B)^(1/2)].

    The cross term is computed as the trace of sqrt(C_A^(1/2) C_B C_A^(1/2)),
    which equals tr[(C_A C_B)^(1/2)] for PSD matrices and stays real.
    """
    mu_a, cov_a = gaussian_stats(A)
    mu_b, cov_b = gaussian_stats(B)
    d = cov_a.shape[0]
    cov_a = cov_a + _RIDGE * np.eye(d)
    cov_b = cov_b + _RIDGE * np.eye(d)
    sqrt_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(sqrt_a @ cov_b @ sqrt_a)
    fd = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(cross))
    if -1e-6 < fd < 0:
        fd = 0.0
    return fd


def paired_fd(gen_listener: np.ndarray, speaker: np.ndarray, gt_listener: np.ndarray) -> float:
    """FD over feature-concatenated [listener; speaker] frames, generated vs GT."""
    gen_listener = np.asarray(gen_listener)
    speaker = np.asarray(speaker)
    gt_listener = np.asarray(gt_listener)
    if not (gen_listener.shape[0] == speaker.shape[0] == gt_listener.shape[0]):
        raise ValueError("length mismatch between generated, speaker and GT frames")
    gen_pair = np.concatenate([gen_listener, speaker], axis=1)
    gt_pair = np.concatenate([gt_listener, speaker], axis=1)
    return frechet_distance(gen_pair, gt_pair)


def mse(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def variation(seq: np.ndarray) -> float:
    """Population variance over time per dimension, averaged over dimensions."""
    seq = np.asarray(seq, dtype=np.float64)
    return float(seq.var(axis=0).mean())


# ---------------------------------------------------------------------------
# Seeded k-means (Lloyd) and the Shannon diversity index
# ---------------------------------------------------------------------------


@dataclass
class ClusterModel:
    centroids: np.ndarray
    fit_seed: int

    @property
    def K(self) -> int:
        return self.centroids.shape[0]


def _nearest_centroid(centroids: np.ndarray, data: np.ndarray) -> np.ndarray:
    # exhaustive squared distances; argmin takes the lowest index on ties
    d2 = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def kmeans_fit(data: np.ndarray, K: int, iters: int = 100, seed: int = 0) -> ClusterModel:
    """Lloyd's algorithm with k-means++-style seeded initialization."""
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if n < K:
        raise ValueError(f"need at least K={K} points, got {n}")
    rng = np.random.default_rng(seed)

    # k-means++ init
    centroids = np.empty((K, data.shape[1]))
    centroids[0] = data[rng.integers(n)]
    d2 = ((data - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            centroids[k] = data[rng.integers(n)]
        else:
            centroids[k] = data[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((data - centroids[k]) ** 2).sum(axis=1))

    for _ in range(iters):
        labels = _nearest_centroid(centroids, data)
        new = centroids.copy()
        for k in range(K):
            members = data[labels == k]
            if len(members):
                new[k] = members.mean(axis=0)
            else:
                # deterministic re-seed: farthest point from its centroid
                far = ((data - centroids[labels]) ** 2).sum(axis=1).argmax()
                new[k] = data[far]
        if np.allclose(new, centroids):
            centroids = new
            break
        centroids = new
    return ClusterModel(centroids=centroids, fit_seed=seed)


def kmeans_assign(model: ClusterModel, data: np.ndarray) -> np.ndarray:
    return _nearest_centroid(model.centroids, np.asarray(data, dtype=np.float64))


def sid(labels_or_dist, K: int | None = None) -> float:
    """Shannon index (base 2) of a cluster histogram; 0*log(0) := 0."""
    arr = np.asarray(labels_or_dist, dtype=np.float64)
    if arr.ndim != 1 or len(arr) == 0:
        raise ValueError("expected a non-empty 1-D array of labels or frequencies")
    if np.issubdtype(np.asarray(labels_or_dist).dtype, np.integer):
        counts = np.bincount(np.asarray(labels_or_dist), minlength=K or 0)
        dist = counts / counts.sum()
    else:
        dist = arr
        if (dist < 0).any():
            raise ValueError("negative frequencies")
        if abs(dist.sum() - 1.0) > 1e-9:
            raise ValueError("distribution must sum to 1")
    nz = dist[dist > 0]
    return float(-(nz * np.log2(nz)).sum())


# ---------------------------------------------------------------------------
# Correlation metrics
# ---------------------------------------------------------------------------


def pcc(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; 0 when either signal has zero variance.

    1-D inputs give the scalar correlation; 2-D T x d inputs give the
    per-dimension correlation averaged over dimensions.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    if x.ndim == 1:
        x = x[:, None]
        y = y[:, None]
    if x.shape[0] < 2:
        raise ValueError("need at least 2 time steps")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    num = (xc * yc).sum(axis=0)
    den = np.sqrt((xc**2).sum(axis=0)) * np.sqrt((yc**2).sum(axis=0))
    r = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(r.mean())


def rpcc(pred_pcc: float, gt_pcc: float) -> float:
    return abs(pred_pcc - gt_pcc)


# ---------------------------------------------------------------------------
# Vertex-space metrics (LVE, FDD) and the synthetic vertex proxy
# ---------------------------------------------------------------------------


def motion_to_vertices(frames: np.ndarray, n_vertices: int = 60, seed: int = 0) -> np.ndarray:
    """Fixed seeded linear proxy from T x 56 coefficients to T x V x 3 vertices."""
    frames = np.asarray(frames, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 56, n_vertices]))
    basis = rng.normal(size=(frames.shape[1], n_vertices * 3)) / np.sqrt(frames.shape[1])
    return (frames @ basis).reshape(frames.shape[0], n_vertices, 3)


def lip_vertex_error(pred_verts: np.ndarray, gt_verts: np.ndarray, lip_indices) -> float:
    """Per frame, max L2 error over lip vertices; averaged over frames."""
    lip = np.asarray(list(lip_indices), dtype=np.int64)
    if len(lip) == 0:
        raise ValueError("empty lip vertex set")
    pred_verts = np.asarray(pred_verts, dtype=np.float64)
    gt_verts = np.asarray(gt_verts, dtype=np.float64)
    if pred_verts.shape != gt_verts.shape:
        raise ValueError("vertex shape mismatch")
    err = np.linalg.norm(pred_verts[:, lip] - gt_verts[:, lip], axis=2)
    return float(err.max(axis=1).mean())


def upper_face_dynamics_deviation(
    pred_verts: np.ndarray, gt_verts: np.ndarray, upper_indices
) -> float:
    """Mean over upper-face vertices of dyn(gt) - dyn(pred).

    dyn(v) is the population std over time of the displacement norm
    ||vert_t(v) - mean_t vert(v)||.
    """
    upper = np.asarray(list(upper_indices), dtype=np.int64)
    if len(upper) == 0:
        raise ValueError("empty upper-face vertex set")
    pred_verts = np.asarray(pred_verts, dtype=np.float64)
    gt_verts = np.asarray(gt_verts, dtype=np.float64)
    if pred_verts.shape != gt_verts.shape:
        raise ValueError("vertex shape mismatch")
    if pred_verts.shape[0] < 2:
        raise ValueError("need at least 2 frames")

    def dyn(v):
        disp = np.linalg.norm(v - v.mean(axis=0, keepdims=True), axis=2)  # T x V
        return disp.std(axis=0)

    return float((dyn(gt_verts[:, upper]) - dyn(pred_verts[:, upper])).mean())


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


@dataclass
class MetricConfig:
    lip_vertex_indices: tuple = tuple(range(0, 10))
    upper_face_vertex_indices: tuple = tuple(range(10, 20))
    kmeans_K_expr: int = 40
    kmeans_K_pose: int = 20
    kmeans_iters: int = 100
    kmeans_seed: int = 0
    n_vertices: int = 60
    vertex_seed: int = 0
    per_clip_fd: bool = False

    def __post_init__(self):
        lips = set(self.lip_vertex_indices)
        upper = set(self.upper_face_vertex_indices)
        if not lips or not upper:
            raise ValueError("vertex index sets must be non-empty")
        if lips & upper:
            raise ValueError("lip and upper-face vertex sets must be disjoint")

    def config_hash(self) -> str:
        doc = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass
class MetricReport:
    fd_exp: float
    fd_pose: float
    pfd_exp: float
    pfd_pose: float
    mse_exp: float
    mse_pose: float
    sid_exp: float
    sid_pose: float
    var_exp: float
    var_pose: float
    rpcc_exp: float
    rpcc_pose: float
    lve: float
    fdd: float
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    CSV_FIELDS = (
        "fd_exp,fd_pose,pfd_exp,pfd_pose,mse_exp,mse_pose,"
        "sid_exp,sid_pose,var_exp,var_pose,rpcc_exp,rpcc_pose,lve,fdd"
    )

    def to_csv_row(self) -> str:
        return ",".join(f"{getattr(self, k):.6g}" for k in self.CSV_FIELDS.split(","))


def _pool(seqs: dict[str, MotionSequence], slc: slice) -> np.ndarray:
    return np.concatenate([seqs[k].frames[:, slc] for k in sorted(seqs)], axis=0)


def evaluate(
    generated: dict[str, MotionSequence],
    gt: dict[str, MotionSequence],
    speakers: dict[str, MotionSequence],
    cfg: MetricConfig | None = None,
) -> MetricReport:
    """Compute the full metric suite on aligned clip dictionaries (by clip_id)."""
    cfg = cfg or MetricConfig()
    ids = sorted(generated)
    if set(ids) != set(gt) or set(ids) != set(speakers):
        raise ValueError("clip_ids must align across generated, GT and speaker corpora")

    exp = slice(0, EXPR_DIM)
    pose = slice(EXPR_DIM, None)
    gen_exp, gen_pose = _pool(generated, exp), _pool(generated, pose)
    gt_exp, gt_pose = _pool(gt, exp), _pool(gt, pose)
    spk_exp, spk_pose = _pool(speakers, exp), _pool(speakers, pose)

    def fd_sliced(gen_pool, gt_pool, slc):
        if not cfg.per_clip_fd:
            return frechet_distance(gen_pool, gt_pool)
        vals = [
            frechet_distance(generated[i].frames[:, slc], gt[i].frames[:, slc]) for i in ids
        ]
        return float(np.mean(vals))

    fd_exp = fd_sliced(gen_exp, gt_exp, exp)
    fd_pose = fd_sliced(gen_pose, gt_pose, pose)
    pfd_exp = paired_fd(gen_exp, spk_exp, gt_exp)
    pfd_pose = paired_fd(gen_pose, spk_pose, gt_pose)
    mse_exp = mse(gen_exp, gt_exp)
    mse_pose = mse(gen_pose, gt_pose)

    km_exp = kmeans_fit(gt_exp, cfg.kmeans_K_expr, cfg.kmeans_iters, cfg.kmeans_seed)
    km_pose = kmeans_fit(gt_pose, cfg.kmeans_K_pose, cfg.kmeans_iters, cfg.kmeans_seed)
    sid_exp = float(
        np.mean([sid(kmeans_assign(km_exp, generated[i].expression), km_exp.K) for i in ids])
    )
    sid_pose = float(
        np.mean([sid(kmeans_assign(km_pose, generated[i].pose), km_pose.K) for i in ids])
    )

    var_exp = float(np.mean([variation(generated[i].expression) for i in ids]))
    var_pose = float(np.mean([variation(generated[i].pose) for i in ids]))

    def mean_pcc(listeners, slc):
        return float(
            np.mean([pcc(speakers[i].frames[:, slc], listeners[i].frames[:, slc]) for i in ids])
        )

    rpcc_exp = rpcc(mean_pcc(generated, exp), mean_pcc(gt, exp))
    rpcc_pose = rpcc(mean_pcc(generated, pose), mean_pcc(gt, pose))

    def verts(seqs):
        return np.concatenate(
            [motion_to_vertices(seqs[i].frames, cfg.n_vertices, cfg.vertex_seed) for i in ids],
            axis=0,
        )

    gen_v, gt_v = verts(generated), verts(gt)
    lve = lip_vertex_error(gen_v, gt_v, cfg.lip_vertex_indices)
    fdd = upper_face_dynamics_deviation(gen_v, gt_v, cfg.upper_face_vertex_indices)

    return MetricReport(
        fd_exp=fd_exp,
        fd_pose=fd_pose,
        pfd_exp=pfd_exp,
        pfd_pose=pfd_pose,
        mse_exp=mse_exp,
        mse_pose=mse_pose,
        sid_exp=sid_exp,
        sid_pose=sid_pose,
        var_exp=var_exp,
        var_pose=var_pose,
        rpcc_exp=rpcc_exp,
        rpcc_pose=rpcc_pose,
        lve=lve,
        fdd=fdd,
        config_hash=cfg.config_hash(),
    )
