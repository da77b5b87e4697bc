"""Segment observation descriptors.

Two interchangeable backends produce fixed-dimension vectors compared by
Euclidean distance:

* HandcraftedBackend: rotation-invariant covariance eigenvalue features, a
  saturation-weighted hue histogram, the flattened 3x3x3 semantic class grid
  and the normalization scale. Fully deterministic, no training.
* TrainableBackend: a shared per-point feature map (small dense layers over
  x,y,z,h,s,v) aggregated by coordinate-wise max over points (permutation
  invariant), concatenated with a dense transform of the semantic grid and the
  scale, then a dense head. Trained by mini-batch gradient descent on a
  point-count-weighted triplet hinge loss with analytic gradients.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import ClassTable
from .localmap import SegmentObservation

BACKEND_MAGIC = b"SSMD"
BACKEND_VERSION = 1
KIND_HANDCRAFTED = 1
KIND_TRAINABLE = 2


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# preprocessing: subsample -> normalize -> semantic grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizedSegment:
    """Fixed-size point sample centered at the origin with max norm 1."""

    points: np.ndarray       # (n, 6): x, y, z normalized + h, s, v
    cls: np.ndarray          # (n,) uint16
    class_valid: np.ndarray  # (n,) bool
    color_valid: np.ndarray  # (n,) bool
    scale: float             # meters; the normalization divisor


def subsample(obs: SegmentObservation, n_sub: int, seed: int) -> np.ndarray:
    """Indices of a uniform random sample of size n_sub; without replacement
    when enough points exist, with replacement otherwise."""
    n = obs.point_count
    if n == 0:
        raise ValueError("cannot subsample an empty observation")
    rng = np.random.default_rng(seed)
    if n >= n_sub:
        return rng.choice(n, size=n_sub, replace=False)
    return rng.choice(n, size=n_sub, replace=True)


def normalize(xyz: np.ndarray) -> tuple[np.ndarray, float]:
    """Center at the centroid and divide by the max point norm.

    All-identical point sets get scale 1 so the output stays finite.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    if len(xyz) == 0:
        raise ValueError("cannot normalize an empty point set")
    centered = xyz - xyz.mean(axis=0)
    scale = float(np.linalg.norm(centered, axis=1).max())
    if scale < 1e-12:
        return np.zeros_like(centered), 1.0
    return centered / scale, scale


def normalized_segment(obs: SegmentObservation, n_sub: int, seed: int) -> NormalizedSegment:
    idx = subsample(obs, n_sub, seed)
    nxyz, scale = normalize(obs.xyz[idx])
    points = np.concatenate([nxyz, obs.hsv[idx]], axis=1)
    return NormalizedSegment(points=points, cls=obs.cls[idx],
                             class_valid=obs.class_valid[idx],
                             color_valid=obs.color_valid[idx], scale=scale)


def semantic_grid(seg: NormalizedSegment, class_table: ClassTable) -> np.ndarray:
    """3x3x3 grid over [-1,1]^3 of per-cell normalized class histograms.

    Returns (3, 3, 3, C) with C = len(class_table); a coordinate exactly on a
    partition plane goes to the higher-index cell.
    """
    c = len(class_table)
    grid = np.zeros((3, 3, 3, c))
    if c == 0:
        return grid
    index_of = {e.id: i for i, e in
                enumerate(sorted(class_table.entries, key=lambda e: e.id))}
    xyz = seg.points[:, :3]
    cell = np.floor((xyz + 1.0) * 1.5).astype(np.int64)
    cell = np.clip(cell, 0, 2)
    for i in np.nonzero(seg.class_valid)[0]:
        ci = index_of.get(int(seg.cls[i]))
        if ci is None:
            continue
        grid[cell[i, 0], cell[i, 1], cell[i, 2], ci] += 1.0
    totals = grid.sum(axis=3, keepdims=True)
    np.divide(grid, totals, out=grid, where=totals > 0)
    return grid


# ---------------------------------------------------------------------------
# distances and loss
# ---------------------------------------------------------------------------

def descriptor_distance(d1: np.ndarray, d2: np.ndarray) -> float:
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    if d1.shape != d2.shape:
        raise ValueError(f"descriptor dimensions differ: {d1.shape} vs {d2.shape}")
    return float(np.linalg.norm(d1 - d2))


def triplet_loss(d_anchor: np.ndarray, d_positive: np.ndarray,
                 d_negative: np.ndarray, n_anchor: int, n_positive: int,
                 margin: float = 0.4) -> float:
    """Hinge loss with the positive distance weighted by the point-count
    ratio n_positive / n_anchor (incomplete positives are penalized less)."""
    if n_anchor <= 0:
        raise ValueError("anchor point count must be positive")
    sigma = n_positive / n_anchor
    dap = descriptor_distance(d_anchor, d_positive)
    dan = descriptor_distance(d_anchor, d_negative)
    return max(margin + sigma * dap - dan, 0.0)


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

class HandcraftedBackend:
    """Deterministic feature concatenation; dimension 7 + 8 + 27*C + 1."""

    kind = KIND_HANDCRAFTED

    def __init__(self, class_table: ClassTable, n_sub: int = 2048):
        self.class_table = class_table
        self.n_sub = n_sub
        self.dim = 7 + 8 + 27 * len(class_table) + 1

    def forward(self, seg: NormalizedSegment, grid: np.ndarray) -> np.ndarray:
        xyz = seg.points[:, :3]
        cov = (xyz.T @ xyz) / len(xyz)
        evals = np.linalg.eigvalsh(cov)[::-1]
        evals = np.clip(evals, 0.0, None)
        e1, e2, e3 = evals
        if e1 > 1e-12:
            geo = np.array([e1, e2, e3,
                            (e1 - e2) / e1,       # linearity
                            (e2 - e3) / e1,       # planarity
                            e3 / e1,              # scattering
                            (e1 * e2 * e3) ** (1.0 / 3.0)])
        else:
            geo = np.zeros(7)
        hue_hist = np.zeros(8)
        cmask = seg.color_valid
        if cmask.any():
            bins = np.minimum((seg.points[cmask, 3] * 8).astype(np.int64), 7)
            np.add.at(hue_hist, bins, seg.points[cmask, 4])
            total = hue_hist.sum()
            if total > 0:
                hue_hist /= total
        return np.concatenate([geo, hue_hist, grid.ravel(), [seg.scale]])

    def parameter_vector(self) -> np.ndarray:
        return np.zeros(0, dtype=np.float32)


_PARAM_ORDER = ("w1", "b1", "w2", "b2", "ws", "bs", "wh", "bh")


class TrainableBackend:
    """Per-point dense layers + max aggregation, semantic branch, dense head.

    Parameters live in float64; serialization rounds to float32 (round-trip of
    the file is bit-exact). The activation is tanh by default; "identity"
    makes every layer linear, which is handy for closed-form gradient checks.
    """

    kind = KIND_TRAINABLE

    def __init__(self, class_table: ClassTable, dim: int = 64, n_sub: int = 2048,
                 hidden1: int = 32, hidden2: int = 64, hidden_sem: int = 16,
                 activation: str = "tanh", seed: int = 0):
        if activation not in ("tanh", "identity"):
            raise ValueError("activation must be 'tanh' or 'identity'")
        self.class_table = class_table
        self.dim = dim
        self.n_sub = n_sub
        self.hidden1 = hidden1
        self.hidden2 = hidden2
        self.hidden_sem = hidden_sem
        self.activation = activation
        self.grid_dim = 27 * len(class_table)
        rng = np.random.default_rng(seed)

        def init(n_in, n_out):
            return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

        self.params = {
            "w1": init(6, hidden1), "b1": np.zeros(hidden1),
            "w2": init(hidden1, hidden2), "b2": np.zeros(hidden2),
            "ws": init(max(self.grid_dim, 1), hidden_sem), "bs": np.zeros(hidden_sem),
            "wh": init(hidden2 + hidden_sem + 1, dim), "bh": np.zeros(dim),
        }

    # -- forward / backward -------------------------------------------------

    def _act(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x) if self.activation == "tanh" else x

    def _act_grad(self, y: np.ndarray) -> np.ndarray:
        # derivative expressed through the activation output
        return 1.0 - y * y if self.activation == "tanh" else np.ones_like(y)

    def forward(self, seg: NormalizedSegment, grid: np.ndarray,
                cache: Optional[dict] = None) -> np.ndarray:
        p = self.params
        pts = seg.points
        a1 = self._act(pts @ p["w1"] + p["b1"])
        a2 = self._act(a1 @ p["w2"] + p["b2"])
        amax = np.argmax(a2, axis=0)
        pooled = a2[amax, np.arange(a2.shape[1])]
        gflat = grid.ravel() if self.grid_dim else np.zeros(1)
        sem = self._act(gflat @ p["ws"] + p["bs"])
        z = np.concatenate([pooled, sem, [seg.scale]])
        out = z @ p["wh"] + p["bh"]
        if cache is not None:
            cache.update(pts=pts, a1=a1, a2=a2, amax=amax, gflat=gflat,
                         sem=sem, z=z)
        return out

    def backward(self, cache: dict, d_out: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        grads = {}
        grads["wh"] = np.outer(cache["z"], d_out)
        grads["bh"] = d_out.copy()
        dz = p["wh"] @ d_out
        h2 = self.hidden2
        hs = self.hidden_sem
        d_pooled = dz[:h2]
        d_sem = dz[h2:h2 + hs]
        ds_pre = d_sem * self._act_grad(cache["sem"])
        grads["ws"] = np.outer(cache["gflat"], ds_pre)
        grads["bs"] = ds_pre
        da2 = np.zeros_like(cache["a2"])
        da2[cache["amax"], np.arange(h2)] = d_pooled
        da2_pre = da2 * self._act_grad(cache["a2"])
        grads["w2"] = cache["a1"].T @ da2_pre
        grads["b2"] = da2_pre.sum(axis=0)
        da1 = da2_pre @ p["w2"].T
        da1_pre = da1 * self._act_grad(cache["a1"])
        grads["w1"] = cache["pts"].T @ da1_pre
        grads["b1"] = da1_pre.sum(axis=0)
        return grads

    # -- parameter vector ---------------------------------------------------

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in _PARAM_ORDER]
                              ).astype(np.float32)

    def set_parameter_vector(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for k in _PARAM_ORDER:
            shape = self.params[k].shape
            size = self.params[k].size
            self.params[k] = flat[offset:offset + size].reshape(shape).copy()
            offset += size
        if offset != flat.size:
            raise ValueError("parameter vector size mismatch")

    def flat_size(self) -> int:
        return sum(v.size for v in self.params.values())


Backend = HandcraftedBackend | TrainableBackend


def describe(backend: Backend, obs: SegmentObservation, seed: int = 0) -> np.ndarray:
    """Full descriptor pipeline: subsample, normalize, semantic grid, forward."""
    seg = normalized_segment(obs, backend.n_sub, seed)
    grid = semantic_grid(seg, backend.class_table)
    return backend.forward(seg, grid)


def backend_hash(backend: Backend) -> int:
    payload = serialize_backend(backend)
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    rotation_prob: float = 0.0        # rotation about the vertical axis
    jitter_sigma: float = 0.0         # per-point Gaussian noise, meters
    scale_sigma: float = 0.0          # multiplicative exp(N(0, sigma))
    dropout_ratio: float = 0.0        # per-point removal probability
    section_removal_prob: float = 0.0  # half-space cut probability
    section_max_fraction: float = 0.4
    hue_shift_sigma: float = 0.0
    label_noise_prob: float = 0.0
    class_ids: tuple[int, ...] = ()   # corruption vocabulary

    @staticmethod
    def disabled() -> "AugmentParams":
        return AugmentParams()


def augment(obs: SegmentObservation, params: AugmentParams, seed: int
            ) -> SegmentObservation:
    """Seeded geometric / visual perturbations of an observation; all
    probabilities zero reproduces the input."""
    rng = np.random.default_rng(seed)
    xyz = np.array(obs.xyz)
    hsv = np.array(obs.hsv)
    cls = np.array(obs.cls)
    cv = np.array(obs.color_valid)
    lv = np.array(obs.class_valid)
    center = xyz.mean(axis=0)

    if params.rotation_prob > 0 and rng.random() < params.rotation_prob:
        ang = rng.uniform(0.0, 2.0 * np.pi)
        ca, sa = np.cos(ang), np.sin(ang)
        rot = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
        xyz = (xyz - center) @ rot.T + center
    if params.scale_sigma > 0:
        factor = math.exp(rng.normal(0.0, params.scale_sigma))
        xyz = (xyz - center) * factor + center
    if params.jitter_sigma > 0:
        xyz = xyz + rng.normal(0.0, params.jitter_sigma, size=xyz.shape)
    keep = np.ones(len(xyz), dtype=bool)
    if params.section_removal_prob > 0 and rng.random() < params.section_removal_prob:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        frac = rng.uniform(0.0, params.section_max_fraction)
        proj = (xyz - center) @ direction
        keep &= proj <= np.quantile(proj, 1.0 - frac)
    if params.dropout_ratio > 0:
        keep &= rng.random(len(xyz)) >= params.dropout_ratio
    if not keep.any():
        keep[int(rng.integers(len(xyz)))] = True
    if params.hue_shift_sigma > 0:
        shift = rng.normal(0.0, params.hue_shift_sigma)
        shifted = (hsv[cv, 0] + shift) % 1.0
        hsv[cv, 0] = np.where(shifted >= 1.0, 0.0, shifted)
    if params.label_noise_prob > 0 and params.class_ids:
        flip = lv & (rng.random(len(cls)) < params.label_noise_prob)
        cls[flip] = rng.choice(params.class_ids, size=int(flip.sum()))

    xyz, hsv, cls, cv, lv = xyz[keep], hsv[keep], cls[keep], cv[keep], lv[keep]
    return SegmentObservation(
        segment_id=obs.segment_id, obs_index=obs.obs_index,
        timestamp=obs.timestamp, xyz=xyz, hsv=hsv, cls=cls,
        color_valid=cv, class_valid=lv, centroid=xyz.mean(axis=0),
        is_final=obs.is_final)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingTriplet:
    anchor: SegmentObservation
    positive: SegmentObservation
    negative: SegmentObservation
    anchor_truth_id: int = -1
    negative_truth_id: int = -1

    def __post_init__(self):
        if (self.anchor_truth_id >= 0 and self.negative_truth_id >= 0
                and self.anchor_truth_id == self.negative_truth_id):
            raise ValueError("negative must come from a different segment")


@dataclass(frozen=True)
class TrainParams:
    margin: float = 0.4
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    augmentation: AugmentParams = field(default_factory=AugmentParams.disabled)


def _triplet_forward_backward(backend: TrainableBackend,
                              prepared: Sequence[tuple[NormalizedSegment, np.ndarray]],
                              counts: tuple[int, int],
                              margin: float) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients for one prepared (A, P, N) triplet."""
    n_anchor, n_positive = counts
    sigma = n_positive / n_anchor
    caches = [dict(), dict(), dict()]
    descs = [backend.forward(seg, grid, cache)
             for (seg, grid), cache in zip(prepared, caches)]
    da, dp, dn = descs
    diff_ap = da - dp
    diff_an = da - dn
    dap = float(np.linalg.norm(diff_ap))
    dan = float(np.linalg.norm(diff_an))
    loss = margin + sigma * dap - dan
    zero = {k: np.zeros_like(v) for k, v in backend.params.items()}
    if loss <= 0.0:
        return 0.0, zero
    g_ap = diff_ap / dap if dap > 0 else np.zeros_like(diff_ap)
    g_an = diff_an / dan if dan > 0 else np.zeros_like(diff_an)
    d_da = sigma * g_ap - g_an
    d_dp = -sigma * g_ap
    d_dn = g_an
    grads = zero
    for cache, d_out in zip(caches, (d_da, d_dp, d_dn)):
        g = backend.backward(cache, d_out)
        for k in grads:
            grads[k] += g[k]
    return loss, grads


def _prepare(backend: TrainableBackend, obs: SegmentObservation, seed: int):
    seg = normalized_segment(obs, backend.n_sub, seed)
    grid = semantic_grid(seg, backend.class_table)
    return seg, grid


def train(backend: TrainableBackend, triplets: Sequence[TrainingTriplet],
          params: TrainParams) -> list[float]:
    """Mini-batch Adam on the mean triplet loss with per-epoch augmentation.

    Returns the per-epoch mean loss history; raises TrainingDivergedError on
    non-finite loss or gradients.
    """
    if not triplets:
        raise ValueError("need at least one training triplet")
    rng = np.random.default_rng(params.seed)
    moments1 = {k: np.zeros_like(v) for k, v in backend.params.items()}
    moments2 = {k: np.zeros_like(v) for k, v in backend.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history: list[float] = []
    for _ in range(params.epochs):
        order = rng.permutation(len(triplets))
        epoch_loss = 0.0
        for start in range(0, len(order), params.batch_size):
            batch = order[start:start + params.batch_size]
            acc = {k: np.zeros_like(v) for k, v in backend.params.items()}
            batch_loss = 0.0
            for ti in batch:
                trip = triplets[int(ti)]
                obs_apn = []
                for obs in (trip.anchor, trip.positive, trip.negative):
                    aug_seed = int(rng.integers(2 ** 63))
                    obs_apn.append(augment(obs, params.augmentation, aug_seed))
                prepared = [_prepare(backend, o, int(rng.integers(2 ** 63)))
                            for o in obs_apn]
                counts = (obs_apn[0].point_count, obs_apn[1].point_count)
                loss, grads = _triplet_forward_backward(
                    backend, prepared, counts, params.margin)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss {loss}")
                batch_loss += loss
                for k in acc:
                    acc[k] += grads[k]
            inv = 1.0 / len(batch)
            step += 1
            for k, p in backend.params.items():
                g = acc[k] * inv
                if not np.isfinite(g).all():
                    raise TrainingDivergedError(f"non-finite gradient for {k}")
                moments1[k] = beta1 * moments1[k] + (1 - beta1) * g
                moments2[k] = beta2 * moments2[k] + (1 - beta2) * g * g
                m_hat = moments1[k] / (1 - beta1 ** step)
                v_hat = moments2[k] / (1 - beta2 ** step)
                if params.learning_rate != 0.0:
                    backend.params[k] = p - params.learning_rate * m_hat / (
                        np.sqrt(v_hat) + eps)
            epoch_loss += batch_loss
        history.append(epoch_loss / len(order))
    return history


def check_gradients(backend: TrainableBackend, triplet: TrainingTriplet,
                    epsilon: float = 1e-5, margin: float = 0.4,
                    n_probe: int = 64, seed: int = 0) -> float:
    """Max relative error between analytic and central finite-difference
    gradients over a random parameter subset.

    The probe must not sit at the hinge kink; callers should re-probe when
    |margin + sigma*d_AP - d_AN| < 1e-4.
    """
    rng = np.random.default_rng(seed)
    prepared = [_prepare(backend, o, int(rng.integers(2 ** 63)))
                for o in (triplet.anchor, triplet.positive, triplet.negative)]
    counts = (triplet.anchor.point_count, triplet.positive.point_count)
    _, grads = _triplet_forward_backward(backend, prepared, counts, margin)
    flat_grad = np.concatenate([grads[k].ravel() for k in _PARAM_ORDER])

    def loss_at(flat_params: np.ndarray) -> float:
        saved = {k: v.copy() for k, v in backend.params.items()}
        backend.set_parameter_vector(flat_params)
        n_anchor, n_positive = counts
        sigma = n_positive / n_anchor
        da, dp, dn = (backend.forward(seg, grid) for seg, grid in prepared)
        loss = margin + sigma * float(np.linalg.norm(da - dp)) - float(
            np.linalg.norm(da - dn))
        backend.params = saved
        return max(loss, 0.0)

    base = np.concatenate([backend.params[k].ravel() for k in _PARAM_ORDER])
    total = base.size
    probe = rng.choice(total, size=min(n_probe, total), replace=False)
    max_rel = 0.0
    for idx in probe:
        plus = base.copy()
        plus[idx] += epsilon
        minus = base.copy()
        minus[idx] -= epsilon
        numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * epsilon)
        analytic = flat_grad[idx]
        denom = max(abs(numeric), abs(analytic), 1.0)
        max_rel = max(max_rel, abs(numeric - analytic) / denom)
    return max_rel


# ---------------------------------------------------------------------------
# serialization (little-endian binary, magic "SSMD")
# ---------------------------------------------------------------------------

def serialize_backend(backend: Backend) -> bytes:
    flat = backend.parameter_vector()
    c = len(backend.class_table)
    header = BACKEND_MAGIC + struct.pack(
        "<HBHHQ", BACKEND_VERSION, backend.kind, backend.dim, c, flat.size)
    return header + flat.astype("<f4").tobytes()


def save_backend(backend: Backend, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_backend(backend))


def load_backend(path, class_table: ClassTable, n_sub: int = 2048,
                 **trainable_kwargs) -> Backend:
    """Load a backend file; trainable architecture hyperparameters must match
    the ones used at save time (defaults if none were given)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != BACKEND_MAGIC:
        raise ValueError("not a backend parameter file")
    version, kind, dim, c, count = struct.unpack("<HBHHQ", data[4:4 + 15])
    if version != BACKEND_VERSION:
        raise ValueError(f"unsupported backend file version {version}")
    if c != len(class_table):
        raise ValueError("class table size mismatch")
    flat = np.frombuffer(data[4 + 15:], dtype="<f4")
    if flat.size != count:
        raise ValueError("truncated backend parameter file")
    if kind == KIND_HANDCRAFTED:
        backend = HandcraftedBackend(class_table, n_sub=n_sub)
        if backend.dim != dim:
            raise ValueError("descriptor dimension mismatch")
        return backend
    if kind == KIND_TRAINABLE:
        backend = TrainableBackend(class_table, dim=dim, n_sub=n_sub,
                                   **trainable_kwargs)
        if backend.flat_size() != count:
            raise ValueError("parameter count does not match the architecture")
        backend.set_parameter_vector(flat)
        return backend
    raise ValueError(f"unknown backend kind {kind}")
