"""Boundary-seeking active learning loop for the collision detector.

The latent sampling region is the axis-aligned box spanned by the training
encodings.  Labeled samples partition by signed penetration depth into
positive / negative / boundary subsets; the detector trains on a four-term
loss (per-domain depth regression, margin ranking, cross entropy off the
boundary, l1 pull of the probability to 0.5 on the boundary).  Between
model updates, half of each augmentation batch is pulled onto the current
0.5-levelset by a damped Gauss-Newton iteration before labeling; the other
half explores uniformly.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .detector import Detector
from .geom import CollisionSample

SAMPLE_FILE_MAGIC = b"SCDC"


class ActiveLearningError(RuntimeError):
    pass


class Partition(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    BOUNDARY = "boundary"


def classify_pd(pd: float, eps: float) -> Partition:
    """Three-way split of a signed depth against the boundary threshold."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if pd > eps:
        return Partition.POSITIVE
    if pd < 0.0:
        return Partition.NEGATIVE
    return Partition.BOUNDARY


def partition(sample: CollisionSample, eps: float) -> Partition:
    return classify_pd(sample.pd, eps)


# ---------------------------------------------------------------------------
# sampling region

@dataclass(frozen=True)
class LatentBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(self.lo > self.hi):
            raise ValueError("box needs lo <= hi per axis")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def contains(self, z: np.ndarray, atol: float = 0.0) -> bool:
        z = np.asarray(z)
        return bool(np.all(z >= self.lo - atol) and np.all(z <= self.hi + atol))

    def clamp(self, z: np.ndarray) -> np.ndarray:
        return np.clip(z, self.lo, self.hi)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random((n, self.dim))
        return self.lo + u * (self.hi - self.lo)


def latent_box(encodings: np.ndarray) -> LatentBox:
    encodings = np.atleast_2d(np.asarray(encodings, dtype=np.float64))
    if encodings.size == 0:
        raise ValueError("need at least one encoding")
    return LatentBox(lo=encodings.min(axis=0), hi=encodings.max(axis=0))


def sample_uniform(box: LatentBox, n: int, seed: int) -> np.ndarray:
    return box.sample(np.random.default_rng(seed), n)


# ---------------------------------------------------------------------------
# labeled dataset

@dataclass
class CollisionDataset:
    """Append-only store of labeled latent samples plus its subset views."""

    samples: list = field(default_factory=list)
    eps: float = 1e-4

    def __len__(self) -> int:
        return len(self.samples)

    def append(self, new_samples):
        self.samples.extend(new_samples)

    @property
    def z_matrix(self) -> np.ndarray:
        return np.stack([s.z for s in self.samples])

    @property
    def pd_vector(self) -> np.ndarray:
        return np.array([s.pd for s in self.samples])

    @property
    def pd_domain_matrix(self) -> np.ndarray:
        return np.stack([s.pd_per_domain for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset_indices(self) -> dict:
        pd = self.pd_vector
        return {
            Partition.POSITIVE: np.nonzero(pd > self.eps)[0],
            Partition.NEGATIVE: np.nonzero(pd < 0.0)[0],
            Partition.BOUNDARY: np.nonzero((pd >= 0.0) & (pd <= self.eps))[0],
        }

    def subset_counts(self) -> dict:
        return {p.value: int(len(ix)) for p, ix in self.subset_indices().items()}

    # binary layout per sample: z, pd, pd_per_domain, label (all float64)
    def save(self, path):
        path = Path(path)
        if not self.samples:
            raise ActiveLearningError("refusing to save an empty dataset")
        dim = len(self.samples[0].z)
        n_dom = len(self.samples[0].pd_per_domain)
        rows = np.stack([
            np.concatenate([s.z, [s.pd], s.pd_per_domain, [float(s.label)]])
            for s in self.samples
        ])
        with open(path.with_suffix(".bin"), "wb") as fh:
            fh.write(SAMPLE_FILE_MAGIC)
            fh.write(rows.astype("<f8").tobytes())
        manifest = {
            "n": len(self.samples),
            "latent_dim": dim,
            "n_domains": n_dom,
            "eps": self.eps,
            "subset_counts": self.subset_counts(),
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "CollisionDataset":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        raw = path.with_suffix(".bin").read_bytes()
        if raw[:4] != SAMPLE_FILE_MAGIC:
            raise ActiveLearningError(f"{path}: bad sample file magic")
        dim, n_dom, n = manifest["latent_dim"], manifest["n_domains"], manifest["n"]
        rows = np.frombuffer(raw[4:], dtype="<f8").reshape(n, dim + n_dom + 2)
        samples = [
            CollisionSample(
                z=rows[i, :dim].copy(),
                pd=float(rows[i, dim]),
                pd_per_domain=rows[i, dim + 1 : dim + 1 + n_dom].copy(),
                label=int(rows[i, -1]),
            )
            for i in range(n)
        ]
        return cls(samples=samples, eps=manifest["eps"])


# ---------------------------------------------------------------------------
# risk-seeking projection onto the learned decision boundary

@dataclass
class ProjectionResult:
    z: np.ndarray
    converged: bool
    iters: int
    flagged: bool = False  # non-finite encountered; sample abandoned as-is


def project_to_boundary(z: np.ndarray, detector: Detector, box: LatentBox,
                        eps_z: float = 1e-7, max_iter: int = 100,
                        damping: float | None = None) -> ProjectionResult:
    zs, converged, iters, flagged = project_batch(
        np.asarray(z, dtype=np.float64)[None, :], detector, box,
        eps_z=eps_z, max_iter=max_iter, damping=damping)
    return ProjectionResult(zs[0], bool(converged[0]), int(iters[0]), bool(flagged[0]))


def project_batch(zs: np.ndarray, detector: Detector, box: LatentBox,
                  eps_z: float = 1e-7, max_iter: int = 100,
                  damping: float | None = None):
    """Damped Gauss-Newton pull of each code onto the 0.5-levelset.

    The scalar residual makes the damped normal equations solvable in
    closed form: dz = -g (prob - 0.5) / (lambda + |g|^2).  Iterates are
    clamped into the sampling box; a sample stops when its clamped step
    falls below eps_z in the max norm.
    """
    zs = np.array(zs, dtype=np.float64)
    n = len(zs)
    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    flagged = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        try:
            probs, grads = detector.prob_and_grad_batch(zs[idx])
        except nn.NonFiniteError:
            for k in idx:  # isolate the poisoned samples, keep the rest going
                try:
                    probs_k, grads_k = detector.prob_and_grad_batch(zs[k : k + 1])
                except nn.NonFiniteError:
                    flagged[k] = True
                    active[k] = False
            idx = np.nonzero(active)[0]
            if len(idx) == 0:
                break
            probs, grads = detector.prob_and_grad_batch(zs[idx])
        r = probs - 0.5
        g2 = (grads * grads).sum(axis=1)
        lam = damping if damping is not None else 1e-6 * (1.0 + g2)
        step = -grads * (r / (lam + g2))[:, None]
        znew = box.clamp(zs[idx] + step)
        dz = np.abs(znew - zs[idx]).max(axis=1)
        zs[idx] = znew
        iters[idx] += 1
        done = dz < eps_z
        converged[idx[done]] = True
        active[idx[done]] = False
    return zs, converged, iters, flagged


# ---------------------------------------------------------------------------
# bootstrap and data aggregation

def _label_all(oracle, zs: np.ndarray, context: str):
    samples = []
    for i, z in enumerate(zs):
        try:
            samples.append(oracle.label_latent(z))
        except Exception as err:
            raise ActiveLearningError(f"{context}: oracle failed on sample {i}: {err}") from err
    return samples


def bootstrap(n_init: int, box: LatentBox, oracle, seed: int, eps: float = 1e-4) -> CollisionDataset:
    """Uniform initial dataset; warns when one class nearly vanishes."""
    zs = sample_uniform(box, n_init, seed)
    dataset = CollisionDataset(samples=_label_all(oracle, zs, "bootstrap"), eps=eps)
    labels = dataset.labels
    if n_init:
        frac = labels.mean()
        if frac < 0.01 or frac > 0.99:
            warnings.warn(
                f"bootstrap labels are imbalanced: {frac:.1%} positive", stacklevel=2)
    return dataset


def aggregate(dataset: CollisionDataset, detector: Detector, box: LatentBox, oracle,
              n_aug: int, seed: int, eps_z: float = 1e-7, max_iter: int = 100) -> list:
    """One augmentation round: exploit (project) half, explore half.

    Returns the newly labeled samples after appending them to the dataset.
    Projected samples that fail to converge are still labeled and kept.
    """
    if len(dataset) == 0:
        raise ActiveLearningError("aggregate needs a bootstrapped dataset")
    rng = np.random.default_rng(seed)
    half = n_aug // 2
    picked = rng.integers(0, len(dataset), size=half)
    z_exploit = np.stack([dataset.samples[i].z for i in picked]) if half else np.zeros((0, box.dim))
    z_proj, converged, _, flagged = project_batch(
        z_exploit, detector, box, eps_z=eps_z, max_iter=max_iter)
    n_bad = int(flagged.sum())
    if n_bad:
        warnings.warn(f"{n_bad} projections hit non-finite values; kept unprojected",
                      stacklevel=2)
    z_explore = box.sample(rng, n_aug - half)
    new_samples = _label_all(oracle, z_proj, "aggregate/exploit")
    new_samples += _label_all(oracle, z_explore, "aggregate/explore")
    dataset.append(new_samples)
    return new_samples


# ---------------------------------------------------------------------------
# four-term model update

@dataclass
class LossWeights:
    """Loss mix; defaults are the reference operating point.

    alpha=None derives the ranking margin from the depth scale of the
    dataset at update time (5% of the mean absolute depth).
    """

    w_pd: float = 5.0
    w_pd_sum: float = 0.2
    w_r: float = 2.0
    w_ce: float = 2.0
    w_b: float = 0.5
    alpha: float | None = None
    use_boundary_set: bool = True

    def __post_init__(self):
        for name in ("w_pd", "w_pd_sum", "w_r", "w_ce", "w_b"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


MAX_RANK_PAIRS = 4096


def _ranking_pairs(pd: np.ndarray, rng: np.random.Generator):
    """All ordered index pairs with pd[a] < pd[b], subsampled to the cap."""
    less = pd[:, None] < pd[None, :]
    a, b = np.nonzero(less)
    if len(a) > MAX_RANK_PAIRS:
        pick = rng.choice(len(a), size=MAX_RANK_PAIRS, replace=False)
        pick.sort()
        a, b = a[pick], b[pick]
    return a, b


def detector_loss(tape: nn.Tape, leaves: dict, detector: Detector, z: np.ndarray,
                  pd: np.ndarray, pdd: np.ndarray, eps: float, weights: LossWeights,
                  alpha: float, rng: np.random.Generator):
    """Build the four-term training loss on one minibatch; returns
    (total, components dict of floats)."""
    zvar = tape.leaf(z, "batch_z")
    logit, s = detector.forward_var(tape, leaves, zvar)
    logit_flat = tape.sum_axis(logit, axis=1)
    comps = {}

    diff = tape.sub(s, tape.leaf(pdd, "pd_domains"))
    per_sample = tape.sum_axis(tape.square(diff), axis=1)
    sum_s = tape.sum_axis(s, axis=1)
    total_diff = tape.square(tape.sub(sum_s, tape.leaf(pd, "pd")))
    l_pd = tape.mean(tape.add(per_sample, tape.scale(total_diff, weights.w_pd_sum)))
    comps["l_pd"] = float(tape.value(l_pd))
    total = tape.scale(l_pd, weights.w_pd)

    a, b = _ranking_pairs(pd, rng)
    if len(a):
        margin = tape.sub(tape.take(sum_s, b), tape.take(sum_s, a))
        l_r = tape.mean(tape.relu(tape.add_const(tape.scale(margin, -1.0), alpha)))
        comps["l_r"] = float(tape.value(l_r))
        total = tape.add(total, tape.scale(l_r, weights.w_r))
    else:
        comps["l_r"] = 0.0

    if weights.use_boundary_set:
        ce_mask = (pd > eps) | (pd < 0.0)
    else:
        ce_mask = np.ones(len(pd), dtype=bool)
    ce_idx = np.nonzero(ce_mask)[0]
    if len(ce_idx):
        x = tape.take(logit_flat, ce_idx)
        y = tape.leaf((pd[ce_idx] > 0.0).astype(np.float64), "labels")
        l_ce = tape.mean(tape.sub(tape.softplus(x), tape.mul(x, y)))
        comps["l_ce"] = float(tape.value(l_ce))
        total = tape.add(total, tape.scale(l_ce, weights.w_ce))
    else:
        comps["l_ce"] = 0.0

    bnd_idx = np.nonzero((pd >= 0.0) & (pd <= eps))[0] if weights.use_boundary_set else []
    if weights.w_b > 0 and len(bnd_idx):
        prob_b = tape.sigmoid(tape.take(logit_flat, np.asarray(bnd_idx)))
        l_b = tape.mean(tape.abs(tape.add_const(prob_b, -0.5)))
        comps["l_b"] = float(tape.value(l_b))
        total = tape.add(total, tape.scale(l_b, weights.w_b))
    else:
        comps["l_b"] = 0.0
    return total, comps


def default_alpha(pd: np.ndarray) -> float:
    return 0.05 * float(np.abs(pd).mean())


def model_update(detector: Detector, dataset: CollisionDataset, weights: LossWeights,
                 n_epoch: int, lr: float, batch_size: int, seed: int) -> list:
    """Adam training epochs over the dataset; returns per-epoch loss rows.

    The detector parameters are updated in place (warm start across calls).
    """
    z = dataset.z_matrix
    pd = dataset.pd_vector
    pdd = dataset.pd_domain_matrix
    alpha = weights.alpha if weights.alpha is not None else default_alpha(pd)
    rng = np.random.default_rng(seed)
    adam = nn.AdamState(lr=lr)
    rows = []
    for epoch in range(n_epoch):
        order = rng.permutation(len(z))
        agg = {"total": 0.0, "l_pd": 0.0, "l_r": 0.0, "l_ce": 0.0, "l_b": 0.0}
        n_batches = 0
        for lo in range(0, len(z), batch_size):
            idx = order[lo : lo + batch_size]
            tape = nn.Tape()
            leaves = nn.leaves_for(tape, detector.params)
            try:
                total, comps = detector_loss(
                    tape, leaves, detector, z[idx], pd[idx], pdd[idx],
                    dataset.eps, weights, alpha, rng)
            except nn.NonFiniteError as err:
                raise ActiveLearningError(f"model_update diverged at epoch {epoch}: {err}") from err
            tape.backward(total)
            grads = {k: tape.grad(v) for k, v in leaves.items()}
            detector.params = nn.adam_step(adam, detector.params, grads)
            agg["total"] += float(tape.value(total))
            for k, v in comps.items():
                agg[k] += v
            n_batches += 1
        rows.append({"epoch": epoch, **{k: v / n_batches for k, v in agg.items()}})
    return rows


# ---------------------------------------------------------------------------
# elbow-point detection (normalized difference curve)

@dataclass
class ElbowResult:
    size: float
    found: bool
    index: int


def elbow_point(xs, ys) -> ElbowResult:
    """Knee of an accuracy-vs-size curve: max of y - x after min-max
    normalization of both axes.  A flat difference curve means no elbow;
    the last size is returned with found=False."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) < 3:
        raise ValueError("elbow detection needs at least 3 points")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("sizes must be strictly increasing")
    xn = (xs - xs[0]) / (xs[-1] - xs[0])
    span = ys.max() - ys.min()
    if span == 0:
        return ElbowResult(size=float(xs[-1]), found=False, index=len(xs) - 1)
    yn = (ys - ys.min()) / span
    diff = yn - xn
    k = int(np.argmax(diff))
    if diff[k] <= 1e-12:
        return ElbowResult(size=float(xs[-1]), found=False, index=len(xs) - 1)
    return ElbowResult(size=float(xs[k]), found=True, index=k)
