"""FID and IS on learned style features, the repeated-FID protocol, and
k-means clustering of expert ratings."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .data import denormalize, normalize
from .diffusion import NoiseSchedule, sample_loop
from .optim import AdamState, adam_step
from .rng import RandomStream

log = logging.getLogger(__name__)

STYLE_LABELS = {"chinese": 0, "modern": 1}


# ---------------------------------------------------------------- feature extractor


@dataclass
class ClassifierConfig:
    image_size: int = 32
    channels: tuple = (8, 16)
    feature_dim: int = 32
    steps: int = 300
    batch_size: int = 64
    lr: float = 3e-3
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.feature_dim < 1 or self.steps < 0 or self.lr <= 0:
            raise ValueError("invalid classifier config")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def init_classifier(config: ClassifierConfig, stream: RandomStream) -> dict:
    c1, c2 = config.channels
    shapes = {
        "conv1.w": ((c1, 1, 3, 3), 9),
        "conv2.w": ((c2, c1, 3, 3), 9 * c1),
        "fc.w": ((config.feature_dim, 2 * c2), 2 * c2),
        "head.w": ((2, config.feature_dim), config.feature_dim),
    }
    params = {}
    for k, (name, (shape, fan_in)) in enumerate(shapes.items()):
        bound = np.sqrt(6.0 / fan_in)
        params[name] = ag.parameter(bound * (2.0 * stream.child(k).uniform(shape) - 1.0))
        params[name.replace(".w", ".b")] = ag.parameter(np.zeros(shape[0]))
    return params


def classifier_forward(x, params):
    """Return ``(features, logits)``; features are the penultimate activations."""
    x = ag.as_tensor(x)
    h = ag.silu(ag.conv2d(x, params["conv1.w"], params["conv1.b"], padding=1))
    h = ag.avg_pool2(h)
    h = ag.silu(ag.conv2d(h, params["conv2.w"], params["conv2.b"], padding=1))
    h = ag.avg_pool2(h)
    n, c = h.shape[:2]
    flat = ag.reshape(h, (n, c, -1))
    mu = ag.mean(flat, axis=2)
    centred = flat - ag.reshape(mu, (n, c, 1))
    spread = ag.mean(ag.square(centred), axis=2)  # per-channel energy carries contrast
    pooled = ag.concat([mu, spread], axis=1)
    feats = ag.silu(ag.linear(pooled, params["fc.w"], params["fc.b"]))
    return feats, ag.linear(feats, params["head.w"], params["head.b"])


@dataclass
class Extractor:
    config: ClassifierConfig
    params: dict
    kind: str = "trained"  # or "random" for the untrained fallback
    accuracy: float | None = None

    @classmethod
    def random(cls, config: ClassifierConfig, seed: int = 0) -> "Extractor":
        return cls(config, init_classifier(config, RandomStream(seed, 7)), "random")

    def _batched(self, images, which: int, batch_size: int = 256) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1] != 1:
            raise ValueError("expected images of shape (n, 1, h, w)")
        if images.size and (images.min() < -1 - 1e-6 or images.max() > 1 + 1e-6):
            raise ValueError("images must be normalised to [-1, 1]")
        out = []
        with ag.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(classifier_forward(images[i : i + batch_size], self.params)[which].data)
        return np.concatenate(out).astype(np.float64)

    def features(self, images) -> np.ndarray:
        return self._batched(images, 0)

    def probabilities(self, images) -> np.ndarray:
        logits = self._batched(images, 1)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, images) -> np.ndarray:
        return self._batched(images, 1).argmax(axis=1)


def train_classifier(images, labels, config: ClassifierConfig, log_file=None) -> Extractor:
    """Cross-entropy training of the two-class style classifier with Adam."""
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels) or len(images) < 2:
        raise ValueError("need at least two labelled images")
    params = init_classifier(config, RandomStream(config.seed, 7))
    state = AdamState()
    n = len(images)
    for step in range(config.steps):
        idx = RandomStream(config.seed, (1 << 40) + step).integers(n, min(config.batch_size, n))
        ag.zero_grad(params.values())
        _, logits = classifier_forward(images[idx], params)
        loss = ag.cross_entropy(logits, labels[idx])
        ag.backward(loss)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, config.lr)
        if log_file is not None and step % 50 == 0:
            log_file.write(f"{step}\t{float(loss.data):.6f}\n")
    ag.zero_grad(params.values())
    return Extractor(config, params, "trained")


# ---------------------------------------------------------------- Gaussians and FID


@dataclass
class FeatureGaussian:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if self.sigma.shape != (self.d, self.d):
            raise ValueError("covariance shape does not match the mean")
        if self.n < 2:
            raise ValueError("a feature Gaussian needs n >= 2")
        if np.abs(self.sigma - self.sigma.T).max(initial=0.0) > 1e-9 * max(1.0, np.abs(self.sigma).max(initial=0.0)):
            raise ValueError("covariance is not symmetric")

    @property
    def d(self) -> int:
        return self.mu.shape[0]


def fit_gaussian(features) -> FeatureGaussian:
    """Sample mean and unbiased, symmetrised sample covariance."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    n = f.shape[0]
    if n < 2:
        raise ValueError("need at least two feature vectors")
    mu = f.mean(axis=0)
    c = f - mu
    sigma = c.T @ c / (n - 1)
    return FeatureGaussian(mu, (sigma + sigma.T) / 2, n)


def _tournament(m: int):
    """Round-robin pairings of ``range(m)`` (m even): m - 1 rounds of disjoint pairs."""
    players = list(range(m))
    for _ in range(m - 1):
        yield [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        players = [players[0], players[-1]] + players[1:-1]


def jacobi_eigh(a, tol: float = 1e-14, max_sweeps: int = 30):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once in round-robin order; the
    disjoint rotations of a round are applied together. Returns ``(w, V)``
    with ``a = V diag(w) V^T``.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape != (n, n):
        raise ValueError("expected a square matrix")
    a = (a + a.T) / 2
    v = np.eye(n)
    if n < 2:
        return np.diag(a).copy(), v
    rounds = list(_tournament(n + n % 2))
    scale = np.linalg.norm(a)
    offdiag = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        if scale == 0 or np.linalg.norm(a[offdiag]) <= tol * scale:
            break
        for pairs in rounds:
            pq = np.array([(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n])
            p, q = pq[:, 0], pq[:, 1]
            apq = a[p, q]
            live = apq != 0
            if not live.any():
                continue
            p, q, apq = p[live], q[live], apq[live]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            j = np.eye(n)
            j[p, p] = c
            j[q, q] = c
            j[p, q] = s
            j[q, p] = -s
            a = j.T @ a @ j
            v = v @ j
    return np.diag(a).copy(), v


def _check_symmetric(s: np.ndarray, name: str) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"{name} is not square")
    if np.abs(s - s.T).max(initial=0.0) > 1e-6 * max(1.0, np.abs(s).max(initial=0.0)):
        raise ValueError(f"{name} is not symmetric")
    return (s + s.T) / 2


def _clamp_eigs(w: np.ndarray) -> np.ndarray:
    top = w.max(initial=0.0)
    return np.where(w < 1e-10 * top, 0.0, w)


def sqrt_trace(sigma1, sigma2) -> float:
    """``Tr((S1 S2)^(1/2))`` via the symmetric form ``S1^(1/2) S2 S1^(1/2)``."""
    s1 = _check_symmetric(sigma1, "sigma1")
    s2 = _check_symmetric(sigma2, "sigma2")
    if s1.shape != s2.shape:
        raise ValueError("covariance dimensions differ")
    w1, v1 = jacobi_eigh(s1)
    root = (v1 * np.sqrt(_clamp_eigs(w1))) @ v1.T
    m = root @ s2 @ root
    w, _ = jacobi_eigh((m + m.T) / 2)
    return float(np.sum(np.sqrt(_clamp_eigs(w))))


def frechet_distance(g1: FeatureGaussian, g2: FeatureGaussian) -> float:
    """``|mu1 - mu2|^2 + Tr S1 + Tr S2 - 2 Tr (S1 S2)^(1/2)``, floored at zero.

    Values within 1e-9 (relative to the covariance traces) of zero are
    rounding noise and reported as 0; anything more negative means a
    covariance was not positive semi-definite.
    """
    if g1.d != g2.d:
        raise ValueError(f"feature dimensions differ: {g1.d} vs {g2.d}")
    diff = g1.mu - g2.mu
    tr = float(np.trace(g1.sigma) + np.trace(g2.sigma))
    value = float(diff @ diff) + tr - 2.0 * sqrt_trace(g1.sigma, g2.sigma)
    floor = 1e-9 * max(1.0, tr)
    if value < -floor:
        raise FloatingPointError(f"negative Frechet distance {value:.3e}: covariance not PSD")
    return 0.0 if value < floor else value


# ---------------------------------------------------------------- protocol


@dataclass
class FidReport:
    fids: list
    mean: float
    std: float
    model: str
    prompt: str
    n: int
    repeats: int = 0

    @classmethod
    def from_values(cls, fids, model: str, prompt: str, n: int) -> "FidReport":
        fids = [float(f) for f in fids]
        if not fids:
            raise ValueError("no FID values")
        std = float(np.std(fids, ddof=1)) if len(fids) > 1 else 0.0
        return cls(fids, float(np.mean(fids)), std, model, prompt, n, len(fids))

    def to_dict(self) -> dict:
        return asdict(self)


def fid_repeats(generate, real_features: np.ndarray, extractor: Extractor, repeats: int, n: int, stream: RandomStream):
    """FID of ``repeats`` independent draws of ``n`` generated vs ``n`` real images.

    ``generate(stream, n)`` returns images in [-1, 1]. Reals are drawn
    uniformly with replacement from ``real_features``. Repeat ``r`` uses
    ``stream.child(2r)`` for generation and ``stream.child(2r + 1)`` for reals.
    """
    if repeats < 1:
        raise ValueError("need at least one repeat")
    d = real_features.shape[1]
    if n < d + 2:
        raise ValueError(f"n must be at least feature_dim + 2 = {d + 2} for a usable covariance")
    values = [0.0] * repeats
    for r in range(repeats):
        images = generate(stream.child(2 * r), n)
        gen = fit_gaussian(extractor.features(images))
        idx = stream.child(2 * r + 1).integers(len(real_features), n)
        real = fit_gaussian(real_features[idx])
        values[r] = frechet_distance(gen, real)
        log.info("repeat %d FID %.4f", r, values[r])
    return values


def fid_protocol(
    model,
    prompt: str,
    real_images: np.ndarray,
    extractor: Extractor,
    schedule: NoiseSchedule,
    stream: RandomStream,
    repeats: int = 10,
    n: int = 256,
    guidance: float = 1.0,
    model_tag: str = "model",
    required_identifier: str | None = None,
    batch_size: int = 128,
    decode=None,
) -> FidReport:
    """Average FID over ``repeats`` rounds of sampling ``n`` images from ``prompt``.

    ``required_identifier`` (set for DreamBooth models) must appear in the
    prompt. ``decode`` maps latent samples back to pixels for latent models.
    """
    if required_identifier is not None and required_identifier.lower() not in prompt.lower().split():
        raise ValueError(
            f"this model was fine-tuned with the identifier {required_identifier}; "
            f"the evaluation prompt must contain it (got {prompt!r})"
        )
    real_features = extractor.features(real_images)

    def generate(s, count):
        x = sample_loop(model, prompt, schedule, s, guidance, count, batch_size=batch_size, clamp=decode is None)
        if decode is not None:
            x = np.clip(decode(x), -1.0, 1.0)
        return normalize(denormalize(x))  # same 8-bit quantisation as stored images

    values = fid_repeats(generate, real_features, extractor, repeats, n, stream)
    return FidReport.from_values(values, model_tag, prompt, n)


def inception_score_from_probs(probs) -> float:
    """``exp(mean_x KL(p(y|x) || p(y)))`` with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("need a non-empty (n, classes) probability matrix")
    if np.any(p < 0) or np.abs(p.sum(axis=1) - 1).max() > 1e-6:
        raise ValueError("rows must be probability vectors")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def inception_score(images, extractor: Extractor) -> float:
    if len(images) == 0:
        raise ValueError("empty batch")
    return inception_score_from_probs(extractor.probabilities(images))


# ---------------------------------------------------------------- ratings


@dataclass
class RatingTable:
    rows: list = field(default_factory=list)  # (expert, model, score)

    def __post_init__(self):
        for expert, model, score in self.rows:
            if not 0.0 <= float(score) <= 10.0:
                raise ValueError(f"score {score} for {model} by {expert} is outside [0, 10]")
        if self.rows and not {r[0] for r in self.rows}:
            raise ValueError("no experts")

    @property
    def scores(self) -> np.ndarray:
        return np.array([float(r[2]) for r in self.rows])

    @classmethod
    def from_csv(cls, path) -> "RatingTable":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["expert", "model", "score"]:
                raise ValueError("ratings CSV must have header expert,model,score")
            rows = []
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != 3:
                    raise ValueError(f"line {lineno}: expected 3 fields")
                try:
                    rows.append((rec[0].strip(), rec[1].strip(), float(rec[2])))
                except ValueError:
                    raise ValueError(f"line {lineno}: score is not a number") from None
        if not rows:
            raise ValueError("ratings CSV has no rows")
        return cls(rows)


@dataclass
class ClusterResult:
    centers: list
    assignments: list
    inertia: float
    k: int

    def to_dict(self) -> dict:
        return asdict(self)


def _kmeans_1d(x: np.ndarray, k: int, stream: RandomStream, max_iter: int = 100):
    n = len(x)
    centers = [x[int(stream.integers(n, 1)[0])]]
    for j in range(1, k):
        d2 = np.min((x[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        u = stream.uniform(1)[0] * total
        idx = int(np.searchsorted(np.cumsum(d2), u, side="right")) if total > 0 else int(stream.integers(n, 1)[0])
        centers.append(x[min(idx, n - 1)])
    centers = np.array(centers, dtype=np.float64)
    labels = None
    for _ in range(max_iter):
        new = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            if np.any(labels == j):
                centers[j] = x[labels == j].mean()
    inertia = float(np.sum((x - centers[labels]) ** 2))
    return centers, labels, inertia


def cluster_ratings(scores, k: int = 3, stream: RandomStream | None = None, restarts: int = 50) -> ClusterResult:
    """1-D k-means with k-means++ seeding; the lowest-inertia restart wins.

    Centers come back sorted ascending and assignments index into them.
    """
    if isinstance(scores, RatingTable):
        scores = scores.scores
    x = np.asarray(scores, dtype=np.float64).ravel()
    if k < 1:
        raise ValueError("k must be positive")
    if len(x) < k:
        raise ValueError(f"need at least k={k} scores, got {len(x)}")
    if np.any(x < 0) or np.any(x > 10):
        raise ValueError("scores must lie in [0, 10]")
    if len(np.unique(x)) < k:
        raise ValueError(f"need at least k={k} distinct scores")
    stream = stream or RandomStream(0)
    best = None
    for r in range(restarts):
        centers, labels, inertia = _kmeans_1d(x, k, stream.child(r))
        if best is None or inertia < best[2] - 1e-12:
            best = (centers, labels, inertia)
    _, labels, inertia = best
    # recompute from sorted members so the result ignores input order
    centers = np.array([np.mean(np.sort(x[labels == j])) for j in range(k)])
    order = np.argsort(centers, kind="stable")
    rank = np.empty(k, dtype=np.int64)
    rank[order] = np.arange(k)
    return ClusterResult([float(c) for c in centers[order]], [int(v) for v in rank[labels]], inertia, k)
