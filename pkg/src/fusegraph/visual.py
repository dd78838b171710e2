"""Monomedia visual scoring: a diagonal-covariance Gaussian mixture as the
visual vocabulary, soft assignment histograms, likelihood-gradient image
signatures with square-root and L2 normalization, spatial pooling into
1 + 3 + 4 regions, and a dot-product kernel between signatures.

Gradient layout per region: the mixture-weight block (softmax logits, length
N), then the mean block (N x D, row major), then the per-dimension standard
deviation block (N x D). The gradient is averaged over descriptors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DataFormatError, MissingLocationsError
from .store import DescriptorSet, format_score, _read_lines

VARIANCE_FLOOR = 1e-6

REGION_NAMES = (
    "whole",
    "band-top", "band-middle", "band-bottom",
    "quad-tl", "quad-tr", "quad-bl", "quad-br",
)


@dataclass
class GmmModel:
    """Mixture weights on the simplex, means and strictly positive diagonal
    variances; ``ll_trace`` records the mean log-likelihood after each EM
    iteration."""

    weights: np.ndarray     # (N,)
    means: np.ndarray       # (N, D)
    variances: np.ndarray   # (N, D)
    ll_trace: tuple[float, ...] = ()

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def signature_dim(self) -> int:
        return self.n_components * (2 * self.dim + 1)


def _component_log_density(gmm: GmmModel, data: np.ndarray) -> np.ndarray:
    """(T, N) matrix of log w_i + log N(x | mu_i, var_i)."""
    t = data.shape[0]
    n = gmm.n_components
    out = np.empty((t, n))
    log_norm = -0.5 * gmm.dim * math.log(2.0 * math.pi)
    for i in range(n):
        diff = data - gmm.means[i]
        quad = np.sum(diff * diff / gmm.variances[i], axis=1)
        log_det = float(np.sum(np.log(gmm.variances[i])))
        out[:, i] = math.log(gmm.weights[i]) + log_norm - 0.5 * (log_det + quad)
    return out


def _responsibilities(gmm: GmmModel, data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    log_joint = _component_log_density(gmm, data)
    log_total = logsumexp(log_joint, axis=1)
    resp = np.exp(log_joint - log_total[:, None])
    return resp, log_total


def log_likelihood(gmm: GmmModel, descriptors: np.ndarray) -> float:
    """Mean per-descriptor log-likelihood."""
    data = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    _, log_total = _responsibilities(gmm, data)
    return float(np.mean(log_total))


def _farthest_point_indices(data: np.ndarray, count: int, rng: np.random.Generator) -> list[int]:
    first = int(rng.integers(data.shape[0]))
    chosen = [first]
    dist2 = np.sum((data - data[first]) ** 2, axis=1)
    while len(chosen) < count:
        nxt = int(np.argmax(dist2))
        chosen.append(nxt)
        dist2 = np.minimum(dist2, np.sum((data - data[nxt]) ** 2, axis=1))
    return chosen


def fit_gmm(descriptors: np.ndarray, n_components: int, seed: int,
            tol: float = 1e-6, max_iter: int = 200) -> GmmModel:
    """EM for a diagonal-covariance mixture, deterministic for a given seed.

    Initialization picks a random first center and then repeatedly the point
    farthest from the chosen set. Iteration stops once the mean log-likelihood
    improves by less than ``tol``. Variances are clamped at VARIANCE_FLOOR.
    """
    data = np.asarray(descriptors, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("descriptors must be a (T, D) array")
    if np.unique(data, axis=0).shape[0] < n_components:
        raise ValueError(
            f"need at least {n_components} distinct descriptors, "
            f"got {np.unique(data, axis=0).shape[0]}")

    t = data.shape[0]
    rng = np.random.default_rng(seed)
    centers = _farthest_point_indices(data, n_components, rng)
    means = data[centers].copy()
    variances = np.tile(np.maximum(data.var(axis=0), VARIANCE_FLOOR), (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)
    model = GmmModel(weights, means, variances)

    trace: list[float] = []
    previous = -np.inf
    for _ in range(max_iter):
        resp, log_total = _responsibilities(model, data)
        current = float(np.mean(log_total))
        trace.append(current)
        if current - previous < tol:
            break
        previous = current

        mass = np.maximum(resp.sum(axis=0), 1e-12)
        weights = np.maximum(mass / t, 1e-12)
        weights = weights / weights.sum()
        means = (resp.T @ data) / mass[:, None]
        second = (resp.T @ (data * data)) / mass[:, None]
        variances = np.maximum(second - means * means, VARIANCE_FLOOR)
        model = GmmModel(weights, means, variances)

    model.ll_trace = tuple(trace)
    return model


def posterior(gmm: GmmModel, descriptor: np.ndarray) -> np.ndarray:
    """Component responsibilities for a single descriptor; sums to 1."""
    data = np.asarray(descriptor, dtype=np.float64).reshape(1, -1)
    if data.shape[1] != gmm.dim:
        raise ValueError(f"descriptor dimension {data.shape[1]} != model dimension {gmm.dim}")
    resp, _ = _responsibilities(gmm, data)
    return resp[0]


def bov_vector(gmm: GmmModel, descriptors: np.ndarray) -> np.ndarray:
    """Soft assignment histogram: per-component responsibilities accumulated
    over all descriptors, so the entries sum to the descriptor count."""
    data = np.asarray(descriptors, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("descriptor set must be non-empty")
    resp, _ = _responsibilities(gmm, data)
    return resp.sum(axis=0)


def fisher_gradient(gmm: GmmModel, descriptors: np.ndarray) -> np.ndarray:
    """Average gradient of the log-likelihood with respect to the mixture
    parameters (weight logits, means, standard deviations)."""
    data = np.asarray(descriptors, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("descriptor set must be non-empty")
    t = data.shape[0]
    resp, _ = _responsibilities(gmm, data)

    grad_w = resp.mean(axis=0) - gmm.weights
    grad_mu = np.empty_like(gmm.means)
    grad_sigma = np.empty_like(gmm.means)
    sigma = np.sqrt(gmm.variances)
    for i in range(gmm.n_components):
        diff = data - gmm.means[i]
        weighted = resp[:, i:i + 1]
        grad_mu[i] = (weighted * diff).sum(axis=0) / (t * gmm.variances[i])
        grad_sigma[i] = (weighted * (diff * diff / sigma[i] ** 3 - 1.0 / sigma[i])).sum(axis=0) / t
    return np.concatenate([grad_w, grad_mu.ravel(), grad_sigma.ravel()])


def fisher_diag(gmm: GmmModel) -> np.ndarray:
    """Closed-form diagonal of the per-descriptor information matrix under a
    sharp-assignment approximation; strictly positive, used for whitening."""
    w = gmm.weights
    mu_block = (w[:, None] / gmm.variances).ravel()
    sigma_block = (2.0 * w[:, None] / gmm.variances).ravel()
    return np.concatenate([w, mu_block, sigma_block])


@dataclass
class FisherVector:
    """Whitened, square-rooted, L2 normalized gradient signature.

    ``empty_regions`` lists pooling regions that produced an all-zero block
    (no descriptors, or a vanishing gradient).
    """

    values: np.ndarray
    region_layout: str                     # "whole" or "pyramid"
    empty_regions: tuple[int, ...] = ()

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)


def normalize_fv(gradient: np.ndarray, diag: np.ndarray) -> FisherVector:
    """Whiten by 1/sqrt(diag), apply the signed square root, L2 normalize.

    The ordering makes the map invariant to positive scaling of the input.
    An all-zero gradient comes back as a flagged zero vector.
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    diag = np.asarray(diag, dtype=np.float64)
    if gradient.shape != diag.shape:
        raise ValueError("gradient and diagonal shapes differ")
    if np.any(diag <= 0):
        raise ValueError("information diagonal must be strictly positive")
    whitened = gradient / np.sqrt(diag)
    rooted = np.sign(whitened) * np.sqrt(np.abs(whitened))
    norm = float(np.linalg.norm(rooted))
    if norm == 0.0:
        return FisherVector(rooted, "whole", empty_regions=(0,))
    return FisherVector(rooted / norm, "whole")


def region_masks(locations: np.ndarray) -> list[np.ndarray]:
    """Membership masks for the 1x1, 1x3 (horizontal bands) and 2x2 layout,
    in REGION_NAMES order. Band edges are at y = 1/3 and 2/3, quadrant edges
    at x = y = 1/2; lower edges are inclusive."""
    x = locations[:, 0]
    y = locations[:, 1]
    third, two_thirds, half = 1.0 / 3.0, 2.0 / 3.0, 0.5
    return [
        np.ones(locations.shape[0], dtype=bool),
        y < third,
        (y >= third) & (y < two_thirds),
        y >= two_thirds,
        (x < half) & (y < half),
        (x >= half) & (y < half),
        (x < half) & (y >= half),
        (x >= half) & (y >= half),
    ]


def spatial_pyramid_fv(gmm: GmmModel, descriptors: DescriptorSet,
                       diag: np.ndarray | None = None) -> FisherVector:
    """Concatenate one normalized signature per pooling region (8 regions).

    Regions with no descriptors contribute zero blocks and are flagged.
    """
    if descriptors.locations is None:
        raise MissingLocationsError("descriptors carry no (x, y) locations")
    if diag is None:
        diag = fisher_diag(gmm)
    block_dim = gmm.signature_dim
    blocks: list[np.ndarray] = []
    empty: list[int] = []
    for ridx, mask in enumerate(region_masks(descriptors.locations)):
        if not mask.any():
            blocks.append(np.zeros(block_dim))
            empty.append(ridx)
            continue
        fv = normalize_fv(fisher_gradient(gmm, descriptors.vectors[mask]), diag)
        if fv.is_zero:
            empty.append(ridx)
        blocks.append(fv.values)
    return FisherVector(np.concatenate(blocks), "pyramid", tuple(empty))


def fisher_kernel(a: FisherVector, b: FisherVector) -> float:
    """Dot product between two signatures of identical layout."""
    if a.region_layout != b.region_layout:
        raise ValueError(
            f"layout mismatch: {a.region_layout!r} vs {b.region_layout!r}")
    if a.values.shape != b.values.shape:
        raise ValueError(
            f"dimension mismatch: {a.values.shape} vs {b.values.shape}")
    return float(a.values @ b.values)


def sample_descriptors(gmm: GmmModel, count: int, seed: int) -> np.ndarray:
    """Draw descriptors from the mixture itself (for calibration checks)."""
    rng = np.random.default_rng(seed)
    comps = rng.choice(gmm.n_components, size=count, p=gmm.weights)
    noise = rng.standard_normal((count, gmm.dim))
    return gmm.means[comps] + noise * np.sqrt(gmm.variances[comps])


def save_gmm(gmm: GmmModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(gmm.n_components):
            fh.write(f"weight\t{i}\t{format_score(gmm.weights[i])}\n")
        for i in range(gmm.n_components):
            fh.write(f"mean\t{i}\t{','.join(format_score(v) for v in gmm.means[i])}\n")
        for i in range(gmm.n_components):
            fh.write(f"variance\t{i}\t{','.join(format_score(v) for v in gmm.variances[i])}\n")


def load_gmm(path) -> GmmModel:
    weights: dict[int, float] = {}
    means: dict[int, list[float]] = {}
    variances: dict[int, list[float]] = {}
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataFormatError("expected 'label<TAB>index<TAB>values'", path, line_no)
        label, idx_text, values = parts
        try:
            idx = int(idx_text)
            if label == "weight":
                weights[idx] = float(values)
            elif label == "mean":
                means[idx] = [float(v) for v in values.split(",")]
            elif label == "variance":
                variances[idx] = [float(v) for v in values.split(",")]
            else:
                raise DataFormatError(f"unknown label {label!r}", path, line_no)
        except ValueError:
            raise DataFormatError("malformed numeric field", path, line_no) from None
    if not weights or set(weights) != set(means) or set(weights) != set(variances):
        raise DataFormatError("incomplete mixture description", path)
    order = sorted(weights)
    return GmmModel(
        np.asarray([weights[i] for i in order]),
        np.asarray([means[i] for i in order]),
        np.asarray([variances[i] for i in order]),
    )
