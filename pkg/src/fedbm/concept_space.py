"""Concept embeddings, per-class Gaussian estimates, and the frozen classifier.

A concept embedding set holds K classes x M prompt variants x D dimensions of
text-encoder output.  Each class gets a diagonal Gaussian fitted over its M
prompt embeddings; the stacked means and variances form a frozen linear
classifier whose logits include a second-order variance term.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CEB1_MAGIC = b"CEB1"


class CEB1Error(ValueError):
    """Base error for malformed concept-embedding files."""


class CEB1HeaderError(CEB1Error):
    """Bad magic or invalid header dimensions."""


class CEB1PayloadError(CEB1Error):
    """Truncated name table or payload size mismatch."""


class CEB1ValueError(CEB1Error):
    """Non-finite values in the embedding payload."""


class CEB1PromptCountError(CEB1Error):
    """Fewer than two prompt variants per class."""


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ConceptEmbeddingSet:
    """Embeddings of shape (K, M, D) plus the class names in file order."""

    embeddings: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 3:
            raise CEB1HeaderError(f"embeddings must be 3-d (K, M, D), got shape {emb.shape}")
        k, m, d = emb.shape
        if k < 1 or d < 1:
            raise CEB1HeaderError(f"class and dimension counts must be positive, got K={k}, D={d}")
        if m < 2:
            raise CEB1PromptCountError(f"need at least 2 prompt variants per class, got M={m}")
        if len(self.class_names) != k:
            raise CEB1PayloadError(
                f"{len(self.class_names)} class names for {k} embedding rows"
            )
        if not np.all(np.isfinite(emb)):
            raise CEB1ValueError("embeddings contain non-finite values")
        object.__setattr__(self, "embeddings", _frozen(emb))
        object.__setattr__(self, "class_names", tuple(str(n) for n in self.class_names))

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def num_prompts(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]


@dataclass(frozen=True)
class ConceptDistribution:
    """Diagonal Gaussian over one class's prompt embeddings."""

    mean: np.ndarray
    var: np.ndarray
    class_name: str = ""

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mean.ndim != 1 or var.shape != mean.shape:
            raise ValueError(f"mean/var must be matching 1-d arrays, got {mean.shape} and {var.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise ValueError("distribution parameters contain non-finite values")
        if np.any(var < 0):
            raise ValueError("variances must be non-negative")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "var", _frozen(var))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class DistributionClassifier:
    """Frozen classifier built from stacked class means and variances.

    ``means`` and ``variances`` have shape (D, K); column k belongs to class k.
    The parameters are never trained and the arrays are write-protected.
    """

    means: np.ndarray
    variances: np.ndarray
    temperature: float = 1.0
    class_names: tuple[str, ...] = field(default=())
    frozen: bool = field(default=True, init=False)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        variances = np.asarray(self.variances, dtype=np.float64)
        if means.ndim != 2 or variances.shape != means.shape:
            raise ValueError(
                f"means/variances must be matching (D, K) arrays, got {means.shape} and {variances.shape}"
            )
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(variances))):
            raise ValueError("classifier parameters contain non-finite values")
        if np.any(variances < 0):
            raise ValueError("classifier variances must be non-negative")
        tau = float(self.temperature)
        if not np.isfinite(tau) or tau <= 0:
            raise ValueError(f"temperature must be positive and finite, got {tau}")
        if self.class_names and len(self.class_names) != means.shape[1]:
            raise ValueError(f"{len(self.class_names)} class names for {means.shape[1]} classes")
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "variances", _frozen(variances))
        object.__setattr__(self, "temperature", tau)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def dim(self) -> int:
        return self.means.shape[0]

    @property
    def num_classes(self) -> int:
        return self.means.shape[1]


def load_embeddings(path) -> ConceptEmbeddingSet:
    """Read a CEB1 file and return its embedding set.

    Layout (little-endian): magic ``CEB1``; u32 K, M, D; K class names, each a
    u32 byte length followed by UTF-8 bytes; then K*M*D float32 values, class-
    major, prompt-major, dimension-minor.  Values are taken as-is; no
    re-normalization happens here.
    """
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != CEB1_MAGIC:
        raise CEB1HeaderError(f"bad magic in {path!s}: expected {CEB1_MAGIC!r}")
    if len(data) < 16:
        raise CEB1HeaderError(f"truncated header in {path!s}")
    k, m, d = struct.unpack_from("<III", data, 4)
    if k < 1 or d < 1:
        raise CEB1HeaderError(f"invalid header counts K={k}, M={m}, D={d}")
    if m < 2:
        raise CEB1PromptCountError(f"header declares M={m} prompts per class, need at least 2")
    off = 16
    names = []
    for i in range(k):
        if off + 4 > len(data):
            raise CEB1PayloadError(f"name table truncated at entry {i}")
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + nlen > len(data):
            raise CEB1PayloadError(f"name table truncated inside entry {i}")
        try:
            names.append(data[off : off + nlen].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CEB1PayloadError(f"name entry {i} is not valid UTF-8") from exc
        off += nlen
    expected = k * m * d * 4
    if len(data) - off != expected:
        raise CEB1PayloadError(
            f"payload size mismatch: expected {expected} bytes of float32, found {len(data) - off}"
        )
    flat = np.frombuffer(data, dtype="<f4", count=k * m * d, offset=off)
    emb = flat.astype(np.float64).reshape(k, m, d)
    if not np.all(np.isfinite(emb)):
        raise CEB1ValueError("embedding payload contains non-finite values")
    return ConceptEmbeddingSet(embeddings=emb, class_names=tuple(names))


def write_embeddings(eset: ConceptEmbeddingSet, path) -> None:
    """Write an embedding set to the CEB1 binary layout."""
    parts = [CEB1_MAGIC, struct.pack("<III", eset.num_classes, eset.num_prompts, eset.dim)]
    for name in eset.class_names:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
    parts.append(np.ascontiguousarray(eset.embeddings, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def estimate_distributions(eset: ConceptEmbeddingSet) -> list[ConceptDistribution]:
    """Fit one diagonal Gaussian per class over its M prompt embeddings.

    Mean is the per-dimension average; variance is the unbiased (M-1 divisor)
    per-dimension sample variance.
    """
    out = []
    for k in range(eset.num_classes):
        rows = eset.embeddings[k]
        mean = rows.mean(axis=0)
        var = rows.var(axis=0, ddof=1)
        out.append(ConceptDistribution(mean=mean, var=var, class_name=eset.class_names[k]))
    return out


def build_classifier(
    dists: list[ConceptDistribution], temperature: float = 1.0
) -> DistributionClassifier:
    """Stack per-class distributions into a frozen classifier."""
    if not dists:
        raise ValueError("need at least one class distribution")
    d = dists[0].dim
    for i, dist in enumerate(dists):
        if dist.dim != d:
            raise ValueError(f"distribution {i} has dim {dist.dim}, expected {d}")
    means = np.stack([dist.mean for dist in dists], axis=1)
    variances = np.stack([dist.var for dist in dists], axis=1)
    names = tuple(dist.class_name for dist in dists)
    return DistributionClassifier(
        means=means, variances=variances, temperature=temperature, class_names=names
    )


def classifier_logits(clf: DistributionClassifier, features: np.ndarray) -> np.ndarray:
    """Logits of the frozen classifier for a feature batch of shape (B, D).

    logit[i, k] = tau * <h_i, mu_k> + tau^2/2 * <h_i*h_i, var_k>.
    Rows of ``features`` are expected to be L2-normalized by the caller.
    """
    h = np.asarray(features, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != clf.dim:
        raise ValueError(f"features must have shape (B, {clf.dim}), got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("features contain non-finite values")
    tau = clf.temperature
    return tau * (h @ clf.means) + 0.5 * tau * tau * ((h * h) @ clf.variances)


def classifier_logits_backward(
    clf: DistributionClassifier, features: np.ndarray, dlogits: np.ndarray
) -> np.ndarray:
    """Gradient of ``classifier_logits`` with respect to the features."""
    h = np.asarray(features, dtype=np.float64)
    g = np.asarray(dlogits, dtype=np.float64)
    if g.shape != (h.shape[0], clf.num_classes):
        raise ValueError(f"dlogits must have shape ({h.shape[0]}, {clf.num_classes}), got {g.shape}")
    tau = clf.temperature
    return tau * (g @ clf.means.T) + tau * tau * h * (g @ clf.variances.T)


def sample_concept_condition(
    dists: list[ConceptDistribution], label: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw one condition vector z = mu_y + sqrt(var_y) * eps, eps ~ N(0, I)."""
    if not 0 <= label < len(dists):
        raise ValueError(f"label {label} out of range for {len(dists)} classes")
    dist = dists[label]
    eps = rng.standard_normal(dist.dim)
    return dist.mean + np.sqrt(dist.var) * eps


def sample_condition_batch(
    dists: list[ConceptDistribution], labels: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw a (B, D) batch of condition vectors for the given integer labels."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= len(dists)):
        raise ValueError(f"labels out of range for {len(dists)} classes")
    means = np.stack([d.mean for d in dists], axis=0)
    stds = np.sqrt(np.stack([d.var for d in dists], axis=0))
    eps = rng.standard_normal((labels.shape[0], means.shape[1]))
    return means[labels] + stds[labels] * eps
