"""Small numpy networks with explicit backward passes.

Two architectures: a feature extractor ending in L2 normalization, used by
every client and by the frozen teacher, and a conditional generator that maps
concept-space conditions back to input space.  Parameters live in ordered
dicts of float64 arrays; gradients are hand-written and finite-difference
checked.  A flat :class:`ParameterVector` (parameters plus batch-norm running
statistics) is the unit of federation traffic and of checkpointing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
HIDDEN_EXTRACTOR = 64
HIDDEN_GENERATOR = 128
CHECKPOINT_MAGIC = b"FBM1"


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


# ---------------------------------------------------------------------------
# layer primitives


def _affine_forward(x, w, b):
    return x @ w + b


def _affine_backward(x, w, dy):
    return x.T @ dy, dy.sum(axis=0), dy @ w.T


def _bn_forward_train(x, gamma, beta):
    mu = x.mean(axis=0)
    var = x.var(axis=0)  # biased
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (mu, var, inv, xhat)


def _bn_forward_eval(x, gamma, beta, rm, rv):
    inv = 1.0 / np.sqrt(rv + BN_EPS)
    xhat = (x - rm) * inv
    return gamma * xhat + beta, (rm, rv, inv, xhat)


def _bn_backward_train(x, gamma, cache, dy, stat_grads=None):
    """Backward through train-mode batch norm.

    ``stat_grads`` optionally injects extra gradient (d_mu, d_var) flowing
    directly into the batch statistics, on top of what arrives through the
    normalized output.
    """
    mu, var, inv, xhat = cache
    b = x.shape[0]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dvar = (dxhat * (x - mu)).sum(axis=0) * (-0.5) * inv**3
    dmu = -(dxhat.sum(axis=0)) * inv + dvar * (-2.0 / b) * (x - mu).sum(axis=0)
    if stat_grads is not None:
        dmu = dmu + stat_grads[0]
        dvar = dvar + stat_grads[1]
    dx = dxhat * inv + dvar * 2.0 * (x - mu) / b + dmu / b
    return dx, dgamma, dbeta


def _bn_backward_eval(gamma, cache, dy):
    _, _, inv, xhat = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dx = dy * gamma * inv
    return dx, dgamma, dbeta


def l2_normalize(x, eps=1e-12):
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, eps)
    return x / norms, norms


def l2_normalize_backward(h, norms, dh):
    """Backward of row-wise L2 normalization: project out the radial part."""
    radial = (h * dh).sum(axis=1, keepdims=True)
    return (dh - h * radial) / norms


# ---------------------------------------------------------------------------
# models


def _check_input(x, dim, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{name} must have shape (B, {dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


class FeatureExtractor:
    """affine(d_in->64) - BN - relu - affine(64->64) - BN - relu - affine(64->D) - L2norm."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        if in_dim < 1 or out_dim < 1:
            raise ValueError(f"dims must be positive, got in={in_dim}, out={out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.mode = "train"
        h = HIDDEN_EXTRACTOR
        if rng is None:
            rng = np.random.default_rng(0)
        self.params = {
            "W1": rng.standard_normal((in_dim, h)) * np.sqrt(2.0 / in_dim),
            "b1": np.zeros(h),
            "g1": np.ones(h),
            "be1": np.zeros(h),
            "W2": rng.standard_normal((h, h)) * np.sqrt(2.0 / h),
            "b2": np.zeros(h),
            "g2": np.ones(h),
            "be2": np.zeros(h),
            "W3": rng.standard_normal((h, out_dim)) * np.sqrt(2.0 / h),
            "b3": np.zeros(out_dim),
        }
        self.stats = {
            "rm1": np.zeros(h),
            "rv1": np.ones(h),
            "rm2": np.zeros(h),
            "rv2": np.ones(h),
        }

    def forward(self, x, mode: str, update_running: bool = True):
        """Run the extractor.

        Returns ``(features, bn_batch_stats, cache)``.  In train mode
        ``bn_batch_stats`` is ``[(mu1, var1), (mu2, var2)]`` of the pre-BN
        activations and, when ``update_running`` is set, the running stats are
        updated in place as (1-m)*running + m*batch.  Eval mode uses running
        stats, mutates nothing, and returns ``None`` for the batch stats.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = _check_input(x, self.in_dim, "input")
        if mode == "train" and x.shape[0] < 2:
            raise ValueError("train mode needs a batch of at least 2 rows")
        p = self.params
        z1 = _affine_forward(x, p["W1"], p["b1"])
        if mode == "train":
            y1, bn1 = _bn_forward_train(z1, p["g1"], p["be1"])
        else:
            y1, bn1 = _bn_forward_eval(z1, p["g1"], p["be1"], self.stats["rm1"], self.stats["rv1"])
        a1 = np.maximum(y1, 0.0)
        z2 = _affine_forward(a1, p["W2"], p["b2"])
        if mode == "train":
            y2, bn2 = _bn_forward_train(z2, p["g2"], p["be2"])
        else:
            y2, bn2 = _bn_forward_eval(z2, p["g2"], p["be2"], self.stats["rm2"], self.stats["rv2"])
        a2 = np.maximum(y2, 0.0)
        z3 = _affine_forward(a2, p["W3"], p["b3"])
        h, norms = l2_normalize(z3)
        cache = {"x": x, "z1": z1, "bn1": bn1, "a1": a1, "z2": z2, "bn2": bn2,
                 "a2": a2, "z3": z3, "h": h, "norms": norms, "mode": mode}
        if mode == "train":
            batch_stats = [(bn1[0], bn1[1]), (bn2[0], bn2[1])]
            if update_running:
                m = BN_MOMENTUM
                self.stats["rm1"] = (1 - m) * self.stats["rm1"] + m * bn1[0]
                self.stats["rv1"] = (1 - m) * self.stats["rv1"] + m * bn1[1]
                self.stats["rm2"] = (1 - m) * self.stats["rm2"] + m * bn2[0]
                self.stats["rv2"] = (1 - m) * self.stats["rv2"] + m * bn2[1]
        else:
            batch_stats = None
        return h, batch_stats, cache

    def backward(self, cache, dh, bn_stat_grads=None):
        """Gradients of a scalar loss given d(loss)/d(features).

        ``bn_stat_grads`` optionally injects per-layer gradients on the batch
        statistics as ``[(dmu1, dvar1), (dmu2, dvar2)]`` (train mode only);
        this is how the statistics-matching loss reaches the generator.
        Returns ``(param_grads, dx)``.
        """
        p = self.params
        train = cache["mode"] == "train"
        if bn_stat_grads is not None and not train:
            raise ValueError("bn_stat_grads only applies to train-mode caches")
        dz3 = l2_normalize_backward(cache["h"], cache["norms"], np.asarray(dh, dtype=np.float64))
        dW3, db3, da2 = _affine_backward(cache["a2"], p["W3"], dz3)
        dy2 = da2 * (cache["a2"] > 0)
        if train:
            sg2 = bn_stat_grads[1] if bn_stat_grads is not None else None
            dz2, dg2, dbe2 = _bn_backward_train(cache["z2"], p["g2"], cache["bn2"], dy2, sg2)
        else:
            dz2, dg2, dbe2 = _bn_backward_eval(p["g2"], cache["bn2"], dy2)
        dW2, db2, da1 = _affine_backward(cache["a1"], p["W2"], dz2)
        dy1 = da1 * (cache["a1"] > 0)
        if train:
            sg1 = bn_stat_grads[0] if bn_stat_grads is not None else None
            dz1, dg1, dbe1 = _bn_backward_train(cache["z1"], p["g1"], cache["bn1"], dy1, sg1)
        else:
            dz1, dg1, dbe1 = _bn_backward_eval(p["g1"], cache["bn1"], dy1)
        dW1, db1, dx = _affine_backward(cache["x"], p["W1"], dz1)
        grads = {"W1": dW1, "b1": db1, "g1": dg1, "be1": dbe1,
                 "W2": dW2, "b2": db2, "g2": dg2, "be2": dbe2,
                 "W3": dW3, "b3": db3}
        return grads, dx

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update(self.stats)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for k in self.params:
            self.params[k] = np.array(arrays[k], dtype=np.float64)
        for k in self.stats:
            self.stats[k] = np.array(arrays[k], dtype=np.float64)


class ConditionalGenerator:
    """affine(D->128) - relu - affine(128->128) - relu - affine(128->d_in)."""

    def __init__(self, cond_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        if cond_dim < 1 or out_dim < 1:
            raise ValueError(f"dims must be positive, got cond={cond_dim}, out={out_dim}")
        self.cond_dim = cond_dim
        self.out_dim = out_dim
        h = HIDDEN_GENERATOR
        if rng is None:
            rng = np.random.default_rng(0)
        self.params = {
            "W1": rng.standard_normal((cond_dim, h)) * np.sqrt(2.0 / cond_dim),
            "b1": np.zeros(h),
            "W2": rng.standard_normal((h, h)) * np.sqrt(2.0 / h),
            "b2": np.zeros(h),
            "W3": rng.standard_normal((h, out_dim)) * np.sqrt(2.0 / h),
            "b3": np.zeros(out_dim),
        }
        self.stats: dict[str, np.ndarray] = {}

    def forward(self, z):
        z = _check_input(z, self.cond_dim, "conditions")
        p = self.params
        z1 = _affine_forward(z, p["W1"], p["b1"])
        a1 = np.maximum(z1, 0.0)
        z2 = _affine_forward(a1, p["W2"], p["b2"])
        a2 = np.maximum(z2, 0.0)
        out = _affine_forward(a2, p["W3"], p["b3"])
        cache = {"z": z, "z1": z1, "a1": a1, "z2": z2, "a2": a2}
        return out, cache

    def backward(self, cache, dout):
        p = self.params
        dout = np.asarray(dout, dtype=np.float64)
        dW3, db3, da2 = _affine_backward(cache["a2"], p["W3"], dout)
        dz2 = da2 * (cache["z2"] > 0)
        dW2, db2, da1 = _affine_backward(cache["a1"], p["W2"], dz2)
        dz1 = da1 * (cache["z1"] > 0)
        dW1, db1, dz = _affine_backward(cache["z"], p["W1"], dz1)
        grads = {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2, "W3": dW3, "b3": db3}
        return grads, dz

    def state_arrays(self) -> dict[str, np.ndarray]:
        return dict(self.params)

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for k in self.params:
            self.params[k] = np.array(arrays[k], dtype=np.float64)


class LinearHead:
    """Trainable softmax head, used only by the plain federated-averaging baseline."""

    def __init__(self, in_dim: int, num_classes: int, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.params = {
            "W": rng.standard_normal((in_dim, num_classes)) * np.sqrt(1.0 / in_dim),
            "b": np.zeros(num_classes),
        }
        self.stats: dict[str, np.ndarray] = {}

    def forward(self, h):
        return h @ self.params["W"] + self.params["b"]

    def backward(self, h, dlogits):
        grads = {"W": h.T @ dlogits, "b": dlogits.sum(axis=0)}
        dh = dlogits @ self.params["W"].T
        return grads, dh

    def state_arrays(self) -> dict[str, np.ndarray]:
        return dict(self.params)

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for k in self.params:
            self.params[k] = np.array(arrays[k], dtype=np.float64)


# ---------------------------------------------------------------------------
# flat parameter vectors


@dataclass(frozen=True)
class ParameterVector:
    """Flat float64 view of named arrays plus the layout to restore them.

    ``layout`` is a tuple of (name, shape) pairs in concatenation order.
    Running statistics travel inside the vector like any other segment, so
    averaging vectors averages them too.
    """

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if v.ndim != 1 or v.shape[0] != expected:
            raise ValueError(f"vector length {v.shape} does not match layout total {expected}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(
            self, "layout", tuple((str(n), tuple(int(s) for s in shape)) for n, shape in self.layout)
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        off = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[off : off + n].reshape(shape).copy()
            off += n
        return out


def arrays_to_vector(arrays: dict[str, np.ndarray]) -> ParameterVector:
    layout = tuple((name, tuple(a.shape)) for name, a in arrays.items())
    if arrays:
        flat = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays.values()])
    else:
        flat = np.zeros(0)
    return ParameterVector(values=flat, layout=layout)


def model_to_vector(extractor: FeatureExtractor, head: LinearHead | None = None) -> ParameterVector:
    """Flatten an extractor (and optional baseline head) with name prefixes."""
    arrays = {f"fe.{k}": v for k, v in extractor.state_arrays().items()}
    if head is not None:
        arrays.update({f"fc.{k}": v for k, v in head.state_arrays().items()})
    return arrays_to_vector(arrays)


def vector_to_model(vec: ParameterVector) -> tuple[FeatureExtractor, LinearHead | None]:
    """Rebuild the extractor (and head, if present) from a flat vector."""
    arrays = vec.to_arrays()
    fe_arrays = {k[3:]: v for k, v in arrays.items() if k.startswith("fe.")}
    fc_arrays = {k[3:]: v for k, v in arrays.items() if k.startswith("fc.")}
    if "W1" not in fe_arrays or "W3" not in fe_arrays:
        raise ValueError("vector does not contain extractor segments")
    in_dim = fe_arrays["W1"].shape[0]
    out_dim = fe_arrays["W3"].shape[1]
    fe = FeatureExtractor(in_dim, out_dim)
    fe.load_state_arrays(fe_arrays)
    head = None
    if fc_arrays:
        head = LinearHead(fc_arrays["W"].shape[0], fc_arrays["W"].shape[1])
        head.load_state_arrays(fc_arrays)
    return fe, head


def generator_to_vector(gen: ConditionalGenerator) -> ParameterVector:
    return arrays_to_vector({f"gen.{k}": v for k, v in gen.state_arrays().items()})


def vector_to_generator(vec: ParameterVector) -> ConditionalGenerator:
    arrays = {k[4:]: v for k, v in vec.to_arrays().items() if k.startswith("gen.")}
    if "W1" not in arrays:
        raise ValueError("vector does not contain generator segments")
    gen = ConditionalGenerator(arrays["W1"].shape[0], arrays["W3"].shape[1])
    gen.load_state_arrays(arrays)
    return gen


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(vec: ParameterVector, path) -> None:
    """Write a parameter vector to the FBM1 binary layout.

    Little-endian: magic ``FBM1``; u32 segment count; per segment a u32 name
    length, UTF-8 name, u32 rank, u32 dims; then the flat float64 payload.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(vec.layout))]
    for name, shape in vec.layout:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", len(shape)))
        for s in shape:
            parts.append(struct.pack("<I", s))
    parts.append(np.ascontiguousarray(vec.values, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ParameterVector:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic in {path!s}")
    (nseg,) = struct.unpack_from("<I", data, 4)
    off = 8
    layout = []
    for i in range(nseg):
        if off + 4 > len(data):
            raise CheckpointError(f"segment table truncated at entry {i}")
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + nlen + 4 > len(data):
            raise CheckpointError(f"segment table truncated inside entry {i}")
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + 4 * rank > len(data):
            raise CheckpointError(f"segment table truncated inside dims of entry {i}")
        shape = struct.unpack_from(f"<{rank}I", data, off) if rank else ()
        off += 4 * rank
        layout.append((name, tuple(shape)))
    total = sum(int(np.prod(s)) for _, s in layout)
    if len(data) - off != 8 * total:
        raise CheckpointError(
            f"payload size mismatch: expected {8 * total} bytes of float64, found {len(data) - off}"
        )
    values = np.frombuffer(data, dtype="<f8", count=total, offset=off).astype(np.float64)
    return ParameterVector(values=values, layout=tuple(layout))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam with per-array slots and a multiplicative epoch decay on the lr."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.99
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def decay_lr(self):
        self.lr *= self.decay


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """One Adam update, in place on ``params``."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for key, g in grads.items():
        if key not in state.m:
            state.m[key] = np.zeros_like(params[key])
            state.v[key] = np.zeros_like(params[key])
        state.m[key] = b1 * state.m[key] + (1 - b1) * g
        state.v[key] = b2 * state.v[key] + (1 - b2) * (g * g)
        mhat = state.m[key] / (1 - b1**t)
        vhat = state.v[key] / (1 - b2**t)
        params[key] -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params
