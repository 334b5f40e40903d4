"""Gated attention MIL classifier with a hand-derived backward pass.

Forward pass for a bag ``h`` of shape (n, D)::

    score_k = w . (tanh(V h_k) * sigmoid(U h_k))
    a       = softmax(score)
    z       = sum_k a_k h_k
    prob    = sigmoid(c . z + b)

All arithmetic is float64; checkpoints store float32.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Callable, Optional, Sequence

import numpy as np

from .core import ContractError, FormatError, Label, SlideMilError, TruncationError
from .encoder import EmbeddingBag

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12
CKPT_MAGIC = b"ABML"
CKPT_VERSION = 1


class NumericError(SlideMilError, ArithmeticError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


@dataclass(eq=False)
class AbmilParams:
    V: np.ndarray  # (H, D)
    U: np.ndarray  # (H, D)
    w: np.ndarray  # (H,)
    c: np.ndarray  # (D,)
    b: float = 0.0

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        self.U = np.asarray(self.U, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        self.b = float(self.b)
        H, D = self.V.shape
        if self.U.shape != (H, D) or self.w.shape != (H,) or self.c.shape != (D,):
            raise ContractError(
                f"inconsistent shapes V{self.V.shape} U{self.U.shape} w{self.w.shape} c{self.c.shape}"
            )

    @property
    def dim(self) -> int:
        return self.V.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.V.shape[0]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.V.ravel(), self.U.ravel(), self.w, self.c, [self.b]])

    @classmethod
    def from_vector(cls, vec: np.ndarray, dim: int, hidden_dim: int) -> "AbmilParams":
        D, H = dim, hidden_dim
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (2 * H * D + H + D + 1,):
            raise ContractError(f"vector of length {vec.shape} does not match D={D}, H={H}")
        i = 0
        V = vec[i:i + H * D].reshape(H, D); i += H * D  # noqa: E702
        U = vec[i:i + H * D].reshape(H, D); i += H * D  # noqa: E702
        w = vec[i:i + H]; i += H  # noqa: E702
        c = vec[i:i + D]; i += D  # noqa: E702
        return cls(V.copy(), U.copy(), w.copy(), c.copy(), float(vec[i]))

    def copy(self) -> "AbmilParams":
        return AbmilParams(self.V.copy(), self.U.copy(), self.w.copy(), self.c.copy(), self.b)

    def allclose(self, other: "AbmilParams", **kw) -> bool:
        return np.allclose(self.to_vector(), other.to_vector(), **kw)

    def __eq__(self, other):
        if not isinstance(other, AbmilParams):
            return NotImplemented
        return self.V.shape == other.V.shape and np.array_equal(self.to_vector(), other.to_vector())


def init_params(dim: int, hidden_dim: int = 128, seed: int = 0) -> AbmilParams:
    """Seeded initial parameters.

    ``V`` and ``U`` rows are uniform in +-sqrt(1/D), ``w`` uniform in
    +-sqrt(1/H). The classifier head starts at zero: attention then only
    starts to move once ``c`` has picked up the class signal from the pooled
    features, which avoids the runs where a random head steers attention away
    from the informative instances.
    """
    if dim < 1 or hidden_dim < 1:
        raise ContractError("dim and hidden_dim must be >= 1")
    rng = np.random.default_rng(seed)
    bd, bh = math.sqrt(1.0 / dim), math.sqrt(1.0 / hidden_dim)
    return AbmilParams(
        V=rng.uniform(-bd, bd, size=(hidden_dim, dim)),
        U=rng.uniform(-bd, bd, size=(hidden_dim, dim)),
        w=rng.uniform(-bh, bh, size=hidden_dim),
        c=np.zeros(dim),
        b=0.0,
    )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 50
    patience: int = 8
    seed: int = 0
    hidden_dim: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.patience < 1 or self.max_epochs < 1:
            raise ContractError("patience and max_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if self.hidden_dim < 1:
            raise ContractError("hidden_dim must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        adam = data.pop("adam", None)
        if adam is not None:
            if isinstance(adam, dict):
                data.update({k: adam[k] for k in ("beta1", "beta2", "eps") if k in adam})
            else:
                data["beta1"], data["beta2"], data["eps"] = adam
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def rows(self):
        for i, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            yield i, tl, vl


@dataclass(frozen=True, eq=False)
class ForwardResult:
    prob: float
    attention: np.ndarray
    logit: float


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


# -- forward / loss / backward -----------------------------------------------------


def _bag_matrix(bag, params: AbmilParams) -> np.ndarray:
    h = bag.matrix if isinstance(bag, EmbeddingBag) else bag
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ContractError(f"bag must be an (n >= 1, D) matrix, got shape {h.shape}")
    if h.shape[1] != params.dim:
        raise ContractError(f"bag dim {h.shape[1]} != model dim {params.dim}")
    return h


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _forward(h: np.ndarray, params: AbmilParams):
    tv = np.tanh(h @ params.V.T)  # (n, H)
    su = sigmoid(h @ params.U.T)  # (n, H)
    gated = tv * su
    score = gated @ params.w
    e = np.exp(score - score.max())
    attn = e / e.sum()
    z = attn @ h
    logit = float(params.c @ z + params.b)
    prob = float(sigmoid(logit))
    if not (np.isfinite(attn).all() and math.isfinite(logit)):
        raise NumericError("non-finite value in forward pass")
    return tv, su, gated, attn, z, logit, prob


def forward(bag, params: AbmilParams) -> ForwardResult:
    h = _bag_matrix(bag, params)
    *_, attn, _z, logit, prob = _forward(h, params)
    return ForwardResult(prob, attn, logit)


def bce_loss(prob: float, label) -> float:
    y = float(int(label))
    p = min(max(float(prob), PROB_EPS), 1.0 - PROB_EPS)
    return -(y * math.log(p) + (1.0 - y) * math.log1p(-p))


def loss_and_grad(bag, label, params: AbmilParams) -> tuple[float, AbmilParams]:
    h = _bag_matrix(bag, params)
    tv, su, gated, attn, z, _logit, prob = _forward(h, params)
    y = float(int(label))
    loss = bce_loss(prob, label)

    # clamped region of the loss is flat
    dlogit = prob - y if PROB_EPS < prob < 1.0 - PROB_EPS else 0.0
    dc = dlogit * z
    db = dlogit
    dz = dlogit * params.c
    dattn = h @ dz
    dscore = attn * (dattn - attn @ dattn)
    dw = dscore @ gated
    dgated = np.outer(dscore, params.w)
    dpre_v = dgated * su * (1.0 - tv * tv)
    dpre_u = dgated * tv * su * (1.0 - su)
    dV = dpre_v.T @ h
    dU = dpre_u.T @ h
    return loss, AbmilParams(dV, dU, dw, dc, db)


def grad(bag, label, params: AbmilParams) -> AbmilParams:
    """Exact gradient of ``bce_loss(forward(bag).prob, label)`` for every parameter."""
    return loss_and_grad(bag, label, params)[1]


def adam_step(
    params: AbmilParams,
    grads: AbmilParams,
    state: AdamState,
    config: TrainConfig = TrainConfig(),
) -> tuple[AbmilParams, AdamState]:
    g = grads.to_vector()
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * g * g
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    vec = params.to_vector() - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return AbmilParams.from_vector(vec, params.dim, params.hidden_dim), AdamState(m, v, t)


# -- training -----------------------------------------------------------------


class EarlyStopping:
    """Tracks the best validation loss; improvement means a strict decrease."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ContractError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.stale = val_loss, epoch, 0
            return False
        self.stale += 1
        return self.stale >= self.patience


def mean_loss(params: AbmilParams, bags: Sequence) -> float:
    return float(np.mean([bce_loss(forward(bag, params).prob, label) for bag, label in bags]))


def _check_bags(bags, name: str) -> int:
    if not bags:
        raise ContractError(f"{name} set is empty")
    dims = {(_bag.matrix if isinstance(_bag, EmbeddingBag) else np.asarray(_bag)).shape[1] for _bag, _ in bags}
    if len(dims) != 1:
        raise ContractError(f"{name} bags have mixed dimensions {sorted(dims)}")
    return dims.pop()


@dataclass(eq=False)
class TrainResult:
    params: AbmilParams
    history: TrainHistory


def train(
    train_bags: Sequence[tuple[EmbeddingBag, Label]],
    val_bags: Sequence[tuple[EmbeddingBag, Label]],
    config: TrainConfig = TrainConfig(),
    validation_loss: Optional[Callable[[AbmilParams, Sequence], float]] = None,
) -> TrainResult:
    """Bag-level Adam training with early stopping on validation loss.

    Each epoch visits every training bag once in a seeded random order. The
    returned parameters are the snapshot from the epoch with the lowest
    validation loss. ``validation_loss`` replaces the default mean BCE over
    ``val_bags``.
    """
    dim = _check_bags(train_bags, "training")
    if _check_bags(val_bags, "validation") != dim:
        raise ContractError("training and validation bags differ in dimension")
    validation_loss = validation_loss or mean_loss

    rng = np.random.default_rng(config.seed)
    params = init_params(dim, config.hidden_dim, seed=int(rng.integers(2**63)))
    state = AdamState.zeros(params.to_vector().size)
    history = TrainHistory()
    stopper = EarlyStopping(config.patience)
    best = params.copy()

    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for idx in rng.permutation(len(train_bags)):
            bag, label = train_bags[idx]
            loss, g = loss_and_grad(bag, label, params)
            losses.append(loss)
            params, state = adam_step(params, g, state, config)
        train_loss = float(np.mean(losses))
        val_loss = float(validation_loss(params, val_bags))
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.stopped_epoch = epoch
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            history.best_epoch = stopper.best_epoch
            raise NumericError(f"non-finite loss at epoch {epoch}", history)
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best = params.copy()
        logger.debug("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if stop:
            break

    history.best_epoch = stopper.best_epoch
    return TrainResult(best, history)


# -- persistence --------------------------------------------------------------

_CKPT_HEAD = struct.Struct("<4sHII")


def params_to_bytes(params: AbmilParams) -> bytes:
    body = np.concatenate(
        [params.V.ravel(), params.U.ravel(), params.w, params.c, [params.b]]
    ).astype("<f4")
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, params.dim, params.hidden_dim) + body.tobytes()


def params_from_bytes(data: bytes) -> AbmilParams:
    if len(data) < _CKPT_HEAD.size:
        raise TruncationError("checkpoint shorter than its header")
    magic, version, dim, hidden = _CKPT_HEAD.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported ABML version {version}")
    count = 2 * hidden * dim + hidden + dim + 1
    if len(data) != _CKPT_HEAD.size + 4 * count:
        raise TruncationError(f"checkpoint for D={dim}, H={hidden} has wrong length {len(data)}")
    vec = np.frombuffer(data, dtype="<f4", count=count, offset=_CKPT_HEAD.size).astype(np.float64)
    if not np.isfinite(vec).all():
        raise NumericError("checkpoint contains non-finite parameters")
    return AbmilParams.from_vector(vec, dim, hidden)


def write_params(params: AbmilParams, sink: BinaryIO) -> int:
    data = params_to_bytes(params)
    sink.write(data)
    return len(data)


def read_params(source: BinaryIO) -> AbmilParams:
    return params_from_bytes(source.read())


def save_params(params: AbmilParams, path) -> int:
    with open(path, "wb") as fh:
        return write_params(params, fh)


def load_params(path) -> AbmilParams:
    with open(path, "rb") as fh:
        return read_params(fh)


def write_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tl, vl in history.rows():
            writer.writerow([epoch, repr(tl), repr(vl)])


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)
