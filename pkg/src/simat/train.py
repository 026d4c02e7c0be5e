"""Adaptation-head training with a symmetric InfoNCE objective.

Heads are small projections (a single affine layer, or a 4-layer ReLU MLP)
applied to frozen image/text features and followed by row-wise L2
normalization. The contrastive objective is the standard negative
log-likelihood InfoNCE at a fixed temperature, averaged over both
retrieval directions. All forward/backward math is explicit float64 numpy
so the analytic gradients can be certified against central finite
differences.

The `paper_literal` objective variant averages the diagonal softmax
probabilities instead of their negative logs. It exists for comparison
runs only; minimizing it would push matched pairs apart.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ConfigError, FormatError, StorageError, TrainingError
from .store import EmbeddingMatrix, _atomic_write_bytes

HEAD_KINDS = ("linear", "mlp4")
OPTIMIZERS = ("sgd", "adam")
LOSS_FORMS = ("infonce", "paper_literal")

HEAD_MAGIC = b"SMHD"
HEAD_VERSION = 1
_HEAD_HEADER = struct.Struct("<4sHBB")
_LAYER_HEADER = struct.Struct("<II")


@dataclass
class TrainConfig:
    tau: float = 0.1
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    optimizer: str = "adam"
    head_kind: str = "linear"
    output_dim: int = 512
    hidden_dim: int | None = None
    loss_form: str = "infonce"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.tau}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for a contrastive loss")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head kind must be one of {HEAD_KINDS}")
        if self.output_dim < 1:
            raise ConfigError("output_dim must be >= 1")
        if self.loss_form not in LOSS_FORMS:
            raise ConfigError(f"loss form must be one of {LOSS_FORMS}")


@dataclass
class AdaptationHead:
    """Affine stack with ReLU between layers (none after the last)."""

    kind: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ArgumentError(f"head kind must be one of {HEAD_KINDS}")
        expected_layers = 1 if self.kind == "linear" else 4
        if len(self.weights) != expected_layers or len(self.biases) != expected_layers:
            raise ArgumentError(
                f"{self.kind} head needs {expected_layers} layers, "
                f"got {len(self.weights)} weights / {len(self.biases)} biases"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ArgumentError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ArgumentError(f"layer {i}: input dim does not chain from layer {i-1}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ArgumentError(f"layer {i}: non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ArgumentError(
                f"features have dim {x.shape[-1] if x.ndim == 2 else '?'}, "
                f"head expects {self.input_dim}"
            )
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i + 1 < len(self.weights):
                h = np.maximum(h, 0.0)
        return h

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass keeping pre-activation inputs for backprop."""
        cache = []
        h = np.asarray(x, dtype=np.float64)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            cache.append(h)
            h = h @ w + b
            if i + 1 < len(self.weights):
                h = np.maximum(h, 0.0)
        return h, cache

    def backward(
        self, grad_out: np.ndarray, cache: list[np.ndarray]
    ) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Gradients of the loss w.r.t. every weight and bias.

        `cache` holds each layer's input as produced by forward_cached; the
        ReLU mask is recovered from the following layer's input.
        """
        grad_w = [np.zeros_like(w) for w in self.weights]
        grad_b = [np.zeros_like(b) for b in self.biases]
        g = grad_out
        for i in reversed(range(len(self.weights))):
            if i + 1 < len(self.weights):
                # cache[i+1] is ReLU(affine_i(...)): its positive entries mark
                # where the activation passed gradient through
                g = g * (cache[i + 1] > 0)
            grad_w[i] = cache[i].T @ g
            grad_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grad_w, grad_b


def init_head(
    kind: str, input_dim: int, output_dim: int, rng: np.random.Generator, hidden_dim: int | None = None
) -> AdaptationHead:
    """Uniform fan-in initialization, biases zero."""
    if kind == "linear":
        dims = [input_dim, output_dim]
    else:
        hidden = hidden_dim or input_dim
        dims = [input_dim, hidden, hidden, hidden, output_dim]
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims, dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return AdaptationHead(kind, weights, biases)


def normalize_rows(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ArgumentError("cannot normalize: a projected row is exactly zero")
    return z / norms


def normalize_rows_backward(z: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of row-wise L2 normalization.

    With u = z/||z||, dL/dz = (g - u (u . g)) / ||z|| per row.
    """
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    u = z / norms
    return (grad_u - u * np.sum(u * grad_u, axis=1, keepdims=True)) / norms


def _check_contrastive_inputs(i_emb: np.ndarray, t_emb: np.ndarray, tau: float) -> None:
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if i_emb.shape != t_emb.shape or i_emb.ndim != 2:
        raise ArgumentError(
            f"batch shapes must match and be 2-D, got {i_emb.shape} vs {t_emb.shape}"
        )
    for name, m in (("image", i_emb), ("text", t_emb)):
        norms = np.linalg.norm(m, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ArgumentError(f"{name} batch rows must be unit-norm within 1e-4")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def infonce_loss(i_emb: np.ndarray, t_emb: np.ndarray, tau: float, form: str = "infonce") -> float:
    """Symmetric contrastive loss over a batch of matched embedding pairs.

    infonce: mean over both directions of -log softmax(logits)[i, i] with
    logits = I T^T / tau. paper_literal: mean of the diagonal softmax
    probabilities themselves (no negative log).
    """
    i_emb = np.asarray(i_emb, dtype=np.float64)
    t_emb = np.asarray(t_emb, dtype=np.float64)
    _check_contrastive_inputs(i_emb, t_emb, tau)
    if form not in LOSS_FORMS:
        raise ConfigError(f"loss form must be one of {LOSS_FORMS}")
    logits = i_emb @ t_emb.T / tau
    n = logits.shape[0]
    if form == "infonce":
        l_it = -np.trace(_log_softmax(logits)) / n
        l_ti = -np.trace(_log_softmax(logits.T)) / n
    else:
        l_it = np.trace(_softmax(logits)) / n
        l_ti = np.trace(_softmax(logits.T)) / n
    return float(0.5 * (l_it + l_ti))


def infonce_grad(
    i_emb: np.ndarray, t_emb: np.ndarray, tau: float, form: str = "infonce"
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus analytic gradients w.r.t. both embedding batches."""
    i_emb = np.asarray(i_emb, dtype=np.float64)
    t_emb = np.asarray(t_emb, dtype=np.float64)
    _check_contrastive_inputs(i_emb, t_emb, tau)
    if form not in LOSS_FORMS:
        raise ConfigError(f"loss form must be one of {LOSS_FORMS}")
    logits = i_emb @ t_emb.T / tau
    n = logits.shape[0]
    p = _softmax(logits)      # image -> text direction
    q = _softmax(logits.T)    # text -> image direction
    eye = np.eye(n)
    if form == "infonce":
        loss = float(
            0.5 * (-np.trace(_log_softmax(logits)) - np.trace(_log_softmax(logits.T))) / n
        )
        d_logits_it = (p - eye) / n
        d_logits_ti = (q - eye) / n
    else:
        loss = float(0.5 * (np.trace(p) + np.trace(q)) / n)
        d_logits_it = (np.diag(p) [:, None] * (eye - p)) / n
        d_logits_ti = (np.diag(q)[:, None] * (eye - q)) / n
    # logits = I T^T / tau and its transpose; chain both directions
    grad_i = 0.5 * (d_logits_it @ t_emb + d_logits_ti.T @ t_emb) / tau
    grad_t = 0.5 * (d_logits_it.T @ i_emb + d_logits_ti @ i_emb) / tau
    return loss, grad_i, grad_t


def apply_head(head: AdaptationHead, features: np.ndarray) -> EmbeddingMatrix:
    """Project features and L2-normalize rows into a shared space."""
    projected = head.forward(np.asarray(features, dtype=np.float64))
    norms = np.linalg.norm(projected, axis=1)
    if projected.shape[0] and np.any(norms == 0.0):
        raise ArgumentError(
            f"head produced {int((norms == 0).sum())} zero rows that cannot be normalized"
        )
    return EmbeddingMatrix(
        (projected / norms[:, None]).astype(np.float32), normalized=True
    )


class _Optimizer:
    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        if cfg.optimizer == "adam":
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        lr = self.cfg.learning_rate
        if self.cfg.optimizer == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
            return
        self.step_count += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.step_count)
            v_hat = self.v[i] / (1 - b2**self.step_count)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def train_heads(
    image_features: np.ndarray,
    text_features: np.ndarray,
    cfg: TrainConfig,
    pairs: list[tuple[int, int]] | None = None,
) -> tuple[AdaptationHead, AdaptationHead, list[float]]:
    """Fit image/text heads by mini-batch gradient descent on the loss.

    Features are frozen inputs; each epoch reshuffles pairs with the seeded
    generator, so a given (features, cfg) is bit-reproducible. Returns both
    heads plus the per-epoch mean loss.
    """
    image_features = np.asarray(image_features, dtype=np.float64)
    text_features = np.asarray(text_features, dtype=np.float64)
    if image_features.ndim != 2 or text_features.ndim != 2:
        raise ArgumentError("feature matrices must be 2-D")
    if not (np.all(np.isfinite(image_features)) and np.all(np.isfinite(text_features))):
        raise ArgumentError("feature matrices must be finite")
    if pairs is None:
        if image_features.shape[0] != text_features.shape[0]:
            raise ArgumentError("without explicit pairs, feature row counts must match")
        pairs = [(i, i) for i in range(image_features.shape[0])]
    if len(pairs) < 2:
        raise ArgumentError("need at least 2 pairs for a contrastive objective")
    img_idx = np.array([p[0] for p in pairs])
    txt_idx = np.array([p[1] for p in pairs])

    rng = np.random.default_rng(cfg.seed)
    image_head = init_head(
        cfg.head_kind, image_features.shape[1], cfg.output_dim, rng, cfg.hidden_dim
    )
    text_head = init_head(
        cfg.head_kind, text_features.shape[1], cfg.output_dim, rng, cfg.hidden_dim
    )
    params = image_head.weights + image_head.biases + text_head.weights + text_head.biases
    optimizer = _Optimizer(params, cfg)

    history: list[float] = []
    n = len(pairs)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            if batch.shape[0] < 2:
                continue
            x_img = image_features[img_idx[batch]]
            x_txt = text_features[txt_idx[batch]]
            z_img, cache_img = image_head.forward_cached(x_img)
            z_txt, cache_txt = text_head.forward_cached(x_txt)
            batch_no = start // cfg.batch_size
            try:
                u_img = normalize_rows(z_img)
                u_txt = normalize_rows(z_txt)
                loss, g_img, g_txt = infonce_grad(u_img, u_txt, cfg.tau, cfg.loss_form)
            except ArgumentError as exc:
                # overflowing projections surface as degenerate/non-unit rows
                raise TrainingError(
                    f"training diverged at epoch {epoch}, batch {batch_no}: {exc}",
                    epoch=epoch,
                    batch=batch_no,
                ) from exc
            if not np.isfinite(loss):
                raise TrainingError(
                    f"loss diverged at epoch {epoch}, batch {batch_no}",
                    epoch=epoch,
                    batch=batch_no,
                )
            losses.append(loss)
            gz_img = normalize_rows_backward(z_img, g_img)
            gz_txt = normalize_rows_backward(z_txt, g_txt)
            gw_i, gb_i = image_head.backward(gz_img, cache_img)
            gw_t, gb_t = text_head.backward(gz_txt, cache_txt)
            optimizer.step(params, gw_i + gb_i + gw_t + gb_t)
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return image_head, text_head, history


def grad_check(loss_fn, params: np.ndarray, eps: float = 1e-5, floor: float = 1e-8) -> float:
    """Max elementwise relative error between analytic and central-difference
    gradients of `loss_fn(params) -> (loss, grad)`.

    Absolute differences at or below `floor` are finite-difference noise
    (the quotient carries ~|loss|*ulp/eps of rounding error) and count as
    zero; above the floor the error is relative to the larger magnitude.
    """
    if eps <= 0:
        raise ConfigError("eps must be > 0")
    params = np.asarray(params, dtype=np.float64)
    _, grad = loss_fn(params)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ArgumentError(f"gradient shape {grad.shape} != params shape {params.shape}")
    worst = 0.0
    flat = params.ravel()
    for i in range(flat.shape[0]):
        original = flat[i]
        flat[i] = original + eps
        up, _ = loss_fn(params)
        flat[i] = original - eps
        down, _ = loss_fn(params)
        flat[i] = original
        numeric = (up - down) / (2 * eps)
        analytic = grad.ravel()[i]
        diff = abs(numeric - analytic)
        if diff <= floor:
            continue
        worst = max(worst, diff / max(abs(numeric), abs(analytic)))
    return worst


def save_head(head: AdaptationHead, path: str | Path) -> None:
    """Serialize a head: per layer (in u32, out u32, f32 weights, f32 biases)."""
    kind_code = HEAD_KINDS.index(head.kind)
    blob = bytearray(_HEAD_HEADER.pack(HEAD_MAGIC, HEAD_VERSION, kind_code, len(head.weights)))
    for w, b in zip(head.weights, head.biases):
        blob += _LAYER_HEADER.pack(w.shape[0], w.shape[1])
        blob += np.ascontiguousarray(w, dtype="<f4").tobytes()
        blob += np.ascontiguousarray(b, dtype="<f4").tobytes()
    try:
        _atomic_write_bytes(Path(path), bytes(blob))
    except OSError as exc:
        raise StorageError(f"cannot write head checkpoint to {path}: {exc}") from exc


def load_head(path: str | Path) -> AdaptationHead:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read head checkpoint from {path}: {exc}") from exc
    if len(blob) < _HEAD_HEADER.size:
        raise FormatError(f"{path}: too short for a head header")
    magic, version, kind_code, layer_count = _HEAD_HEADER.unpack_from(blob)
    if magic != HEAD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != HEAD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if kind_code >= len(HEAD_KINDS):
        raise FormatError(f"{path}: unknown head kind code {kind_code}")
    offset = _HEAD_HEADER.size
    weights, biases = [], []
    for layer in range(layer_count):
        if offset + _LAYER_HEADER.size > len(blob):
            raise FormatError(f"{path}: truncated at layer {layer} header")
        rows, cols = _LAYER_HEADER.unpack_from(blob, offset)
        offset += _LAYER_HEADER.size
        need = (rows * cols + cols) * 4
        if offset + need > len(blob):
            raise FormatError(
                f"{path}: layer {layer} declares {need} payload bytes, "
                f"{len(blob) - offset} remain"
            )
        w = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols)
        offset += rows * cols * 4
        b = np.frombuffer(blob, dtype="<f4", count=cols, offset=offset)
        offset += cols * 4
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return AdaptationHead(HEAD_KINDS[kind_code], weights, biases)


def read_embeddings_for_training(path: str | Path) -> np.ndarray:
    """Load a SMAT file as float64 features (ids ignored, rows are pairs)."""
    from .store import read_embeddings

    matrix, _ = read_embeddings(path)
    return matrix.data.astype(np.float64)


def write_loss_history(path: str | Path, history: list[float]) -> None:
    lines = ["epoch,mean_loss"]
    for epoch, value in enumerate(history):
        lines.append(f"{epoch},{value!r}")
    _atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))
