"""Recurrent latent-state classifier with prediction-based imputation.

Two architectures share the machinery:

* ``generative`` -- at each bin the decoder predicts the measurement row from
  the current latent; missing inputs are replaced by that prediction, the
  input vector is the (imputed values, mask) concatenation, and a GRU cell
  advances the latent. The decoder applied to the post-update latent yields
  the reconstruction for the bin, and a sigmoid read-out of the final latent
  yields the class probability. The training loss mixes masked reconstruction
  error and cross entropy: gamma * MSE_obs + (1 - gamma) * BCE + lam * |W|^2.

* ``baseline`` -- classification only: inputs are mean-imputed values (zero
  after normalization), the mask, and the per-feature elapsed time since the
  last observation; no decoder and no reconstruction term.

Training gradients come from the define-by-run graph in :mod:`.ndiff`,
rebuilt every step, so backpropagation through time runs through the
imputation feedback path as well as the recurrence.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndiff
from .containers import MODEL_TAG, read_container, write_container
from .data import (TRAIN, VAL, NormStats, TensorDataset, compute_norm_stats,
                   normalize)
from .errors import ConfigError, NumericalError
from .evaluate import roc
from .ndiff import (Node, ParamStore, add, backward, clip, concat_columns,
                    constant, log, matmul, multiply, rowwise_broadcast_add,
                    scale, sigmoid, subtract, sum_all, sum_nodes, tanh)

ARCH_GENERATIVE = "generative"
ARCH_BASELINE = "baseline"
ARCHITECTURES = (ARCH_GENERATIVE, ARCH_BASELINE)

PROB_CLAMP = 1e-12

# loss batches whose reconstruction term was skipped for lack of observations
EMPTY_RECON_BATCHES = 0


@dataclass
class HyperParams:
    gamma: float = 0.05
    lam: float = 1e-3
    latent_dim: int = 32
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 64
    grad_clip_norm: float | None = 5.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError(
                f"grad_clip_norm must be > 0 or None, got {self.grad_clip_norm}")


def param_layout(n_covariates: int, n_features: int, latent_dim: int,
                 arch: str) -> dict[str, tuple[int, int, int]]:
    """Name -> (rows, cols, fan_in) for every trainable parameter.

    The GRU input is the (values, mask) pair for the generative architecture
    and the (values, mask, elapsed-time) triple for the baseline. Biases use
    the fan-in of the weight matrix they accompany.
    """
    k, m, d = n_covariates, n_features, latent_dim
    if arch == ARCH_GENERATIVE:
        input_dim = 2 * m
    elif arch == ARCH_BASELINE:
        input_dim = 3 * m
    else:
        raise ConfigError(f"unknown architecture {arch!r}")
    layout = {
        "beta_W": (k, d, k),
        "beta_b": (1, d, k),
        "clf_W": (d, 1, d),
        "clf_b": (1, 1, d),
    }
    for gate in ("z", "r", "h"):
        layout[f"gru_W{gate}"] = (input_dim, d, input_dim)
        layout[f"gru_U{gate}"] = (d, d, d)
        layout[f"gru_b{gate}"] = (1, d, input_dim)
    if arch == ARCH_GENERATIVE:
        layout["dec_W"] = (d, m, d)
        layout["dec_b"] = (1, m, d)
    return layout


def weight_names(arch: str) -> list[str]:
    """Parameters counted by the L2 penalty: weight matrices, never biases."""
    names = ["beta_W", "clf_W", "gru_Wz", "gru_Uz", "gru_Wr", "gru_Ur",
             "gru_Wh", "gru_Uh"]
    if arch == ARCH_GENERATIVE:
        names.append("dec_W")
    return sorted(names)


def init_params(n_covariates: int, n_features: int, latent_dim: int,
                arch: str, rng: np.random.Generator) -> ParamStore:
    """Uniform +-1/sqrt(fan_in) initialization, drawn in sorted-name order."""
    layout = param_layout(n_covariates, n_features, latent_dim, arch)
    params = {}
    for name in sorted(layout):
        rows, cols, fan_in = layout[name]
        limit = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-limit, limit, size=(rows, cols))
    return ParamStore(params)


def elapsed_time_features(mask: np.ndarray) -> np.ndarray:
    """Bins since each feature was last observed, scaled by 1/T.

    A feature observed in the current bin scores 0; one never observed so
    far scores (t + 1) / T, i.e. the last observation is pinned at bin -1.
    """
    n, m, t_bins = mask.shape
    dt = np.empty_like(mask, dtype=np.float64)
    last = np.full((n, m), -1.0)
    for t in range(t_bins):
        last = np.where(mask[:, :, t] > 0, float(t), last)
        dt[:, :, t] = (t - last) / t_bins
    return dt


@dataclass
class Batch:
    """Normalized per-patient arrays for one forward/loss evaluation.

    ``masked_values`` is mask * values: observed cells keep their value,
    unobserved cells are exactly zero regardless of what the dense tensor
    holds, which is what makes the loss invariant to unobserved cells.
    """

    covariates: np.ndarray     # (B, K)
    masked_values: np.ndarray  # (B, M, T)
    mask: np.ndarray           # (B, M, T)
    labels: np.ndarray | None  # (B, 1) floats, None when only predicting
    elapsed: np.ndarray | None = None  # (B, M, T), baseline only

    @property
    def size(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_bins(self) -> int:
        return self.mask.shape[2]


def make_batch(X: np.ndarray, values: np.ndarray, mask: np.ndarray,
               labels: np.ndarray | None, arch: str) -> Batch:
    mask = np.asarray(mask, dtype=np.float64)
    masked = mask * np.asarray(values, dtype=np.float64)
    lab = None
    if labels is not None:
        lab = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    elapsed = elapsed_time_features(mask) if arch == ARCH_BASELINE else None
    return Batch(np.asarray(X, dtype=np.float64), masked, mask, lab, elapsed)


def _gru_step(leaves, x: Node, h: Node, ones_bd: Node) -> Node:
    z = sigmoid(rowwise_broadcast_add(
        add(matmul(x, leaves["gru_Wz"]), matmul(h, leaves["gru_Uz"])),
        leaves["gru_bz"]))
    r = sigmoid(rowwise_broadcast_add(
        add(matmul(x, leaves["gru_Wr"]), matmul(h, leaves["gru_Ur"])),
        leaves["gru_br"]))
    cand = tanh(rowwise_broadcast_add(
        add(matmul(x, leaves["gru_Wh"]), matmul(multiply(r, h), leaves["gru_Uh"])),
        leaves["gru_bh"]))
    return add(multiply(subtract(ones_bd, z), h), multiply(z, cand))


def _decode(leaves, h: Node) -> Node:
    return rowwise_broadcast_add(matmul(h, leaves["dec_W"]), leaves["dec_b"])


def _classify(leaves, h: Node) -> Node:
    return sigmoid(rowwise_broadcast_add(matmul(h, leaves["clf_W"]), leaves["clf_b"]))


def _check_finite(h: Node, t: int) -> None:
    if not np.isfinite(h.value).all():
        raise NumericalError(f"non-finite latent state at time step {t}")


def _unroll(leaves, batch: Batch, arch: str, want_recon: bool):
    """Build the forward graph; returns (h list, recon list, y-star list, p).

    The latent starts at tanh(beta(X)) -- the inference network is
    deterministic, noise belongs to the generator. At each bin the generative
    input is the mask-blend of observed values and the decoder's prediction
    from the current latent, concatenated with the mask row; the baseline
    input is the (mean-imputed values, mask, elapsed-time) concatenation.
    """
    d = leaves["beta_W"].value.shape[1]
    h = tanh(rowwise_broadcast_add(
        matmul(constant(batch.covariates), leaves["beta_W"]), leaves["beta_b"]))
    _check_finite(h, 0)
    ones_bd = constant(np.ones((batch.size, d)))
    hs = [h]
    recons: list[Node] = []
    ystars: list[Node] = []
    for t in range(batch.n_bins):
        m_t = batch.mask[:, :, t]
        if arch == ARCH_GENERATIVE:
            ytilde = _decode(leaves, h)
            ystar = add(multiply(ytilde, constant(1.0 - m_t)),
                        constant(batch.masked_values[:, :, t]))
            ystars.append(ystar)
            x_t = concat_columns(ystar, constant(m_t))
        else:
            x_t = constant(np.hstack((batch.masked_values[:, :, t], m_t,
                                      batch.elapsed[:, :, t])))
        h = _gru_step(leaves, x_t, h, ones_bd)
        _check_finite(h, t + 1)
        hs.append(h)
        if want_recon:
            recons.append(_decode(leaves, h))
    return hs, recons, ystars, _classify(leaves, hs[-1])


@dataclass
class ForwardResult:
    latents: np.ndarray                 # (B, T+1, D)
    reconstruction: np.ndarray | None   # (B, M, T)
    imputed_inputs: np.ndarray | None   # (B, M, T), the y-star value rows
    probabilities: np.ndarray           # (B,)


def forward(store: ParamStore, X, values, mask) -> ForwardResult:
    """Generative forward pass returning plain arrays."""
    batch = make_batch(X, values, mask, None, ARCH_GENERATIVE)
    hs, recons, ystars, p = _unroll(store.leaf_nodes(), batch,
                                    ARCH_GENERATIVE, want_recon=True)
    return ForwardResult(
        latents=np.stack([h.value for h in hs], axis=1),
        reconstruction=np.stack([r.value for r in recons], axis=2),
        imputed_inputs=np.stack([y.value for y in ystars], axis=2),
        probabilities=p.value[:, 0],
    )


def forward_baseline(store: ParamStore, X, values, mask) -> np.ndarray:
    """Baseline forward pass; returns the class probabilities."""
    batch = make_batch(X, values, mask, None, ARCH_BASELINE)
    _, _, _, p = _unroll(store.leaf_nodes(), batch, ARCH_BASELINE,
                         want_recon=False)
    return p.value[:, 0]


def build_loss(leaves, batch: Batch, gamma: float, lam: float,
               arch: str) -> Node:
    """Scalar loss graph: gamma * MSE_obs + (1 - gamma) * BCE + lam * |W|^2.

    MSE_obs averages squared reconstruction error over observed cells only.
    For the baseline the reconstruction term does not exist and gamma is
    ignored. A boundary gamma skips the dead branch entirely, so e.g. at
    gamma = 0 the loss value and gradients match BCE + L2 exactly.
    """
    global EMPTY_RECON_BATCHES
    if batch.labels is None:
        raise ConfigError("loss requires labels")
    n_obs = batch.mask.sum()
    want_recon = arch == ARCH_GENERATIVE and gamma > 0.0 and n_obs > 0
    if arch == ARCH_GENERATIVE and gamma > 0.0 and n_obs == 0:
        EMPTY_RECON_BATCHES += 1
    hs, recons, _, p_raw = _unroll(leaves, batch, arch, want_recon)

    terms: list[Node] = []
    if want_recon:
        sq_sums = []
        for t, recon in enumerate(recons):
            diff = subtract(recon, constant(batch.masked_values[:, :, t]))
            sq = multiply(diff, diff)
            sq_sums.append(sum_all(multiply(sq, constant(batch.mask[:, :, t]))))
        terms.append(scale(sum_nodes(sq_sums), gamma / n_obs))

    bce_weight = 1.0 if arch == ARCH_BASELINE else 1.0 - gamma
    if bce_weight > 0.0:
        b = batch.size
        p = clip(p_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
        pos = multiply(constant(batch.labels), log(p))
        neg = multiply(constant(1.0 - batch.labels),
                       log(subtract(constant(np.ones((b, 1))), p)))
        terms.append(scale(sum_all(add(pos, neg)), -bce_weight / b))

    if lam > 0.0:
        l2 = sum_nodes([sum_all(multiply(leaves[n], leaves[n]))
                        for n in weight_names(arch)])
        terms.append(scale(l2, lam))

    if not terms:  # gamma == 1 with lam == 0 and an empty batch mask
        return constant(np.zeros((1, 1)))
    return sum_nodes(terms)


def loss(store: ParamStore, X, values, mask, labels, gamma: float, lam: float,
         arch: str = ARCH_GENERATIVE) -> float:
    """Evaluate the training loss on plain arrays."""
    batch = make_batch(X, values, mask, labels, arch)
    return float(build_loss(store.leaf_nodes(), batch, gamma, lam, arch).value[0, 0])


def loss_builder(batch: Batch, gamma: float, lam: float, arch: str):
    """Closure suitable for :func:`trajcast.ndiff.grad_check`."""
    def fn(leaves):
        return build_loss(leaves, batch, gamma, lam, arch)
    return fn


class Adam:
    """Adaptive moment estimation with decay rates 0.9/0.999, stabilizer 1e-8."""

    def __init__(self, store: ParamStore, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(store.get(n)) for n in store.names}
        self.v = {n: np.zeros_like(store.get(n)) for n in store.names}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in self.store.names:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            self.store.get(name)[...] -= self.lr * update


def clip_global_norm(grads: dict[str, np.ndarray],
                     max_norm: float | None) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


@dataclass
class TrainedModel:
    """Frozen result of one training run; immutable by convention."""

    params: ParamStore
    hyper: HyperParams
    stats: NormStats
    arch: str
    loss_trace: list[float]
    val_auc: float
    feature_ids: list[str]
    covariate_names: list[str] = field(default_factory=list)

    def predict_scores(self, ds: TensorDataset, split_which: int) -> np.ndarray:
        return predict(self, ds, split_which)

    def to_payload(self) -> dict:
        hp = asdict(self.hyper)
        return {
            "arch": self.arch,
            "hyperparams": hp,
            "norm_stats": self.stats.to_payload(),
            "loss_trace": self.loss_trace,
            "val_auc": self.val_auc,
            "feature_ids": list(self.feature_ids),
            "covariate_names": list(self.covariate_names),
            "params": self.params.to_payload(),
        }

    @classmethod
    def from_payload(cls, p: dict) -> "TrainedModel":
        return cls(
            params=ParamStore.from_payload(p["params"]),
            hyper=HyperParams(**p["hyperparams"]),
            stats=NormStats.from_payload(p["norm_stats"]),
            arch=p["arch"],
            loss_trace=[float(x) for x in p["loss_trace"]],
            val_auc=float(p["val_auc"]),
            feature_ids=list(p["feature_ids"]),
            covariate_names=list(p["covariate_names"]),
        )

    def save(self, path) -> None:
        write_container(path, MODEL_TAG, self.to_payload())

    @classmethod
    def load(cls, path) -> "TrainedModel":
        return cls.from_payload(read_container(path, MODEL_TAG))


def train(ds: TensorDataset, hp: HyperParams,
          arch: str = ARCH_GENERATIVE) -> TrainedModel:
    """Mini-batch Adam on the mixed loss; deterministic given (hp.seed, ds).

    Normalization statistics come from the training split of ``ds`` and are
    stored on the model, so raw datasets can be passed everywhere. The
    validation AUC is computed once, after the final epoch.
    """
    hp.validate()
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}")
    train_idx = ds.split_indices(TRAIN)
    val_idx = ds.split_indices(VAL)
    if train_idx.size == 0 or val_idx.size == 0:
        raise ConfigError("train and val splits must be nonempty")
    train_labels = ds.labels[train_idx]
    if train_labels.min() == train_labels.max():
        raise ConfigError("training split must contain both classes")

    stats = compute_norm_stats(ds)
    dsn = normalize(ds, stats)
    values, mask = dsn.dense_values_mask()
    masked_values = mask * values
    covariates = dsn.covariates
    elapsed = elapsed_time_features(mask) if arch == ARCH_BASELINE else None
    labels = dsn.labels.astype(np.float64)

    rng = np.random.default_rng(hp.seed)
    store = init_params(dsn.n_covariates, dsn.n_features, hp.latent_dim, arch, rng)
    adam = Adam(store, hp.learning_rate)

    loss_trace: list[float] = []
    for epoch in range(hp.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        epoch_loss = 0.0
        for start in range(0, order.size, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            batch = Batch(
                covariates=covariates[idx],
                masked_values=masked_values[idx],
                mask=mask[idx],
                labels=labels[idx].reshape(-1, 1),
                elapsed=None if elapsed is None else elapsed[idx],
            )
            leaves = store.leaf_nodes()
            loss_node = build_loss(leaves, batch, hp.gamma, hp.lam, arch)
            value = float(loss_node.value[0, 0])
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} batch {start // hp.batch_size}")
            backward(loss_node)
            grads = {name: ndiff.gradient_of(leaves[name]) for name in store.names}
            clip_global_norm(grads, hp.grad_clip_norm)
            adam.step(grads)
            epoch_loss += value * idx.size
        loss_trace.append(epoch_loss / order.size)

    model = TrainedModel(
        params=store,
        hyper=hp,
        stats=stats,
        arch=arch,
        loss_trace=loss_trace,
        val_auc=0.0,
        feature_ids=list(ds.feature_ids),
        covariate_names=list(ds.covariate_names),
    )
    val_scores = predict(model, ds, VAL)
    model.val_auc = float(roc(val_scores, ds.labels[val_idx]).auc)
    return model


def predict(model: TrainedModel, ds: TensorDataset, split_which: int,
            chunk_size: int = 512) -> np.ndarray:
    """Class probabilities for every patient of a split, in patient order."""
    if list(ds.feature_ids) != list(model.feature_ids):
        raise ConfigError("dataset feature space does not match the model")
    if ds.n_covariates != model.stats.covariate_mean.size:
        raise ConfigError("dataset covariate count does not match the model")
    dsn = normalize(ds, model.stats)
    values, mask = dsn.dense_values_mask()
    idx = ds.split_indices(split_which)
    scores = np.empty(idx.size)
    for start in range(0, idx.size, chunk_size):
        chunk = idx[start:start + chunk_size]
        batch = make_batch(dsn.covariates[chunk], values[chunk], mask[chunk],
                           None, model.arch)
        _, _, _, p = _unroll(model.params.leaf_nodes(), batch, model.arch,
                             want_recon=False)
        scores[start:start + chunk.size] = p.value[:, 0]
    return np.clip(scores, PROB_CLAMP, 1.0 - PROB_CLAMP)
