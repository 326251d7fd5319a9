"""Ground-truth trajectory simulator used as an end-to-end oracle.

The generator literally runs the latent-state process: covariates map to an
initial latent through an affine function plus Gaussian noise, latents evolve
through a tanh-affine transition plus Gaussian noise, dense observations are
affine read-outs of the latent plus Gaussian noise, and the binary label is a
Bernoulli draw from a sigmoid read-out of the final latent. Sampling the
observation mask per cell then turns the dense tensor into a sparse one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .containers import GROUND_TRUTH_TAG, read_container, write_container
from .data import TensorDataset
from .errors import ConfigError, NumericalError

MISSINGNESS_MODES = ("mcar", "informative")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class SynthConfig:
    n_patients: int = 2000
    n_features: int = 10
    n_bins: int = 20
    n_covariates: int = 5
    latent_dim: int = 4
    obs_noise_sd: float = 0.3
    init_noise_var: float | tuple = 0.25   # diagonal of the initial-latent covariance
    trans_noise_var: float | tuple = 0.01  # diagonal of the transition covariance
    p_obs: float = 0.10
    missingness: str = "mcar"
    informative_slope: float = 1.0
    classifier_gain: float = 3.0  # scales the label read-out; larger = cleaner labels
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_patients", "n_features", "n_bins", "n_covariates", "latent_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.obs_noise_sd < 0:
            raise ConfigError(f"obs_noise_sd must be >= 0, got {self.obs_noise_sd}")
        if np.any(self.init_noise_diag() < 0) or np.any(self.trans_noise_diag() < 0):
            raise ConfigError("noise covariance diagonals must be >= 0")
        if not 0 < self.p_obs <= 1:
            raise ConfigError(f"p_obs must be in (0, 1], got {self.p_obs}")
        if self.missingness not in MISSINGNESS_MODES:
            raise ConfigError(
                f"missingness must be one of {MISSINGNESS_MODES}, got {self.missingness!r}")

    def _diag(self, value) -> np.ndarray:
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = np.full(self.latent_dim, float(arr))
        if arr.shape != (self.latent_dim,):
            raise ConfigError(
                f"noise diagonal must be scalar or length {self.latent_dim}")
        return arr

    def init_noise_diag(self) -> np.ndarray:
        return self._diag(self.init_noise_var)

    def trans_noise_diag(self) -> np.ndarray:
        return self._diag(self.trans_noise_var)


@dataclass
class GroundTruth:
    """True generative parameters plus the simulated latent trajectories.

    ``latents`` has shape (N, T+1, D): index t in [0, T-1] generated the
    observations of bin t; index T generated the label.
    """

    beta_W: np.ndarray   # K x D
    beta_b: np.ndarray   # D
    trans_W: np.ndarray  # D x D
    trans_b: np.ndarray  # D
    dec_W: np.ndarray    # D x M
    dec_b: np.ndarray    # M
    clf_w: np.ndarray    # D
    clf_b: float
    latents: np.ndarray  # N x (T+1) x D

    def to_payload(self) -> dict:
        return {
            "beta_W": self.beta_W.tolist(),
            "beta_b": self.beta_b.tolist(),
            "trans_W": self.trans_W.tolist(),
            "trans_b": self.trans_b.tolist(),
            "dec_W": self.dec_W.tolist(),
            "dec_b": self.dec_b.tolist(),
            "clf_w": self.clf_w.tolist(),
            "clf_b": self.clf_b,
            "latents_shape": list(self.latents.shape),
            "latents": self.latents.ravel().tolist(),
        }

    @classmethod
    def from_payload(cls, p: dict) -> "GroundTruth":
        return cls(
            beta_W=np.asarray(p["beta_W"], dtype=np.float64),
            beta_b=np.asarray(p["beta_b"], dtype=np.float64),
            trans_W=np.asarray(p["trans_W"], dtype=np.float64),
            trans_b=np.asarray(p["trans_b"], dtype=np.float64),
            dec_W=np.asarray(p["dec_W"], dtype=np.float64),
            dec_b=np.asarray(p["dec_b"], dtype=np.float64),
            clf_w=np.asarray(p["clf_w"], dtype=np.float64),
            clf_b=float(p["clf_b"]),
            latents=np.asarray(p["latents"], dtype=np.float64).reshape(p["latents_shape"]),
        )

    def save(self, path) -> None:
        write_container(path, GROUND_TRUTH_TAG, self.to_payload())

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_payload(read_container(path, GROUND_TRUTH_TAG))


def _uniform_fan_in(rng: np.random.Generator, rows: int, cols: int,
                    fan_in: int) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=(rows, cols))


def sample_dataset(cfg: SynthConfig) -> tuple[TensorDataset, GroundTruth]:
    """Simulate a full cohort; deterministic given cfg.seed.

    Draw order is fixed: parameters, covariates, initial noise, transition
    noise, observation noise, mask, then labels. Labels are redrawn up to 10
    times if a class comes out empty.
    """
    cfg.validate()
    n, m, t_bins = cfg.n_patients, cfg.n_features, cfg.n_bins
    k, d = cfg.n_covariates, cfg.latent_dim
    rng = np.random.default_rng(cfg.seed)

    gain = cfg.classifier_gain
    beta_W = _uniform_fan_in(rng, k, d, k)
    beta_b = _uniform_fan_in(rng, 1, d, k)[0]
    trans_W = _uniform_fan_in(rng, d, d, d)
    trans_b = _uniform_fan_in(rng, 1, d, d)[0]
    dec_W = _uniform_fan_in(rng, d, m, d)
    dec_b = _uniform_fan_in(rng, 1, m, d)[0]
    clf_w = gain * _uniform_fan_in(rng, 1, d, d)[0]
    clf_b = gain * float(rng.uniform(-1, 1)) / np.sqrt(d)

    covariates = rng.standard_normal((n, k))
    init_sd = np.sqrt(cfg.init_noise_diag())
    trans_sd = np.sqrt(cfg.trans_noise_diag())

    latents = np.empty((n, t_bins + 1, d))
    latents[:, 0] = covariates @ beta_W + beta_b + rng.standard_normal((n, d)) * init_sd
    for t in range(1, t_bins + 1):
        drift = np.tanh(latents[:, t - 1] @ trans_W + trans_b)
        latents[:, t] = drift + rng.standard_normal((n, d)) * trans_sd

    # dense observations from h[0..T-1]; axis order (N, M, T)
    dense = np.einsum("ntd,dm->nmt", latents[:, :t_bins], dec_W) + dec_b[None, :, None]
    dense = dense + cfg.obs_noise_sd * rng.standard_normal((n, m, t_bins))

    if cfg.missingness == "mcar":
        mask = rng.random((n, m, t_bins)) < cfg.p_obs
    else:
        if cfg.p_obs >= 1.0:
            p_cell = np.ones((n, t_bins))
        else:
            base = np.log(cfg.p_obs / (1.0 - cfg.p_obs))
            norms = np.linalg.norm(latents[:, :t_bins], axis=2)
            p_cell = _sigmoid(base + cfg.informative_slope * norms)
        mask = rng.random((n, m, t_bins)) < p_cell[:, None, :]

    scores = _sigmoid(latents[:, t_bins] @ clf_w + clf_b)
    labels = None
    for _ in range(10):
        draw = (rng.random(n) < scores).astype(np.int64)
        if 0 < draw.sum() < n:
            labels = draw
            break
    if labels is None:
        raise NumericalError(
            "could not sample both classes in 10 attempts; adjust the config")

    ei, ej, et = np.nonzero(mask)
    order = np.lexsort((et, ej, ei))
    ds = TensorDataset(
        n_patients=n,
        n_features=m,
        n_bins=t_bins,
        entry_i=ei[order].astype(np.int64),
        entry_j=ej[order].astype(np.int64),
        entry_t=et[order].astype(np.int64),
        entry_v=dense[ei[order], ej[order], et[order]],
        covariates=covariates,
        covariate_names=[f"x{i}" for i in range(k)],
        labels=labels,
        patient_ids=[f"p{i:05d}" for i in range(n)],
        feature_ids=[f"f{j}" for j in range(m)],
    )
    ds.validate()
    gt = GroundTruth(beta_W, beta_b, trans_W, trans_b, dec_W, dec_b,
                     clf_w, clf_b, latents)
    return ds, gt


def oracle_scores(gt: GroundTruth) -> np.ndarray:
    """Bayes-reference score per patient: the true label probability given
    the true final latent. Serves as the AUC ceiling for trained models."""
    return _sigmoid(gt.latents[:, -1] @ gt.clf_w + gt.clf_b)
