"""Hyperparameter prior sampling, many-model training, and top-K averaging.

Each model index deterministically derives its own (gamma, lambda, seed)
draw from the master seed, so the run is a pure function of the spec no
matter how many workers execute it. Models are ranked by validation AUC
(ties broken by smaller index), the best K are kept, and prediction is the
unweighted mean of the member probabilities.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .containers import ENSEMBLE_TAG, read_container, write_container
from .data import TensorDataset
from .errors import ConfigError, NumericalError
from .model import ARCH_GENERATIVE, HyperParams, TrainedModel, predict, train

LOG_BASES = {"e": math.e, "10": 10.0}


@dataclass
class EnsembleSpec:
    n_models: int = 200
    top_k: int = 20
    gamma_low: float = 0.0
    gamma_high: float = 0.1
    log_lambda_low: float = -8.0
    log_lambda_high: float = -2.0
    log_base: str = "e"  # how log(lambda) is read; natural log by default
    template: HyperParams = field(default_factory=HyperParams)
    master_seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.top_k <= self.n_models:
            raise ConfigError(
                f"need 1 <= top_k <= n_models, got {self.top_k}/{self.n_models}")
        if self.gamma_low > self.gamma_high:
            raise ConfigError("gamma prior bounds out of order")
        if self.log_lambda_low > self.log_lambda_high:
            raise ConfigError("log-lambda prior bounds out of order")
        if self.log_base not in LOG_BASES:
            raise ConfigError(f"log_base must be one of {sorted(LOG_BASES)}")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be >= 0")
        self.template.validate()


def sample_hparams(spec: EnsembleSpec, model_index: int) -> HyperParams:
    """Draw (gamma, lambda, seed) for one model from the priors.

    The stream is seeded by (master_seed, model_index), so any model's
    hyperparameters can be re-derived without sampling the others.
    """
    if not 0 <= model_index < spec.n_models:
        raise ConfigError(f"model_index must be in [0, {spec.n_models})")
    rng = np.random.default_rng([spec.master_seed, model_index])
    gamma = float(rng.uniform(spec.gamma_low, spec.gamma_high))
    lam = float(LOG_BASES[spec.log_base] **
                rng.uniform(spec.log_lambda_low, spec.log_lambda_high))
    seed = int(rng.integers(0, 2**31 - 1))
    return replace(spec.template, gamma=gamma, lam=lam, seed=seed)


@dataclass
class MemberResult:
    """Outcome of one member training, successful or not."""

    index: int
    hyper: HyperParams
    val_auc: float  # -1.0 when training aborted
    status: str     # "ok" or "failed"
    model: TrainedModel | None = None


@dataclass
class EnsembleModel:
    """Selected members (descending validation AUC) plus the full run report."""

    members: list[TrainedModel]
    member_indices: list[int]
    report: list[MemberResult]
    pool: list[TrainedModel] = field(default_factory=list)  # all survivors, ranked

    def predict_scores(self, ds: TensorDataset, split_which: int) -> np.ndarray:
        return ensemble_predict(self, ds, split_which)

    def to_payload(self) -> dict:
        return {
            "member_indices": list(self.member_indices),
            "members": [m.to_payload() for m in self.members],
            "report": [
                {
                    "index": r.index,
                    "gamma": r.hyper.gamma,
                    "lambda": r.hyper.lam,
                    "seed": r.hyper.seed,
                    "val_auc": r.val_auc,
                    "selected": r.index in self.member_indices,
                    "status": r.status,
                }
                for r in self.report
            ],
        }

    @classmethod
    def from_payload(cls, p: dict) -> "EnsembleModel":
        members = [TrainedModel.from_payload(m) for m in p["members"]]
        report = []
        for row in p["report"]:
            hp = HyperParams(gamma=row["gamma"], lam=row["lambda"], seed=row["seed"])
            report.append(MemberResult(index=int(row["index"]), hyper=hp,
                                       val_auc=float(row["val_auc"]),
                                       status=row["status"]))
        return cls(members=members,
                   member_indices=[int(i) for i in p["member_indices"]],
                   report=report)

    def save(self, path) -> None:
        write_container(path, ENSEMBLE_TAG, self.to_payload())

    @classmethod
    def load(cls, path) -> "EnsembleModel":
        return cls.from_payload(read_container(path, ENSEMBLE_TAG))


_WORKER_STATE: dict = {}


def _worker_init(ds: TensorDataset, spec: EnsembleSpec, arch: str) -> None:
    _WORKER_STATE["args"] = (ds, spec, arch)


def _worker_train(index: int) -> MemberResult:
    ds, spec, arch = _WORKER_STATE["args"]
    return _train_member(ds, spec, index, arch)


def _train_member(ds: TensorDataset, spec: EnsembleSpec, index: int,
                  arch: str) -> MemberResult:
    hp = sample_hparams(spec, index)
    try:
        member = train(ds, hp, arch)
    except NumericalError:
        return MemberResult(index=index, hyper=hp, val_auc=-1.0, status="failed")
    return MemberResult(index=index, hyper=hp, val_auc=member.val_auc,
                        status="ok", model=member)


def rank_results(results: list[MemberResult]) -> list[MemberResult]:
    """Successful results sorted by (validation AUC desc, index asc)."""
    ok = [r for r in results if r.status == "ok"]
    return sorted(ok, key=lambda r: (-r.val_auc, r.index))


def run_ensemble(ds: TensorDataset, spec: EnsembleSpec, workers: int = 1,
                 arch: str = ARCH_GENERATIVE) -> EnsembleModel:
    """Train every model index, rank by validation AUC, keep the top K.

    The result is identical for any worker count: member trainings are
    independent and the reduce is ordered by model index.
    """
    spec.validate()
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    indices = list(range(spec.n_models))
    if workers == 1:
        results = [_train_member(ds, spec, i, arch) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                 initargs=(ds, spec, arch)) as pool:
            results = list(pool.map(_worker_train, indices))
    results.sort(key=lambda r: r.index)

    ranked = rank_results(results)
    if len(ranked) < spec.top_k:
        raise ConfigError(
            f"only {len(ranked)} of {spec.n_models} models trained successfully; "
            f"cannot select top_k={spec.top_k}")
    selected = ranked[:spec.top_k]
    return EnsembleModel(
        members=[r.model for r in selected],
        member_indices=[r.index for r in selected],
        report=results,
        pool=[r.model for r in ranked],
    )


def ensemble_predict(em: EnsembleModel, ds: TensorDataset,
                     split_which: int) -> np.ndarray:
    """Unweighted mean of the member probability vectors."""
    if not em.members:
        raise ConfigError("ensemble has no members")
    scores = [predict(member, ds, split_which) for member in em.members]
    return np.mean(scores, axis=0)


def ensemble_curve(pool: list[TrainedModel], ds: TensorDataset,
                   ks: list[int]) -> list[tuple[int, float]]:
    """Test AUC of the top-k ensemble for each k, over the ranked pool."""
    from .data import TEST
    from .evaluate import roc

    if any(k < 1 or k > len(pool) for k in ks):
        raise ConfigError(f"every k must be in [1, {len(pool)}]")
    test_labels = ds.labels[ds.split_indices(TEST)]
    member_scores = [predict(m, ds, TEST) for m in pool]
    points = []
    for k in ks:
        avg = np.mean(member_scores[:k], axis=0)
        points.append((k, float(roc(avg, test_labels).auc)))
    return points


def curve_csv(points: list[tuple[int, float]]) -> str:
    out = io.StringIO()
    out.write("k,test_auc\n")
    for k, auc in points:
        out.write(f"{k},{auc!r}\n")
    return out.getvalue()


def report_csv(em: EnsembleModel) -> str:
    """Selection report: model_index,gamma,lambda,seed,val_auc,selected,status."""
    out = io.StringIO()
    out.write("model_index,gamma,lambda,seed,val_auc,selected,status\n")
    for r in em.report:
        selected = r.index in em.member_indices
        out.write(f"{r.index},{r.hyper.gamma!r},{r.hyper.lam!r},{r.hyper.seed},"
                  f"{r.val_auc!r},{int(selected)},{r.status}\n")
    return out.getvalue()
