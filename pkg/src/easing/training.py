"""Semi-supervised training: two jointly trained estimators, MC-dropout
pseudo-labels for unlabeled nodes, and the four-term heteroscedastic
objective
    L = L_reg_lb + L_stab_lb + lambda * (L_reg_unlb + L_stab_unlb).

Pseudo-labels are regenerated every epoch from frozen parameters and enter
the loss as detached constants; no gradient ever flows into them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, adam_init, adam_step, grad, no_grad
from .config import RankingConfig, RunConfig
from .evaluation import regression_metrics
from .graph import HetGraph, ImportanceDataset, NodeFeatureSet
from .model import init_model_params, make_scaler, model_forward

MODEL_PREFIXES = ("model1.", "model2.")


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class DjePair:
    """Two independently initialized estimators sharing one parameter store
    (names prefixed model1. / model2.) so one optimizer updates both."""

    store: ParamStore
    config: RunConfig

    @property
    def prefixes(self) -> Tuple[str, str]:
        return MODEL_PREFIXES


def init_pair(config: RunConfig, n_edge_types: int,
              rng: np.random.Generator) -> DjePair:
    store = ParamStore()
    cfg = config.model_config()
    for prefix in MODEL_PREFIXES:
        init_model_params(store, prefix, cfg, n_edge_types, rng)
    return DjePair(store=store, config=config)


@dataclass(frozen=True)
class PseudoLabel:
    node: int
    s_plus: float
    z_plus: float


@dataclass(frozen=True)
class LossBreakdown:
    lb_reg: float
    lb_stab: float
    unlb_reg: float
    unlb_stab: float
    lam: float
    total: float


def generate_pseudo_labels(pair: DjePair, graph: HetGraph,
                           features: NodeFeatureSet, pool: Sequence[int],
                           passes: int, rng: np.random.Generator,
                           scaler: np.ndarray | None = None
                           ) -> List[PseudoLabel]:
    """Average 2T stochastic forward passes (T per model, dropout active in
    mc-infer mode) into detached (s_plus, z_plus) per unlabeled node."""
    if passes < 1:
        raise ValueError("pseudo-label generation needs at least one pass")
    pool = list(pool)
    if not pool:
        return []
    cfg = pair.config.model_config()
    s_acc = np.zeros(len(pool))
    z_acc = np.zeros(len(pool))
    with no_grad():
        for _ in range(passes):
            for prefix in pair.prefixes:
                s_hat, z_hat, _ = model_forward(pair.store, prefix, graph,
                                                features, cfg, "mc-infer",
                                                rng, nodes=pool, scaler=scaler)
                s_acc += s_hat.data
                z_acc += z_hat.data
    s_acc /= 2.0 * passes
    z_acc /= 2.0 * passes
    return [PseudoLabel(node=n, s_plus=float(s), z_plus=float(z))
            for n, s, z in zip(pool, s_acc, z_acc)]


# ---------------------------------------------------------------------------
# loss terms; model estimates are Tensors, targets are constants
# ---------------------------------------------------------------------------

def _hetero_term(target: np.ndarray, s_hat: Tensor, z_hat: Tensor) -> Tensor:
    """Per-sample (target - s)^2 / (2 exp(z)) + z / 2, averaged."""
    resid = ad.sub(Tensor(target), s_hat)
    weighted = ad.div(ad.square(resid), ad.mul(ad.exp(z_hat), 2.0))
    return ad.mean_all(ad.add(weighted, ad.mul(z_hat, 0.5)))


def loss_lb_reg(targets: np.ndarray,
                estimates: Sequence[Tuple[Tensor, Tensor]]) -> Tensor:
    """Heteroscedastic labeled regression, averaged across the estimators."""
    terms = [_hetero_term(targets, s, z) for s, z in estimates]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def loss_lb_stab(z1: Tensor, z2: Tensor) -> Tensor:
    """Mean squared disagreement of the two uncertainty estimates."""
    return ad.mean_all(ad.square(ad.sub(z1, z2)))


def loss_unlb_reg(s_plus: np.ndarray,
                  estimates: Sequence[Tuple[Tensor, Tensor]]) -> Tensor:
    """Heteroscedastic pseudo-label regression, summed over the estimators."""
    total = None
    for s_hat, z_hat in estimates:
        term = _hetero_term(s_plus, s_hat, z_hat)
        total = term if total is None else ad.add(total, term)
    return total


def loss_unlb_stab(z_plus: np.ndarray, z_hats: Sequence[Tensor]) -> Tensor:
    """Squared deviation of each uncertainty estimate from the ensembled
    pseudo-uncertainty, summed over the estimators."""
    total = None
    for z_hat in z_hats:
        term = ad.mean_all(ad.square(ad.sub(Tensor(z_plus), z_hat)))
        total = term if total is None else ad.add(total, term)
    return total


def loss_homoscedastic_lb(targets: np.ndarray,
                          s_hats: Sequence[Tensor]) -> Tensor:
    """Plain MSE ablation of the labeled term, averaged across estimators."""
    terms = [ad.mean_all(ad.square(ad.sub(Tensor(targets), s)))
             for s in s_hats]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def loss_rank(targets: np.ndarray, s_hat: Tensor, groups: np.ndarray) -> Tensor:
    """Listwise ranking loss: softmax cross-entropy between true and
    predicted scores within each sampled group (anchors x group size)."""
    b, n = groups.shape
    if n < 2:
        raise ValueError("ranking groups need n >= 2")
    flat = groups.reshape(-1)
    true_g = targets[flat].reshape(b, n)
    te = np.exp(true_g - true_g.max(axis=1, keepdims=True))
    p_true = te / te.sum(axis=1, keepdims=True)
    pred_g = ad.reshape(ad.gather_rows(s_hat, flat), (b, n))
    row_max = pred_g.data.max(axis=1, keepdims=True)
    shifted = ad.sub(pred_g, Tensor(row_max))
    lse = ad.log(ad.sum_axis(ad.exp(shifted), -1))
    log_p = ad.sub(shifted, ad.reshape(lse, (b, 1)))
    ce = ad.sum_axis(ad.mul(Tensor(p_true), log_p), -1)
    return ad.mul(ad.mean_all(ce), -1.0)


def total_loss(lb_reg, lb_stab, unlb_reg, unlb_stab, lam: float
               ) -> Tuple[Tensor, LossBreakdown]:
    """Assemble the weighted objective; accepts Tensors or plain floats."""
    parts = [lb_reg, lb_stab, unlb_reg, unlb_stab]
    tensors = [p if isinstance(p, Tensor) else Tensor(np.asarray(float(p)))
               for p in parts]
    total = ad.add(ad.add(tensors[0], tensors[1]),
                   ad.mul(ad.add(tensors[2], tensors[3]), lam))
    breakdown = LossBreakdown(
        lb_reg=float(tensors[0]), lb_stab=float(tensors[1]),
        unlb_reg=float(tensors[2]), unlb_stab=float(tensors[3]),
        lam=lam, total=float(total))
    return total, breakdown


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lb_reg: float
    lb_stab: float
    unlb_reg: float
    unlb_stab: float
    total: float
    val_nrmse: float


def sample_ranking_groups(n_labeled: int, n: int,
                          rng: np.random.Generator) -> np.ndarray:
    """For each anchor, the anchor itself plus n-1 distinct other labeled
    nodes, as an (anchors, n) index matrix into the labeled batch."""
    groups = np.empty((n_labeled, n), dtype=np.intp)
    for i in range(n_labeled):
        others = rng.choice(n_labeled - 1, size=n - 1, replace=False)
        others = np.where(others >= i, others + 1, others)
        groups[i, 0] = i
        groups[i, 1:] = others
    return groups


def predict(pair: DjePair, graph: HetGraph, features: NodeFeatureSet,
            nodes: Sequence[int], scaler: np.ndarray | None = None,
            combine: str | None = None) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic inference (dropout off); estimates averaged across the
    two models unless combine='model1'."""
    combine = combine or pair.config.combine
    cfg = pair.config.model_config()

    outs = []
    with no_grad():
        for prefix in pair.prefixes:
            s_hat, z_hat, _ = model_forward(pair.store, prefix, graph,
                                            features, cfg, "off", None,
                                            nodes=nodes, scaler=scaler)
            outs.append((s_hat.data, z_hat.data))
    if combine == "model1":
        return outs[0]
    s = 0.5 * (outs[0][0] + outs[1][0])
    z = 0.5 * (outs[0][1] + outs[1][1])
    return s, z


def _validation_nrmse(pair, graph, features, dataset, scaler) -> float:
    if len(dataset.val) < 2:
        return float("nan")
    nodes = [n for n, _ in dataset.val]
    truth = np.array([v for _, v in dataset.val])
    if truth.max() == truth.min():
        return float("nan")
    pred, _ = predict(pair, graph, features, nodes, scaler)
    return regression_metrics(pred, truth)[2]


def train(pair: DjePair, dataset: ImportanceDataset, graph: HetGraph,
          features: NodeFeatureSet, config: RunConfig | None = None,
          rng: np.random.Generator | None = None
          ) -> Tuple[DjePair, List[EpochRecord]]:
    """Full-batch semi-supervised training.

    Each epoch: regenerate pseudo-labels with frozen parameters, resample
    the unlabeled batch if the pool exceeds |train|, run one stochastic
    forward per model, take one Adam step over both models' parameters, and
    score validation NRMSE with dropout off.  The best-validation snapshot is
    restored at the end; a non-finite loss aborts with the epoch number.
    """
    config = config or pair.config
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    cfg = config.model_config()
    scaler = make_scaler(graph, features, config.scaling_config())
    ranking = config.ranking_config()

    train_nodes = np.array(dataset.train_nodes, dtype=np.intp)
    train_values = dataset.train_values
    pool = list(dataset.unlabeled_pool)
    n_labeled = len(train_nodes)
    use_unlabeled = config.lam != 0.0 and len(pool) > 0

    state = adam_init(pair.store)
    log: List[EpochRecord] = []
    best_nrmse = math.inf
    best_params: Dict[str, np.ndarray] | None = None
    stall = 0

    for epoch in range(config.epochs):
        try:
            pseudo_nodes: List[int] = []
            s_plus = np.zeros(0)
            z_plus = np.zeros(0)
            if use_unlabeled:
                if len(pool) > n_labeled:
                    pick = rng.choice(len(pool), size=n_labeled, replace=False)
                    batch_pool = [pool[i] for i in sorted(pick)]
                else:
                    batch_pool = pool
                labels = generate_pseudo_labels(pair, graph, features,
                                                batch_pool, config.T, rng,
                                                scaler)
                pseudo_nodes = [p.node for p in labels]
                s_plus = np.array([p.s_plus for p in labels])
                z_plus = np.array([p.z_plus for p in labels])

            batch_nodes = np.concatenate(
                [train_nodes, np.asarray(pseudo_nodes, dtype=np.intp)])

            estimates = []
            for prefix in pair.prefixes:
                s_hat, z_hat, _ = model_forward(pair.store, prefix, graph,
                                                features, cfg, "train", rng,
                                                nodes=batch_nodes,
                                                scaler=scaler)
                estimates.append((s_hat, z_hat))

            def part(t: Tensor, lo: int, hi: int) -> Tensor:
                return ad.gather_rows(t, np.arange(lo, hi))

            lb_est = [(part(s, 0, n_labeled), part(z, 0, n_labeled))
                      for s, z in estimates]
            if config.heteroscedastic:
                lb_reg = loss_lb_reg(train_values, lb_est)
                lb_stab = loss_lb_stab(lb_est[0][1], lb_est[1][1])
            else:
                lb_reg = loss_homoscedastic_lb(train_values,
                                               [s for s, _ in lb_est])
                lb_stab = Tensor(np.asarray(0.0))

            if use_unlabeled and pseudo_nodes:
                hi = n_labeled + len(pseudo_nodes)
                un_est = [(part(s, n_labeled, hi), part(z, n_labeled, hi))
                          for s, z in estimates]
                unlb_reg = loss_unlb_reg(s_plus, un_est)
                unlb_stab = loss_unlb_stab(z_plus, [z for _, z in un_est])
            else:
                unlb_reg = Tensor(np.asarray(0.0))
                unlb_stab = Tensor(np.asarray(0.0))

            objective, breakdown = total_loss(lb_reg, lb_stab, unlb_reg,
                                              unlb_stab, config.lam)
            if ranking.enabled:
                groups = sample_ranking_groups(n_labeled, ranking.n, rng)
                rank_terms = [loss_rank(train_values, s, groups)
                              for s, _ in lb_est]
                rank_mean = ad.mul(ad.add(rank_terms[0], rank_terms[1]), 0.5)
                objective = ad.add(objective,
                                   ad.mul(rank_mean, ranking.weight))

            if not math.isfinite(float(objective)):
                raise TrainingDivergence(epoch, "non-finite objective")
            result = grad(objective, pair.store)
            adam_step(pair.store, result.grads, state, lr=config.lr)
        except ad.NumericsError as err:
            raise TrainingDivergence(epoch, str(err)) from err

        evaluate_now = (epoch % config.val_every == config.val_every - 1
                        or epoch == config.epochs - 1)
        val_nrmse = (_validation_nrmse(pair, graph, features, dataset, scaler)
                     if evaluate_now else float("nan"))
        log.append(EpochRecord(epoch=epoch, lb_reg=breakdown.lb_reg,
                               lb_stab=breakdown.lb_stab,
                               unlb_reg=breakdown.unlb_reg,
                               unlb_stab=breakdown.unlb_stab,
                               total=breakdown.total, val_nrmse=val_nrmse))
        if not evaluate_now:
            continue
        if math.isfinite(val_nrmse) and val_nrmse < best_nrmse:
            best_nrmse = val_nrmse
            best_params = pair.store.copy_arrays()
            stall = 0
        else:
            stall += 1
            if config.patience is not None and stall > config.patience:
                break

    if best_params is not None:
        pair.store.load_arrays(best_params)
    return pair, log
