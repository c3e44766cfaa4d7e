"""
Alternating optimization of the two modal networks and the label kernel.

Per mini-batch: transport plans are computed under the current cost, the
kernel is re-estimated in closed form from those plans, plans are recomputed
under the refreshed cost, and their centered duals are back-propagated into
both networks with a plain SGD step.
"""

from dataclasses import dataclass, field, asdict
import json
import math

import numpy as np

from . import kernel as km
from .errors import InvalidConfig, NoInput, NoLabeledData, NonFiniteObjective
from .metrics import evaluate
from .network import ModalNetwork, backward, forward, fuse_predictions, pool_bag, bag_concept
from .ot import centered_dual, gibbs_kernel, sinkhorn_scalings

CHECKPOINT_FORMAT = "m3dn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainingConfig:
    lam: float = 50.0
    lambda1: float = 1.0
    learning_rate: float = 0.05
    lr_schedule: str = "constant"
    max_epochs: int = 50
    batch_size: int = 32
    epsilon: float = 1e-6
    semi_supervised: bool = False
    ae_weight: float = 0.01
    pooling: str = "max"
    renormalize: bool = True
    fusion: str = "mean"
    fixed_metric: bool = False
    literal_kernel_update: bool = False
    burg_p: float = 1.0
    ridge: float = 1e-3
    hidden: tuple = (32, 16)
    activation: str = "tanh"
    sinkhorn_max_iter: int = 1000
    sinkhorn_tol: float = 1e-6
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self):
        for name in ("lam", "lambda1", "learning_rate", "epsilon", "sinkhorn_tol"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(name, "must be positive")
        if self.ae_weight < 0:
            raise InvalidConfig("ae_weight", "must be nonnegative")
        if self.ridge < 0:
            raise InvalidConfig("ridge", "must be nonnegative")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size", "must be >= 1")
        if self.max_epochs < 0:
            raise InvalidConfig("max_epochs", "must be >= 0")
        if self.sinkhorn_max_iter < 1:
            raise InvalidConfig("sinkhorn_max_iter", "must be >= 1")
        if self.checkpoint_every < 0:
            raise InvalidConfig("checkpoint_every", "must be >= 0")
        if self.lr_schedule not in ("constant", "inv_sqrt"):
            raise InvalidConfig("lr_schedule", "must be 'constant' or 'inv_sqrt'")
        if self.pooling not in ("max", "mean"):
            raise InvalidConfig("pooling", "must be 'max' or 'mean'")
        if self.fusion not in ("mean", "max"):
            raise InvalidConfig("fusion", "must be 'mean' or 'max'")
        if self.activation not in ("tanh", "relu", "linear"):
            raise InvalidConfig("activation", "must be 'tanh', 'relu' or 'linear'")
        if not self.hidden or min(self.hidden) < 1:
            raise InvalidConfig("hidden", "need at least one positive layer width")
        return self

    def rate(self, epoch):
        if self.lr_schedule == "inv_sqrt":
            return self.learning_rate / math.sqrt(epoch)
        return self.learning_rate

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise InvalidConfig(sorted(extra)[0], "unknown training field")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        try:
            cfg = cls(**d)
        except TypeError as e:
            raise InvalidConfig("<root>", str(e)) from None
        return cfg.validate()

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainingState:
    nets: list
    kernel: np.ndarray
    reference: np.ndarray
    cost: np.ndarray
    epoch: int = 0
    objective_history: list = field(default_factory=list)
    skipped_examples: int = 0
    converged: bool = False

    def set_kernel(self, S):
        self.kernel = S
        self.cost = km.cost_from_kernel(S)


@dataclass
class BatchResult:
    loss: float
    plans: list
    grads: list
    skipped: int = 0


def init_state(data, cfg):
    if not data.labeled:
        raise NoLabeledData("training needs at least one labeled example")
    ss = np.random.SeedSequence(cfg.seed)
    enc1, enc2, dec1, dec2 = ss.spawn(4)
    nets = [
        ModalNetwork(data.dims[0], cfg.hidden, data.label_count, cfg.activation, True,
                     rng=np.random.default_rng(enc1), decoder_rng=np.random.default_rng(dec1)),
        ModalNetwork(data.dims[1], cfg.hidden, data.label_count, cfg.activation, True,
                     rng=np.random.default_rng(enc2), decoder_rng=np.random.default_rng(dec2)),
    ]
    S0 = km.init_reference_kernel(data.label_matrix(), cfg.ridge)
    return TrainingState(nets, S0.copy(), S0, km.cost_from_kernel(S0))


# -- batch pieces -------------------------------------------------------------


def _sinkhorn(F, T, M, cfg):
    K = gibbs_kernel(M, cfg.lam)
    u, v, _ = sinkhorn_scalings(F, T, K, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol)
    plans = u[:, :, None] * K[None] * v[:, None, :]
    return plans, u, v


def _labeled_forward(state, batch, cfg):
    """Per modality: (cache, target histograms) over examples with that bag and a nonzero label."""
    out = []
    skipped = 0
    for v in range(2):
        keep = [ex for ex in batch if ex.bags()[v] is not None and np.any(ex.labels)]
        if v == 0:
            skipped = sum(1 for ex in batch if not np.any(ex.labels))
        if not keep:
            out.append(None)
            continue
        cache = forward(state.nets[v], [ex.bags()[v] for ex in keep], cfg.pooling, cfg.renormalize)
        Y = np.array([ex.labels for ex in keep], dtype=float)
        out.append((cache, Y / Y.sum(axis=1, keepdims=True)))
    return out, skipped


def _unlabeled_forward(state, batch, cfg, reconstruct):
    caches = []
    for v in range(2):
        idx = [k for k, ex in enumerate(batch) if ex.bags()[v] is not None]
        if not idx:
            caches.append(None)
            continue
        cache = forward(state.nets[v], [batch[k].bags()[v] for k in idx], cfg.pooling, cfg.renormalize,
                        reconstruct=reconstruct)
        caches.append((idx, cache))
    pair_rows = []
    if caches[0] is not None and caches[1] is not None:
        pos1 = {k: r for r, k in enumerate(caches[0][0])}
        pos2 = {k: r for r, k in enumerate(caches[1][0])}
        pair_rows = [(pos1[k], pos2[k]) for k in range(len(batch)) if k in pos1 and k in pos2]
    return caches, pair_rows


def _pair_predictions(caches, pair_rows):
    r1 = [a for a, _ in pair_rows]
    r2 = [b for _, b in pair_rows]
    return caches[0][1].pooled[r1], caches[1][1].pooled[r2], r1, r2


def supervised_batch_loss(state, batch, cfg, M=None):
    """Sum over examples and modalities of <P_v, M>, with predictor gradients.

    Gradients are the back-propagated centered Sinkhorn duals (summed, not
    averaged, over the batch).
    """
    M = state.cost if M is None else M
    fwd, skipped = _labeled_forward(state, batch, cfg)
    loss = 0.0
    plans = []
    grads = [net.zero_grads() for net in state.nets]
    for v, item in enumerate(fwd):
        if item is None:
            continue
        cache, T = item
        P, u, _ = _sinkhorn(cache.pooled, T, M, cfg)
        loss += float(np.sum(P * M))
        plans.append(P)
        grads[v] = backward(state.nets[v], cache, centered_dual(u, cfg.lam))
    return BatchResult(loss, plans, grads, skipped)


def semi_batch_loss(state, batch, cfg, parity=0, M=None):
    """Reconstruction plus cross-modal pseudo-coupling cost on unlabeled examples.

    With ``parity`` 0 the modality-2 prediction is the fixed pseudo-label for
    modality 1's gradient; with parity 1 the roles swap.
    """
    M = state.cost if M is None else M
    reconstruct = cfg.ae_weight > 0
    caches, pair_rows = _unlabeled_forward(state, batch, cfg, reconstruct)
    loss = 0.0
    plans = []
    pooled_grads = [None, None]
    if pair_rows:
        F1, F2, r1, r2 = _pair_predictions(caches, pair_rows)
        P, u, w = _sinkhorn(F1, F2, M, cfg)
        loss += float(np.sum(P * M))
        plans.append(P)
        v = parity % 2
        rows, dual = (r1, u) if v == 0 else (r2, w)
        g = np.zeros_like(caches[v][1].pooled)
        g[rows] = centered_dual(dual, cfg.lam)
        pooled_grads[v] = g
    grads = [net.zero_grads() for net in state.nets]
    for v in range(2):
        if caches[v] is None:
            continue
        cache = caches[v][1]
        if reconstruct:
            loss += cfg.ae_weight * float(cache.recon_sq.sum())
        if pooled_grads[v] is not None or reconstruct:
            grads[v] = backward(state.nets[v], cache, pooled_grads[v], cfg.ae_weight if reconstruct else 0.0)
    return BatchResult(loss, plans, grads)


# -- objective ------------------------------------------------------------------


def objective(state, data, cfg):
    """Full training objective at the current parameters, kernel and cost."""
    total = supervised_batch_loss(state, data.labeled, cfg).loss if data.labeled else 0.0
    if cfg.semi_supervised and data.unlabeled:
        total += semi_batch_loss(state, data.unlabeled, cfg).loss
    return total + cfg.lambda1 * km.burg_divergence(state.kernel, state.reference, cfg.burg_p)


# -- training loop -------------------------------------------------------------


def _add(acc, grads, scale):
    for k, g in grads.items():
        acc[k] += scale * g


def fit(data, cfg, log=None, on_epoch=None, validation=None):
    """Train both networks and the label kernel.

    ``log`` receives one dict per epoch, carrying fused-prediction metrics on
    ``validation`` examples when those are given; ``on_epoch(state)`` runs
    after each epoch (checkpointing hooks). Stops when the epoch objective changes by at
    most ``cfg.epsilon`` or after ``cfg.max_epochs`` epochs.
    """
    cfg.validate()
    state = init_state(data, cfg)
    state.skipped_examples = sum(1 for ex in data.labeled if not np.any(ex.labels))
    if cfg.max_epochs == 0:
        return state
    shuffle = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    use_unlabeled = cfg.semi_supervised and len(data.unlabeled) > 0
    u_order = shuffle.permutation(len(data.unlabeled)) if use_unlabeled else None
    u_ptr = 0
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = cfg.rate(epoch)
        order = shuffle.permutation(len(data.labeled))
        for start in range(0, len(order), cfg.batch_size):
            batch = [data.labeled[i] for i in order[start:start + cfg.batch_size]]
            ubatch = []
            if use_unlabeled:
                for _ in range(len(batch)):
                    if u_ptr == len(u_order):
                        u_order = shuffle.permutation(len(data.unlabeled))
                        u_ptr = 0
                    ubatch.append(data.unlabeled[u_order[u_ptr]])
                    u_ptr += 1
            _train_step(state, batch, ubatch, cfg, lr, step)
            step += 1
        state.epoch = epoch
        value = objective(state, data, cfg)
        if not np.isfinite(value):
            raise NonFiniteObjective(epoch, value)
        state.objective_history.append(value)
        if log is not None:
            rec = {"epoch": epoch, "objective": value}
            if validation:
                rec["validation"] = evaluate_examples(state, validation, cfg)["fused"]
            log(rec)
        if on_epoch is not None:
            on_epoch(state)
        hist = state.objective_history
        if len(hist) >= 2 and abs(hist[-1] - hist[-2]) <= cfg.epsilon:
            state.converged = True
            break
    return state


def _train_step(state, batch, ubatch, cfg, lr, step):
    fwd, _ = _labeled_forward(state, batch, cfg)
    if ubatch:
        caches, pair_rows = _unlabeled_forward(state, ubatch, cfg, cfg.ae_weight > 0)
    else:
        caches, pair_rows = None, []

    if not cfg.fixed_metric:
        acc = km.PlanAccumulator(state.cost.shape[0])
        for item in fwd:
            if item is not None:
                P, _, _ = _sinkhorn(item[0].pooled, item[1], state.cost, cfg)
                km.accumulate_pbar(acc, P)
        if pair_rows:
            F1, F2, _, _ = _pair_predictions(caches, pair_rows)
            P, _, _ = _sinkhorn(F1, F2, state.cost, cfg)
            km.accumulate_pbar(acc, P)
        if acc.sample_count:
            state.set_kernel(km.update_kernel(acc, state.reference, cfg.lambda1, cfg.literal_kernel_update,
                                              cfg.burg_p))

    M = state.cost
    total = [net.zero_grads() for net in state.nets]
    scale = 1.0  # batch gradients are summed, matching the summed objective
    for v, item in enumerate(fwd):
        if item is None:
            continue
        cache, T = item
        _, u, _ = _sinkhorn(cache.pooled, T, M, cfg)
        _add(total[v], backward(state.nets[v], cache, centered_dual(u, cfg.lam)), scale)
    if ubatch:
        pooled_grads = [None, None]
        if pair_rows:
            F1, F2, r1, r2 = _pair_predictions(caches, pair_rows)
            _, u, w = _sinkhorn(F1, F2, M, cfg)
            v = step % 2
            rows, dual = (r1, u) if v == 0 else (r2, w)
            g = np.zeros_like(caches[v][1].pooled)
            g[rows] = centered_dual(dual, cfg.lam)
            pooled_grads[v] = g
        for v in range(2):
            if caches[v] is None:
                continue
            wrec = cfg.ae_weight if cfg.ae_weight > 0 else 0.0
            if pooled_grads[v] is not None or wrec:
                _add(total[v], backward(state.nets[v], caches[v][1], pooled_grads[v], wrec), scale)
    for net, g in zip(state.nets, total):
        net.apply_gradients(g, lr)


# -- prediction / evaluation ---------------------------------------------------------


def predict(state, bag1=None, bag2=None, cfg=None):
    cfg = cfg or TrainingConfig()
    preds = []
    for net, bag in zip(state.nets, (bag1, bag2)):
        if bag is not None:
            preds.append(pool_bag(bag_concept(net, bag), cfg.pooling, cfg.renormalize))
    if not preds:
        raise NoInput("predict needs at least one bag")
    if len(preds) == 1:
        return preds[0]
    return fuse_predictions(preds[0], preds[1], cfg.fusion)


def predict_views(state, examples, cfg):
    """Pooled predictions per modality (nan rows where absent) and the fused view."""
    L = state.cost.shape[0]
    views = []
    for v in range(2):
        F = np.full((len(examples), L), np.nan)
        idx = [k for k, ex in enumerate(examples) if ex.bags()[v] is not None]
        if idx:
            cache = forward(state.nets[v], [examples[k].bags()[v] for k in idx], cfg.pooling, cfg.renormalize)
            F[idx] = cache.pooled
        views.append(F)
    fused = np.where(np.isnan(views[0]), views[1], np.where(np.isnan(views[1]), views[0],
                     fuse_predictions(np.nan_to_num(views[0]), np.nan_to_num(views[1]), cfg.fusion)))
    return views[0], views[1], fused


def evaluate_examples(state, examples, cfg):
    """Six criteria for modality 1, modality 2 and the fused prediction."""
    F1, F2, F = predict_views(state, examples, cfg)
    Y = np.array([ex.labels for ex in examples], dtype=int)
    report = {}
    for name, S in (("modality1", F1), ("modality2", F2), ("fused", F)):
        rows = ~np.isnan(S).any(axis=1)
        report[name] = evaluate(S[rows], Y[rows]) if rows.any() else {}
    return report


# -- checkpoints ------------------------------------------------------------------


def _mat(A):
    A = np.asarray(A, dtype=float)
    return {"shape": list(A.shape), "values": [float(x) for x in A.ravel()]}


def _unmat(d):
    return np.asarray(d["values"], dtype=float).reshape(d["shape"])


def checkpoint_dict(state, cfg, label_names):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "label_names": list(label_names),
        "epoch": state.epoch,
        "converged": state.converged,
        "objective_history": [float(x) for x in state.objective_history],
        "skipped_examples": state.skipped_examples,
        "kernel": _mat(state.kernel),
        "reference_kernel": _mat(state.reference),
        "cost": _mat(state.cost),
        "networks": [net.to_dict() for net in state.nets],
    }


def save_checkpoint(path, state, cfg, label_names):
    text = json.dumps(checkpoint_dict(state, cfg, label_names), separators=(",", ":"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_checkpoint(path):
    """Returns (state, cfg, label_names)."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    cfg = TrainingConfig.from_dict(d["config"])
    nets = [ModalNetwork.from_dict(n) for n in d["networks"]]
    state = TrainingState(nets, _unmat(d["kernel"]), _unmat(d["reference_kernel"]), _unmat(d["cost"]),
                          d["epoch"], list(d["objective_history"]), d["skipped_examples"], d["converged"])
    return state, cfg, d["label_names"]
