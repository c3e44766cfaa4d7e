"""
Per-modality bag networks.

Each modality owns a fully connected encoder, a softmax label layer producing
one label distribution per instance (the bag-concept layer), a pooling rule
that turns those columns into a bag-level prediction, and an optional decoder
used for the reconstruction loss on unlabeled instances. Gradients are
computed by hand-written reverse mode.
"""

from dataclasses import dataclass, field
import itertools

import numpy as np

from .errors import DimensionMismatch, NoDecoder, NonFiniteActivation, StaleCache

_bag_ids = itertools.count()

ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda a: (a > 0).astype(float)),
    "linear": (lambda z: z, lambda a: np.ones_like(a)),
}


@dataclass
class Bag:
    modality: int
    instances: np.ndarray
    bag_id: object = field(default_factory=lambda: next(_bag_ids))

    def __post_init__(self):
        self.instances = np.atleast_2d(np.asarray(self.instances, dtype=float))
        if self.instances.shape[0] < 1:
            raise ValueError("a bag needs at least one instance")
        if self.modality not in (1, 2):
            raise ValueError(f"modality must be 1 or 2, got {self.modality}")

    @property
    def size(self):
        return self.instances.shape[0]

    @property
    def dim(self):
        return self.instances.shape[1]


def _uniform(rng, fan_out, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class ModalNetwork:
    """Encoder -> softmax label layer, plus an optional mirrored decoder.

    Parameters live in ``self.params`` keyed ``enc{k}.W``, ``enc{k}.b``,
    ``label.W``, ``label.b``, ``dec{k}.W``, ``dec{k}.b``. Encoder and decoder
    hidden layers share one activation; the label layer feeds a softmax and
    the last decoder layer is linear.
    """

    def __init__(self, input_dim, hidden, n_labels, activation="tanh", decoder=True, rng=None, decoder_rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        hidden = tuple(int(h) for h in hidden)
        if not hidden:
            raise ValueError("need at least one encoder layer")
        self.input_dim = int(input_dim)
        self.hidden = hidden
        self.n_labels = int(n_labels)
        self.activation = activation
        self.has_decoder = bool(decoder)
        self.version = 0
        rng = np.random.default_rng(rng)
        self.params = {}
        dims = (self.input_dim,) + hidden
        for k, (a, b) in enumerate(zip(dims, dims[1:])):
            self.params[f"enc{k}.W"] = _uniform(rng, b, a)
            self.params[f"enc{k}.b"] = np.zeros(b)
        self.params["label.W"] = _uniform(rng, self.n_labels, hidden[-1])
        self.params["label.b"] = np.zeros(self.n_labels)
        if self.has_decoder:
            drng = np.random.default_rng(decoder_rng) if decoder_rng is not None else rng
            rdims = tuple(reversed(dims))
            for k, (a, b) in enumerate(zip(rdims, rdims[1:])):
                self.params[f"dec{k}.W"] = _uniform(drng, b, a)
                self.params[f"dec{k}.b"] = np.zeros(b)

    @property
    def n_enc(self):
        return len(self.hidden)

    @property
    def hidden_dim(self):
        return self.hidden[-1]

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def apply_gradients(self, grads, lr):
        for k, g in grads.items():
            self.params[k] -= lr * g
        self.version += 1

    def copy(self):
        other = object.__new__(ModalNetwork)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "n_labels": self.n_labels,
            "activation": self.activation,
            "decoder": self.has_decoder,
            "layers": [
                {"name": k, "shape": list(v.shape), "values": [float(x) for x in v.ravel()]}
                for k, v in self.params.items()
            ],
        }

    @classmethod
    def from_dict(cls, d):
        net = cls(d["input_dim"], d["hidden"], d["n_labels"], d["activation"], d["decoder"], rng=0)
        for layer in d["layers"]:
            name = layer["name"]
            if name not in net.params:
                raise ValueError(f"unexpected parameter {name!r} in checkpoint")
            arr = np.asarray(layer["values"], dtype=float).reshape(layer["shape"])
            if arr.shape != net.params[name].shape:
                raise DimensionMismatch(f"parameter {name} has shape {arr.shape}, expected {net.params[name].shape}")
            net.params[name] = arr
        return net

    # -- forward pieces -----------------------------------------------------

    def _encode(self, X):
        act = ACTIVATIONS[self.activation][0]
        acts = [X]
        a = X
        for k in range(self.n_enc):
            a = act(a @ self.params[f"enc{k}.W"].T + self.params[f"enc{k}.b"])
            acts.append(a)
        if not np.all(np.isfinite(a)):
            raise NonFiniteActivation("encoder produced a non-finite activation")
        return acts

    def _decode(self, H):
        act = ACTIVATIONS[self.activation][0]
        acts = [H]
        a = H
        for k in range(self.n_enc):
            z = a @ self.params[f"dec{k}.W"].T + self.params[f"dec{k}.b"]
            a = z if k == self.n_enc - 1 else act(z)
            acts.append(a)
        return acts


def softmax(Z):
    Z = Z - Z.max(axis=-1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=-1, keepdims=True)


def _check_bag(net, bag):
    if bag.dim != net.input_dim:
        raise DimensionMismatch(f"bag {bag.bag_id!r} has feature dim {bag.dim}, network expects {net.input_dim}")


def encode_instance(net, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (net.input_dim,):
        raise DimensionMismatch(f"instance has shape {x.shape}, network expects ({net.input_dim},)")
    return net._encode(x[None, :])[-1][0]


def bag_concept(net, bag):
    """L x m matrix whose columns are the per-instance label distributions."""
    _check_bag(net, bag)
    H = net._encode(bag.instances)[-1]
    return softmax(H @ net.params["label.W"].T + net.params["label.b"]).T


def pool_bag(concept, mode="max", renormalize=True):
    concept = np.asarray(concept, dtype=float)
    if mode == "max":
        f = concept.max(axis=1)
        return f / f.sum() if renormalize else f
    if mode == "mean":
        return concept.mean(axis=1)
    raise ValueError(f"unknown pooling mode {mode!r}")


def fuse_predictions(f1, f2, mode="mean"):
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if f1.shape != f2.shape:
        raise DimensionMismatch(f"cannot fuse predictions of shapes {f1.shape} and {f2.shape}")
    if mode == "mean":
        return 0.5 * (f1 + f2)
    if mode == "max":
        f = np.maximum(f1, f2)
        return f / f.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown fusion mode {mode!r}")


def reconstruction_loss(net, bag):
    """Sum over the bag's instances of the squared reconstruction error."""
    if not net.has_decoder:
        raise NoDecoder("network was built without a decoder")
    _check_bag(net, bag)
    H = net._encode(bag.instances)[-1]
    R = net._decode(H)[-1]
    return float(np.sum((bag.instances - R) ** 2))


# -- batched forward / backward ---------------------------------------------


@dataclass
class ForwardCache:
    bag_ids: list
    version: int
    starts: np.ndarray
    sizes: np.ndarray
    enc_acts: list
    probs: np.ndarray  # (instances, L) softmax rows
    raw: np.ndarray  # (bags, L) pooled before renormalization
    pooled: np.ndarray  # (bags, L)
    argmax: np.ndarray  # (bags, L) instance index per label, max pooling only
    pooling: str
    renormalize: bool
    dec_acts: list = None
    recon_sq: np.ndarray = None  # (bags,) squared reconstruction error per bag


def forward(net, bags, pooling="max", renormalize=True, reconstruct=False):
    """Run a list of bags through the network in one stacked pass."""
    if not bags:
        raise ValueError("forward needs at least one bag")
    for bag in bags:
        _check_bag(net, bag)
    sizes = np.array([b.size for b in bags])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    X = np.vstack([b.instances for b in bags])
    enc = net._encode(X)
    probs = softmax(enc[-1] @ net.params["label.W"].T + net.params["label.b"])
    n, L = len(bags), net.n_labels
    argmax = np.zeros((n, L), dtype=int)
    if pooling == "max":
        raw = np.maximum.reduceat(probs, starts, axis=0)
        for b, (s, m) in enumerate(zip(starts, sizes)):
            argmax[b] = s + np.argmax(probs[s:s + m], axis=0)  # first max wins ties
        pooled = raw / raw.sum(axis=1, keepdims=True) if renormalize else raw
    elif pooling == "mean":
        raw = np.add.reduceat(probs, starts, axis=0) / sizes[:, None]
        pooled = raw
    else:
        raise ValueError(f"unknown pooling mode {pooling!r}")
    cache = ForwardCache([b.bag_id for b in bags], net.version, starts, sizes, enc, probs, raw, pooled,
                         argmax, pooling, renormalize)
    if reconstruct:
        if not net.has_decoder:
            raise NoDecoder("network was built without a decoder")
        dec = net._decode(enc[-1])
        cache.dec_acts = dec
        cache.recon_sq = np.add.reduceat(np.sum((X - dec[-1]) ** 2, axis=1), starts)
    return cache


def backward(net, cache, pooled_grad=None, recon_weight=0.0, bags=None):
    """Reverse-mode gradients for sum_b <pooled_grad_b, f_b> + sum_b w_b * recon_b.

    ``pooled_grad`` is (bags, L) upstream gradient at the pooled predictions;
    ``recon_weight`` is a scalar or per-bag array weighting the squared
    reconstruction error. Max pooling routes each label's gradient to its
    argmax instance only.
    """
    if cache.version != net.version:
        raise StaleCache("network parameters changed since the forward pass")
    if bags is not None and [b.bag_id for b in bags] != cache.bag_ids:
        raise StaleCache("backward called with different bags than the cached forward pass")
    grads = net.zero_grads()
    L = net.n_labels
    n_inst = cache.probs.shape[0]
    dH = np.zeros((n_inst, net.hidden_dim))

    if pooled_grad is not None:
        g = np.asarray(pooled_grad, dtype=float).reshape(len(cache.bag_ids), L)
        dprobs = np.zeros_like(cache.probs)
        if cache.pooling == "max":
            if cache.renormalize:
                s = cache.raw.sum(axis=1, keepdims=True)
                draw = (g - np.sum(g * cache.pooled, axis=1, keepdims=True)) / s
            else:
                draw = g
            rows = cache.argmax
            cols = np.broadcast_to(np.arange(L), rows.shape)
            np.add.at(dprobs, (rows.ravel(), cols.ravel()), draw.ravel())
        else:
            dprobs = np.repeat(g / cache.sizes[:, None], cache.sizes, axis=0)
        p = cache.probs
        dz = p * (dprobs - np.sum(dprobs * p, axis=1, keepdims=True))
        H = cache.enc_acts[-1]
        grads["label.W"] = dz.T @ H
        grads["label.b"] = dz.sum(axis=0)
        dH += dz @ net.params["label.W"]

    w = np.broadcast_to(np.asarray(recon_weight, dtype=float), (len(cache.bag_ids),))
    if np.any(w != 0):
        if cache.dec_acts is None:
            raise StaleCache("forward pass was run without reconstruct=True")
        X = cache.enc_acts[0]
        winst = np.repeat(w, cache.sizes)[:, None]
        dA = -2.0 * winst * (X - cache.dec_acts[-1])
        deriv = ACTIVATIONS[net.activation][1]
        for k in reversed(range(net.n_enc)):
            a_out = cache.dec_acts[k + 1]
            dz = dA if k == net.n_enc - 1 else dA * deriv(a_out)
            grads[f"dec{k}.W"] = dz.T @ cache.dec_acts[k]
            grads[f"dec{k}.b"] = dz.sum(axis=0)
            dA = dz @ net.params[f"dec{k}.W"]
        dH += dA

    deriv = ACTIVATIONS[net.activation][1]
    dA = dH
    for k in reversed(range(net.n_enc)):
        dz = dA * deriv(cache.enc_acts[k + 1])
        grads[f"enc{k}.W"] = dz.T @ cache.enc_acts[k]
        grads[f"enc{k}.b"] = dz.sum(axis=0)
        dA = dz @ net.params[f"enc{k}.W"]
    return grads
