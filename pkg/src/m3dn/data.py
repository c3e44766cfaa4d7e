"""
Synthetic multi-modal multi-instance multi-label data, its JSONL file format,
the train/test/labeled split and modality masking.

Labels are drawn by thresholding a correlated Gaussian (Gaussian copula), so
label co-occurrence follows a known PSD correlation matrix. Every positive
label plants one instance near that label's prototype in each modality; the
remaining instances of a bag come from label-free background prototypes.
"""

from dataclasses import dataclass, field, asdict
import gzip
import json
import math

import numpy as np
from scipy.stats import norm

from .errors import (
    DimensionInconsistency,
    InsufficientData,
    InvalidConfig,
    ParseError,
    SchemaVersionMismatch,
)
from .network import Bag

FORMAT_VERSION = 1


@dataclass
class Example:
    id: str
    bag1: Bag = None
    bag2: Bag = None
    labels: np.ndarray = None

    def bags(self):
        return self.bag1, self.bag2

    @property
    def complete(self):
        return self.bag1 is not None and self.bag2 is not None


@dataclass
class M3Dataset:
    label_count: int
    dims: tuple
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    test: list = field(default_factory=list)
    label_names: list = None

    def __post_init__(self):
        if self.label_names is None:
            self.label_names = [f"label_{i}" for i in range(self.label_count)]
        self.dims = tuple(self.dims)

    def label_matrix(self, examples=None):
        examples = self.labeled if examples is None else examples
        return np.array([ex.labels for ex in examples], dtype=float).reshape(-1, self.label_count)


@dataclass
class GeneratorConfig:
    label_count: int = 5
    bag_count: int = 1000
    instance_range_1: tuple = (2, 6)
    instance_range_2: tuple = (2, 6)
    feature_dims: tuple = (16, 12)
    latent_label_correlation: object = "random-psd"
    correlation_strength: float = 0.7
    label_prior: float = 0.35
    background_prototypes: int = 3
    noise_level: float = 0.05
    labeled_fraction: float = 0.3
    test_fraction: float = 0.3
    missing_modality_fraction: float = 0.0
    seed: int = 0

    def validate(self):
        if self.label_count < 2:
            raise InvalidConfig("label_count", "need at least 2 labels")
        if self.bag_count < 1:
            raise InvalidConfig("bag_count", "need at least one bag")
        for name in ("labeled_fraction", "test_fraction", "missing_modality_fraction", "correlation_strength"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(name, f"must lie in [0, 1], got {v!r}")
        if not 0.0 < self.label_prior < 1.0:
            raise InvalidConfig("label_prior", "must lie strictly between 0 and 1")
        if self.noise_level < 0:
            raise InvalidConfig("noise_level", "must be nonnegative")
        for name in ("instance_range_1", "instance_range_2"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise InvalidConfig(name, f"need 1 <= min <= max, got {(lo, hi)}")
        if len(self.feature_dims) != 2 or min(self.feature_dims) < 1:
            raise InvalidConfig("feature_dims", "need two positive feature dimensions")
        if self.background_prototypes < 0:
            raise InvalidConfig("background_prototypes", "must be nonnegative")
        C = self.latent_label_correlation
        if not isinstance(C, str):
            C = np.asarray(C, dtype=float)
            if C.shape != (self.label_count, self.label_count):
                raise InvalidConfig("latent_label_correlation", f"expected a {self.label_count}x{self.label_count} matrix")
            if np.max(np.abs(C - C.T)) > 1e-9 or np.linalg.eigvalsh(C)[0] < -1e-9:
                raise InvalidConfig("latent_label_correlation", "must be symmetric PSD")
        elif C != "random-psd":
            raise InvalidConfig("latent_label_correlation", f"unknown option {C!r}")
        return self

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise InvalidConfig(sorted(extra)[0], "unknown generator field")
        d = dict(d)
        for key in ("instance_range_1", "instance_range_2", "feature_dims"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            cfg = cls(**d)
        except TypeError as e:
            raise InvalidConfig("<root>", str(e)) from None
        return cfg.validate()

    def to_dict(self):
        d = asdict(self)
        if isinstance(self.latent_label_correlation, np.ndarray):
            d["latent_label_correlation"] = self.latent_label_correlation.tolist()
        for key in ("instance_range_1", "instance_range_2", "feature_dims"):
            d[key] = list(d[key])
        return d


def block_correlation(L, strength, rng):
    """Random grouping of labels into pairs/triples; correlation ``strength`` within a group."""
    perm = rng.permutation(L)
    n_groups = max(1, math.ceil(L / 2.5))
    G = np.zeros((L, n_groups))
    for pos, lab in enumerate(perm):
        G[lab, pos % n_groups] = 1.0
    C = strength * G @ G.T + (1.0 - strength) * np.eye(L)
    return C


def _prototypes(rng, count, dim):
    A = rng.normal(size=(max(count, dim), dim))
    if dim >= count:
        Q, _ = np.linalg.qr(A.T)
        return Q[:, :count].T
    return A[:count] / np.linalg.norm(A[:count], axis=1, keepdims=True)


def generate(cfg):
    """Draw a labeled dataset (everything in ``labeled``) and return it with the generating correlation."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    L = cfg.label_count
    if isinstance(cfg.latent_label_correlation, str):
        C = block_correlation(L, cfg.correlation_strength, rng)
    else:
        C = np.asarray(cfg.latent_label_correlation, dtype=float)
    w, V = np.linalg.eigh(C)
    root = V * np.sqrt(np.clip(w, 0, None))
    threshold = norm.ppf(1.0 - cfg.label_prior) * np.sqrt(np.diag(C))
    nb = cfg.background_prototypes
    protos = [_prototypes(rng, L + nb, d) for d in cfg.feature_dims]
    ranges = (cfg.instance_range_1, cfg.instance_range_2)
    examples = []
    for n in range(cfg.bag_count):
        z = root @ rng.normal(size=L)
        y = (z > threshold).astype(int)
        pos = np.flatnonzero(y)
        bags = []
        for v in range(2):
            lo, hi = ranges[v]
            m = max(int(rng.integers(lo, hi + 1)), len(pos))
            idx = list(pos)
            if nb:
                idx += list(L + rng.integers(0, nb, size=m - len(pos)))
            else:
                idx += list(rng.choice(pos, size=m - len(pos))) if len(pos) else list(rng.integers(0, L, size=m))
            idx = rng.permutation(np.array(idx, dtype=int))
            X = protos[v][idx] + cfg.noise_level * rng.normal(size=(m, cfg.feature_dims[v]))
            bags.append(Bag(v + 1, X, bag_id=f"{n}/m{v + 1}"))
        examples.append(Example(str(n), bags[0], bags[1], y))
    data = M3Dataset(L, tuple(cfg.feature_dims), labeled=examples)
    return data, C


def _floor(x):
    return int(math.floor(x + 1e-9))


def split(data, cfg):
    """Seeded test / labeled / unlabeled partition of ``data.labeled``.

    Sizes: test = floor(N * test_fraction), labeled = floor(train * labeled_fraction),
    the rest unlabeled. ``missing_modality_fraction`` of the training examples
    then lose one randomly chosen bag. Unlabeled examples keep their labels
    for diagnostics only.
    """
    pool = list(data.labeled) + list(data.unlabeled) + list(data.test)
    N = len(pool)
    rng = np.random.default_rng([cfg.seed, 1])
    order = rng.permutation(N)
    n_test = _floor(N * cfg.test_fraction)
    n_train = N - n_test
    n_lab = _floor(n_train * cfg.labeled_fraction)
    test = [pool[i] for i in order[:n_test]]
    train = [pool[i] for i in order[n_test:]]
    if cfg.labeled_fraction > 0 and n_lab == 0:
        raise InsufficientData("labeled split is empty")
    if cfg.test_fraction > 0 and n_test == 0:
        raise InsufficientData("test split is empty")
    n_mask = _floor(n_train * cfg.missing_modality_fraction)
    if n_mask:
        masked = set(rng.choice(n_train, size=n_mask, replace=False).tolist())
        drop = rng.integers(1, 3, size=n_train)
        train = [
            Example(ex.id, None if drop[k] == 1 else ex.bag1, None if drop[k] == 2 else ex.bag2, ex.labels)
            if k in masked else ex
            for k, ex in enumerate(train)
        ]
    return {
        "train_labeled": train[:n_lab],
        "train_unlabeled": train[n_lab:],
        "test": test,
    }


def make_dataset(data, parts):
    return M3Dataset(data.label_count, data.dims, parts["train_labeled"], parts["train_unlabeled"],
                     parts["test"], list(data.label_names))


# -- JSONL format -------------------------------------------------------------


def _open(path, mode):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, mode, encoding="utf-8", newline="\n")


def _dumps(obj):
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _record(ex, split_name):
    bags = {}
    if ex.bag1 is not None:
        bags["m1"] = ex.bag1.instances.tolist()
    if ex.bag2 is not None:
        bags["m2"] = ex.bag2.instances.tolist()
    rec = {"id": ex.id, "split": split_name, "bags": bags}
    if ex.labels is not None:
        rec["labels"] = [int(x) for x in ex.labels]
    return rec


def write_dataset(data, path):
    header = {"version": FORMAT_VERSION, "L": data.label_count, "d1": data.dims[0], "d2": data.dims[1],
              "label_names": list(data.label_names)}
    lines = [_dumps(header)]
    for split_name, items in (("labeled", data.labeled), ("unlabeled", data.unlabeled), ("test", data.test)):
        lines += [_dumps(_record(ex, split_name)) for ex in items]
    text = "\n".join(lines) + "\n"
    if str(path).endswith(".gz"):
        # no embedded name or timestamp: same data, same bytes
        with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
            gz.write(text.encode("utf-8"))
    else:
        with _open(path, "w") as fh:
            fh.write(text)


def read_dataset(path):
    with _open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(1, "missing header record")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(1, f"invalid JSON: {e.msg}") from None
    if not isinstance(header, dict):
        raise ParseError(1, "header must be a JSON object")
    if header.get("version") != FORMAT_VERSION:
        raise SchemaVersionMismatch(1, f"unsupported format version {header.get('version')!r}")
    try:
        L, d1, d2 = int(header["L"]), int(header["d1"]), int(header["d2"])
    except (KeyError, TypeError, ValueError):
        raise ParseError(1, "header needs integer fields L, d1, d2") from None
    data = M3Dataset(L, (d1, d2), label_names=header.get("label_names"))
    if len(data.label_names) != L:
        raise DimensionInconsistency(1, f"{len(data.label_names)} label names for L = {L}")
    dims = {"m1": d1, "m2": d2}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(lineno, f"invalid JSON: {e.msg}") from None
        if not isinstance(rec, dict) or "id" not in rec or not isinstance(rec.get("bags"), dict):
            raise ParseError(lineno, "record needs 'id' and a 'bags' object")
        bags = {}
        for key, inst in rec["bags"].items():
            if key not in dims:
                raise ParseError(lineno, f"unknown modality key {key!r}")
            X = np.asarray(inst, dtype=float)
            if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] != dims[key]:
                raise DimensionInconsistency(lineno, f"bag {key} has shape {X.shape}, expected (m, {dims[key]})")
            bags[key] = Bag(int(key[1]), X, bag_id=f"{rec['id']}/{key}")
        if not bags:
            raise ParseError(lineno, "record has no bags")
        labels = rec.get("labels")
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (L,) or not np.all((labels == 0) | (labels == 1)):
                raise DimensionInconsistency(lineno, f"label vector must be {L} values in {{0,1}}")
            labels = labels.astype(int)
        split_name = rec.get("split", "labeled" if labels is not None else "unlabeled")
        ex = Example(str(rec["id"]), bags.get("m1"), bags.get("m2"), labels)
        if split_name == "labeled":
            if labels is None:
                raise ParseError(lineno, "labeled record without labels")
            data.labeled.append(ex)
        elif split_name == "unlabeled":
            data.unlabeled.append(ex)
        elif split_name == "test":
            data.test.append(ex)
        else:
            raise ParseError(lineno, f"unknown split {split_name!r}")
    return data
