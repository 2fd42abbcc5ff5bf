"""Membership detectors trained on AAD.

Vanilla: dense(128) -> ReLU (+L1 on its weights) -> batch norm -> dropout ->
dense(1) -> sigmoid, fed with concatenated channel-max vectors and/or the
outcome embedding.

CNN: conv(64 filters, 5x5 over C channels) -> ReLU -> maxpool(2, 2) ->
dense(C) -> ReLU -> dropout -> dense(1) -> sigmoid, fed with one full
H x W x C activation block.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .aad import OUTCOME, parse_stage, stage_name
from .checkpoint import read_container, write_container
from .data import balanced_batches
from .errors import ConfigError, CoverageError
from .layers import (BatchNorm1d, Conv2d, Dense, Dropout, Flatten, MaxPool2d, ReLU, Sequential,
                     Sigmoid, load_state_arrays, state_arrays)

log = logging.getLogger(__name__)

MAGIC = b"MINTMDL1"
POOL_WINDOW = 2


@dataclass
class VanillaMintConfig:
    sources: list = field(default_factory=lambda: [1])
    hidden: int = 128
    l1: float = 0.1
    dropout: float = 0.5
    epochs: int = 20
    batch: int = 128
    lr: float = 1e-3


@dataclass
class CnnMintConfig:
    stage: int = 1
    filters: int = 64
    kernel: int = 5
    dropout: float = 0.5
    epochs: int = 30
    batch: int = 128
    lr: float = 1e-3
    width_multiplier: float = 1.0


class MintModel:
    def __init__(self, kind, config, net, input_shape, seed, l1_layer=None):
        self.kind = kind
        self.config = config
        self.net = net
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.l1_layer = l1_layer

    @property
    def sources(self):
        return list(self.config.sources) if self.kind == "vanilla" else [self.config.stage]

    @property
    def param_count(self):
        return int(sum(p.size for p in self.net.parameters()))

    @property
    def layer_kinds(self):
        return self.net.kinds

    def parameters(self):
        return self.net.parameters()

    def __call__(self, x, mode="eval", rng=None):
        return self.net(T.Tensor(x) if not isinstance(x, T.Tensor) else x, mode, rng)

    def loss(self, x, labels, rng):
        """BCE (+ L1 on the hidden dense weights for vanilla) in train mode."""
        pred = self(x, "train", rng)
        loss = T.bce_loss(pred, labels)
        if self.kind == "vanilla" and self.config.l1 > 0:
            loss = T.add(loss, T.l1_penalty(self.l1_layer.W, self.config.l1))
        return loss


def _sources(config):
    return [parse_stage(s) for s in config.sources]


def build_vanilla(config, input_dims, seed=0, dtype=np.float32):
    """``input_dims`` maps each source stage to its vector length."""
    sources = _sources(config)
    if not sources:
        raise ConfigError("vanilla MINT needs at least one input source")
    missing = [stage_name(s) for s in sources if s not in input_dims]
    if missing:
        raise ConfigError(f"no input dimension for {', '.join(missing)}")
    config.sources = sources
    return _vanilla(config, int(sum(input_dims[s] for s in sources)), seed, dtype)


def _vanilla(config, din, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    hidden = Dense(din, config.hidden, rng, "hidden", dtype=dtype)
    net = Sequential([
        hidden,
        ReLU(),
        BatchNorm1d(config.hidden, "bn", dtype=dtype),
        Dropout(config.dropout),
        Dense(config.hidden, 1, rng, "out", dtype=dtype, gain=1.0),
        Sigmoid(),
    ])
    return MintModel("vanilla", config, net, (din,), seed, l1_layer=hidden)


def fc_width(channels, multiplier):
    return max(1, int(round(channels * multiplier)))


def fit_kernel(shape, kernel):
    """Largest kernel <= ``kernel`` that leaves room for the 2x2 max pool."""
    h, w = shape[:2]
    k = min(kernel, h - POOL_WINDOW + 1, w - POOL_WINDOW + 1)
    if k < 1:
        raise ConfigError(f"stage shape {shape} is too small for a conv + pool detector")
    return k


def build_cnn(config, stage_shape, seed=0, dtype=np.float32):
    h, w, c = stage_shape
    if config.filters < 1:
        raise ConfigError("filters must be >= 1")
    k = config.kernel
    ho, wo = h - k + 1, w - k + 1
    if k < 1 or ho < POOL_WINDOW or wo < POOL_WINDOW:
        raise ConfigError(f"kernel {k} does not fit a {h}x{w} block followed by a "
                          f"{POOL_WINDOW}x{POOL_WINDOW} pool")
    config.stage = parse_stage(config.stage)
    if config.stage == OUTCOME:
        raise ConfigError("the CNN detector needs a spatial stage, not the outcome vector")
    rng = np.random.default_rng(seed)
    flat = (ho // POOL_WINDOW) * (wo // POOL_WINDOW) * config.filters
    width = fc_width(c, config.width_multiplier)
    net = Sequential([
        Conv2d(c, config.filters, k, rng, "conv", dtype=dtype),
        ReLU(),
        MaxPool2d(POOL_WINDOW, POOL_WINDOW),
        Flatten(),
        Dense(flat, width, rng, "fc", dtype=dtype),
        ReLU(),
        Dropout(config.dropout),
        Dense(width, 1, rng, "out", dtype=dtype, gain=1.0),
        Sigmoid(),
    ])
    return MintModel("cnn", config, net, stage_shape, seed)


def features(model, store, ids):
    if model.kind == "cnn":
        return store.blocks(model.config.stage, ids)
    return np.concatenate([store.vectors(s, ids) for s in model.sources], axis=1)


def check_coverage(model, store, ids):
    missing = set()
    for s in model.sources:
        missing.update(store.missing(s, ids))
    if missing:
        raise CoverageError(missing)


def train_mint(model, store, split, seed=0):
    """Train on the balanced MINT-train side of ``split``; returns (model, loss curve).

    The curve starts with the loss of the first batch before any update and
    then holds the mean batch loss of each epoch.
    """
    cfg = model.config
    check_coverage(model, store, np.concatenate([split.train_ids, split.eval_ids]))
    rng = np.random.default_rng([seed, 1])
    params = model.parameters()
    curve = []
    for epoch in range(cfg.epochs):
        losses = []
        for ids, labels in balanced_batches(split, cfg.batch, seed, epoch):
            x = features(model, store, ids)
            with T.Tape() as tape:
                loss = model.loss(x, labels, rng)
            if not curve:
                curve.append(loss.item())
            tape.backward(loss)
            T.adam_step(params, lr=cfg.lr)
            losses.append(loss.item())
        curve.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("%s mint epoch %d loss %.4f", model.kind, epoch + 1, curve[-1])
    return model, curve


def predict_features(model, x, batch_size=512):
    out = np.empty(len(x), dtype=np.float64)
    for i in range(0, len(x), batch_size):
        out[i:i + batch_size] = model(x[i:i + batch_size], "eval").data.reshape(-1)
    return out


def predict_membership(model, store, ids, batch_size=512):
    """Membership scores in (0, 1) for ``ids``; 1 means "used in training"."""
    check_coverage(model, store, ids)
    ids = np.asarray(ids, dtype=np.uint64)
    out = np.empty(len(ids), dtype=np.float64)
    for i in range(0, len(ids), batch_size):
        chunk = ids[i:i + batch_size]
        out[i:i + batch_size] = model(features(model, store, chunk), "eval").data.reshape(-1)
    return out


def outcome_only_baseline(store, split, seed=0, config=None):
    """Vanilla detector on the outcome embedding alone (the MIA-style reference)."""
    config = config or VanillaMintConfig()
    config.sources = [OUTCOME]
    if OUTCOME not in store.groups:
        raise CoverageError(split.train_ids.tolist())
    model = build_vanilla(config, {OUTCOME: store.groups[OUTCOME].vectors.shape[1]}, seed)
    return train_mint(model, store, split, seed)[0]


def save_mint(model, path):
    cfg = {"kind": model.kind, "config": asdict(model.config), "input_shape": list(model.input_shape),
           "seed": model.seed}
    return write_container(path, MAGIC, cfg, state_arrays(model.parameters(), model.net.buffers()))


def load_mint(path):
    cfg, arrays = read_container(path, MAGIC)
    if cfg["kind"] == "vanilla":
        config = VanillaMintConfig(**cfg["config"])
        config.sources = _sources(config)
        model = _vanilla(config, cfg["input_shape"][0], cfg["seed"])
    else:
        model = build_cnn(CnnMintConfig(**cfg["config"]), tuple(cfg["input_shape"]), cfg["seed"])
    load_state_arrays(model.parameters(), model.net.buffers(), arrays)
    return model
