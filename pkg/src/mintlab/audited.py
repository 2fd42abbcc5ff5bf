"""The desk-scale model under audit.

A plain staged CNN: every stage is a run of 3x3 conv+ReLU blocks, the first
block of stages 2..4 downsampling by stride 2.  The output of the last block
of each stage is registered as a tap point.  A global-average-pooled linear
embedding of size L is the model outcome; a classification layer on top is
only used for training.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import file_hash, read_container, write_container
from .errors import ConfigError, DimensionError, LabelError
from .layers import Conv2d, Dense, load_state_arrays, state_arrays

log = logging.getLogger(__name__)

MAGIC = b"MINTCKP1"


@dataclass
class AuditedModelConfig:
    stages: list = field(default_factory=lambda: [[1, 16], [1, 32], [1, 64], [1, 128]])
    kernel: int = 3
    use_skip_connections: bool = False
    embedding_dim: int = 128
    num_classes: int = 10
    resolution: int = 32
    # provenance of the training set, filled in by train_audited
    train_source: str | None = None
    train_limit: int | None = None

    def validate(self):
        if not self.stages:
            raise ConfigError("at least one stage is required")
        for blocks, channels in self.stages:
            if blocks < 1 or channels < 1:
                raise ConfigError(f"bad stage {(blocks, channels)}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel must be a positive odd number")
        if self.embedding_dim < 8:
            raise ConfigError("embedding_dim must be >= 8")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.resolution < 8:
            raise ConfigError("resolution must be >= 8")
        size = self.resolution
        for _ in self.stages[1:]:
            size = (size - 1) // 2 + 1
        if size < 1:
            raise ConfigError("resolution too small for the number of stages")

    def tap_shapes(self):
        shapes, size = [], self.resolution
        for s, (_, channels) in enumerate(self.stages):
            if s > 0:
                size = (size + 2 * (self.kernel // 2) - self.kernel) // 2 + 1
            shapes.append((size, size, channels))
        return shapes

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass(frozen=True)
class TapPoint:
    stage: int  # 1-based
    shape: tuple


class AuditedModel:
    def __init__(self, config, seed=0, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = seed
        self.extra = {}
        rng = np.random.default_rng(seed)
        self.stages = []
        cin, pad = 3, config.kernel // 2
        for s, (blocks, channels) in enumerate(config.stages):
            convs = []
            for b in range(blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                convs.append(Conv2d(cin, channels, config.kernel, rng, f"stage{s + 1}.block{b + 1}",
                                    stride=stride, padding=pad, dtype=dtype))
                cin = channels
            self.stages.append(convs)
        self.embed = Dense(cin, config.embedding_dim, rng, "embed", dtype=dtype, gain=1.0)
        self.classify = Dense(config.embedding_dim, config.num_classes, rng, "classify",
                              dtype=dtype, gain=1.0)
        self.taps = [TapPoint(i + 1, shape) for i, shape in enumerate(config.tap_shapes())]

    def parameters(self):
        params = [p for convs in self.stages for conv in convs for p in conv.parameters()]
        return params + self.embed.parameters() + self.classify.parameters()

    @property
    def param_count(self):
        return int(sum(p.size for p in self.parameters()))

    def _block(self, conv, x):
        y = T.relu(conv(x))
        if self.config.use_skip_connections and y.shape == x.shape:
            y = T.add(y, x)
        return y

    def _forward(self, x, collect):
        if not isinstance(x, T.Tensor):
            x = T.Tensor(x)
        r = self.config.resolution
        if x.ndim != 4 or x.shape[1:] != (r, r, 3):
            raise DimensionError(f"expected N x {r} x {r} x 3 input, got {x.shape}")
        taps = []
        for convs in self.stages:
            for conv in convs:
                x = self._block(conv, x)
            if collect:
                taps.append(x.data)
        emb = self.embed(T.global_avg_pool(x))
        logits = self.classify(T.relu(emb))
        return logits, emb, taps

    def forward(self, x):
        return self._forward(x, collect=False)[0]

    __call__ = forward

    def forward_with_taps(self, x):
        """(logits, embedding, [stage-1..stage-4 activation blocks]) as arrays."""
        logits, emb, taps = self._forward(x, collect=True)
        return logits.data, emb.data, taps


def build_model(config, seed=0, dtype=np.float32):
    return AuditedModel(config, seed, dtype)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def predict_classes(model, images, batch_size=256):
    out = np.empty(len(images), dtype=np.int64)
    for i in range(0, len(images), batch_size):
        out[i:i + batch_size] = model.forward(images[i:i + batch_size]).data.argmax(axis=1)
    return out


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # dicts: epoch, loss, train_accuracy, seconds
    final_train_accuracy: float = float("nan")

    def to_dict(self):
        return asdict(self)


def train_audited(model, manifest, epochs=10, lr=1e-3, seed=0, batch_size=128, limit=None):
    """Softmax cross-entropy + Adam on the labelled images of ``manifest``.

    ``limit`` keeps the first ``limit`` samples in id order; the selection is
    written into the config so the member set can be reconstructed later.
    """
    if not manifest.has_labels:
        raise LabelError(f"source {manifest.source_id} has no class labels")
    ids = manifest.ids if limit is None else manifest.ids[:limit]
    images = manifest.images(ids, model.config.resolution)
    labels = manifest.classes[manifest.rows(ids)].astype(np.int64)
    if labels.max() >= model.config.num_classes:
        raise LabelError(f"labels reach {labels.max()}, model has {model.config.num_classes} classes")
    model.config.train_source = manifest.source_id
    model.config.train_limit = None if limit is None else int(limit)
    rng = np.random.default_rng(seed)
    params = model.parameters()
    history = TrainLog()
    for epoch in range(epochs):
        t0 = time.time()
        total, correct, loss_sum = 0, 0, 0.0
        for rows in _batches(len(ids), batch_size, rng):
            with T.Tape() as tape:
                logits = model.forward(images[rows])
                loss = T.softmax_cross_entropy(logits, labels[rows])
            tape.backward(loss)
            T.adam_step(params, lr=lr)
            loss_sum += loss.item() * len(rows)
            correct += int((logits.data.argmax(axis=1) == labels[rows]).sum())
            total += len(rows)
        entry = {"epoch": epoch + 1, "loss": loss_sum / total, "train_accuracy": correct / total,
                 "seconds": round(time.time() - t0, 3)}
        history.epochs.append(entry)
        log.info("audited epoch %d loss %.4f acc %.4f", epoch + 1, entry["loss"], entry["train_accuracy"])
    history.final_train_accuracy = float((predict_classes(model, images) == labels).mean())
    return model, history


def member_ids(config, manifest):
    """Ids of the samples the model was trained on, from its recorded provenance."""
    if config.train_source is not None and config.train_source != manifest.source_id:
        raise ConfigError(f"model was trained on {config.train_source}, not {manifest.source_id}")
    return manifest.ids if config.train_limit is None else manifest.ids[:config.train_limit]


def save_checkpoint(model, path, extra=None):
    cfg = {"config": asdict(model.config), "seed": model.seed}
    if extra:
        cfg["extra"] = extra
    return write_container(path, MAGIC, cfg, state_arrays(model.parameters(), {}))


def load_checkpoint(path):
    cfg, arrays = read_container(path, MAGIC)
    model = AuditedModel(AuditedModelConfig.from_dict(cfg["config"]), seed=cfg.get("seed", 0))
    load_state_arrays(model.parameters(), {}, arrays)
    model.extra = cfg.get("extra", {})
    return model


def checkpoint_hash(path):
    return file_hash(path)


def config_from_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
