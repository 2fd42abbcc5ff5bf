"""Auxiliary Auditable Data: activation blocks, channel-max vectors, embeddings.

The store keeps one group per stage.  Stage ids are 1..4 for tap points and
:data:`OUTCOME` (255) for the model's embedding, which is treated as one more
pseudo-stage so a single file format covers both.
"""
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DimensionError, FormatError, ParameterError, ProvenanceError

OUTCOME = 255
MEMBER_D = 1
MEMBER_E = 0
STORE_MAGIC = b"MINTAAD1"
STORE_VERSION = 1
_REC_HEAD = struct.Struct("<QBBIII")


def channel_max_pool(block):
    """H x W x C (or N x H x W x C) -> per-channel spatial maximum."""
    block = np.asarray(block)
    if block.size == 0 or block.ndim not in (3, 4):
        raise DimensionError(f"channel_max_pool needs a non-empty H x W x C block, got {block.shape}")
    if block.ndim == 3:
        return _kernels.channel_max(block[None])[0]
    return _kernels.channel_max(block)


def channel_mean_pool(block):
    """Channel mean: the alternative the max pool is compared against."""
    block = np.asarray(block)
    if block.size == 0:
        raise DimensionError("empty block")
    return block.mean(axis=(-3, -2))


def parse_stage(token):
    token = str(token).strip().lower()
    if token in ("outcome", "out", "y", str(OUTCOME)):
        return OUTCOME
    try:
        stage = int(token)
    except ValueError:
        raise ParameterError(f"unknown stage {token!r}") from None
    if not 1 <= stage <= 4:
        raise ParameterError(f"unknown stage {stage}")
    return stage


def stage_name(stage):
    return "outcome" if stage == OUTCOME else f"stage{stage}"


@dataclass
class AadRecord:
    sample_id: int
    stage_id: int
    membership: int
    vector: np.ndarray
    block: np.ndarray | None = None


@dataclass
class AadGroup:
    stage: int
    ids: np.ndarray  # uint64, ascending
    membership: np.ndarray  # uint8
    vectors: np.ndarray  # N x C float32
    blocks: np.ndarray | None = None  # N x H x W x C float32

    def __len__(self):
        return len(self.ids)

    def rows(self, ids):
        ids = np.asarray(ids, dtype=np.uint64)
        pos = np.minimum(np.searchsorted(self.ids, ids), max(len(self.ids) - 1, 0))
        found = self.ids[pos] == ids if len(self.ids) else np.zeros(len(ids), bool)
        return pos, found


@dataclass
class AadStore:
    model_hash: bytes
    resolution: int
    groups: dict  # stage -> AadGroup

    @property
    def stages(self):
        return sorted(self.groups)

    def __len__(self):
        return sum(len(g) for g in self.groups.values())

    def counts(self):
        out = {MEMBER_D: 0, MEMBER_E: 0}
        for g in self.groups.values():
            for m in (MEMBER_D, MEMBER_E):
                out[m] += int((g.membership == m).sum())
        return out

    def records(self):
        for stage in self.stages:
            g = self.groups[stage]
            for i in range(len(g)):
                yield AadRecord(int(g.ids[i]), stage, int(g.membership[i]), g.vectors[i],
                                None if g.blocks is None else g.blocks[i])

    def missing(self, stage, ids):
        g = self.groups.get(stage)
        if g is None:
            return list(np.asarray(ids).tolist())
        _, found = g.rows(ids)
        return np.asarray(ids)[~found].tolist()

    def vectors(self, stage, ids):
        g = self.groups[stage]
        pos, found = g.rows(ids)
        assert found.all()
        return g.vectors[pos]

    def blocks(self, stage, ids):
        g = self.groups[stage]
        if g.blocks is None:
            raise ParameterError(f"{stage_name(stage)} was extracted without full blocks")
        pos, found = g.rows(ids)
        assert found.all()
        return g.blocks[pos]


def extract_aad(model, ids, images, membership, stages, store_blocks=False, model_hash=b"\0" * 32,
                batch_size=256, pool="max"):
    """Run the frozen model over ``images`` and collect the requested stages.

    ``pool='mean'`` swaps the channel-max reduction for a channel mean; it
    exists for comparison only.
    """
    stages = sorted({parse_stage(s) for s in stages})
    if pool not in ("max", "mean"):
        raise ParameterError(f"pool must be max or mean, got {pool!r}")
    if pool == "mean" and store_blocks:
        # stored blocks are checked against channel-max vectors on read
        raise ParameterError("channel-mean vectors cannot be stored alongside blocks")
    ids = np.asarray(ids, dtype=np.uint64)
    membership = np.asarray(membership, dtype=np.uint8)
    order = np.argsort(ids, kind="stable")
    ids, membership, images = ids[order], membership[order], images[order]
    n = len(ids)
    reduce = channel_max_pool if pool == "max" else channel_mean_pool
    taps = {s: model.taps[s - 1].shape for s in stages if s != OUTCOME}
    vec = {s: np.empty((n, taps[s][2] if s != OUTCOME else model.config.embedding_dim), np.float32)
           for s in stages}
    blk = {s: np.empty((n,) + taps[s], np.float32) for s in taps} if store_blocks else {}
    for i in range(0, n, batch_size):
        _, emb, acts = model.forward_with_taps(images[i:i + batch_size])
        for s in stages:
            if s == OUTCOME:
                vec[s][i:i + batch_size] = emb
                continue
            a = acts[s - 1]
            vec[s][i:i + batch_size] = reduce(a)
            if store_blocks:
                blk[s][i:i + batch_size] = a
    groups = {s: AadGroup(s, ids, membership, vec[s], blk.get(s)) for s in stages}
    return AadStore(bytes(model_hash), model.config.resolution, groups)


def write_store(store, path):
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC + struct.pack("<I", STORE_VERSION) + store.model_hash)
        fh.write(struct.pack("<II", store.resolution, len(store)))
        for stage in store.stages:
            g = store.groups[stage]
            h, w = (g.blocks.shape[1:3] if g.blocks is not None else (0, 0))
            c = g.vectors.shape[1]
            for i in range(len(g)):
                fh.write(_REC_HEAD.pack(int(g.ids[i]), stage, int(g.membership[i]), h, w, c))
                fh.write(np.ascontiguousarray(g.vectors[i], dtype="<f4").tobytes())
                if g.blocks is not None:
                    fh.write(np.ascontiguousarray(g.blocks[i], dtype="<f4").tobytes())


def read_store(path, expected_model_hash=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    head = 8 + 4 + 32 + 8
    if len(buf) < head:
        raise FormatError("file shorter than the MINTAAD1 header", offset=len(buf))
    if buf[:8] != STORE_MAGIC:
        raise FormatError(f"bad magic {buf[:8]!r}", offset=0)
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported version {version}", offset=8)
    model_hash = buf[12:44]
    if expected_model_hash is not None and model_hash != bytes(expected_model_hash):
        raise ProvenanceError(f"store was extracted from model {model_hash.hex()[:16]}, "
                              f"expected {bytes(expected_model_hash).hex()[:16]}")
    resolution, count = struct.unpack_from("<II", buf, 44)
    pos = head
    per_stage = {}
    mv = memoryview(buf)
    for index in range(count):
        if pos + _REC_HEAD.size > len(buf):
            raise FormatError("truncated record header", offset=pos, index=index)
        sid, stage, member, h, w, c = _REC_HEAD.unpack_from(buf, pos)
        pos += _REC_HEAD.size
        nbytes = 4 * (c + h * w * c)
        if pos + nbytes > len(buf):
            raise FormatError("truncated record payload", offset=pos, index=index)
        vector = np.frombuffer(mv[pos:pos + 4 * c], dtype="<f4")
        block = np.frombuffer(mv[pos + 4 * c:pos + nbytes], dtype="<f4").reshape(h, w, c) if h else None
        pos += nbytes
        per_stage.setdefault(stage, []).append((sid, member, vector, block, (h, w, c)))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} bytes after the {count} declared records", offset=pos)
    groups = {}
    for stage, recs in per_stage.items():
        if stage != OUTCOME and not 1 <= stage <= 4:
            raise FormatError(f"unknown stage id {stage}")
        shapes = {r[4] for r in recs}
        if len(shapes) != 1:
            raise FormatError(f"{stage_name(stage)} records disagree on shape: {sorted(shapes)}")
        ids = np.array([r[0] for r in recs], dtype=np.uint64)
        if len(np.unique(ids)) != len(ids):
            raise FormatError(f"duplicate sample ids in {stage_name(stage)}")
        order = np.argsort(ids, kind="stable")
        vectors = np.stack([r[2] for r in recs])[order].astype(np.float32)
        blocks = None
        if recs[0][3] is not None:
            blocks = np.stack([r[3] for r in recs])[order].astype(np.float32)
            if not np.array_equal(channel_max_pool(blocks), vectors):
                raise FormatError(f"{stage_name(stage)} vectors do not match their blocks")
        groups[stage] = AadGroup(stage, ids[order], np.array([r[1] for r in recs], np.uint8)[order],
                                 vectors, blocks)
    return AadStore(bytes(model_hash), resolution, groups)
