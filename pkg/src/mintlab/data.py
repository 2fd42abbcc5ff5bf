"""Image sources, manifests, preprocessing and membership splits.

Two on-disk source formats are understood:

* ``records``: the ``MINTIMG1`` binary container (see :func:`write_records`).
* ``image-directory``: a tree of PNG/JPEG/BMP files.  When images sit in
  first-level subdirectories, the sorted subdirectory names become the class
  labels 0..K-1.

Every sample gets a stable 64-bit id and a SHA-256 content hash over its
decoded pixels, so the same picture stored twice is detected regardless of
file encoding.
"""
import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError, DataError, DisjointnessError, FormatError, ParameterError

IMG_MAGIC = b"MINTIMG1"
IMG_VERSION = 1
_IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")

ROLE_TRAINING = "audited-training"
ROLE_EXTERNAL = "external"


@dataclass
class ImageSample:
    sample_id: int
    source_id: str
    class_label: int | None
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]


@dataclass
class SourceManifest:
    source_id: str
    role: str
    ids: np.ndarray  # uint64, ascending
    classes: np.ndarray  # int32, -1 when absent
    hashes: list
    locators: list
    pixels: np.ndarray = field(repr=False)  # N x H x W x 3 uint8

    def __len__(self):
        return len(self.ids)

    @property
    def has_labels(self):
        return len(self.classes) > 0 and bool(np.all(self.classes >= 0))

    def rows(self, ids):
        """Row positions of ``ids`` inside this manifest."""
        ids = np.asarray(ids, dtype=np.uint64)
        pos = np.searchsorted(self.ids, ids)
        pos = np.minimum(pos, len(self.ids) - 1)
        bad = self.ids[pos] != ids if len(self.ids) else np.ones(len(ids), bool)
        if np.any(bad):
            raise DataError(f"{int(bad.sum())} ids not in source {self.source_id}")
        return pos

    def hash_of(self):
        return dict(zip(self.ids.tolist(), self.hashes))

    def images(self, ids=None, resolution=None):
        """Float32 pixels in [0, 1], optionally resized to ``resolution``."""
        px = self.pixels if ids is None else self.pixels[self.rows(ids)]
        out = px.astype(np.float32) / np.float32(255.0)
        if resolution is not None and out.shape[1:3] != (resolution, resolution):
            out = resize(out, resolution)
        return out

    def sample(self, sample_id):
        i = int(self.rows([sample_id])[0])
        label = int(self.classes[i])
        return ImageSample(int(self.ids[i]), self.source_id, None if label < 0 else label,
                           self.pixels[i].astype(np.float32) / 255.0)

    def with_role(self, role):
        return SourceManifest(self.source_id, role, self.ids, self.classes, self.hashes,
                              self.locators, self.pixels)


def content_hash(pixels_u8):
    h = hashlib.sha256()
    h.update(struct.pack("<3I", *pixels_u8.shape))
    h.update(np.ascontiguousarray(pixels_u8, dtype=np.uint8).tobytes())
    return h.hexdigest()


def stable_id(source_id, key):
    digest = hashlib.blake2b(f"{source_id}/{key}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _sorted_manifest(source_id, role, ids, classes, locators, pixels):
    ids = np.asarray(ids, dtype=np.uint64)
    if len(np.unique(ids)) != len(ids):
        raise FormatError(f"duplicate sample ids in source {source_id}")
    order = np.argsort(ids, kind="stable")
    pixels = pixels[order] if len(ids) else pixels
    hashes = [content_hash(p) for p in pixels]
    return SourceManifest(source_id, role, ids[order], np.asarray(classes, dtype=np.int32)[order],
                          hashes, [locators[i] for i in order], pixels)


# -- binary records -------------------------------------------------------------

def write_records(path, ids, classes, pixels):
    """Write the MINTIMG1 container.  ``pixels`` is N x H x W x 3 uint8."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 4 or pixels.shape[3] != 3:
        raise ParameterError("pixels must be an N x H x W x 3 uint8 array")
    n, h, w, _ = pixels.shape
    rec = np.dtype([("id", "<u8"), ("cls", "<i4"), ("px", "u1", (h * w * 3,))])
    body = np.empty(n, dtype=rec)
    body["id"] = np.asarray(ids, dtype=np.uint64)
    body["cls"] = np.asarray(classes, dtype=np.int32)
    body["px"] = pixels.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC + struct.pack("<4I", IMG_VERSION, n, h, w))
        fh.write(body.tobytes())


def _read_records(path, source_id, role):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 24:
        raise FormatError("file shorter than the MINTIMG1 header", offset=len(buf))
    if buf[:8] != IMG_MAGIC:
        raise FormatError(f"bad magic {buf[:8]!r}", offset=0)
    version, n, h, w = struct.unpack_from("<4I", buf, 8)
    if version != IMG_VERSION:
        raise FormatError(f"unsupported version {version}", offset=8)
    rec_size = 12 + h * w * 3
    payload = len(buf) - 24
    if payload != n * rec_size:
        index = payload // rec_size if rec_size else 0
        raise FormatError(f"expected {n} records of {rec_size} bytes, payload is {payload} bytes",
                          offset=24 + index * rec_size, index=index)
    rec = np.dtype([("id", "<u8"), ("cls", "<i4"), ("px", "u1", (h * w * 3,))])
    body = np.frombuffer(buf, dtype=rec, offset=24, count=n)
    pixels = body["px"].reshape(n, h, w, 3).copy()
    locators = [24 + i * rec_size for i in range(n)]
    return _sorted_manifest(source_id, role, body["id"], body["cls"], locators, pixels)


def _read_directory(path, source_id, role):
    from PIL import Image

    files = []
    for root, dirs, names in os.walk(path):
        dirs.sort()
        for name in sorted(names):
            if name.lower().endswith(_IMAGE_EXTS):
                files.append(os.path.relpath(os.path.join(root, name), path))
    if not files:
        return SourceManifest(source_id, role, np.zeros(0, np.uint64), np.zeros(0, np.int32),
                              [], [], np.zeros((0, 1, 1, 3), np.uint8))
    top = sorted({f.split(os.sep)[0] for f in files if os.sep in f})
    class_of = {name: i for i, name in enumerate(top)}
    pixels, classes = [], []
    for i, rel in enumerate(files):
        try:
            with Image.open(os.path.join(path, rel)) as im:
                pixels.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
        except OSError as exc:
            raise FormatError(f"cannot decode {rel}: {exc}", index=i) from None
        classes.append(class_of.get(rel.split(os.sep)[0], -1) if os.sep in rel else -1)
    shapes = {p.shape for p in pixels}
    if len(shapes) != 1:
        raise FormatError(f"images in {path} have mixed sizes {sorted(shapes)}")
    ids = [stable_id(source_id, rel.replace(os.sep, "/")) for rel in files]
    return _sorted_manifest(source_id, role, ids, classes, files, np.stack(pixels))


def load_source(path, format=None, source_id=None, role=ROLE_EXTERNAL):
    """Load one image source into a :class:`SourceManifest`."""
    if not os.path.exists(path):
        raise DataError(f"source path does not exist: {path}")
    if format is None:
        format = "image-directory" if os.path.isdir(path) else "raw-binary-records"
    if source_id is None:
        source_id = os.path.splitext(os.path.basename(os.path.normpath(path)))[0]
    try:
        if format in ("raw-binary-records", "records"):
            return _read_records(path, source_id, role)
        if format in ("image-directory", "directory"):
            return _read_directory(path, source_id, role)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    raise ConfigError(f"unknown source format {format!r}")


def write_sidecar(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        for sid, h, c in zip(manifest.ids.tolist(), manifest.hashes, manifest.classes.tolist()):
            fh.write(f"{sid}\t{h}\t{c}\n")


def read_sidecar(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise FormatError(f"sidecar line has {len(parts)} fields", index=i)
            out.append((int(parts[0]), parts[1], int(parts[2])))
    return out


# -- preprocessing -------------------------------------------------------------

def _interp_matrix(n_in, n_out):
    # half-pixel centres: output pixel o samples input coordinate (o + .5) * n_in / n_out - .5
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def bilinear(image, out_h, out_w):
    """Bilinear resample of an H x W x C image or N x H x W x C batch (no size guard)."""
    img = np.asarray(image)
    batched = img.ndim == 4
    if not batched:
        img = img[None]
    _, h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        out = img.copy()
    else:
        ay = _interp_matrix(h, out_h).astype(img.dtype)
        ax = _interp_matrix(w, out_w).astype(img.dtype)
        out = np.einsum("rh,nhwc->nrwc", ay, img, optimize=True)
        out = np.einsum("sw,nrwc->nrsc", ax, out, optimize=True)
    return out if batched else out[0]


def resize(image, target):
    """Bilinear resize of an H x W x 3 image (or N x H x W x 3 batch) to target x target."""
    if target < 8:
        raise ParameterError(f"target resolution must be >= 8, got {target}")
    out = bilinear(image, target, target)
    return np.clip(out, 0, 1, out=out)


# -- duplicates ---------------------------------------------------------------

def dedup_check(manifests):
    """All exact-content collisions between samples of different sources."""
    seen = {}
    for m in manifests:
        for sid, h in zip(m.ids.tolist(), m.hashes):
            seen.setdefault(h, []).append((m.source_id, sid))
    pairs = []
    for owners in seen.values():
        for i in range(len(owners)):
            for j in range(i + 1, len(owners)):
                if owners[i][0] != owners[j][0]:
                    pairs.append((owners[i][1], owners[j][1]))
    return sorted(pairs)


def cross_pairs(d_manifest, e_manifests):
    """D-to-E collisions only, as (d_id, e_id)."""
    d_hash = {}
    for sid, h in zip(d_manifest.ids.tolist(), d_manifest.hashes):
        d_hash.setdefault(h, []).append(sid)
    pairs = []
    for m in e_manifests:
        for sid, h in zip(m.ids.tolist(), m.hashes):
            for d_id in d_hash.get(h, ()):
                pairs.append((d_id, sid))
    return sorted(pairs)


# -- splits -------------------------------------------------------------------

@dataclass(frozen=True)
class SplitCounts:
    train_d: int
    train_e: int
    eval_per_side: int


@dataclass
class SplitSpec:
    train_d: np.ndarray
    train_e: np.ndarray
    eval_d: np.ndarray
    eval_e: np.ndarray
    seed: int
    counts: SplitCounts
    origin: dict  # sample id -> source id
    hashes: dict  # sample id -> content hash

    @property
    def train_ids(self):
        return np.concatenate([self.train_d, self.train_e])

    @property
    def eval_ids(self):
        return np.concatenate([self.eval_d, self.eval_e])

    def violations(self):
        """Id- and hash-level overlaps between MINT train and eval, plus balance."""
        problems = []
        train, ev = set(self.train_ids.tolist()), set(self.eval_ids.tolist())
        problems += [("id", i) for i in sorted(train & ev)]
        th = {self.hashes[i] for i in train}
        problems += [("hash", i) for i in sorted(ev) if self.hashes[i] in th]
        if len(self.eval_d) != len(self.eval_e):
            problems.append(("balance", (len(self.eval_d), len(self.eval_e))))
        return problems

    def check(self):
        problems = self.violations()
        if problems:
            raise DisjointnessError(problems, what="MINT train/eval")


def make_membership_split(d_manifest, e_manifests, e_eval, counts, seed,
                          d_members=None, class_disjoint=False):
    """Deterministic MINT train/eval split.

    ``d_members`` restricts the D side to the samples the audited model was
    actually trained on (defaults to the whole D manifest).
    """
    train_sources = {m.source_id for m in e_manifests}
    if e_eval.source_id in train_sources:
        raise ConfigError(f"eval source {e_eval.source_id!r} is also a MINT training source")
    if d_manifest.source_id in train_sources | {e_eval.source_id}:
        raise ConfigError("the audited training source cannot act as external data")
    rng = np.random.default_rng(seed)
    origin, hashes = {}, {}
    d_hash = d_manifest.hash_of()

    d_pool = d_manifest.ids if d_members is None else np.sort(np.asarray(d_members, dtype=np.uint64))
    need_d = counts.train_d + counts.eval_per_side
    if len(d_pool) < need_d:
        raise CapacityError(f"D side has {len(d_pool)} samples, needs {need_d}")
    d_perm = rng.permutation(d_pool)
    eval_d, train_d = d_perm[:counts.eval_per_side], d_perm[counts.eval_per_side:need_d]
    for i in d_perm[:need_d].tolist():
        origin[i] = d_manifest.source_id
        hashes[i] = d_hash[i]

    # E-eval candidates must not share content with anything used for training
    train_content = {d_hash[i] for i in train_d.tolist()}
    for m in e_manifests:
        train_content.update(m.hashes)
    eval_mask = np.array([h not in train_content for h in e_eval.hashes], dtype=bool)
    eval_pool = e_eval.ids[eval_mask]
    if len(eval_pool) < counts.eval_per_side:
        raise CapacityError(f"external eval source {e_eval.source_id} has {len(eval_pool)} usable "
                            f"samples, needs {counts.eval_per_side}")
    eval_e = rng.permutation(eval_pool)[:counts.eval_per_side]
    e_eval_hash = e_eval.hash_of()
    for i in eval_e.tolist():
        origin[i] = e_eval.source_id
        hashes[i] = e_eval_hash[i]

    pool_ids, pool_src, pool_hash, pool_cls = [], [], [], []
    eval_classes = set(e_eval.classes[e_eval.rows(eval_e)].tolist()) if class_disjoint else set()
    d_eval_content = {d_hash[i] for i in eval_d.tolist()}
    for m in sorted(e_manifests, key=lambda m: m.source_id):
        for sid, h, c in zip(m.ids.tolist(), m.hashes, m.classes.tolist()):
            if h in d_eval_content or (class_disjoint and c in eval_classes):
                continue
            pool_ids.append(sid)
            pool_src.append(m.source_id)
            pool_hash.append(h)
    if len(pool_ids) < counts.train_e:
        raise CapacityError(f"external training sources have {len(pool_ids)} usable samples, "
                            f"needs {counts.train_e}")
    pick = rng.permutation(len(pool_ids))[:counts.train_e]
    train_e = np.asarray(pool_ids, dtype=np.uint64)[pick]
    for k in pick.tolist():
        origin[pool_ids[k]] = pool_src[k]
        hashes[pool_ids[k]] = pool_hash[k]

    split = SplitSpec(train_d, train_e, eval_d, eval_e, seed, counts, origin, hashes)
    split.check()
    return split


def balanced_index_batches(n_pos, n_neg, batch_size, rng):
    """Yield (pos_rows, neg_rows) pairs with batch_size/2 of each; drops the remainder."""
    if batch_size < 2 or batch_size % 2:
        raise ParameterError(f"batch_size must be even and >= 2, got {batch_size}")
    half = batch_size // 2
    pos = rng.permutation(n_pos)
    neg = rng.permutation(n_neg)
    for b in range(min(n_pos, n_neg) // half):
        yield pos[b * half:(b + 1) * half], neg[b * half:(b + 1) * half]


def balanced_batches(split, batch_size, seed, epoch=0):
    """One epoch of balanced MINT-training batches as (ids, labels); label 1 = D."""
    rng = np.random.default_rng([seed, epoch])
    for pos, neg in balanced_index_batches(len(split.train_d), len(split.train_e), batch_size, rng):
        ids = np.concatenate([split.train_d[pos], split.train_e[neg]])
        labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))]).astype(np.float32)
        yield ids, labels
