"""Experiment plans and the end-to-end audit pipeline.

A plan is a ``key = value`` text file.  Relative paths resolve against the
plan file's directory.  Recognised keys (defaults in brackets):

    name            free-form label [audit]
    audited         audited-model checkpoint
    d_source        records file / image directory the audited model was trained on
    sources         comma list of external sources
    eval_source     external source held out in the baseline case [last of sources]
    pinned          sources that must always stay in MINT training []
    case            baseline | rotate:<k> [baseline]
    scenario        high | medium | low [high]
    scale           desk factor in (0, 1] applied to the scenario size [1.0]
    train_per_side  explicit MINT-train count per side (overrides scenario/scale)
    eval_per_side   eval count per side [train_per_side // 4, at least 50]
    detector        cnn | vanilla | outcome [cnn]
    stages          stage list; cnn uses the first [1]
    seeds           [1, 2, 3]
    resolution      must match the audited checkpoint [checkpoint's]
    epochs          detector epochs [30 cnn, 20 vanilla]
    kernel, filters, width, kernel_fit   CNN detector shape [5, 64, 1.0, yes]
    hidden, l1, dropout, batch, lr       detector recipe [128, 0.1, 0.5, 128, 0.001]
    keep_blocks     also persist full activation blocks under aad/ [no]
    audited_epochs, audited_lr, audited_seed, audited_limit
                    recipe for audited models trained by the resolution ablation
    axis, axis_values   ablation sweep (see :mod:`mintlab.ablation`)

Run directory layout::

    plan.lock  run.json  aad/seed-<n>.aad  models/seed-<n>.mint
    reports/seed-<n>.json  reports/roc-<n>.csv  reports/aggregate.json
"""
import copy
import hashlib
import logging
import os
import platform
import re
import time
from dataclasses import dataclass, field, fields
from fractions import Fraction

import numpy as np

from . import _kernels, aad, audited, data, metrics, mint
from .errors import (CapacityError, ConfigError, DisjointnessError, MintError, ParameterError,
                     ProvenanceError)

log = logging.getLogger(__name__)

SCENARIOS = {"high": 50_000, "medium": 25_000, "low": 500}
MIN_PER_SIDE = 50


def _split_list(value):
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _bool(value):
    v = str(value).strip().lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def parse_number(value):
    """Float from '0.5', '1/3' and friends."""
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a number: {value!r}") from None


@dataclass
class ExperimentPlan:
    audited: str = ""
    d_source: str = ""
    sources: list = field(default_factory=list)
    name: str = "audit"
    eval_source: str = ""
    pinned: list = field(default_factory=list)
    case: str = "baseline"
    scenario: str = "high"
    scale: float = 1.0
    train_per_side: int = 0
    eval_per_side: int = 0
    detector: str = "cnn"
    stages: list = field(default_factory=lambda: ["1"])
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    resolution: int = 0
    epochs: int = 0
    kernel: int = 5
    kernel_fit: bool = True
    filters: int = 64
    width: str = "1"
    hidden: int = 128
    l1: float = 0.1
    dropout: float = 0.5
    batch: int = 128
    lr: float = 0.001
    keep_blocks: bool = False
    audited_epochs: int = 20
    audited_lr: float = 0.001
    audited_seed: int = 0
    audited_limit: int = 0
    axis: str = ""
    axis_values: list = field(default_factory=list)
    base_dir: str = field(default=".", compare=False, repr=False)

    _LISTS = ("sources", "pinned", "stages", "seeds", "axis_values")
    _PATHS = ("audited", "d_source", "sources", "eval_source")

    @classmethod
    def from_text(cls, text, base_dir="."):
        plan = cls(base_dir=base_dir)
        known = {f.name: f for f in fields(cls) if f.name != "base_dir"}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"plan line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"plan line {lineno}: unknown key {key!r}")
            plan.set(key, value)
        return plan

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read plan {path}: {exc}") from None
        return cls.from_text(text, base_dir=os.path.dirname(os.path.abspath(path)))

    def set(self, key, value):
        """Assign one field from its textual form."""
        f = {f.name: f for f in fields(self)}.get(key)
        if f is None or key == "base_dir":
            raise ConfigError(f"unknown plan key {key!r}")
        if key in self._LISTS:
            items = _split_list(value) if isinstance(value, str) else list(value)
            if key == "seeds":
                try:
                    items = [int(s) for s in items]
                except ValueError:
                    raise ConfigError(f"seeds must be integers: {value!r}") from None
            setattr(self, key, items)
        elif f.type is bool or f.type == "bool":
            setattr(self, key, value if isinstance(value, bool) else _bool(value))
        elif f.type is int or f.type == "int":
            try:
                setattr(self, key, int(value))
            except ValueError:
                raise ConfigError(f"{key} must be an integer: {value!r}") from None
        elif f.type is float or f.type == "float":
            setattr(self, key, parse_number(value))
        else:
            setattr(self, key, str(value).strip())

    def with_overrides(self, **kv):
        plan = copy.deepcopy(self)
        for k, v in kv.items():
            plan.set(k, v)
        return plan

    def canonical_text(self):
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "yes" if v else "no"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def path(self, p):
        return p if not p or os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))

    def validate(self):
        if not self.seeds:
            raise ConfigError("plan needs at least one seed")
        if self.detector not in ("cnn", "vanilla", "outcome"):
            raise ConfigError(f"unknown detector {self.detector!r}")
        if not 0 < self.scale <= 1:
            raise ConfigError(f"scale must be in (0, 1], got {self.scale}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        for s in self.stages:
            aad.parse_stage(s) if s != "combination" else None


# -- cases and scenarios -------------------------------------------------------

def _source_key(s):
    return getattr(s, "source_id", s)


def assemble_case(case, sources, eval_source=None, pinned=()):
    """Return (MINT-training externals, held-out eval external)."""
    sources = list(sources)
    keys = [_source_key(s) for s in sources]
    if len(sources) < 2:
        raise CapacityError(f"case assembly needs at least two external sources, got {len(sources)}")
    case = str(case).strip().lower()
    if case == "baseline":
        target = keys[-1] if not eval_source else _source_key(eval_source)
        if target not in keys:
            raise ConfigError(f"eval source {target!r} is not among the external sources")
        k = keys.index(target)
    else:
        m = re.fullmatch(r"rotate[:(]\s*(\d+)\s*\)?", case)
        if not m:
            raise ConfigError(f"unknown case {case!r}; use baseline or rotate:<k>")
        k = int(m.group(1))
        if not 0 <= k < len(sources):
            raise ConfigError(f"rotation index {k} out of range for {len(sources)} sources")
    if keys[k] in {_source_key(p) for p in pinned}:
        raise ConfigError(f"source {keys[k]!r} is pinned to training and cannot be held out")
    return [s for i, s in enumerate(sources) if i != k], sources[k]


def rotations(sources, pinned=()):
    """Every admissible (train, eval) assignment, one per non-pinned source."""
    pins = {_source_key(p) for p in pinned}
    return [assemble_case(f"rotate:{k}", sources, pinned=pinned)
            for k, s in enumerate(sources) if _source_key(s) not in pins]


def scenario_counts(scenario, scale, eval_per_side=0):
    if not 0 < scale <= 1:
        raise ParameterError(f"scale must be in (0, 1], got {scale}")
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}")
    per_side = int(round(SCENARIOS[scenario] * scale))
    if per_side < MIN_PER_SIDE:
        raise CapacityError(f"{scenario} at scale {scale} gives {per_side} per side (< {MIN_PER_SIDE})")
    ev = eval_per_side or max(MIN_PER_SIDE, per_side // 4)
    return data.SplitCounts(per_side, per_side, ev)


def scenario_subsample(scenario, scale, d_manifest, train_externals, eval_external, seed,
                       d_members=None, eval_per_side=0):
    counts = scenario_counts(scenario, scale, eval_per_side)
    split = data.make_membership_split(d_manifest, train_externals, eval_external, counts, seed,
                                       d_members=d_members)
    return counts, split


def plan_counts(plan):
    if plan.train_per_side:
        if plan.train_per_side < MIN_PER_SIDE:
            raise CapacityError(f"train_per_side {plan.train_per_side} < {MIN_PER_SIDE}")
        ev = plan.eval_per_side or max(MIN_PER_SIDE, plan.train_per_side // 4)
        return data.SplitCounts(plan.train_per_side, plan.train_per_side, ev)
    return scenario_counts(plan.scenario, plan.scale, plan.eval_per_side)


# -- disjointness --------------------------------------------------------------

@dataclass
class DisjointnessReport:
    d_e_pairs: list
    split_violations: list

    @property
    def ok(self):
        return not self.d_e_pairs and not self.split_violations


def verify_disjointness(d_manifest, e_manifests, splits=()):
    return DisjointnessReport(data.cross_pairs(d_manifest, e_manifests),
                              [v for s in splits for v in s.violations()])


# -- running -------------------------------------------------------------------

@dataclass
class RunRecord:
    plan_hash: str
    run_dir: str
    reports: list
    aggregate: dict
    environment: dict
    wall_clock: float
    status: str = "complete"
    overrides: dict = field(default_factory=dict)


def environment_stamp():
    import numba

    return {"python": platform.python_version(), "numpy": np.__version__,
            "numba": numba.__version__, "kernels": "numba" if _kernels.USE_NUMBA else "numpy",
            "platform": platform.platform()}


class _Stage:
    """Tag any failure inside the block with a pipeline stage name."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, exc, tb):
        if exc is not None and not hasattr(exc, "stage"):
            exc.stage = self.name
        return False


def load_sources(plan):
    with _Stage("load-data"):
        if not plan.d_source or not plan.sources:
            raise ConfigError("plan needs d_source and sources")
        d = data.load_source(plan.path(plan.d_source), role=data.ROLE_TRAINING)
        ext = [data.load_source(plan.path(s)) for s in plan.sources]
    return d, ext


def detector_for(plan, store_shapes, seed):
    """Build the plan's detector; ``store_shapes`` maps stage -> tap shape or vector dim."""
    eps = plan.epochs
    if plan.detector == "cnn":
        stage = aad.parse_stage(plan.stages[0])
        shape = store_shapes[stage]
        kernel = mint.fit_kernel(shape, plan.kernel) if plan.kernel_fit else plan.kernel
        cfg = mint.CnnMintConfig(stage=stage, filters=plan.filters, kernel=kernel,
                                 dropout=plan.dropout, epochs=eps or 30, batch=plan.batch,
                                 lr=plan.lr, width_multiplier=parse_number(plan.width))
        return mint.build_cnn(cfg, shape, seed)
    sources = [aad.OUTCOME] if plan.detector == "outcome" else detector_stages(plan)
    cfg = mint.VanillaMintConfig(sources=sources, hidden=plan.hidden, l1=plan.l1,
                                 dropout=plan.dropout, epochs=eps or 20, batch=plan.batch, lr=plan.lr)
    dims = {s: (v if isinstance(v, int) else v[2]) for s, v in store_shapes.items()}
    return mint.build_vanilla(cfg, dims, seed)


def detector_stages(plan):
    if plan.detector == "outcome":
        return [aad.OUTCOME]
    out = []
    for s in plan.stages:
        out.extend([1, 2, 3, 4] if str(s).strip().lower() == "combination" else [aad.parse_stage(s)])
    return out[:1] if plan.detector == "cnn" else out


def case_sources(plan, externals):
    eval_key = os.path.splitext(os.path.basename(plan.eval_source))[0] if plan.eval_source else None
    pinned = [os.path.splitext(os.path.basename(p))[0] for p in plan.pinned]
    return assemble_case(plan.case, externals, eval_key, pinned)


def checked_split(d_man, externals, train_ext, eval_ext, counts, seed, members=None):
    split = data.make_membership_split(d_man, train_ext, eval_ext, counts, seed, d_members=members)
    verdict = verify_disjointness(d_man, externals, [split])
    if not verdict.ok:
        raise DisjointnessError(verdict.split_violations, what="split")
    return split


def split_images(split, manifests, resolution):
    """(ids, float images, membership) for every train and eval id of ``split``."""
    ids = np.concatenate([split.train_ids, split.eval_ids])
    d_ids = set(np.concatenate([split.train_d, split.eval_d]).tolist())
    images = np.empty((len(ids), resolution, resolution, 3), np.float32)
    origin = np.array([split.origin[i] for i in ids.tolist()])
    for man in manifests:
        sel = np.flatnonzero(origin == man.source_id)
        if len(sel):
            images[sel] = man.images(ids[sel], resolution)
    membership = np.array([aad.MEMBER_D if i in d_ids else aad.MEMBER_E for i in ids.tolist()],
                          dtype=np.uint8)
    return ids, images, membership


def stage_shapes(model, stages):
    return {s: (model.taps[s - 1].shape if s != aad.OUTCOME else model.config.embedding_dim)
            for s in stages}


def without_blocks(store):
    return aad.AadStore(store.model_hash, store.resolution,
                        {s: aad.AadGroup(s, g.ids, g.membership, g.vectors)
                         for s, g in store.groups.items()})


def evaluate_detector(detector, store, split, plan, train_acc, resolution, eval_ext, train_ext,
                      curve=()):
    scores = mint.predict_membership(detector, store, split.eval_ids)
    labels = np.r_[np.ones(len(split.eval_d)), np.zeros(len(split.eval_e))]
    return metrics.evaluate(
        metrics.ScoreSet(split.eval_ids, scores, labels), plan_hash=plan.hash, seed=split.seed,
        detector=describe_detector(detector), param_count=detector.param_count,
        audited_train_accuracy=train_acc, resolution=resolution,
        extra={"train_per_side": split.counts.train_d, "eval_per_side": split.counts.eval_per_side,
               "eval_source": eval_ext.source_id, "train_sources": [m.source_id for m in train_ext],
               "loss_curve": [float(x) for x in curve], "scale": plan.scale})


def run_experiment(plan, run_dir, manifests=None, overrides=None):
    """Execute every seed of ``plan`` and write the run directory.

    ``manifests`` may pass pre-loaded (d_manifest, [externals]) to skip I/O.
    """
    t0 = time.time()
    plan.validate()
    ckpt_path = plan.path(plan.audited)
    if not ckpt_path or not os.path.isfile(ckpt_path):
        raise ProvenanceError(f"audited checkpoint not found: {ckpt_path or '(unset)'}")
    for sub in ("aad", "models", "reports"):
        os.makedirs(os.path.join(run_dir, sub), exist_ok=True)
    with open(os.path.join(run_dir, "plan.lock"), "w", encoding="utf-8") as fh:
        fh.write(plan.canonical_text())
    reports = []
    stage = _Stage("setup")
    try:
        d_man, externals = manifests or load_sources(plan)
        with _Stage("disjointness"):
            verdict = verify_disjointness(d_man, externals)
            if not verdict.ok:
                raise DisjointnessError(verdict.d_e_pairs)
        with _Stage("load-model"):
            model = audited.load_checkpoint(ckpt_path)
            model_hash = audited.checkpoint_hash(ckpt_path)
            if plan.resolution and plan.resolution != model.config.resolution:
                raise ConfigError(f"plan resolution {plan.resolution} != checkpoint resolution "
                                  f"{model.config.resolution}")
            members = audited.member_ids(model.config, d_man)
            train_acc = model.extra.get("final_train_accuracy")
        with _Stage("case"):
            train_ext, eval_ext = case_sources(plan, externals)
            counts = plan_counts(plan)
        stages_needed = detector_stages(plan)
        shapes = stage_shapes(model, stages_needed)
        res = model.config.resolution
        for seed in plan.seeds:
            with _Stage(f"split[seed {seed}]"):
                split = checked_split(d_man, externals, train_ext, eval_ext, counts, seed, members)
            with _Stage(f"extract[seed {seed}]"):
                ids, images, membership = split_images(split, [d_man, *externals], res)
                store = aad.extract_aad(model, ids, images, membership, stages_needed,
                                        store_blocks=plan.detector == "cnn", model_hash=model_hash)
                del images
                persisted = store if plan.keep_blocks else without_blocks(store)
                aad.write_store(persisted, os.path.join(run_dir, "aad", f"seed-{seed}.aad"))
            with _Stage(f"train-mint[seed {seed}]"):
                detector = detector_for(plan, shapes, seed)
                detector, curve = mint.train_mint(detector, store, split, seed)
                mint.save_mint(detector, os.path.join(run_dir, "models", f"seed-{seed}.mint"))
            with _Stage(f"evaluate[seed {seed}]"):
                report = evaluate_detector(detector, store, split, plan, train_acc, res,
                                           eval_ext, train_ext, curve)
                metrics.emit_report(report, os.path.join(run_dir, "reports", f"seed-{seed}.json"),
                                    roc_csv=os.path.join(run_dir, "reports", f"roc-{seed}.csv"))
                reports.append(report)
            del store
        agg = metrics.aggregate(reports, plan.hash)
        metrics.emit_report(agg, os.path.join(run_dir, "reports", "aggregate.json"))
    except MintError as exc:
        _write_record(run_dir, plan, reports, {}, t0, "incomplete", overrides,
                      failed_stage=getattr(exc, "stage", stage.name), error=str(exc))
        raise
    return _write_record(run_dir, plan, reports, agg, t0, "complete", overrides)


def describe_detector(model):
    if model.kind == "cnn":
        c = model.config
        return f"cnn[{aad.stage_name(c.stage)},k{c.kernel},w{c.width_multiplier:g}]"
    return "vanilla[" + "+".join(aad.stage_name(s) for s in model.sources) + "]"


def _write_record(run_dir, plan, reports, agg, t0, status, overrides, **extra):
    record = RunRecord(plan.hash, os.path.abspath(run_dir),
                       [f"reports/seed-{r.seed}.json" for r in reports], agg,
                       environment_stamp(), round(time.time() - t0, 3), status,
                       dict(overrides or {}))
    payload = dict(record.__dict__)
    payload.update(extra)
    with open(os.path.join(run_dir, "run.json"), "w", encoding="utf-8") as fh:
        fh.write(metrics.canonical_json(payload))
    return record
