"""Ablation sweeps over one plan axis.

Axes and the values they accept:

    layers       stage names 1..4, outcome, combination
    scenario     high | medium | low, or a fraction of the plan's train size
    resolution   input sizes; one audited model is trained per size
    complexity   width multipliers for the CNN detector's hidden dense layer

Each value becomes a full :func:`mintlab.protocol.run_experiment` under
``<out>/runs/<axis>-<value>/`` and one row of ``<out>/table.csv`` and
``<out>/table.json``.
"""
import csv
import io
import logging
import os
from dataclasses import asdict, dataclass

from . import audited, data, protocol
from .errors import ConfigError
from .metrics import canonical_json, fmt4

log = logging.getLogger(__name__)

AXES = ("layers", "scenario", "resolution", "complexity")
DEFAULT_VALUES = {
    "layers": ["1", "2", "3", "4", "outcome", "combination"],
    "scenario": ["high", "medium", "low"],
    "resolution": ["16", "32", "64"],
    "complexity": ["1/3", "1", "3", "10"],
}


@dataclass
class AblationRow:
    axis: str
    value: str
    detector: str
    accuracy_mean: float
    accuracy_std: float
    auc_mean: float
    auc_std: float
    param_count: int
    resolution: int
    train_per_side: int
    seeds: list
    run_dir: str


def _slug(value):
    return str(value).replace("/", "_").replace(" ", "")


def plan_for(plan, axis, value, workdir, manifests=None):
    """The plan that realises ``axis = value``; may train an audited model."""
    value = str(value).strip()
    if axis == "layers":
        v = value.lower()
        if v == "outcome":
            return plan.with_overrides(detector="outcome", stages="outcome")
        if v == "combination":
            return plan.with_overrides(detector="vanilla", stages="combination")
        return plan.with_overrides(stages=value)
    if axis == "scenario":
        if value in protocol.SCENARIOS:
            return plan.with_overrides(scenario=value, train_per_side=0)
        base = protocol.plan_counts(plan)
        frac = protocol.parse_number(value)
        if not 0 < frac <= 1:
            raise ConfigError(f"scenario fraction must be in (0, 1], got {value}")
        # keep the eval set fixed so only the training budget moves
        return plan.with_overrides(train_per_side=int(round(base.train_d * frac)),
                                   eval_per_side=base.eval_per_side)
    if axis == "complexity":
        protocol.parse_number(value)
        return plan.with_overrides(width=value)
    if axis == "resolution":
        res = int(value)
        ckpt = os.path.join(workdir, "audited", f"audited-r{res}.ckpt")
        if not os.path.exists(ckpt):
            train_audited_at(plan, res, ckpt, manifests)
        return plan.with_overrides(audited=os.path.abspath(ckpt), resolution=res)
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


def train_audited_at(plan, resolution, path, manifests=None):
    """Retrain the plan's audited architecture at another input size."""
    template = audited.load_checkpoint(plan.path(plan.audited))
    cfg = audited.AuditedModelConfig.from_dict(asdict(template.config))
    cfg.resolution = resolution
    d_man = manifests[0] if manifests else data.load_source(plan.path(plan.d_source),
                                                            role=data.ROLE_TRAINING)
    limit = plan.audited_limit or cfg.train_limit
    model = audited.build_model(cfg, seed=plan.audited_seed)
    model, history = audited.train_audited(model, d_man, epochs=plan.audited_epochs,
                                           lr=plan.audited_lr, seed=plan.audited_seed, limit=limit)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    audited.save_checkpoint(model, path, extra={"final_train_accuracy": history.final_train_accuracy})
    log.info("audited model at %dx%d: train accuracy %.4f", resolution, resolution,
             history.final_train_accuracy)
    return path


def run_ablation(plan, axis, out_dir, values=None, manifests=None):
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")
    values = [str(v) for v in (values or plan.axis_values or DEFAULT_VALUES[axis])]
    if len(set(values)) != len(values):
        raise ConfigError(f"duplicate axis values: {values}")
    manifests = manifests or protocol.load_sources(plan)
    rows = []
    for value in values:
        sub = plan_for(plan, axis, value, out_dir, manifests)
        run_dir = os.path.join(out_dir, "runs", f"{axis}-{_slug(value)}")
        record = protocol.run_experiment(sub, run_dir, manifests=manifests,
                                         overrides={"axis": axis, "value": value})
        agg = record.aggregate
        rows.append(AblationRow(
            axis=axis, value=value, detector=agg["detector"],
            accuracy_mean=agg["accuracy"]["mean"], accuracy_std=agg["accuracy"]["std"],
            auc_mean=agg["auc"]["mean"], auc_std=agg["auc"]["std"],
            param_count=agg["detector_param_count"], resolution=agg["resolution"],
            train_per_side=protocol.plan_counts(sub).train_d, seeds=agg["seeds"],
            run_dir=os.path.relpath(run_dir, out_dir)))
        log.info("%s=%s accuracy %.4f auc %.4f", axis, value, rows[-1].accuracy_mean,
                 rows[-1].auc_mean)
    write_table(rows, out_dir)
    return rows


def table_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "detector", "accuracy_mean", "accuracy_std", "auc_mean",
                "auc_std", "param_count", "resolution", "train_per_side"])
    for r in rows:
        w.writerow([r.axis, r.value, r.detector, fmt4(r.accuracy_mean), fmt4(r.accuracy_std),
                    fmt4(r.auc_mean), fmt4(r.auc_std), r.param_count, r.resolution,
                    r.train_per_side])
    return buf.getvalue()


def write_table(rows, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "table.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table_csv(rows))
    with open(os.path.join(out_dir, "table.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json([asdict(r) for r in rows]))
