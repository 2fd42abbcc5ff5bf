"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data or provenance error,
4 runtime failure.  Relative ``--out`` paths resolve under the workspace
(``--workspace``, else ``$MINT_WORKSPACE``, else the current directory).
Every subcommand refuses to replace an existing ``--out`` unless ``--force``
is given.
"""
import argparse
import logging
import os
import shutil
import sys

import numpy as np

from . import aad, ablation, audited, data, metrics, mint, protocol, synth
from .errors import ConfigError, DataError, MintError

log = logging.getLogger("mintlab")

WORKSPACE_ENV = "MINT_WORKSPACE"


class CommandError(ConfigError):
    pass


def workspace(args):
    return args.workspace or os.environ.get(WORKSPACE_ENV) or os.getcwd()


def resolve_out(args):
    out = args.out
    return out if os.path.isabs(out) else os.path.join(workspace(args), out)


def claim_out(path, force, is_dir=False):
    """Refuse to overwrite ``path`` unless ``force``; clear it when forced."""
    if os.path.lexists(path):
        if not force:
            raise CommandError(f"{path} already exists; pass --force to overwrite")
        if os.path.isdir(path) and not os.path.islink(path):
            shutil.rmtree(path)
        else:
            os.remove(path)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(path if is_dir else parent, exist_ok=True)
    return path


def parse_overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise CommandError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_plan(args, extra=None):
    plan = protocol.ExperimentPlan.load(args.plan)
    overrides = parse_overrides(getattr(args, "set", None))
    if getattr(args, "seeds", None):
        overrides["seeds"] = args.seeds
    overrides.update(extra or {})
    try:
        for k, v in overrides.items():
            plan.set(k, v)
    except ConfigError as exc:
        raise CommandError(f"bad override: {exc}") from None
    plan.validate()
    return plan, overrides


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(metrics.canonical_json(obj))


# -- subcommands ---------------------------------------------------------------

def cmd_train_audited(args):
    cfg_dict, base = {}, os.getcwd()
    if args.config:
        try:
            cfg_dict = audited.config_from_json(args.config)
        except (OSError, ValueError) as exc:
            raise CommandError(f"cannot read config {args.config}: {exc}") from None
        base = os.path.dirname(os.path.abspath(args.config))
    train = dict(cfg_dict.pop("train", {}))
    source = args.data or (train.get("source") and os.path.join(base, train["source"]))
    if not source:
        raise CommandError("no training data: pass --data or set train.source in the config")
    for key in ("epochs", "lr", "batch_size", "limit"):
        if getattr(args, key) is not None:
            train[key] = getattr(args, key)
    if args.resolution is not None:
        cfg_dict["resolution"] = args.resolution
    try:
        config = audited.AuditedModelConfig.from_dict(cfg_dict)
    except TypeError as exc:
        raise CommandError(f"bad audited-model config: {exc}") from None
    out = resolve_out(args)
    claim_out(out, args.force)
    manifest = data.load_source(source, role=data.ROLE_TRAINING)
    model = audited.build_model(config, seed=args.seed)
    model, history = audited.train_audited(
        model, manifest, epochs=int(train.get("epochs", 20)), lr=float(train.get("lr", 1e-3)),
        seed=args.seed, batch_size=int(train.get("batch_size", 128)), limit=train.get("limit"))
    digest = audited.save_checkpoint(model, out,
                                     extra={"final_train_accuracy": history.final_train_accuracy}).hex()
    _write_json(out + ".log.json", {**history.to_dict(), "checkpoint_sha256": digest,
                                    "param_count": model.param_count, "seed": args.seed})
    print(f"final train accuracy {metrics.fmt4(history.final_train_accuracy)}")
    print(f"checkpoint {out} sha256 {digest}")


def cmd_extract(args):
    model = audited.load_checkpoint(args.model)
    model_hash = audited.checkpoint_hash(args.model)
    stages = [aad.parse_stage(s) for s in args.stages.split(",") if s.strip()]
    if not stages:
        raise CommandError("--stages must name at least one stage")
    if args.blocks and aad.OUTCOME in stages and len(stages) == 1:
        raise CommandError("--blocks needs a spatial stage")
    out = resolve_out(args)
    claim_out(out, args.force)
    res = model.config.resolution
    ids, membership, images = [], [], []
    for path in args.sources:
        man = data.load_source(path)
        is_train = man.source_id == model.config.train_source
        members = set(audited.member_ids(model.config, man).tolist()) if is_train else set()
        ids.append(man.ids)
        membership.append(np.array([aad.MEMBER_D if i in members else aad.MEMBER_E
                                    for i in man.ids.tolist()], np.uint8))
        images.append(man.images(man.ids, res))
    ids = np.concatenate(ids)
    if len(np.unique(ids)) != len(ids):
        raise DataError("sample ids collide across the given sources")
    store = aad.extract_aad(model, ids, np.concatenate(images), np.concatenate(membership), stages,
                            store_blocks=args.blocks, model_hash=model_hash)
    aad.write_store(store, out)
    print(f"wrote {len(store)} records ({len(ids)} samples x {len(stages)} stages) to {out}")


def _load_store(args):
    expected = audited.checkpoint_hash(args.model) if args.model else None
    return aad.read_store(args.store, expected_model_hash=expected)


def _plan_context(plan, seed):
    """Recreate the split a detector trained with ``seed`` sees under ``plan``."""
    d_man, externals = protocol.load_sources(plan)
    model = audited.load_checkpoint(plan.path(plan.audited)) if plan.audited else None
    members = audited.member_ids(model.config, d_man) if model else None
    train_ext, eval_ext = protocol.case_sources(plan, externals)
    split = protocol.checked_split(d_man, externals, train_ext, eval_ext,
                                   protocol.plan_counts(plan), seed, members)
    train_acc = model.extra.get("final_train_accuracy") if model else None
    return split, train_ext, eval_ext, train_acc


def cmd_train_mint(args):
    extra = {"detector": args.detector} if args.detector else {}
    if args.stages:
        extra["stages"] = args.stages
    if args.epochs is not None:
        extra["epochs"] = str(args.epochs)
    if args.kernel is not None:
        extra.update(kernel=str(args.kernel), kernel_fit="no")
    plan, _ = load_plan(args, extra)
    store = _load_store(args)
    stages = protocol.detector_stages(plan)
    shapes = {}
    for s in stages:
        g = store.groups.get(s)
        if g is None:
            raise DataError(f"store has no {aad.stage_name(s)} records")
        if plan.detector == "cnn":
            if g.blocks is None:
                raise DataError(f"the CNN detector needs blocks; re-extract {aad.stage_name(s)} "
                                "with --blocks")
            shapes[s] = g.blocks.shape[1:]
        else:
            shapes[s] = g.vectors.shape[1]
    # shape problems surface before any data is touched
    detector = protocol.detector_for(plan, shapes, args.seed)
    out = resolve_out(args)
    claim_out(out, args.force)
    split, *_ = _plan_context(plan, args.seed)
    detector, curve = mint.train_mint(detector, store, split, args.seed)
    digest = mint.save_mint(detector, out).hex()
    _write_json(out + ".curve.json", {"loss_curve": [float(x) for x in curve],
                                      "plan_hash": plan.hash, "seed": args.seed})
    print(f"{protocol.describe_detector(detector)} params {detector.param_count} "
          f"final loss {curve[-1]:.4f}")
    print(f"checkpoint {out} sha256 {digest}")


def cmd_evaluate(args):
    plan, _ = load_plan(args)
    store = _load_store(args)
    out = resolve_out(args)
    reports = []
    detectors = [mint.load_mint(p) for p in args.mint]
    claim_out(out, args.force, is_dir=True)
    for det in detectors:
        split, train_ext, eval_ext, train_acc = _plan_context(plan, det.seed)
        report = protocol.evaluate_detector(det, store, split, plan, train_acc, store.resolution,
                                            eval_ext, train_ext)
        metrics.emit_report(report, os.path.join(out, f"seed-{det.seed}.json"),
                            roc_csv=os.path.join(out, f"roc-{det.seed}.csv"))
        reports.append(report)
        print(f"seed {det.seed} accuracy {metrics.fmt4(report.accuracy)} "
              f"auc {metrics.fmt4(report.auc)}")
    if len(reports) > 1:
        metrics.emit_report(metrics.aggregate(reports, plan.hash), os.path.join(out, "aggregate.json"))


def cmd_run(args):
    plan, overrides = load_plan(args)
    out = claim_out(resolve_out(args), args.force, is_dir=True)
    record = protocol.run_experiment(plan, out, overrides=overrides)
    print(summary_line(record.aggregate))


def cmd_ablate(args):
    extra = {"axis_values": args.values} if args.values else {}
    plan, _ = load_plan(args, extra)
    axis = args.axis or plan.axis
    if not axis:
        raise CommandError("no ablation axis: pass --axis or set axis in the plan")
    out = claim_out(resolve_out(args), args.force, is_dir=True)
    rows = ablation.run_ablation(plan, axis, out)
    sys.stdout.write(ablation.table_csv(rows))


def cmd_report(args):
    reports = []
    for path in args.inputs:
        if os.path.isdir(path):
            rdir = os.path.join(path, "reports") if os.path.isdir(os.path.join(path, "reports")) else path
            found = sorted(f for f in os.listdir(rdir) if f.startswith("seed-") and f.endswith(".json"))
            reports += [metrics.parse_report(os.path.join(rdir, f)) for f in found]
        else:
            reports.append(metrics.parse_report(path))
    if not reports:
        raise DataError("no seed reports found in the given inputs")
    for r in reports:
        if r.counts.get("D") != r.counts.get("E"):
            raise DataError(f"seed {r.seed} report has an unbalanced eval set: {r.counts}")
    hashes = sorted({r.plan_hash for r in reports})
    if len(hashes) > 1 and not args.mixed:
        raise DataError(f"reports come from {len(hashes)} different plans; pass --mixed to combine")
    agg = metrics.aggregate(sorted(reports, key=lambda r: r.seed), hashes[0] if len(hashes) == 1
                            else "mixed")
    if args.out:
        out = claim_out(resolve_out(args), args.force)
        metrics.emit_report(agg, out)
    if args.json:
        sys.stdout.write(metrics.canonical_json(agg))
    else:
        for r in sorted(reports, key=lambda r: r.seed):
            print(f"seed {r.seed}  {r.detector}  accuracy {metrics.fmt4(r.accuracy)}  "
                  f"auc {metrics.fmt4(r.auc)}  fpr@tpr0.9 {metrics.fmt4(r.fpr_at_tpr['0.9'])}")
        print(summary_line(agg))


def cmd_synth(args):
    sizes = {}
    for item in args.sizes.split(","):
        sid, _, n = item.partition("=")
        if sid.strip() not in synth.DEFAULT_SOURCES or not n.strip().isdigit():
            raise CommandError(f"bad size entry {item!r}; use source=count with sources "
                               f"{', '.join(synth.DEFAULT_SOURCES)}")
        sizes[sid.strip()] = int(n)
    out = claim_out(resolve_out(args), args.force, is_dir=True)
    for sid, path in synth.write_corpus(out, sizes, seed=args.seed).items():
        print(f"{sid}: {sizes[sid]} images -> {path}")


def summary_line(agg):
    acc, auc = agg["accuracy"], agg["auc"]
    return (f"{agg['detector']}  seeds {','.join(map(str, agg['seeds']))}  "
            f"accuracy {metrics.fmt4(acc['mean'])} +/- {metrics.fmt4(acc['std'])}  "
            f"auc {metrics.fmt4(auc['mean'])} +/- {metrics.fmt4(auc['std'])}")


# -- parser --------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="mintlab", description="Audit whether data was used to train an image model.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, out_help, out_required=True):
        p.add_argument("--out", required=out_required, help=out_help)
        p.add_argument("--force", action="store_true", help="overwrite an existing --out")
        p.add_argument("--workspace", default=None,
                       help=f"root for relative --out paths (default ${WORKSPACE_ENV} or cwd)")

    def plan_args(p):
        p.add_argument("--plan", required=True, help="experiment plan (key = value file)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one plan key; repeatable; echoed into the run record")

    p = sub.add_parser("train-audited", help="train the audited classifier")
    p.add_argument("--config", help="JSON audited-model config; may hold a 'train' section")
    p.add_argument("--data", help="training source (records file or image directory)")
    p.add_argument("--seed", type=int, default=0, help="initialisation and shuffling seed")
    p.add_argument("--epochs", type=int, help="training epochs (default 20)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 0.001)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="minibatch size (default 128)")
    p.add_argument("--limit", type=int, help="train on the first N samples in id order")
    p.add_argument("--resolution", type=int, help="input size R (R x R)")
    common(p, "checkpoint path")
    p.set_defaults(func=cmd_train_audited)

    p = sub.add_parser("extract", help="extract AAD from an audited model")
    p.add_argument("--model", required=True, help="audited-model checkpoint")
    p.add_argument("--sources", required=True, nargs="+", help="image sources to run through the model")
    p.add_argument("--stages", default="1,2,3,4,outcome", help="comma list of stages")
    p.add_argument("--blocks", action="store_true", help="also store full activation blocks")
    common(p, "AAD store path")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-mint", help="train a membership detector on stored AAD")
    p.add_argument("--store", required=True, help="AAD store")
    p.add_argument("--model", help="audited checkpoint the store must come from")
    plan_args(p)
    p.add_argument("--detector", choices=["vanilla", "cnn", "outcome"], help="detector kind")
    p.add_argument("--stages", help="comma list of detector input stages")
    p.add_argument("--epochs", type=int, help="detector epochs")
    p.add_argument("--kernel", type=int, help="exact CNN kernel size (disables fitting to small stages)")
    p.add_argument("--seed", type=int, default=1, help="split, initialisation and batching seed")
    common(p, "MINT checkpoint path")
    p.set_defaults(func=cmd_train_mint)

    p = sub.add_parser("evaluate", help="score the held-out split with trained detectors")
    p.add_argument("--mint", required=True, nargs="+", help="MINT checkpoints, one per seed")
    p.add_argument("--store", required=True, help="AAD store covering the eval split")
    p.add_argument("--model", help="audited checkpoint the store must come from")
    plan_args(p)
    common(p, "report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="run a whole plan: split, extract, train, evaluate per seed")
    plan_args(p)
    p.add_argument("--seeds", help="comma list overriding the plan's seeds")
    common(p, "run directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="sweep one axis of a plan")
    plan_args(p)
    p.add_argument("--axis", choices=list(ablation.AXES), help="axis to sweep")
    p.add_argument("--values", help="comma list of axis values (default per axis)")
    p.add_argument("--seeds", help="comma list overriding the plan's seeds")
    common(p, "ablation directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarise seed reports")
    p.add_argument("inputs", nargs="+", help="run directories or seed-<n>.json files")
    p.add_argument("--json", action="store_true", help="print the aggregate as JSON")
    p.add_argument("--mixed", action="store_true", help="allow reports from different plans")
    common(p, "aggregate JSON path (optional)", out_required=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="render a synthetic multi-source corpus")
    p.add_argument("--sizes", default="atlas=8000,ext-a=3000,ext-b=3000,ext-c=1500",
                   help="comma list of source=count")
    p.add_argument("--seed", type=int, default=0, help="render seed")
    common(p, "corpus directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except MintError as exc:
        stage = getattr(exc, "stage", args.command)
        print(f"mintlab {args.command}: error [{stage}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mintlab {args.command}: error [io]: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 4
        log.debug("unhandled", exc_info=True)
        stage = getattr(exc, "stage", "runtime")
        print(f"mintlab {args.command}: error [{stage}]: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
