import json
import os

import numpy as np
import pytest

from mintlab import data, protocol
from mintlab.errors import CapacityError, ConfigError, DisjointnessError, ParameterError, ProvenanceError

from helpers import plant, random_manifest


# -- plans ---------------------------------------------------------------------

def test_plan_parsing_and_hash():
    text = "audited = m.ckpt\nsources = a, b ,c\nseeds = 4, 5\nscale = 1/4  # desk\nkernel_fit = no\n"
    plan = protocol.ExperimentPlan.from_text(text)
    assert plan.sources == ["a", "b", "c"] and plan.seeds == [4, 5]
    assert plan.scale == 0.25 and plan.kernel_fit is False
    same = protocol.ExperimentPlan.from_text("\n".join(reversed(text.splitlines())))
    assert same.hash == plan.hash
    for key, value in [("seeds", "4"), ("epochs", "3"), ("sources", "a, b"), ("case", "rotate:1"),
                       ("width", "3"), ("keep_blocks", "yes")]:
        assert plan.with_overrides(**{key: value}).hash != plan.hash
    assert plan.with_overrides(seeds="4, 5").hash == plan.hash


@pytest.mark.parametrize("text", ["bogus = 1", "no equals sign", "seeds = x", "epochs = 1.5",
                                  "keep_blocks = maybe"])
def test_bad_plan_lines(text):
    with pytest.raises(ConfigError):
        protocol.ExperimentPlan.from_text(text)


@pytest.mark.parametrize("kv", [dict(seeds=""), dict(detector="rnn"), dict(scale="2"),
                                dict(scenario="huge")])
def test_plan_validation(kv):
    with pytest.raises(ConfigError):
        protocol.ExperimentPlan().with_overrides(**kv).validate()


def test_missing_plan_file(tmp_path):
    with pytest.raises(ConfigError):
        protocol.ExperimentPlan.load(str(tmp_path / "nope.plan"))


def test_relative_paths_resolve_against_plan(tmp_path):
    (tmp_path / "p.plan").write_text("audited = models/a.ckpt\n")
    plan = protocol.ExperimentPlan.load(str(tmp_path / "p.plan"))
    assert plan.path(plan.audited) == os.path.join(str(tmp_path), "models", "a.ckpt")
    assert plan.path("/abs/x") == "/abs/x"


# -- cases ---------------------------------------------------------------------

def test_baseline_and_rotation():
    assert protocol.assemble_case("baseline", ["S1", "S2", "S3"], "S3") == (["S1", "S2"], "S3")
    assert protocol.assemble_case("baseline", ["S1", "S2", "S3"]) == (["S1", "S2"], "S3")
    assert protocol.assemble_case("rotate:1", ["S1", "S2", "S3"]) == (["S1", "S3"], "S2")


def test_rotations_cover_every_source_once():
    cases = protocol.rotations(["S1", "S2", "S3"])
    assert sorted(ev for _, ev in cases) == ["S1", "S2", "S3"]
    for train, ev in cases:
        assert ev not in train and len(train) == 2


def test_pinned_sources_stay_in_training():
    cases = protocol.rotations(["S1", "S2", "S3"], pinned=["S1"])
    assert sorted(ev for _, ev in cases) == ["S2", "S3"]
    assert all("S1" in train for train, _ in cases)
    with pytest.raises(ConfigError):
        protocol.assemble_case("rotate:0", ["S1", "S2", "S3"], pinned=["S1"])


@pytest.mark.parametrize("case", ["rotate:3", "rotate:x", "swap"])
def test_bad_cases(case):
    with pytest.raises(ConfigError):
        protocol.assemble_case(case, ["S1", "S2", "S3"])


def test_too_few_sources():
    with pytest.raises(CapacityError):
        protocol.assemble_case("baseline", ["S1"])


# -- scenarios -----------------------------------------------------------------

def test_scenario_counts():
    assert protocol.scenario_counts("high", 0.08) == data.SplitCounts(4000, 4000, 1000)
    assert protocol.scenario_counts("low", 1.0) == data.SplitCounts(500, 500, 125)
    assert protocol.scenario_counts("medium", 0.04, eval_per_side=300) == data.SplitCounts(1000, 1000, 300)
    with pytest.raises(CapacityError):
        protocol.scenario_counts("low", 0.05)
    with pytest.raises(ParameterError):
        protocol.scenario_counts("high", 0)


def test_scenario_subsample_sizes():
    d = random_manifest("d", 700, 0, size=2, role=data.ROLE_TRAINING)
    e = [random_manifest("e1", 600, 1, size=2)]
    ev = random_manifest("e2", 300, 2, size=2)
    counts, split = protocol.scenario_subsample("low", 1.0, d, e, ev, seed=1)
    assert len(split.train_d) == len(split.train_e) == 500
    assert len(split.eval_d) == len(split.eval_e) == counts.eval_per_side


# -- disjointness --------------------------------------------------------------

def test_disjointness_clean_and_planted():
    d = random_manifest("d", 10_000, 0, size=3, role=data.ROLE_TRAINING)
    e = random_manifest("e", 3000, 1, size=3)
    assert protocol.verify_disjointness(d, [e]).ok
    e2 = plant(d, e, [5, 600, 9999], [0, 1500, 2999])
    report = protocol.verify_disjointness(d, [e2])
    assert not report.ok
    assert sorted(report.d_e_pairs) == sorted((int(d.ids[i]), int(e2.ids[j]))
                                              for i, j in [(5, 0), (600, 1500), (9999, 2999)])


def test_random_splits_have_no_violations():
    d = random_manifest("d", 300, 0, size=2, role=data.ROLE_TRAINING)
    e = [random_manifest("e1", 150, 1, size=2), random_manifest("e2", 150, 2, size=2)]
    ev = random_manifest("e3", 150, 3, size=2)
    rng = np.random.default_rng(0)
    for seed in range(200):
        n = int(rng.integers(50, 200))
        split = data.make_membership_split(d, e, ev, data.SplitCounts(n, n, 50), seed)
        assert protocol.verify_disjointness(d, e + [ev], [split]).ok


# -- runs ----------------------------------------------------------------------

def test_run_writes_reports_and_is_deterministic(write_plan, tmp_path):
    plan = protocol.ExperimentPlan.load(write_plan())
    record = protocol.run_experiment(plan, str(tmp_path / "a"))
    assert record.status == "complete" and len(record.reports) == 2
    files = sorted(os.listdir(tmp_path / "a" / "reports"))
    assert files == ["aggregate.json", "roc-1.csv", "roc-2.csv", "seed-1.json", "seed-2.json"]
    seed1 = json.loads((tmp_path / "a" / "reports" / "seed-1.json").read_text())
    assert seed1["counts"] == {"D": 50, "E": 50} and seed1["plan_hash"] == plan.hash
    assert seed1["extra"]["eval_source"] == "ext-c"
    agg = json.loads((tmp_path / "a" / "reports" / "aggregate.json").read_text())
    assert agg["accuracy"]["mean"] == pytest.approx(np.mean(agg["accuracy"]["values"]), abs=1e-12)
    protocol.run_experiment(protocol.ExperimentPlan.load(write_plan()), str(tmp_path / "b"))
    for name in files:
        assert (tmp_path / "a" / "reports" / name).read_bytes() == \
            (tmp_path / "b" / "reports" / name).read_bytes()
    assert (tmp_path / "a" / "plan.lock").read_text() == plan.canonical_text()


def test_outcome_and_vanilla_detectors_run(write_plan, tmp_path):
    for det, stages in [("outcome", "1"), ("vanilla", "combination")]:
        plan = protocol.ExperimentPlan.load(write_plan(detector=det, stages=stages, seeds="1"))
        protocol.run_experiment(plan, str(tmp_path / det))
        report = json.loads((tmp_path / det / "reports" / "seed-1.json").read_text())
        assert report["detector"] == ("vanilla[outcome]" if det == "outcome"
                                      else "vanilla[stage1+stage2+stage3+stage4]")


def test_rotation_case_run(write_plan, tmp_path):
    plan = protocol.ExperimentPlan.load(write_plan(case="rotate:0", seeds="1"))
    protocol.run_experiment(plan, str(tmp_path / "r"))
    extra = json.loads((tmp_path / "r" / "reports" / "seed-1.json").read_text())["extra"]
    assert extra["eval_source"] == "ext-a" and "ext-a" not in extra["train_sources"]


def test_missing_checkpoint_fails_fast(write_plan, tmp_path):
    plan = protocol.ExperimentPlan.load(write_plan(audited=str(tmp_path / "none.ckpt")))
    with pytest.raises(ProvenanceError):
        protocol.run_experiment(plan, str(tmp_path / "run"))
    assert not (tmp_path / "run").exists()


def test_planted_duplicate_aborts_run(write_plan, tmp_path, tiny_corpus):
    plan = protocol.ExperimentPlan.load(write_plan(seeds="1"))
    d, ext = protocol.load_sources(plan)
    ext[0] = plant(d, ext[0], [0], [0])
    with pytest.raises(DisjointnessError) as err:
        protocol.run_experiment(plan, str(tmp_path / "run"), manifests=(d, ext))
    assert err.value.stage == "disjointness"
    record = json.loads((tmp_path / "run" / "run.json").read_text())
    assert record["status"] == "incomplete" and record["failed_stage"] == "disjointness"
    assert not os.listdir(tmp_path / "run" / "reports")


def test_stage_tagged_capacity_failure(write_plan, tmp_path):
    plan = protocol.ExperimentPlan.load(write_plan(eval_per_side=500))
    with pytest.raises(CapacityError) as err:
        protocol.run_experiment(plan, str(tmp_path / "run"))
    assert err.value.stage.startswith("split")


def test_resolution_mismatch(write_plan, tmp_path):
    plan = protocol.ExperimentPlan.load(write_plan(resolution=32))
    with pytest.raises(ConfigError):
        protocol.run_experiment(plan, str(tmp_path / "run"))
