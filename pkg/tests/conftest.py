import os
import sys

import numpy as np
import pytest

from mintlab import audited, data, synth


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Four small synthetic sources on disk: {source_id: path}."""
    out = tmp_path_factory.mktemp("corpus")
    return synth.write_corpus(str(out), {"atlas": 240, "ext-a": 120, "ext-b": 120, "ext-c": 120},
                              seed=3)


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus, tmp_path_factory):
    """A briefly trained 16x16 audited model and its checkpoint path."""
    man = data.load_source(tiny_corpus["atlas"], role=data.ROLE_TRAINING)
    cfg = audited.AuditedModelConfig(stages=[[1, 4], [1, 8], [1, 8], [1, 16]], resolution=16,
                                     embedding_dim=16)
    model = audited.build_model(cfg, seed=0)
    model, history = audited.train_audited(model, man, epochs=1, seed=0, limit=200)
    path = os.path.join(str(tmp_path_factory.mktemp("model")), "audited.ckpt")
    audited.save_checkpoint(model, path, extra={"final_train_accuracy": history.final_train_accuracy})
    return audited.load_checkpoint(path), path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def write_plan(tiny_corpus, tiny_model, tmp_path):
    """Write a small plan over the tiny corpus; keyword overrides become plan lines."""
    def make(name="plan.txt", **kv):
        lines = {"audited": tiny_model[1], "d_source": tiny_corpus["atlas"],
                 "sources": ", ".join(tiny_corpus[s] for s in ("ext-a", "ext-b", "ext-c")),
                 "train_per_side": 64, "eval_per_side": 50, "seeds": "1, 2",
                 "epochs": 1, "batch": 32, "filters": 8}
        lines.update(kv)
        path = tmp_path / name
        path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
        return str(path)
    return make


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        terminalreporter.write_line(mod.RESULTS.get(n, f"criterion {n:2d}: NOT RUN"))
