"""Shared builders for training-level tests and the acceptance suite."""

import numpy as np

from emgdisent.data import SynthConfig, build_fold, make_folds, synthesize
from emgdisent.network import build_model
from emgdisent.training import TrainConfig, init_state

SUBJECT_SIDE = ("encoder_s", "bottleneck_s")
PATTERN_SIDE = ("encoder_p", "bottleneck_p")


def toy_split(n_subjects=4, n_gestures=3, duration=0.25, step=60, seed=0, mixing=0.5):
    """Small training split (roughly 10-20 windows per subject)."""
    recs = synthesize(SynthConfig(n_subjects=n_subjects, n_gestures=n_gestures, trials=2, duration=duration,
                                  mixing=mixing, seed=seed))
    plan = make_folds(range(1, n_subjects + 1), 4, seed)
    return build_fold(recs, plan, 0, 408, step)


def snapshot(model, components):
    """Bytes of every parameter and batch-norm statistic under ``components``."""
    out = {k: t.data.tobytes() for k, t in model.parameters(*components).items()}
    for k, s in model.bn_states().items():
        if k.split(".")[0] in components:
            out[k + ".mean"] = s.mean.tobytes()
            out[k + ".var"] = s.var.tobytes()
    return out


def watch_steps(model, state, on_step):
    """Wrap both optimizers so ``on_step(step, before, after)`` sees the model
    around every parameter update."""
    for number, opt in ((1, state.optimizer1), (2, state.optimizer2)):
        if opt is None:
            continue
        original = opt.step

        def step(original=original, number=number):
            before = snapshot(model, model.components())
            original()
            on_step(number, before, snapshot(model, model.components()))

        opt.step = step


def make_run(variant, train_set, seed=0, **overrides):
    cfg = TrainConfig(variant=variant, seed=seed, **{"epochs": 3, "batch_size": 16, "learning_rate": 0.01,
                                                     **overrides})
    model = build_model(variant, train_set.n_patterns, train_set.n_subjects, seed)
    return model, cfg, init_state(model, cfg)


def changed(before, after, components):
    return sorted(k for k in before if k.split(".")[0] in components and before[k] != after[k])


def max_trace_gap(trace_a, trace_b, components):
    """Largest absolute gradient difference over matching steps and parameters."""
    assert len(trace_a) == len(trace_b)
    gap = 0.0
    for a, b in zip(trace_a, trace_b):
        assert (a["epoch"], a["batch"], a["step"]) == (b["epoch"], b["batch"], b["step"])
        for k, g in a["grads"].items():
            if k.split(".")[0] in components:
                gap = max(gap, float(np.max(np.abs(g - b["grads"][k]))))
    return gap
