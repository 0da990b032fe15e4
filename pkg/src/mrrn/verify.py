"""Finite-difference gradient suite over every kernel and the tiny MRRN."""

from __future__ import annotations

import time
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .arch import build_mrrn, build_unet_baseline, tiny_config
from .autodiff.gradcheck import GradCheckReport, grad_check


def _conv_case(k: int):
    def fn(x, w, b):
        return ad.conv2d(x, w, b)

    def sample(rng):
        n, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(3, 7, size=2)
        return {"x": rng.standard_normal((n, ci, h, w)), "w": rng.standard_normal((co, ci, k, k)),
                "b": rng.standard_normal(co)}

    return fn, sample


def _bn_train(x, gamma, beta):
    return ad.batch_norm(x, gamma, beta, mode="train")


def _bn_eval(x, gamma, beta, running):
    return ad.batch_norm(x, gamma, beta, mode="eval", running=running)


def _bn_sample(rng):
    n, c = rng.integers(1, 3), rng.integers(1, 4)
    h, w = rng.integers(2, 5, size=2)
    return {"x": rng.standard_normal((n, c, h, w)) * rng.uniform(0.5, 3) + rng.uniform(-2, 2),
            "gamma": rng.standard_normal(c), "beta": rng.standard_normal(c)}


def _bn_eval_sample(rng):
    d = _bn_sample(rng)
    c = d["gamma"].shape[0]
    d["running"] = ad.BatchNormStats(rng.standard_normal(c), rng.uniform(0.5, 2.0, c), 1)
    return d


def _shape4(rng, even: bool = False):
    n, c = rng.integers(1, 3), rng.integers(1, 4)
    h, w = rng.integers(1, 4, size=2) * 2 if even else rng.integers(1, 6, size=2)
    return (n, c, h, w)


def _concat_sample(rng):
    n, h, w = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
    return {"a": rng.standard_normal((n, rng.integers(1, 4), h, w)),
            "b": rng.standard_normal((n, rng.integers(1, 4), h, w))}


def _ce_sample(rng):
    n, h, w = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
    return {"logits": rng.standard_normal((n, 6, h, w)) * 2, "target": rng.integers(0, 6, (n, h, w))}


def _model_case(builder, config):
    """Gradient of the projected logits w.r.t. the input and every parameter."""
    models = {np.dtype(dt): builder(config, seed=0, precision=p) for p, dt in (("f64", np.float64), ("f32", np.float32))}
    names = list(models[np.dtype(np.float64)].params)
    s = config.input_size

    def fn(x, **params):
        # run in the precision under test so the input stays on the tape
        model = models[x.data.dtype]
        model.params = {k: params[k] for k in names}
        for st in model.bn_stats.values():
            st.count = 0
        return model.forward(x)

    def sample(rng):
        fresh = builder(config, seed=int(rng.integers(2**31)), precision="f64")
        point = {"x": rng.standard_normal((2, config.in_channels, s, s))}
        for k, t in fresh.params.items():
            # perturb affine terms away from their identity initialization
            point[k] = t.data + (0.1 * rng.standard_normal(t.shape) if k.endswith(("gamma", "beta", "bias")) else 0)
        return point

    return fn, sample


def op_cases() -> list[tuple[str, Callable, Callable]]:
    conv3, conv3_sample = _conv_case(3)
    conv1, conv1_sample = _conv_case(1)
    return [
        ("conv2d_3x3", conv3, conv3_sample),
        ("conv2d_1x1", conv1, conv1_sample),
        ("relu", lambda x: ad.relu(x), lambda rng: {"x": rng.standard_normal(_shape4(rng))}),
        ("batch_norm_train", _bn_train, _bn_sample),
        ("batch_norm_eval", _bn_eval, _bn_eval_sample),
        ("maxpool2x2", lambda x: ad.maxpool2x2(x), lambda rng: {"x": rng.standard_normal(_shape4(rng, even=True))}),
        ("upsample_nearest2x", lambda x: ad.upsample_nearest2x(x), lambda rng: {"x": rng.standard_normal(_shape4(rng))}),
        ("concat_channels", lambda a, b: ad.concat_channels(a, b), _concat_sample),
        ("add", lambda a, b: ad.add(a, b), lambda rng: dict(zip("ab", rng.standard_normal((2,) + _shape4(rng))))),
        ("sum", lambda x: ad.sum_all(x), lambda rng: {"x": rng.standard_normal(_shape4(rng))}),
        ("softmax_ce_loss", lambda logits, target: ad.softmax_ce_loss(logits, target), _ce_sample),
    ]


MODEL_CHECK = dict(directions=4, kink_tol=1e-4)


def model_cases() -> list[tuple[str, Callable, Callable]]:
    cfg = tiny_config()
    return [
        ("mrrn_tiny", *_model_case(build_mrrn, cfg)),
        ("unet_tiny", *_model_case(build_unet_baseline, cfg)),
    ]


def run_suite(precisions: Iterable[str] = ("f64", "f32"), instances: int = 20, seed: int = 0,
              include_models: bool = True, log: Callable[[str], None] | None = None) -> list[GradCheckReport]:
    # whole networks are probed along random directions with the plain kink margin
    cases = [(c, {}) for c in op_cases()]
    if include_models:
        cases += [(c, MODEL_CHECK) for c in model_cases()]
    reports = []
    for prec in precisions:
        for (name, fn, sample), opts in cases:
            t0 = time.perf_counter()
            rep = grad_check(fn, sample, precision=prec, instances=instances, seed=seed, name=name, **opts)
            reports.append(rep)
            if log:
                log(f"{rep.line()} ({time.perf_counter() - t0:.1f}s)")
    return reports
