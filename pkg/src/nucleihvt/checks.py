"""Finite-difference gradient suite over every differentiable op and the
composite units (MBConv, MaxViT block, CB-Fusion, full toy network, loss).

Composite units are reduced to a scalar by a fixed random projection of
their output, centred on the output at the starting point so the scalar
stays near zero and its rounding error stays small. Parameters of the
attention, FFN and normalization layers get a small random offset first:
at initialization attention weights are ~0.02 and the attention path moves
the output by amounts close to float64 noise, which would make the check
measure rounding rather than the backward rules.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import functional as F
from .blocks import AttentionConfig, MBConvSpec, init_maxvit, init_mbconv, maxvit_block, mbconv
from .gradcheck import grad_check
from .losses import combined_loss
from .models import ModelConfig, _init_cb_fusion, cb_fusion, forward, init_params
from .params import Context, Initializer, ParamStore
from .tensor import Tensor, concat, no_grad, stack

TOLERANCE = 1e-4
FULL_MODEL_SEED = 1


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    seconds: float
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)


@dataclass(frozen=True)
class Case:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor], int | None]]


def _rng(name: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _t(rng, *shape, positive=False) -> Tensor:
    x = rng.standard_normal(shape)
    return Tensor(0.5 + np.abs(x) if positive else x)


def _projected(fn: Callable[..., Tensor], inputs: list[Tensor], rng) -> Callable[..., Tensor]:
    """sum((fn(*inputs) - fn(*inputs_0)) * R) for a fixed random R."""
    with no_grad():
        base = fn(*inputs).data.copy()
    weights = Tensor(rng.standard_normal(base.shape))
    base_t = Tensor(base)
    return lambda *xs: ((fn(*xs) - base_t) * weights).sum()


def _jitter(store: ParamStore, rng, scale: float = 0.1) -> None:
    for name, t in store.trainable():
        if ".attn." in name or ".ffn." in name or "norm" in name or ".bn." in name:
            t.data += rng.normal(0.0, scale, t.shape)


# ---------------------------------------------------------------------------
# elementary ops, three or more shapes each


def _unary(op, positive=False):
    shapes = [(5,), (3, 4), (2, 3, 4)]

    def cases(name):
        out = []
        for shape in shapes:
            def build(rng, shape=shape):
                x = _t(rng, *shape, positive=positive)
                return _projected(op, [x], rng), [x], None
            out.append(Case(f"{name}{list(shape)}", build))
        return out

    return cases


def _binary(op, positive_b=False):
    pairs = [((3,), (2, 3)), ((4, 5), (4, 5)), ((2, 3, 4), (1, 3, 1))]

    def cases(name):
        out = []
        for sa, sb in pairs:
            def build(rng, sa=sa, sb=sb):
                a, b = _t(rng, *sa), _t(rng, *sb, positive=positive_b)
                return _projected(op, [a, b], rng), [a, b], None
            out.append(Case(f"{name}{list(sa)}x{list(sb)}", build))
        return out

    return cases


def _shaped(op, shape_args):
    """Cases from (input shapes, kwargs) pairs; ``op(*tensors, **kwargs)``."""

    def cases(name):
        out = []
        for shapes, kwargs in shape_args:
            def build(rng, shapes=shapes, kwargs=kwargs):
                xs = [_t(rng, *s) for s in shapes]
                return _projected(lambda *a: op(*a, **kwargs), xs, rng), xs, None
            label = "x".join(str(list(s)) for s in shapes)
            extra = ",".join(f"{k}={_label(v)}" for k, v in kwargs.items())
            out.append(Case(f"{name}{label}" + (f"({extra})" if extra else ""), build))
        return out

    return cases


def _label(value) -> str:
    if isinstance(value, np.ndarray):
        return str(value.tolist()).replace(" ", "")
    return str(value).replace(" ", "")


def _bn(training):
    def op(x, g, b):
        return F.batchnorm2d(x, g, b, F.BatchNormState(np.full(x.shape[1], 0.1), np.full(x.shape[1], 1.3)), training)

    return _shaped(op, [([(4, 3, 2, 2), (3,), (3,)], {}), ([(2, 2, 5, 5), (2,), (2,)], {}), ([(3, 5, 3, 4), (5,), (5,)], {})])


def _ce(rng_shape):
    def cases(name):
        out = []
        for shape in rng_shape:
            def build(rng, shape=shape):
                x = _t(rng, *shape)
                target = rng.integers(0, shape[1], (shape[0],) + shape[2:])
                return (lambda z: F.cross_entropy_from_logits(z, target)), [x], None
            out.append(Case(f"{name}{list(shape)}", build))
        return out

    return cases


OPS: dict[str, Callable[[str], list[Case]]] = {
    "add": _binary(lambda a, b: a + b),
    "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b),
    "div": _binary(lambda a, b: a / b, positive_b=True),
    "neg": _unary(lambda x: -x),
    "pow": _unary(lambda x: x**2.5, positive=True),
    "exp": _unary(lambda x: x.exp()),
    "log": _unary(lambda x: x.log(), positive=True),
    "sqrt": _unary(lambda x: x.sqrt(), positive=True),
    "tanh": _unary(lambda x: x.tanh()),
    "sigmoid": _unary(lambda x: x.sigmoid()),
    "clip_min": _unary(lambda x: x.clip_min(0.05)),
    "mish": _unary(F.mish),
    "gelu": _unary(F.gelu),
    "matmul": _shaped(lambda a, b: a @ b, [([(3, 4), (4, 5)], {}), ([(2, 3, 4), (4, 2)], {}), ([(2, 1, 3, 4), (3, 4, 2)], {})]),
    "getitem": _shaped(
        lambda x, index: x[index],
        [([(5, 4)], {"index": (slice(1, None), slice(None, None, 2))}),
         ([(6,)], {"index": np.array([0, 2, 0, 5])}),
         ([(2, 3, 4)], {"index": (1, slice(None), np.array([3, 3, 0]))})],
    ),
    "sum": _shaped(lambda x, axis: x.sum(axis=axis), [([(5,)], {"axis": None}), ([(3, 4)], {"axis": 1}), ([(2, 3, 4)], {"axis": (0, 2)})]),
    "mean": _shaped(lambda x, axis: x.mean(axis=axis, keepdims=True), [([(5,)], {"axis": None}), ([(3, 4)], {"axis": 0}), ([(2, 3, 4)], {"axis": (1, 2)})]),
    "max": _shaped(lambda x, axis: x.max(axis=axis), [([(5, 2)], {"axis": 0}), ([(3, 4)], {"axis": 1}), ([(2, 3, 4)], {"axis": -1})]),
    "reshape": _shaped(lambda x, shape: x.reshape(*shape), [([(6,)], {"shape": (2, 3)}), ([(3, 4)], {"shape": (12,)}), ([(2, 3, 4)], {"shape": (4, 6)})]),
    "transpose": _shaped(lambda x, axes: x.transpose(*axes), [([(3, 4)], {"axes": (1, 0)}), ([(2, 3, 4)], {"axes": (2, 0, 1)}), ([(2, 1, 3, 2)], {"axes": (3, 1, 0, 2)})]),
    "swapaxes": _shaped(lambda x: x.swapaxes(-1, -2), [([(3, 4)], {}), ([(2, 3, 4)], {}), ([(2, 2, 3, 1)], {})]),
    "pad": _shaped(
        lambda x, widths: x.pad(widths),
        [([(4,)], {"widths": ((1, 2),)}), ([(3, 4)], {"widths": ((0, 1), (2, 0))}), ([(1, 2, 3, 3)], {"widths": ((0, 0), (0, 0), (1, 1), (0, 2))})],
    ),
    "take": _shaped(
        lambda x, idx, axis: x.take(idx, axis=axis),
        [([(5,)], {"idx": np.array([4, 0, 0]), "axis": 0}),
         ([(3, 6)], {"idx": np.array([[1, 1], [5, 2]]), "axis": 1}),
         ([(2, 4, 3)], {"idx": np.array([3, 1]), "axis": 1})],
    ),
    "concat": _shaped(lambda a, b: concat([a, b], axis=1), [([(2, 3), (2, 1)], {}), ([(1, 2, 4), (1, 3, 4)], {}), ([(2, 1, 3, 3), (2, 2, 3, 3)], {})]),
    "stack": _shaped(lambda a, b: stack([a, b], axis=0), [([(3,), (3,)], {}), ([(2, 4), (2, 4)], {}), ([(2, 1, 3), (2, 1, 3)], {})]),
    "linear": _shaped(F.linear, [([(3, 4), (4, 5), (5,)], {}), ([(2, 3, 4), (4, 2), (2,)], {}), ([(6, 8), (8, 8), (8,)], {})]),
    "softmax": _shaped(F.softmax, [([(5,)], {"axis": -1}), ([(3, 4)], {"axis": -1}), ([(2, 3, 4)], {"axis": 1})]),
    "log_softmax": _shaped(F.log_softmax, [([(5,)], {"axis": -1}), ([(3, 4)], {"axis": -1}), ([(2, 3, 4)], {"axis": 1})]),
    "layer_norm": _shaped(F.layer_norm, [([(5, 4), (4,), (4,)], {}), ([(2, 3, 8), (8,), (8,)], {}), ([(2, 2, 3, 6), (6,), (6,)], {})]),
    "conv2d": _shaped(
        F.conv2d,
        [([(1, 2, 5, 5), (3, 2, 3, 3), (3,)], {"padding": 1}),
         ([(2, 3, 7, 6), (2, 3, 3, 3), (2,)], {"stride": 2, "padding": 2, "dilation": 2}),
         ([(2, 3, 5, 5), (4, 3, 1, 1), (4,)], {}),
         ([(1, 4, 6, 6), (4, 1, 3, 3), (4,)], {"padding": 1, "groups": 4})],
    ),
    "conv_transpose2d": _shaped(
        F.conv_transpose2d,
        [([(1, 2, 3, 3), (2, 3, 2, 2), (3,)], {"stride": 2}),
         ([(2, 3, 4, 5), (3, 2, 3, 3), (2,)], {"stride": 2, "padding": 1}),
         ([(1, 2, 4, 4), (2, 2, 3, 3), (2,)], {"padding": 1})],
    ),
    "maxpool2d": _shaped(
        F.maxpool2d,
        [([(1, 2, 6, 6)], {"kernel": 2, "stride": 2}),
         ([(2, 1, 5, 7)], {"kernel": 3, "stride": 1, "padding": 1}),
         ([(1, 3, 8, 8)], {"kernel": 3, "stride": 2, "padding": 1})],
    ),
    "batchnorm2d_train": _bn(True),
    "batchnorm2d_eval": _bn(False),
    "cross_entropy": _ce([(2, 3, 4, 4), (1, 2, 3, 5), (4, 5, 2, 2)]),
}


# ---------------------------------------------------------------------------
# composite units


def _store_inputs(store: ParamStore) -> list[Tensor]:
    return [t for _, t in store.trainable()]


def _mbconv_case(rng):
    store = ParamStore()
    spec = MBConvSpec(4, 4)
    init_mbconv(Initializer(store, rng, np.float64), "mb", spec)
    _jitter(store, rng)
    x = _t(rng, 2, 4, 8, 8)
    params = _store_inputs(store)
    ctx = Context(store, True)
    fn = _projected(lambda x, *_: mbconv(ctx, "mb", x, spec), [x] + params, rng)
    return fn, [x] + params, None


def _mbconv_down_case(rng):
    store = ParamStore()
    spec = MBConvSpec(4, 8, stride=2)
    init_mbconv(Initializer(store, rng, np.float64), "mb", spec)
    _jitter(store, rng)
    x = _t(rng, 2, 4, 8, 8)
    params = _store_inputs(store)
    ctx = Context(store, True)
    fn = _projected(lambda x, *_: mbconv(ctx, "mb", x, spec), [x] + params, rng)
    return fn, [x] + params, None


def _maxvit_case(rng):
    store = ParamStore()
    spec, att = MBConvSpec(8, 8), AttentionConfig(8, heads=2)
    init_maxvit(Initializer(store, rng, np.float64), "mv", spec, att)
    _jitter(store, rng)
    x = _t(rng, 2, 8, 16, 16)
    params = _store_inputs(store)
    ctx = Context(store, True)
    fn = _projected(lambda x, *_: maxvit_block(ctx, "mv", x, spec, att), [x] + params, rng)
    return fn, [x] + params, 12


def _cb_fusion_case(rng):
    cfg = ModelConfig(variant="cb_nucleihvt", base_channels=4)
    store = ParamStore()
    _init_cb_fusion(Initializer(store, rng, np.float64), "fuse.l0", cfg, 4)
    _jitter(store, rng)
    a, b = _t(rng, 2, 4, 8, 8), _t(rng, 2, 4, 8, 8)
    params = _store_inputs(store)
    fn = _projected(lambda a, b, *_: cb_fusion(a, b, store, cfg, level=0), [a, b] + params, rng)
    return fn, [a, b] + params, 12


def _network_case(rng):
    cfg = ModelConfig(variant="nucleihvt", base_channels=2)
    store = init_params(cfg, seed=0, dtype=np.float64)
    _jitter(store, rng)
    x = _t(rng, 2, 3, 32, 32)
    params = _store_inputs(store)
    fn = _projected(lambda x, *_: forward(x, store, cfg), [x] + params, rng)
    return fn, [x] + params, 2


def _loss_case(rng):
    logits = _t(rng, 2, 2, 8, 8)
    target = rng.integers(0, 2, (2, 8, 8))
    return (lambda z: combined_loss(z, target)), [logits], None


UNITS: dict[str, Callable] = {
    "mbconv[C=4,8x8]": _mbconv_case,
    "mbconv[4->8,stride2]": _mbconv_down_case,
    "maxvit_block[C=8,16x16]": _maxvit_case,
    "cb_fusion[C=4,8x8]": _cb_fusion_case,
    "nucleihvt[C=2,32x32]": _network_case,
    "combined_loss[2-class,8x8]": _loss_case,
}


def cases(scope: str = "all") -> list[Case]:
    if scope not in ("all", "ops", "units"):
        raise ValueError(f"unknown gradcheck scope {scope!r} (expected all, ops or units)")
    out: list[Case] = []
    if scope in ("all", "ops"):
        for name, make in OPS.items():
            out.extend(make(name))
    if scope in ("all", "units"):
        out.extend(Case(name, build) for name, build in UNITS.items())
    return out


def run_case(case: Case, seed: int = FULL_MODEL_SEED, eps: float = 1e-5) -> CheckResult:
    start = time.perf_counter()
    rng = _rng(case.name, seed)
    fn, inputs, max_elements = case.build(rng)
    error = grad_check(fn, inputs, eps=eps, max_elements=max_elements, seed=seed)
    return CheckResult(case.name, error, time.perf_counter() - start)


def run_suite(scope: str = "all", seed: int = FULL_MODEL_SEED, on_result=None) -> list[CheckResult]:
    results = []
    for case in cases(scope):
        result = run_case(case, seed)
        results.append(result)
        if on_result is not None:
            on_result(result)
    return results


def format_row(result: CheckResult) -> str:
    status = "PASS" if result.passed else "FAIL"
    return f"{result.name:<44} {result.error:10.3e} {result.seconds:8.2f}s  {status}"


def format_table(results: Iterable[CheckResult]) -> str:
    header = f"{'check':<44} {'max_rel_err':>10} {'time':>9}  status"
    return "\n".join([header] + [format_row(r) for r in results]) + "\n"
