"""Dense float64 tensor math for the five layer kinds used by the expert networks.

Forward passes accumulate in a fixed fan-in-major order (kernel row, kernel
column, input channel), which makes every output element bit-reproducible
against a naive nested-loop reference on any platform. Backward passes use
ordinary BLAS matmuls and are validated by finite differences instead.

All ops accept a single sample (spec shapes) or the same shape with a leading
batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Tensor = np.ndarray  # always float64, C order


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible; message names the dims."""


class FrozenParamsError(RuntimeError):
    """Raised on any attempt to update frozen layer parameters."""


@dataclass
class LayerParams:
    """Weights and biases of one trainable layer.

    A frozen layer is never mutated by any training step; backward skips its
    gradient buffers entirely.
    """

    name: str
    weights: np.ndarray
    biases: np.ndarray
    frozen: bool = False

    def freeze(self) -> None:
        self.frozen = True


@dataclass
class ParamGrads:
    weights: np.ndarray
    biases: np.ndarray


class OpCounters:
    """Instrumentation for tests: op invocation counts and actual multiply counts.

    MAC counts are derived from runtime operand shapes at each call site, not
    from any layer-spec formula, so they serve as an independent cross-check
    for the analytic cost model.
    """

    def __init__(self) -> None:
        self.macs = 0
        self.calls: dict[str, int] = {}

    def reset(self) -> None:
        self.macs = 0
        self.calls = {}

    def bump(self, op: str, macs: int = 0) -> None:
        self.calls[op] = self.calls.get(op, 0) + 1
        self.macs += macs


counters = OpCounters()


@dataclass
class _TapeEntry:
    op: str
    params: Optional[LayerParams]
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray, Optional[ParamGrads]]]


class Tape:
    """Linear record of forward ops; replayed in reverse by backward()."""

    def __init__(self) -> None:
        self.entries: list[_TapeEntry] = []

    def record(self, op, params, backward_fn) -> None:
        self.entries.append(_TapeEntry(op, params, backward_fn))


@dataclass
class BackwardResult:
    grads: dict[str, ParamGrads]
    wrt_input: np.ndarray


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def _ordered_affine(cols_t: np.ndarray, w2: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # cols_t: (K, M) fan-in major, w2: (K, Nout). Sequential accumulation over K
    # reproduces the rounding sequence of a scalar loop exactly.
    k_total, m = cols_t.shape
    nout = w2.shape[1]
    out = np.empty((m, nout))
    out[:] = bias
    tmp = np.empty((m, nout))
    for t in range(k_total):
        np.multiply(cols_t[t, :, None], w2[t], out=tmp)
        np.add(out, tmp, out=out)
    return out


def conv2d(x: Tensor, params: LayerParams, stride: int = 1, tape: Tape | None = None) -> Tensor:
    """Valid (no padding) cross-correlation plus per-output-channel bias.

    x: (H, W, Cin) or (N, H, W, Cin); weights: (k, k, Cin, Cout).
    Output spatial size (H - k) / stride + 1 must be a positive integer.
    """
    x = _as_f64(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 3- or 4-dimensional, got shape {x.shape}")
    w = params.weights
    if w.ndim != 4:
        raise ShapeError(f"conv2d weights must be (k, k, Cin, Cout), got shape {w.shape}")
    n, h, wd, cin = x.shape
    k, k2, w_cin, cout = w.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {k}x{k2}")
    if cin != w_cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin} channels, weights expect {w_cin}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if h < k or wd < k or (h - k) % stride or (wd - k) % stride:
        raise ShapeError(
            f"conv2d geometry invalid: input {h}x{wd}, kernel {k}, stride {stride}"
        )
    hp = (h - k) // stride + 1
    wp = (wd - k) // stride + 1

    k_total = k * k * cin
    m = n * hp * wp
    cols_t = np.empty((k_total, m))
    t = 0
    for di in range(k):
        for dj in range(k):
            for ci in range(cin):
                cols_t[t] = x[:, di : di + hp * stride : stride, dj : dj + wp * stride : stride, ci].reshape(m)
                t += 1
    w2 = w.reshape(k_total, cout)
    out = _ordered_affine(cols_t, w2, params.biases).reshape(n, hp, wp, cout)
    counters.bump("conv2d", macs=m * k_total * cout)

    if tape is not None:
        def backward_fn(g):
            g = _as_f64(g)
            if g.ndim == 3:
                g = g[None]
            gm = g.reshape(m, cout)
            pg = None
            if not params.frozen:
                dw = (cols_t @ gm).reshape(w.shape)
                db = gm.sum(axis=0)
                pg = ParamGrads(dw, db)
            dcols = gm @ w2.T  # (M, K)
            dx = np.zeros_like(x)
            t = 0
            for di in range(k):
                for dj in range(k):
                    for ci in range(cin):
                        dx[:, di : di + hp * stride : stride, dj : dj + wp * stride : stride, ci] += (
                            dcols[:, t].reshape(n, hp, wp)
                        )
                        t += 1
            return (dx[0] if single else dx), pg

        tape.record("conv2d", params, backward_fn)
    return out[0] if single else out


def maxpool(x: Tensor, window: int, stride: int | None = None, tape: Tape | None = None):
    """Per-window channelwise maximum. Returns (pooled, argmax index map).

    The argmax map stores the flat offset (row * window + col) of the winning
    element inside each window; backward routes each upstream gradient to
    exactly that input position.
    """
    x = _as_f64(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"maxpool input must be 3- or 4-dimensional, got shape {x.shape}")
    if stride is None:
        stride = window
    n, h, wd, c = x.shape
    if window < 1 or stride < 1:
        raise ShapeError(f"maxpool window/stride must be >= 1, got {window}/{stride}")
    if h < window or wd < window or (h - window) % stride or (wd - window) % stride:
        raise ShapeError(
            f"maxpool geometry invalid: input {h}x{wd}, window {window}, stride {stride}"
        )
    hp = (h - window) // stride + 1
    wp = (wd - window) // stride + 1

    win = np.empty((n, hp, wp, window * window, c))
    for di in range(window):
        for dj in range(window):
            win[:, :, :, di * window + dj, :] = x[
                :, di : di + hp * stride : stride, dj : dj + wp * stride : stride, :
            ]
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    counters.bump("maxpool")

    if tape is not None:
        def backward_fn(g):
            g = _as_f64(g)
            if g.ndim == 3:
                g = g[None]
            ni, ii, ji, ci = np.indices((n, hp, wp, c))
            rows = ii * stride + idx // window
            cols = ji * stride + idx % window
            dx = np.zeros_like(x)
            np.add.at(dx, (ni, rows, cols, ci), g)
            return (dx[0] if single else dx), None

        tape.record("maxpool", None, backward_fn)
    if single:
        return out[0], idx[0]
    return out, idx


def fully_connected(x: Tensor, params: LayerParams, tape: Tape | None = None) -> Tensor:
    """Affine map W.T x + b on the flattened input. weights: (Nin, Nout)."""
    x = _as_f64(x)
    w = params.weights
    if w.ndim != 2:
        raise ShapeError(f"fully_connected weights must be (Nin, Nout), got shape {w.shape}")
    nin, nout = w.shape
    if x.ndim == 1:
        if x.shape[0] != nin:
            raise ShapeError(f"fully_connected input has {x.shape[0]} elements, weights expect {nin}")
        single, xs = True, x[None]
    elif x.ndim >= 2 and int(np.prod(x.shape[1:])) == nin:
        single, xs = False, x
    elif int(np.prod(x.shape)) == nin:
        single, xs = True, x[None]
    else:
        raise ShapeError(f"fully_connected input shape {x.shape} incompatible with fan-in {nin}")
    n = xs.shape[0]
    xf = xs.reshape(n, nin)
    out = _ordered_affine(np.ascontiguousarray(xf.T), w, params.biases)
    counters.bump("fully_connected", macs=n * nin * nout)

    if tape is not None:
        def backward_fn(g):
            g = _as_f64(g)
            if g.ndim == 1:
                g = g[None]
            pg = None
            if not params.frozen:
                pg = ParamGrads(xf.T @ g, g.sum(axis=0))
            dxf = (g @ w.T).reshape(xs.shape)
            return (dxf[0] if single else dxf), pg

        tape.record("fully_connected", params, backward_fn)
    return out[0] if single else out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    x = _as_f64(x)
    out = np.maximum(x, 0.0)
    counters.bump("relu")
    if tape is not None:
        mask = x > 0.0

        def backward_fn(g):
            return _as_f64(g) * mask, None

        tape.record("relu", None, backward_fn)
    return out


def softmax_cross_entropy(logits: Tensor, label, tape: Tape | None = None):
    """Softmax probabilities and negative log likelihood of the true class.

    logits: (K,) with an integer label, or (N, K) with (N,) labels; the batched
    form returns the mean loss. Probabilities sum to 1 within 1e-9.
    """
    logits = _as_f64(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy logits must be 1- or 2-dimensional, got {logits.shape}")
    n, k = z.shape
    if k < 2:
        raise ShapeError(f"softmax_cross_entropy needs at least 2 classes, got {k}")
    if not np.isfinite(z).all():
        raise ValueError("softmax_cross_entropy: logits contain non-finite values")
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= k:
        bad = int(labels[(labels < 0) | (labels >= k)][0])
        raise ValueError(f"label {bad} out of range for {k} classes")

    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    sums = e.sum(axis=1, keepdims=True)
    p = e / sums
    # logsumexp form keeps the loss finite even when p[label] underflows
    losses = np.log(sums[:, 0]) - shifted[np.arange(n), labels]
    loss = float(losses.mean())
    counters.bump("softmax_cross_entropy")

    if tape is not None:
        def backward_fn(g):
            up = float(g)
            d = p.copy()
            d[np.arange(n), labels] -= 1.0
            d *= up / n
            return (d[0] if single else d), None

        tape.record("softmax_cross_entropy", None, backward_fn)
    return loss, (p[0] if single else p)


def backward(tape: Tape, upstream=None) -> BackwardResult:
    """Reverse-mode gradients for every non-frozen LayerParams on the tape.

    upstream defaults to 1.0, the natural seed for a tape ending in a scalar
    loss. Frozen parameters receive no gradient buffers at all.
    """
    if not tape.entries:
        raise RuntimeError("backward called without a recorded forward pass")
    g = np.float64(1.0) if upstream is None else upstream
    grads: dict[str, ParamGrads] = {}
    for entry in reversed(tape.entries):
        g, pg = entry.backward_fn(g)
        if pg is not None:
            if entry.params.name in grads:
                acc = grads[entry.params.name]
                acc.weights += pg.weights
                acc.biases += pg.biases
            else:
                grads[entry.params.name] = pg
    return BackwardResult(grads=grads, wrt_input=g)


def sgd_step(
    params: LayerParams,
    grads: ParamGrads,
    learning_rate: float,
    momentum: float = 0.9,
    state: dict | None = None,
) -> dict:
    """One momentum SGD update in place: v <- mu v - eta g; w <- w + v."""
    if params.frozen:
        raise FrozenParamsError(f"sgd_step on frozen params '{params.name}'")
    if grads.weights.shape != params.weights.shape or grads.biases.shape != params.biases.shape:
        raise ShapeError(
            f"gradient shapes {grads.weights.shape}/{grads.biases.shape} do not match "
            f"params '{params.name}' {params.weights.shape}/{params.biases.shape}"
        )
    if state is None:
        state = {}
    vw = state.setdefault("w", np.zeros_like(params.weights))
    vb = state.setdefault("b", np.zeros_like(params.biases))
    vw *= momentum
    vw -= learning_rate * grads.weights
    vb *= momentum
    vb -= learning_rate * grads.biases
    params.weights += vw
    params.biases += vb
    return state


class Sgd:
    """Momentum SGD over several parameter stores, with per-store velocity."""

    def __init__(self, learning_rate: float, momentum: float = 0.9):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._states: dict[int, dict] = {}

    def step(self, params: LayerParams, grads: ParamGrads) -> None:
        state = self._states.setdefault(id(params), {})
        sgd_step(params, grads, self.learning_rate, self.momentum, state)
