"""Single-layer LSTM with a linear scalar readout and hand-derived gradients.

Gate pre-activations use the concatenation ``[h, x]``; the four gate weight
matrices are stored stacked in the order input, forget, output, candidate so
one matrix product serves all gates. ``W_i`` ... ``b_c`` are views into the
stacked arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .numerics import AdamState, NumericError, RngStream, adam_init, adam_step, sigmoid
from .transformer import N_FEATURES, WindowedSample

FORMAT_NAME = "evcs-lstm"
FORMAT_VERSION = 1
GATES = ("i", "f", "o", "c")
TENSOR_NAMES = ("W_i", "W_f", "W_o", "W_c", "b_i", "b_f", "b_o", "b_c", "W_y", "b_y")


@dataclass
class LstmParams:
    W: np.ndarray  # (4H, H + N_f)
    b: np.ndarray  # (4H,)
    W_y: np.ndarray  # (H,)
    b_y: np.ndarray  # shape (), kept as an array so Adam treats it like the rest
    strict: bool = False  # no readout: forecast is h itself (H must be 1)

    @property
    def hidden(self) -> int:
        return self.W_y.shape[0]

    @property
    def n_features(self) -> int:
        return self.W.shape[1] - self.hidden

    def _gate(self, arr, g):
        H = self.hidden
        k = GATES.index(g)
        return arr[k * H:(k + 1) * H]

    W_i = property(lambda self: self._gate(self.W, "i"))
    W_f = property(lambda self: self._gate(self.W, "f"))
    W_o = property(lambda self: self._gate(self.W, "o"))
    W_c = property(lambda self: self._gate(self.W, "c"))
    b_i = property(lambda self: self._gate(self.b, "i"))
    b_f = property(lambda self: self._gate(self.b, "f"))
    b_o = property(lambda self: self._gate(self.b, "o"))
    b_c = property(lambda self: self._gate(self.b, "c"))

    def tensors(self) -> dict[str, np.ndarray]:
        """The ten named parameter tensors (views, not copies)."""
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def stacked(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b, "W_y": self.W_y, "b_y": self.b_y}

    def copy(self) -> "LstmParams":
        return LstmParams(self.W.copy(), self.b.copy(), self.W_y.copy(), self.b_y.copy(), self.strict)

    @classmethod
    def zeros(cls, hidden: int, n_features: int = N_FEATURES, strict: bool = False) -> "LstmParams":
        p = cls(np.zeros((4 * hidden, hidden + n_features)), np.zeros(4 * hidden),
                np.zeros(hidden), np.array(0.0), strict)
        if strict:
            _make_strict(p)
        return p

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for arr in (self.W, self.b, self.W_y, self.b_y):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()


def _make_strict(p: LstmParams):
    if p.hidden != 1:
        raise ValueError("strict mode (no readout) requires hidden size 1")
    p.W_y[:] = 1.0
    p.b_y = np.array(0.0)


def init_params(hidden: int = 32, n_features: int = N_FEATURES, seed: int = 0,
                strict: bool = False) -> LstmParams:
    """Uniform(+-1/sqrt(H + N_f)) gate weights, forget bias 1, zero other biases."""
    if strict:
        hidden = 1
    rng = RngStream(seed, 0x15CE).generator()
    bound = 1.0 / math.sqrt(hidden + n_features)
    W = rng.uniform(-bound, bound, size=(4 * hidden, hidden + n_features))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    W_y = rng.uniform(-1.0 / math.sqrt(hidden), 1.0 / math.sqrt(hidden), size=hidden)
    p = LstmParams(W, b, W_y, np.array(0.0), strict)
    if strict:
        _make_strict(p)
    return p


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden: int) -> "LstmState":
        return cls(np.zeros(hidden), np.zeros(hidden))


@dataclass
class StepCache:
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    c_tilde: np.ndarray
    c_prev: np.ndarray
    h_prev: np.ndarray
    x: np.ndarray


def forward_step(p: LstmParams, x: np.ndarray, state: LstmState) -> tuple[LstmState, StepCache]:
    H = p.hidden
    hx = np.concatenate((state.h, x))
    z = p.W @ hx + p.b
    sig = sigmoid(z[:3 * H])
    i, f, o = sig[:H], sig[H:2 * H], sig[2 * H:]
    g = np.tanh(z[3 * H:])
    c = f * state.c + i * g
    h = o * np.tanh(c)
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(h))):
        raise NumericError("non-finite LSTM state at step 0")
    return LstmState(h, c), StepCache(i, f, o, g, state.c, state.h, np.asarray(x, dtype=float))


@dataclass
class WindowCache:
    hx: np.ndarray  # (N_h, H + N_f)
    act: np.ndarray  # (N_h, 4H) activated gates i, f, o, c~
    c: np.ndarray  # (N_h + 1, H), c[0] = initial
    tanh_c: np.ndarray  # (N_h, H)
    h_final: np.ndarray
    y_hat: float = 0.0


@njit(cache=True)
def _forward_kernel(W, b, W_y, b_y, X):
    n = X.shape[0]
    nf = X.shape[1]
    H = W_y.shape[0]
    H3 = 3 * H
    hx = np.empty((n, H + nf))
    act = np.empty((n, 4 * H))
    cs = np.zeros((n + 1, H))
    tcs = np.empty((n, H))
    h = np.zeros(H)
    for t in range(n):
        for k in range(H):
            hx[t, k] = h[k]
        for k in range(nf):
            hx[t, H + k] = X[t, k]
        z = b.copy()
        for r in range(4 * H):
            acc = 0.0
            for col in range(H + nf):
                acc += W[r, col] * hx[t, col]
            z[r] += acc
        for k in range(H3):
            act[t, k] = 1.0 / (1.0 + np.exp(-z[k]))
        for k in range(H3, 4 * H):
            act[t, k] = np.tanh(z[k])
        for k in range(H):
            cs[t + 1, k] = act[t, H + k] * cs[t, k] + act[t, k] * act[t, H3 + k]
            tcs[t, k] = np.tanh(cs[t + 1, k])
            h[k] = act[t, 2 * H + k] * tcs[t, k]
    y_hat = b_y
    for k in range(H):
        y_hat += W_y[k] * h[k]
    return y_hat, hx, act, cs, tcs, h


@njit(cache=True)
def _backward_kernel(W, W_y, hx, act, cs, tcs, h_final, dy):
    n = hx.shape[0]
    H = W_y.shape[0]
    H3 = 3 * H
    dW = np.zeros(W.shape)
    db = np.zeros(4 * H)
    dz = np.empty(4 * H)
    dh = dy * W_y
    dc = np.zeros(H)
    for t in range(n - 1, -1, -1):
        for k in range(H):
            i = act[t, k]
            f = act[t, H + k]
            o = act[t, 2 * H + k]
            g = act[t, H3 + k]
            tc = tcs[t, k]
            dc[k] += dh[k] * o * (1.0 - tc * tc)
            dz[k] = dc[k] * g * i * (1.0 - i)
            dz[H + k] = dc[k] * cs[t, k] * f * (1.0 - f)
            dz[2 * H + k] = dh[k] * tc * o * (1.0 - o)
            dz[H3 + k] = dc[k] * i * (1.0 - g * g)
            dc[k] *= f
        for r in range(4 * H):
            db[r] += dz[r]
            for col in range(hx.shape[1]):
                dW[r, col] += dz[r] * hx[t, col]
        for k in range(H):
            acc = 0.0
            for r in range(4 * H):
                acc += W[r, k] * dz[r]
            dh[k] = acc
    return dW, db, dy * h_final


def predict_window(p: LstmParams, X: np.ndarray) -> tuple[float, LstmState, WindowCache]:
    """Run the window from a zero state; forecast = ``W_y . h_final + b_y``."""
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != p.n_features:
        raise ValueError(f"window must be (N_h, {p.n_features}), got {X.shape}")
    y_hat, hx, act, cs, tcs, h = _forward_kernel(p.W, p.b, p.W_y, float(p.b_y), X)
    if not (math.isfinite(y_hat) and np.all(np.isfinite(cs))):
        bad = int(np.argmax(~np.all(np.isfinite(cs[1:]), axis=1)))
        raise NumericError(f"non-finite LSTM state at step {bad}")
    cache = WindowCache(hx, act, cs, tcs, h, float(y_hat))
    return float(y_hat), LstmState(h.copy(), cs[-1].copy()), cache


def backward_window(p: LstmParams, cache: WindowCache, target: float) -> dict[str, np.ndarray]:
    """Gradients of ``0.5 * (y_hat - target)^2`` for the stacked tensors.

    Backpropagation through time inside the window, continued through the
    readout. Returned keys match :meth:`LstmParams.stacked`; use
    :func:`named_grads` for the ten per-gate tensors.
    """
    dy = cache.y_hat - target
    dW, db, dW_y = _backward_kernel(p.W, p.W_y, cache.hx, cache.act, cache.c, cache.tanh_c,
                                    cache.h_final, dy)
    return {"W": dW, "b": db, "W_y": dW_y, "b_y": np.array(dy)}


def named_grads(p: LstmParams, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Split stacked gradients into the ten per-gate tensors."""
    shell = LstmParams(grads["W"], grads["b"], grads["W_y"], grads["b_y"])
    return shell.tensors()


def window_loss(p: LstmParams, X, target) -> float:
    y_hat = predict_window(p, X)[0]
    return 0.5 * (y_hat - target) ** 2


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 200
    seed: int = 0
    hidden: int = 32
    train_frac: float = 0.8
    valid_frac: float = 0.1
    test_frac: float = 0.1
    patience: int = 20
    strict: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if abs(self.train_frac + self.valid_frac + self.test_frac - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


@dataclass
class TrainResult:
    params: LstmParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def _mse(p: LstmParams, samples) -> float:
    return float(np.mean([(predict_window(p, s.X)[0] - s.target) ** 2 for s in samples]))


def split_samples(samples, cfg: TrainConfig):
    n = len(samples)
    n_train = int(round(cfg.train_frac * n))
    n_valid = int(round(cfg.valid_frac * n))
    return samples[:n_train], samples[n_train:n_train + n_valid], samples[n_train + n_valid:]


def train_lstm(samples: list[WindowedSample], cfg: TrainConfig,
               valid: list[WindowedSample] | None = None,
               params: LstmParams | None = None) -> TrainResult:
    """Per-sample Adam over shuffled epochs, keeping the best-validation params.

    Without ``valid`` the samples are split chronologically by the config's
    fractions and the trailing test share is ignored. History entry 0 holds
    the untrained errors; entry ``e`` holds the running training MSE over
    epoch ``e`` and the validation MSE after it.
    """
    if valid is None:
        train, valid, _ = split_samples(samples, cfg)
    else:
        train = samples
    if len(train) < 2 or len(valid) < 2:
        raise ValueError("need at least 2 training and 2 validation samples")
    if params is None:
        params = init_params(cfg.hidden, train[0].X.shape[1], cfg.seed, cfg.strict)
    best = params.copy()
    best_valid = _mse(params, valid)
    history = [{"epoch": 0, "train_mse": _mse(params, train), "valid_mse": best_valid}]
    best_epoch = 0
    if cfg.epochs <= 0:
        return TrainResult(params, history, 0)

    shuffle = RngStream(cfg.seed, 0x5AFF1E).generator()
    tensors = params.stacked()
    if params.strict:
        frozen = {k: tensors.pop(k) for k in ("W_y", "b_y")}
    else:
        frozen = {}
    opt: AdamState = adam_init(tensors)
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(len(train))
        sq = 0.0
        for j in order:
            s = train[j]
            current = LstmParams(tensors["W"], tensors["b"], frozen.get("W_y", tensors.get("W_y")),
                                 frozen.get("b_y", tensors.get("b_y")), params.strict)
            y_hat, _, cache = predict_window(current, s.X)
            sq += (y_hat - s.target) ** 2
            grads = backward_window(current, cache, s.target)
            if frozen:
                grads = {k: v for k, v in grads.items() if k not in frozen}
            tensors, opt = adam_step(tensors, grads, opt, cfg.lr)
        train_mse = sq / len(train)
        if not math.isfinite(train_mse):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        current = LstmParams(tensors["W"], tensors["b"], frozen.get("W_y", tensors.get("W_y")),
                             frozen.get("b_y", tensors.get("b_y")), params.strict)
        valid_mse = _mse(current, valid)
        history.append({"epoch": epoch, "train_mse": train_mse, "valid_mse": valid_mse})
        if valid_mse < best_valid:
            best_valid, best, best_epoch, stale = valid_mse, current.copy(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(best, history, best_epoch)


# --------------------------------------------------------------------------
# Cell states for the decision process
# --------------------------------------------------------------------------

@dataclass
class CellRecord:
    t: int  # hour at which the window ends
    c: np.ndarray  # final cell vector
    y_hat: float  # forecast for hour t + 1 (normalized)


def extract_cell_states(p: LstmParams, values: np.ndarray, n_hist: int,
                        hours: np.ndarray | None = None) -> list[CellRecord]:
    """One record per window that has a next-hour target."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    if n <= n_hist:
        raise ValueError(f"need more than {n_hist} rows, got {n}")
    if hours is None:
        hours = np.arange(n)
    out = []
    for end in range(n_hist - 1, n - 1):
        y_hat, state, _ = predict_window(p, values[end - n_hist + 1:end + 1])
        out.append(CellRecord(int(hours[end]), state.c, y_hat))
    return out


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def params_to_dict(p: LstmParams) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "hidden": p.hidden,
        "n_features": p.n_features,
        "strict": p.strict,
        "W": p.W.tolist(),
        "b": p.b.tolist(),
        "W_y": p.W_y.tolist(),
        "b_y": float(p.b_y),
    }


def params_from_dict(d: dict, hidden: int | None = None, n_features: int | None = None) -> LstmParams:
    if d.get("format") != FORMAT_NAME or d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported weight file format {d.get('format')!r} v{d.get('version')!r}")
    H, nf = d["hidden"], d["n_features"]
    if (hidden is not None and hidden != H) or (n_features is not None and n_features != nf):
        raise ValueError(f"weight file has shape H={H}, N_f={nf}; expected H={hidden}, N_f={n_features}")
    W = np.asarray(d["W"], dtype=float)
    b = np.asarray(d["b"], dtype=float)
    W_y = np.asarray(d["W_y"], dtype=float)
    if W.shape != (4 * H, H + nf) or b.shape != (4 * H,) or W_y.shape != (H,):
        raise ValueError("weight tensors do not match the declared shape header")
    return LstmParams(W, b, W_y, np.array(float(d["b_y"])), bool(d["strict"]))


def save_params(p: LstmParams, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(p), fh)


def load_params(path, hidden: int | None = None, n_features: int | None = None) -> LstmParams:
    with open(path, encoding="utf-8") as fh:
        return params_from_dict(json.load(fh), hidden, n_features)
