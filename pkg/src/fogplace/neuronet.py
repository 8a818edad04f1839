"""Small FC -> LSTM -> linear-head networks with hand-written BPTT.

Everything is float64. Arrays are time-major: inputs ``(T, B, D)``.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import CheckpointError, NumericError, ShapeError, TapeError

CHECKPOINT_FORMAT = "fogplace-checkpoint/1"


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


@dataclass(frozen=True)
class NetShape:
    obs_dim: int
    out_dim: int
    fc: tuple[int, ...] = (128, 128)
    hidden: int = 64
    recurrent: bool = True

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        prev = self.obs_dim
        for i, w in enumerate(self.fc):
            shapes[f"fc{i}.W"] = (w, prev)
            shapes[f"fc{i}.b"] = (w,)
            prev = w
        if self.recurrent:
            H = self.hidden
            shapes["lstm.Wx"] = (4 * H, prev)
            shapes["lstm.Wh"] = (4 * H, H)
            shapes["lstm.b"] = (4 * H,)
            prev = H
        shapes["head.W"] = (self.out_dim, prev)
        shapes["head.b"] = (self.out_dim,)
        return shapes

    def to_dict(self) -> dict:
        return {"obs_dim": self.obs_dim, "out_dim": self.out_dim, "fc": list(self.fc),
                "hidden": self.hidden, "recurrent": self.recurrent}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetShape":
        return cls(int(d["obs_dim"]), int(d["out_dim"]), tuple(int(x) for x in d["fc"]),
                   int(d["hidden"]), bool(d["recurrent"]))


def init_params(shape: NetShape, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    params = {}
    shapes = shape.param_shapes()
    for name, shp in shapes.items():
        layer = name.rsplit(".", 1)[0]
        fan_in = shapes[f"{layer}.W" if layer != "lstm" else "lstm.Wx"][1]
        if name == "lstm.Wh":
            fan_in = shp[1]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shp)
    return params


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over (t, b) of outer(a[t, b], b[t, b])."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


@dataclass
class Tape:
    xs: np.ndarray
    acts: list[np.ndarray]  # FC activations, one (T, B, w) array per layer
    hs: np.ndarray  # (T, B, H) outputs fed to the head
    h_prev: np.ndarray | None = None  # (T, B, H)
    c_prev: np.ndarray | None = None
    gates: np.ndarray | None = None  # (T, B, 4H) post-activation i, f, g, o
    tanh_c: np.ndarray | None = None
    complete: bool = False

    @property
    def length(self) -> int:
        return self.xs.shape[0]


class RecurrentNet:
    def __init__(self, shape: NetShape, params: Mapping[str, np.ndarray] | None = None, seed: int = 0):
        self.shape = shape
        if params is None:
            params = init_params(shape, np.random.default_rng(seed))
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self._check_shapes()

    def _check_shapes(self) -> None:
        expected = self.shape.param_shapes()
        if set(expected) != set(self.params):
            raise ShapeError(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for k, shp in expected.items():
            if self.params[k].shape != shp:
                raise ShapeError(f"{k}: shape {self.params[k].shape} != {shp}")

    def copy(self) -> "RecurrentNet":
        return RecurrentNet(self.shape, {k: v.copy() for k, v in self.params.items()})

    @property
    def hidden(self) -> int:
        return self.shape.hidden if self.shape.recurrent else 0

    def initial_state(self, batch: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        H = self.shape.hidden
        shp = (H,) if batch is None else (batch, H)
        return np.zeros(shp), np.zeros(shp)

    def forward(self, xs: np.ndarray, h0: np.ndarray | None = None, c0: np.ndarray | None = None,
                record: bool = True) -> tuple[np.ndarray, Tape, tuple[np.ndarray, np.ndarray]]:
        """Returns (outputs (T, B, out), tape, final (h, c))."""
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 3 or xs.shape[-1] != self.shape.obs_dim:
            raise ShapeError(f"expected (T, B, {self.shape.obs_dim}) input, got {xs.shape}")
        p = self.params
        T, B, _ = xs.shape
        acts = []
        a = xs
        for i in range(len(self.shape.fc)):
            a = np.tanh(a @ p[f"fc{i}.W"].T + p[f"fc{i}.b"])
            acts.append(a)
        tape = Tape(xs, acts, a)
        H = self.shape.hidden
        if h0 is None:
            h0 = np.zeros((B, H))
        if c0 is None:
            c0 = np.zeros((B, H))
        h, c = h0, c0
        if self.shape.recurrent:
            Wx, Wh, b = p["lstm.Wx"], p["lstm.Wh"], p["lstm.b"]
            xz = a @ Wx.T + b
            hs = np.empty((T, B, H))
            h_prev = np.empty((T, B, H))
            c_prev = np.empty((T, B, H))
            gates = np.empty((T, B, 4 * H))
            tanh_c = np.empty((T, B, H))
            for t in range(T):
                h_prev[t], c_prev[t] = h, c
                z = xz[t] + h @ Wh.T
                g = gates[t]
                g[:, :2 * H] = sigmoid(z[:, :2 * H])
                g[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
                g[:, 3 * H:] = sigmoid(z[:, 3 * H:])
                c = g[:, H:2 * H] * c + g[:, :H] * g[:, 2 * H:3 * H]
                tanh_c[t] = np.tanh(c)
                h = g[:, 3 * H:] * tanh_c[t]
                hs[t] = h
            tape.hs, tape.h_prev, tape.c_prev, tape.gates, tape.tanh_c = hs, h_prev, c_prev, gates, tanh_c
        out = tape.hs @ p["head.W"].T + p["head.b"]
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite network output")
        tape.complete = True
        return out, (tape if record else None), (h, c)

    def step(self, x: np.ndarray, state: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, tuple]:
        """Single observation ``(D,)`` with state ``(h, c)`` each ``(H,)``."""
        h, c = state
        out, _, (h1, c1) = self.forward(x[None, None, :], h[None], c[None], record=False)
        return out[0, 0], (h1[0], c1[0])

    def backward(self, tape: Tape, dout: np.ndarray, dh_final: np.ndarray | None = None
                 ) -> tuple[dict[str, np.ndarray], tuple[np.ndarray, np.ndarray]]:
        """Gradients of ``sum(dout * outputs)`` w.r.t. every parameter.

        Also returns the gradient w.r.t. the initial ``(h0, c0)``.
        """
        if tape is None or not tape.complete:
            raise TapeError("backward() needs a complete tape from forward()")
        if dout.shape[:2] != tape.xs.shape[:2] or dout.shape[-1] != self.shape.out_dim:
            raise ShapeError(f"output gradient shape {dout.shape} does not match tape")
        p = self.params
        g: dict[str, np.ndarray] = {}
        g["head.W"] = _outer_sum(dout, tape.hs)
        g["head.b"] = dout.sum(axis=(0, 1))
        dhs = dout @ p["head.W"]
        T, B = tape.xs.shape[:2]
        H = self.shape.hidden
        dh0 = np.zeros((B, H))
        dc0 = np.zeros((B, H))
        if self.shape.recurrent:
            Wx, Wh = p["lstm.Wx"], p["lstm.Wh"]
            dz_all = np.empty((T, B, 4 * H))
            dh_next = np.zeros((B, H)) if dh_final is None else dh_final
            dc_next = np.zeros((B, H))
            for t in range(T - 1, -1, -1):
                gt = tape.gates[t]
                i, f, gg, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
                tc = tape.tanh_c[t]
                dh = dhs[t] + dh_next
                dc = dc_next + dh * o * (1.0 - tc * tc)
                dz = dz_all[t]
                dz[:, :H] = dc * gg * i * (1.0 - i)
                dz[:, H:2 * H] = dc * tape.c_prev[t] * f * (1.0 - f)
                dz[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
                dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
                dc_next = dc * f
                dh_next = dz @ Wh
            dh0, dc0 = dh_next, dc_next
            g["lstm.Wx"] = _outer_sum(dz_all, tape.acts[-1] if tape.acts else tape.xs)
            g["lstm.Wh"] = _outer_sum(dz_all, tape.h_prev)
            g["lstm.b"] = dz_all.sum(axis=(0, 1))
            da = dz_all @ Wx
        else:
            da = dhs
        for i in range(len(self.shape.fc) - 1, -1, -1):
            a = tape.acts[i]
            dz = da * (1.0 - a * a)
            inp = tape.acts[i - 1] if i > 0 else tape.xs
            g[f"fc{i}.W"] = _outer_sum(dz, inp)
            g[f"fc{i}.b"] = dz.sum(axis=(0, 1))
            da = dz @ p[f"fc{i}.W"]
        return g, (dh0, dc0)


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """In-place descent step on ``params``."""
        for k, gk in grads.items():
            if gk.shape != params[k].shape:
                raise ShapeError(f"gradient {k} shape {gk.shape} != {params[k].shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, gk in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * gk
            v *= b2
            v += (1.0 - b2) * gk * gk
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: Adam | None = None, lr: float = 0.01, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Functional wrapper: returns (new params, optimizer state)."""
    new = {k: v.copy() for k, v in params.items()}
    if state is None:
        state = Adam(params, lr, beta1, beta2, eps)
    state.step(new, grads)
    return new, state


# -- gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    checked: int
    rel_errors: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def rel_error(a, b, floor: float = 1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(net: RecurrentNet, loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
               xs: np.ndarray, h0=None, c0=None, eps: float = 1e-5,
               max_per_param: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare ``backward`` against central differences.

    ``loss_fn(outputs) -> (loss, d loss / d outputs)``.
    """
    out, tape, _ = net.forward(xs, h0, c0)
    _, dout = loss_fn(out)
    grads, _ = net.backward(tape, dout)
    rng = rng or np.random.default_rng(0)
    worst, worst_name, n = 0.0, "", 0
    per = {}
    for name, w in net.params.items():
        flat = w.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, max_per_param, replace=False)
        errs = []
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn(net.forward(xs, h0, c0, record=False)[0])[0]
            flat[i] = old - eps
            lm = loss_fn(net.forward(xs, h0, c0, record=False)[0])[0]
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            errs.append(float(rel_error(grads[name].reshape(-1)[i], num)))
            n += 1
        per[name] = max(errs) if errs else 0.0
        if per[name] > worst:
            worst, worst_name = per[name], name
    return GradCheckReport(worst, worst_name, n, per)


# -- checkpoints ------------------------------------------------------------------

_ZIP_TIME = (2020, 1, 1, 0, 0, 0)


def save_checkpoint(path: str | Path, nets: Mapping[str, RecurrentNet], meta: Mapping | None = None) -> None:
    """npz-compatible archive with fixed timestamps, so equal parameters give equal bytes."""
    header = {"format": CHECKPOINT_FORMAT, "meta": dict(meta or {}),
              "nets": {name: net.shape.to_dict() for name, net in nets.items()}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=_ZIP_TIME)
        zf.writestr(info, json.dumps(header, sort_keys=True))
        for name, net in nets.items():
            for k in sorted(net.params):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, net.params[k], allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{name}/{k}.npy", date_time=_ZIP_TIME), buf.getvalue())


def load_checkpoint(path: str | Path, expect: Mapping[str, NetShape] | None = None
                    ) -> tuple[dict[str, RecurrentNet], dict]:
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
            nets = {}
            for name, sd in header["nets"].items():
                shape = NetShape.from_dict(sd)
                if expect is not None and name in expect and expect[name] != shape:
                    raise CheckpointError(f"{name}: checkpoint shape {shape} incompatible with {expect[name]}")
                params = {}
                for k in shape.param_shapes():
                    params[k] = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}/{k}.npy")))
                nets[name] = RecurrentNet(shape, params)
    except (KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    except ShapeError as exc:
        raise CheckpointError(str(exc)) from exc
    return nets, header.get("meta", {})
