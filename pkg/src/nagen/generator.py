"""Recurrent gesture generator: stacked GRU layers with a tanh output head.

Each layer updates its hidden state with the gate equations (``σ`` is the
logistic sigmoid, ``⊙`` the elementwise product, ``h_0 = 0``)::

    r_t = σ(x_t W_xr + b_xr + h_{t-1} W_hr + b_hr)          reset gate
    u_t = σ(x_t W_xu + b_xu + h_{t-1} W_hu + b_hu)          update gate
    n_t = tanh(x_t W_xn + b_xn + r_t ⊙ (h_{t-1} W_hn + b_hn))   candidate
    h_t = (1 - u_t) ⊙ h_{t-1} + u_t ⊙ n_t

The three gate blocks are stored side by side in ``w_x`` (``in x 3h``),
``w_h`` (``h x 3h``), ``b_x`` and ``b_h`` in the order reset, update,
candidate.  The last layer's hidden states go through ``tanh(h W_out + b_out)``
to give one ``N``-dimensional point per time step.

The generator's input is a class-conditioned latent sequence: every time step
holds an independent standard-normal draw of ``latent_dim`` values followed by
the one-hot code of the class.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .gestures import Gesture

LATENT_DIM = 32
DEFAULT_HIDDEN = (128, 256, 512)
CHECKPOINT_VERSION = 1


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LatentSequence:
    values: np.ndarray
    class_id: int
    latent_dim: int = LATENT_DIM

    @property
    def class_count(self) -> int:
        return self.values.shape[0] - self.latent_dim


def make_latent(class_id: int, class_count: int, length: int = 64, latent_dim: int = LATENT_DIM, rng=None):
    if not 0 <= class_id < class_count:
        raise ValueError(f"class {class_id} out of range for {class_count} classes")
    rng = _rng(rng)
    z = np.zeros((latent_dim + class_count, length))
    z[:latent_dim] = rng.standard_normal((latent_dim, length))
    z[latent_dim + class_id] = 1.0
    return LatentSequence(z, class_id, latent_dim)


def make_latents(class_ids, class_count: int, length: int = 64, latent_dim: int = LATENT_DIM, rng=None):
    """Stack of latents, ``(B, latent_dim + C, L)``; draws in the same order as repeated :func:`make_latent`."""
    rng = _rng(rng)
    zs = [make_latent(int(c), class_count, length, latent_dim, rng).values for c in class_ids]
    if not zs:
        return np.zeros((0, latent_dim + class_count, length))
    return np.stack(zs)


@dataclass
class GruLayer:
    w_x: np.ndarray
    w_h: np.ndarray
    b_x: np.ndarray
    b_h: np.ndarray

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    def arrays(self) -> dict:
        return {"w_x": self.w_x, "w_h": self.w_h, "b_x": self.b_x, "b_h": self.b_h}


@dataclass
class GeneratorParams:
    layers: list
    w_out: np.ndarray
    b_out: np.ndarray
    latent_dim: int = LATENT_DIM
    class_count: int = 1
    seed: int | None = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("generator needs at least one recurrent layer")
        if self.layers[0].input_size != self.latent_dim + self.class_count:
            raise ValueError("first layer input size must equal latent_dim + class_count")
        for lo, hi in zip(self.layers, self.layers[1:]):
            if hi.input_size != lo.hidden_size:
                raise ValueError("layer chain is not dimensionally consistent")
        if self.w_out.shape[0] != self.layers[-1].hidden_size:
            raise ValueError("output head does not match the last hidden size")

    @property
    def hidden_sizes(self) -> tuple:
        return tuple(layer.hidden_size for layer in self.layers)

    @property
    def output_dim(self) -> int:
        return self.w_out.shape[1]

    def arrays(self) -> dict:
        """Every trainable tensor by name, in a fixed order (views, not copies)."""
        out = {}
        for k, layer in enumerate(self.layers):
            for name, arr in layer.arrays().items():
                out[f"layers.{k}.{name}"] = arr
        out["w_out"] = self.w_out
        out["b_out"] = self.b_out
        return out

    def copy(self) -> "GeneratorParams":
        layers = [GruLayer(*(a.copy() for a in layer.arrays().values())) for layer in self.layers]
        return GeneratorParams(layers, self.w_out.copy(), self.b_out.copy(), self.latent_dim, self.class_count, self.seed)


def init_params(hidden_sizes, output_dim: int, rng=None, latent_dim: int = LATENT_DIM, class_count: int = 1):
    """Glorot-uniform weights (per gate matrix), zero biases."""
    hidden_sizes = list(hidden_sizes)
    if not hidden_sizes:
        raise ValueError("hidden_sizes must be non-empty")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = _rng(rng)

    def glorot(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    layers = []
    size_in = latent_dim + class_count
    for h in hidden_sizes:
        w_x = np.concatenate([glorot(size_in, h) for _ in range(3)], axis=1)
        w_h = np.concatenate([glorot(h, h) for _ in range(3)], axis=1)
        layers.append(GruLayer(w_x, w_h, np.zeros(3 * h), np.zeros(3 * h)))
        size_in = h
    return GeneratorParams(layers, glorot(size_in, output_dim), np.zeros(output_dim), latent_dim, class_count, seed)


def gru_cell_forward(layer: GruLayer, x_t, h_prev):
    """One step of the gate equations in the module docstring; works on batches too."""
    h = layer.hidden_size
    gx = x_t @ layer.w_x + layer.b_x
    gh = h_prev @ layer.w_h + layer.b_h
    r = sigmoid(gx[..., :h] + gh[..., :h])
    u = sigmoid(gx[..., h : 2 * h] + gh[..., h : 2 * h])
    n = np.tanh(gx[..., 2 * h :] + r * gh[..., 2 * h :])
    return (1.0 - u) * h_prev + u * n


@dataclass
class ForwardTape:
    params: GeneratorParams
    inputs: list = field(default_factory=list)  # per layer, (B, L, in)
    states: list = field(default_factory=list)  # per layer, (B, L + 1, h) incl. h_0
    gates: list = field(default_factory=list)  # per layer, (r, u, n, gh_n) each (B, L, h)
    output: np.ndarray | None = None  # (B, L, N) after tanh

    def rows(self, idx) -> "ForwardTape":
        """Tape restricted to a subset of batch rows, for backpropagating part of a batch."""
        idx = np.asarray(idx)
        gates = [tuple(g[idx] for g in layer) for layer in self.gates]
        return ForwardTape(self.params, [x[idx] for x in self.inputs], [s[idx] for s in self.states], gates,
                           None if self.output is None else self.output[idx])


def forward_batch(params: GeneratorParams, Z: np.ndarray, keep_tape: bool = True):
    """Run a ``(B, latent_dim + C, L)`` latent stack; returns ``(points (B, N, L), tape)``."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 3 or Z.shape[1] != params.layers[0].input_size:
        raise ValueError(
            f"latent stack of shape {Z.shape} does not match generator input size {params.layers[0].input_size}"
        )
    tape = ForwardTape(params)
    x = np.ascontiguousarray(np.transpose(Z, (0, 2, 1)))
    B, L, _ = x.shape
    for layer in params.layers:
        h = layer.hidden_size
        gx = (x.reshape(B * L, -1) @ layer.w_x + layer.b_x).reshape(B, L, -1)
        states = np.zeros((B, L + 1, h))
        r_all = np.empty((B, L, h))
        u_all = np.empty((B, L, h))
        n_all = np.empty((B, L, h))
        ghn_all = np.empty((B, L, h))
        hp = states[:, 0]
        for t in range(L):
            gh = hp @ layer.w_h + layer.b_h
            r = sigmoid(gx[:, t, :h] + gh[:, :h])
            u = sigmoid(gx[:, t, h : 2 * h] + gh[:, h : 2 * h])
            ghn = gh[:, 2 * h :]
            n = np.tanh(gx[:, t, 2 * h :] + r * ghn)
            hp = (1.0 - u) * hp + u * n
            states[:, t + 1] = hp
            r_all[:, t], u_all[:, t], n_all[:, t], ghn_all[:, t] = r, u, n, ghn
        if keep_tape:
            tape.inputs.append(x)
            tape.states.append(states)
            tape.gates.append((r_all, u_all, n_all, ghn_all))
        x = states[:, 1:]
    y = np.tanh(x @ params.w_out + params.b_out)
    if keep_tape:
        tape.output = y
    return np.ascontiguousarray(np.transpose(y, (0, 2, 1))), tape


def generator_forward(params: GeneratorParams, z: LatentSequence):
    """Generate one gesture from a latent sequence; returns ``(Gesture, tape)``."""
    pts, tape = forward_batch(params, z.values[None])
    return Gesture(pts[0], z.class_id, 0, ""), tape


def generator_backward(tape: ForwardTape, upstream) -> dict:
    """Backpropagation through time.

    ``upstream`` is ``d loss / d points`` with the shape of the forward output,
    ``(N, L)`` or ``(B, N, L)``.  Returns gradients keyed like
    :meth:`GeneratorParams.arrays`, summed over the batch.
    """
    if tape.output is None:
        raise ValueError("tape was recorded without keep_tape")
    params = tape.params
    dy = np.asarray(upstream, dtype=np.float64)
    if dy.ndim == 2:
        dy = dy[None]
    dy = np.transpose(dy, (0, 2, 1))
    if dy.shape != tape.output.shape:
        raise ValueError(f"upstream gradient shape {dy.shape} does not match the forward output")

    grads = {}
    da = dy * (1.0 - tape.output**2)
    top = tape.states[-1][:, 1:]
    grads["w_out"] = top.reshape(-1, top.shape[-1]).T @ da.reshape(-1, da.shape[-1])
    grads["b_out"] = da.sum(axis=(0, 1))
    dx = da @ params.w_out.T

    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        h = layer.hidden_size
        x, states = tape.inputs[k], tape.states[k]
        r_all, u_all, n_all, ghn_all = tape.gates[k]
        B, L, _ = x.shape
        dgx = np.empty((B, L, 3 * h))
        dw_h = np.zeros_like(layer.w_h)
        db_h = np.zeros_like(layer.b_h)
        dh_next = np.zeros((B, h))
        w_h_t = layer.w_h.T
        for t in range(L - 1, -1, -1):
            r, u, n, ghn = r_all[:, t], u_all[:, t], n_all[:, t], ghn_all[:, t]
            hp = states[:, t]
            dh = dx[:, t] + dh_next
            dn_pre = dh * u * (1.0 - n * n)
            du_pre = dh * (n - hp) * u * (1.0 - u)
            dr_pre = dn_pre * ghn * r * (1.0 - r)
            dgh = np.concatenate([dr_pre, du_pre, dn_pre * r], axis=1)
            dgx[:, t, :h] = dr_pre
            dgx[:, t, h : 2 * h] = du_pre
            dgx[:, t, 2 * h :] = dn_pre
            dw_h += hp.T @ dgh
            db_h += dgh.sum(axis=0)
            dh_next = dh * (1.0 - u) + dgh @ w_h_t
        grads[f"layers.{k}.w_x"] = x.reshape(B * L, -1).T @ dgx.reshape(B * L, -1)
        grads[f"layers.{k}.w_h"] = dw_h
        grads[f"layers.{k}.b_x"] = dgx.sum(axis=(0, 1))
        grads[f"layers.{k}.b_h"] = db_h
        if k > 0:
            dx = (dgx.reshape(B * L, -1) @ layer.w_x.T).reshape(B, L, -1)
    return {name: grads[name] for name in params.arrays()}


# ---------------------------------------------------------------- checkpoints


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write_entry(zf, name, data: bytes):
    # fixed timestamp keeps checkpoint files byte-identical across reruns
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(path, params: GeneratorParams, step: int = 0, extra_arrays=None, meta=None) -> None:
    """Write a versioned zip of ``.npy`` tensors plus a JSON header."""
    header = {
        "version": CHECKPOINT_VERSION,
        "hidden_sizes": list(params.hidden_sizes),
        "output_dim": params.output_dim,
        "latent_dim": params.latent_dim,
        "class_count": params.class_count,
        "seed": params.seed,
        "step": int(step),
        "meta": meta or {},
    }
    arrays = {f"params/{k}": v for k, v in params.arrays().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = v
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "header.json", json.dumps(header, sort_keys=True).encode())
        for name, arr in arrays.items():
            _write_entry(zf, name + ".npy", _npy_bytes(arr))


def load_checkpoint(path):
    """Returns ``(params, header, extra_arrays)``; rejects unknown versions."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as e:
        raise DataError(f"{path}: not a generator checkpoint ({e})") from None
    with zf:
        header = json.loads(zf.read("header.json"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
        arrays, extra = {}, {}
        for name in zf.namelist():
            if not name.endswith(".npy"):
                continue
            arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
            group, key = name[:-4].split("/", 1)
            (arrays if group == "params" else extra)[key] = arr
    layers = []
    for k in range(len(header["hidden_sizes"])):
        layers.append(GruLayer(*(arrays[f"layers.{k}.{n}"] for n in ("w_x", "w_h", "b_x", "b_h"))))
    params = GeneratorParams(
        layers, arrays["w_out"], arrays["b_out"], header["latent_dim"], header["class_count"], header["seed"]
    )
    return params, header, extra
