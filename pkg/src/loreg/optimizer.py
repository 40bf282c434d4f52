"""Coordinatewise LSTM optimizer: one small recurrent network applied
independently to every scalar parameter of the optimizee.

The network consumes the (optionally log-preprocessed) per-coordinate
gradient, carries per-coordinate hidden state, and emits an additive update
through a scaled linear head. Parameter count is independent of the
optimizee's size.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import RngStream

CHECKPOINT_MAGIC = b"LOCP"
CHECKPOINT_VERSION = 1
LOG_EPS = 1e-16


class CheckpointError(ValueError):
    pass


def preprocess(g: np.ndarray, p: float = 10.0) -> np.ndarray:
    """Two-channel gradient encoding: (log|g|/p, sign g) for large entries,
    (-1, e^p g) for entries below the e^{-p} threshold."""
    g = ad.as_tensor(g)
    big = np.abs(g) >= np.exp(-p)
    z0 = np.where(big, np.log(np.abs(g) + LOG_EPS) * (1.0 / p), -1.0)
    z1 = np.sign(g)
    z1[~big] = np.exp(p) * g[~big]
    return np.stack([z0, z1], axis=1)


@dataclass
class OptState:
    """Per-coordinate recurrent state, (num_coords, layers, hidden)."""
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, num_coords: int, num_layers: int, hidden_size: int) -> "OptState":
        shape = (num_coords, num_layers, hidden_size)
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def num_coords(self) -> int:
        return self.h.shape[0]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.h[:, l, :], self.c[:, l, :]) for l in range(self.h.shape[1])]


class CoordinatewiseLSTM:
    """The learned update rule F(.; phi).

    By default the network sees only the (preprocessed) gradient. With
    theta_conditioning it also receives the current parameter value per
    coordinate, which lets it express parameter-dependent behavior such as
    shrinkage.
    """

    def __init__(self, num_layers: int = 2, hidden_size: int = 20,
                 preprocess_enabled: bool = True, p: float = 10.0,
                 output_scale: float = 0.1, theta_conditioning: bool = False,
                 params: dict | None = None, rng: RngStream | None = None):
        self.num_layers = num_layers
        self.hidden_size = hidden_size
        self.preprocess_enabled = preprocess_enabled
        self.p = float(p)
        self.output_scale = float(output_scale)
        self.theta_conditioning = theta_conditioning
        if params is not None:
            self.params = {k: ad.as_tensor(v) for k, v in params.items()}
        else:
            self.params = self._init_params(rng or RngStream(0))

    @property
    def input_dim(self) -> int:
        per_channel = 2 if self.preprocess_enabled else 1
        return per_channel * (2 if self.theta_conditioning else 1)

    def _init_params(self, rng: RngStream) -> dict:
        h = self.hidden_size
        params = {}
        in_dim = self.input_dim
        for l in range(self.num_layers):
            params[f"wx{l}"] = rng.glorot((in_dim, 4 * h), in_dim, 4 * h)
            params[f"wh{l}"] = rng.glorot((h, 4 * h), h, 4 * h)
            params[f"b{l}"] = np.zeros(4 * h)
            in_dim = h
        params["w_out"] = rng.glorot((h, 1), h, 1)
        return params

    def param_order(self) -> list[str]:
        names = []
        for l in range(self.num_layers):
            names += [f"wx{l}", f"wh{l}", f"b{l}"]
        return names + ["w_out"]

    @property
    def num_params(self) -> int:
        return sum(self.params[k].size for k in self.param_order())

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].reshape(-1) for k in self.param_order()])

    def set_flat(self, vec: np.ndarray):
        off = 0
        for k in self.param_order():
            n = self.params[k].size
            self.params[k] = ad.as_tensor(vec[off : off + n].reshape(self.params[k].shape))
            off += n
        if off != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {off}")

    def clone(self) -> "CoordinatewiseLSTM":
        return CoordinatewiseLSTM(self.num_layers, self.hidden_size, self.preprocess_enabled,
                                  self.p, self.output_scale, self.theta_conditioning,
                                  params={k: v.copy() for k, v in self.params.items()})

    def initial_state(self, num_coords: int) -> OptState:
        return OptState.zeros(num_coords, self.num_layers, self.hidden_size)

    # --- forward passes ----------------------------------------------------

    def _preprocess_on_tape(self, x: ad.Node) -> ad.Node:
        """Differentiable preprocessing; the branch mask is piecewise-constant."""
        n = x.value.shape[0]
        big = (np.abs(x.value) >= np.exp(-self.p)).astype(np.float64)
        z0 = ad.add(ad.mul(ad.scale(ad.log_abs(x, LOG_EPS), 1.0 / self.p), big), big - 1.0)
        z1 = ad.add(ad.mul(ad.sign(x), big), ad.mul(x, (1.0 - big) * np.exp(self.p)))
        return ad.concat([ad.slice_flat(z0, 0, n, (n, 1)),
                          ad.slice_flat(z1, 0, n, (n, 1))], axis=1)

    def _encode(self, value, n: int):
        """Input encoding for one channel; value may be a Node or an array."""
        if isinstance(value, ad.Node):
            return (self._preprocess_on_tape(value) if self.preprocess_enabled
                    else ad.slice_flat(value, 0, n, (n, 1)))
        v = ad.as_tensor(value)
        return preprocess(v, self.p) if self.preprocess_enabled else v.reshape(n, 1)

    def forward_on_tape(self, tape: ad.Tape, params: dict, grads: np.ndarray | None,
                        state_layers: list, input_node: ad.Node | None = None,
                        theta=None):
        """One optimizer step on a tape.

        params: name -> Node or constant array; state_layers: per layer
        (h, c) Nodes or constants. Pass input_node to differentiate the
        update w.r.t. the input state instead of feeding `grads`. With
        theta_conditioning, `theta` (Node or array) joins the input.
        """
        h = self.hidden_size
        gin = input_node if input_node is not None else ad.as_tensor(grads)
        n = gin.value.shape[0] if isinstance(gin, ad.Node) else gin.shape[0]
        x = self._encode(gin, n)
        if self.theta_conditioning:
            if theta is None:
                raise ValueError("theta_conditioning requires the current parameters")
            enc = self._encode(theta, n)
            if isinstance(x, ad.Node) or isinstance(enc, ad.Node):
                x = ad.concat([x if isinstance(x, ad.Node) else tape.leaf(x), enc], axis=1)
            else:
                x = np.concatenate([x, enc], axis=1)
        new_layers = []
        for l in range(self.num_layers):
            h_in, c_in = state_layers[l]
            hc = ad.lstm_cell(x, h_in, c_in, params[f"wx{l}"], params[f"wh{l}"], params[f"b{l}"])
            h_new = ad.slice_axis(hc, 1, 0, h)
            c_new = ad.slice_axis(hc, 1, h, 2 * h)
            new_layers.append((h_new, c_new))
            x = h_new
        out = ad.scale(ad.matmul(x, params["w_out"]), self.output_scale)
        update = ad.slice_flat(out, 0, n, (n,))
        return update, new_layers

    def step(self, grads: np.ndarray, state: OptState, theta: np.ndarray | None = None):
        """Eager update: returns (additive updates, new state). The caller
        applies theta + updates."""
        grads = ad.as_tensor(grads)
        if grads.shape[0] != state.num_coords:
            raise ad.ShapeMismatchError(
                f"{grads.shape[0]} gradients for {state.num_coords} state rows")
        if not np.all(np.isfinite(grads)):
            raise ad.NonFiniteError("non-finite gradients fed to the optimizer")
        tape = ad.Tape()
        params = {k: tape.leaf(v) for k, v in self.params.items()}
        update, layers = self.forward_on_tape(tape, params, grads, state.layers(), theta=theta)
        new_state = OptState(
            np.stack([hl.value for hl, _ in layers], axis=1),
            np.stack([cl.value for _, cl in layers], axis=1),
        )
        return update.value, new_state


# --- checkpoint format -------------------------------------------------------

def serialize_lo(lo: CoordinatewiseLSTM) -> bytes:
    """Versioned binary checkpoint; float64 payload is byte-exact."""
    order = lo.param_order()
    payload = b"".join(np.ascontiguousarray(lo.params[k]).tobytes() for k in order)
    header = {
        "num_layers": lo.num_layers,
        "hidden_size": lo.hidden_size,
        "preprocess_enabled": lo.preprocess_enabled,
        "p": lo.p,
        "output_scale": lo.output_scale,
        "theta_conditioning": lo.theta_conditioning,
        "arrays": [[k, list(lo.params[k].shape)] for k in order],
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    head = json.dumps(header, sort_keys=True).encode()
    return (CHECKPOINT_MAGIC
            + CHECKPOINT_VERSION.to_bytes(4, "little")
            + len(head).to_bytes(4, "little")
            + head + payload)


def deserialize_lo(data: bytes) -> CoordinatewiseLSTM:
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an optimizer checkpoint (bad magic)")
    version = int.from_bytes(data[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported")
    head_len = int.from_bytes(data[8:12], "little")
    if len(data) < 12 + head_len:
        raise CheckpointError("corrupt checkpoint: truncated header")
    try:
        header = json.loads(data[12 : 12 + head_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError("corrupt checkpoint: unreadable header") from exc
    payload = data[12 + head_len :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError("corrupt checkpoint: truncated payload")
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError("corrupt checkpoint: payload checksum mismatch")
    params, off = {}, 0
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) * 8
        params[name] = np.frombuffer(payload[off : off + n]).reshape(shape).copy()
        off += n
    return CoordinatewiseLSTM(header["num_layers"], header["hidden_size"],
                              header["preprocess_enabled"], header["p"],
                              header["output_scale"], header.get("theta_conditioning", False),
                              params=params)


def save_lo(lo: CoordinatewiseLSTM, path):
    with open(path, "wb") as f:
        f.write(serialize_lo(lo))


def load_lo(path) -> CoordinatewiseLSTM:
    with open(path, "rb") as f:
        return deserialize_lo(f.read())
