"""Differentiable-computation substrate: MLPs with hand-derived backprop, Adam,
diagonal-Gaussian log densities, seeded RNG streams, and bit-exact checkpoints.

Everything is plain numpy float64. No autodiff: gradients are written out by hand
so the finite-difference tests in the suite actually exercise the math.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass
class MlpNetwork:
    """Fully connected net. weights[i] has shape (layer_dims[i+1], layer_dims[i]).

    The activation applies to hidden layers only; the output layer is linear.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


def init_mlp(layer_dims, activation: str, rng: np.random.Generator) -> MlpNetwork:
    """Gaussian init scaled by 1/sqrt(fan_in), zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ConfigError(f"layer_dims must be >= 2 positive entries, got {dims}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")
    weights = []
    biases = []
    for i in range(len(dims) - 1):
        scale = 1.0 / np.sqrt(dims[i])
        weights.append(rng.standard_normal((dims[i + 1], dims[i])) * scale)
        biases.append(np.zeros(dims[i + 1]))
    return MlpNetwork(layer_dims=dims, weights=weights, biases=biases, activation=activation)


def _apply_act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_deriv_from_output(h: np.ndarray, kind: str) -> np.ndarray:
    # tanh' = 1 - tanh^2; relu' from the output sign (h = max(z,0) so h>0 iff z>0)
    if kind == "tanh":
        return 1.0 - h * h
    if kind == "relu":
        return (h > 0.0).astype(np.float64)
    return np.ones_like(h)


def _as_batch(x, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ShapeError(f"{what} has length {x.shape[0]}, expected {dim}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ShapeError(f"{what} has trailing dim {x.shape[1]}, expected {dim}")
        return x, False
    raise ShapeError(f"{what} must be 1-D or 2-D, got ndim={x.ndim}")


def _forward_cache(net: MlpNetwork, x: np.ndarray) -> list[np.ndarray]:
    """Post-activation value of every layer, starting with the input itself."""
    hs = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        h = z if i == last else _apply_act(z, net.activation)
        hs.append(h)
    return hs


def forward(net: MlpNetwork, x) -> np.ndarray:
    """Evaluate the net on one input (in_dim,) or a batch (B, in_dim)."""
    xb, squeeze = _as_batch(x, net.in_dim, "input")
    out = _forward_cache(net, xb)[-1]
    return out[0] if squeeze else out


def backward(net: MlpNetwork, x, upstream) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Exact gradients of sum_b dot(output_b, upstream_b) w.r.t. params and input.

    Returns (weight_grads, bias_grads, input_grad). Raises NumericError naming the
    layer index if any intermediate or gradient goes non-finite.
    """
    xb, squeeze = _as_batch(x, net.in_dim, "input")
    gb, gsqueeze = _as_batch(upstream, net.out_dim, "upstream_grad")
    if squeeze != gsqueeze or xb.shape[0] != gb.shape[0]:
        raise ShapeError(
            f"input batch {xb.shape[0]} and upstream batch {gb.shape[0]} do not match"
        )
    hs = _forward_cache(net, xb)
    n = len(net.weights)
    w_grads: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    delta = gb
    for i in range(n - 1, -1, -1):
        if not np.all(np.isfinite(hs[i + 1])):
            raise NumericError(f"non-finite activation in layer {i}")
        w_grads[i] = delta.T @ hs[i]
        b_grads[i] = delta.sum(axis=0)
        if not (np.all(np.isfinite(w_grads[i])) and np.all(np.isfinite(b_grads[i]))):
            raise NumericError(f"non-finite gradient in layer {i}")
        delta = delta @ net.weights[i]
        if i > 0:
            delta = delta * _act_deriv_from_output(hs[i], net.activation)
    input_grad = delta[0] if squeeze else delta
    return w_grads, b_grads, input_grad


def mlp_params(net: MlpNetwork) -> list[np.ndarray]:
    """Parameter arrays as a flat list of views: [W0, b0, W1, b1, ...]."""
    out: list[np.ndarray] = []
    for w, b in zip(net.weights, net.biases):
        out.append(w)
        out.append(b)
    return out


def interleave_grads(w_grads: list[np.ndarray], b_grads: list[np.ndarray]) -> list[np.ndarray]:
    """Order gradient arrays to match mlp_params."""
    out: list[np.ndarray] = []
    for w, b in zip(w_grads, b_grads):
        out.append(w)
        out.append(b)
    return out


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(params: list[np.ndarray], learning_rate: float = 5e-4,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon,
    )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Standard bias-corrected Adam update, in place on params and state."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError(
            f"param/grad/state length mismatch: {len(params)}/{len(grads)}/{len(state.first_moment)}"
        )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params


def gaussian_log_prob(mean, log_std, action):
    """Diagonal-Gaussian log density: -0.5 sum_i [log(2 pi s_i^2) + (a_i-mu_i)^2/s_i^2].

    mean/action may carry a leading batch axis; log_std is a length-d vector.
    Returns a scalar for 1-D inputs, a (B,) array for batched ones.
    """
    mean = np.asarray(mean, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    if mean.shape[-1] != action.shape[-1]:
        raise ShapeError(f"mean dim {mean.shape[-1]} != action dim {action.shape[-1]}")
    if log_std.ndim != 1 or log_std.shape[0] != mean.shape[-1]:
        raise ShapeError(f"log_std must be a length-{mean.shape[-1]} vector, got shape {log_std.shape}")
    inv_var = np.exp(-2.0 * log_std)
    per_dim = np.log(2.0 * np.pi) + 2.0 * log_std + (action - mean) ** 2 * inv_var
    return -0.5 * np.sum(per_dim, axis=-1)


@dataclass(frozen=True)
class RngStream:
    """Reproducible generator keyed by (seed, stream_id)."""

    seed: int
    stream_id: int

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.default_rng(ss)


def named_stream(seed: int, name: str) -> RngStream:
    """Stable stream id from a label; one root seed fans out per component."""
    return RngStream(seed=int(seed), stream_id=zlib.crc32(name.encode("utf8")))


def named_generator(seed: int, name: str) -> np.random.Generator:
    return named_stream(seed, name).generator()


# ---------------------------------------------------------------------------
# Checkpoint plumbing: one ASCII header line, then little-endian float64 payload.
# Shared by MLP, policy, GMM, and dataset files. Round trips are bit-exact.

def format_header(kind: str, fields: dict) -> str:
    parts = [kind]
    for k in sorted(fields):
        v = str(fields[k])
        if " " in v or "=" in v or "\n" in v or "=" in k or " " in k:
            raise ConfigError(f"header field {k}={v!r} contains reserved characters")
        parts.append(f"{k}={v}")
    return " ".join(parts) + "\n"


def parse_header(line: str) -> tuple[str, dict]:
    parts = line.strip().split(" ")
    if not parts or not parts[0]:
        raise DataError("empty checkpoint header")
    fields = {}
    for p in parts[1:]:
        if "=" not in p:
            raise DataError(f"malformed header field {p!r}")
        k, v = p.split("=", 1)
        fields[k] = v
    return parts[0], fields


def write_record_file(path, kind: str, fields: dict, payload: bytes) -> None:
    header = format_header(kind, fields).encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_record_file(path, expected_kind: str) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: no header line found")
    try:
        kind, fields = parse_header(raw[:nl].decode("ascii"))
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: header is not ASCII") from e
    if kind != expected_kind:
        raise DataError(f"{path}: expected a {expected_kind!r} file, found {kind!r}")
    return fields, raw[nl + 1:]


def pack_floats(arrays) -> bytes:
    chunks = []
    for a in arrays:
        chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(chunks)


def take_floats(payload: bytes, offset: int, shape) -> tuple[np.ndarray, int]:
    """Read one float64 array from the payload; DataError names missing bytes."""
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * 8
    if offset + nbytes > len(payload):
        raise DataError(
            f"truncated payload: need {offset + nbytes - len(payload)} more bytes "
            f"for an array of shape {tuple(shape)}"
        )
    arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
    return arr.reshape(shape).copy(), offset + nbytes


def save_mlp(path, net: MlpNetwork, extra: dict | None = None) -> None:
    fields = dict(extra or {})
    fields["layer_dims"] = ",".join(str(d) for d in net.layer_dims)
    fields["activation"] = net.activation
    payload = pack_floats(mlp_params(net))
    write_record_file(path, "mlp", fields, payload)


def load_mlp(path) -> tuple[MlpNetwork, dict]:
    fields, payload = read_record_file(path, "mlp")
    try:
        dims = tuple(int(d) for d in fields["layer_dims"].split(","))
        activation = fields["activation"]
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed mlp header fields") from e
    if activation not in ACTIVATIONS:
        raise DataError(f"{path}: unknown activation {activation!r}")
    weights = []
    biases = []
    offset = 0
    for i in range(len(dims) - 1):
        w, offset = take_floats(payload, offset, (dims[i + 1], dims[i]))
        b, offset = take_floats(payload, offset, (dims[i + 1],))
        weights.append(w)
        biases.append(b)
    if offset != len(payload):
        raise DataError(f"{path}: {len(payload) - offset} unexpected trailing bytes")
    extra = {k: v for k, v in fields.items() if k not in ("layer_dims", "activation")}
    return MlpNetwork(layer_dims=dims, weights=weights, biases=biases, activation=activation), extra


def clone_mlp(net: MlpNetwork) -> MlpNetwork:
    return MlpNetwork(
        layer_dims=net.layer_dims,
        weights=[w.copy() for w in net.weights],
        biases=[b.copy() for b in net.biases],
        activation=net.activation,
    )
