"""Shared 5-conv backbone with a skill (softmax) or force (linear) head.

Per conv stage: conv3x3 -> ReLU -> batchnorm -> 2x2 max-pool.  Then
flatten -> dense + ReLU -> dropout -> head.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, asdict
from typing import Iterable

import numpy as np

from . import tensor as T

HEADS = ("skill", "force")
NUM_SKILLS = 5
NUM_CONV = 5

# Nearest monotone channel sequence to the 67,525-parameter reference skill
# model at 500x500 input (exhaustive search gap: 224). See search_channel_config.
DEFAULT_CHANNELS = (16, 16, 16, 16, 16)


def pooled_size(n: int, stages: int = NUM_CONV) -> int:
    for _ in range(stages):
        n //= 2
    return n


@dataclass(frozen=True)
class ArchitectureConfig:
    input_height: int = 500
    input_width: int = 500
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    dense_units: int = 16
    dropout_p: float = 0.5
    with_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != NUM_CONV:
            raise ValueError(f"need exactly {NUM_CONV} conv channel counts, got {len(self.channels)}")
        if any(c <= 0 for c in self.channels):
            raise ValueError(f"channel counts must be positive: {self.channels}")
        if self.dense_units <= 0:
            raise ValueError("dense_units must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.flatten_size <= 0:
            raise ValueError(
                f"input {self.input_height}x{self.input_width} collapses to nothing "
                f"after {NUM_CONV} poolings"
            )

    @property
    def flatten_size(self) -> int:
        return pooled_size(self.input_height) * pooled_size(self.input_width) * self.channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**{**d, "channels": tuple(d["channels"])})


def head_outputs(head: str) -> int:
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}, got {head!r}")
    return NUM_SKILLS if head == "skill" else 1


@dataclass
class ModelParameters:
    config: ArchitectureConfig
    head: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int | None = None

    def trainable_names(self) -> list[str]:
        return [k for k in self.tensors if not k.endswith(("running_mean", "running_var"))]

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, self.head,
                               {k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self) -> np.dtype:
        """Compute precision; float32 normally, float64 for gradient checks."""
        return self.tensors["conv1.kernel"].dtype

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(self.config, self.head,
                               {k: v.astype(dtype) for k, v in self.tensors.items()}, self.seed)


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def build_model(config: ArchitectureConfig, head: str, rng: np.random.Generator | int) -> ModelParameters:
    """Fresh parameters: He-uniform weights, zero biases/beta, unit gamma."""
    n_out = head_outputs(head)
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = T.make_rng(seed)
    t: dict[str, np.ndarray] = {}
    cin = 1
    for i, cout in enumerate(config.channels, start=1):
        p = f"conv{i}."
        t[p + "kernel"] = _he_uniform(rng, (3, 3, cin, cout), 9 * cin)
        if config.with_bias:
            t[p + "bias"] = np.zeros(cout, np.float32)
        t[p + "gamma"] = np.ones(cout, np.float32)
        t[p + "beta"] = np.zeros(cout, np.float32)
        t[p + "running_mean"] = np.zeros(cout, np.float32)
        t[p + "running_var"] = np.ones(cout, np.float32)
        cin = cout
    m, n = config.flatten_size, config.dense_units
    t["dense.W"] = _he_uniform(rng, (m, n), m)
    if config.with_bias:
        t["dense.b"] = np.zeros(n, np.float32)
    t["head.W"] = _he_uniform(rng, (n, n_out), n)
    if config.with_bias:
        t["head.b"] = np.zeros(n_out, np.float32)
    return ModelParameters(config, head, t, seed)


def count_parameters(params: ModelParameters) -> tuple[int, int]:
    """(trainable, non_trainable) element counts; running BN stats are non-trainable."""
    trainable = non_trainable = 0
    for name, value in params.tensors.items():
        if name.endswith(("running_mean", "running_var")):
            non_trainable += value.size
        else:
            trainable += value.size
    return trainable, non_trainable


def conv_stage_trainable(cin: int, cout: int, with_bias: bool = True) -> int:
    """3x3 kernel, optional bias, batchnorm gamma and beta."""
    return 9 * cin * cout + (cout if with_bias else 0) + 2 * cout


def closed_form_trainable(config: ArchitectureConfig, head: str) -> int:
    b = 1 if config.with_bias else 0
    total, cin = 0, 1
    for c in config.channels:
        total += conv_stage_trainable(cin, c, config.with_bias)
        cin = c
    n, k = config.dense_units, head_outputs(head)
    return total + config.flatten_size * n + b * n + n * k + b * k


# --- forward / backward ----------------------------------------------------

@dataclass
class ForwardCache:
    stages: list[dict]
    flat_shape: tuple
    flat: np.ndarray
    dense_pre: np.ndarray
    dense_mask: np.ndarray | None
    dense_out: np.ndarray
    output: np.ndarray
    running: dict[str, np.ndarray]


def _get(params, name):
    return params.tensors.get(name)


def forward_batch(params: ModelParameters, x: np.ndarray, mode: str = "infer",
                  rng: np.random.Generator | None = None, keep_cache: bool = False):
    """Run a batch (N, H, W, 1).

    Returns ``(output, cache)``: output is (N, 5) probabilities for the skill
    head or (N,) forces.  In train mode ``cache.running`` holds the updated
    batchnorm running statistics; ``params`` itself is never modified.
    """
    cfg = params.config
    if x.ndim != 4 or x.shape[1:] != (cfg.input_height, cfg.input_width, 1):
        raise ValueError(
            f"expected input (N, {cfg.input_height}, {cfg.input_width}, 1), got {x.shape}"
        )
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and cfg.dropout_p > 0 and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    train = mode == "train"
    record = keep_cache or train
    stages = []
    running = {}
    h = x.astype(params.dtype, copy=False)
    for i in range(1, NUM_CONV + 1):
        p = f"conv{i}."
        z, conv_cache = T.conv2d_forward(h, params[p + "kernel"], _get(params, p + "bias"))
        if not record:
            h = T.relu_batchnorm_pool_infer(z, params[p + "gamma"], params[p + "beta"],
                                            params[p + "running_mean"], params[p + "running_var"])
            continue
        a = T.relu(z)
        b, rm, rv, bn_cache = T.batchnorm(
            a, params[p + "gamma"], params[p + "beta"],
            params[p + "running_mean"], params[p + "running_var"], mode)
        if train:
            running[p + "running_mean"] = rm
            running[p + "running_var"] = rv
        pooled, idx = T.maxpool2(b)
        stages.append(dict(x=h, conv=conv_cache, z=z, a=a, bn=bn_cache,
                           b_shape=b.shape, pool_idx=idx))
        h = pooled
    flat_shape = h.shape
    flat = h.reshape(h.shape[0], -1)
    pre = T.dense(flat, params["dense.W"], _get(params, "dense.b"))
    d1 = T.relu(pre)
    mask = None
    if train and cfg.dropout_p > 0:
        mask = T.dropout_mask(d1.shape, cfg.dropout_p, rng, d1.dtype)
        dr = d1 * mask
    else:
        dr = d1
    logits = T.dense(dr, params["head.W"], _get(params, "head.b"))
    out = T.softmax(logits) if params.head == "skill" else logits[:, 0]
    cache = None
    if record:
        cache = ForwardCache(stages, flat_shape, flat, pre, mask, dr, out, running)
    return out, cache


def forward(params: ModelParameters, image: np.ndarray, mode: str = "infer",
            rng: np.random.Generator | None = None):
    """Single frame (H, W, 1) -> 5 probabilities (skill) or a float force."""
    out, _ = forward_batch(params, image[None], mode, rng)
    return out[0] if params.head == "skill" else float(out[0])


def _relu_gate(gate: str, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    if gate == "plain":
        return T.relu_backward(x, g)
    if gate == "guided":
        return np.where((x > 0) & (g > 0), g, 0).astype(g.dtype)
    if gate == "guided-literal":
        # max(0, max(0, x) * max(0, g)) applied at every ReLU.
        return (np.maximum(x, 0) * np.maximum(g, 0)).astype(g.dtype)
    raise ValueError(f"unknown relu gate {gate!r}")


def backward(params: ModelParameters, cache: ForwardCache, grad_output: np.ndarray,
             mode: str = "train", relu_gate: str = "plain", need_input_grad: bool = False,
             capture_activation_grads: bool = False):
    """Reverse pass from the head's pre-activation gradient.

    ``grad_output`` is dL/dlogits (N, 5) for the skill head or dL/dy (N,)
    for the force head.  Returns ``(grads, extras)``; ``extras`` may carry
    ``input`` (dL/dx) and ``activations`` (per stage dL/dA, A = ReLU output).
    """
    cfg = params.config
    grads: dict[str, np.ndarray] = {}
    extras: dict = {}
    dt = params.dtype
    g = np.asarray(grad_output, dtype=dt)
    if params.head == "force":
        g = g.reshape(-1, 1)
    gx, grads["head.W"], gb = T.dense_backward(cache.dense_out, params["head.W"], g)
    if cfg.with_bias:
        grads["head.b"] = gb
    if cache.dense_mask is not None:
        gx = gx * cache.dense_mask
    gx = _relu_gate(relu_gate, cache.dense_pre, gx)
    gx, grads["dense.W"], gb = T.dense_backward(cache.flat, params["dense.W"], gx)
    if cfg.with_bias:
        grads["dense.b"] = gb
    gh = gx.reshape(cache.flat_shape)
    act_grads = [None] * NUM_CONV
    for i in range(NUM_CONV, 0, -1):
        st = cache.stages[i - 1]
        p = f"conv{i}."
        gb_ = T.maxpool2_backward(st["b_shape"], st["pool_idx"], gh)
        if mode == "train":
            ga, grads[p + "gamma"], grads[p + "beta"] = T.batchnorm_backward(gb_, st["bn"])
        else:
            inv = 1.0 / np.sqrt(params[p + "running_var"].astype(np.float64) + T.BN_EPS)
            ga = gb_ * (params[p + "gamma"] * inv).astype(dt)
            xhat = (st["a"] - params[p + "running_mean"]) * inv.astype(dt)
            grads[p + "gamma"] = (gb_ * xhat).sum(axis=(0, 1, 2)).astype(dt)
            grads[p + "beta"] = gb_.sum(axis=(0, 1, 2)).astype(dt)
        if capture_activation_grads:
            act_grads[i - 1] = ga
        gz = _relu_gate(relu_gate, st["z"], ga)
        want_input = i > 1 or need_input_grad
        gh, grads[p + "kernel"], gbias = T.conv2d_backward(
            st["x"], params[p + "kernel"], gz, cache=st["conv"], need_input_grad=want_input)
        if cfg.with_bias:
            grads[p + "bias"] = gbias
    if need_input_grad:
        extras["input"] = gh
    if capture_activation_grads:
        extras["activations"] = act_grads
    return grads, extras


# --- channel search --------------------------------------------------------

CHANNEL_CHOICES = (2, 4, 8, 16, 32, 64)


@dataclass
class ChannelSearchResult:
    config: ArchitectureConfig | None
    nearest: ArchitectureConfig
    nearest_count: int
    gap: int


def search_channel_config(target_trainable: int, dense_units: int = 16,
                          input_height: int = 500, input_width: int = 500,
                          with_bias: bool = True,
                          choices: Iterable[int] = CHANNEL_CHOICES) -> ChannelSearchResult:
    """Exhaustive search over non-decreasing channel sequences for a skill-model size.

    ``config`` is set only on an exact hit; the nearest miss is always reported.
    """
    if target_trainable <= 0:
        raise ValueError("target must be positive")
    best = None
    exact = None
    for chans in itertools.combinations_with_replacement(sorted(choices), NUM_CONV):
        try:
            cfg = ArchitectureConfig(input_height, input_width, chans, dense_units,
                                     with_bias=with_bias)
        except ValueError:
            continue
        count = closed_form_trainable(cfg, "skill")
        key = (abs(count - target_trainable), chans)
        if best is None or key < best[0]:
            best = (key, cfg, count)
        if count == target_trainable and exact is None:
            exact = cfg
    if best is None:
        raise ValueError("no valid configuration for this input size")
    (gap, _), cfg, count = best
    return ChannelSearchResult(exact, cfg, count, gap)
