"""Small noise-prediction MLP with hand-rolled backprop.

Stands in for a large sequence backbone at desk scale: the inpainting and
projection machinery is denoiser-agnostic, and an explicit-gradient MLP is
checkable against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from keydiff.sampler import Observation, ReverseStepParams
from keydiff.schedule import NoiseSchedule

CHECKPOINT_VERSION = 1


def step_embedding(i, dim: int) -> np.ndarray:
    """Sinusoidal features of the diffusion step index; shape (..., dim)."""
    if dim % 2 != 0:
        raise ValueError("step embedding dimension must be even")
    i = np.asarray(i, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = i[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class MlpParams:
    """Layer weights/biases for [x | step-emb | obs] -> predicted noise."""

    weights: list[np.ndarray]  # W_l of shape (out, in)
    biases: list[np.ndarray]  # b_l of shape (out,)
    action_dim: int
    obs_dim: int
    emb_dim: int = 8
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        in_dim = self.action_dim + self.emb_dim + self.obs_dim
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != in_dim or b.shape != (W.shape[0],):
                raise ValueError("layer shapes do not chain")
            in_dim = W.shape[0]
        if in_dim != self.action_dim:
            raise ValueError("output dimension must equal action_dim")
        for W in self.weights:
            if not np.all(np.isfinite(W)):
                raise ValueError("non-finite parameters")

    @staticmethod
    def init(
        action_dim: int,
        obs_dim: int,
        hidden: tuple[int, ...],
        rng: np.random.Generator,
        emb_dim: int = 8,
        activation: str = "tanh",
    ) -> "MlpParams":
        sizes = [action_dim + emb_dim + obs_dim, *hidden, action_dim]
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / (n_in + n_out))
            weights.append(rng.normal(0.0, scale, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        return MlpParams(weights, biases, action_dim, obs_dim, emb_dim, activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])

    def with_flat(self, theta: np.ndarray) -> "MlpParams":
        ws, bs, off = [], [], 0
        for W in self.weights:
            ws.append(theta[off : off + W.size].reshape(W.shape).copy())
            off += W.size
        for b in self.biases:
            bs.append(theta[off : off + b.size].copy())
            off += b.size
        return replace(self, weights=ws, biases=bs)


def _activate(a: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(a) if kind == "tanh" else np.maximum(a, 0.0)


def _activate_grad(a: np.ndarray, z: np.ndarray, kind: str) -> np.ndarray:
    return 1.0 - z * z if kind == "tanh" else (a > 0.0).astype(np.float64)


def _forward(params: MlpParams, inputs: np.ndarray):
    """Batch forward pass; returns output and per-layer caches."""
    z = inputs
    caches = []
    n = len(params.weights)
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = z @ W.T + b
        if l < n - 1:
            out = _activate(a, params.activation)
        else:
            out = a
        caches.append((z, a, out))
        z = out
    return z, caches


def mlp_predict_eps(params: MlpParams, x_i: np.ndarray, i, obs: np.ndarray) -> np.ndarray:
    """Predict the forward noise from (x_i, step, observation features)."""
    x_i = np.atleast_2d(np.asarray(x_i, dtype=np.float64))
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if not np.all(np.isfinite(x_i)):
        raise ValueError("non-finite input")
    emb = step_embedding(np.broadcast_to(np.asarray(i, dtype=np.float64), (x_i.shape[0],)), params.emb_dim)
    inputs = np.concatenate([x_i, emb, obs], axis=1)
    out, _ = _forward(params, inputs)
    return out[0] if np.asarray(x_i).shape[0] == 1 and np.ndim(i) == 0 else out


def mlp_reverse_params(
    params: MlpParams, x_i: np.ndarray, i: int, obs: np.ndarray, sched: NoiseSchedule
) -> ReverseStepParams:
    """Standard noise-prediction reverse mean with fixed beta-tilde variance."""
    x_i = np.asarray(x_i, dtype=np.float64)
    eps_hat = mlp_predict_eps(params, x_i, i, obs)
    a = sched.alpha(i)
    b = sched.beta(i)
    ab = sched.alpha_bar(i)
    mu = (x_i - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    var = sched.posterior_var(i)
    return ReverseStepParams(mu=mu, sigma_diag=np.full(x_i.shape[0], var), step=i)


def mlp_loss_and_grad(
    params: MlpParams,
    x0: np.ndarray,
    obs: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    noise_batch=None,
):
    """Noise-matching loss and its gradient by explicit backpropagation.

    Each batch element gets a uniformly drawn step and fresh forward noise;
    pass noise_batch=(steps, eps) to fix both (used by gradient checks).
    loss = mean over all elements of (eps_hat - eps)^2.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError("x0 must be a non-empty (B, d) batch")
    B, d = x0.shape

    if noise_batch is None:
        steps = rng.integers(1, sched.n_steps + 1, size=B)
        eps = rng.standard_normal((B, d))
    else:
        steps, eps = noise_batch
    ab = np.array([sched.alpha_bar(int(i)) for i in steps])[:, None]
    x_i = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    emb = step_embedding(steps.astype(np.float64), params.emb_dim)
    inputs = np.concatenate([x_i, emb, obs], axis=1)
    out, caches = _forward(params, inputs)

    resid = out - eps
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite training loss")

    # Backward pass.
    delta = 2.0 * resid / resid.size
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    n = len(params.weights)
    for l in range(n - 1, -1, -1):
        z_in, a, z_out = caches[l]
        if l < n - 1:
            delta = delta * _activate_grad(a, z_out, params.activation)
        grads_w[l] = delta.T @ z_in
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ params.weights[l]
    grad = replace(params, weights=grads_w, biases=grads_b)
    return loss, grad


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    seed: int = 0
    optimizer: str = "adam"
    ema_decay: float | None = None
    hidden: tuple[int, ...] = (64, 64)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("rates and sizes must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def train(
    x0: np.ndarray,
    obs: np.ndarray,
    sched: NoiseSchedule,
    config: TrainConfig,
    params: MlpParams | None = None,
):
    """Minibatch training loop; deterministic for a fixed seed.

    Returns (params, per-epoch mean losses). A non-finite loss aborts with
    the last finite parameters.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = MlpParams.init(x0.shape[1], obs.shape[1], config.hidden, rng)

    theta = params.flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    ema = theta.copy()
    t = 0
    log: list[float] = []
    n = x0.shape[0]
    b1, b2 = config.adam_betas

    last_finite = theta.copy()
    for _ in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            cur = params.with_flat(theta)
            try:
                loss, grad = mlp_loss_and_grad(cur, x0[idx], obs[idx], sched, rng)
            except FloatingPointError:
                return params.with_flat(last_finite), log
            last_finite = theta.copy()
            g = grad.flat()
            t += 1
            if config.optimizer == "adam":
                m = b1 * m + (1.0 - b1) * g
                v = b2 * v + (1.0 - b2) * g * g
                mh = m / (1.0 - b1**t)
                vh = v / (1.0 - b2**t)
                theta = theta - config.learning_rate * mh / (np.sqrt(vh) + config.adam_eps)
            else:
                theta = theta - config.learning_rate * g
            if config.ema_decay:
                ema = config.ema_decay * ema + (1.0 - config.ema_decay) * theta
            losses.append(loss)
        log.append(float(np.mean(losses)))

    final = ema if config.ema_decay else theta
    return params.with_flat(final), log


def save_checkpoint(path, params: MlpParams, config: TrainConfig | None = None):
    """JSON header line followed by a little-endian float64 weight blob."""
    header = {
        "version": CHECKPOINT_VERSION,
        "action_dim": params.action_dim,
        "obs_dim": params.obs_dim,
        "emb_dim": params.emb_dim,
        "activation": params.activation,
        "layer_shapes": [list(W.shape) for W in params.weights],
        "config": None
        if config is None
        else {
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
            "epochs": config.epochs,
            "seed": config.seed,
            "optimizer": config.optimizer,
            "ema_decay": config.ema_decay,
            "hidden": list(config.hidden),
        },
    }
    blob = params.flat().astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(blob)


def load_checkpoint(path) -> MlpParams:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = f.read()
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    theta = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    shapes = [tuple(s) for s in header["layer_shapes"]]
    weights = [np.zeros(s) for s in shapes]
    biases = [np.zeros(s[0]) for s in shapes]
    skeleton = MlpParams(
        weights,
        biases,
        header["action_dim"],
        header["obs_dim"],
        header["emb_dim"],
        header["activation"],
    )
    return skeleton.with_flat(theta)


class MlpDenoiser:
    """Denoiser interface adapter around trained MLP parameters."""

    def __init__(self, params: MlpParams):
        self.params = params

    def reverse_params(
        self, x_i: np.ndarray, i: int, obs: Observation | None, sched: NoiseSchedule
    ) -> ReverseStepParams:
        feats = np.zeros(self.params.obs_dim) if obs is None else obs.flat()
        return mlp_reverse_params(self.params, x_i, i, feats, sched)
