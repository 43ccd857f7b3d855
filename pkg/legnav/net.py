"""
Home to the numpy actor and critic networks.

Networks are plain multilayer perceptrons with ELU hidden activations and a
linear output. forward returns the output along with the cache backward
needs; backward returns exact gradients for every weight and bias.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from legnav.errors import NonFiniteError

log = logging.getLogger(__name__)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def orthogonal(shape: Tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    """
    Returns a (fan_in, fan_out) matrix with orthonormal rows or columns, scaled by gain.
    """
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class ForwardCache(NamedTuple):
    inputs: List[np.ndarray]
    preacts: List[np.ndarray]


class Mlp:
    """
    A fully connected network. weights[k] has shape (sizes[k], sizes[k + 1]).
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> None:
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: weight {w.shape} does not match bias {b.shape}")
            if k and weights[k - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {k}: input {w.shape[0]} != previous output {weights[k - 1].shape[1]}")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        hidden_gain: float = math.sqrt(2),
        output_gain: float = 1.0,
    ) -> "Mlp":
        """
        Orthogonal weights, zero biases.
        """
        weights, biases = [], []
        for k in range(len(sizes) - 1):
            gain = output_gain if k == len(sizes) - 2 else hidden_gain
            weights.append(orthogonal((sizes[k], sizes[k + 1]), gain, rng))
            biases.append(np.zeros(sizes[k + 1]))
        return cls(weights, biases)

    @property
    def sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dimension {self.input_dim}, got {x.shape[-1]}")
        inputs, preacts = [], []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            preacts.append(z)
            h = z if k == last else elu(z)
        return h, ForwardCache(inputs, preacts)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, grad_out: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """
        Returns (gradients in params() order, gradient w.r.t. the input) for
        the upstream gradient grad_out of the output.
        """
        grad = np.asarray(grad_out, dtype=np.float64)
        grads: List[np.ndarray] = [None] * (2 * len(self.weights))
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            if k != last:
                grad = grad * elu_grad(cache.preacts[k])
            inp = cache.inputs[k]
            grads[2 * k] = inp.reshape(-1, inp.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
            grads[2 * k + 1] = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
            grad = grad @ self.weights[k].T
        return grads, grad

    def to_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        arrays = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"{prefix}.w{k}"] = w
            arrays[f"{prefix}.b{k}"] = b
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], prefix: str) -> "Mlp":
        weights, biases = [], []
        k = 0
        while f"{prefix}.w{k}" in arrays:
            weights.append(arrays[f"{prefix}.w{k}"])
            biases.append(arrays[f"{prefix}.b{k}"])
            k += 1
        return cls(weights, biases)


class GaussianPolicy:
    """
    Diagonal Gaussian with a state-independent learnable log_std.
    """

    def __init__(self, mean_net: Mlp, log_std: np.ndarray) -> None:
        self.mean_net = mean_net
        self.log_std = np.clip(np.array(log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)
        if self.log_std.shape != (mean_net.output_dim,):
            raise ValueError(f"log_std shape {self.log_std.shape} != ({mean_net.output_dim},)")

    @property
    def num_actions(self) -> int:
        return self.mean_net.output_dim

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def clamp(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.mean_net(obs)

    def sample(self, obs: np.ndarray, eps: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns (action, mean) with action = mean + std * eps.
        """
        mu = self.mean(obs)
        return mu + self.std * eps, mu

    def log_prob(self, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        return gaussian_log_prob(self.mean(obs), self.log_std, action)

    def entropy(self) -> float:
        return float(np.sum(self.log_std + 0.5 + HALF_LOG_2PI))


class ValueNet:
    def __init__(self, net: Mlp) -> None:
        if net.output_dim != 1:
            raise ValueError("value network must have a single output")
        self.net = net

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return self.net(obs)[..., 0]


class ActorCritic:
    """
    The policy and value networks trained together.
    """

    def __init__(self, policy: GaussianPolicy, value: ValueNet) -> None:
        self.policy = policy
        self.value = value

    @classmethod
    def init(
        cls,
        obs_dim: int,
        num_actions: int,
        actor_hidden: Sequence[int],
        critic_hidden: Sequence[int],
        init_log_std: float,
        rng: np.random.Generator,
    ) -> "ActorCritic":
        actor = Mlp.init([obs_dim, *actor_hidden, num_actions], rng, output_gain=0.01)
        critic = Mlp.init([obs_dim, *critic_hidden, 1], rng, output_gain=1.0)
        return cls(GaussianPolicy(actor, np.full(num_actions, init_log_std)), ValueNet(critic))

    @property
    def obs_dim(self) -> int:
        return self.policy.mean_net.input_dim

    def params(self) -> List[np.ndarray]:
        """
        Every trainable array in a fixed order: actor, log_std, critic.
        """
        return self.policy.mean_net.params() + [self.policy.log_std] + self.value.net.params()

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = self.policy.mean_net.to_arrays("actor")
        arrays["log_std"] = self.policy.log_std
        arrays.update(self.value.net.to_arrays("critic"))
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ActorCritic":
        actor = Mlp.from_arrays(arrays, "actor")
        critic = Mlp.from_arrays(arrays, "critic")
        return cls(GaussianPolicy(actor, arrays["log_std"]), ValueNet(critic))

    def copy(self) -> "ActorCritic":
        return ActorCritic.from_arrays({k: v.copy() for k, v in self.to_arrays().items()})


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> np.ndarray:
    """
    sum_j [-(a_j - mu_j)^2 / (2 sigma_j^2) - log sigma_j - log(2 pi) / 2]
    """
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)


def forward_actor(policy: GaussianPolicy, obs: np.ndarray) -> np.ndarray:
    return policy.mean(obs)


def log_prob(policy: GaussianPolicy, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
    return policy.log_prob(obs, action)


def backward(net: Mlp, cache: ForwardCache, loss_grads: np.ndarray) -> List[np.ndarray]:
    return net.backward(cache, loss_grads)[0]


class Adam:
    """
    Adam over a fixed list of arrays, updated in place.
    """

    def __init__(
        self,
        params: Sequence[np.ndarray],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """
    Scales grads in place so their global norm is at most max_norm; returns
    the norm before clipping.
    """
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


@dataclass
class GradCheckReport:
    sizes: List[int]
    num_params: int
    max_rel_error: float
    worst_param: str
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    net: Mlp,
    obs_batch: np.ndarray,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """
    Compares analytic gradients with central differences.

    The loss is the mean over the batch of a fixed random projection of the
    output. Relative errors use max(|analytic| + |numeric|, 1e-5) as scale.
    """
    rng = rng or np.random.default_rng(0)
    obs_batch = np.asarray(obs_batch, dtype=np.float64)
    if net.num_params > 10_000:
        log.warning(f"grad_check on {net.num_params} parameters will be slow")
    proj = rng.standard_normal((obs_batch.shape[0], net.output_dim)) / obs_batch.shape[0]

    def loss() -> float:
        return float(np.sum(net(obs_batch) * proj))

    out, cache = net.forward(obs_batch)
    analytic = net.backward(cache, proj)[0]

    worst, worst_name = 0.0, ""
    for index, (param, grad) in enumerate(zip(net.params(), analytic)):
        flat, flat_grad = param.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = loss()
            flat[i] = saved - h
            down = loss()
            flat[i] = saved
            numeric = (up - down) / (2 * h)
            scale = max(abs(flat_grad[i]) + abs(numeric), 1e-5)
            err = abs(flat_grad[i] - numeric) / scale
            if err > worst:
                kind = "w" if index % 2 == 0 else "b"
                worst, worst_name = err, f"{kind}{index // 2}[{i}]"

    report = GradCheckReport(
        sizes=net.sizes,
        num_params=net.num_params,
        max_rel_error=worst,
        worst_param=worst_name,
        tolerance=tolerance,
    )
    log.info(
        f"grad check {report.sizes}: max relative error {worst:.3e} at {worst_name or '-'} "
        f"({'pass' if report.passed else 'fail'})"
    )
    return report
