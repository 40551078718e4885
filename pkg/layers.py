"""Network building blocks on top of the autodiff core"""
import copy
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np

from autodiff import Tensor, as_tensor, parameter
from config import Config
from exceptions import CheckpointError, ConfigError


class Module:
    """Parameter container; parameters are discovered from attributes in definition order"""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise CheckpointError(f"Checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise CheckpointError(
                    f"Shape mismatch for {name}: checkpoint {value.shape} vs network {p.data.shape}"
                )
            p.data = value.copy()

    def copy(self) -> "Module":
        """Deep copy (used for target networks)"""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.grad = None
        return clone

    def fill_(self, value: float) -> "Module":
        for p in self.parameters():
            p.data[...] = value
        return self


def uniform_parameter(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


def linear_forward(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """input · weights + bias over the last input dimension"""
    input = as_tensor(input)
    if weights.ndim != 2 or input.shape[-1] != weights.shape[0]:
        raise ConfigError(f"linear: input dim {input.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ConfigError(f"linear: bias {bias.shape} does not match output dim {weights.shape[1]}")
    if input.ndim == 1:
        return linear_forward(input.reshape(1, -1), weights, bias).reshape(weights.shape[1])
    return input @ weights + bias


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = uniform_parameter(rng, (in_dim, out_dim), in_dim)
        self.bias = uniform_parameter(rng, (out_dim,), in_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(x, self.weight, self.bias)


class GRUCell(Module):
    """Gated recurrent unit; gates stacked as (reset, update, candidate)"""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.weight_ih = uniform_parameter(rng, (input_dim, 3 * hidden_dim), hidden_dim)
        self.weight_hh = uniform_parameter(rng, (hidden_dim, 3 * hidden_dim), hidden_dim)
        self.bias_ih = uniform_parameter(rng, (3 * hidden_dim,), hidden_dim)
        self.bias_hh = uniform_parameter(rng, (3 * hidden_dim,), hidden_dim)

    def __call__(self, x: Tensor, hidden_prev: Tensor) -> Tensor:
        return gru_cell_forward(x, hidden_prev, self)

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden_dim)))


def gru_cell_forward(input: Tensor, hidden_prev: Tensor, params: GRUCell) -> Tensor:
    input, hidden_prev = as_tensor(input), as_tensor(hidden_prev)
    H = params.hidden_dim
    if hidden_prev.shape[-1] != H:
        raise ConfigError(f"GRU hidden dim {hidden_prev.shape[-1]} != configured {H}")
    if input.shape[-1] != params.input_dim:
        raise ConfigError(f"GRU input dim {input.shape[-1]} != configured {params.input_dim}")
    gi = linear_forward(input, params.weight_ih, params.bias_ih)
    gh = linear_forward(hidden_prev, params.weight_hh, params.bias_hh)
    reset = (gi[..., :H] + gh[..., :H]).sigmoid()
    update = (gi[..., H:2 * H] + gh[..., H:2 * H]).sigmoid()
    candidate = (gi[..., 2 * H:] + reset * gh[..., 2 * H:]).tanh()
    return candidate + update * (hidden_prev - candidate)


@dataclass
class GaussianDistribution:
    """Diagonal Gaussian; std = exp(log_std)"""
    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_std = as_tensor(self.log_std)
        if self.mean.shape != self.log_std.shape:
            raise ConfigError(f"Gaussian mean {self.mean.shape} and log_std {self.log_std.shape} differ")

    @property
    def std(self) -> Tensor:
        return self.log_std.exp()

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.mean.shape


class GaussianLayer(Module):
    """Heads producing a diagonal Gaussian with clamped log_std"""

    def __init__(self, in_dim: int, latent_dim: int, rng: np.random.Generator,
                 log_std_min: float = Config.LOG_STD_MIN, log_std_max: float = Config.LOG_STD_MAX):
        self.mean_head = Linear(in_dim, latent_dim, rng)
        self.log_std_head = Linear(in_dim, latent_dim, rng)
        self.log_std_min = log_std_min
        self.log_std_max = log_std_max

    def __call__(self, x: Tensor) -> GaussianDistribution:
        log_std = self.log_std_head(x).clip(self.log_std_min, self.log_std_max)
        return GaussianDistribution(self.mean_head(x), log_std)


def gaussian_sample(dist: GaussianDistribution, noise: Union[Tensor, np.ndarray]) -> Tensor:
    """Reparameterized sample mean + std * noise"""
    noise = as_tensor(noise)
    if noise.shape != dist.mean.shape:
        raise ConfigError(f"noise shape {noise.shape} != latent shape {dist.mean.shape}")
    return dist.mean + dist.std * noise


def gaussian_kl(p: GaussianDistribution, q: GaussianDistribution, reduce: bool = True) -> Tensor:
    """KL(p || q) for diagonal Gaussians, summed over the last axis.

    With ``reduce`` the result is meaned over all leading (batch) axes.
    """
    if p.shape != q.shape:
        raise ConfigError(f"KL between shapes {p.shape} and {q.shape}")
    var_ratio = (2.0 * (p.log_std - q.log_std)).exp()
    mean_term = (p.mean - q.mean) ** 2 * (-2.0 * q.log_std).exp()
    kl = ((q.log_std - p.log_std) + 0.5 * (var_ratio + mean_term) - 0.5).sum(axis=-1)
    return kl.mean() if reduce else kl


class MLP(Module):
    """Linear layers with ReLU between them"""

    def __init__(self, dims: List[int], rng: np.random.Generator, activate_last: bool = False):
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
        self.activate_last = activate_last

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.activate_last:
                x = x.relu()
        return x


def one_hot(indices: np.ndarray, depth: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros(indices.shape + (depth,))
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


# ---- optimisation ----------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = Config.LEARNING_RATE
    beta1: float = Config.ADAM_BETA1
    beta2: float = Config.ADAM_BETA2
    epsilon: float = Config.ADAM_EPSILON
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    """One bias-corrected Adam update, in place on params"""
    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter {name} shape {p.data.shape}")
        m = state.first_moment.setdefault(name, np.zeros_like(p.data))
        v = state.second_moment.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params


class Adam:
    def __init__(self, named_params: Dict[str, Tensor], lr: float = Config.LEARNING_RATE):
        self.params = dict(named_params)
        self.state = AdamState(learning_rate=lr)

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    @lr.setter
    def lr(self, value: float):
        self.state.learning_rate = value

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def step(self):
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adam_step(self.state, self.params, grads)


def clip_grad_norm(params: List[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm; returns the pre-clip norm"""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total
