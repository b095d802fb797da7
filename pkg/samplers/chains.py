"""
Plugin SGD and vanilla SGLD over network parameters.

The teacher update is

    theta <- theta + (eta_t / 2) * (grad log prior + (N/M) sum_i grad log p(y_i | x_i, theta)) + z_t,
    z_t ~ N(0, eta_t I)

with minibatches drawn uniformly with replacement.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from enum import Enum

import numpy as np

from lab.exceptions import DivergedChainError, NonFiniteParamsError, PreconditionError
from networks.mlp import init_params
from objectives.losses import posterior_grad_and_nll
from .ensemble import PosteriorEnsemble

logger = logging.getLogger(__name__)

DEFAULT_INIT_SCALE = float(np.sqrt(2.0))


class ChainKind(str, Enum):
    SGD = "sgd"
    SGLD = "sgld"


@dataclass(frozen=True)
class StepSchedule:
    """initial * factor ** (t // every); every=0 means a constant step."""

    initial: float
    factor: float = 1.0
    every: int = 0

    def __post_init__(self):
        if not self.initial > 0:
            raise PreconditionError(f"Step size must be positive, got {self.initial}")
        if not self.factor > 0:
            raise PreconditionError(f"Decay factor must be positive, got {self.factor}")
        if self.every < 0:
            raise PreconditionError(f"Decay interval must be non-negative, got {self.every}")

    @classmethod
    def constant(cls, step):
        return cls(step)

    def at(self, t):
        if self.every == 0:
            return self.initial
        return self.initial * self.factor ** (t // self.every)


@dataclass(frozen=True)
class ChainConfig:
    eta: StepSchedule
    T: int
    B: int = 0
    tau: int = 1
    M: int = 1
    prior_precision: float = 1.0
    seed: int = 0
    init_scale: float = DEFAULT_INIT_SCALE

    def __post_init__(self):
        if not self.T > self.B >= 0:
            raise PreconditionError(f"Need T > B >= 0, got T={self.T}, B={self.B}")
        if self.tau < 1:
            raise PreconditionError(f"Thinning interval must be >= 1, got {self.tau}")
        if self.M < 1:
            raise PreconditionError(f"Minibatch size must be >= 1, got {self.M}")
        if self.prior_precision < 0:
            raise PreconditionError(f"Prior precision must be >= 0, got {self.prior_precision}")

    @property
    def retained_count(self):
        return (self.T - self.B) // self.tau

    def retains(self, t):
        """Whether theta_t (after t updates) is kept."""
        return t > self.B and (t - self.B) % self.tau == 0

    def summary(self):
        summary = asdict(self)
        summary["eta"] = asdict(self.eta)
        return summary


@dataclass
class ChainStreams:
    init: np.random.Generator
    noise: np.random.Generator
    minibatch: np.random.Generator

    @classmethod
    def from_seed(cls, seed):
        init, noise, minibatch = (np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(3))
        return cls(init, noise, minibatch)


def derive_seed(master_seed, index):
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def sgd_step(params, grad_log_posterior_estimate, eta):
    """Gradient ascent on the log posterior."""
    if not eta > 0:
        raise PreconditionError(f"Step size must be positive, got {eta}")
    return params.with_values(params.values + eta * grad_log_posterior_estimate.values)


def sgld_step(params, grad_log_posterior_estimate, eta_t, rng):
    """Half-step drift plus N(0, eta_t) noise per coordinate; rng=None drops the noise."""
    if not eta_t > 0:
        raise PreconditionError(f"Step size must be positive, got {eta_t}")
    values = params.values + (0.5 * eta_t) * grad_log_posterior_estimate.values
    if rng is not None:
        values = values + np.sqrt(eta_t) * rng.standard_normal(values.shape[0])
    return params.with_values(values)


class TeacherChain:
    """One teacher chain advanced an iteration at a time; shared by run_chain and distillation."""

    def __init__(self, kind, spec, dataset, config, noise=None, inject_noise=True):
        if len(dataset) == 0:
            raise PreconditionError("Dataset must not be empty")
        self.kind = ChainKind(kind)
        self.spec = spec
        self.dataset = dataset
        self.config = config
        self.noise = noise
        self.streams = ChainStreams.from_seed(config.seed)
        self.inject_noise = inject_noise
        self.params = init_params(spec, self.streams.init, config.init_scale)
        self.t = 0

    def step(self):
        """Advance one iteration; returns the minibatch mean NLL at the pre-update parameters."""
        config = self.config
        eta = config.eta.at(self.t)
        indices = self.streams.minibatch.integers(0, len(self.dataset), size=config.M)
        self.t += 1
        try:
            grad, nll = posterior_grad_and_nll(
                self.spec, self.params, self.dataset.take(indices), len(self.dataset),
                config.prior_precision, self.noise,
            )
            if self.kind is ChainKind.SGLD:
                rng = self.streams.noise if self.inject_noise else None
                self.params = sgld_step(self.params, grad, eta, rng)
            else:
                self.params = sgd_step(self.params, grad, eta)
        except NonFiniteParamsError as e:
            logger.error(f"{self.kind.value} chain on {self.spec} diverged at iteration {self.t}")
            raise DivergedChainError(self.t, "teacher") from e
        return nll

    def retain_now(self):
        return self.kind is ChainKind.SGLD and self.config.retains(self.t)


def run_chain(kind, spec, dataset, config, noise=None, inject_noise=True):
    """SGLD returns the retained PosteriorEnsemble; SGD returns the final point estimate."""
    chain = TeacherChain(kind, spec, dataset, config, noise, inject_noise)
    logger.info(
        f"Running {chain.kind.value} on {spec}: T={config.T}, B={config.B}, tau={config.tau}, "
        f"M={config.M}, lambda={config.prior_precision}, seed={config.seed}"
    )

    samples = []
    for _ in range(config.T):
        chain.step()
        if chain.retain_now():
            samples.append(chain.params)

    if chain.kind is ChainKind.SGD:
        return chain.params

    logger.info(f"SGLD chain on {spec} retained {len(samples)} samples")
    return PosteriorEnsemble(
        samples,
        spec,
        provenance={"kind": chain.kind.value, **config.summary()},
        last=chain.params,
    )


def run_chains(spec, dataset, config, n_chains, noise=None, workers=1):
    """Independent SGLD chains seeded from (config.seed, chain index), merged by concatenation."""
    configs = [replace(config, seed=derive_seed(config.seed, index)) for index in range(n_chains)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        ensembles = list(pool.map(lambda cfg: run_chain(ChainKind.SGLD, spec, dataset, cfg, noise), configs))
    return PosteriorEnsemble.merge(ensembles)
