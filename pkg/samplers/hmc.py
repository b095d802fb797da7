"""
Hamiltonian Monte Carlo reference sampler.

Targets are given as log_posterior_fn(q) / grad_fn(q) on flat float64 vectors;
network_target() builds the pair for a full-batch network posterior.
"""
import logging

import numpy as np

from lab.exceptions import NonFiniteParamsError, PreconditionError
from networks.mlp import ParamVector
from objectives.losses import log_likelihood_grad, log_prior_grad
from .ensemble import PosteriorEnsemble

logger = logging.getLogger(__name__)


def hamiltonian(log_posterior_fn, q, p):
    return -log_posterior_fn(q) + 0.5 * float(p @ p)


def leapfrog(q, p, grad_fn, step_size, n_steps):
    """n_steps of the kick-drift-kick integrator for H(q, p) = -log pi(q) + |p|^2 / 2."""
    q = np.array(q, dtype=np.float64)
    p = np.array(p, dtype=np.float64)

    p = p + 0.5 * step_size * grad_fn(q)
    for i in range(n_steps):
        q = q + step_size * p
        if i < n_steps - 1:
            p = p + step_size * grad_fn(q)
    p = p + 0.5 * step_size * grad_fn(q)
    return q, p


def network_target(spec, dataset, prior_precision, noise=None):
    """Full-batch log posterior of a network and its gradient, both over flat parameter values."""

    # States or gradients that overflow score -inf / NaN so the proposal is rejected.
    def log_posterior_fn(values):
        try:
            params = ParamVector(spec, values)
            log_lik, _ = log_likelihood_grad(spec, params, dataset.inputs, dataset.targets, noise)
            log_prior, _ = log_prior_grad(params, prior_precision)
        except NonFiniteParamsError:
            return -np.inf
        return log_lik + log_prior

    def grad_fn(values):
        try:
            params = ParamVector(spec, values)
            _, lik_grad = log_likelihood_grad(spec, params, dataset.inputs, dataset.targets, noise)
            _, prior_grad = log_prior_grad(params, prior_precision)
        except NonFiniteParamsError:
            return np.full(len(values), np.nan)
        return lik_grad.values + prior_grad.values

    return log_posterior_fn, grad_fn


def hmc_sample(log_posterior_fn, grad_fn, init, step_size, leapfrog_steps, n_samples, burn_in, rng, thin=1):
    """
    Gaussian momentum, leapfrog proposal and Metropolis correction.

    Runs burn_in + n_samples * thin transitions and keeps every thin-th state
    after burn-in. A proposal whose Hamiltonian is not finite is rejected.
    When init is a ParamVector the samples are ParamVectors of the same spec.
    """
    if not step_size > 0:
        raise PreconditionError(f"Step size must be positive, got {step_size}")
    if leapfrog_steps < 1:
        raise PreconditionError(f"Need at least one leapfrog step, got {leapfrog_steps}")
    if n_samples < 1 or burn_in < 0 or thin < 1:
        raise PreconditionError(f"Invalid chain length: n_samples={n_samples}, burn_in={burn_in}, thin={thin}")

    spec = getattr(init, "spec", None)
    q = np.array(getattr(init, "values", init), dtype=np.float64)
    wrap = (lambda v: ParamVector(spec, v)) if spec is not None else (lambda v: v)

    total = burn_in + n_samples * thin
    accepted = 0
    samples = []
    current_log_post = log_posterior_fn(q)
    for t in range(1, total + 1):
        p = rng.standard_normal(q.shape[0])
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            start = -current_log_post + 0.5 * float(p @ p)
            q_new, p_new = leapfrog(q, p, grad_fn, step_size, leapfrog_steps)
            log_post_new = log_posterior_fn(q_new) if np.all(np.isfinite(q_new)) else -np.inf
            end = -log_post_new + 0.5 * float(p_new @ p_new)
        log_u = np.log(rng.uniform())

        if np.isfinite(end) and np.isfinite(log_post_new) and log_u < start - end:
            q, current_log_post = q_new, log_post_new
            accepted += 1

        if t > burn_in and (t - burn_in) % thin == 0:
            samples.append(wrap(q.copy()))

    rate = accepted / total
    logger.info(f"HMC kept {len(samples)} samples, acceptance rate {rate:.3f} (eps={step_size}, L={leapfrog_steps})")
    return PosteriorEnsemble(
        samples,
        spec,
        provenance={
            "kind": "hmc",
            "step_size": step_size,
            "leapfrog_steps": leapfrog_steps,
            "n_samples": n_samples,
            "burn_in": burn_in,
            "thin": thin,
        },
        acceptance_rate=rate,
        last=wrap(q.copy()),
    )
