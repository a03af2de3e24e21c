"""
Diffusion module for the DiG desk implementation.
Gaussian diffusion utilities: the linear noise schedule, forward noising,
the true posterior, the simple and variational losses with learned
covariance, and the ancestral sampler.
"""
import logging

import numpy as np
from tqdm import tqdm

from tensor import (ConfigError, IndexRangeError, NumericError, Tensor, as_tensor, exp, log,
                    maximum, mean, no_grad, sigmoid, tanh, where)

logger = logging.getLogger(__name__)

SCHEDULES = ("linear", "scaled_linear")


class NoiseSchedule:
    """Per-step beta and the derived alpha-bar and posterior coefficients.

    Indices are 0-based: index t is chain step t + 1.
    """

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or not len(betas):
            raise ConfigError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        self.betas = betas
        self.num_steps = len(betas)
        alphas = 1.0 - betas
        self.alphas_cumprod = np.cumprod(alphas)
        self.alphas_cumprod_prev = np.append(1.0, self.alphas_cumprod[:-1])
        self.sqrt_alphas_cumprod = np.sqrt(self.alphas_cumprod)
        self.sqrt_one_minus_alphas_cumprod = np.sqrt(1.0 - self.alphas_cumprod)
        self.sqrt_recip_alphas_cumprod = np.sqrt(1.0 / self.alphas_cumprod)
        self.sqrt_recipm1_alphas_cumprod = np.sqrt(1.0 / self.alphas_cumprod - 1.0)
        abar, abar_prev = self.alphas_cumprod, self.alphas_cumprod_prev
        self.posterior_variance = betas * (1.0 - abar_prev) / (1.0 - abar)
        # index 0 has zero variance; borrow index 1 for the log
        if self.num_steps > 1:
            clipped = np.append(self.posterior_variance[1], self.posterior_variance[1:])
        else:
            clipped = np.array([betas[0]])
        self.posterior_log_variance_clipped = np.log(clipped)
        self.posterior_mean_coef1 = betas * np.sqrt(abar_prev) / (1.0 - abar)
        self.posterior_mean_coef2 = (1.0 - abar_prev) * np.sqrt(alphas) / (1.0 - abar)

    @classmethod
    def linear(cls, num_steps=1000, beta_start=1e-4, beta_end=2e-2):
        """Betas evenly spaced from beta_start to beta_end."""
        return cls(np.linspace(beta_start, beta_end, num_steps))

    @classmethod
    def scaled_linear(cls, num_steps=1000, beta_start=1e-4, beta_end=2e-2):
        """Linear betas stretched by 1000 / num_steps, so short chains reach the same noise.

        Needs num_steps > 1000 * beta_end; shorter chains would push beta_end past 1.
        """
        scale = 1000.0 / num_steps
        if scale * beta_end >= 1.0:
            raise ConfigError(f"scaled_linear needs more than {1000.0 * beta_end:g} steps, "
                              f"got {num_steps}")
        return cls(np.linspace(scale * beta_start, scale * beta_end, num_steps))

    @classmethod
    def named(cls, kind, num_steps):
        """Schedule by name: 'linear' or 'scaled_linear'."""
        if kind not in SCHEDULES:
            raise ConfigError(f"unknown noise schedule {kind!r}; choose from "
                              f"{', '.join(SCHEDULES)}")
        return getattr(cls, kind)(num_steps)

    def check_index(self, t):
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() >= self.num_steps):
            raise IndexRangeError(f"timestep outside [0, {self.num_steps})")
        return t.astype(np.int64)

    def extract(self, values, t, ndim):
        """Coefficient at t, shaped to broadcast against an ndim-rank batch."""
        t = self.check_index(t)
        if t.ndim == 0:
            return float(values[t])
        return values[t].reshape((-1,) + (1,) * (ndim - 1))


def q_sample(x0, t, eps, s):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0, eps = as_tensor(x0), as_tensor(eps)
    return (x0 * s.extract(s.sqrt_alphas_cumprod, t, x0.ndim)
            + eps * s.extract(s.sqrt_one_minus_alphas_cumprod, t, x0.ndim))


def q_step(x_prev, t, eps, s):
    """One forward transition x_{t} ~ q(x_t | x_{t-1})."""
    x_prev, eps = as_tensor(x_prev), as_tensor(eps)
    beta = s.extract(s.betas, t, x_prev.ndim)
    return x_prev * np.sqrt(1.0 - beta) + eps * np.sqrt(beta)


def q_posterior(x0, x_t, t, s):
    """Mean, variance and clipped log-variance of q(x_{t-1} | x_t, x0)."""
    if np.any(np.asarray(t) < 0):
        raise IndexRangeError("posterior is undefined before the first diffusion step")
    x0, x_t = as_tensor(x0), as_tensor(x_t)
    n = x_t.ndim
    mean_ = (x0 * s.extract(s.posterior_mean_coef1, t, n)
             + x_t * s.extract(s.posterior_mean_coef2, t, n))
    return (mean_, s.extract(s.posterior_variance, t, n),
            s.extract(s.posterior_log_variance_clipped, t, n))


def predict_x0_from_eps(x_t, t, eps, s):
    x_t = as_tensor(x_t)
    n = x_t.ndim
    return (x_t * s.extract(s.sqrt_recip_alphas_cumprod, t, n)
            - as_tensor(eps) * s.extract(s.sqrt_recipm1_alphas_cumprod, t, n))


def p_mean_variance(noise_pred, cov_raw, x_t, t, s):
    """Model mean and log-variance of p(x_{t-1} | x_t).

    log var = v log beta_t + (1 - v) log beta~_t with v = sigmoid(cov_raw);
    without cov_raw the clipped posterior variance is used.
    """
    x_t = as_tensor(x_t)
    n = x_t.ndim
    min_log = s.extract(s.posterior_log_variance_clipped, t, n)
    if cov_raw is None:
        log_var = Tensor(np.broadcast_to(min_log, x_t.shape).copy())
    else:
        v = sigmoid(cov_raw)
        max_log = s.extract(np.log(s.betas), t, n)
        log_var = v * max_log + (1.0 - v) * min_log
    if not np.all(np.isfinite(log_var.data)):
        raise NumericError("model variance is not positive and finite")
    x0_hat = predict_x0_from_eps(x_t, t, noise_pred, s)
    model_mean, _, _ = q_posterior(x0_hat, x_t, t, s)
    return model_mean, log_var


def normal_kl(mean1, logvar1, mean2, logvar2):
    """Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)) in nats."""
    mean1, logvar1 = as_tensor(mean1), as_tensor(logvar1)
    mean2, logvar2 = as_tensor(mean2), as_tensor(logvar2)
    diff = mean1 - mean2
    return 0.5 * (-1.0 + logvar2 - logvar1 + exp(logvar1 - logvar2)
                  + diff * diff * exp(-logvar2))


def approx_standard_normal_cdf(x):
    return 0.5 * (1.0 + tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x * x * x)))


def discretized_gaussian_log_likelihood(x, means, log_scales):
    """Log-probability of data on a 255-bin grid over [-1, 1]."""
    x = np.asarray(as_tensor(x).data)
    centered = Tensor(x) - means
    inv_stdv = exp(-log_scales)
    cdf_plus = approx_standard_normal_cdf(inv_stdv * (centered + 1.0 / 255.0))
    cdf_min = approx_standard_normal_cdf(inv_stdv * (centered - 1.0 / 255.0))
    log_cdf_plus = log(maximum(cdf_plus, 1e-12))
    log_one_minus_cdf_min = log(maximum(1.0 - cdf_min, 1e-12))
    log_delta = log(maximum(cdf_plus - cdf_min, 1e-12))
    return where(x < -0.999, log_cdf_plus, where(x > 0.999, log_one_minus_cdf_min, log_delta))


def _per_sample_mean(t):
    return mean(t, axis=tuple(range(1, t.ndim)))


def vb_terms(noise_pred, cov_raw, x0, x_t, t, s):
    """Per-sample variational term [B]: KL for t > 0, decoder NLL at t = 0.

    The noise prediction is detached so this term trains only the covariance.
    """
    t = s.check_index(t).reshape(-1)
    true_mean, _, true_log_var = q_posterior(x0, x_t, t, s)
    model_mean, model_log_var = p_mean_variance(noise_pred.detach(), cov_raw, x_t, t, s)
    kl = _per_sample_mean(normal_kl(true_mean, true_log_var, model_mean, model_log_var))
    nll = -_per_sample_mean(discretized_gaussian_log_likelihood(x0, model_mean,
                                                                0.5 * model_log_var))
    return where(t == 0, nll, kl)


def simple_term(noise_pred, eps):
    """Mean squared error between predicted and true noise."""
    diff = noise_pred - as_tensor(eps)
    return mean(diff * diff)


def loss_simple(model, x0, t, y, eps, s):
    """L_simple of one forward pass at x_t = q_sample(x0, t, eps)."""
    noise_pred, _ = model(q_sample(x0, t, eps, s), t, y)
    return simple_term(noise_pred, eps)


def _require_covariance(cov_raw):
    if cov_raw is None:
        raise ConfigError("the variational term needs a model with learn_sigma")
    return cov_raw


def loss_vb_term(model, x0, x_t, t, y, s):
    """Batch mean of the variational term at (x0, x_t, t)."""
    noise_pred, cov_raw = model(x_t, t, y)
    return mean(vb_terms(noise_pred, _require_covariance(cov_raw), x0, x_t, t, s))


def training_losses(model, x0, t, y, eps, s, lambda_vb=1.0):
    """L_simple + lambda_vb * L_vb, both terms from a single forward pass."""
    x_t = q_sample(x0, t, eps, s)
    noise_pred, cov_raw = model(x_t, t, y)
    simple = simple_term(noise_pred, eps)
    if cov_raw is None or lambda_vb == 0:
        return {"loss": simple, "loss_simple": simple, "loss_vb": None}
    vb = mean(vb_terms(noise_pred, cov_raw, x0, x_t, t, s))
    return {"loss": simple + lambda_vb * vb, "loss_simple": simple, "loss_vb": vb}


def p_sample_loop(model, shape, y, s, seed=0, progress=False):
    """Ancestral sampling from pure noise; returns the final [B, C, I, I] array.

    One normal draw is taken per step, including the last, where it is unused.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    y = np.asarray(y).reshape(-1)
    steps = range(s.num_steps - 1, -1, -1)
    with no_grad():
        for i in tqdm(steps, desc="sampling", disable=not progress, leave=False):
            t = np.full(shape[0], i)
            noise_pred, cov_raw = model(Tensor(x), t, y)
            model_mean, log_var = p_mean_variance(noise_pred, cov_raw, Tensor(x), t, s)
            noise = rng.standard_normal(shape)
            x = model_mean.data
            if i > 0:
                x = x + np.exp(0.5 * log_var.data) * noise
            if not np.all(np.isfinite(x)):
                raise NumericError(f"sampling diverged at step {i}", step=i)
    return x
