"""Noise schedule, closed-form noising, the epsilon-prediction objective,
ancestral sampling with classifier-free guidance, and the training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .denoiser import drop_conditioning, null_ids
from .optim import AdamState, adam_step
from .rng import RandomStream, normal

log = logging.getLogger(__name__)

# stream ids reserved for the training loop; the step or epoch index is added
_TRAIN_NOISE = 1 << 40
_TRAIN_SHUFFLE = 2 << 40
NOISE_BLOCK = 50


@dataclass
class NoiseSchedule:
    """Arrays indexed by ``t - 1`` for ``t = 1..T``."""

    betas: np.ndarray
    variance: str = "beta"
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    sigmas: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or len(self.betas) < 1:
            raise ValueError("need at least one beta")
        if np.any(self.betas < 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.variance not in ("beta", "posterior"):
            raise ValueError("variance must be 'beta' or 'posterior'")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if self.variance == "beta":
            self.sigmas = np.sqrt(self.betas)
        else:
            prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
            self.sigmas = np.sqrt(self.betas * (1.0 - prev) / (1.0 - self.alpha_bars))

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"time step must lie in [1, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_1": float(self.betas[0]), "beta_T": float(self.betas[-1]), "variance": self.variance}


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02, variance: str = "beta") -> NoiseSchedule:
    """Linear betas from ``beta_1`` to ``beta_T``."""
    if T < 1 or not (0.0 < beta_1 <= beta_T < 1.0):
        raise ValueError("need T >= 1 and 0 < beta_1 <= beta_T < 1")
    return NoiseSchedule(np.linspace(beta_1, beta_T, T), variance)


def schedule_from_dict(d: dict) -> NoiseSchedule:
    return make_schedule(d["T"], d["beta_1"], d["beta_T"], d.get("variance", "beta"))


def _per_sample(values: np.ndarray, t, ndim: int) -> np.ndarray:
    v = values[np.asarray(t) - 1]
    return np.reshape(v, np.shape(v) + (1,) * (ndim - np.ndim(v)))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is a scalar or one step per sample."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    schedule.check_step(t)
    ab = _per_sample(schedule.alpha_bars, t, x0.ndim)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype, copy=False)


@dataclass
class TrainingInputs:
    x_t: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    ids: np.ndarray
    dropped: np.ndarray


def draw_training_inputs(x0, ids, schedule: NoiseSchedule, stream: RandomStream, p_drop: float = 0.1, check_range=True):
    """Per-sample ``t ~ U{1..T}``, then ``eps ~ N(0, I)``, then conditioning dropout, in that order."""
    x0 = np.asarray(x0)
    if check_range and (x0.min() < -1 - 1e-6 or x0.max() > 1 + 1e-6):
        raise ValueError("training images must be normalised to [-1, 1]")
    n = x0.shape[0]
    t = 1 + stream.integers(schedule.T, n)
    eps = normal(stream, x0.shape, dtype=x0.dtype)
    ids, dropped = drop_conditioning(ids, stream, p_drop)
    return TrainingInputs(q_sample(x0, t, eps, schedule), t, eps, ids, dropped)


def noise_prediction_loss(model, inputs: TrainingInputs) -> ag.Tensor:
    eps_hat = model(inputs.x_t, inputs.t, inputs.ids)
    return ag.mse(eps_hat, ag.Tensor(inputs.eps))


def training_loss(x0, ids, model, schedule: NoiseSchedule, stream: RandomStream, p_drop: float = 0.1, check_range=True):
    """Mean squared error between drawn noise and the model's prediction of it."""
    inputs = draw_training_inputs(x0, ids, schedule, stream, p_drop, check_range)
    return noise_prediction_loss(model, inputs)


def cfg_predict(eps_cond, eps_uncond, s: float):
    """Classifier-free guidance: ``eps_u + s (eps_c - eps_u)``."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("guidance inputs differ in shape")
    if s < 0:
        raise ValueError("guidance scale must be non-negative")
    return eps_uncond + s * (eps_cond - eps_uncond)


def p_sample_step(x_t, t: int, eps_hat, z, schedule: NoiseSchedule) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}; ``z`` must be None or zero at t = 1."""
    schedule.check_step(t)
    x_t = np.asarray(x_t)
    if t == 1:
        if z is not None and np.any(np.asarray(z) != 0):
            raise ValueError("the final step (t = 1) takes no noise")
        z = 0.0
    elif z is None:
        raise ValueError("noise z is required for t > 1")
    a = schedule.alphas[t - 1]
    ab = schedule.alpha_bars[t - 1]
    mean = (x_t - ((1.0 - a) / np.sqrt(1.0 - ab)) * np.asarray(eps_hat)) / np.sqrt(a)
    return (mean + schedule.sigmas[t - 1] * z).astype(x_t.dtype, copy=False)


def _guided_eps(model, x, t, cond_ids, uncond_ids, s):
    with ag.no_grad():
        if s == 1.0:
            return model(x, t, cond_ids).data
        if s == 0.0:
            return model(x, t, uncond_ids).data
        both = model(np.concatenate([x, x]), t, np.concatenate([cond_ids, uncond_ids])).data
        n = x.shape[0]
        return cfg_predict(both[:n], both[n:], s)


def sample_loop(
    model,
    prompt,
    schedule: NoiseSchedule,
    stream: RandomStream,
    guidance_scale: float = 1.0,
    count: int = 1,
    shape=None,
    batch_size: int = 64,
    clamp: bool = True,
) -> np.ndarray:
    """Draw ``count`` samples by ancestral sampling from x_T ~ N(0, I).

    Image ``i`` draws all its noise from ``stream.child(i)`` (x_T first, then
    z in blocks of ``NOISE_BLOCK`` steps), so results do not depend on
    ``batch_size``. ``clamp`` limits the final output to [-1, 1].
    """
    if guidance_scale < 0:
        raise ValueError("guidance scale must be non-negative")
    if count < 1:
        raise ValueError("count must be positive")
    if shape is None:
        cfg = model.config
        shape = (cfg.in_channels, cfg.image_size, cfg.image_size)
    shape = tuple(shape)
    dtype = ag.get_default_dtype()
    cond = model.tokenize(prompt)
    uncond = null_ids(cond.shape[1])[None, :]
    T = schedule.T
    out = np.empty((count,) + shape, dtype=dtype)
    for start in range(0, count, batch_size):
        idx = range(start, min(count, start + batch_size))
        streams = [stream.child(i) for i in idx]
        x = np.stack([normal(s, shape, dtype) for s in streams])
        n = len(streams)
        cond_ids = np.repeat(cond, n, axis=0)
        uncond_ids = np.repeat(uncond, n, axis=0)
        noise = None
        for t in range(T, 0, -1):
            k = (T - t) % NOISE_BLOCK
            if k == 0 and t > 1:
                steps = min(NOISE_BLOCK, t - 1)
                noise = np.stack([normal(s, (steps,) + shape, dtype) for s in streams], axis=1)
            eps_hat = _guided_eps(model, x, t, cond_ids, uncond_ids, guidance_scale)
            z = noise[k] if t > 1 else None
            x = p_sample_step(x, t, eps_hat, z, schedule)
        out[start : start + n] = x
    if clamp:
        np.clip(out, -1.0, 1.0, out=out)
    return out


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 2000
    lr: float = 1e-4
    p_drop: float = 0.1
    seed: int = 0
    latent: bool = False
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0:
            raise ValueError("batch_size, steps and lr must be positive")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled partition of ``range(n)`` for one epoch; the last batch may be short."""
    order = RandomStream(seed, _TRAIN_SHUFFLE + epoch).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batch_for_step(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    per_epoch = -(-n // batch_size)
    return epoch_batches(n, batch_size, seed, step // per_epoch)[step % per_epoch]


def step_stream(seed: int, step: int) -> RandomStream:
    return RandomStream(seed, _TRAIN_NOISE + step)


def train_loop(
    images: np.ndarray,
    ids: np.ndarray,
    model,
    schedule: NoiseSchedule,
    config: TrainConfig,
    opt_state: AdamState | None = None,
    params: dict | None = None,
    trainable=None,
    loss_fn=None,
    grad_hook=None,
    log_file=None,
    check_range: bool = True,
):
    """Adam over shuffled minibatches, resuming from ``opt_state.step``.

    ``params`` defaults to ``model.params``; ``trainable`` names the entries
    to update (default: all of them, token table included). ``grad_hook(grads)`` may
    edit gradients before the update. ``loss_fn(batch_images, batch_ids,
    stream, step)`` overrides the plain noise-prediction loss. Everything drawn at
    step ``k`` depends only on ``(config.seed, k)``, so a resumed run matches
    an uninterrupted one bit for bit.
    """
    n = len(images)
    if n == 0:
        raise ValueError("dataset is empty")
    opt_state = opt_state or AdamState()
    params = model.params if params is None else params
    if trainable is None:
        trainable = list(params)
    train_params = {k: params[k] for k in trainable}
    if loss_fn is None:

        def loss_fn(x0, batch_ids, stream, step):
            return training_loss(x0, batch_ids, model, schedule, stream, config.p_drop, check_range)

    losses = []
    for step in range(opt_state.step, config.steps):
        idx = batch_for_step(n, config.batch_size, config.seed, step)
        ag.zero_grad(params.values())
        loss = loss_fn(images[idx], ids[idx], step_stream(config.seed, step), step)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        ag.backward(loss)
        grads = {k: p.grad for k, p in train_params.items()}
        if grad_hook is not None:
            grad_hook(grads)
        adam_step(train_params, grads, opt_state, config.lr)
        losses.append(value)
        if log_file is not None and (step % config.log_every == 0 or step == config.steps - 1):
            log_file.write(f"{step}\t{value:.6f}\n")
            log_file.flush()
        if step % config.log_every == 0:
            log.info("step %d loss %.5f", step, value)
    ag.zero_grad(params.values())
    return opt_state, losses
