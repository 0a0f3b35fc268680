"""Tiny convolutional autoencoder for the optional latent-space mode.

A (1, s, s) image maps to a (4, s/2, s/2) latent. Latents are divided by
their training-set standard deviation so diffusion sees roughly unit scale.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .optim import AdamState, adam_step
from .rng import RandomStream

LATENT_CHANNELS = 4


@dataclass
class AutoencoderConfig:
    image_size: int = 32
    hidden: int = 16
    latent_channels: int = LATENT_CHANNELS
    steps: int = 400
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Autoencoder:
    config: AutoencoderConfig
    params: dict
    latent_scale: float = 1.0

    @property
    def latent_shape(self) -> tuple:
        s = self.config.image_size // 2
        return (self.config.latent_channels, s, s)

    def encode(self, x, scaled: bool = True) -> np.ndarray:
        with ag.no_grad():
            z = _encode(ag.as_tensor(np.asarray(x, dtype=ag.get_default_dtype())), self.params).data
        return z / self.latent_scale if scaled else z

    def decode(self, z, scaled: bool = True) -> np.ndarray:
        z = np.asarray(z, dtype=ag.get_default_dtype())
        if scaled:
            z = z * np.float32(self.latent_scale)
        with ag.no_grad():
            return _decode(ag.as_tensor(z), self.params).data


def init_autoencoder(config: AutoencoderConfig, stream: RandomStream) -> dict:
    h, c = config.hidden, config.latent_channels
    shapes = {
        "enc.conv1": (h, 1, 3),
        "enc.conv2": (h, h, 3),
        "enc.out": (c, h, 1),
        "dec.conv1": (h, c, 3),
        "dec.conv2": (h, h, 3),
        "dec.out": (1, h, 3),
    }
    params = {}
    for k, (name, (c_out, c_in, ks)) in enumerate(shapes.items()):
        bound = np.sqrt(6.0 / (c_in * ks * ks))
        params[f"{name}.w"] = ag.parameter(bound * (2.0 * stream.child(k).uniform((c_out, c_in, ks, ks)) - 1.0))
        params[f"{name}.b"] = ag.parameter(np.zeros(c_out))
    return params


def _conv(x, params, name, padding=1):
    return ag.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], padding=padding)


def _encode(x, params):
    h = ag.silu(_conv(x, params, "enc.conv1"))
    h = ag.silu(_conv(ag.avg_pool2(h), params, "enc.conv2"))
    return _conv(h, params, "enc.out", padding=0)


def _decode(z, params):
    h = ag.silu(_conv(z, params, "dec.conv1"))
    h = ag.silu(_conv(ag.upsample2(h), params, "dec.conv2"))
    return _conv(h, params, "dec.out")


def reconstruction_mse(ae: Autoencoder, images) -> float:
    images = np.asarray(images)
    return float(np.mean((ae.decode(ae.encode(images)) - images) ** 2))


def train_autoencoder(images, config: AutoencoderConfig, log_file=None) -> Autoencoder:
    """Minimise reconstruction MSE with Adam, then fit the latent scale."""
    images = np.asarray(images, dtype=ag.get_default_dtype())
    if images.ndim != 4 or images.shape[1] != 1:
        raise ValueError("expected images of shape (n, 1, s, s)")
    if images.min() < -1 - 1e-6 or images.max() > 1 + 1e-6:
        raise ValueError("training images must be normalised to [-1, 1]")
    config.image_size = images.shape[-1]
    params = init_autoencoder(config, RandomStream(config.seed, 11))
    state = AdamState()
    n = len(images)
    for step in range(config.steps):
        idx = RandomStream(config.seed, (1 << 40) + step).integers(n, min(config.batch_size, n))
        x = ag.Tensor(images[idx])
        ag.zero_grad(params.values())
        loss = ag.mse(_decode(_encode(x, params), params), x)
        ag.backward(loss)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, config.lr)
        if log_file is not None and step % 50 == 0:
            log_file.write(f"{step}\t{float(loss.data):.6f}\n")
    ag.zero_grad(params.values())
    ae = Autoencoder(config, params)
    ae.latent_scale = float(np.std(ae.encode(images, scaled=False))) or 1.0
    return ae
